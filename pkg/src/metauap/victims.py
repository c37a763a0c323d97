"""Victim classifiers: small convnets and an MLP, trained with plain SGD.

A loaded model is immutable and shareable; the forward pass is a pure
function of (params, batch). The final fully-connected layer is
zero-initialized, so an untrained model outputs identical logits for
every class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, tensor as T

ARCH_NAMES = ("mlp_tiny", "lenet5_gray", "lenet7_rgb")
_ARCH_IDS = {name: i for i, name in enumerate(ARCH_NAMES)}


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class VictimArch:
    name: str
    input_shape: tuple
    num_classes: int = 10

    def __post_init__(self):
        if self.name not in ARCH_NAMES:
            raise ValueError(f"unknown arch {self.name!r}, expected one of {ARCH_NAMES}")
        c, h, w = self.input_shape
        if self.name == "lenet5_gray" and (c, h, w) != (1, 28, 28):
            raise ValueError(f"lenet5_gray requires input 1x28x28, got {self.input_shape}")
        if self.name == "lenet7_rgb" and (c, h, w) != (3, 32, 32):
            raise ValueError(f"lenet7_rgb requires input 3x32x32, got {self.input_shape}")


@dataclass
class VictimModel:
    arch: VictimArch
    params: dict = field(repr=False)
    train_accuracy: float = 0.0
    pixel_range: tuple = (0.0, 1.0)

    def forward_logits(self, batch) -> T.Tensor:
        """Logits (B, num_classes) for a batch Tensor or array (B, C, H, W)."""
        x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
        if tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise T.ShapeMismatchError(
                f"batch shape {x.shape} does not match arch input {self.arch.input_shape}")
        wrapped = {k: T.Tensor(v) for k, v in self.params.items()}
        return _forward(self.arch, wrapped, x)

    def predict(self, batch) -> np.ndarray:
        return self.forward_logits(batch).data.argmax(axis=1)

    def accuracy(self, images, labels) -> float:
        return float((self.predict(images) == np.asarray(labels)).mean())


def _xavier(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(arch: VictimArch, seed: int) -> dict:
    """Fresh parameters in the fixed serialization order; final layer zeroed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    c, h, w = arch.input_shape
    k = arch.num_classes
    p = {}
    if arch.name == "mlp_tiny":
        dim = c * h * w
        p["fc1.w"] = _xavier(rng, dim, 32, (dim, 32))
        p["fc1.b"] = np.zeros(32, dtype=np.float32)
        p["fc2.w"] = np.zeros((32, k), dtype=np.float32)
        p["fc2.b"] = np.zeros(k, dtype=np.float32)
    elif arch.name == "lenet5_gray":
        p["conv1.w"] = _xavier(rng, 1 * 25, 6 * 25, (6, 1, 5, 5))
        p["conv1.b"] = np.zeros(6, dtype=np.float32)
        p["conv2.w"] = _xavier(rng, 6 * 25, 16 * 25, (16, 6, 5, 5))
        p["conv2.b"] = np.zeros(16, dtype=np.float32)
        p["fc1.w"] = _xavier(rng, 400, 120, (400, 120))
        p["fc1.b"] = np.zeros(120, dtype=np.float32)
        p["fc2.w"] = _xavier(rng, 120, 84, (120, 84))
        p["fc2.b"] = np.zeros(84, dtype=np.float32)
        p["fc3.w"] = np.zeros((84, k), dtype=np.float32)
        p["fc3.b"] = np.zeros(k, dtype=np.float32)
    else:  # lenet7_rgb
        p["conv1.w"] = _xavier(rng, 3 * 9, 8 * 9, (8, 3, 3, 3))
        p["conv1.b"] = np.zeros(8, dtype=np.float32)
        p["conv2.w"] = _xavier(rng, 8 * 9, 16 * 9, (16, 8, 3, 3))
        p["conv2.b"] = np.zeros(16, dtype=np.float32)
        p["conv3.w"] = _xavier(rng, 16 * 9, 32 * 9, (32, 16, 3, 3))
        p["conv3.b"] = np.zeros(32, dtype=np.float32)
        p["fc1.w"] = _xavier(rng, 1152, 64, (1152, 64))
        p["fc1.b"] = np.zeros(64, dtype=np.float32)
        p["fc2.w"] = np.zeros((64, k), dtype=np.float32)
        p["fc2.b"] = np.zeros(k, dtype=np.float32)
    return p


def _conv_block(p, name, x, padding=0):
    y = T.conv2d(x, p[f"{name}.w"], padding=padding)
    b = T.reshape(p[f"{name}.b"], (1, -1, 1, 1))
    return T.relu(T.add(y, b))


def _fc(p, name, x, act=True):
    y = T.add(T.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])
    return T.relu(y) if act else y


def _forward(arch: VictimArch, p: dict, x: T.Tensor) -> T.Tensor:
    B = x.shape[0]
    x = T.sub(x, 0.5)  # center [0,1] pixels; the raw scale trains poorly
    if arch.name == "mlp_tiny":
        h = T.reshape(x, (B, -1))
        return _fc(p, "fc2", _fc(p, "fc1", h), act=False)
    if arch.name == "lenet5_gray":
        h = T.maxpool2x2(_conv_block(p, "conv1", x, padding=2))   # 6x14x14
        h = T.maxpool2x2(_conv_block(p, "conv2", h))              # 16x5x5
        h = T.reshape(h, (B, -1))
        return _fc(p, "fc3", _fc(p, "fc2", _fc(p, "fc1", h)), act=False)
    h = _conv_block(p, "conv1", x)                                # 8x30x30
    h = T.maxpool2x2(_conv_block(p, "conv2", h))                  # 16x14x14
    h = T.maxpool2x2(_conv_block(p, "conv3", h))                  # 32x6x6
    h = T.reshape(h, (B, -1))
    return _fc(p, "fc2", _fc(p, "fc1", h), act=False)


def forward_logits(model: VictimModel, batch) -> T.Tensor:
    return model.forward_logits(batch)


def train_victim(arch: VictimArch, data, epochs: int, seed: int,
                 lr: float = 0.05, batch_size: int = 32,
                 momentum: float = 0.9) -> VictimModel:
    """Minibatch SGD with momentum on cross-entropy; deterministic per seed."""
    images, labels = np.asarray(data.images), np.asarray(data.labels)
    if images.shape[0] == 0:
        raise ValueError("training data is empty")
    if labels.min() < 0 or labels.max() >= arch.num_classes:
        raise ValueError(f"labels outside [0, {arch.num_classes})")
    params = init_params(arch, seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5DEECE66D))
    n = images.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            leaves = {k: T.leaf(v) for k, v in params.items()}
            try:
                logits = _forward(arch, leaves, T.Tensor(images[sel]))
                loss = T.mean_(T.softmax_cross_entropy(logits, labels[sel]))
                grads = T.backward(loss)
            except T.NonFiniteError as e:
                raise DivergenceError(f"victim training diverged: {e}") from e
            for k in params:
                velocity[k] = np.float32(momentum) * velocity[k] + grads.wrt(leaves[k]).data
                params[k] = params[k] - np.float32(lr) * velocity[k]
    model = VictimModel(arch=arch, params=params)
    model.train_accuracy = model.accuracy(images, labels)
    return model


# --- serialization ---------------------------------------------------------


def save_checkpoint(model: VictimModel, path) -> None:
    tensors = dict(model.params)
    tensors["meta.arch_id"] = np.float32([_ARCH_IDS[model.arch.name]])
    tensors["meta.input_shape"] = np.float32(model.arch.input_shape)
    tensors["meta.num_classes"] = np.float32([model.arch.num_classes])
    tensors["meta.train_accuracy"] = np.float32([model.train_accuracy])
    tensors["meta.pixel_range"] = np.float32(model.pixel_range)
    checkpoint.save_tensors(path, tensors)


def load_checkpoint(path) -> VictimModel:
    tensors = checkpoint.load_tensors(path)
    arch = VictimArch(
        name=ARCH_NAMES[int(tensors.pop("meta.arch_id")[0])],
        input_shape=tuple(int(v) for v in tensors.pop("meta.input_shape")),
        num_classes=int(tensors.pop("meta.num_classes")[0]),
    )
    acc = float(tensors.pop("meta.train_accuracy")[0])
    pr = tuple(float(v) for v in tensors.pop("meta.pixel_range"))
    return VictimModel(arch=arch, params=tensors, train_accuracy=acc, pixel_range=pr)


def default_arch_for_shape(shape, num_classes: int) -> VictimArch:
    """Standard victim for an image shape: LeNets where they fit, MLP otherwise."""
    c, h, w = shape
    if (c, h, w) == (1, 28, 28):
        return VictimArch("lenet5_gray", (1, 28, 28), num_classes)
    if (c, h, w) == (3, 32, 32):
        return VictimArch("lenet7_rgb", (3, 32, 32), num_classes)
    return VictimArch("mlp_tiny", (c, h, w), num_classes)
