"""Small two-head convolutional network with hand-written backprop and SGD.

Images flow through the trunk in NHWC layout. Every conv block is a 'same'
padded KxK convolution, ReLU and 2x2 max-pool; the pooled map is flattened
into one hidden fully-connected ReLU layer whose output feeds two parallel
linear heads (10 class logits, 4 rotation logits).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

N_CLASSES = 10
N_ROTATIONS = 4

CHECKPOINT_MAGIC = b"NLAB"
CHECKPOINT_VERSION = 1


class InputShapeError(ValueError):
    pass


class NumericError(RuntimeError):
    """Raised when a gradient or parameter becomes non-finite."""

    def __init__(self, message, *, epoch=None, batch=None, block=None):
        super().__init__(f"{message} (epoch={epoch}, batch={batch}, block={block})")
        self.epoch = epoch
        self.batch = batch
        self.block = block


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int] = (32, 32, 3)  # H, W, C
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    hidden: int = 64
    n_classes: int = N_CLASSES
    n_rotations: int = N_ROTATIONS

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        h, w, c = self.input_shape
        scale = 2 ** len(self.conv_channels)
        if h % scale or w % scale:
            raise ValueError(f"input {h}x{w} not divisible by pooling factor {scale}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.n_classes != N_CLASSES or self.n_rotations != N_ROTATIONS:
            raise ValueError("heads are fixed at 10 class and 4 rotation outputs")

    @property
    def feature_map_size(self) -> int:
        h, w, c = self.input_shape
        scale = 2 ** len(self.conv_channels)
        last = self.conv_channels[-1] if self.conv_channels else c
        return (h // scale) * (w // scale) * last

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter blocks in their declared (serialization) order."""
        k = self.kernel_size
        shapes = []
        cin = self.input_shape[2]
        for i, cout in enumerate(self.conv_channels):
            shapes.append((f"conv{i}.w", (k * k * cin, cout)))  # rows ordered (kh, kw, cin)
            shapes.append((f"conv{i}.b", (cout,)))
            cin = cout
        shapes += [
            ("fc.w", (self.feature_map_size, self.hidden)),
            ("fc.b", (self.hidden,)),
            ("class_head.w", (self.hidden, self.n_classes)),
            ("class_head.b", (self.n_classes,)),
            ("rot_head.w", (self.hidden, self.n_rotations)),
            ("rot_head.b", (self.n_rotations,)),
        ]
        return shapes

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class LossBundle:
    class_loss: float
    rot_loss: float
    total: float
    per_sample_class_loss: np.ndarray


@dataclass
class TwoHeadNetwork:
    arch: Architecture
    params: dict[str, np.ndarray]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def initialize(cls, arch: Architecture, seed: int = 0, dtype=np.float32) -> "TwoHeadNetwork":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.

        A bias uses the fan-in of its layer's weight.
        """
        rng = np.random.default_rng(seed)
        params = {}
        fan = 1
        for name, shape in arch.param_shapes():
            if name.endswith(".w"):
                fan = shape[0]
            bound = 1.0 / np.sqrt(fan)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(arch, params)

    @property
    def dtype(self):
        return self.params["fc.w"].dtype

    def copy(self) -> "TwoHeadNetwork":
        return TwoHeadNetwork(self.arch, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "TwoHeadNetwork":
        return TwoHeadNetwork(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # ------------------------------------------------------------------
    def features(self, x: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        h, w, c = self.arch.input_shape
        if x.ndim != 4 or x.shape[1:] != (h, w, c):
            raise InputShapeError(f"expected batch of shape (B, {h}, {w}, {c}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        k = self.arch.kernel_size
        cache = {"conv": []}
        for i in range(len(self.arch.conv_channels)):
            cols = _im2col(x, k)
            wmat, b = self.params[f"conv{i}.w"], self.params[f"conv{i}.b"]
            bsz, hh, ww, _ = x.shape
            pre = (cols @ wmat + b).reshape(bsz, hh, ww, -1)
            if keep_cache:
                pooled, mask = _relu_maxpool2(pre)
                cache["conv"].append((x.shape, cols, mask))
            else:  # max-pool and ReLU commute
                pooled = np.maximum(_maxpool2_fast(pre), 0)
            x = pooled
        flat = x.reshape(x.shape[0], -1)
        hid_pre = flat @ self.params["fc.w"] + self.params["fc.b"]
        feat = np.maximum(hid_pre, 0)
        if keep_cache:
            cache["flat"] = flat
            cache["pooled_shape"] = x.shape
            cache["hid_mask"] = hid_pre > 0
            cache["feat"] = feat
            self._cache = cache
        return feat

    def forward(self, x: np.ndarray, keep_cache: bool = False) -> tuple[np.ndarray, np.ndarray]:
        feat = self.features(x, keep_cache=keep_cache)
        class_logits = feat @ self.params["class_head.w"] + self.params["class_head.b"]
        rot_logits = feat @ self.params["rot_head.w"] + self.params["rot_head.b"]
        return class_logits, rot_logits

    def backward(self, d_class: np.ndarray, d_rot: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradients w.r.t. both logit arrays.

        Requires the cache of the preceding ``forward(..., keep_cache=True)``.
        """
        cache = self._cache
        if not cache:
            raise RuntimeError("backward called without a cached forward pass")
        p = self.params
        feat = cache["feat"]
        grads = {
            "class_head.w": feat.T @ d_class,
            "class_head.b": d_class.sum(axis=0),
            "rot_head.w": feat.T @ d_rot,
            "rot_head.b": d_rot.sum(axis=0),
        }
        d_feat = d_class @ p["class_head.w"].T + d_rot @ p["rot_head.w"].T
        d_hid = d_feat * cache["hid_mask"]
        grads["fc.w"] = cache["flat"].T @ d_hid
        grads["fc.b"] = d_hid.sum(axis=0)
        d_x = (d_hid @ p["fc.w"].T).reshape(cache["pooled_shape"])
        k = self.arch.kernel_size
        for i in reversed(range(len(self.arch.conv_channels))):
            in_shape, cols, mask = cache["conv"][i]
            d_pre = _relu_maxpool2_backward(d_x, mask)
            d_pre = d_pre.reshape(-1, d_pre.shape[-1])
            grads[f"conv{i}.w"] = cols.T @ d_pre
            grads[f"conv{i}.b"] = d_pre.sum(axis=0)
            if i > 0:
                d_x = _col2im(d_pre @ p[f"conv{i}.w"].T, in_shape, k)
        return grads


# ---------------------------------------------------------------------------
# conv / pool primitives (NHWC)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, k*k*C) patches ordered (kh, kw, C)."""
    pad = k // 2
    bsz, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(bsz * h * w, k * k * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    pad = k // 2
    bsz, h, w, c = shape
    dcols = dcols.reshape(bsz, h, w, k, k, c)
    dxp = np.zeros((bsz, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad:pad + h, pad:pad + w, :]


def _pool_quads(x: np.ndarray):
    bsz, h, w, c = x.shape
    r = x.reshape(bsz, h // 2, 2, w // 2, 2 * c)
    top, bot = r[:, :, 0], r[:, :, 1]
    return top[..., :c], top[..., c:], bot[..., :c], bot[..., c:]


def _maxpool2_fast(x: np.ndarray) -> np.ndarray:
    a, b, c, d = _pool_quads(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def _relu_maxpool2(pre: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ReLU then 2x2/2 max-pool, plus the backward mask.

    The mask (shape (B, H/2, 2, W/2, 2, C), a view of (B, H, W, C)) marks the
    one position per window that receives the gradient: the first maximum in
    row-major order, and only where the pre-activation is positive.
    """
    a, b, c, d = _pool_quads(pre)
    ab, cd = np.maximum(a, b), np.maximum(c, d)
    top = ab >= cd
    left_top = b <= a
    left_bot = d <= c
    bsz, h, w, ch = pre.shape
    mask = np.empty((bsz, h // 2, 2, w // 2, 2 * ch), dtype=bool)
    mask[:, :, 0, :, :ch] = top & left_top
    mask[:, :, 0, :, ch:] = top & ~left_top
    mask[:, :, 1, :, :ch] = ~top & left_bot
    mask[:, :, 1, :, ch:] = ~top & ~left_bot
    mask &= (pre > 0).reshape(mask.shape)
    pooled = np.maximum(np.maximum(ab, cd), 0)
    return pooled, mask.reshape(bsz, h // 2, 2, w // 2, 2, ch)


def _relu_maxpool2_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    bsz, h2, w2, c = dy.shape
    d = dy[:, :, None, :, None, :] * mask
    return d.reshape(bsz, h2 * 2, w2 * 2, c)


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels.astype(np.intp, copy=False)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample -log softmax(logits)[label]."""
    labels = _check_labels(labels, logits.shape[1])
    logp = log_softmax(logits)
    return -logp[np.arange(len(labels)), labels]


def softmax_cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d loss_i / d logits_i for each row (softmax minus one-hot)."""
    labels = _check_labels(labels, logits.shape[1])
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1
    return g


def predict_confidence(class_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(class_logits)):
        raise NumericError("non-finite logits in predict_confidence")
    probs = softmax(class_logits)
    return probs.argmax(axis=1), probs.max(axis=1)


def weighted_loss(
    class_logits: np.ndarray,
    rot_logits: np.ndarray,
    class_labels: np.ndarray,
    rot_labels: np.ndarray,
    class_weight: np.ndarray,
    rot_weight: np.ndarray,
) -> tuple[LossBundle, np.ndarray, np.ndarray]:
    """Batch mean of w_c * CE_class + w_r * CE_rot and its logit gradients.

    Every training objective in this package is one choice of per-sample
    weights (w_c, w_r).
    """
    bsz = class_logits.shape[0]
    ce_c = softmax_cross_entropy(class_logits, class_labels)
    ce_r = softmax_cross_entropy(rot_logits, rot_labels)
    wc = np.asarray(class_weight, dtype=class_logits.dtype)
    wr = np.asarray(rot_weight, dtype=rot_logits.dtype)
    d_class = softmax_cross_entropy_grad(class_logits, class_labels) * (wc / bsz)[:, None]
    d_rot = softmax_cross_entropy_grad(rot_logits, rot_labels) * (wr / bsz)[:, None]
    bundle = LossBundle(
        class_loss=float(np.mean(wc * ce_c)),
        rot_loss=float(np.mean(wr * ce_r)),
        total=float(np.mean(wc * ce_c + wr * ce_r)),
        per_sample_class_loss=ce_c,
    )
    return bundle, d_class, d_rot


# ---------------------------------------------------------------------------
# optimizer


class Sgd:
    """SGD with heavy-ball momentum and L2 weight decay (PyTorch convention)."""

    def __init__(self, cfg: SgdConfig):
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, net: TwoHeadNetwork, grads: dict[str, np.ndarray], *, epoch=None, batch=None):
        cfg = self.cfg
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient", epoch=epoch, batch=batch, block=name)
        for name, g in grads.items():
            theta = net.params[name]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * theta
            if cfg.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else cfg.momentum * v + g
                self.velocity[name] = v
                g = v
            theta -= (cfg.learning_rate * g).astype(theta.dtype, copy=False)
            if not np.all(np.isfinite(theta)):
                raise NumericError("non-finite parameter", epoch=epoch, batch=batch, block=name)


def backward_and_step(
    net: TwoHeadNetwork,
    opt: Sgd,
    d_class: np.ndarray,
    d_rot: np.ndarray,
    *,
    epoch=None,
    batch=None,
) -> dict[str, np.ndarray]:
    grads = net.backward(d_class, d_rot)
    opt.step(net, grads, epoch=epoch, batch=batch)
    return grads


# ---------------------------------------------------------------------------
# checkpoints: "NLAB" | u32 version | u32 len | architecture JSON | f32 LE blocks


def save_checkpoint(net: TwoHeadNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def checkpoint_bytes(net: TwoHeadNetwork) -> bytes:
    desc = net.arch.to_json().encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(desc)))
    buf.write(desc)
    for name, shape in net.arch.param_shapes():
        buf.write(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> TwoHeadNetwork:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an NLAB checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = Architecture.from_json(data[12:12 + n].decode("utf-8"))
    offset = 12 + n
    params = {}
    for name, shape in arch.param_shapes():
        count = int(np.prod(shape))
        block = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[name] = block.astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return TwoHeadNetwork(arch, params)
