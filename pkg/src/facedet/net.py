"""Layers, losses, SGD, gradient checking, and the weight container.

The backbone is a deliberately small multi-stride stack: three stages of
3x3 conv + relu + 2x2 pooling whose outputs ("taps") are exposed at
strides 4/8/16, the same stride pattern a VGG-style network exposes at
its conv3/conv4/conv5 blocks.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

WEIGHT_MAGIC = b"FDW1"
WEIGHT_VERSION = 1


class Module:
    """Anything owning named parameters."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.parameters().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.parameters().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias_init: float = 0.0, gain: float = 1.0):
        self.stride = stride
        self.padding = padding
        self.w = Tensor(he_uniform(rng, (cout, cin, k, k), cin * k * k, gain), requires_grad=True)
        self.b = Tensor(np.full(cout, bias_init), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, gain: float = 1.0):
        self.w = Tensor(he_uniform(rng, (cin, cout), cin, gain), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b


@dataclass(frozen=True)
class BackboneSpec:
    """Per-stage channels and downsampling; taps list the exposed feature maps."""

    channels: tuple[int, ...] = (8, 16, 32)
    downsamples: tuple[int, ...] = (4, 2, 2)
    taps: tuple[int, ...] = (0, 1, 2)  # stage indices exposed as feature maps

    def __post_init__(self):
        if len(self.channels) != len(self.downsamples):
            raise ValueError("channels and downsamples must align")
        if not self.taps:
            raise ValueError("at least one tap required")
        strides = self.tap_strides()
        for s in strides:
            if s & (s - 1):
                raise ValueError(f"tap strides must be powers of two: {strides}")
        if list(strides) != sorted(set(strides)):
            raise ValueError(f"tap strides must be strictly increasing: {strides}")

    def tap_strides(self) -> tuple[int, ...]:
        cum = np.cumprod(self.downsamples)
        return tuple(int(cum[i]) for i in self.taps)

    @property
    def max_stride(self) -> int:
        return int(np.prod(self.downsamples))


class Backbone(Module):
    """Stacked conv/relu/pool stages exposing intermediate feature maps."""

    def __init__(self, spec: BackboneSpec, in_channels: int, rng: np.random.Generator):
        self.spec = spec
        self.convs: list[Conv2d] = []
        self._stage_blocks: list[int] = []
        prev = in_channels
        for ch, down in zip(spec.channels, spec.downsamples):
            nblocks = int(round(math.log2(down)))
            if 2 ** nblocks != down:
                raise ValueError(f"stage downsample must be a power of two: {down}")
            self._stage_blocks.append(nblocks)
            for _ in range(nblocks):
                # small positive bias keeps early relu taps alive
                self.convs.append(Conv2d(prev, ch, 3, rng, padding=1, bias_init=0.01))
                prev = ch

    def __call__(self, image: Tensor) -> list[tuple[Tensor, int]]:
        """Forward an NCHW image; returns one (feature map, stride) per tap.

        The image is zero-padded up to the largest stride so every pooling
        divides evenly; RoI coordinates stay in the original frame.
        """
        x = T.pad_to_multiple(image, self.spec.max_stride)
        taps: list[tuple[Tensor, int]] = []
        it = iter(self.convs)
        stride = 1
        for stage, nblocks in enumerate(self._stage_blocks):
            for _ in range(nblocks):
                x = T.max_pool2d(T.relu(next(it)(x)), 2)
                stride *= 2
            if stage in self.spec.taps:
                taps.append((x, stride))
        return taps


# -- losses ----------------------------------------------------------------

def softmax_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows; gradient is (softmax - onehot)/n."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range [0,{k}): {labels}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    p = np.exp(logp)

    def bw(g):
        grad = p.copy()
        grad[np.arange(n), labels] -= 1.0
        T.accumulate(logits, float(g) * grad / n)

    return T.make_op(np.float64(loss), (logits,), bw)


def smooth_l1_loss(pred: Tensor, target, inside_weights=None) -> Tensor:
    """Huber-style loss: 0.5 d^2 for |d|<1 else |d|-0.5, averaged over weighted entries."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    w = np.ones_like(target) if inside_weights is None else np.asarray(inside_weights, dtype=np.float64)
    if w.shape != target.shape:
        raise ValueError(f"shape mismatch: weights {w.shape} vs target {target.shape}")
    denom = max(1, int(np.count_nonzero(w)))
    d = pred.data - target
    per = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    loss = float((w * per).sum() / denom)

    def bw(g):
        dd = np.where(np.abs(d) < 1.0, d, np.sign(d))
        T.accumulate(pred, float(g) * w * dd / denom)

    return T.make_op(np.float64(loss), (pred,), bw)


def sgd_step(params: dict[str, Tensor], lr: float) -> None:
    """Plain fixed-rate SGD: p <- p - lr * grad, in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive: {lr}")
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * p.grad


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter max relative error of analytic vs central-difference gradients."""

    eps: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def summary(self) -> str:
        lines = [f"gradient check (eps={self.eps:g})"]
        for name, err in sorted(self.errors.items()):
            lines.append(f"  {name}: max rel err {err:.3e}")
        lines.append(f"  overall max: {self.max_error:.3e}")
        return "\n".join(lines)


def finite_diff_check(loss_fn, params: dict[str, Tensor], eps: float = 1e-5,
                      max_entries: int = 200, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of loss_fn() against central differences.

    loss_fn re-runs the forward pass from current parameter values.  For
    parameters larger than max_entries a random subsample of entries
    (at least max_entries) is probed.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps outside [1e-7, 1e-3]: {eps}")
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    report = GradCheckReport(eps=eps)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn().data)
            flat[i] = orig - eps
            lm = float(loss_fn().data)
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-6)
            worst = max(worst, err)
        report.errors[name] = worst
    return report


# -- weight container ---------------------------------------------------------

def save_weights(path, arrays: dict[str, np.ndarray]) -> None:
    """Versioned container: magic, version, JSON manifest, raw LE float64 data."""
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(mbytes)))
        f.write(mbytes)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHT_MAGIC:
            raise ValueError(f"{path}: not a weight file (magic {magic!r})")
        version, mlen = struct.unpack("<II", f.read(8))
        if version != WEIGHT_VERSION:
            raise ValueError(f"{path}: unsupported weight version {version}")
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for entry in manifest:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated data for {entry['name']}")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise ValueError(f"{path}: trailing data")
    return out


def load_into(module: Module, path) -> None:
    """Load a weight file into a module, rejecting any name/shape mismatch."""
    arrays = load_weights(path)
    params = module.parameters()
    if set(arrays) != set(params):
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        raise ValueError(f"weight manifest mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, arr in arrays.items():
        if arr.shape != params[name].data.shape:
            raise ValueError(f"shape mismatch for {name}: file {arr.shape} vs model {params[name].data.shape}")
        params[name].data[...] = arr
