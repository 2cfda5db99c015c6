"""Neural layers: parameter trees, linear/conv blocks, losses, encoders.

Feature maps are channels-last [B, H, W, C]; conv kernels are [3, 3, Cin,
Cout]. Episode-level code normalizes with batch statistics in both phases
(support and query); running statistics are updated only by the training
loop and serve the eval-mode contract of ``conv_block``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from . import _kernels as kernels
from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


class ParamSet:
    """Ordered, uniquely named tree of tensors (names like "conv1/weight").

    Insertion order defines the flatten/unflatten layout, which is a
    bijection (round-trip tested).
    """

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._items: dict[str, Tensor] = {}
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._items:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._items[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def items(self):
        return self._items.items()

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self._items.values())

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._items.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.total_count:
            raise DimensionError(
                f"flat vector of length {vec.size} does not match {self.total_count} parameters"
            )
        off = 0
        for t in self._items.values():
            t.data = vec[off : off + t.size].reshape(t.shape).astype(np.float64).copy()
            off += t.size

    def copy(self) -> "ParamSet":
        return ParamSet(
            (name, Tensor(t.data.copy(), requires_grad=t.requires_grad))
            for name, t in self._items.items()
        )


class LayerSpec(NamedTuple):
    kind: str  # linear | conv3x3 | batchnorm | relu | maxpool2 | avgpool
    in_size: int
    out_size: int


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture description for the shared feature extractor."""

    kind: str  # "mlp" or "conv4"
    input_shape: tuple[int, ...]
    emb: int = 64
    hidden: int = 64  # mlp only
    channels: int = 64  # conv4 only

    def __post_init__(self):
        if self.kind not in ("mlp", "conv4"):
            raise ContractError(f"unknown encoder kind {self.kind!r}")
        if self.emb <= 0 or self.hidden <= 0 or self.channels <= 0:
            raise ContractError("encoder sizes must be positive")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise DimensionError(f"mlp encoder expects vector inputs, got {self.input_shape}")
        if self.kind == "conv4":
            if len(self.input_shape) != 3:
                raise DimensionError(
                    f"conv4 encoder expects [H, W, C] inputs, got {self.input_shape}"
                )
            if self.emb != self.channels:
                raise ContractError(
                    f"conv4 embedding width {self.emb} must equal channel count {self.channels}"
                )

    def describe(self) -> list[LayerSpec]:
        if self.kind == "mlp":
            d = self.input_shape[0]
            return [
                LayerSpec("linear", d, self.hidden),
                LayerSpec("relu", self.hidden, self.hidden),
                LayerSpec("linear", self.hidden, self.hidden),
                LayerSpec("relu", self.hidden, self.hidden),
                LayerSpec("linear", self.hidden, self.emb),
            ]
        layers = []
        cin = self.input_shape[2]
        for _ in range(4):
            layers += [
                LayerSpec("conv3x3", cin, self.channels),
                LayerSpec("batchnorm", self.channels, self.channels),
                LayerSpec("relu", self.channels, self.channels),
                LayerSpec("maxpool2", self.channels, self.channels),
            ]
            cin = self.channels
        layers.append(LayerSpec("avgpool", self.channels, self.emb))
        return layers


# -- initializers ---------------------------------------------------------

def he_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> tuple[ParamSet, ParamSet]:
    """Returns (trainable parameters, batchnorm running stats)."""
    params = ParamSet()
    stats = ParamSet()
    if spec.kind == "mlp":
        sizes = [spec.input_shape[0], spec.hidden, spec.hidden, spec.emb]
        for i in range(3):
            params.add(f"fc{i + 1}/weight", he_init(rng, sizes[i], (sizes[i], sizes[i + 1])))
            params.add(f"fc{i + 1}/bias", zeros_param(sizes[i + 1]))
        return params, stats
    cin = spec.input_shape[2]
    for k in range(1, 5):
        params.add(f"conv{k}/weight", he_init(rng, 9 * cin, (3, 3, cin, spec.channels)))
        params.add(f"conv{k}/bias", zeros_param(spec.channels))
        params.add(f"bn{k}/gamma", Tensor(np.ones(spec.channels), requires_grad=True))
        params.add(f"bn{k}/beta", zeros_param(spec.channels))
        stats.add(f"bn{k}/mean", Tensor(np.zeros(spec.channels)))
        stats.add(f"bn{k}/var", Tensor(np.ones(spec.channels)))
        cin = spec.channels
    return params, stats


# -- layers ---------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x·w + b with the bias broadcast over the batch."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"linear: expected [B,i], [i,o], [o]; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear: shapes disagree, x {x.shape}, w {w.shape}, b {b.shape}")
    return ad.add(ad.matmul(x, w), b)


def conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """3x3 cross-correlation with padding 1, stride 1 (kernel backend)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3):
        raise DimensionError(f"conv3x3: expected [B,H,W,Ci] and [3,3,Ci,Co]; got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv3x3: channel mismatch, input {x.shape} vs kernel {w.shape}")
    y = kernels.conv3x3_forward(np.ascontiguousarray(x.data), np.ascontiguousarray(w.data))

    def vjp(g):
        if ad.is_grad_enabled():
            raise ContractError("second-order gradients through conv3x3 are not supported")
        gx, gw = kernels.conv3x3_backward(
            np.ascontiguousarray(x.data), np.ascontiguousarray(w.data), np.ascontiguousarray(g.data)
        )
        return Tensor(gx), Tensor(gw)

    def jvp(tx, tw):
        return kernels.conv3x3_forward(
            np.ascontiguousarray(tx), np.ascontiguousarray(w.data)
        ) + kernels.conv3x3_forward(np.ascontiguousarray(x.data), np.ascontiguousarray(tw))

    return ad._node(y, (x, w), vjp, jvp)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; odd trailing rows/columns are dropped."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2: expected [B,H,W,C], got {x.shape}")
    h, w = x.shape[1], x.shape[2]
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2: spatial dims must be >= 2, got {x.shape}")
    y, idx = kernels.maxpool2_forward(np.ascontiguousarray(x.data))

    def vjp(g):
        if ad.is_grad_enabled():
            raise ContractError("second-order gradients through maxpool2 are not supported")
        return (Tensor(kernels.maxpool2_backward(idx, np.ascontiguousarray(g.data), h, w)),)

    def jvp(t):
        win = (
            np.ascontiguousarray(t)[:, : (h // 2) * 2, : (w // 2) * 2, :]
            .reshape(t.shape[0], h // 2, 2, w // 2, 2, t.shape[3])
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(t.shape[0], h // 2, w // 2, t.shape[3], 4)
        )
        return np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]

    return ad._node(y, (x,), vjp, jvp)


def avgpool_spatial(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"avgpool: expected [B,H,W,C], got {x.shape}")
    return ad.reduce_mean(x, axis=(1, 2))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_stats: bool = False,
) -> Tensor:
    """Per-channel normalization over all axes but the last."""
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm: unknown mode {mode!r}")
    if x.shape[-1:] != gamma.shape:
        raise DimensionError(f"batchnorm: channel mismatch, x {x.shape} vs gamma {gamma.shape}")
    if mode == "eval":
        inv = (running_var.data + eps) ** -0.5
        return ad.add(ad.mul(ad.mul(ad.sub(x, running_mean.detach()), Tensor(inv)), gamma), beta)
    if x.shape[0] < 2:
        raise ContractError("batchnorm: batch size 1 in train mode (variance degenerate)")
    axes = tuple(range(x.ndim - 1))
    mu = ad.reduce_mean(x, axis=axes)
    xc = ad.sub(x, mu)
    var = ad.reduce_mean(ad.mul(xc, xc), axis=axes)
    inv = ad.power(ad.add(var, Tensor(eps)), -0.5)
    if update_stats:
        running_mean.data = (1.0 - momentum) * running_mean.data + momentum * mu.data
        running_var.data = (1.0 - momentum) * running_var.data + momentum * var.data
    return ad.add(ad.mul(ad.mul(xc, inv), gamma), beta)


def conv_block(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
    pool: bool = True,
    update_stats: bool = False,
) -> Tensor:
    """conv3x3 (padding 1) -> batchnorm -> ReLU -> optional 2x2 max pool."""
    if x.ndim != 4:
        raise DimensionError(f"conv_block: expected [B,H,W,C] input, got {x.shape}")
    if x.shape[1] < 2 or x.shape[2] < 2:
        if pool:
            raise DimensionError(f"conv_block: spatial dims must be >= 2 to pool, got {x.shape}")
    y = ad.add(conv3x3(x, w), b)
    y = batchnorm(y, gamma, beta, running_mean, running_var, mode, update_stats=update_stats)
    y = ad.relu(y)
    if pool:
        y = maxpool2(y)
    return y


# -- losses and probabilities ----------------------------------------------

def _shifted_exp(logits: Tensor) -> tuple[Tensor, np.ndarray]:
    # exact log-sum-exp shift; the per-row max is treated as a constant,
    # which leaves gradients unchanged
    m = np.max(logits.data, axis=1, keepdims=True)
    shift = Tensor(np.broadcast_to(m, logits.shape).copy())
    return ad.exp(ad.sub(logits, shift)), m[:, 0]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true labels."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: expected [B,N] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    if labels.min() < 0 or labels.max() >= n:
        raise IndexError(f"cross_entropy: label out of range [0, {n})")
    s, m = _shifted_exp(logits)
    lse = ad.add(ad.log(ad.reduce_sum(s, axis=1)), Tensor(m))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = ad.reduce_sum(ad.mul(logits, Tensor(onehot)), axis=1)
    return ad.reduce_mean(ad.sub(lse, picked))


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise DimensionError(f"softmax: expected [B,N] logits, got {logits.shape}")
    s, _ = _shifted_exp(logits)
    rs = ad.reduce_sum(s, axis=1, keepdims=True)
    return ad.mul(s, ad.power(ad.expand(rs, logits.shape), -1.0))


# -- encoder application ----------------------------------------------------

def apply_encoder(
    spec: EncoderSpec,
    params: ParamSet,
    stats: ParamSet,
    x: Tensor,
    mode: str = "train",
    update_stats: bool = False,
) -> Tensor:
    """Map a batch of inputs to [B, emb] embeddings."""
    if x.ndim < 2 or x.shape[1:] != spec.input_shape:
        raise DimensionError(
            f"encoder expects batch of {spec.input_shape} inputs, got {x.shape}"
        )
    if spec.kind == "mlp":
        h = x
        for i in (1, 2):
            h = ad.relu(linear(h, params[f"fc{i}/weight"], params[f"fc{i}/bias"]))
        return linear(h, params["fc3/weight"], params["fc3/bias"])
    h = x
    for k in range(1, 5):
        pool = h.shape[1] >= 2 and h.shape[2] >= 2
        h = conv_block(
            h,
            params[f"conv{k}/weight"],
            params[f"conv{k}/bias"],
            params[f"bn{k}/gamma"],
            params[f"bn{k}/beta"],
            stats[f"bn{k}/mean"],
            stats[f"bn{k}/var"],
            mode,
            pool=pool,
            update_stats=update_stats,
        )
    if h.shape[1] * h.shape[2] == 1:
        return ad.reshape(h, (h.shape[0], h.shape[3]))
    return avgpool_spatial(h)
