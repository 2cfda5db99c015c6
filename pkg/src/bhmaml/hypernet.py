"""Hypernetwork: support set -> posterior-controlling parameters.

Support examples are put in a canonical order (by local class, then by raw
input bytes within a class), embedded, and enhanced with one-hot labels and
frozen-classifier predictions. Per-class row groups are mean-pooled and a
shared 3-layer MLP maps each class's pooled vector to that class's column
of head updates (plus bias); class outputs are concatenated to cover the
full head-weight vector. For the flow variant the class outputs are
mean-pooled into a single conditioning vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .episodes import TaskEpisode
from .errors import ContractError, DimensionError
from .targetnet import TargetNet, UniversalWeights, flatten_head, head_logits

SIGMA_FLOOR = 1e-4

KINDS = ("gaussian", "point", "cnf")


@dataclass
class EnhancedSupport:
    """Class-sorted support rows: concat(embedding, one-hot label, prediction)."""

    rows: Tensor  # [N*K, emb + 2*N]
    n_way: int
    k_shot: int


@dataclass
class HyperOutput:
    kind: str
    mu: Tensor | None = None  # [|head|]
    rho: Tensor | None = None  # [|head|], sigma = softplus(rho) + floor
    c: Tensor | None = None  # [c_dim]


def per_class_output_dim(kind: str, emb: int, c_dim: int) -> int:
    if kind == "gaussian":
        return 2 * (emb + 1)
    if kind == "point":
        return emb + 1
    if kind == "cnf":
        return c_dim
    raise ContractError(f"unknown hypernetwork kind {kind!r}")


def rho_init(sigma0: float) -> float:
    """Final-layer rho bias giving sigma ~= sigma0 at initialization."""
    return float(np.log(np.expm1(max(sigma0 - SIGMA_FLOOR, 1e-12))))


def init_hypernet(
    rng: np.random.Generator,
    emb: int,
    n_way: int,
    width: int,
    kind: str,
    c_dim: int = 64,
    sigma0: float = 0.05,
) -> nn.ParamSet:
    """3 fully-connected layers with ReLU between; zero-initialized output.

    Zero output weights make the posterior start centered at the universal
    head (mu = 0) with sigma ~= sigma0.
    """
    in_width = emb + 2 * n_way
    out_dim = per_class_output_dim(kind, emb, c_dim)
    phi = nn.ParamSet()
    phi.add("fc1/weight", nn.he_init(rng, in_width, (in_width, width)))
    phi.add("fc1/bias", nn.zeros_param(width))
    phi.add("fc2/weight", nn.he_init(rng, width, (width, width)))
    phi.add("fc2/bias", nn.zeros_param(width))
    phi.add("fc3/weight", nn.zeros_param((width, out_dim)))
    if kind == "gaussian":
        bias0 = np.concatenate([np.zeros(emb + 1), np.full(emb + 1, rho_init(sigma0))])
    else:
        bias0 = np.zeros(out_dim)
    phi.add("fc3/bias", Tensor(bias0, requires_grad=True))
    return phi


def canonical_support_order(episode: TaskEpisode) -> list[int]:
    """Deterministic support ordering: (local class, raw input bytes)."""
    return sorted(
        range(len(episode.support_y)),
        key=lambda i: (int(episode.support_y[i]), episode.support_x[i].tobytes()),
    )


def enhance(
    episode: TaskEpisode,
    net: TargetNet,
    theta: UniversalWeights,
    stats: nn.ParamSet,
    update_stats: bool = False,
) -> EnhancedSupport:
    """Embed the (canonically ordered) support set and append labels and
    frozen-classifier predictions.

    Gradients flow into the embeddings (and hence the encoder); the
    prediction branch is evaluated with the classifier frozen.
    """
    if len(episode.support_y) == 0:
        raise ContractError("enhance: episode has an empty support set")
    order = canonical_support_order(episode)
    xs = episode.support_x[order]
    ys = episode.support_y[order]
    e = net.encode(theta, stats, Tensor(xs), mode="train", update_stats=update_stats)
    with ad.no_grad():
        flat = flatten_head(theta.head).detach()
        yhat = nn.softmax(head_logits(e.detach(), flat, net.emb, net.n_way)).data
    onehot = np.zeros((len(ys), episode.n_way))
    onehot[np.arange(len(ys)), ys] = 1.0
    rows = ad.concat([e, Tensor(onehot), Tensor(yhat)], axis=1)
    return EnhancedSupport(rows=rows, n_way=episode.n_way, k_shot=episode.k_shot)


def hyper_forward(
    es: EnhancedSupport, phi: nn.ParamSet, kind: str, emb: int, c_dim: int = 64
) -> HyperOutput:
    """Mean-pool each class's rows, map through the shared MLP, and assemble
    the posterior-controlling parameters."""
    if kind not in KINDS:
        raise ContractError(f"unknown hypernetwork kind {kind!r}")
    in_width = phi["fc1/weight"].shape[0]
    if es.rows.shape[1] != in_width:
        raise DimensionError(
            f"hyper_forward: rows of width {es.rows.shape[1]} do not match input width {in_width}"
        )
    n, k = es.n_way, es.k_shot
    pooled = ad.concat(
        [es.rows[c * k : (c + 1) * k].mean(axis=0, keepdims=True) for c in range(n)], axis=0
    )
    h = ad.relu(nn.linear(pooled, phi["fc1/weight"], phi["fc1/bias"]))
    h = ad.relu(nn.linear(h, phi["fc2/weight"], phi["fc2/bias"]))
    out = nn.linear(h, phi["fc3/weight"], phi["fc3/bias"])  # [N, out_dim]
    if kind == "cnf":
        return HyperOutput(kind=kind, c=out.mean(axis=0))

    def assemble(cols: Tensor, bias_col: Tensor) -> Tensor:
        # per-class weight columns [N, emb] -> weight matrix [emb, N] -> flat
        w = ad.reshape(ad.transpose(cols), (emb * n,))
        return ad.concat([w, bias_col], axis=0)

    mu = assemble(out[:, :emb], out[:, emb])
    if kind == "point":
        return HyperOutput(kind=kind, mu=mu)
    rho = assemble(out[:, emb + 1 : 2 * emb + 1], out[:, 2 * emb + 1])
    return HyperOutput(kind=kind, mu=mu, rho=rho)
