"""The classified model: shared encoder plus a functional classifier head.

The head is a single fully-connected layer whose weights travel as a flat
vector so that gradient-updated weights and posterior samples flow through
one code path. Flat layout: row-major weight [emb, N] followed by bias [N].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import DimensionError


@dataclass
class UniversalWeights:
    """Point-wise shared parameters: encoder weights plus head weights."""

    encoder: nn.ParamSet
    head: nn.ParamSet  # "weight" [emb, N], "bias" [N]

    def head_dim(self) -> int:
        return self.head.total_count


class TargetNet:
    """Architecture bundle: encoder spec plus head sizing."""

    def __init__(self, encoder_spec: nn.EncoderSpec, n_way: int):
        self.encoder_spec = encoder_spec
        self.n_way = n_way
        self.emb = encoder_spec.emb

    @property
    def head_dim(self) -> int:
        return (self.emb + 1) * self.n_way

    def init_weights(self, rng: np.random.Generator) -> tuple[UniversalWeights, nn.ParamSet]:
        """Fresh universal weights and batchnorm running stats."""
        enc, stats = nn.init_encoder(self.encoder_spec, rng)
        head = nn.ParamSet(
            [
                ("weight", nn.he_init(rng, self.emb, (self.emb, self.n_way))),
                ("bias", nn.zeros_param(self.n_way)),
            ]
        )
        return UniversalWeights(encoder=enc, head=head), stats

    def encode(
        self,
        weights: UniversalWeights,
        stats: nn.ParamSet,
        x: Tensor,
        mode: str = "train",
        update_stats: bool = False,
    ) -> Tensor:
        return nn.apply_encoder(
            self.encoder_spec, weights.encoder, stats, x, mode=mode, update_stats=update_stats
        )


def flatten_head(head: nn.ParamSet) -> Tensor:
    """Head weights as one differentiable flat vector."""
    w, b = head["weight"], head["bias"]
    return ad.concat([ad.reshape(w, (w.size,)), b], axis=0)


def head_logits(e: Tensor, flat: Tensor, emb: int, n_way: int) -> Tensor:
    """Linear logits from a flat head-weight vector (sampled or updated)."""
    d = (emb + 1) * n_way
    if flat.ndim != 1 or flat.shape[0] != d:
        raise DimensionError(
            f"head_logits: flat head vector has shape {flat.shape}, expected ({d},)"
        )
    if e.ndim != 2 or e.shape[1] != emb:
        raise DimensionError(f"head_logits: embeddings {e.shape} do not match width {emb}")
    w = ad.reshape(flat[: emb * n_way], (emb, n_way))
    b = flat[emb * n_way :]
    return nn.linear(e, w, b)
