"""Accuracy evaluation, uncertainty metrics, and test-time adaptation.

Evaluation samples the posterior ``p_eval`` times per episode, averages the
class probabilities, and scores the argmax on the query set; reports carry
a 95% confidence interval over episodes. Uncertainty follows the
1000-weight-sample protocol: predictive entropy of the averaged
distribution, expected per-sample entropy, and their difference (mutual
information / BALD). Adaptation tunes a copy of the hypernetwork (and flow)
on the support set with a fixed noise realization, leaving the original
checkpoint untouched.

Episode-level parallelism is capped by the BHMAML_THREADS environment
variable; per-episode rng streams and fixed aggregation order keep results
bitwise independent of the thread count.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metatrain as mt
from .autodiff import Tensor
from .episodes import Dataset, TaskEpisode, sample_episode
from .errors import ConfigError, ContractError


def _thread_count() -> int:
    raw = os.environ.get("BHMAML_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class EvalReport:
    n_episodes: int
    accuracy_mean: float
    ci95: float  # 1.96 * stderr over episodes
    per_episode: np.ndarray

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("episode,accuracy\n")
            for i, acc in enumerate(self.per_episode):
                fh.write(f"{i},{acc!r}\n")


@dataclass
class UncertaintyReport:
    pred_entropy: np.ndarray  # [Q], entropy of the averaged distribution
    exp_entropy: np.ndarray  # [Q], mean per-sample entropy
    mutual_information: np.ndarray  # [Q], BALD = pred - expected
    probs: np.ndarray  # [S, Q, N]


def _report(per_episode: list[float]) -> EvalReport:
    accs = np.asarray(per_episode)
    n = len(accs)
    stderr = float(accs.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EvalReport(
        n_episodes=n,
        accuracy_mean=float(accs.mean()),
        ci95=1.96 * stderr,
        per_episode=accs,
    )


def evaluate(
    ckpt: mt.Checkpoint,
    dataset: Dataset,
    split: str,
    n_episodes: int,
    p_eval: int | None = None,
    seed: int = 0,
    adapt_steps: int = 0,
    adapt_lr: float = 0.01,
) -> EvalReport:
    """Posterior-averaged accuracy with a 95% CI over episodes.

    ``adapt_steps > 0`` applies per-episode hypernetwork adaptation before
    prediction (the "+ adaptation" protocol).
    """
    if n_episodes < 1:
        raise ContractError("evaluate: n_episodes must be >= 1")
    cfg = ckpt.config
    if tuple(dataset.input_shape) != tuple(cfg.input_shape):
        raise ConfigError(
            f"dataset inputs {dataset.input_shape} do not match checkpoint {cfg.input_shape}"
        )
    p = cfg.p_samples if p_eval is None else p_eval
    children = np.random.SeedSequence(seed).spawn(n_episodes)

    def one(i: int) -> float:
        rng = np.random.default_rng(children[i])
        ep = sample_episode(dataset, split, cfg.n_way, cfg.k_shot, cfg.n_query, rng)
        target = ckpt
        if adapt_steps > 0:
            target = adapt(ckpt, ep, adapt_steps, adapt_lr, seed=i)
        return mt.episode_accuracy(target.state, target.config, ep, p, rng)

    workers = _thread_count()
    if workers == 1:
        per_episode = [one(i) for i in range(n_episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_episode = list(pool.map(one, range(n_episodes)))
    return _report(per_episode)


def predictive_samples(
    ckpt: mt.Checkpoint, episode: TaskEpisode, s: int = 1000,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """s independent posterior draws of query predictions: (probs, logits)."""
    if s < 2:
        raise ContractError("predictive_samples: s must be >= 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    return mt.sample_predictions(ckpt.state, ckpt.config, episode, s, rng)


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.clip(probs, 1e-12, None)
    return -(p * np.log(p)).sum(axis=axis)


def uncertainty_metrics(probs: np.ndarray) -> UncertaintyReport:
    """Decompose sample uncertainty: H(mean), mean(H), and their gap (BALD)."""
    if probs.ndim != 3 or probs.shape[0] < 2:
        raise ContractError(f"uncertainty_metrics: need [S>=2, Q, N] samples, got {probs.shape}")
    pred = entropy(probs.mean(axis=0))
    exp = entropy(probs).mean(axis=0)
    return UncertaintyReport(
        pred_entropy=pred,
        exp_entropy=exp,
        mutual_information=pred - exp,
        probs=probs,
    )


def adapt(
    ckpt: mt.Checkpoint, episode: TaskEpisode, steps: int, lr: float, seed: int = 0
) -> mt.Checkpoint:
    """Tune a copy of the hypernetwork (and flow) on the support set.

    The universal weights stay frozen; the objective is the fixed-noise
    episode loss with the support set as likelihood target and gamma at its
    final annealed value. The input checkpoint is never mutated.
    """
    if steps < 1:
        raise ContractError("adapt: steps must be >= 1")
    cfg = ckpt.config
    if cfg.method in ("maml",):
        raise ConfigError("adapt applies to hypernetwork methods, not maml")
    state = ckpt.state
    new_state = mt.ModelState(
        net=state.net,
        theta=state.theta,
        stats=state.stats,
        phi=state.phi.copy() if state.phi is not None else None,
        eta=state.eta.copy() if state.eta is not None else None,
    )
    new_cfg = dataclasses.replace(cfg)
    params = new_state.phi.tensors() + (new_state.eta.tensors() if new_state.eta else [])
    opt = mt.Adam(params, lr)
    d = new_state.net.head_dim
    noise = np.random.default_rng(seed).standard_normal((cfg.p_samples, d))
    for _ in range(steps):
        loss = mt.episode_loss(
            new_state, new_cfg, episode, cfg.gamma_max, rng=None,
            noise=noise, likelihood="support",
        )
        grads = ad.backward(loss, params)
        opt.step(grads)
    return mt.Checkpoint(
        config=new_cfg, state=new_state, epoch=ckpt.epoch,
        best_val=ckpt.best_val, rng_state=copy.deepcopy(ckpt.rng_state),
    )


def support_loss(ckpt: mt.Checkpoint, episode: TaskEpisode, seed: int = 0) -> float:
    """Fixed-noise support objective used by the adaptation descent check."""
    cfg = ckpt.config
    d = ckpt.state.net.head_dim
    noise = np.random.default_rng(seed).standard_normal((cfg.p_samples, d))
    loss = mt.episode_loss(
        ckpt.state, cfg, episode, cfg.gamma_max, rng=None,
        noise=noise, likelihood="support",
    )
    return loss.item()
