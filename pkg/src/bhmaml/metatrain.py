"""Episode losses and training loops for all four methods, plus checkpoints.

Methods: ``maml`` (gradient inner loop), ``hypermaml`` (point-wise
hypernetwork update), ``bhmaml_g`` (Gaussian posterior, closed-form KL) and
``bhmaml_cnf`` (conditional-flow posterior, Monte-Carlo KL). The objective
per episode is the mean over posterior samples of query cross-entropy plus
gamma times the KL to the standard-normal prior; gamma ramps linearly from
zero over the warmup epochs.

Checkpoint file format: magic "BHML", u32 format version, u64 manifest
length, JSON manifest (config as canonical JSON, epoch, best validation
accuracy, rng states, tensor table with byte offsets), then little-endian
float64 payloads. Round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from . import posteriors as po
from .autodiff import Tensor
from .episodes import Dataset, TaskEpisode, load_image_dataset, make_synthetic, sample_episode
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .hypernet import enhance, hyper_forward, init_hypernet
from .targetnet import TargetNet, UniversalWeights, flatten_head, head_logits

METHODS = ("maml", "hypermaml", "bhmaml_g", "bhmaml_cnf")

CKPT_MAGIC = b"BHML"
CKPT_VERSION = 1


@dataclass
class DataConfig:
    """Where episodes come from: a synthetic generator or a directory tree."""

    kind: str = "blobs"  # blobs | rings | image_dir
    path: str | None = None
    n_classes: int = 20
    dim: int = 20
    n_per_class: int = 40
    spread: float = 0.1
    separation: float = 4.0
    seed: int = 0

    def load(self) -> Dataset:
        if self.kind == "image_dir":
            if not self.path:
                raise ConfigError("data.kind 'image_dir' requires data.path")
            return load_image_dataset(self.path)
        return make_synthetic(
            self.kind, self.n_classes, self.dim, self.n_per_class, self.spread,
            self.seed, separation=self.separation,
        )


@dataclass
class TrainConfig:
    """Complete experiment description (serialized into every checkpoint)."""

    method: str = "bhmaml_g"
    data: DataConfig = field(default_factory=DataConfig)
    # episode shape
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    # model sizes
    encoder: str = "mlp"
    input_shape: tuple[int, ...] | None = None  # filled from the dataset
    enc_hidden: int = 64
    emb: int = 64
    hyper_width: int = 256
    c_dim: int = 64
    flow_hidden: int = 64
    flow_steps: int = 32
    t_prior: float = 0.1
    trace: str = "exact"
    hutchinson_probes: int = 64
    sigma0: float = 0.05
    # objective
    p_samples: int = 5
    gamma_max: float = 1e-4
    gamma_warmup_epochs: int | None = None  # default: first LR milestone
    # optimizer schedule
    lr: float = 0.01
    milestones: tuple[int, ...] = (51, 550)
    lr_decay: float = 0.3
    epochs: int = 40
    episodes_per_epoch: int = 100
    batch_tasks: int = 4
    val_episodes: int = 30
    # maml-only
    inner_lr: float = 0.3
    inner_steps: int = 3
    second_order: bool = False
    maml_adapt_all: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.p_samples < 1:
            raise ConfigError("p_samples must be >= 1")
        if not (0.0 < self.lr_decay < 1.0):
            raise ConfigError("lr_decay must lie in (0, 1)")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError("milestones must be strictly increasing")
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise ConfigError("episode shape must satisfy n_way>=2, k_shot>=1, n_query>=1")
        if self.encoder not in ("mlp", "conv4"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.method == "maml" and self.inner_steps < 1:
            raise ConfigError("maml needs inner_steps >= 1")

    def warmup(self) -> int:
        if self.gamma_warmup_epochs is not None:
            return self.gamma_warmup_epochs
        return self.milestones[0] if self.milestones else self.epochs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape) if self.input_shape is not None else None
        d["milestones"] = list(self.milestones)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        data = d.pop("data", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(data=DataConfig(**data), **d)
        if cfg.input_shape is not None:
            cfg.input_shape = tuple(cfg.input_shape)
        cfg.milestones = tuple(cfg.milestones)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


def anneal_gamma(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to gamma_max over the warmup epochs."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    warm = cfg.warmup()
    if warm <= 0:
        return cfg.gamma_max
    return cfg.gamma_max * min(1.0, epoch / warm)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Multi-step schedule: decay once per milestone reached (epochs are 0-based)."""
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.lr_decay**passed


class Adam:
    """Standard Adam with bias correction; parameters updated in place."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: list[Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            gd = g.data
            m *= self.beta1
            m += (1.0 - self.beta1) * gd
            v *= self.beta2
            v += (1.0 - self.beta2) * gd * gd
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class ModelState:
    net: TargetNet
    theta: UniversalWeights
    stats: nn.ParamSet
    phi: nn.ParamSet | None
    eta: nn.ParamSet | None


def _hyper_kind(method: str) -> str | None:
    return {"maml": None, "hypermaml": "point", "bhmaml_g": "gaussian", "bhmaml_cnf": "cnf"}[method]


def build_model(cfg: TrainConfig, rng: np.random.Generator) -> ModelState:
    if cfg.input_shape is None:
        raise ConfigError("input_shape must be set (from the dataset) before building")
    spec = nn.EncoderSpec(
        cfg.encoder, tuple(cfg.input_shape), emb=cfg.emb, hidden=cfg.enc_hidden,
        channels=cfg.emb if cfg.encoder == "conv4" else 64,
    )
    net = TargetNet(spec, cfg.n_way)
    theta, stats = net.init_weights(rng)
    kind = _hyper_kind(cfg.method)
    phi = None
    if kind is not None:
        phi = init_hypernet(rng, cfg.emb, cfg.n_way, cfg.hyper_width, kind,
                            c_dim=cfg.c_dim, sigma0=cfg.sigma0)
    eta = None
    if cfg.method == "bhmaml_cnf":
        eta = po.init_flow(rng, net.head_dim, hidden=cfg.flow_hidden, c_dim=cfg.c_dim)
    return ModelState(net=net, theta=theta, stats=stats, phi=phi, eta=eta)


def named_parameters(state: ModelState) -> list[tuple[str, Tensor]]:
    out = [(f"theta/encoder/{n}", t) for n, t in state.theta.encoder.items()]
    out += [(f"theta/head/{n}", t) for n, t in state.theta.head.items()]
    if state.phi is not None:
        out += [(f"phi/{n}", t) for n, t in state.phi.items()]
    if state.eta is not None:
        out += [(f"eta/{n}", t) for n, t in state.eta.items()]
    return out


# -- per-episode computations -------------------------------------------------

def maml_inner(
    state: ModelState,
    cfg: TrainConfig,
    support_x: np.ndarray,
    support_y: np.ndarray,
    alpha: float | None = None,
    steps: int | None = None,
    order: str | None = None,
) -> UniversalWeights:
    """Gradient-descent adaptation on support cross-entropy.

    ``order='first'`` detaches the adaptation Jacobian (the default);
    ``'second'`` keeps the inner gradients on the tape so meta-gradients
    differentiate through them.
    """
    alpha = cfg.inner_lr if alpha is None else alpha
    steps = cfg.inner_steps if steps is None else steps
    if steps < 1:
        raise ContractError("maml_inner: steps must be >= 1")
    order = order or ("second" if cfg.second_order else "first")
    if order not in ("first", "second"):
        raise ContractError(f"maml_inner: unknown order {order!r}")
    enc_items = list(state.theta.encoder.items())
    head_w = state.theta.head["weight"]
    head_b = state.theta.head["bias"]
    lr = Tensor(alpha)
    for _ in range(steps):
        weights = UniversalWeights(
            encoder=nn.ParamSet(enc_items),
            head=nn.ParamSet([("weight", head_w), ("bias", head_b)]),
        )
        e = state.net.encode(weights, state.stats, Tensor(support_x), mode="train")
        loss = nn.cross_entropy(nn.linear(e, head_w, head_b), support_y)
        wrt = [head_w, head_b] + ([t for _, t in enc_items] if cfg.maml_adapt_all else [])
        grads = ad.backward(loss, wrt, create_graph=(order == "second"))
        head_w = ad.sub(head_w, ad.mul(grads[0], lr))
        head_b = ad.sub(head_b, ad.mul(grads[1], lr))
        if cfg.maml_adapt_all:
            enc_items = [
                (name, ad.sub(t, ad.mul(g, lr)))
                for (name, t), g in zip(enc_items, grads[2:])
            ]
    return UniversalWeights(
        encoder=nn.ParamSet(enc_items),
        head=nn.ParamSet([("weight", head_w), ("bias", head_b)]),
    )


def hypermaml_update(state: ModelState, episode: TaskEpisode,
                     update_stats: bool = False) -> Tensor:
    """Point-wise head update: flat(theta_H) + hypernetwork mean output."""
    es = enhance(episode, state.net, state.theta, state.stats, update_stats=update_stats)
    out = hyper_forward(es, state.phi, "point", state.net.emb)
    return ad.add(flatten_head(state.theta.head), out.mu)


def _cnf_posterior(state: ModelState, cfg: TrainConfig, c: Tensor) -> po.CnfPosterior:
    return po.CnfPosterior(
        eta=state.eta, c=c, t_prior=cfg.t_prior, steps=cfg.flow_steps,
        trace=cfg.trace, hutchinson_probes=cfg.hutchinson_probes, probe_seed=cfg.seed,
    )


def episode_loss(
    state: ModelState,
    cfg: TrainConfig,
    episode: TaskEpisode,
    gamma: float,
    rng: np.random.Generator,
    p: int | None = None,
    noise: np.ndarray | None = None,
    likelihood: str = "query",
    update_stats: bool = False,
) -> Tensor:
    """Mean posterior-sample cross-entropy on the likelihood set plus gamma*KL.

    The support set enters only through the hypernetwork (or the MAML inner
    loop); ``likelihood`` selects which set carries the data term ("query"
    for training/evaluation, "support" for test-time adaptation).
    """
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    p = cfg.p_samples if p is None else p
    if p < 1:
        raise ContractError("episode_loss: p must be >= 1")
    if likelihood == "query":
        tx, ty = episode.query_x, episode.query_y
    elif likelihood == "support":
        tx, ty = episode.support_x, episode.support_y
    else:
        raise ContractError(f"unknown likelihood target {likelihood!r}")
    net, emb = state.net, state.net.emb

    if cfg.method == "maml":
        adapted = maml_inner(state, cfg, episode.support_x, episode.support_y)
        e = net.encode(adapted, state.stats, Tensor(tx), mode="train",
                       update_stats=update_stats)
        return nn.cross_entropy(nn.linear(e, adapted.head["weight"], adapted.head["bias"]), ty)

    es = enhance(episode, net, state.theta, state.stats, update_stats=update_stats)
    e = net.encode(state.theta, state.stats, Tensor(tx), mode="train")
    flat = flatten_head(state.theta.head)

    if cfg.method == "hypermaml":
        out = hyper_forward(es, state.phi, "point", emb)
        return nn.cross_entropy(head_logits(e, ad.add(flat, out.mu), emb, cfg.n_way), ty)

    if cfg.method == "bhmaml_g":
        out = hyper_forward(es, state.phi, "gaussian", emb)
        q = po.gaussian_from_hyper(flat, out.mu, out.rho)
        samples = po.gaussian_sample(q, rng, p, noise=noise)
        kl = po.gaussian_kl(q)
    else:  # bhmaml_cnf
        out = hyper_forward(es, state.phi, "cnf", emb, cfg.c_dim)
        post = _cnf_posterior(state, cfg, out.c)
        samples, kl = po.cnf_sample_and_kl(flat, post, rng, p, noise=noise)

    ce = None
    for s in range(p):
        term = nn.cross_entropy(head_logits(e, samples[s], emb, cfg.n_way), ty)
        ce = term if ce is None else ad.add(ce, term)
    ce = ad.mul(ce, Tensor(1.0 / p))
    return ad.add(ce, ad.mul(kl, Tensor(gamma)))


def sample_predictions(
    state: ModelState,
    cfg: TrainConfig,
    episode: TaskEpisode,
    s: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """s posterior draws of query predictions: (probs, logits), each [S, Q, N].

    Point-wise methods (maml, hypermaml) have a collapsed posterior: all
    rows are identical by construction.
    """
    if s < 1:
        raise ContractError("sample_predictions: s must be >= 1")
    net, emb = state.net, state.net.emb
    if cfg.method == "maml":
        # the inner loop needs the tape for its support gradients even at
        # evaluation time; only the query pass runs without recording
        adapted = maml_inner(state, cfg, episode.support_x, episode.support_y,
                             order="first")
        with ad.no_grad():
            e = net.encode(adapted, state.stats, Tensor(episode.query_x), mode="train")
            logits = nn.linear(e, adapted.head["weight"], adapted.head["bias"])
        return (
            np.repeat(nn.softmax(logits).data[None], s, axis=0),
            np.repeat(logits.data[None], s, axis=0),
        )
    with ad.no_grad():
        es = enhance(episode, net, state.theta, state.stats)
        e = net.encode(state.theta, state.stats, Tensor(episode.query_x), mode="train")
        flat = flatten_head(state.theta.head)
        if cfg.method == "hypermaml":
            out = hyper_forward(es, state.phi, "point", emb)
            logits = head_logits(e, ad.add(flat, out.mu), emb, cfg.n_way)
            return (
                np.repeat(nn.softmax(logits).data[None], s, axis=0),
                np.repeat(logits.data[None], s, axis=0),
            )
        if cfg.method == "bhmaml_g":
            out = hyper_forward(es, state.phi, "gaussian", emb)
            q = po.gaussian_from_hyper(flat, out.mu, out.rho)
            samples = po.gaussian_sample(q, rng, s)
        else:
            out = hyper_forward(es, state.phi, "cnf", emb, cfg.c_dim)
            post = _cnf_posterior(state, cfg, out.c)
            z0 = rng.standard_normal((s, flat.shape[0])) * np.sqrt(post.t_prior)
            samples = ad.add(flat, po.cnf_forward(Tensor(z0), post).output)
        probs = np.empty((s, len(episode.query_y), cfg.n_way))
        logits_out = np.empty_like(probs)
        for i in range(s):
            logit = head_logits(e, samples[i], emb, cfg.n_way)
            logits_out[i] = logit.data
            probs[i] = nn.softmax(logit).data
    return probs, logits_out


def episode_accuracy(state: ModelState, cfg: TrainConfig, episode: TaskEpisode,
                     p: int, rng: np.random.Generator) -> float:
    """Average class probabilities over p posterior draws, then argmax."""
    probs, _ = sample_predictions(state, cfg, episode, p, rng)
    pred = probs.mean(axis=0).argmax(axis=1)
    return float((pred == episode.query_y).mean())


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    state: ModelState
    epoch: int
    best_val: float
    rng_state: dict | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(name, t.data) for name, t in named_parameters(self.state)]
        out += [(f"stats/{n}", t.data) for n, t in self.state.stats.items()]
        return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.named_arrays()
    tensors = []
    offset = 0
    payload = []
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append(
            {"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset}
        )
        payload.append(raw)
        offset += len(raw)
    manifest = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_val": ckpt.best_val,
        "rng_state": ckpt.rng_state,
        "tensors": tensors,
    }
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<Q", len(mjson))
    return header + mjson + b"".join(payload)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    cfg = TrainConfig.from_dict(manifest["config"])
    cfg.validate()
    state = build_model(cfg, np.random.default_rng(0))
    named = dict(
        [(name, t) for name, t in named_parameters(state)]
        + [(f"stats/{n}", t) for n, t in state.stats.items()]
    )
    base = 16 + mlen
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in named:
            raise ConfigError(f"checkpoint tensor {name!r} does not fit method {cfg.method!r}")
        shape = tuple(entry["shape"])
        t = named[name]
        if t.shape != shape:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {shape}, expected {t.shape}")
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        t.data = arr.reshape(shape).astype(np.float64).copy()
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise ConfigError(f"checkpoint is missing tensors: {sorted(missing)}")
    return Checkpoint(
        config=cfg,
        state=state,
        epoch=manifest["epoch"],
        best_val=manifest["best_val"],
        rng_state=manifest["rng_state"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# -- training loop ---------------------------------------------------------------

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _validation_accuracy(state: ModelState, cfg: TrainConfig, dataset: Dataset,
                         epoch: int) -> float:
    if len(dataset.split_classes("val")) < cfg.n_way:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, 101, epoch])
    accs = [
        episode_accuracy(
            state, cfg,
            sample_episode(dataset, "val", cfg.n_way, cfg.k_shot, cfg.n_query, rng),
            cfg.p_samples, rng,
        )
        for _ in range(cfg.val_episodes)
    ]
    return float(np.mean(accs))


def train(cfg: TrainConfig, dataset: Dataset, out_dir: str | None = None,
          verbose: bool = False) -> Checkpoint:
    """Meta-train on the train split with per-epoch validation tracking.

    Checkpoints go to ``out_dir`` ("last.ckpt" every epoch, "best.ckpt" on
    validation improvement) together with a ``train_log.csv``. Identical
    seeds give bitwise-identical checkpoints.
    """
    cfg = dataclasses.replace(cfg)
    cfg.validate()
    if cfg.input_shape is None:
        cfg.input_shape = tuple(dataset.input_shape)
    elif tuple(cfg.input_shape) != tuple(dataset.input_shape):
        raise ConfigError(
            f"config input_shape {cfg.input_shape} does not match dataset {dataset.input_shape}"
        )
    init_rng = np.random.default_rng([cfg.seed, 1])
    data_rng = np.random.default_rng([cfg.seed, 2])
    noise_rng = np.random.default_rng([cfg.seed, 3])
    state = build_model(cfg, init_rng)
    params = [t for _, t in named_parameters(state)]
    opt = Adam(params, cfg.lr)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        with open(log_path, "w", encoding="ascii") as fh:
            fh.write("epoch,loss,val_acc,lr,gamma\n")
    best_val = -math.inf
    ckpt = None
    n_batches = max(1, math.ceil(cfg.episodes_per_epoch / cfg.batch_tasks))
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(epoch, cfg)
        gamma = anneal_gamma(epoch, cfg)
        epoch_loss = 0.0
        for batch in range(n_batches):
            total = None
            for _ in range(cfg.batch_tasks):
                ep = sample_episode(dataset, "train", cfg.n_way, cfg.k_shot, cfg.n_query, data_rng)
                loss = episode_loss(state, cfg, ep, gamma, noise_rng, update_stats=True)
                total = loss if total is None else ad.add(total, loss)
            total = ad.mul(total, Tensor(1.0 / cfg.batch_tasks))
            if not np.isfinite(total.data).all():
                if out_dir:
                    snap = Checkpoint(cfg, state, epoch, best_val, _rng_state(noise_rng))
                    save_checkpoint(snap, os.path.join(out_dir, "diagnostic.ckpt"))
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {batch}"
                    + (f"; diagnostic snapshot written to {out_dir}" if out_dir else "")
                )
            grads = ad.backward(total, params)
            opt.step(grads)
            epoch_loss += total.item()
        epoch_loss /= n_batches
        val_acc = _validation_accuracy(state, cfg, dataset, epoch)
        ckpt = Checkpoint(
            config=cfg, state=state, epoch=epoch, best_val=max(best_val, val_acc),
            rng_state={"data": _rng_state(data_rng), "noise": _rng_state(noise_rng)},
        )
        improved = not math.isnan(val_acc) and val_acc > best_val
        if improved:
            best_val = val_acc
            ckpt.best_val = best_val
        if out_dir:
            save_checkpoint(ckpt, os.path.join(out_dir, "last.ckpt"))
            if improved or epoch == 0:
                save_checkpoint(ckpt, os.path.join(out_dir, "best.ckpt"))
            with open(log_path, "a", encoding="ascii") as fh:
                fh.write(f"{epoch},{epoch_loss!r},{val_acc!r},{opt.lr!r},{gamma!r}\n")
        if verbose:
            print(f"epoch {epoch}: loss {epoch_loss:.4f} val {val_acc:.4f} lr {opt.lr:g} gamma {gamma:g}")
    return ckpt


# -- paper-scale presets ----------------------------------------------------------

def preset(name: str) -> TrainConfig:
    """Named full-scale configurations (hyperparameter-table values)."""
    table = {
        "omniglot_emnist_1shot_g": dict(
            method="bhmaml_g", encoder="conv4", lr=0.01, hyper_width=512,
            epochs=2048, milestones=(51, 550), gamma_max=1e-3, p_samples=5,
        ),
        "cub_1shot_g": dict(
            method="bhmaml_g", encoder="conv4", lr=0.01, hyper_width=512,
            epochs=4000, milestones=(51, 550), gamma_max=1e-4, p_samples=5,
        ),
        "mini_imagenet_1shot_g": dict(
            method="bhmaml_g", encoder="conv4", lr=0.001, hyper_width=256,
            epochs=4000, milestones=(101, 1100), gamma_max=1e-4, p_samples=7,
        ),
        "cub_1shot_cnf": dict(
            method="bhmaml_cnf", encoder="conv4", lr=0.001, hyper_width=512,
            epochs=4000, milestones=(51, 550), gamma_max=1e-6, p_samples=5,
        ),
        "omniglot_emnist_1shot_cnf": dict(
            method="bhmaml_cnf", encoder="conv4", lr=0.001, hyper_width=512,
            epochs=2048, milestones=(51, 550), gamma_max=1e-4, p_samples=5,
        ),
    }
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(table)}")
    return TrainConfig(**table[name])
