"""Command-line surface: train, eval, uncertainty, gradcheck, make-data.

All results are also written as CSV under ``--out-dir`` (default
``./runs/<timestamp>``). Exit codes: 2 for usage/configuration problems,
1 for runtime failures, 0 on success.
"""

from __future__ import annotations

import argparse
import datetime
import math
import os
import sys

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import metatrain as mt
from . import nn
from .autodiff import Tensor
from .episodes import load_image_dataset, make_synthetic, sample_episode, save_dataset
from .errors import BhmamlError, ConfigError

GRADCHECK_THRESHOLD = 1e-4


def _default_out_dir() -> str:
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    return os.path.join("runs", stamp)


def _load_dataset(cfg: mt.TrainConfig, override: str | None):
    if override:
        return load_image_dataset(override)
    return cfg.data.load()


# -- gradient-check battery ---------------------------------------------------

def gradcheck_battery(eps: float = 1e-5) -> list[tuple[str, float]]:
    """Every layer plus both Bayesian episode losses with frozen noise."""
    rng = np.random.default_rng(42)
    results: list[tuple[str, float]] = []

    def check(name, f, params):
        results.append((name, ad.grad_check(f, params, eps=eps)))

    w = Tensor(rng.standard_normal((4, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    x = Tensor(rng.standard_normal((5, 4)))
    check("linear", lambda: nn.linear(x, w, b).sum(), [w, b])

    a = Tensor(rng.standard_normal((3, 4)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.standard_normal((4, 2)) * 0.5, requires_grad=True)
    check("matmul", lambda: ad.mul(ad.matmul(a, b2), ad.matmul(a, b2)).sum(), [a, b2])

    # keep relu inputs away from the kink
    xr = Tensor(np.where(np.abs(z := rng.standard_normal((4, 3))) < 1e-2, 0.1, z),
                requires_grad=True)
    check("relu", lambda: ad.mul(ad.relu(xr), Tensor(rng2 := np.ones((4, 3)))).sum(), [xr])

    xt = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    check("tanh", lambda: ad.mul(ad.tanh(xt), ad.tanh(xt)).sum(), [xt])
    xs = Tensor(rng.standard_normal(6), requires_grad=True)
    check("softplus", lambda: ad.mul(ad.softplus(xs), ad.softplus(xs)).sum(), [xs])

    cw = Tensor(rng.standard_normal((3, 3, 2, 3)) * 0.4, requires_grad=True)
    cx = Tensor(rng.standard_normal((2, 5, 5, 2)))
    check("conv3x3", lambda: ad.mul(nn.conv3x3(cx, cw), nn.conv3x3(cx, cw)).sum(), [cw])

    gamma = Tensor(np.abs(rng.standard_normal(3)) + 0.5, requires_grad=True)
    beta = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    cb = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
    check(
        "conv_block",
        lambda: ad.mul(
            y := nn.conv_block(cx, cw, cb, gamma, beta, rm, rv, "train"), y
        ).sum(),
        [cw, cb, gamma, beta],
    )

    bx = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    check(
        "batchnorm",
        lambda: ad.mul(y := nn.batchnorm(bx, gamma, beta, rm, rv, "train"), y).sum(),
        [bx, gamma, beta],
    )

    px = Tensor(rng.standard_normal((2, 4, 4, 3)), requires_grad=True)
    check("avgpool", lambda: ad.mul(nn.avgpool_spatial(px), nn.avgpool_spatial(px)).sum(), [px])

    labels = np.array([0, 1, 2, 0, 1])
    check("cross_entropy", lambda: nn.cross_entropy(nn.linear(x, w, b), labels), [w, b])

    for method, name in (("bhmaml_g", "episode_loss[gaussian]"),
                         ("bhmaml_cnf", "episode_loss[cnf]")):
        cfg = mt.TrainConfig(
            method=method, n_way=2, k_shot=1, n_query=3, encoder="mlp",
            input_shape=(2,), enc_hidden=8, emb=4, hyper_width=8, c_dim=4,
            flow_hidden=8, flow_steps=4, p_samples=2, gamma_max=1e-2,
            gamma_warmup_epochs=1, seed=3,
        )
        state = mt.build_model(cfg, np.random.default_rng(5))
        ds = make_synthetic("blobs", 4, 2, 8, 0.3, seed=1)
        ep = sample_episode(ds, "train", 2, 1, 3, np.random.default_rng(2))
        d = state.net.head_dim
        noise = np.random.default_rng(7).standard_normal((2, d))
        params = [t for _, t in mt.named_parameters(state)]

        def f(state=state, cfg=cfg, ep=ep, noise=noise):
            return mt.episode_loss(state, cfg, ep, cfg.gamma_max, rng=None, noise=noise)

        check(name, f, params)
    return results


# -- subcommands ---------------------------------------------------------------

def _cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = mt.TrainConfig.from_json(fh.read())
    cfg.validate()
    dataset = _load_dataset(cfg, args.data)
    out_dir = args.out_dir or _default_out_dir()
    ckpt = mt.train(cfg, dataset, out_dir=out_dir, verbose=not args.quiet)
    print(f"done: best validation accuracy {ckpt.best_val:.4f}")
    print(f"checkpoints and train_log.csv in {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        print(f"error: checkpoint not found: {args.ckpt}", file=sys.stderr)
        return 2
    ckpt = mt.load_checkpoint(args.ckpt)
    dataset = _load_dataset(ckpt.config, args.data)
    report = ev.evaluate(
        ckpt, dataset, args.split, args.episodes, p_eval=args.p_eval,
        seed=args.seed, adapt_steps=args.adapt, adapt_lr=args.adapt_lr,
    )
    out_dir = args.out_dir or _default_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "eval.csv")
    report.to_csv(csv_path)
    suffix = f" (+{args.adapt} adaptation steps)" if args.adapt else ""
    print(f"{args.split} accuracy over {report.n_episodes} episodes{suffix}: "
          f"{report.accuracy_mean:.4f} +/- {report.ci95:.4f}")
    print(f"per-episode CSV: {csv_path}")
    return 0


def _sign_test_p(wins: int, n: int) -> float:
    """One-sided exact binomial tail P(X >= wins) under p = 1/2."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n


def _cmd_uncertainty(args) -> int:
    if not os.path.exists(args.ckpt):
        print(f"error: checkpoint not found: {args.ckpt}", file=sys.stderr)
        return 2
    ckpt = mt.load_checkpoint(args.ckpt)
    cfg = ckpt.config
    dataset = _load_dataset(cfg, args.data)
    ood = load_image_dataset(args.ood_dataset)
    if tuple(ood.input_shape) != tuple(cfg.input_shape):
        raise ConfigError(
            f"OOD inputs {ood.input_shape} do not match checkpoint {cfg.input_shape}"
        )
    out_dir = args.out_dir or _default_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "uncertainty.csv")
    samples_path = os.path.join(out_dir, "uncertainty_samples.csv")
    wins = 0
    input_id = 0
    with open(metrics_path, "w", encoding="ascii") as mfh, \
         open(samples_path, "w", encoding="ascii") as sfh:
        mfh.write("input_id,split,pred_entropy,exp_entropy,mi\n")
        sfh.write("input_id,split,sample,class,logit,prob\n")
        for i in range(args.episodes):
            rng = np.random.default_rng([args.seed, i])
            ep = sample_episode(dataset, "test", cfg.n_way, cfg.k_shot, cfg.n_query, rng)
            ep_ood = sample_episode(ood, "test", cfg.n_way, cfg.k_shot, cfg.n_query, rng)
            means = {}
            for split_name, qx, qy in (
                ("id", ep.query_x, ep.query_y),
                ("ood", ep_ood.query_x, ep_ood.query_y),
            ):
                probe = mt.TaskEpisode(
                    support_x=ep.support_x, support_y=ep.support_y,
                    query_x=qx, query_y=qy, class_map=ep.class_map,
                    n_way=ep.n_way, k_shot=ep.k_shot,
                )
                probs, logits = ev.predictive_samples(ckpt, probe, s=args.samples, rng=rng)
                rep = ev.uncertainty_metrics(probs)
                means[split_name] = float(rep.pred_entropy.mean())
                for q in range(probs.shape[1]):
                    mfh.write(
                        f"{input_id},{split_name},{rep.pred_entropy[q]!r},"
                        f"{rep.exp_entropy[q]!r},{rep.mutual_information[q]!r}\n"
                    )
                    if q == 0 and i < args.sample_episodes_csv:
                        for s_i in range(min(probs.shape[0], args.samples)):
                            for c in range(probs.shape[2]):
                                sfh.write(
                                    f"{input_id},{split_name},{s_i},{c},"
                                    f"{logits[s_i, q, c]!r},{probs[s_i, q, c]!r}\n"
                                )
                    input_id += 1
            wins += means["ood"] > means["id"]
    p = _sign_test_p(wins, args.episodes)
    print(f"OOD mean predictive entropy exceeded in-distribution in "
          f"{wins}/{args.episodes} episodes (sign test p = {p:.2e})")
    print(f"metrics CSV: {metrics_path}")
    print(f"samples CSV: {samples_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_battery(eps=args.eps)
    worst = 0.0
    for name, err in results:
        status = "ok" if err < GRADCHECK_THRESHOLD else "FAIL"
        print(f"{name:24s} {err:.3e}  {status}")
        worst = max(worst, err) if np.isfinite(err) else float("nan")
    print(f"max relative error: {worst:.3e} (threshold {GRADCHECK_THRESHOLD:g})")
    return 0 if worst < GRADCHECK_THRESHOLD else 1


def _cmd_make_data(args) -> int:
    ds = make_synthetic(
        args.kind, args.classes, args.dim, args.per_class, args.spread,
        args.seed, separation=args.separation,
    )
    save_dataset(ds, args.out)
    counts = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {args.kind} dataset to {args.out} (classes per split: {counts})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bhmaml",
        description="Bayesian hypernetwork meta-learning: training, evaluation, uncertainty.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a model from a JSON config")
    p.add_argument("--config", required=True, help="path to a TrainConfig JSON file")
    p.add_argument("--data", default=None, help="override: dataset directory")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="accuracy with a 95%% CI over episodes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--p-eval", type=int, default=None)
    p.add_argument("--adapt", type=int, default=0, metavar="STEPS")
    p.add_argument("--adapt-lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", default=None, help="override: dataset directory")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("uncertainty", help="entropy/MI on in- vs out-of-distribution queries")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ood-dataset", required=True, help="directory with the OOD data")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--sample-episodes-csv", type=int, default=3,
                   help="episodes whose raw sample draws go into the samples CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", default=None, help="override: in-distribution dataset directory")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_uncertainty)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("make-data", help="materialize a synthetic dataset to disk")
    p.add_argument("--kind", required=True, choices=["blobs", "rings"])
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BhmamlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
