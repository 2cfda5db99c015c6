"""Per-task posteriors over head-weight updates.

Two families against the standard-normal prior on adapted weights:

* diagonal Gaussian centered at the universal head plus the hypernetwork's
  mean update, with closed-form KL;
* a conditional continuous normalizing flow: updates are base draws from
  N(0, t*I) pushed through an ODE whose dynamics network receives the
  conditioning vector and integration time additively at every hidden
  layer. Log-densities use the integrated Jacobian trace; the KL is a
  Monte-Carlo estimate over reparameterized draws.

Integration is fixed-step RK4 on the joint (state, log-det) system. The
trace is exact by default: the basis-vector forward-mode products through
the two-layer tanh dynamics collapse to the bilinear form
d2^T ((W3 W1) o W2^T) d1, which equals the sum of all per-basis JVPs and
stays differentiable; a Hutchinson estimator is available for larger heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericalError

SIGMA_FLOOR = 1e-4


# -- diagonal Gaussian -------------------------------------------------------

@dataclass
class GaussianPosterior:
    mean_total: Tensor  # [d]: universal head + hypernetwork mean update
    sigma: Tensor  # [d], elementwise >= SIGMA_FLOOR


def gaussian_from_hyper(theta_head_flat: Tensor, mu: Tensor, rho: Tensor) -> GaussianPosterior:
    """sigma = softplus(rho) + floor keeps the posterior non-degenerate."""
    return GaussianPosterior(
        mean_total=ad.add(theta_head_flat, mu),
        sigma=ad.add(ad.softplus(rho), Tensor(SIGMA_FLOOR)),
    )


def gaussian_sample(q: GaussianPosterior, rng: np.random.Generator, p: int,
                    noise: np.ndarray | None = None) -> Tensor:
    """p reparameterized draws, stacked [p, d]; gradients reach mean and sigma.

    ``noise`` overrides the standard-normal draw (frozen-noise objectives).
    """
    if p < 1:
        raise ContractError("gaussian_sample: p must be >= 1")
    d = q.mean_total.shape[0]
    eps = rng.standard_normal((p, d)) if noise is None else np.asarray(noise, dtype=np.float64)
    if eps.shape != (p, d):
        raise DimensionError(f"gaussian_sample: noise shape {eps.shape} != ({p}, {d})")
    return ad.add(q.mean_total, ad.mul(q.sigma, Tensor(eps)))


def gaussian_kl(q: GaussianPosterior) -> Tensor:
    """KL(q || N(0, I)) in closed form: 0.5 sum(m^2 + s^2 - 1 - 2 ln s)."""
    m2 = ad.mul(q.mean_total, q.mean_total)
    s2 = ad.mul(q.sigma, q.sigma)
    inner = ad.sub(ad.sub(ad.add(m2, s2), Tensor(1.0)), ad.mul(Tensor(2.0), ad.log(q.sigma)))
    return ad.mul(ad.reduce_sum(inner), Tensor(0.5))


def log_normal_iso(x: Tensor, var: float) -> Tensor:
    """Row-wise log N(x | 0, var*I) for x of shape [P, d]."""
    d = x.shape[1]
    quad = ad.mul(ad.reduce_sum(ad.mul(x, x), axis=1), Tensor(-0.5 / var))
    return ad.add(quad, Tensor(-0.5 * d * np.log(2.0 * np.pi * var)))


# -- conditional CNF ---------------------------------------------------------

def init_flow(
    rng: np.random.Generator, dim: int, hidden: int = 64, c_dim: int = 64
) -> nn.ParamSet:
    """Two tanh hidden layers; zero-initialized output so the flow starts as
    the identity map (zero dynamics, zero trace)."""
    eta = nn.ParamSet()
    eta.add("w1", nn.he_init(rng, dim, (dim, hidden)))
    eta.add("b1", nn.zeros_param(hidden))
    eta.add("wc1", nn.he_init(rng, c_dim, (c_dim, hidden)))
    eta.add("wt1", Tensor(rng.standard_normal(hidden) * 0.1, requires_grad=True))
    eta.add("w2", nn.he_init(rng, hidden, (hidden, hidden)))
    eta.add("b2", nn.zeros_param(hidden))
    eta.add("wc2", nn.he_init(rng, c_dim, (c_dim, hidden)))
    eta.add("wt2", Tensor(rng.standard_normal(hidden) * 0.1, requires_grad=True))
    eta.add("w3", nn.zeros_param((hidden, dim)))
    eta.add("b3", nn.zeros_param(dim))
    return eta


class FlowDynamics:
    """dz/dt = g(z, t; C) with the exact Jacobian trace alongside.

    The conditioning projections and the trace kernel K = (W3 W1) o W2^T are
    fixed along one integration, so they are precomputed per instance.
    """

    def __init__(
        self,
        eta: nn.ParamSet,
        c: Tensor,
        trace: str = "exact",
        hutchinson_probes: int = 64,
        probe_rng: np.random.Generator | None = None,
    ):
        if trace not in ("exact", "hutchinson"):
            raise ContractError(f"unknown trace mode {trace!r}")
        self.eta = eta
        self.trace = trace
        self.dim = eta["w1"].shape[0]
        c_dim = eta["wc1"].shape[0]
        if c.shape != (c_dim,):
            raise DimensionError(f"conditioning vector {c.shape} does not match ({c_dim},)")
        c_row = ad.reshape(c, (1, c_dim))
        self._cond1 = ad.reshape(ad.matmul(c_row, eta["wc1"]), (eta["wc1"].shape[1],))
        self._cond2 = ad.reshape(ad.matmul(c_row, eta["wc2"]), (eta["wc2"].shape[1],))
        self._kernel = ad.mul(ad.matmul(eta["w3"], eta["w1"]), ad.transpose(eta["w2"]))
        if trace == "hutchinson":
            rng = probe_rng if probe_rng is not None else np.random.default_rng(0)
            probes = rng.integers(0, 2, size=(hutchinson_probes, self.dim)) * 2.0 - 1.0
            self._probes = Tensor(probes)

    def _hidden(self, z: Tensor, t: float):
        eta = self.eta
        b1 = ad.add(ad.add(eta["b1"], self._cond1), ad.mul(eta["wt1"], Tensor(t)))
        h1 = ad.tanh(ad.add(ad.matmul(z, eta["w1"]), b1))
        b2 = ad.add(ad.add(eta["b2"], self._cond2), ad.mul(eta["wt2"], Tensor(t)))
        h2 = ad.tanh(ad.add(ad.matmul(h1, eta["w2"]), b2))
        return h1, h2

    def __call__(self, z: Tensor, t: float) -> tuple[Tensor, Tensor]:
        """Returns (dz [P, d], trace [P])."""
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f"dynamics: state {z.shape} does not match dim {self.dim}")
        eta = self.eta
        h1, h2 = self._hidden(z, t)
        dz = ad.add(ad.matmul(h2, eta["w3"]), eta["b3"])
        one = Tensor(1.0)
        d1 = ad.sub(one, ad.mul(h1, h1))
        d2 = ad.sub(one, ad.mul(h2, h2))
        if self.trace == "exact":
            tr = ad.reduce_sum(ad.mul(ad.matmul(d2, self._kernel), d1), axis=1)
        else:
            tr = self._hutchinson_trace(d1, d2)
        return dz, tr

    def _hutchinson_trace(self, d1: Tensor, d2: Tensor) -> Tensor:
        """mean_v v^T J v over Rademacher probes, per state row."""
        eta = self.eta
        v = self._probes
        m = v.shape[0]
        rows = []
        vw1 = ad.matmul(v, eta["w1"])  # [m, h]
        for p in range(d1.shape[0]):
            t1 = ad.mul(vw1, ad.expand(d1[p : p + 1], vw1.shape))
            t2 = ad.mul(ad.matmul(t1, eta["w2"]), ad.expand(d2[p : p + 1], (m, eta["w2"].shape[1])))
            jv = ad.matmul(t2, eta["w3"])  # [m, d]
            rows.append(ad.reduce_mean(ad.reduce_sum(ad.mul(v, jv), axis=1), keepdims=True))
        return ad.reshape(ad.concat(rows, axis=0), (d1.shape[0],))

    def basis_jvp_trace(self, z: Tensor, t: float) -> Tensor:
        """Reference trace: push all d basis vectors through the linearized
        dynamics and sum the Jacobian diagonal. Used to cross-check the
        factored form."""
        eta = self.eta
        h1, h2 = self._hidden(z, t)
        if z.shape[0] != 1:
            raise ContractError("basis_jvp_trace expects a single state row")
        eye = Tensor(np.eye(self.dim))
        t1 = ad.mul(ad.matmul(eye, eta["w1"]), ad.expand(ad.sub(Tensor(1.0), ad.mul(h1, h1)), (self.dim, eta["w1"].shape[1])))
        t2 = ad.mul(ad.matmul(t1, eta["w2"]), ad.expand(ad.sub(Tensor(1.0), ad.mul(h2, h2)), (self.dim, eta["w2"].shape[1])))
        jac = ad.matmul(t2, eta["w3"])  # row i = J^T applied to e_i
        return ad.reduce_sum(ad.mul(jac, Tensor(np.eye(self.dim))))


@dataclass
class FlowResult:
    output: Tensor  # [P, d]
    logdet: Tensor  # [P]


@dataclass
class CnfPosterior:
    """Conditional flow posterior: shared dynamics parameters, per-task
    conditioning vector, and the base-noise scale t_prior."""

    eta: nn.ParamSet
    c: Tensor
    t_prior: float = 0.1
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 32
    trace: str = "exact"
    hutchinson_probes: int = 64
    probe_seed: int = 0

    def __post_init__(self):
        if self.t_prior <= 0:
            raise ContractError("t_prior must be positive")
        if self.steps < 4:
            raise ContractError("CNF integration needs at least 4 steps")

    def dynamics(self) -> FlowDynamics:
        return FlowDynamics(
            self.eta,
            self.c,
            trace=self.trace,
            hutchinson_probes=self.hutchinson_probes,
            probe_rng=np.random.default_rng(self.probe_seed),
        )


def _as_state(z: Tensor | np.ndarray) -> Tensor:
    z = ad.as_tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
    if z.ndim != 2:
        raise DimensionError(f"flow state must be [P, d] or [d], got {z.shape}")
    return z


def integrate_rk4(dynamics, z0, t_start: float, t_end: float, steps: int) -> FlowResult:
    """Fixed-step RK4 on the joint (state, log-det) system.

    ``dynamics(z, t) -> (dz, trace)`` may be any callable; the flow posterior
    supplies :class:`FlowDynamics`, tests may hand-wire linear maps.
    """
    z = _as_state(z0)
    h = (t_end - t_start) / steps
    ld = Tensor(np.zeros(z.shape[0]))
    sixth, third, half = h / 6.0, h / 3.0, h / 2.0
    for step in range(steps):
        t = t_start + step * h
        k1, l1 = dynamics(z, t)
        k2, l2 = dynamics(ad.add(z, ad.mul(k1, Tensor(half))), t + half)
        k3, l3 = dynamics(ad.add(z, ad.mul(k2, Tensor(half))), t + half)
        k4, l4 = dynamics(ad.add(z, ad.mul(k3, Tensor(h))), t + h)
        zi = ad.add(ad.add(k1, k4), ad.mul(ad.add(k2, k3), Tensor(2.0)))
        z = ad.add(z, ad.mul(zi, Tensor(sixth)))
        li = ad.add(ad.add(l1, l4), ad.mul(ad.add(l2, l3), Tensor(2.0)))
        ld = ad.add(ld, ad.mul(li, Tensor(sixth)))
        if not np.isfinite(z.data).all():
            raise NumericalError(f"flow state became non-finite at integration step {step}")
    return FlowResult(output=z, logdet=ld)


def cnf_forward(z0, post: CnfPosterior, dynamics=None) -> FlowResult:
    """Push base samples forward through the flow; logdet = integral of the trace."""
    dyn = dynamics if dynamics is not None else post.dynamics()
    return integrate_rk4(dyn, z0, post.t0, post.t1, post.steps)


def cnf_inverse(delta, post: CnfPosterior, dynamics=None) -> FlowResult:
    """Integrate backwards; logdet is reported for the inverse direction."""
    dyn = dynamics if dynamics is not None else post.dynamics()
    return integrate_rk4(dyn, delta, post.t1, post.t0, post.steps)


def cnf_log_density(delta, post: CnfPosterior) -> Tensor:
    """log q(delta) via change of variables on the inverse integration."""
    inv = cnf_inverse(delta, post)
    return ad.add(log_normal_iso(inv.output, post.t_prior), inv.logdet)


def cnf_sample_and_kl(
    theta_head_flat: Tensor,
    post: CnfPosterior,
    rng: np.random.Generator,
    p: int,
    noise: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """p reparameterized draws theta' = theta_H + F(z) plus the Monte-Carlo
    KL(q || N(0, I)) over those draws.

    log q of a draw is the base log-density of its z minus the forward
    logdet; the prior is evaluated at the full adapted weights.
    """
    if p < 1:
        raise ContractError("cnf_sample_and_kl: p must be >= 1")
    d = theta_head_flat.shape[0]
    if post.eta["w1"].shape[0] != d:
        raise DimensionError(
            f"flow dimension {post.eta['w1'].shape[0]} does not match head size {d}"
        )
    eps = rng.standard_normal((p, d)) if noise is None else np.asarray(noise, dtype=np.float64)
    if eps.shape != (p, d):
        raise DimensionError(f"cnf noise shape {eps.shape} != ({p}, {d})")
    z0 = eps * np.sqrt(post.t_prior)
    fwd = cnf_forward(Tensor(z0), post)
    samples = ad.add(theta_head_flat, fwd.output)  # [p, d]
    log_q = ad.sub(log_normal_iso(Tensor(z0), post.t_prior), fwd.logdet)
    log_p = log_normal_iso(samples, 1.0)
    kl = ad.reduce_mean(ad.sub(log_q, log_p))
    return samples, kl
