"""Simplified-INLA inference backend.

The latent field is integrated with a Gaussian (Laplace) approximation at
its conditional mode; hyperparameters are optimized by a gradient-free
simplex search on transformed coordinates (log standard deviations, logit
mixing parameters).  Posterior draws come from the constrained Gaussian
approximation at the hyperparameter mode (empirical Bayes) or, opt-in,
from a mixture over a factorial grid of hyperparameter values weighted by
the approximated marginal posterior.

The Laplace objective for hyperparameters theta is

    log pi(theta | y) =~ log pi(theta) + loglik(x*) - x*' Q x* / 2
                         + [logdet_C(Q) - logdet_C(H)] / 2 + const,

with x* the constrained conditional mode, Q the prior precision, H = Q +
A'WA the curvature at the mode, and logdet_C the determinant restricted
to the constraint null space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import InputError, NumericError
from .gmrf import ConstrainedFactor, SymmetricFactor
from .model import LatentModel

NEWTON_GRAD_TOL = 1e-6
NEWTON_MAX_ITER = 100
DENSE_SAMPLING_LIMIT = 6000


@dataclass
class GaussianApprox:
    """Constrained Gaussian approximation to pi(x | y, theta) at its mode."""

    mode: np.ndarray
    precision: sp.csc_matrix
    factor: ConstrainedFactor
    iterations: int
    grad_norm: float
    loglik: float
    prior_quad: float          # x*' Q x* / 2


@dataclass
class OptResult:
    theta: dict
    log_marginal: float
    trace: list
    n_eval: int
    converged: bool
    approx: GaussianApprox
    details: dict = field(default_factory=dict)


@dataclass
class PosteriorDraws:
    """Latent posterior draws plus the hyperparameters that produced them."""

    latent: np.ndarray            # (n_draws, dim)
    theta: dict
    layout: dict                  # block name -> (start, size)
    seed: int
    strategy: str                 # 'empirical_bayes' or 'grid'
    grid_info: dict | None = None

    @property
    def n_draws(self) -> int:
        return self.latent.shape[0]

    def block(self, name: str) -> np.ndarray:
        start, size = self.layout[name]
        return self.latent[:, start:start + size]

    def save(self, path, manifest_extra=None):
        from pathlib import Path
        path = Path(path)
        np.savez_compressed(path, latent=self.latent)
        manifest = {
            "theta": self.theta,
            "layout": {k: list(v) for k, v in self.layout.items()},
            "seed": self.seed,
            "strategy": self.strategy,
            "n_draws": int(self.n_draws),
            "grid_info": self.grid_info,
        }
        if manifest_extra:
            manifest.update(manifest_extra)
        with open(path.with_suffix(".manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, default=float)

    @classmethod
    def load(cls, path):
        from pathlib import Path
        path = Path(path)
        latent = np.load(path)["latent"]
        with open(path.with_suffix(".manifest.json")) as fh:
            manifest = json.load(fh)
        return cls(latent=latent,
                   theta=manifest["theta"],
                   layout={k: tuple(v) for k, v in manifest["layout"].items()},
                   seed=manifest["seed"],
                   strategy=manifest["strategy"],
                   grid_info=manifest.get("grid_info"))


def _layout_dict(model: LatentModel) -> dict:
    return {name: (b.start, b.size) for name, b in model.blocks.items()}


def _orth_projector(model: LatentModel):
    """Orthogonal projection onto the feasible set {Cx = 0} (for gradients)."""
    c = model.constraints
    if c is None:
        return lambda v: v
    cct = np.asarray((c @ c.T).todense())
    cho = cho_factor(cct)
    return lambda v: v - c.T @ cho_solve(cho, c @ v)


def conditional_mode(theta: dict, model: LatentModel, x0=None,
                     tol: float = NEWTON_GRAD_TOL,
                     max_iter: int = NEWTON_MAX_ITER) -> GaussianApprox:
    """Newton iterations with kriging constraint projection.

    Converges when the feasible-subspace gradient max-norm drops below
    ``tol``; raises NumericError with the iteration trace otherwise.
    """
    q = model.prior_precision(theta)
    project = _orth_projector(model)
    at = model.a.T.tocsc()

    if x0 is None:
        x = np.zeros(model.dim)
    else:
        x = project(np.array(x0, dtype=float, copy=True))

    trace = []
    for it in range(max_iter):
        ll, grad_eta, w = model.loglik_parts(x, theta)
        grad = at @ grad_eta - q @ x
        gproj = project(grad)
        gnorm = float(np.abs(gproj).max())
        trace.append(gnorm)

        h = (q + at @ sp.diags(w) @ model.a).tocsc()
        cf = ConstrainedFactor(SymmetricFactor(h), model.constraints)
        if gnorm < tol:
            return GaussianApprox(mode=x, precision=h, factor=cf, iterations=it,
                                  grad_norm=gnorm, loglik=ll,
                                  prior_quad=float(0.5 * x @ (q @ x)))

        rhs = at @ (grad_eta + w * (model.a @ x))
        x_new = cf.solve(rhs)
        obj = ll - 0.5 * x @ (q @ x)
        for _ in range(40):
            ll_new, _, _ = model.loglik_parts(x_new, theta)
            obj_new = ll_new - 0.5 * x_new @ (q @ x_new)
            if np.isfinite(obj_new) and obj_new >= obj - 1e-10 * (1 + abs(obj)):
                break
            x_new = 0.5 * (x_new + x)
        x = x_new

    raise NumericError(
        f"conditional mode did not converge in {max_iter} iterations; "
        f"gradient max-norm trace: {np.array2string(np.array(trace[-10:]), precision=3)}")


def log_marginal(theta: dict, model: LatentModel, x0=None):
    """Laplace approximation of log pi(theta | y) up to an additive constant.

    Returns (value, approx, details); deterministic for given inputs.
    """
    approx = conditional_mode(theta, model, x0=x0)
    q = model.prior_precision(theta)
    try:
        q_cf = ConstrainedFactor(SymmetricFactor(q), model.constraints)
        logdet_prior = q_cf.subspace_logdet()
        logdet_post = approx.factor.subspace_logdet()
    except NumericError as exc:
        raise NumericError(f"log-determinant failure at theta={theta}: {exc}") from exc
    value = (model.log_hyperprior(theta) + approx.loglik - approx.prior_quad
             + 0.5 * (logdet_prior - logdet_post))
    details = {
        "logdet_prior": logdet_prior,
        "logdet_posterior": logdet_post,
        "newton_iterations": approx.iterations,
        "grad_norm": approx.grad_norm,
    }
    return float(value), approx, details


# -- hyperparameter search -----------------------------------------------------


def _to_transformed(model: LatentModel, theta: dict) -> np.ndarray:
    vals = []
    for h in model.hyper_defs:
        v = theta[h.name]
        if h.transform == "log":
            vals.append(np.log(v))
        else:
            v = np.clip(v, 1e-12, 1 - 1e-12)
            vals.append(np.log(v / (1 - v)))
    return np.array(vals)


def _from_transformed(model: LatentModel, t: np.ndarray) -> dict:
    theta = {}
    for h, ti in zip(model.hyper_defs, t):
        if h.transform == "log":
            theta[h.name] = float(np.exp(ti))
        else:
            theta[h.name] = float(1.0 / (1.0 + np.exp(-ti)))
    return theta


def optimize_hyper(model: LatentModel, init: dict | None = None,
                   max_eval: int | None = None, xatol: float = 1e-3,
                   fatol: float = 1e-4) -> OptResult:
    """Simplex search for the hyperparameter mode of the Laplace objective."""
    theta0 = dict(model.default_hyper())
    if init:
        theta0.update(init)
    model.validate_hyper(theta0)
    t0 = _to_transformed(model, theta0)
    k = len(t0)
    if max_eval is None:
        max_eval = 60 * k + 100

    trace = []
    state = {"x0": None, "best": None}

    def objective(t):
        theta = _from_transformed(model, t)
        try:
            value, approx, _ = log_marginal(theta, model, x0=state["x0"])
        except NumericError:
            trace.append({"theta": theta, "log_marginal": None})
            return 1e10
        state["x0"] = approx.mode
        if state["best"] is None or value > state["best"][0]:
            state["best"] = (value, theta, approx)
        trace.append({"theta": theta, "log_marginal": value})
        return -value

    res = minimize(objective, t0, method="Nelder-Mead",
                   options=dict(maxfev=max_eval, xatol=xatol, fatol=fatol,
                                adaptive=k > 4))
    if state["best"] is None:
        raise NumericError("hyperparameter search failed at every evaluation")
    best_value, best_theta, best_approx = state["best"]
    return OptResult(theta=best_theta, log_marginal=best_value, trace=trace,
                     n_eval=len(trace), converged=bool(res.success),
                     approx=best_approx,
                     details={"message": str(res.message)})


# -- posterior draws -------------------------------------------------------------


def _sample_at(model, theta, n, rng, x0=None, approx=None):
    if approx is None:
        approx = conditional_mode(theta, model, x0=x0)
    dense = model.dim <= DENSE_SAMPLING_LIMIT
    factor = approx.factor
    if dense and factor.factor._dense is None:
        factor = ConstrainedFactor(SymmetricFactor(approx.precision, force_dense=True),
                                   model.constraints)
    draws = factor.sample(rng, n, mean=approx.mode)
    return draws.T, approx


def draw_posterior(model: LatentModel, theta: dict, n: int = 1000, seed: int = 0,
                   strategy: str = "empirical_bayes", approx: GaussianApprox | None = None,
                   grid_points: int = 5, grid_eval_cap: int = 4000) -> PosteriorDraws:
    """Sample the latent field from the fitted Gaussian approximation.

    ``strategy='empirical_bayes'`` samples at theta; ``strategy='grid'``
    mixes draws over a ``grid_points``-per-dimension factorial grid in the
    transformed hyperparameter space, weighted by log_marginal.
    """
    if n <= 0:
        raise InputError(f"draw count must be positive, got {n}")
    rng = np.random.default_rng(seed)
    if strategy == "empirical_bayes":
        latent, _ = _sample_at(model, theta, n, rng, approx=approx)
        return PosteriorDraws(latent=latent, theta=dict(theta),
                              layout=_layout_dict(model), seed=seed,
                              strategy=strategy)
    if strategy != "grid":
        raise InputError(f"unknown sampling strategy {strategy!r}")

    k = len(model.hyper_defs)
    if grid_points ** k > grid_eval_cap:
        raise InputError(
            f"factorial grid would need {grid_points}^{k} evaluations "
            f"(cap {grid_eval_cap}); use empirical_bayes or fewer hyperparameters")

    t_star = _to_transformed(model, theta)
    lm_star, approx_star, _ = log_marginal(theta, model)
    steps = _grid_steps(model, theta, t_star, lm_star, approx_star)
    offsets = np.arange(grid_points) - (grid_points - 1) / 2.0

    grids = []
    mesh = np.stack(np.meshgrid(*[offsets * s for s in steps], indexing="ij"),
                    axis=-1).reshape(-1, k)
    values = np.empty(len(mesh))
    for i, off in enumerate(mesh):
        th = _from_transformed(model, t_star + off)
        try:
            values[i], _, _ = log_marginal(th, model, x0=approx_star.mode)
        except NumericError:
            values[i] = -np.inf
        grids.append(th)
    weights = np.exp(values - values.max())
    weights /= weights.sum()

    counts = np.floor(weights * n).astype(int)
    remainder = n - counts.sum()
    if remainder > 0:
        frac = weights * n - counts
        counts[np.argsort(-frac)[:remainder]] += 1

    pieces = []
    for th, cnt in zip(grids, counts):
        if cnt == 0:
            continue
        latent, _ = _sample_at(model, th, cnt, rng, x0=approx_star.mode)
        pieces.append(latent)
    latent = np.vstack(pieces)
    info = {"weights": weights.tolist(), "n_points": len(grids),
            "steps": list(map(float, steps))}
    return PosteriorDraws(latent=latent, theta=dict(theta),
                          layout=_layout_dict(model), seed=seed,
                          strategy="grid", grid_info=info)


def _grid_steps(model, theta, t_star, lm_star, approx_star, h: float = 0.3):
    """Per-dimension grid spacing from a diagonal finite-difference Hessian."""
    k = len(t_star)
    steps = np.empty(k)
    for i in range(k):
        e = np.zeros(k)
        e[i] = h
        try:
            up, _, _ = log_marginal(_from_transformed(model, t_star + e), model,
                                    x0=approx_star.mode)
            dn, _, _ = log_marginal(_from_transformed(model, t_star - e), model,
                                    x0=approx_star.mode)
            curv = -(up - 2 * lm_star + dn) / h ** 2
        except NumericError:
            curv = 0.0
        steps[i] = 1.0 / np.sqrt(curv) if curv > 1e-6 else 1.0
    return steps
