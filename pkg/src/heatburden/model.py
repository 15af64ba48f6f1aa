"""Latent Gaussian model assembly.

The joint model over the latent vector x (given hyperparameters theta) is

    y | x          ~ Poisson(exp(offset + A x))        [or Gaussian]
    x | theta      ~ N(0, Q(theta)^{-1}) subject to C x = 0

with x laid out in fixed block order: intercept, spline fixed effects,
calendar fixed effects, one (field, u) pair per spline column, the
spatial residual (field, u) pair, the seasonal random walk, the yearly
effects, and optionally two unstructured interaction blocks.

Each BYM2 pair is kept in the augmented (field, u) parameterization so
the ICAR factor is explicit and testable: with tau = 1/sigma^2,

    P_ff = tau/(1-phi) I,   P_fu = -sqrt(tau*phi)/(1-phi) I,
    P_uu = Q_star + phi/(1-phi) I,

where Q_star is the per-component kappa-scaled Laplacian.  Every u block
carries a sum-to-zero constraint per connected component; the seasonal
block carries sum-to-zero and zero-linear-trend constraints.  Intrinsic
sub-blocks (u, seasonal) additionally receive a tiny fixed ridge
(graph.STRUCTURE_JITTER) so all factorizations are positive definite;
the ridge is part of the model definition and is reproduced by the dense
test oracles.

Singleton graph components have no structured field: there the pair
degenerates to P_ff = tau, P_fu = 0, and the u coordinate becomes an
inert standard normal placeholder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import InputError
from .gmrf import stack_constraints
from .graph import STRUCTURE_JITTER, ScaledStructure
from .priors import PhiPCPrior, pc_sd_logdensity
from .splines import SplineBasis

SEASON_LENGTH = 92          # June 1 .. August 31
N_CALENDAR = 7              # Monday..Saturday indicators + holiday


@dataclass
class PriorConfig:
    """PC prior (U, alpha) pairs and fixed-effect variances."""

    sd_svc: tuple = (1.0, 0.01)
    sd_spatial: tuple = (1.0, 0.01)
    sd_seasonality: tuple = (0.01, 0.01)
    sd_year: tuple = (1.0, 0.01)
    sd_interaction: tuple = (1.0, 0.01)
    phi: tuple = (0.5, 0.5)
    var_intercept: float = 1e6
    var_fixed: float = 1000.0

    def loosen_seasonality(self) -> "PriorConfig":
        import dataclasses
        return dataclasses.replace(self, sd_seasonality=(1.0, 0.01))


@dataclass
class HyperDef:
    name: str
    kind: str                    # 'sd' | 'phi'
    pc: tuple                    # (U, alpha)
    init: float
    phi_prior: PhiPCPrior | None = None

    @property
    def transform(self) -> str:
        return "logit" if self.kind == "phi" else "log"


@dataclass
class Block:
    name: str
    size: int
    kind: str                    # 'fixed' | 'iid' | 'rw2' | 'bym2'
    start: int = 0
    prior_var: float = 1.0       # fixed blocks
    sd_hyper: str = ""           # iid / rw2 / bym2
    phi_hyper: str = ""          # bym2
    structure: ScaledStructure | None = None


def _rw2_structure(m: int) -> sp.csr_matrix:
    d2 = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(m - 2, m))
    return (d2.T @ d2).tocsr()


class LatentModel:
    """Immutable-after-build latent Gaussian model."""

    def __init__(self, blocks, hyper_defs, a, y, offset, likelihood="poisson",
                 meta=None):
        pos = 0
        self.blocks: dict[str, Block] = {}
        for b in blocks:
            b.start = pos
            pos += b.size
            self.blocks[b.name] = b
        self.dim = pos
        self.hyper_defs: list[HyperDef] = hyper_defs
        self.hyper_names = [h.name for h in hyper_defs]
        self.a = sp.csr_matrix(a)
        if self.a.shape[1] != self.dim:
            raise InputError("design matrix width does not match latent dimension")
        self.y = np.asarray(y, dtype=float)
        self.offset = np.asarray(offset, dtype=float)
        if likelihood not in ("poisson", "gaussian"):
            raise InputError(f"unknown likelihood {likelihood!r}")
        self.likelihood = likelihood
        self.meta = meta or {}
        self.constraints = self._build_constraints()
        self._cached_q = {}

    # -- layout ------------------------------------------------------------

    def slice(self, name: str) -> slice:
        b = self.blocks[name]
        return slice(b.start, b.start + b.size)

    def block_names(self):
        return list(self.blocks)

    def _build_constraints(self):
        rows = []
        for b in self.blocks.values():
            if b.kind == "bym2" and b.name.endswith("_u"):
                for comp in b.structure.components:
                    if comp.size > 1:
                        idx = b.start + comp.nodes
                        rows.append((idx, np.ones(comp.size)))
            elif b.kind == "rw2":
                idx = np.arange(b.start, b.start + b.size)
                rows.append((idx, np.ones(b.size)))
                trend = np.arange(b.size, dtype=float)
                rows.append((idx, trend - trend.mean()))
        return stack_constraints(rows, self.dim)

    # -- hyperparameters ----------------------------------------------------

    def default_hyper(self) -> dict:
        return {h.name: h.init for h in self.hyper_defs}

    def validate_hyper(self, theta: dict):
        for h in self.hyper_defs:
            v = theta[h.name]
            if h.kind == "sd" and not v > 0:
                raise InputError(f"{h.name} must be positive, got {v}")
            if h.kind == "phi" and not (0.0 <= v < 1.0):
                raise InputError(f"{h.name} must be in [0, 1), got {v}")

    def log_hyperprior(self, theta: dict) -> float:
        total = 0.0
        for h in self.hyper_defs:
            v = theta[h.name]
            if h.kind == "sd":
                total += pc_sd_logdensity(v, *h.pc)
            else:
                total += h.phi_prior.logpdf(v)
        return float(total)

    # -- prior precision -----------------------------------------------------

    def prior_precision(self, theta: dict) -> sp.csc_matrix:
        """Sparse joint prior precision at theta (PD thanks to the ridge)."""
        self.validate_hyper(theta)
        parts_i, parts_j, parts_v = [], [], []

        def add_diag(start, values):
            idx = np.arange(start, start + len(values))
            parts_i.append(idx)
            parts_j.append(idx)
            parts_v.append(np.asarray(values, dtype=float))

        def add_coo(mat, start_r, start_c):
            coo = sp.coo_matrix(mat)
            parts_i.append(coo.row + start_r)
            parts_j.append(coo.col + start_c)
            parts_v.append(coo.data)

        handled = set()
        for b in self.blocks.values():
            if b.name in handled:
                continue
            if b.kind == "fixed":
                add_diag(b.start, np.full(b.size, 1.0 / b.prior_var))
            elif b.kind == "iid":
                sd = theta[b.sd_hyper]
                add_diag(b.start, np.full(b.size, 1.0 / sd ** 2))
            elif b.kind == "rw2":
                sd = theta[b.sd_hyper]
                r = _rw2_structure(b.size) / sd ** 2
                add_coo(r, b.start, b.start)
                add_diag(b.start, np.full(b.size, STRUCTURE_JITTER))
            elif b.kind == "bym2" and not b.name.endswith("_u"):
                ub = self.blocks[b.name + "_u"]
                handled.add(ub.name)
                self._add_bym2_pair(b, ub, theta, add_diag, add_coo)
        i = np.concatenate(parts_i)
        j = np.concatenate(parts_j)
        v = np.concatenate(parts_v)
        return sp.coo_matrix((v, (i, j)), shape=(self.dim, self.dim)).tocsc()

    def _add_bym2_pair(self, fb: Block, ub: Block, theta, add_diag, add_coo):
        structure = fb.structure
        n = structure.n
        sigma = theta[fb.sd_hyper]
        phi = theta[fb.phi_hyper]
        tau = 1.0 / sigma ** 2
        singles = structure.singleton_mask()
        multi = ~singles

        p_ff = np.where(multi, tau / (1.0 - phi), tau)
        add_diag(fb.start, p_ff)

        coupling = np.where(multi, -np.sqrt(tau * phi) / (1.0 - phi), 0.0)
        idx_f = np.arange(fb.start, fb.start + n)
        idx_u = np.arange(ub.start, ub.start + n)
        for rr, cc in ((idx_f, idx_u), (idx_u, idx_f)):
            nz = coupling != 0
            if nz.any():
                add_coo(sp.coo_matrix((coupling[nz], (rr[nz] - rr[0], cc[nz] - cc[0])),
                                      shape=(n, n)), rr[0], cc[0])

        add_coo(structure.scaled_precision(), ub.start, ub.start)
        p_uu_diag = np.where(multi, phi / (1.0 - phi) + STRUCTURE_JITTER, 1.0)
        add_diag(ub.start, p_uu_diag)

    # -- likelihood ----------------------------------------------------------

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        return self.offset + self.a @ x

    def loglik_parts(self, x: np.ndarray, theta: dict):
        """(log-likelihood, d/d eta, -d2/d eta2) at latent state x."""
        ell = self.linear_predictor(x)
        if self.likelihood == "poisson":
            return poisson_loglik(self.y, self.offset, self.a @ x)
        sd = theta["sigma_obs"]
        resid = self.y - ell
        ll = -0.5 * np.sum(resid ** 2) / sd ** 2 - 0.5 * len(self.y) * np.log(
            2 * np.pi * sd ** 2)
        grad = resid / sd ** 2
        w = np.full(len(self.y), 1.0 / sd ** 2)
        return float(ll), grad, w


def poisson_loglik(counts, offsets, eta):
    """Poisson log likelihood with log link, plus per-record gradient/curvature.

    Returns (sum loglik, gradient d/d eta, curvature -d2/d eta2); the
    linear predictor is offsets + eta.
    """
    counts = np.asarray(counts, dtype=float)
    ell = np.asarray(offsets, dtype=float) + np.asarray(eta, dtype=float)
    mu = np.exp(np.minimum(ell, 40.0))      # overflow guard for wild Newton states
    ll = float(np.sum(counts * ell - mu - gammaln(counts + 1.0)))
    return ll, counts - mu, mu


# -- main-model assembly -----------------------------------------------------

REQUIRED_TABLE_COLUMNS = ("area_id", "deaths", "population", "exposure",
                          "dow", "holiday", "day_index", "year_index")


def calendar_row(dow: int, holiday: int) -> np.ndarray:
    """7-entry calendar covariate row: Monday..Saturday indicators + holiday."""
    row = np.zeros(N_CALENDAR)
    if not 0 <= dow <= 6:
        raise InputError(f"day-of-week must be 0..6 (Monday=0), got {dow}")
    if dow < 6:                 # Sunday (6) is the reference level
        row[dow] = 1.0
    row[6] = 1.0 if holiday else 0.0
    return row


def _standard_hypers(priors: PriorConfig, structure: ScaledStructure,
                     sensitivity_iii: bool):
    phi_prior = PhiPCPrior(structure.phi_gammas(), *priors.phi)
    defs = []
    for j in range(1, 5):
        defs.append(HyperDef(f"sigma_beta{j}", "sd", priors.sd_svc,
                             init=_pc_median(priors.sd_svc)))
        defs.append(HyperDef(f"phi_beta{j}", "phi", priors.phi, init=0.5,
                             phi_prior=phi_prior))
    defs.append(HyperDef("sigma_b", "sd", priors.sd_spatial,
                         init=_pc_median(priors.sd_spatial)))
    defs.append(HyperDef("phi_b", "phi", priors.phi, init=0.5, phi_prior=phi_prior))
    defs.append(HyperDef("sigma_omega", "sd", priors.sd_seasonality,
                         init=_pc_median(priors.sd_seasonality)))
    defs.append(HyperDef("sigma_delta", "sd", priors.sd_year,
                         init=_pc_median(priors.sd_year)))
    if sensitivity_iii:
        defs.append(HyperDef("sigma_xi", "sd", priors.sd_interaction,
                             init=_pc_median(priors.sd_interaction)))
        defs.append(HyperDef("sigma_eta", "sd", priors.sd_interaction,
                             init=_pc_median(priors.sd_interaction)))
    return defs


def _pc_median(pc: tuple) -> float:
    u, alpha = pc
    return float(np.log(2.0) * u / -np.log(alpha))


def assemble(table: pd.DataFrame, basis: SplineBasis, structure: ScaledStructure,
             priors: PriorConfig | None = None,
             sensitivity_iii: bool = False) -> LatentModel:
    """Build the full latent model from an ingested analysis table."""
    priors = priors or PriorConfig()
    for col in REQUIRED_TABLE_COLUMNS:
        if col not in table.columns:
            raise InputError(f"analysis table lacks column {col!r}")
    n = structure.n
    areas = table["area_id"].to_numpy(dtype=int)
    if areas.min() < 0 or areas.max() >= n:
        raise InputError("analysis table references areas outside the graph")

    exposure = table["exposure"].to_numpy(dtype=float)
    lo, hi = basis.boundary_knots
    if exposure.min() < lo or exposure.max() > hi:
        raise InputError(
            f"exposures outside the basis domain [{lo}, {hi}]: "
            f"range ({exposure.min()}, {exposure.max()})")

    day_idx = table["day_index"].to_numpy(dtype=int)
    year_idx = table["year_index"].to_numpy(dtype=int)
    if day_idx.min() < 0 or day_idx.max() >= SEASON_LENGTH:
        raise InputError("day_index out of the 0..91 summer range")
    n_years = int(year_idx.max()) + 1
    pop = table["population"].to_numpy(dtype=float)
    if np.any(pop <= 0):
        raise InputError("analysis table contains non-positive populations; "
                         "ingest should have dropped them")

    ncol = basis.ncol
    blocks = [Block("intercept", 1, "fixed", prior_var=priors.var_intercept),
              Block("beta", ncol, "fixed", prior_var=priors.var_fixed),
              Block("gamma", N_CALENDAR, "fixed", prior_var=priors.var_fixed)]
    for j in range(1, ncol + 1):
        blocks.append(Block(f"svc{j}", n, "bym2", sd_hyper=f"sigma_beta{j}",
                            phi_hyper=f"phi_beta{j}", structure=structure))
        blocks.append(Block(f"svc{j}_u", n, "bym2", sd_hyper=f"sigma_beta{j}",
                            phi_hyper=f"phi_beta{j}", structure=structure))
    blocks.append(Block("b", n, "bym2", sd_hyper="sigma_b", phi_hyper="phi_b",
                        structure=structure))
    blocks.append(Block("b_u", n, "bym2", sd_hyper="sigma_b", phi_hyper="phi_b",
                        structure=structure))
    blocks.append(Block("omega", SEASON_LENGTH, "rw2", sd_hyper="sigma_omega"))
    blocks.append(Block("delta", n_years, "iid", sd_hyper="sigma_delta"))
    if sensitivity_iii:
        blocks.append(Block("xi", n_years * n, "iid", sd_hyper="sigma_xi"))
        blocks.append(Block("eta", SEASON_LENGTH * n, "iid", sd_hyper="sigma_eta"))

    starts = {}
    pos = 0
    for b in blocks:
        starts[b.name] = pos
        pos += b.size
    dim = pos

    xc = basis.evaluate(exposure, centered=True)          # (records, ncol)
    m = len(table)
    dow = table["dow"].to_numpy(dtype=int)
    holiday = table["holiday"].to_numpy(dtype=int)

    rows, cols, vals = [], [], []

    def put(col_idx, values):
        rows.append(np.arange(m))
        cols.append(col_idx)
        vals.append(values)

    put(np.zeros(m, dtype=int), np.ones(m))
    for j in range(ncol):
        put(np.full(m, starts["beta"] + j), xc[:, j])
    weekday_mask = dow < 6
    if weekday_mask.any():
        rows.append(np.flatnonzero(weekday_mask))
        cols.append(starts["gamma"] + dow[weekday_mask])
        vals.append(np.ones(weekday_mask.sum()))
    hol_mask = holiday > 0
    if hol_mask.any():
        rows.append(np.flatnonzero(hol_mask))
        cols.append(np.full(hol_mask.sum(), starts["gamma"] + 6))
        vals.append(np.ones(hol_mask.sum()))
    for j in range(ncol):
        put(starts[f"svc{j + 1}"] + areas, xc[:, j])
    put(starts["b"] + areas, np.ones(m))
    put(starts["omega"] + day_idx, np.ones(m))
    put(starts["delta"] + year_idx, np.ones(m))
    if sensitivity_iii:
        put(starts["xi"] + year_idx * n + areas, np.ones(m))
        put(starts["eta"] + day_idx * n + areas, np.ones(m))

    a = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m, dim)).tocsr()

    meta = {
        "n_areas": n,
        "n_years": n_years,
        "season_length": SEASON_LENGTH,
        "n_records": m,
        "areas": areas,
        "sensitivity_iii": sensitivity_iii,
        "basis": basis,
        "structure": structure,
    }
    return LatentModel(blocks, _standard_hypers(priors, structure, sensitivity_iii),
                       a, table["deaths"].to_numpy(dtype=float), np.log(pop),
                       likelihood="poisson", meta=meta)
