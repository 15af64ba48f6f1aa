"""Area adjacency graph and ICAR/BYM2 structural quantities.

The adjacency is consumed as a precomputed edge list (queen contiguity is
the producer's responsibility; the simulator generates lattice queen
edges natively).  This module builds the graph Laplacian, the per-component
variance scaling that standardizes the ICAR field, and a direct sampler
for fields built as a scaled mixture of i.i.d. and ICAR components:

    field = sigma * (sqrt(1-phi) * v_star + sqrt(phi) * u_star)

where v_star is standard normal and u_star is a sum-to-zero ICAR draw
whose marginal variances have geometric mean 1 (division by sqrt(kappa),
with kappa the geometric mean of the constrained generalized-inverse
diagonal).  Singleton components carry no structured part: their field is
sigma * v_star.

Per-component scaling uses a dense eigendecomposition up to
``DENSE_COMPONENT_LIMIT`` nodes and a sparse factorization with stochastic
diagonal estimation beyond it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import InputError

DENSE_COMPONENT_LIMIT = 3000
_EIG_NULL_TOL = 1e-8
# tiny ridge making intrinsic precisions PD; part of the model definition
STRUCTURE_JITTER = 1e-7


@dataclass
class AreaGraph:
    """Validated symmetric adjacency with canton membership."""

    n_areas: int
    edges: np.ndarray          # (E, 2) with edges[:, 0] < edges[:, 1]
    canton_of: np.ndarray      # (n,) canton id per area
    components: list = field(default_factory=list)  # node index arrays

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def canton_ids(self) -> np.ndarray:
        return np.unique(self.canton_of)

    def areas_in_canton(self, canton) -> np.ndarray:
        return np.flatnonzero(self.canton_of == canton)

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n_areas, dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg


def build_graph(edge_list, canton_map) -> AreaGraph:
    """Validate an edge list + canton map into an AreaGraph.

    Area ids must be dense 0..n-1; the canton map defines the area set, so
    isolated areas are representable.
    """
    if isinstance(canton_map, dict):
        ids = np.array(sorted(canton_map), dtype=int)
        cantons = np.array([canton_map[i] for i in ids])
    else:
        cantons = np.asarray(canton_map)
        ids = np.arange(len(cantons))
    n = len(ids)
    if n == 0:
        raise InputError("canton map is empty")
    if not np.array_equal(ids, np.arange(n)):
        raise InputError("area ids must be dense integers 0..n-1")

    edges = np.asarray(list(edge_list), dtype=int).reshape(-1, 2)
    if edges.size:
        if (edges[:, 0] == edges[:, 1]).any():
            bad = edges[edges[:, 0] == edges[:, 1]][0, 0]
            raise InputError(f"self-loop on area {bad}")
        if edges.min() < 0 or edges.max() >= n:
            raise InputError("edge references an unknown area id")
        edges = np.sort(edges, axis=1)
        edges = np.unique(edges, axis=0)

    adj = sp.coo_matrix(
        (np.ones(2 * len(edges)),
         (np.concatenate([edges[:, 0], edges[:, 1]]),
          np.concatenate([edges[:, 1], edges[:, 0]]))),
        shape=(n, n),
    ).tocsr() if len(edges) else sp.csr_matrix((n, n))

    n_comp, labels = connected_components(adj, directed=False)
    components = [np.flatnonzero(labels == c) for c in range(n_comp)]
    return AreaGraph(n_areas=n, edges=edges, canton_of=cantons, components=components)


def load_graph(graph_csv, cantons_csv) -> AreaGraph:
    """Read `graph.csv` (area_a,area_b) and `cantons.csv` (area_id,canton_id)."""
    gdf = pd.read_csv(graph_csv)
    cdf = pd.read_csv(cantons_csv)
    for col in ("area_a", "area_b"):
        if col not in gdf.columns:
            raise InputError(f"graph file missing column {col!r}")
    for col in ("area_id", "canton_id"):
        if col not in cdf.columns:
            raise InputError(f"cantons file missing column {col!r}")
    if cdf["area_id"].duplicated().any():
        raise InputError("duplicate area_id in cantons file")
    canton_map = dict(zip(cdf["area_id"].astype(int), cdf["canton_id"]))
    return build_graph(gdf[["area_a", "area_b"]].to_numpy(dtype=int), canton_map)


def icar_structure(graph: AreaGraph) -> sp.csr_matrix:
    """Graph Laplacian: degree on the diagonal, -1 on edges."""
    n = graph.n_areas
    if len(graph.edges) == 0:
        return sp.csr_matrix((n, n))
    i = np.concatenate([graph.edges[:, 0], graph.edges[:, 1]])
    j = np.concatenate([graph.edges[:, 1], graph.edges[:, 0]])
    q = sp.coo_matrix((-np.ones(i.size), (i, j)), shape=(n, n)).tolil()
    q.setdiag(graph.degree().astype(float))
    return q.tocsr()


@dataclass
class ComponentScaling:
    """Spectral/scaling data for one connected component."""

    nodes: np.ndarray
    kappa: float                     # geometric mean of constrained Q^+ diagonal
    marginal_var: np.ndarray         # diag(Q^+)/kappa on this component
    eigenvalues: np.ndarray | None   # positive eigenvalues of Q_c (dense path)
    eigenvectors: np.ndarray | None  # matching eigenvectors (n_c, n_c-1)
    stochastic: bool = False

    @property
    def size(self) -> int:
        return len(self.nodes)

    def phi_gammas(self) -> np.ndarray:
        """Eigenvalues of the scaled generalized covariance (for the phi prior)."""
        if self.eigenvalues is None:
            raise InputError("stochastic-path component lacks explicit eigenvalues")
        return 1.0 / (self.kappa * self.eigenvalues)


@dataclass
class ScaledStructure:
    """Laplacian plus per-component BYM2 standardization."""

    graph: AreaGraph
    q_structure: sp.csr_matrix
    components: list            # ComponentScaling, aligned with graph.components
    scaled_marginal_var: np.ndarray   # per node; 0 at singleton nodes

    @property
    def n(self) -> int:
        return self.graph.n_areas

    @property
    def scaling_factors(self) -> np.ndarray:
        return np.array([c.kappa for c in self.components])

    def singleton_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        for comp in self.components:
            if comp.size == 1:
                mask[comp.nodes] = True
        return mask

    def scaled_precision(self) -> sp.csr_matrix:
        """kappa-weighted Laplacian (the precision of u_star, still intrinsic)."""
        cached = getattr(self, "_scaled_precision", None)
        if cached is None:
            weights = np.zeros(self.n)
            for comp in self.components:
                if comp.size > 1:
                    weights[comp.nodes] = comp.kappa
            w = sp.diags(np.sqrt(weights))
            cached = (w @ self.q_structure @ w).tocsr()
            self._scaled_precision = cached
        return cached

    def phi_gammas(self) -> np.ndarray:
        gammas = [c.phi_gammas() for c in self.components if c.size > 1]
        if not gammas:
            raise InputError("graph has no multi-node component; phi prior undefined")
        return np.concatenate(gammas)

    def report(self) -> dict:
        return {
            "n_areas": self.n,
            "n_components": len(self.components),
            "component_sizes": [c.size for c in self.components],
            "scaling_factors": [None if np.isnan(c.kappa) else c.kappa
                                for c in self.components],
            "scaling_note": "per-component standardization; singleton components "
                            "carry no structured field",
        }


def _dense_component_scaling(q_comp: np.ndarray, nodes: np.ndarray) -> ComponentScaling:
    vals, vecs = np.linalg.eigh(q_comp)
    scale = max(vals[-1], 1.0)
    if vals[0] > _EIG_NULL_TOL * scale or (len(vals) > 1 and vals[1] < _EIG_NULL_TOL * scale):
        raise InputError("component Laplacian does not have a simple null space; "
                         "is the component actually connected?")
    lam = vals[1:]
    v = vecs[:, 1:]
    diag = (v ** 2 / lam).sum(axis=1)
    kappa = float(np.exp(np.mean(np.log(diag))))
    return ComponentScaling(nodes=nodes, kappa=kappa, marginal_var=diag / kappa,
                            eigenvalues=lam, eigenvectors=v)


def _stochastic_component_scaling(q_comp: sp.csr_matrix, nodes: np.ndarray,
                                  rng: np.random.Generator,
                                  n_probes: int = 64) -> ComponentScaling:
    """Hutchinson estimate of diag(Q^+) through a jittered factorization."""
    from .gmrf import SymmetricFactor

    n = q_comp.shape[0]
    factor = SymmetricFactor(q_comp + STRUCTURE_JITTER * sp.identity(n))
    z = rng.choice([-1.0, 1.0], size=(n, n_probes))
    z -= z.mean(axis=0)         # project probes off the constant
    x = factor.solve(z)
    x -= x.mean(axis=0)
    diag = np.mean(z * x, axis=1)
    diag = np.maximum(diag, 1e-12)
    kappa = float(np.exp(np.mean(np.log(diag))))
    return ComponentScaling(nodes=nodes, kappa=kappa, marginal_var=diag / kappa,
                            eigenvalues=None, eigenvectors=None, stochastic=True)


def build_scaled_structure(graph: AreaGraph,
                           dense_limit: int = DENSE_COMPONENT_LIMIT,
                           rng: np.random.Generator | None = None) -> ScaledStructure:
    q = icar_structure(graph)
    comps = []
    marg = np.zeros(graph.n_areas)
    for nodes in graph.components:
        if len(nodes) == 1:
            comps.append(ComponentScaling(nodes=nodes, kappa=float("nan"),
                                          marginal_var=np.zeros(1),
                                          eigenvalues=None, eigenvectors=None))
            continue
        q_sub = q[np.ix_(nodes, nodes)]
        if len(nodes) <= dense_limit:
            comp = _dense_component_scaling(q_sub.toarray(), nodes)
        else:
            comp = _stochastic_component_scaling(
                q_sub.tocsr(), nodes, rng or np.random.default_rng(0))
        comps.append(comp)
        marg[nodes] = comp.marginal_var
    return ScaledStructure(graph=graph, q_structure=q, components=comps,
                           scaled_marginal_var=marg)


def bym2_scaling(structure: ScaledStructure) -> np.ndarray:
    """Scaling factor kappa per connected component (NaN for singletons)."""
    return structure.scaling_factors


def sample_bym2(sigma: float, phi: float, structure: ScaledStructure, rng_seed) -> np.ndarray:
    """Draw one field sigma*(sqrt(1-phi) v_star + sqrt(phi) u_star).

    Reproducible given the seed: v_star is drawn first (all nodes), then
    the structured parts component by component.
    """
    if not 0.0 <= phi <= 1.0:
        raise InputError(f"phi must be in [0, 1], got {phi}")
    if sigma < 0:
        raise InputError(f"sigma must be non-negative, got {sigma}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = structure.n
    v = rng.standard_normal(n)
    u = np.zeros(n)
    for comp in structure.components:
        if comp.size == 1:
            continue
        if comp.eigenvectors is not None:
            z = rng.standard_normal(comp.size - 1)
            draw = comp.eigenvectors @ (z / np.sqrt(comp.eigenvalues))
        else:
            draw = _sample_icar_sparse(structure, comp, rng)
        u[comp.nodes] = draw / np.sqrt(comp.kappa)
    field = sigma * (np.sqrt(1.0 - phi) * v + np.sqrt(phi) * u)
    singles = structure.singleton_mask()
    if singles.any():
        field[singles] = sigma * v[singles]
    return field


def _sample_icar_sparse(structure: ScaledStructure, comp: ComponentScaling,
                        rng: np.random.Generator) -> np.ndarray:
    """Constrained draw through the jittered factor (large components)."""
    from .gmrf import SymmetricFactor

    q_sub = structure.q_structure[np.ix_(comp.nodes, comp.nodes)].tocsc()
    factor = SymmetricFactor(q_sub + STRUCTURE_JITTER * sp.identity(comp.size))
    x = factor.sample(rng, 1)[:, 0]
    ones = np.ones((comp.size, 1))
    kx = factor.solve(ones)
    return x - kx[:, 0] * (x.sum() / kx.sum())
