"""The discrete gap energy and its minimization in the node potentials.

For a graph with edge weights ``mu_e``, node volumes ``|I|``, a boundary
family (two oriented reals per edge) and a potential family (one real per
node), the energy is

    E(u, b) = sum_e 2 mu_e (b_ab - b_ba + u_a - u_b)^2 + sum_I |I| u_I^2 .

The factor 2 comes from counting each undirected edge once per orientation;
every statistic built on E is a ratio, so the convention only has to be
applied consistently (and it is, everywhere in this package).

Minimizing over u is a symmetric positive definite linear system

    (D + 2 L) u = -2 A^T diag(mu) beta,      beta_e = b_ab - b_ba,

with L the weighted graph Laplacian and D = diag(|I|) (optionally the
identity, for comparison runs).  Solved by Jacobi-preconditioned conjugate
gradients, with a dense Cholesky fallback on small systems.

The module also evaluates the explicit gap profile

    w(r, z) = (a r^2 + nu - z) / (2 a r^2 + nu)

between two paraboloids: the z-part of its Dirichlet energy has the closed
form (pi/2a) ln(1 + 2 a d^2 / nu), the source of the |ln gap| edge weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .multigraph import InclusionGraph, is_cycle_free

__all__ = [
    "BoundaryFamily",
    "PotentialFamily",
    "EnergyBreakdown",
    "SolverOptions",
    "SolverError",
    "LaplacianAssembly",
    "energy",
    "energy_gradient",
    "minimize_energy",
    "affine_boundary_family",
    "midpoint_boundary_family",
    "cycle_free_potentials",
    "lift_short_potentials",
    "KellerParams",
    "keller_energy",
]


class SolverError(RuntimeError):
    """Conjugate gradients failed to reach the requested residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class BoundaryFamily:
    """Two oriented reals per edge, aligned with the graph's edge order.

    ``ab[e]`` is the value attached to edge ``e`` seen from its first
    endpoint, ``ba[e]`` the value seen from the second.
    """

    ab: np.ndarray
    ba: np.ndarray

    def __post_init__(self):
        self.ab = np.asarray(self.ab, dtype=float).reshape(-1)
        self.ba = np.asarray(self.ba, dtype=float).reshape(-1)
        if self.ab.shape != self.ba.shape:
            raise ValueError("ab and ba must have equal length")
        if not (np.all(np.isfinite(self.ab)) and np.all(np.isfinite(self.ba))):
            raise ValueError("boundary family values must be finite")

    @property
    def n_edges(self):
        return int(self.ab.size)

    def antisymmetric_part(self):
        """Per-edge differences b_ab - b_ba (all the energy sees of b)."""
        return self.ab - self.ba

    def to_list(self):
        return [[float(x), float(y)] for x, y in zip(self.ab, self.ba)]

    @classmethod
    def zeros(cls, n_edges):
        return cls(np.zeros(n_edges), np.zeros(n_edges))

    @classmethod
    def from_antisymmetric(cls, beta):
        """The family (beta/2, -beta/2), the minimal-norm lift of beta."""
        beta = np.asarray(beta, dtype=float).reshape(-1)
        return cls(0.5 * beta, -0.5 * beta)


@dataclass
class PotentialFamily:
    """One real per node, aligned with the graph's node order."""

    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1)

    @property
    def n_nodes(self):
        return int(self.u.size)

    def to_list(self):
        return [float(v) for v in self.u]

    @classmethod
    def zeros(cls, n_nodes):
        return cls(np.zeros(n_nodes))


@dataclass(frozen=True)
class EnergyBreakdown:
    """Gap term, mass term and their sum."""

    gap: float
    mass: float
    total: float


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int | None = None       # default 10 * n_nodes
    dense_cutoff: int = 200
    identity_mass: bool = False


def _check_indexing(graph, u=None, b=None):
    if u is not None and u.n_nodes != graph.n_nodes:
        raise ValueError(f"potential family has {u.n_nodes} entries, "
                         f"graph has {graph.n_nodes} nodes")
    if b is not None and b.n_edges != graph.n_edges:
        raise ValueError(f"boundary family has {b.n_edges} entries, "
                         f"graph has {graph.n_edges} edges")


def _gap_residuals(graph, u, b):
    """Per-edge residuals (b_ab - b_ba + u_a - u_b).

    Evaluation order is fixed (((ab - ba) + u_a) - u_b) so that potentials
    built by telescoping the same differences cancel exactly in floating
    point; ``cycle_free_potentials`` relies on this.
    """
    a_idx, b_idx, _, _ = graph.edge_arrays
    return (b.antisymmetric_part() + u.u[a_idx]) - u.u[b_idx]


def energy(graph: InclusionGraph, u: PotentialFamily, b: BoundaryFamily,
           identity_mass: bool = False) -> EnergyBreakdown:
    """Evaluate the energy; each undirected edge contributes twice."""
    _check_indexing(graph, u, b)
    _, _, mu, _ = graph.edge_arrays
    r = _gap_residuals(graph, u, b)
    gap = float(np.sum(2.0 * mu * r * r))
    weights = np.ones_like(u.u) if identity_mass else graph.node_volumes
    mass = float(np.sum(weights * u.u * u.u))
    return EnergyBreakdown(gap=gap, mass=mass, total=gap + mass)


def energy_gradient(graph, u, b, identity_mass=False):
    """Gradient of the energy with respect to the node potentials."""
    _check_indexing(graph, u, b)
    a_idx, b_idx, mu, _ = graph.edge_arrays
    r = _gap_residuals(graph, u, b)
    weights = np.ones_like(u.u) if identity_mass else graph.node_volumes
    g = 2.0 * weights * u.u
    np.add.at(g, a_idx, 4.0 * mu * r)
    np.add.at(g, b_idx, -4.0 * mu * r)
    return g


class LaplacianAssembly:
    """Sparse assembly of the minimization system for a fixed graph.

    ``laplacian`` sums parallel-edge weights into node-pair entries
    (positive semidefinite, annihilates constants), ``mass`` is the
    diagonal of node volumes, and ``system_matrix = mass + 2 laplacian``
    is the SPD matrix of the stationarity equations.
    """

    def __init__(self, graph: InclusionGraph, identity_mass: bool = False):
        n = graph.n_nodes
        a_idx, b_idx, mu, _ = graph.edge_arrays
        rows = np.concatenate([a_idx, b_idx, a_idx, b_idx])
        cols = np.concatenate([a_idx, b_idx, b_idx, a_idx])
        vals = np.concatenate([mu, mu, -mu, -mu])
        self.laplacian = scipy.sparse.csr_matrix(
            (vals, (rows, cols)), shape=(n, n))
        diag = np.ones(n) if identity_mass else graph.node_volumes.copy()
        self.mass_diagonal = diag
        self.mass = scipy.sparse.diags(diag, format="csr")
        self.system_matrix = (self.mass + 2.0 * self.laplacian).tocsr()
        self._graph = graph
        self.identity_mass = identity_mass

    def rhs(self, b: BoundaryFamily):
        """Right-hand side induced by the antisymmetric parts of ``b``."""
        _check_indexing(self._graph, b=b)
        a_idx, b_idx, mu, _ = self._graph.edge_arrays
        beta = b.antisymmetric_part()
        rhs = np.zeros(self._graph.n_nodes)
        np.add.at(rhs, a_idx, -2.0 * mu * beta)
        np.add.at(rhs, b_idx, 2.0 * mu * beta)
        return rhs


def minimize_energy(graph: InclusionGraph, b: BoundaryFamily,
                    solver_opts: SolverOptions | None = None):
    """Minimize the energy over the node potentials.

    Returns ``(u_star, breakdown)``.  The minimizer is unique (the mass
    diagonal is positive definite, so the system matrix is SPD) and is
    certified by an explicit residual check at the requested tolerance.
    """
    opts = solver_opts or SolverOptions()
    _check_indexing(graph, b=b)
    n = graph.n_nodes
    if n == 0:
        return PotentialFamily.zeros(0), EnergyBreakdown(0.0, 0.0, 0.0)

    assembly = LaplacianAssembly(graph, identity_mass=opts.identity_mass)
    rhs = assembly.rhs(b)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        u = PotentialFamily.zeros(n)
        return u, energy(graph, u, b, identity_mass=opts.identity_mass)

    K = assembly.system_matrix
    if n < opts.dense_cutoff:
        chol = scipy.linalg.cho_factor(K.toarray())
        x = scipy.linalg.cho_solve(chol, rhs)
    else:
        max_iter = opts.max_iter if opts.max_iter is not None else 10 * n
        precond = scipy.sparse.diags(1.0 / K.diagonal())
        x, info = scipy.sparse.linalg.cg(
            K, rhs, rtol=opts.tol, atol=0.0, maxiter=max_iter, M=precond)
        if info != 0:
            res = float(np.linalg.norm(K @ x - rhs)) / rhs_norm
            raise SolverError(
                f"conjugate gradients did not converge in {max_iter} "
                f"iterations (relative residual {res:.3e})", residual=res)
    residual = float(np.linalg.norm(K @ x - rhs)) / rhs_norm
    if residual > max(opts.tol, 1e-12) * 10.0:
        raise SolverError(
            f"solution rejected: relative residual {residual:.3e} exceeds "
            f"tolerance {opts.tol:.1e}", residual=residual)
    u = PotentialFamily(x)
    return u, energy(graph, u, b, identity_mass=opts.identity_mass)


# ---------------------------------------------------------------------------
# Canonical boundary families and explicit potential constructions
# ---------------------------------------------------------------------------

def affine_boundary_family(graph: InclusionGraph, xi) -> BoundaryFamily:
    """The family b_ab = xi . x_a_centroid, b_ba = xi . x_b_centroid."""
    xi = np.asarray(xi, dtype=float).reshape(3)
    a_idx, b_idx, _, _ = graph.edge_arrays
    proj = graph.node_centroids @ xi if graph.n_nodes else np.zeros(0)
    return BoundaryFamily(proj[a_idx], proj[b_idx])


def midpoint_boundary_family(graph: InclusionGraph, xi) -> BoundaryFamily:
    """Affine values measured from each edge's contact midpoint.

    b_ab = xi . (x_a_centroid - m_e), with m_e the midpoint of the
    edge's two contact points; these values stay bounded by
    |xi| (diam + delta) regardless of where the box sits.
    """
    xi = np.asarray(xi, dtype=float).reshape(3)
    if graph.n_edges == 0:
        return BoundaryFamily.zeros(0)
    a_idx, b_idx, _, _ = graph.edge_arrays
    mid = np.stack([(e.xa + e.xb) * 0.5 for e in graph.edges])
    proj = graph.node_centroids @ xi
    mid_proj = mid @ xi
    ab = proj[a_idx] - mid_proj
    ba = proj[b_idx] - mid_proj
    diam = np.fromiter((n.diameter for n in graph.nodes), float, graph.n_nodes)
    bound = (np.linalg.norm(xi) * (np.maximum(diam[a_idx], diam[b_idx])
                                   + graph.delta)) * (1.0 + 1e-9) + 1e-12
    if np.any(np.abs(ab) > bound) or np.any(np.abs(ba) > bound):
        raise RuntimeError("midpoint family out of its guaranteed bound; "
                           "graph data is inconsistent")
    return BoundaryFamily(ab, ba)


def cycle_free_potentials(graph: InclusionGraph, b: BoundaryFamily,
                          roots=None) -> PotentialFamily:
    """Telescoped potentials that cancel every gap residual on a forest.

    Along each tree branch from the cluster root, the potential accumulates
    the oriented differences b_ab - b_ba; the root potential is zero.  The
    construction matches the energy's floating-point evaluation order, so
    the resulting gap term is exactly zero.
    """
    if not is_cycle_free(graph):
        raise ValueError("graph has a cycle; telescoped potentials need a forest")
    _check_indexing(graph, b=b)
    from .multigraph import clusters as graph_clusters

    n = graph.n_nodes
    u = np.zeros(n)
    d1 = b.antisymmetric_part()

    adjacency: list[list[tuple[int, int, bool]]] = [[] for _ in range(n)]
    for k, e in enumerate(graph.edges):
        adjacency[e.a].append((e.b, k, True))    # traversal along storage
        adjacency[e.b].append((e.a, k, False))   # traversal against storage

    part = graph_clusters(graph)
    root_by_cluster = {k: min(mem) for k, mem in enumerate(part.members)}
    if roots is not None:
        for r in roots:
            root_by_cluster[int(part.node_cluster[int(r)])] = int(r)

    visited = np.zeros(n, dtype=bool)
    for root in root_by_cluster.values():
        u[root] = 0.0
        visited[root] = True
        stack = [root]
        while stack:
            parent = stack.pop()
            for child, k, along in adjacency[parent]:
                if visited[child]:
                    continue
                if along:
                    # residual ((d1 + u_a) - u_b) vanishes bitwise
                    u[child] = d1[k] + u[parent]
                else:
                    # Solve fl(d1 + u_child) == u_parent; the first guess is
                    # off by at most an ulp, a couple of nudges settle it.
                    guess = u[parent] - d1[k]
                    for _ in range(4):
                        probe = d1[k] + guess
                        if probe == u[parent]:
                            break
                        guess = guess + (u[parent] - probe)
                    u[child] = guess
                visited[child] = True
                stack.append(child)
    return PotentialFamily(u)


def lift_short_potentials(graph_F: InclusionGraph, graph_Fprime: InclusionGraph,
                          u_prime: PotentialFamily, xi) -> PotentialFamily:
    """Pull a potential family back from a short to the finer graph.

    Each fine node inherits u_I = xi . x_I + u'_{I'} - xi . x_{I'} from the
    merged node containing it; requires the merge map recorded by the short.
    """
    if graph_Fprime.node_merge_map is None:
        raise ValueError("shorted graph carries no merge map; produce it "
                         "with short_at/short_kappa from the source graph")
    merge_map = np.asarray(graph_Fprime.node_merge_map, dtype=np.int64)
    if merge_map.size != graph_F.n_nodes:
        raise ValueError("merge map does not index the source graph's nodes")
    _check_indexing(graph_Fprime, u=u_prime)
    xi = np.asarray(xi, dtype=float).reshape(3)
    proj_fine = graph_F.node_centroids @ xi
    proj_coarse = graph_Fprime.node_centroids @ xi
    u = proj_fine + u_prime.u[merge_map] - proj_coarse[merge_map]
    return PotentialFamily(u)


# ---------------------------------------------------------------------------
# Gap profile (Keller) energies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KellerParams:
    """Paraboloid gap geometry: curvature a, width nu, radius d, weight gamma."""

    a: float
    nu: float
    d: float
    gamma: float = 0.0

    def __post_init__(self):
        if not (self.a > 0.0):
            raise ValueError("curvature a must be positive")
        if not (0.0 < self.nu < 1.0):
            raise ValueError("gap width nu must lie in (0, 1)")
        if not (self.d > 0.0):
            raise ValueError("gap radius d must be positive")
        if self.gamma < 0.0:
            raise ValueError("weight exponent gamma must be >= 0")


def _keller_midpoint(params: KellerParams, n_r: int, n_z: int):
    """Midpoint quadratures of the gap-profile gradient over the gap.

    The gap region is { r <= d, -a r^2 <= z <= nu + a r^2 }; the angular
    integral is analytic (factor 2 pi).  Returns (z-part, full, weighted)
    where the weight is |x|^(2 gamma) measured from the gap center.
    """
    a, nu, d, gamma = params.a, params.nu, params.d, params.gamma
    r = (np.arange(n_r) + 0.5) * (d / n_r)
    h = nu + 2.0 * a * r * r            # z-range length at radius r
    denom = 2.0 * a * r * r + nu
    wz2 = 1.0 / (denom * denom)         # (dw/dz)^2, independent of z
    base = 2.0 * math.pi * r * (d / n_r) * (h / n_z)

    acc_z = 0.0
    acc_full = 0.0
    acc_weighted = 0.0
    for k in range(n_z):
        t = (k + 0.5) / n_z
        z = -a * r * r + t * h
        wr = 2.0 * a * r * (2.0 * z - nu) / (denom * denom)
        grad2 = wr * wr + wz2
        acc_z += float(np.sum(base * wz2))
        acc_full += float(np.sum(base * grad2))
        if gamma > 0.0:
            weight = (r * r + z * z) ** gamma
            acc_weighted += float(np.sum(base * grad2 * weight))
    if gamma == 0.0:
        acc_weighted = acc_full
    return acc_z, acc_full, acc_weighted


def keller_energy(params: KellerParams, quadrature_grid=(1024, 32)) -> dict:
    """Dirichlet energies of the explicit gap profile.

    Returns a dict with

    * ``z_closed_form``       -- exact value of the z-derivative energy,
                                 (pi / 2a) ln(1 + 2 a d^2 / nu),
    * ``z_quadrature``        -- midpoint quadrature of the same integral,
    * ``full_quadrature``     -- quadrature of the full squared gradient,
    * ``weighted_quadrature`` -- full gradient weighted by |x|^(2 gamma).

    Quadratures use the tensor midpoint rule in (r, z) with the angular
    factor analytic, refined once by grid doubling and Richardson
    extrapolated.  The radial resolution is raised automatically for small
    ``nu`` so the near-axis peak of the integrand stays resolved.
    """
    if isinstance(quadrature_grid, int):
        n_r, n_z = quadrature_grid, quadrature_grid
    else:
        n_r, n_z = quadrature_grid
    if n_r < 16 or n_z < 16:
        raise ValueError("grid resolution must be at least 16 per axis")
    # Resolve the integrand's peak at r ~ sqrt(nu / a).
    n_r = max(int(n_r), int(math.ceil(8.0 * params.d / math.sqrt(params.nu / params.a))))

    coarse = _keller_midpoint(params, n_r, n_z)
    fine = _keller_midpoint(params, 2 * n_r, 2 * n_z)
    z_quad, full_quad, weighted_quad = (
        (4.0 * f - c) / 3.0 for c, f in zip(coarse, fine))

    a, nu, d = params.a, params.nu, params.d
    z_closed = (math.pi / (2.0 * a)) * math.log1p(2.0 * a * d * d / nu)
    return {
        "z_closed_form": z_closed,
        "z_quadrature": z_quad,
        "full_quadrature": full_quad,
        "weighted_quadrature": weighted_quad,
    }
