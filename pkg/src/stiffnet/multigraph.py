"""The gap multigraph of a sphere configuration, and shorts of it.

Nodes are the connected components of the configuration; an edge joins two
distinct components for every pair of their spheres whose surface gap ``d``
is at most the threshold ``delta``.  Parallel edges are kept (several gaps
may join the same pair of components).  The edge weight is ``mu = |ln d|``;
requiring ``delta < 1`` keeps all weights positive.

A *short* merges chosen node groups into single nodes, suppressing the
edges that become internal; ``short_kappa`` shorts exactly the gaps
narrower than ``kappa`` that are not in a protected edge set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import ComponentSet, SphereConfig, _UnionFind, _pairs_within

__all__ = [
    "Node",
    "Edge",
    "InclusionGraph",
    "ClusterPartition",
    "closest_points",
    "build_graph",
    "clusters",
    "short_at",
    "short_kappa",
    "is_cycle_free",
]

_CONTACT_ATOL = 1e-9


@dataclass
class Node:
    """A graph node: one component with its volume, centroid and diameter.

    ``sphere_ids``/``sphere_centers``/``sphere_radii`` carry the underlying
    ball geometry when the graph was built from a configuration; they are
    not serialized.  Deserialized graphs have them set to None, and the
    operations that need exact ball geometry fall back to conservative
    bounds (see ``short_at``) or refuse to run (``boundary_nodes``).
    """

    id: int
    volume: float
    centroid: np.ndarray
    diameter: float
    boundary: bool
    component_index: int | None = None
    sphere_ids: tuple[int, ...] | None = None
    sphere_centers: np.ndarray | None = None
    sphere_radii: np.ndarray | None = None


@dataclass
class Edge:
    """A gap between two nodes: contact points, width ``d``, weight ``mu``."""

    id: int
    a: int
    b: int
    xa: np.ndarray
    xb: np.ndarray
    d: float
    mu: float


@dataclass
class InclusionGraph:
    """The gap multigraph: nodes, multi-edges, threshold and box size.

    Treated as immutable after construction; every operation returns a new
    graph.  ``g2_violations`` counts spheres whose near-contact caps at the
    threshold ``delta`` overlap (two gaps too close to separate, see
    ``build_graph``); it is diagnostic only and never alters the edge set.
    ``node_merge_map`` is set on graphs produced by shorts and maps the
    source graph's node ids to this graph's node ids.
    """

    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    delta: float
    box_half_width: float
    g2_violations: int = 0
    node_merge_map: tuple[int, ...] | None = field(default=None, repr=False)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_edges(self):
        return len(self.edges)

    def box_volume(self):
        return (2.0 * self.box_half_width) ** 3

    @cached_property
    def edge_arrays(self):
        """(a_idx, b_idx, mu, d) as arrays aligned with the edge order."""
        if not self.edges:
            z = np.zeros(0)
            return np.zeros(0, np.int64), np.zeros(0, np.int64), z, z
        a = np.fromiter((e.a for e in self.edges), np.int64, len(self.edges))
        b = np.fromiter((e.b for e in self.edges), np.int64, len(self.edges))
        mu = np.fromiter((e.mu for e in self.edges), float, len(self.edges))
        d = np.fromiter((e.d for e in self.edges), float, len(self.edges))
        return a, b, mu, d

    @cached_property
    def node_volumes(self):
        return np.fromiter((n.volume for n in self.nodes), float, len(self.nodes))

    @cached_property
    def node_centroids(self):
        if not self.nodes:
            return np.zeros((0, 3))
        return np.stack([n.centroid for n in self.nodes])

    def has_geometry(self):
        return all(n.sphere_centers is not None for n in self.nodes)

    def to_dict(self):
        return {
            "delta": self.delta,
            "N": self.box_half_width,
            "nodes": [
                {
                    "id": n.id,
                    "vol": float(n.volume),
                    "x": [float(v) for v in n.centroid],
                    "diam": float(n.diameter),
                    "boundary": bool(n.boundary),
                }
                for n in self.nodes
            ],
            "edges": [
                {
                    "id": e.id,
                    "a": e.a,
                    "b": e.b,
                    "xa": [float(v) for v in e.xa],
                    "xb": [float(v) for v in e.xb],
                    "d": float(e.d),
                    "mu": float(e.mu),
                }
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, data):
        from .cli import SchemaError

        if not isinstance(data, dict):
            raise SchemaError("graph document must be a JSON object")
        missing = [k for k in ("delta", "N", "nodes", "edges") if k not in data]
        if missing:
            raise SchemaError(f"graph document missing fields: {missing}")
        try:
            nodes = tuple(
                Node(
                    id=int(n["id"]),
                    volume=float(n["vol"]),
                    centroid=np.array([float(v) for v in n["x"]], dtype=float),
                    diameter=float(n["diam"]),
                    boundary=bool(n["boundary"]),
                )
                for n in data["nodes"]
            )
            edges = tuple(
                Edge(
                    id=int(e["id"]),
                    a=int(e["a"]),
                    b=int(e["b"]),
                    xa=np.array([float(v) for v in e["xa"]], dtype=float),
                    xb=np.array([float(v) for v in e["xb"]], dtype=float),
                    d=float(e["d"]),
                    mu=float(e["mu"]),
                )
                for e in data["edges"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid graph document: {exc}") from None
        return cls(nodes=nodes, edges=edges, delta=float(data["delta"]),
                   box_half_width=float(data["N"]))

    def __eq__(self, other):
        if not isinstance(other, InclusionGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass
class ClusterPartition:
    """Connected components of the multigraph (clusters of inclusions)."""

    node_cluster: np.ndarray        # (n_nodes,) node -> cluster index
    members: tuple[tuple[int, ...], ...]
    diameters: np.ndarray           # union diameter per cluster
    volumes: np.ndarray             # total node volume per cluster
    cardinalities: np.ndarray       # number of nodes per cluster

    @property
    def n_clusters(self):
        return len(self.members)


def closest_points(sphere_a, sphere_b):
    """Closest surface points of two disjoint spheres and their gap.

    Spheres are (center, radius) pairs (``geometry.Sphere`` works too).
    The points lie on the center line; rejects overlapping spheres.
    """
    ca, ra = np.asarray(sphere_a[0], dtype=float), float(sphere_a[1])
    cb, rb = np.asarray(sphere_b[0], dtype=float), float(sphere_b[1])
    dist = float(np.linalg.norm(cb - ca))
    if dist <= ra + rb:
        raise ValueError("spheres overlap or touch; merge them into one "
                         "component instead of building a gap")
    u = (cb - ca) / dist
    xa = ca + ra * u
    xb = cb - rb * u
    return xa, xb, dist - ra - rb


def _cap_cos_angle(r_self, r_other, center_dist, delta):
    """Cosine of the angular radius of the near-contact cap.

    The cap of a sphere of radius ``r_self`` facing a partner at center
    distance ``center_dist`` collects the surface points within ``delta``
    of the partner ball.
    """
    c = (center_dist ** 2 + r_self ** 2 - (r_other + delta) ** 2) / (
        2.0 * center_dist * r_self)
    return min(1.0, max(-1.0, c))


def _count_g2_violations(config, pairs, dist, delta):
    """Count spheres with overlapping contact caps at threshold ``delta``.

    The separation hypothesis behind the multigraph asks every near-contact
    region to pair with at most one partner within ``2*delta``.  For balls
    this fails exactly when two caps on one sphere overlap; we count such
    spheres instead of second-guessing the configuration.
    """
    by_sphere: dict[int, list[tuple[float, np.ndarray]]] = {}
    centers, radii = config.centers, config.radii
    for (i, j), dij in zip(pairs, dist):
        gap = dij - radii[i] - radii[j]
        if gap > 2.0 * delta:
            continue
        axis = (centers[j] - centers[i]) / dij
        by_sphere.setdefault(int(i), []).append(
            (math.acos(_cap_cos_angle(radii[i], radii[j], dij, delta)), axis))
        by_sphere.setdefault(int(j), []).append(
            (math.acos(_cap_cos_angle(radii[j], radii[i], dij, delta)), -axis))
    violations = 0
    for caps in by_sphere.values():
        if len(caps) < 2:
            continue
        bad = False
        for k in range(len(caps)):
            for l in range(k + 1, len(caps)):
                ang = math.acos(min(1.0, max(-1.0, float(caps[k][1] @ caps[l][1]))))
                if ang < caps[k][0] + caps[l][0]:
                    bad = True
                    break
            if bad:
                break
        violations += bad
    return violations


def build_graph(component_set: ComponentSet, config: SphereConfig,
                delta: float) -> InclusionGraph:
    """Build the gap multigraph at threshold ``delta``.

    One edge per pair of spheres in distinct components with gap at most
    ``delta``; candidate pairs come from a KD-tree query at radius
    ``2*max_radius + delta`` so no pair can be missed.  Edges are sorted by
    (node_a, node_b, d) and the edge count matches brute-force pair
    enumeration exactly.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1): weights |ln d| must "
                         "stay positive")
    labels = component_set.labels
    n_comp = component_set.n_components

    nodes = []
    for k in range(n_comp):
        idx = component_set.sphere_indices(k)
        nodes.append(Node(
            id=k,
            volume=float(component_set.volumes[k]),
            centroid=component_set.centroids[k].copy(),
            diameter=float(component_set.diameters[k]),
            boundary=bool(component_set.boundary[k]),
            component_index=k,
            sphere_ids=tuple(int(i) for i in idx),
            sphere_centers=config.centers[idx].copy(),
            sphere_radii=config.radii[idx].copy(),
        ))

    g2_violations = 0
    records = []
    if config.n_spheres >= 2:
        # Search out to 2*delta so the cap-separation diagnostic sees the
        # near misses as well; edges keep the strict gap <= delta cut.
        cand = _pairs_within(config.centers, config.radii, 2.0 * delta)
        if cand.size:
            diff = config.centers[cand[:, 0]] - config.centers[cand[:, 1]]
            dist = np.linalg.norm(diff, axis=1)
            gap = dist - config.radii[cand[:, 0]] - config.radii[cand[:, 1]]
            cross = labels[cand[:, 0]] != labels[cand[:, 1]]
            near = cross & (gap <= 2.0 * delta)
            g2_violations = _count_g2_violations(
                config, cand[near], dist[near], delta)
            keep = cross & (gap <= delta)
            for (i, j), dij in zip(cand[keep], dist[keep]):
                xa, xb, d = closest_points(
                    (config.centers[i], config.radii[i]),
                    (config.centers[j], config.radii[j]))
                na, nb = int(labels[i]), int(labels[j])
                if na > nb:
                    na, nb = nb, na
                    xa, xb = xb, xa
                records.append((na, nb, d, xa, xb))

    records.sort(key=lambda r: (r[0], r[1], r[2], tuple(r[3]), tuple(r[4])))
    edges = tuple(
        Edge(id=k, a=na, b=nb, xa=xa, xb=xb, d=d, mu=abs(math.log(d)))
        for k, (na, nb, d, xa, xb) in enumerate(records)
    )
    return InclusionGraph(nodes=tuple(nodes), edges=edges, delta=delta,
                          box_half_width=config.box_half_width,
                          g2_violations=g2_violations)


def _pairwise_extent(centers, radii):
    """Max surface-to-surface extent of a ball family (its diameter)."""
    if centers.shape[0] == 1:
        return float(2.0 * radii[0])
    best = 0.0
    block = 1024
    for s in range(0, centers.shape[0], block):
        c1, r1 = centers[s:s + block], radii[s:s + block]
        dmat = np.linalg.norm(c1[:, None, :] - centers[None, :, :], axis=2)
        best = max(best, float((dmat + r1[:, None] + radii[None, :]).max()))
    return best


def clusters(graph: InclusionGraph) -> ClusterPartition:
    """Connected components of the multigraph, with per-cluster stats.

    Union diameter is exact (pairwise over all member balls) when the graph
    carries sphere geometry; otherwise an upper bound from node centroids
    and node diameters is used.
    """
    n = graph.n_nodes
    uf = _UnionFind(n)
    for e in graph.edges:
        uf.union(e.a, e.b)
    roots = np.fromiter((uf.find(i) for i in range(n)), np.int64, n)
    _, node_cluster = (np.unique(roots, return_inverse=True)
                       if n else (None, np.zeros(0, np.int64)))
    m = int(node_cluster.max()) + 1 if n else 0

    members = tuple(
        tuple(int(i) for i in np.nonzero(node_cluster == k)[0]) for k in range(m))
    volumes = np.zeros(m)
    cardinalities = np.zeros(m, dtype=np.int64)
    diameters = np.zeros(m)
    geo = graph.has_geometry()
    for k, mem in enumerate(members):
        vols = [graph.nodes[i].volume for i in mem]
        volumes[k] = math.fsum(vols)
        cardinalities[k] = len(mem)
        if geo:
            centers = np.concatenate([graph.nodes[i].sphere_centers for i in mem])
            radii = np.concatenate([graph.nodes[i].sphere_radii for i in mem])
            diameters[k] = _pairwise_extent(centers, radii)
        else:
            best = max(graph.nodes[i].diameter for i in mem)
            for ii in range(len(mem)):
                for jj in range(ii + 1, len(mem)):
                    na, nb = graph.nodes[mem[ii]], graph.nodes[mem[jj]]
                    best = max(best, float(np.linalg.norm(na.centroid - nb.centroid))
                               + 0.5 * na.diameter + 0.5 * nb.diameter)
            diameters[k] = best
    return ClusterPartition(node_cluster=node_cluster, members=members,
                            diameters=diameters, volumes=volumes,
                            cardinalities=cardinalities)


def short_at(graph: InclusionGraph, node_pairs) -> InclusionGraph:
    """Short the graph at the given node pairs.

    Nodes in the transitive closure of the pair relation merge into one
    node (summed volume, volume-weighted centroid, union diameter); edges
    joining merged nodes are suppressed, all other edges survive with
    remapped endpoints and keep their ids, so the edge set of the result
    is a subset of the input's.
    """
    pairs = [(int(a), int(b)) for a, b in node_pairs]
    n = graph.n_nodes
    for a, b in pairs:
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError(f"short references missing node: ({a}, {b})")
    if not pairs:
        return graph

    uf = _UnionFind(n)
    for a, b in pairs:
        uf.union(a, b)
    roots = np.fromiter((uf.find(i) for i in range(n)), np.int64, n)
    _, merge_map = np.unique(roots, return_inverse=True)

    m = int(merge_map.max()) + 1
    new_nodes = []
    geo = graph.has_geometry()
    for k in range(m):
        mem = [graph.nodes[i] for i in np.nonzero(merge_map == k)[0]]
        if len(mem) == 1:
            src = mem[0]
            new_nodes.append(Node(
                id=k, volume=src.volume, centroid=src.centroid,
                diameter=src.diameter, boundary=src.boundary,
                component_index=src.component_index,
                sphere_ids=src.sphere_ids,
                sphere_centers=src.sphere_centers,
                sphere_radii=src.sphere_radii,
            ))
            continue
        volume = math.fsum(nd.volume for nd in mem)
        centroid = sum((nd.volume * nd.centroid for nd in mem),
                       start=np.zeros(3)) / volume
        if geo:
            centers = np.concatenate([nd.sphere_centers for nd in mem])
            radii = np.concatenate([nd.sphere_radii for nd in mem])
            diameter = _pairwise_extent(centers, radii)
            sphere_ids = tuple(sorted(i for nd in mem for i in nd.sphere_ids))
            order = np.argsort([i for nd in mem for i in nd.sphere_ids])
            centers, radii = centers[order], radii[order]
        else:
            # Upper bound from node data: never underestimates the extent.
            diameter = max(nd.diameter for nd in mem)
            for ii in range(len(mem)):
                for jj in range(ii + 1, len(mem)):
                    diameter = max(
                        diameter,
                        float(np.linalg.norm(mem[ii].centroid - mem[jj].centroid))
                        + 0.5 * mem[ii].diameter + 0.5 * mem[jj].diameter)
            sphere_ids = centers = radii = None
        new_nodes.append(Node(
            id=k, volume=volume, centroid=centroid, diameter=float(diameter),
            boundary=any(nd.boundary for nd in mem),
            component_index=None,
            sphere_ids=sphere_ids,
            sphere_centers=centers,
            sphere_radii=radii,
        ))

    new_edges = []
    for e in graph.edges:
        na, nb = int(merge_map[e.a]), int(merge_map[e.b])
        if na == nb:
            continue
        if na > nb:
            new_edges.append(Edge(id=e.id, a=nb, b=na, xa=e.xb, xb=e.xa,
                                  d=e.d, mu=e.mu))
        else:
            new_edges.append(Edge(id=e.id, a=na, b=nb, xa=e.xa, xb=e.xb,
                                  d=e.d, mu=e.mu))
    new_edges.sort(key=lambda e: (e.a, e.b, e.d, e.id))

    return InclusionGraph(
        nodes=tuple(new_nodes), edges=tuple(new_edges), delta=graph.delta,
        box_half_width=graph.box_half_width,
        g2_violations=graph.g2_violations,
        node_merge_map=tuple(int(v) for v in merge_map),
    )


def short_kappa(graph: InclusionGraph, graph_prime_edge_ids,
                kappa: float) -> InclusionGraph:
    """Short every unprotected gap narrower than ``kappa``.

    ``graph_prime_edge_ids`` lists the edges kept open by construction;
    every other edge with ``d < kappa`` is shorted (its endpoints merged).
    Surviving edges are the protected ones plus the unprotected gaps of
    width at least ``kappa``, minus any edge that became internal to a
    merged node.
    """
    if not (0.0 < kappa < 1.0):
        raise ValueError("kappa must lie in (0, 1)")
    known = {e.id for e in graph.edges}
    prime = {int(i) for i in graph_prime_edge_ids}
    unknown = prime - known
    if unknown:
        raise ValueError(f"unknown edge ids in protected set: {sorted(unknown)}")
    pairs = [(e.a, e.b) for e in graph.edges
             if e.id not in prime and e.d < kappa]
    if not pairs:
        # Identity short; still record the trivial merge map.
        return InclusionGraph(
            nodes=graph.nodes, edges=graph.edges, delta=graph.delta,
            box_half_width=graph.box_half_width,
            g2_violations=graph.g2_violations,
            node_merge_map=tuple(range(graph.n_nodes)),
        )
    return short_at(graph, pairs)


def is_cycle_free(graph: InclusionGraph) -> bool:
    """True when the multigraph has no cycle.

    Any pair of parallel edges counts as a cycle, so this is exactly
    ``n_edges == n_nodes - n_clusters``.
    """
    uf = _UnionFind(graph.n_nodes)
    for e in graph.edges:
        if not uf.union(e.a, e.b):
            return False
    return True
