"""Mesh-to-graph feature engineering.

Turns a mesh plus one time step's state into the arrays the network consumes:
node features, bidirectional mesh edges with reference/current relative
offsets, dynamically detected contact edges with current offsets, and a
per-component stationary-wave positional encoding over the undeformed
geometry.  All edge features are built from relative quantities, so a rigid
translation of reference and current positions together changes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

# node type codes used across the package
NODE_DEFORMABLE = 0
NODE_OBSTACLE = 1
NODE_CLAMPED = 2
NODE_ACTUATOR = 3
N_NODE_TYPES = 4


@dataclass
class Mesh:
    """Reference geometry: positions, element connectivity, node labels."""

    reference_positions: np.ndarray  # [N, d]
    elements: np.ndarray             # [E, nodes per element] int64
    node_type: np.ndarray            # [N] int64
    component_id: np.ndarray         # [N] int64

    def __post_init__(self):
        self.reference_positions = np.asarray(self.reference_positions, dtype=np.float64)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.node_type = np.asarray(self.node_type, dtype=np.int64)
        self.component_id = np.asarray(self.component_id, dtype=np.int64)
        n = self.reference_positions.shape[0]
        if self.node_type.shape != (n,) or self.component_id.shape != (n,):
            raise ValidationError("node_type/component_id length must equal node count")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= n):
            raise ValidationError("element index out of range")

    @property
    def n_nodes(self) -> int:
        return self.reference_positions.shape[0]

    @property
    def dim(self) -> int:
        return self.reference_positions.shape[1]


@dataclass
class FrameState:
    """One time step's per-node state: positions plus named dynamic arrays."""

    positions: np.ndarray            # [N, d] current configuration
    state: dict[str, np.ndarray]     # e.g. {"v": [N,d], "alpha": [N], "kappa": [N]}


@dataclass
class GraphSample:
    """Everything the model consumes for one (or one merged batch of) frames."""

    node_features: np.ndarray         # [N, F]
    mesh_edges: np.ndarray            # [Em, 2] (src, dst)
    mesh_edge_features: np.ndarray    # [Em, 2(d+1)]
    contact_edges: np.ndarray         # [Ec, 2]
    contact_edge_features: np.ndarray  # [Ec, d+1]
    positional_encoding: np.ndarray   # [N, 2*d*n_frequencies]
    node_type: np.ndarray             # [N]
    sample_ranges: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if not self.sample_ranges:
            self.sample_ranges = ((0, self.node_features.shape[0]),)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


_ELEMENT_PERIMETERS = {
    2: ((0, 1),),
    3: ((0, 1), (1, 2), (2, 0)),
    4: ((0, 1), (1, 2), (2, 3), (3, 0)),  # quad shells: perimeter only, no diagonals
}


def build_mesh_edges(mesh: Mesh) -> np.ndarray:
    """Directed mesh edges: undirected element edges emitted both ways.

    Deduplicated across shared element faces and sorted ascending by
    (source, target).
    """
    if mesh.elements.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    k = mesh.elements.shape[1]
    if k not in _ELEMENT_PERIMETERS:
        raise ValidationError(f"unsupported element arity {k}")
    pairs = set()
    for elem in mesh.elements:
        if len(set(elem.tolist())) != k:
            raise ValidationError(f"degenerate element with repeated node index: {elem.tolist()}")
        for a, b in _ELEMENT_PERIMETERS[k]:
            i, j = int(elem[a]), int(elem[b])
            pairs.add((i, j))
            pairs.add((j, i))
    return np.array(sorted(pairs), dtype=np.int64)


def build_tied_edges(mesh: Mesh, k: int = 3, interface_cutoff: float | None = None) -> np.ndarray:
    """Permanent cross-component coupling edges from a k-nearest-neighbor scan.

    Only nodes within ``interface_cutoff`` of some other component are tied
    (default: 3x the median mesh edge length); for each such node, edges to
    its k nearest nodes of other components, symmetrized.  A single-component
    mesh yields no edges.
    """
    if k < 1:
        raise ValidationError(f"tied-edge neighbor count must be >= 1, got {k}")
    comps = np.unique(mesh.component_id)
    if comps.size < 2:
        return np.zeros((0, 2), dtype=np.int64)
    X = mesh.reference_positions
    if interface_cutoff is None:
        interface_cutoff = 3.0 * median_edge_length(mesh)
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    other = mesh.component_id[:, None] != mesh.component_id[None, :]
    pairs = set()
    for i in range(mesh.n_nodes):
        cross = np.where(other[i])[0]
        if cross.size == 0:
            continue
        d = dist[i, cross]
        if d.min() > interface_cutoff:
            continue
        nearest = cross[np.argsort(d, kind="stable")[:k]]
        for j in nearest:
            pairs.add((i, int(j)))
            pairs.add((int(j), i))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def median_edge_length(mesh: Mesh) -> float:
    edges = build_mesh_edges(mesh)
    if edges.shape[0] == 0:
        raise ValidationError("mesh has no edges")
    X = mesh.reference_positions
    d = X[edges[:, 0]] - X[edges[:, 1]]
    return float(np.median(np.sqrt((d * d).sum(-1))))


def _edge_key_set(edges: np.ndarray) -> set[tuple[int, int]]:
    return {(int(a), int(b)) for a, b in edges}


def same_element_pairs(mesh: Mesh) -> set[tuple[int, int]]:
    """All directed node pairs sharing an element (quad diagonals included)."""
    pairs: set[tuple[int, int]] = set()
    for elem in mesh.elements:
        nodes = elem.tolist()
        for i in nodes:
            for j in nodes:
                if i != j:
                    pairs.add((int(i), int(j)))
    return pairs


def detect_contact_edges_bruteforce(positions: np.ndarray, r_c: float,
                                    excluded: set[tuple[int, int]]) -> np.ndarray:
    """Reference O(N^2) scan; the spatial hash is validated against this."""
    if r_c <= 0:
        raise ValidationError(f"contact radius must be positive, got {r_c}")
    x = np.asarray(positions, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    n = x.shape[0]
    pairs = []
    for i in range(n):
        for j in range(n):
            if i != j and dist[i, j] < r_c and (i, j) not in excluded:
                pairs.append((i, j))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def detect_contact_edges(positions: np.ndarray, r_c: float,
                         excluded: set[tuple[int, int]] | None = None) -> np.ndarray:
    """All directed pairs closer than r_c, minus excluded pairs.

    Uses a uniform spatial hash with cell size r_c, so only the 3^d
    neighboring cells need checking per node.  Output is sorted ascending by
    (source, target).
    """
    if r_c <= 0:
        raise ValidationError(f"contact radius must be positive, got {r_c}")
    x = np.asarray(positions, dtype=np.float64)
    n, d = x.shape
    excluded = excluded or set()
    cells: dict[tuple[int, ...], list[int]] = {}
    keys = np.floor(x / r_c).astype(np.int64)
    for i in range(n):
        cells.setdefault(tuple(keys[i]), []).append(i)
    offsets = np.stack(np.meshgrid(*([[-1, 0, 1]] * d), indexing="ij"), axis=-1).reshape(-1, d)
    r2 = r_c * r_c
    pairs = []
    for i in range(n):
        base = keys[i]
        for off in offsets:
            bucket = cells.get(tuple(base + off))
            if not bucket:
                continue
            for j in bucket:
                if j == i:
                    continue
                delta = x[i] - x[j]
                if delta @ delta < r2 and (i, j) not in excluded:
                    pairs.append((i, j))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def mesh_edge_features(X: np.ndarray, x_t: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Per edge (i, j): reference offset and norm, current offset and norm."""
    X = np.asarray(X, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if edges.shape[0] == 0:
        return np.zeros((0, 2 * (X.shape[1] + 1)))
    dref = X[edges[:, 0]] - X[edges[:, 1]]
    dcur = x_t[edges[:, 0]] - x_t[edges[:, 1]]
    nref = np.sqrt((dref * dref).sum(-1, keepdims=True))
    ncur = np.sqrt((dcur * dcur).sum(-1, keepdims=True))
    return np.concatenate([dref, nref, dcur, ncur], axis=1)


def contact_edge_features(x_t: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Per edge (i, j): current offset and its norm."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if edges.shape[0] == 0:
        return np.zeros((0, x_t.shape[1] + 1))
    dcur = x_t[edges[:, 0]] - x_t[edges[:, 1]]
    ncur = np.sqrt((dcur * dcur).sum(-1, keepdims=True))
    return np.concatenate([dcur, ncur], axis=1)


def positional_encoding(X: np.ndarray, component_id: np.ndarray,
                        n_frequencies: int = 8) -> np.ndarray:
    """Stationary-wave encoding over each component's bounding box.

    Coordinates are normalized to [0, 1] per component and axis; the encoding
    is sin(pi*m*u), cos(pi*m*u) for m = 1..n_frequencies.  A zero-extent axis
    contributes the u=0 constants (sin 0, cos 1).  Computed on the undeformed
    configuration, so it is translation-invariant by construction.
    """
    if n_frequencies < 1:
        raise ValidationError(f"n_frequencies must be >= 1, got {n_frequencies}")
    X = np.asarray(X, dtype=np.float64)
    component_id = np.asarray(component_id, dtype=np.int64)
    n, d = X.shape
    u = np.zeros_like(X)
    for comp in np.unique(component_id):
        rows = component_id == comp
        lo = X[rows].min(axis=0)
        hi = X[rows].max(axis=0)
        extent = hi - lo
        for a in range(d):
            if extent[a] > 0:
                u[rows, a] = (X[rows, a] - lo[a]) / extent[a]
    out = np.zeros((n, 2 * d * n_frequencies))
    col = 0
    for a in range(d):
        for m in range(1, n_frequencies + 1):
            out[:, col] = np.sin(np.pi * m * u[:, a])
            out[:, col + 1] = np.cos(np.pi * m * u[:, a])
            col += 2
    return out


def one_hot_types(node_type: np.ndarray, n_types: int = N_NODE_TYPES) -> np.ndarray:
    node_type = np.asarray(node_type, dtype=np.int64)
    if node_type.size and (node_type.min() < 0 or node_type.max() >= n_types):
        raise ValidationError(f"node type out of range [0, {n_types})")
    out = np.zeros((node_type.shape[0], n_types))
    out[np.arange(node_type.shape[0]), node_type] = 1.0
    return out


@dataclass
class MeshGraph:
    """A mesh preprocessed once: static edges, exclusions, encodings."""

    mesh: Mesh
    mesh_edges: np.ndarray                 # element + tied edges, directed
    excluded_pairs: set[tuple[int, int]]   # pairs never eligible for contact
    positional: np.ndarray                 # [N, pe_dim]
    contact_radius: float
    median_edge: float


def prepare_mesh(mesh: Mesh, tied_k: int = 3, tied_cutoff_factor: float = 3.0,
                 contact_radius: float | None = None,
                 contact_radius_factor: float = 1.5,
                 n_frequencies: int = 8) -> MeshGraph:
    """Build the static graph data reused by every frame of a trajectory."""
    med = median_edge_length(mesh)
    edges = build_mesh_edges(mesh)
    tied = build_tied_edges(mesh, k=tied_k, interface_cutoff=tied_cutoff_factor * med)
    if tied.shape[0]:
        merged = sorted(_edge_key_set(edges) | _edge_key_set(tied))
        edges = np.array(merged, dtype=np.int64)
    excluded = _edge_key_set(edges) | same_element_pairs(mesh)
    r_c = contact_radius if contact_radius is not None else contact_radius_factor * med
    pe = positional_encoding(mesh.reference_positions, mesh.component_id, n_frequencies)
    return MeshGraph(mesh=mesh, mesh_edges=edges, excluded_pairs=excluded,
                     positional=pe, contact_radius=r_c, median_edge=med)


def build_graph_sample(graph: MeshGraph, frame: FrameState,
                       node_features: np.ndarray) -> GraphSample:
    """Assemble one frame's sample: static edges plus fresh contact edges."""
    x_t = np.asarray(frame.positions, dtype=np.float64)
    contact = detect_contact_edges(x_t, graph.contact_radius, graph.excluded_pairs)
    return GraphSample(
        node_features=np.asarray(node_features, dtype=np.float64),
        mesh_edges=graph.mesh_edges,
        mesh_edge_features=mesh_edge_features(graph.mesh.reference_positions, x_t,
                                              graph.mesh_edges),
        contact_edges=contact,
        contact_edge_features=contact_edge_features(x_t, contact),
        positional_encoding=graph.positional,
        node_type=graph.mesh.node_type,
    )


def merge_samples(samples: list[GraphSample]) -> GraphSample:
    """Disjoint union of same-mesh samples; token stages stay per-sample.

    Edge indices are offset per sample and ``sample_ranges`` records the node
    span of each constituent so the attention stage can treat them separately.
    """
    if len(samples) == 1:
        return samples[0]
    offsets = np.cumsum([0] + [s.n_nodes for s in samples])
    ranges = tuple((int(offsets[i]), int(offsets[i + 1])) for i in range(len(samples)))
    mesh_edges = np.concatenate([s.mesh_edges + offsets[i] for i, s in enumerate(samples)])
    contact_parts = [s.contact_edges + offsets[i] for i, s in enumerate(samples)
                     if s.contact_edges.shape[0]]
    contact = (np.concatenate(contact_parts) if contact_parts
               else np.zeros((0, 2), dtype=np.int64))
    return GraphSample(
        node_features=np.concatenate([s.node_features for s in samples]),
        mesh_edges=mesh_edges,
        mesh_edge_features=np.concatenate([s.mesh_edge_features for s in samples]),
        contact_edges=contact,
        contact_edge_features=np.concatenate([s.contact_edge_features for s in samples]),
        positional_encoding=np.concatenate([s.positional_encoding for s in samples]),
        node_type=np.concatenate([s.node_type for s in samples]),
        sample_ranges=ranges,
    )


def permute_sample(sample: GraphSample, perm: np.ndarray) -> GraphSample:
    """Relabel nodes by ``perm`` (new index of old node i is perm[i])."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    order_m = np.lexsort((perm[sample.mesh_edges[:, 1]], perm[sample.mesh_edges[:, 0]]))
    order_c = np.lexsort((perm[sample.contact_edges[:, 1]], perm[sample.contact_edges[:, 0]]))
    return GraphSample(
        node_features=sample.node_features[inv],
        mesh_edges=perm[sample.mesh_edges][order_m],
        mesh_edge_features=sample.mesh_edge_features[order_m],
        contact_edges=perm[sample.contact_edges][order_c] if sample.contact_edges.size
        else sample.contact_edges,
        contact_edge_features=sample.contact_edge_features[order_c]
        if sample.contact_edges.size else sample.contact_edge_features,
        positional_encoding=sample.positional_encoding[inv],
        node_type=sample.node_type[inv],
        sample_ranges=sample.sample_ranges,
    )


def normalize_sample_features(sample: GraphSample, node_mean, node_std,
                              mesh_mean, mesh_std, contact_mean, contact_std) -> GraphSample:
    """Whitened copy of a sample (positional encodings left untouched)."""
    return replace(
        sample,
        node_features=(sample.node_features - node_mean) / node_std,
        mesh_edge_features=(sample.mesh_edge_features - mesh_mean) / mesh_std,
        contact_edge_features=(sample.contact_edge_features - contact_mean) / contact_std
        if sample.contact_edge_features.shape[0] else sample.contact_edge_features,
    )
