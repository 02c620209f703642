"""Molecular graph data model, featurization and input-joining strategies.

A reaction sample carries two internally connected molecule graphs.  Before
they enter the network they are merged into a single graph by one of three
strategies:

* ``dg`` keeps the two graphs disjoint (embeddings are concatenated after
  pooling, downstream),
* ``fc`` connects every pair of nodes, flagging which edges are chemical
  bonds and which are virtual,
* ``gn`` adds one extra hub node connected to every atom.

Node features are one-hot element (8) + formal charge (1) + degree one-hot
for degrees 1..4 (4), 13 columns total.  Degree 0 leaves the degree block
all-zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ELEMENTS = ("H", "C", "N", "O", "F", "Cl", "Br", "I")
_ELEMENT_INDEX = {el: i for i, el in enumerate(ELEMENTS)}
HALOGENS = ("Cl", "Br", "I")

NODE_FEATURE_DIM = len(ELEMENTS) + 1 + 4

STRATEGIES = ("dg", "fc", "gn")

EDGE_KIND_BOND = "bond"
EDGE_KIND_VIRTUAL = "virtual"
EDGE_KIND_GLOBAL = "global"

# feature vector: bond-order one-hot (single, double, triple, virtual class)
# + edge-kind one-hot (bond, virtual, global) + scalar distance
EDGE_FEATURE_DIM = 4 + 3 + 1

ROLES = ("alcohol", "acyl_halide", "unknown")


class GraphError(ValueError):
    """Raised for malformed molecule graphs or join inputs."""


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    coords: tuple | None = None

    def __post_init__(self):
        if self.element not in _ELEMENT_INDEX:
            raise GraphError(f"unknown element {self.element!r}")
        if self.coords is not None:
            c = tuple(float(x) for x in self.coords)
            if len(c) != 3 or not all(np.isfinite(c)):
                raise GraphError(f"bad coordinates {self.coords!r}")
            object.__setattr__(self, "coords", c)


@dataclass(frozen=True)
class MolecularGraph:
    """One molecule: atoms plus undirected bonds (i, j, order)."""

    atoms: tuple
    bonds: tuple
    role: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "bonds", tuple(tuple(b) for b in self.bonds))
        if self.role not in ROLES:
            raise GraphError(f"unknown role {self.role!r}")
        n = len(self.atoms)
        if n == 0:
            raise GraphError("molecule has no atoms")
        seen = set()
        for i, j, order in self.bonds:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise GraphError(f"bad bond ({i}, {j})")
            if order not in (1, 2, 3):
                raise GraphError(f"bad bond order {order}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate bond {key}")
            seen.add(key)
        with_coords = sum(1 for a in self.atoms if a.coords is not None)
        if with_coords not in (0, n):
            raise GraphError("either all atoms carry coordinates or none do")
        if n > 1 and not self._connected():
            raise GraphError("molecule graph is not connected")

    def _connected(self):
        adj = self.adjacency()
        seen = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.atoms)

    def adjacency(self):
        adj = [[] for _ in self.atoms]
        for i, j, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def degrees(self):
        deg = [0] * len(self.atoms)
        for i, j, _ in self.bonds:
            deg[i] += 1
            deg[j] += 1
        return deg

    def has_coords(self):
        return self.atoms[0].coords is not None

    def hop_distances(self, source):
        """BFS hop counts from ``source``; unreachable stays -1."""
        dist = [-1] * len(self.atoms)
        dist[source] = 0
        adj = self.adjacency()
        frontier = [source]
        while frontier:
            nxt = []
            for v in frontier:
                for nb in adj[v]:
                    if dist[nb] < 0:
                        dist[nb] = dist[v] + 1
                        nxt.append(nb)
            frontier = nxt
        return dist


# ---------------------------------------------------------------------------
# JSON schema (field names are part of the dataset format)


def graph_to_json(g):
    return {
        "atoms": [
            {
                "el": a.element,
                "q": a.formal_charge,
                "xyz": list(a.coords) if a.coords is not None else None,
            }
            for a in g.atoms
        ],
        "bonds": [[i, j, order] for i, j, order in g.bonds],
        "role": g.role,
    }


def graph_from_json(obj):
    try:
        atoms = tuple(
            Atom(a["el"], int(a["q"]), a["xyz"]) for a in obj["atoms"]
        )
        bonds = tuple((int(i), int(j), int(o)) for i, j, o in obj["bonds"])
        role = obj["role"]
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph JSON: {exc}") from exc
    return MolecularGraph(atoms, bonds, role)


def load_graph(path):
    with open(path, encoding="utf-8") as fh:
        return graph_from_json(json.load(fh))


def save_graph(g, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_json(g), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# substructure checks used by dataset role constraints


def has_hydroxyl(g):
    """An O-H single bond anywhere in the molecule."""
    for i, j, order in g.bonds:
        if order != 1:
            continue
        pair = {g.atoms[i].element, g.atoms[j].element}
        if pair == {"O", "H"}:
            return True
    return False


def has_acyl_halide(g):
    """A carbon double-bonded to O and single-bonded to Cl, Br or I."""
    for idx, atom in enumerate(g.atoms):
        if atom.element != "C":
            continue
        double_o = False
        single_x = False
        for i, j, order in g.bonds:
            if idx not in (i, j):
                continue
            other = g.atoms[j if i == idx else i].element
            if order == 2 and other == "O":
                double_o = True
            if order == 1 and other in HALOGENS:
                single_x = True
        if double_o and single_x:
            return True
    return False


def halide_element(g):
    """The halogen of the acyl-halide group, or None."""
    for idx, atom in enumerate(g.atoms):
        if atom.element != "C":
            continue
        double_o = False
        x = None
        for i, j, order in g.bonds:
            if idx not in (i, j):
                continue
            other = g.atoms[j if i == idx else i].element
            if order == 2 and other == "O":
                double_o = True
            if order == 1 and other in HALOGENS:
                x = other
        if double_o and x:
            return x
    return None


# ---------------------------------------------------------------------------
# featurization


def featurize(g):
    """Per-atom feature matrix (n x 13); see module docstring for layout."""
    n = len(g.atoms)
    feats = np.zeros((n, NODE_FEATURE_DIM), dtype=np.float64)
    degrees = g.degrees()
    for idx, atom in enumerate(g.atoms):
        feats[idx, _ELEMENT_INDEX[atom.element]] = 1.0
        feats[idx, len(ELEMENTS)] = float(atom.formal_charge)
        deg = min(degrees[idx], 4)
        if deg >= 1:
            feats[idx, len(ELEMENTS) + deg] = 1.0
    return feats


@dataclass(frozen=True)
class Edge:
    """One directed edge of a joined graph."""

    src: int
    dst: int
    kind: str
    bond_order: int = 0  # 0 marks the virtual class
    distance: float = 0.0

    def feature_vector(self):
        v = np.zeros(EDGE_FEATURE_DIM, dtype=np.float64)
        if self.kind == EDGE_KIND_BOND:
            v[self.bond_order - 1] = 1.0
            v[4] = 1.0
        elif self.kind == EDGE_KIND_VIRTUAL:
            v[3] = 1.0
            v[5] = 1.0
        elif self.kind == EDGE_KIND_GLOBAL:
            v[3] = 1.0
            v[6] = 1.0
        else:
            raise GraphError(f"unknown edge kind {self.kind!r}")
        v[7] = self.distance
        return v


@dataclass(frozen=True)
class JoinedGraph:
    """Single graph built from a reactant pair by one joining strategy.

    Node order is graph-1 atoms, graph-2 atoms, then the hub node for the
    ``gn`` strategy.  ``edges`` stores both directions of every connection.
    """

    node_features: np.ndarray
    edges: tuple
    strategy: str
    graph_boundary: int
    global_node_index: int | None = None

    @property
    def num_nodes(self):
        return self.node_features.shape[0]

    def edge_index(self):
        """(E, 2) array of (src, dst) pairs; empty graphs give shape (0, 2)."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.intp)
        return np.array([(e.src, e.dst) for e in self.edges], dtype=np.intp)

    def edge_features(self):
        if not self.edges:
            return np.zeros((0, EDGE_FEATURE_DIM), dtype=np.float64)
        return np.stack([e.feature_vector() for e in self.edges])

    def node_segments(self):
        """Per-node input-graph id (0 or 1), used by the disjoint readout."""
        seg = np.zeros(self.num_nodes, dtype=np.intp)
        seg[self.graph_boundary:] = 1
        if self.global_node_index is not None:
            seg[self.global_node_index] = 0
        return seg


def _intra_distance(g):
    """Distance feature for an edge inside one molecule.

    Euclidean when coordinates exist, else inverse hop count (1 for a bond).
    Cross-graph and hub edges are handled by the caller and carry 0.
    """
    if g.has_coords():
        coords = np.array([a.coords for a in g.atoms])

        def dist(i, j):
            return float(np.linalg.norm(coords[i] - coords[j]))

        return dist
    hop_cache = {}

    def dist(i, j):
        if i not in hop_cache:
            hop_cache[i] = g.hop_distances(i)
        h = hop_cache[i][j]
        return 0.0 if h <= 0 else 1.0 / h

    return dist


def join(alcohol, halide, strategy):
    """Merge two molecule graphs per the chosen strategy."""
    if strategy not in STRATEGIES:
        raise GraphError(f"unknown joining strategy {strategy!r}")
    n1, n2 = len(alcohol.atoms), len(halide.atoms)
    n = n1 + n2
    feats = [featurize(alcohol), featurize(halide)]

    edges = []

    def add_pair(src, dst, kind, order=0, distance=0.0):
        edges.append(Edge(src, dst, kind, order, distance))
        edges.append(Edge(dst, src, kind, order, distance))

    for g, offset in ((alcohol, 0), (halide, n1)):
        dist = _intra_distance(g)
        for i, j, order in g.bonds:
            add_pair(offset + i, offset + j, EDGE_KIND_BOND, order, dist(i, j))

    global_index = None
    if strategy == "fc":
        for g, offset in ((alcohol, 0), (halide, n1)):
            dist = _intra_distance(g)
            bonded = {(min(i, j), max(i, j)) for i, j, _ in g.bonds}
            m = len(g.atoms)
            for i in range(m):
                for j in range(i + 1, m):
                    if (i, j) not in bonded:
                        add_pair(offset + i, offset + j, EDGE_KIND_VIRTUAL,
                                 distance=dist(i, j))
        for i in range(n1):
            for j in range(n1, n):
                add_pair(i, j, EDGE_KIND_VIRTUAL)
    elif strategy == "gn":
        global_index = n
        for i in range(n):
            add_pair(i, global_index, EDGE_KIND_GLOBAL)
        feats.append(np.zeros((1, NODE_FEATURE_DIM), dtype=np.float64))

    return JoinedGraph(
        node_features=np.vstack(feats),
        edges=tuple(edges),
        strategy=strategy,
        graph_boundary=n1,
        global_node_index=global_index,
    )


# ---------------------------------------------------------------------------
# initial-embedding normalization


class Normalizer:
    """Column z-score (train statistics) followed by row-wise L2 scaling.

    Columns with near-zero spread on the training set pass through the
    column step untouched; all-zero rows stay zero in the row step.
    """

    def __init__(self):
        self.mean = None
        self.std = None

    def fit(self, feature_matrices):
        stacked = np.vstack(list(feature_matrices))
        if stacked.size == 0:
            raise ValueError("cannot fit a normalizer on zero nodes")
        self.mean = stacked.mean(axis=0)
        self.std = stacked.std(axis=0)
        return self

    @property
    def fitted(self):
        return self.mean is not None

    def apply(self, features):
        if not self.fitted:
            raise RuntimeError("normalizer used before fit()")
        out = np.array(features, dtype=np.float64, copy=True)
        live = self.std >= 1e-8
        out[:, live] = (out[:, live] - self.mean[live]) / self.std[live]
        norms = np.linalg.norm(out, axis=1)
        nz = norms > 0
        out[nz] /= norms[nz, None]
        return out

    def to_json(self):
        if not self.fitted:
            return None
        return {
            "mean": [float.hex(float(x)) for x in self.mean],
            "std": [float.hex(float(x)) for x in self.std],
        }

    @classmethod
    def from_json(cls, obj):
        if obj is None:
            return None
        norm = cls()
        norm.mean = np.array([float.fromhex(x) for x in obj["mean"]])
        norm.std = np.array([float.fromhex(x) for x in obj["std"]])
        return norm
