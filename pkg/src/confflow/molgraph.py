"""Molecular graph data model: attributes, augmentation, encoding, toy data.

Molecules live in a JSON-lines file, one record per line:

    {"id": str,
     "atoms": [{...atom attributes...}, ...],
     "edges": [[i, j, {...edge attributes...}], ...],
     "conformers": [[[x, y, z], ...], ...]}

Enum values are lowercase strings, absent values are null, coordinates are in
Angstrom.  Bonded edges carry shortest_path 1; auxiliary edges (added by
augment_edges between second- and third-level neighbours) carry bond_type
null and shortest_path 2 or 3.  All types are immutable after construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "HYBRIDIZATIONS",
    "CHIRALITIES",
    "BOND_TYPES",
    "STEREO_KINDS",
    "RING_SIZES",
    "AtomAttributes",
    "EdgeAttributes",
    "MolecularGraph",
    "Conformation",
    "FeatureStats",
    "ToySpec",
    "ValidationError",
    "ParseError",
    "AugmentError",
    "EncodingError",
    "ConfigError",
    "parse_dataset",
    "parse_dataset_lines",
    "serialize_dataset",
    "serialize_dataset_lines",
    "augment_edges",
    "compute_feature_stats",
    "encode_features",
    "center_conformation",
    "generate_toy_dataset",
    "TEMPLATE_KINDS",
]

HYBRIDIZATIONS = ("s", "sp", "sp2", "sp3", "sp3d", "sp3d2")
CHIRALITIES = ("cw", "ccw", "other")
BOND_TYPES = ("single", "double", "triple", "aromatic")
STEREO_KINDS = ("z", "e", "cis", "trans", "any")
RING_SIZES = tuple(range(3, 10))  # ring-membership flags cover sizes 3..9

STD_FLOOR = 1e-6


class ValidationError(ValueError):
    """A record violates a structural invariant."""


class ParseError(ValueError):
    """Malformed dataset line; message carries the line number."""


class AugmentError(ValueError):
    """Auxiliary edges already present; refusing to double-augment."""


class EncodingError(ValueError):
    """Attribute value outside the declared vocabulary."""


class ConfigError(ValueError):
    """Unusable configuration value (unknown template name, bad counts)."""


def _check_int(name, value, lo, hi, allow_none=False):
    if value is None:
        if allow_none:
            return
        raise ValidationError(f"{name} may not be absent")
    if not isinstance(value, int) or isinstance(value, bool) or not lo <= value <= hi:
        raise ValidationError(f"{name}={value!r} outside [{lo}, {hi}]")


def _check_enum(name, value, allowed):
    if value is not None and value not in allowed:
        raise ValidationError(f"{name}={value!r} not in {allowed} or null")


@dataclass(frozen=True)
class AtomAttributes:
    """Raw per-atom attributes; None encodes the absent sentinel."""

    atomic_number: int | None = None
    hybridization: str | None = None
    degree: int | None = None
    formal_charge: int | None = None
    total_h: int | None = None
    implicit_valence: int | None = None
    total_valence: int | None = None
    radical_electrons: int | None = None
    chirality: str | None = None
    is_aromatic: bool = False
    is_in_ring: bool = False

    def __post_init__(self):
        _check_int("atomic_number", self.atomic_number, 1, 119, allow_none=True)
        _check_enum("hybridization", self.hybridization, HYBRIDIZATIONS)
        _check_int("degree", self.degree, 0, 10, allow_none=True)
        _check_int("formal_charge", self.formal_charge, -5, 5, allow_none=True)
        _check_int("total_h", self.total_h, 0, 8, allow_none=True)
        _check_int("implicit_valence", self.implicit_valence, 1, 15, allow_none=True)
        _check_int("total_valence", self.total_valence, 1, 15, allow_none=True)
        _check_int("radical_electrons", self.radical_electrons, 0, 4, allow_none=True)
        _check_enum("chirality", self.chirality, CHIRALITIES)
        if (self.total_h is not None and self.total_valence is not None
                and self.total_h > self.total_valence):
            raise ValidationError(
                f"total_h={self.total_h} exceeds total_valence={self.total_valence}")

    NUMERIC_FIELDS = ("atomic_number", "degree", "formal_charge", "total_h",
                      "implicit_valence", "total_valence", "radical_electrons")


@dataclass(frozen=True)
class EdgeAttributes:
    """Raw per-edge attributes; bond_type None marks an auxiliary edge."""

    bond_type: str | None = "single"
    stereo: str | None = None
    is_conjugated: bool = False
    is_same_ring: bool = False
    shortest_path: int = 1
    in_ring_size: tuple = (False,) * len(RING_SIZES)

    def __post_init__(self):
        _check_enum("bond_type", self.bond_type, BOND_TYPES)
        _check_enum("stereo", self.stereo, STEREO_KINDS)
        _check_int("shortest_path", self.shortest_path, 1, 3)
        object.__setattr__(self, "in_ring_size",
                           tuple(bool(v) for v in self.in_ring_size))
        if len(self.in_ring_size) != len(RING_SIZES):
            raise ValidationError(
                f"in_ring_size needs {len(RING_SIZES)} flags, got {len(self.in_ring_size)}")
        bonded = self.bond_type is not None
        if bonded != (self.shortest_path == 1):
            raise ValidationError(
                f"shortest_path={self.shortest_path} inconsistent with "
                f"bond_type={self.bond_type!r}")

    NUMERIC_FIELDS = ("shortest_path",)


@dataclass(frozen=True)
class MolecularGraph:
    """Atoms plus undirected edges stored once with i < j."""

    molecule_id: str
    atoms: tuple
    edges: tuple  # of (i, j, EdgeAttributes)

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        edges = []
        seen = set()
        m = self.atom_count
        for i, j, attrs in self.edges:
            if i == j:
                raise ValidationError(f"{self.molecule_id}: self-loop at {i}")
            if not (0 <= i < m and 0 <= j < m):
                raise ValidationError(
                    f"{self.molecule_id}: edge ({i},{j}) index out of range for M={m}")
            if i > j:
                i, j = j, i
            if (i, j) in seen:
                raise ValidationError(f"{self.molecule_id}: duplicate edge ({i},{j})")
            seen.add((i, j))
            edges.append((i, j, attrs))
        edges.sort(key=lambda e: (e[0], e[1]))
        object.__setattr__(self, "edges", tuple(edges))

    @property
    def atom_count(self) -> int:
        return len(self.atoms)

    def bonded_adjacency(self):
        adj = [[] for _ in range(self.atom_count)]
        for i, j, attrs in self.edges:
            if attrs.shortest_path == 1:
                adj[i].append(j)
                adj[j].append(i)
        return adj

    def has_auxiliary_edges(self) -> bool:
        return any(attrs.bond_type is None for _, _, attrs in self.edges)

    def heavy_mask(self) -> np.ndarray:
        return np.array([a.atomic_number != 1 for a in self.atoms], dtype=bool)

    def validate(self) -> None:
        """Full validation, including bonded-subgraph connectivity."""
        m = self.atom_count
        if m == 0:
            raise ValidationError(f"{self.molecule_id}: empty molecule")
        adj = self.bonded_adjacency()
        seen = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != m:
            raise ValidationError(
                f"{self.molecule_id}: bonded subgraph is disconnected")


@dataclass(frozen=True)
class Conformation:
    """M x 3 coordinates in Angstrom with a hydrogen mask."""

    coords: np.ndarray
    heavy_mask: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValidationError(f"coords must be Mx3, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValidationError("coords contain non-finite values")
        mask = np.array(self.heavy_mask, dtype=bool)
        if mask.shape != (coords.shape[0],):
            raise ValidationError("heavy_mask length must match atom count")
        coords.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "heavy_mask", mask)

    @classmethod
    def for_graph(cls, graph: MolecularGraph, coords) -> "Conformation":
        return cls(coords=np.asarray(coords, dtype=np.float64),
                   heavy_mask=graph.heavy_mask())

    @property
    def atom_count(self) -> int:
        return self.coords.shape[0]


def center_conformation(conf: Conformation) -> Conformation:
    """Translate so every axis has zero mean; rigid translation only."""
    centered = conf.coords - conf.coords.mean(axis=0, keepdims=True)
    return Conformation(coords=centered, heavy_mask=conf.heavy_mask)


# ---------------------------------------------------------------------------
# serialization

_ATOM_FIELDS = ("atomic_number", "hybridization", "degree", "formal_charge",
                "total_h", "implicit_valence", "total_valence",
                "radical_electrons", "chirality", "is_aromatic", "is_in_ring")
_EDGE_FIELDS = ("bond_type", "stereo", "is_conjugated", "is_same_ring",
                "shortest_path", "in_ring_size")


def _atom_to_json(a: AtomAttributes) -> dict:
    return {f: getattr(a, f) for f in _ATOM_FIELDS}


def _edge_to_json(e: EdgeAttributes) -> dict:
    d = {f: getattr(e, f) for f in _EDGE_FIELDS}
    d["in_ring_size"] = list(e.in_ring_size)
    return d


def record_to_json(graph: MolecularGraph, conformers) -> str:
    rec = {
        "id": graph.molecule_id,
        "atoms": [_atom_to_json(a) for a in graph.atoms],
        "edges": [[i, j, _edge_to_json(attrs)] for i, j, attrs in graph.edges],
        "conformers": [c.coords.tolist() for c in conformers],
    }
    return json.dumps(rec)


def record_from_json(obj: dict):
    atoms = tuple(AtomAttributes(**a) for a in obj["atoms"])
    edges = tuple((int(i), int(j), EdgeAttributes(**attrs))
                  for i, j, attrs in obj["edges"])
    graph = MolecularGraph(molecule_id=str(obj["id"]), atoms=atoms, edges=edges)
    graph.validate()
    conformers = [Conformation.for_graph(graph, np.array(c, dtype=np.float64))
                  for c in obj["conformers"]]
    if not conformers:
        raise ValidationError(f"{graph.molecule_id}: no conformers")
    return graph, conformers


def parse_dataset_lines(lines):
    dataset = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        try:
            dataset.append(record_from_json(obj))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"line {lineno}: malformed record ({exc})") from exc
    return dataset


def parse_dataset(path):
    """Read a JSON-lines molecule file into (graph, conformers) pairs."""
    with open(path) as fh:
        return parse_dataset_lines(fh)


def serialize_dataset_lines(dataset):
    return [record_to_json(graph, confs) for graph, confs in dataset]


def serialize_dataset(dataset, path) -> None:
    with open(path, "w") as fh:
        for line in serialize_dataset_lines(dataset):
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# auxiliary edges

AUX_EDGE_MAX_DISTANCE = 3


def _bonded_distances_from(adj, source, cutoff):
    """BFS distances from source over the bonded graph, up to cutoff."""
    dist = {source: 0}
    frontier = [source]
    d = 0
    while frontier and d < cutoff:
        d += 1
        nxt = []
        for node in frontier:
            for nb in adj[node]:
                if nb not in dist:
                    dist[nb] = d
                    nxt.append(nb)
        frontier = nxt
    return dist


def augment_edges(graph: MolecularGraph) -> MolecularGraph:
    """Add auxiliary edges between atoms at bonded distance 2 or 3.

    Second-level neighbours pin angles, third-level neighbours pin dihedrals.
    Rejects graphs that already contain auxiliary edges so a pipeline cannot
    double-augment.  Output edges are sorted by (i, j).
    """
    if graph.has_auxiliary_edges():
        raise AugmentError(f"{graph.molecule_id}: auxiliary edges already present")
    adj = graph.bonded_adjacency()
    new_edges = list(graph.edges)
    for i in range(graph.atom_count):
        dist = _bonded_distances_from(adj, i, AUX_EDGE_MAX_DISTANCE)
        for j, d in dist.items():
            if j > i and d >= 2:
                new_edges.append((i, j, EdgeAttributes(
                    bond_type=None, stereo=None, is_conjugated=False,
                    is_same_ring=False, shortest_path=d)))
    return MolecularGraph(molecule_id=graph.molecule_id, atoms=graph.atoms,
                          edges=tuple(new_edges))


# ---------------------------------------------------------------------------
# feature statistics and encoding


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel mean/std of the raw numeric attributes over a dataset.

    Standard deviations are floored at STD_FLOOR so constant channels stay
    usable.  Categorical and boolean attributes are one-hot / 0-1 encoded and
    excluded from z-scoring.
    """

    node_mean: tuple
    node_std: tuple
    edge_mean: tuple
    edge_std: tuple

    def to_json(self) -> dict:
        return {"node_mean": list(self.node_mean), "node_std": list(self.node_std),
                "edge_mean": list(self.edge_mean), "edge_std": list(self.edge_std)}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureStats":
        return cls(tuple(obj["node_mean"]), tuple(obj["node_std"]),
                   tuple(obj["edge_mean"]), tuple(obj["edge_std"]))


def _population_stats(columns):
    means, stds = [], []
    for values in columns:
        if values:
            arr = np.array(values, dtype=np.float64)
            means.append(float(arr.mean()))
            stds.append(float(max(arr.std(), STD_FLOOR)))
        else:
            means.append(0.0)
            stds.append(STD_FLOOR)
    return tuple(means), tuple(stds)


def compute_feature_stats(dataset) -> FeatureStats:
    """Population mean/std per numeric channel over all atoms and edges.

    Absent values are skipped; compute over the same (augmented or not) graphs
    that will later be encoded, otherwise shortest_path statistics are off.
    """
    if not dataset:
        raise ValidationError("cannot compute feature stats on an empty dataset")
    node_cols = [[] for _ in AtomAttributes.NUMERIC_FIELDS]
    edge_cols = [[] for _ in EdgeAttributes.NUMERIC_FIELDS]
    for graph, _ in dataset:
        for atom in graph.atoms:
            for k, name in enumerate(AtomAttributes.NUMERIC_FIELDS):
                v = getattr(atom, name)
                if v is not None:
                    node_cols[k].append(v)
        for _, _, attrs in graph.edges:
            for k, name in enumerate(EdgeAttributes.NUMERIC_FIELDS):
                v = getattr(attrs, name)
                if v is not None:
                    edge_cols[k].append(v)
    node_mean, node_std = _population_stats(node_cols)
    edge_mean, edge_std = _population_stats(edge_cols)
    return FeatureStats(node_mean, node_std, edge_mean, edge_std)


def _one_hot(value, vocab, what):
    # trailing slot encodes the absent sentinel
    out = [0.0] * (len(vocab) + 1)
    if value is None:
        out[-1] = 1.0
    else:
        try:
            out[vocab.index(value)] = 1.0
        except ValueError:
            raise EncodingError(f"{what}={value!r} not in vocabulary {vocab}")
    return out


def _z_score(value, mean, std):
    # absent numeric values sit at the dataset mean (z = 0)
    if value is None:
        return 0.0
    return (value - mean) / std


def node_feature_width() -> int:
    return (len(AtomAttributes.NUMERIC_FIELDS) + len(HYBRIDIZATIONS) + 1
            + len(CHIRALITIES) + 1 + 2)


def edge_feature_width() -> int:
    return (len(EdgeAttributes.NUMERIC_FIELDS) + len(BOND_TYPES) + 1
            + len(STEREO_KINDS) + 1 + 2 + len(RING_SIZES))


def encode_features(graph: MolecularGraph, stats: FeatureStats):
    """Fixed-layout float encodings: (M x a) node and (|E| x b) edge matrices.

    Layout per node row: z-scored numerics (atomic_number, degree,
    formal_charge, total_h, implicit_valence, total_valence,
    radical_electrons), hybridization one-hot (+absent), chirality one-hot
    (+absent), is_aromatic, is_in_ring.  Per edge row: z-scored
    shortest_path, bond_type one-hot (+absent), stereo one-hot (+absent),
    is_conjugated, is_same_ring, ring-size flags for sizes 3..9.
    """
    node_rows = []
    for atom in graph.atoms:
        row = [_z_score(getattr(atom, name), stats.node_mean[k], stats.node_std[k])
               for k, name in enumerate(AtomAttributes.NUMERIC_FIELDS)]
        row += _one_hot(atom.hybridization, HYBRIDIZATIONS, "hybridization")
        row += _one_hot(atom.chirality, CHIRALITIES, "chirality")
        row.append(1.0 if atom.is_aromatic else 0.0)
        row.append(1.0 if atom.is_in_ring else 0.0)
        node_rows.append(row)

    edge_rows = []
    for _, _, attrs in graph.edges:
        row = [_z_score(getattr(attrs, name), stats.edge_mean[k], stats.edge_std[k])
               for k, name in enumerate(EdgeAttributes.NUMERIC_FIELDS)]
        row += _one_hot(attrs.bond_type, BOND_TYPES, "bond_type")
        row += _one_hot(attrs.stereo, STEREO_KINDS, "stereo")
        row.append(1.0 if attrs.is_conjugated else 0.0)
        row.append(1.0 if attrs.is_same_ring else 0.0)
        row += [1.0 if v else 0.0 for v in attrs.in_ring_size]
        edge_rows.append(row)

    node_mat = np.array(node_rows, dtype=np.float64).reshape(
        graph.atom_count, node_feature_width())
    edge_mat = np.array(edge_rows, dtype=np.float64).reshape(
        len(graph.edges), edge_feature_width())
    return node_mat, edge_mat


# ---------------------------------------------------------------------------
# toy dataset generator

TEMPLATE_KINDS = ("chain", "ring", "branched")
_BOND_CC = 1.5
_BOND_CH = 1.0
_BOND_ANGLE = math.radians(109.47)
_HEAVY_PALETTE = (6, 6, 8, 6, 7, 6, 16, 6, 6, 8, 6, 7)


@dataclass(frozen=True)
class ToySpec:
    """Which template molecules to emit and how many conformers each."""

    templates: tuple
    conformers_per_molecule: int = 5

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.conformers_per_molecule < 2:
            raise ConfigError("each molecule needs at least 2 conformers")


def _parse_template(name: str):
    parts = name.split("-")
    if len(parts) != 2 or parts[0] not in TEMPLATE_KINDS:
        raise ConfigError(f"unknown template {name!r}")
    try:
        size = int(parts[1])
    except ValueError:
        raise ConfigError(f"unknown template {name!r}")
    lo = 3 if parts[0] == "ring" else 4
    if parts[0] == "branched":
        lo = 5
    if not lo <= size <= 12:
        raise ConfigError(f"template {name!r}: size {size} outside [{lo}, 12]")
    return parts[0], size


def _bond_length(z_a: int, z_b: int) -> float:
    return _BOND_CH if 1 in (z_a, z_b) else _BOND_CC


def _place_zmatrix(parents, lengths, torsions):
    """Place atoms from internal coordinates with the fixed bond angle.

    parents[k] = (p, gp, ggp) references for atom k >= 1; torsions[k] applies
    to atoms with three references.  Bond lengths are exact by construction.
    """
    n = len(parents) + 1
    coords = np.zeros((n, 3))
    for k in range(1, n):
        p, gp, ggp = parents[k - 1]
        r = lengths[k - 1]
        if gp is None:
            coords[k] = coords[p] + np.array([r, 0.0, 0.0])
            continue
        if ggp is None:
            b = coords[gp] - coords[p]
            b /= np.linalg.norm(b)
            # any unit vector at the fixed angle from b, in the xy plane
            perp = np.array([-b[1], b[0], 0.0])
            if np.linalg.norm(perp) < 1e-9:
                perp = np.array([0.0, 1.0, 0.0])
            perp /= np.linalg.norm(perp)
            coords[k] = coords[p] + r * (
                b * math.cos(_BOND_ANGLE) + perp * math.sin(_BOND_ANGLE))
            continue
        phi = torsions[k - 1]
        bc = coords[p] - coords[gp]
        bc /= np.linalg.norm(bc)
        ab = coords[gp] - coords[ggp]
        n1 = np.cross(ab, bc)
        if np.linalg.norm(n1) < 1e-9:
            n1 = np.cross(bc, np.array([0.0, 0.0, 1.0]))
        n1 /= np.linalg.norm(n1)
        m1 = np.cross(n1, bc)
        d = np.array([
            -r * math.cos(_BOND_ANGLE),
            r * math.sin(_BOND_ANGLE) * math.cos(phi),
            r * math.sin(_BOND_ANGLE) * math.sin(phi),
        ])
        coords[k] = coords[p] + d[0] * bc + d[1] * m1 + d[2] * n1
    return coords


def _chain_topology(size: int):
    elements = list(_HEAVY_PALETTE[:size])
    if size >= 6:
        elements[-1] = 1  # terminal hydrogen exercises heavy-atom masking
    bonds = [(i, i + 1) for i in range(size - 1)]
    parents = []
    for k in range(1, size):
        p = k - 1
        gp = k - 2 if k >= 2 else None
        ggp = k - 3 if k >= 3 else None
        parents.append((p, gp, ggp))
    return elements, bonds, parents


def _branched_topology(size: int):
    backbone = size - 1
    elements = list(_HEAVY_PALETTE[:backbone]) + [8]
    branch_at = backbone // 2
    bonds = [(i, i + 1) for i in range(backbone - 1)] + [(branch_at, backbone)]
    parents = []
    for k in range(1, backbone):
        parents.append((k - 1, k - 2 if k >= 2 else None, k - 3 if k >= 3 else None))
    # branch atom hangs off the middle of the backbone
    parents.append((branch_at, branch_at - 1, branch_at - 2 if branch_at >= 2 else None))
    return elements, bonds, parents


def _ring_coords(size: int, rng) -> np.ndarray:
    radius = _BOND_CC / (2.0 * math.sin(math.pi / size))
    angles = 2.0 * math.pi * np.arange(size) / size
    coords = np.stack([radius * np.cos(angles), radius * np.sin(angles),
                       np.zeros(size)], axis=1)
    # out-of-plane pucker, then restore exact bond lengths by iteration
    amp = rng.uniform(0.15, 0.35)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    coords[:, 2] = amp * np.cos(2.0 * angles + phase)
    for _ in range(500):
        worst = 0.0
        for i in range(size):
            j = (i + 1) % size
            delta = coords[j] - coords[i]
            dist = np.linalg.norm(delta)
            err = dist - _BOND_CC
            worst = max(worst, abs(err))
            shift = (err / dist) * delta / 2.0
            coords[i] += shift
            coords[j] -= shift
        if worst < 1e-13:
            break
    return coords


def _toy_atoms(elements, bonds, in_ring):
    degree = [0] * len(elements)
    h_neighbors = [0] * len(elements)
    for i, j in bonds:
        degree[i] += 1
        degree[j] += 1
        if elements[j] == 1:
            h_neighbors[i] += 1
        if elements[i] == 1:
            h_neighbors[j] += 1
    atoms = []
    for idx, z in enumerate(elements):
        atoms.append(AtomAttributes(
            atomic_number=z, hybridization="sp3", degree=degree[idx],
            formal_charge=0, total_h=h_neighbors[idx],
            implicit_valence=max(degree[idx], 1),
            total_valence=max(degree[idx], h_neighbors[idx], 1),
            radical_electrons=0, chirality=None,
            is_aromatic=False, is_in_ring=in_ring))
    return tuple(atoms)


def _toy_edges(bonds, elements, ring_size=None):
    ring_flags = [False] * len(RING_SIZES)
    if ring_size is not None and ring_size in RING_SIZES:
        ring_flags[RING_SIZES.index(ring_size)] = True
    edges = []
    for i, j in bonds:
        edges.append((i, j, EdgeAttributes(
            bond_type="single", stereo=None, is_conjugated=False,
            is_same_ring=ring_size is not None, shortest_path=1,
            in_ring_size=tuple(ring_flags))))
    return tuple(edges)


def _template_conformer(kind, size, elements, bonds, parents, rng):
    if kind == "ring":
        return _ring_coords(size, rng)
    lengths = [_bond_length(elements[p], elements[k + 1])
               for k, (p, _, _) in enumerate(parents)]
    torsions = [rng.uniform(0.0, 2.0 * math.pi) for _ in parents]
    return _place_zmatrix(parents, lengths, torsions)


def generate_toy_dataset(spec: ToySpec, seed: int):
    """Deterministic desk-scale dataset from rigid torsion-randomized templates.

    Every conformer of a molecule shares its bonded distances exactly (chains
    and branches by z-matrix construction, rings by iterative restoration),
    which is the property the distance-distribution metrics rely on.
    """
    rng = np.random.default_rng(seed)
    dataset = []
    for name in spec.templates:
        kind, size = _parse_template(name)
        if kind == "chain":
            elements, bonds, parents = _chain_topology(size)
        elif kind == "branched":
            elements, bonds, parents = _branched_topology(size)
        else:
            elements = [6] * size
            bonds = [(min(i, (i + 1) % size), max(i, (i + 1) % size))
                     for i in range(size)]
            parents = None
        graph = MolecularGraph(
            molecule_id=name,
            atoms=_toy_atoms(elements, bonds, in_ring=kind == "ring"),
            edges=_toy_edges(bonds, elements,
                             ring_size=size if kind == "ring" else None))
        graph.validate()
        conformers = []
        for _ in range(spec.conformers_per_molecule):
            coords = _template_conformer(kind, size, elements, bonds, parents, rng)
            conformers.append(Conformation.for_graph(graph, coords))
        dataset.append((graph, conformers))
    return dataset
