"""Reaction dataset construction, labeling, splitting and serialization.

Samples pair an alcohol with an acyl halide; the scalar target mimics a
reaction energy in kcal/mol.  Labels come from a synthetic oracle

    label = mu_X + f(alcohol) + f(halide) + gamma * cross + noise

where mu_X depends on the halogen (three separated modes), the per-molecule
terms mix graph statistics with a frozen molecule-specific offset, the
cross term couples the two reactants (so purely additive models stay
biased), and the noise is a seeded, slightly right-skewed perturbation
frozen at generation time.  Real labels can replace the oracle by writing
the same JSONL manifest format.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import molgraph as mg
from .seeds import derive_rng


class DatasetError(ValueError):
    """Raised for constraint violations, bad splits or malformed manifests."""


SPLIT_NAMES = ("train", "val", "test")
PROTOCOLS = ("random", "leave_alcohol_out")

# halogen-dependent label modes, kcal/mol
MU_HALIDE = {"Cl": -20.0, "Br": -12.0, "I": -4.0}
DEFAULT_GAMMA = 1.0
DEFAULT_NOISE = 0.4

_ALCOHOL_OFFSET_SIGMA = 1.0
_HALIDE_OFFSET_SIGMA = 0.4


def graph_key(g):
    """Content hash of a molecule, stable across processes."""
    payload = json.dumps(mg.graph_to_json(g), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ReactionSample:
    alcohol: mg.MolecularGraph
    halide: mg.MolecularGraph
    label: float
    split: str = "unassigned"
    label_norm: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def sample_id(self):
        joint = graph_key(self.alcohol) + "|" + graph_key(self.halide)
        return hashlib.sha256(joint.encode("utf-8")).hexdigest()[:16]


@dataclass
class DatasetManifest:
    samples: list
    protocol: str | None = None
    label_mean: float | None = None
    label_std: float | None = None

    def split_samples(self, name):
        return [s for s in self.samples if s.split == name]

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------------------
# pair enumeration


def default_constraints():
    """(name, predicate) pairs every candidate pair must satisfy."""
    return (
        ("alcohol lacks an O-H group",
         lambda a, h: mg.has_hydroxyl(a)),
        ("alcohol contains an acyl-halide group",
         lambda a, h: not mg.has_acyl_halide(a)),
        ("halide lacks a C(=O)-X group",
         lambda a, h: mg.has_acyl_halide(h)),
        ("halide contains an O-H group",
         lambda a, h: not mg.has_hydroxyl(h)),
    )


def enumerate_pairs(alcohols, halides, constraints=None):
    """Cartesian product of the two lists, filtered by the constraints.

    Returns (pairs, rejections); order is deterministic (alcohol-major).
    Each rejection is (alcohol_index, halide_index, reason).
    """
    if constraints is None:
        constraints = default_constraints()
    pairs = []
    rejections = []
    for i, a in enumerate(alcohols):
        for j, h in enumerate(halides):
            reason = next(
                (name for name, ok in constraints if not ok(a, h)), None)
            if reason is None:
                pairs.append((a, h))
            else:
                rejections.append((i, j, reason))
    return pairs, rejections


# ---------------------------------------------------------------------------
# synthetic label oracle


def graph_stats(g):
    """(heavy atom count, ring count, branching atom count)."""
    heavy = [i for i, a in enumerate(g.atoms) if a.element != "H"]
    heavy_set = set(heavy)
    rings = len(g.bonds) - len(g.atoms) + 1
    adj = g.adjacency()
    branching = sum(
        1 for i in heavy
        if sum(1 for nb in adj[i] if nb in heavy_set) >= 3
    )
    return len(heavy), rings, branching


def _molecule_term(g, seed, stream, weights, centers, offset_sigma):
    """Structural score plus a frozen molecule-specific offset.

    The centers keep the term roughly mean-zero over molecules at the
    shipped library's scale, so the label modes stay near MU_HALIDE.
    """
    heavy, rings, branching = graph_stats(g)
    w_heavy, w_rings, w_branch = weights
    c_heavy, c_rings, c_branch = centers
    base = (w_heavy * (heavy - c_heavy) + w_rings * (rings - c_rings)
            + w_branch * (branching - c_branch))
    rng = derive_rng(seed, stream, graph_key(g))
    # bounded (uniform) offset: same variance as a normal with this sigma,
    # but no far tails that would displace a label mode
    return base + offset_sigma * rng.uniform(-math.sqrt(3.0), math.sqrt(3.0))


def _cross_term(alcohol, halide):
    heavy_a, _, _ = graph_stats(alcohol)
    heavy_h, _, _ = graph_stats(halide)
    return (heavy_a - 5.0) * (heavy_h - 6.0) / 1.5


def _skew_noise(seed, sample_id):
    rng = derive_rng(seed, "noise", sample_id)
    gauss = rng.standard_normal()
    skew = rng.exponential(1.0) - 1.0
    return 0.6 * gauss + 0.8 * skew


def synthetic_label(sample, seed=0, gamma=DEFAULT_GAMMA,
                    noise_scale=DEFAULT_NOISE):
    """Deterministic pseudo reaction energy for one reactant pair."""
    halogen = mg.halide_element(sample.halide)
    if halogen is None:
        raise DatasetError("sample's second molecule is not an acyl halide")
    f_a = _molecule_term(sample.alcohol, seed, "alcohol-term",
                         (0.8, 0.5, 0.5), (5.0, 0.2, 0.4),
                         _ALCOHOL_OFFSET_SIGMA)
    f_h = _molecule_term(sample.halide, seed, "halide-term",
                         (0.7, 0.5, 0.4), (6.0, 0.33, 1.5),
                         _HALIDE_OFFSET_SIGMA)
    cross = _cross_term(sample.alcohol, sample.halide)
    noise = noise_scale * _skew_noise(seed, sample.sample_id)
    return MU_HALIDE[halogen] + f_a + f_h + gamma * cross + noise


def generate_dataset(alcohols, halides, seed=0, gamma=DEFAULT_GAMMA,
                     noise_scale=DEFAULT_NOISE):
    """Labeled, not yet split manifest over all admissible pairs."""
    pairs, _ = enumerate_pairs(alcohols, halides)
    if not pairs:
        raise DatasetError("no admissible reactant pairs")
    samples = []
    for a, h in pairs:
        s = ReactionSample(alcohol=a, halide=h, label=0.0)
        s.label = float(synthetic_label(s, seed, gamma, noise_scale))
        samples.append(s)
    ids = {s.sample_id for s in samples}
    if len(ids) != len(samples):
        raise DatasetError("duplicate reactant pairs in input lists")
    return DatasetManifest(samples=samples)


def label_modes(manifest, bandwidth=2.0):
    """Kernel-smoothed histogram peak of the labels per halogen class."""
    modes = {}
    for halogen in mg.HALOGENS:
        values = np.array([s.label for s in manifest.samples
                           if mg.halide_element(s.halide) == halogen])
        if values.size == 0:
            continue
        grid = np.arange(values.min() - 1.0, values.max() + 1.0, 0.05)
        dens = np.exp(-0.5 * ((grid[:, None] - values[None, :])
                              / bandwidth) ** 2).sum(axis=1)
        modes[halogen] = float(grid[dens.argmax()])
    return modes


# ---------------------------------------------------------------------------
# splits


def _check_fractions(fractions):
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DatasetError(f"bad split fractions {fractions!r}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must sum to 1, got {fractions!r}")


def _target_counts(n, fractions):
    """Floor the val/test counts; the remainder goes to train."""
    n_val = math.floor(fractions[1] * n)
    n_test = math.floor(fractions[2] * n)
    return n - n_val - n_test, n_val, n_test


def split(manifest, protocol, fractions=(0.8, 0.1, 0.1), seed=0):
    """Assign train/val/test; returns a new manifest, input untouched."""
    if protocol not in PROTOCOLS:
        raise DatasetError(f"unknown split protocol {protocol!r}")
    _check_fractions(fractions)
    samples = [replace(s, extra=dict(s.extra)) for s in manifest.samples]
    n = len(samples)
    if n == 0:
        raise DatasetError("cannot split an empty manifest")
    n_train, n_val, n_test = _target_counts(n, fractions)

    if protocol == "random":
        rng = derive_rng(seed, "split", "random")
        order = rng.permutation(n)
        for pos, idx in enumerate(order):
            if pos < n_train:
                samples[idx].split = "train"
            elif pos < n_train + n_val:
                samples[idx].split = "val"
            else:
                samples[idx].split = "test"
    else:
        groups = {}
        for s in samples:
            groups.setdefault(graph_key(s.alcohol), []).append(s)
        keys = list(groups)
        rng = derive_rng(seed, "split", "leave-alcohol-out")
        rng.shuffle(keys)
        assigned = 0
        for key in keys:
            members = groups[key]
            if assigned < n_train:
                name = "train"
            elif assigned < n_train + n_val:
                name = "val"
            else:
                name = "test"
            for s in members:
                s.split = name
            assigned += len(members)
        counts = {name: sum(1 for s in samples if s.split == name)
                  for name in SPLIT_NAMES}
        if min(counts.values()) == 0:
            raise DatasetError(
                f"too few alcohol groups to fill every split: {counts}")
        train_halogens = {mg.halide_element(s.halide)
                          for s in samples if s.split == "train"}
        missing = set(mg.HALOGENS) - train_halogens
        if missing:
            raise DatasetError(
                f"halogens missing from the training split: {sorted(missing)}")

    out = DatasetManifest(samples=samples, protocol=protocol)
    check_split_integrity(out)
    return out


def check_split_integrity(manifest):
    """Unique ids, full partition, and leave-alcohol-out disjointness."""
    ids = [s.sample_id for s in manifest.samples]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate sample ids")
    for s in manifest.samples:
        if s.split not in SPLIT_NAMES + ("unassigned",):
            raise DatasetError(f"bad split name {s.split!r}")
    if manifest.protocol == "leave_alcohol_out":
        seen = {}
        for s in manifest.samples:
            key = graph_key(s.alcohol)
            prior = seen.setdefault(key, s.split)
            if prior != s.split:
                raise DatasetError("alcohol identity crosses split boundaries")


# ---------------------------------------------------------------------------
# label normalization


def normalize_labels(manifest):
    """Set label_norm = (label - train mean) / train std (population std)."""
    train = manifest.split_samples("train")
    if not train:
        raise DatasetError("normalize_labels needs an assigned train split")
    labels = [s.label for s in train]
    mean = sum(labels) / len(labels)
    var = sum((x - mean) ** 2 for x in labels) / len(labels)
    std = math.sqrt(var)
    if std < 1e-12:
        raise DatasetError("train labels are constant; cannot normalize")
    manifest.label_mean = mean
    manifest.label_std = std
    for s in manifest.samples:
        s.label_norm = (s.label - mean) / std
    return manifest


def denormalize(manifest, y_norm):
    if manifest.label_std is None:
        raise DatasetError("manifest has no label statistics")
    return y_norm * manifest.label_std + manifest.label_mean


# ---------------------------------------------------------------------------
# JSONL serialization


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in manifest.samples:
            obj = {
                "alcohol": mg.graph_to_json(s.alcohol),
                "halide": mg.graph_to_json(s.halide),
                "label": s.label,
                "split": s.split,
            }
            if manifest.protocol is not None:
                obj["protocol"] = manifest.protocol
            obj.update(s.extra)
            fh.write(json.dumps(obj) + "\n")


def load_manifest(path):
    samples = []
    protocol = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                alcohol = mg.graph_from_json(obj.pop("alcohol"))
                halide = mg.graph_from_json(obj.pop("halide"))
                label = float(obj.pop("label"))
                split_name = obj.pop("split")
            except (KeyError, ValueError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad manifest line "
                                   f"({exc})") from exc
            line_protocol = obj.pop("protocol", None)
            if line_protocol is not None:
                protocol = line_protocol
            samples.append(ReactionSample(
                alcohol=alcohol, halide=halide, label=label,
                split=split_name, extra=obj))
    if not samples:
        raise DatasetError(f"{path}: empty manifest")
    manifest = DatasetManifest(samples=samples, protocol=protocol)
    check_split_integrity(manifest)
    train = manifest.split_samples("train")
    if train:
        labels = [s.label for s in train]
        mean = sum(labels) / len(labels)
        var = sum((x - mean) ** 2 for x in labels) / len(labels)
        if math.sqrt(var) >= 1e-12:
            normalize_labels(manifest)
    return manifest


# ---------------------------------------------------------------------------
# molecule library


def default_library_dir():
    return Path(str(resources.files("dgnn").joinpath("data/library")))


def load_library(dirpath=None):
    """(alcohols, halides) from a directory of graph JSON files."""
    dirpath = Path(dirpath) if dirpath else default_library_dir()
    alcohols, halides = [], []
    files = sorted(dirpath.glob("*.json"))
    if not files:
        raise DatasetError(f"no molecule files in {dirpath}")
    for path in files:
        g = mg.load_graph(path)
        if g.role == "alcohol":
            alcohols.append(g)
        elif g.role == "acyl_halide":
            halides.append(g)
        else:
            raise DatasetError(f"{path}: molecule has no reactant role")
    return alcohols, halides
