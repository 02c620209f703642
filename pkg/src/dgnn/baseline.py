"""Circular fingerprints plus an MLP regressor on reactant pairs.

The fingerprint is an ECFP-style reimplementation: every atom starts from a
hashed invariant of (element, charge, degree); each round rehashes the
atom's previous identifier together with the sorted (bond order, neighbor
identifier) pairs, widening the encoded environment by one bond.  Candidate
identifiers whose bond environments coincide are deduplicated, then all
surviving identifiers are folded modulo the bit count.

Bit patterns intentionally do not match any external cheminformatics
toolkit; only behavioral properties (determinism, relabeling invariance,
discrimination) are promised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mpnn import apply_net, init_net
from .seeds import derive_rng

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a(data):
    """64-bit FNV-1a over a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def _hash_parts(*parts):
    return fnv1a("|".join(str(p) for p in parts).encode("utf-8"))


def atom_invariants(g):
    """Round-0 identifier per atom: hash of (element, charge, degree)."""
    degrees = g.degrees()
    return [
        _hash_parts("a", atom.element, atom.formal_charge, degrees[i])
        for i, atom in enumerate(g.atoms)
    ]


def morgan_fingerprint(g, radius=3, nbits=1024):
    """Binary fingerprint of length ``nbits`` (uint8 zeros and ones).

    Deterministic across runs and invariant under node relabeling.  At most
    n*(radius+1) bits can be set for a molecule with n atoms.
    """
    if radius < 0 or nbits < 1:
        raise ValueError("radius must be >= 0 and nbits >= 1")
    ids = atom_invariants(g)
    kept = list(ids)

    n = len(g.atoms)
    neighbors = [[] for _ in range(n)]
    for i, j, order in g.bonds:
        neighbors[i].append((j, order))
        neighbors[j].append((i, order))
    hops = [g.hop_distances(a) for a in range(n)]

    def environment(a, r):
        """Bonds whose nearer endpoint lies within r-1 hops of atom a."""
        return frozenset(
            (min(i, j), max(i, j))
            for i, j, _ in g.bonds
            if min(hops[a][i], hops[a][j]) <= r - 1
        )

    candidates = []
    for r in range(1, radius + 1):
        next_ids = []
        for a in range(n):
            pairs = sorted((order, ids[nb]) for nb, order in neighbors[a])
            new_id = _hash_parts("e", ids[a], *[f"{o}.{v}" for o, v in pairs])
            next_ids.append(new_id)
            env = environment(a, r)
            if env:
                candidates.append((env, r, new_id))
        ids = next_ids

    best = {}
    for env, r, ident in candidates:
        cur = best.get(env)
        if cur is None or (r, ident) < cur:
            best[env] = (r, ident)

    fp = np.zeros(nbits, dtype=np.uint8)
    for ident in kept:
        fp[ident % nbits] = 1
    for _, ident in best.values():
        fp[ident % nbits] = 1
    return fp


def fingerprint_pair(alcohol, halide, radius=3, nbits=1024):
    """Concatenated fingerprints in fixed role order: alcohol, then halide."""
    return np.concatenate([
        morgan_fingerprint(alcohol, radius, nbits),
        morgan_fingerprint(halide, radius, nbits),
    ]).astype(np.float64)


# ---------------------------------------------------------------------------
# MLP regressor


@dataclass(frozen=True)
class MlpConfig:
    radius: int = 3
    nbits: int = 1024
    hidden: tuple = (512, 128)
    seed: int = 0

    def to_json(self):
        return {"radius": self.radius, "nbits": self.nbits,
                "hidden": list(self.hidden), "seed": self.seed}

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["hidden"] = tuple(obj["hidden"])
        return cls(**obj)


@dataclass
class MlpParams:
    layers: list

    def named_tensors(self):
        out = []
        for k, (w, b) in enumerate(self.layers):
            out += [(f"mlp.{k}.w", w), (f"mlp.{k}.b", b)]
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def init_mlp(config):
    rng = derive_rng(config.seed, "mlp-init")
    widths = [2 * config.nbits, *config.hidden, 1]
    return MlpParams(layers=init_net(rng, widths))


def mlp_forward(params, x):
    """(B, 2*nbits) fingerprint matrix -> (B, 1) predictions."""
    return apply_net(ad.as_tensor(x), params.layers)


@dataclass
class MlpModel:
    """Fingerprint MLP bundle mirroring the graph model's interface."""

    config: MlpConfig
    params: MlpParams
    label_mean: float = 0.0
    label_std: float = 1.0

    def features(self, samples):
        return np.stack([
            fingerprint_pair(s.alcohol, s.halide,
                             self.config.radius, self.config.nbits)
            for s in samples
        ])

    def predict_batch(self, samples):
        out = mlp_forward(self.params, self.features(samples))
        return out.data[:, 0].copy()

    def predict(self, sample):
        return float(self.predict_batch([sample])[0])

    def denormalize(self, y_norm):
        return y_norm * self.label_std + self.label_mean


def mlp_predict(sample, model):
    """Scalar prediction for one reactant pair, normalized label units."""
    return model.predict(sample)


def new_mlp_model(config=None):
    config = config or MlpConfig()
    return MlpModel(config=config, params=init_mlp(config))


def clone_mlp_params(params):
    return MlpParams(layers=[
        (ad.Tensor(w.data.copy(), requires_grad=w.requires_grad),
         ad.Tensor(b.data.copy(), requires_grad=b.requires_grad))
        for w, b in params.layers
    ])
