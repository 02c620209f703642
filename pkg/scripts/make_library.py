"""Regenerate the shipped toy molecule library.

Molecules are written as heavy-atom skeletons here; hydrogens are added
automatically up to each element's standard valence.  Output goes to
src/dgnn/data/library/ as one graph JSON file per molecule.

Usage: python3 scripts/make_library.py [outdir]
"""

from __future__ import annotations

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from dgnn import molgraph as mg  # noqa: E402

VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2, "F": 1, "Cl": 1, "Br": 1, "I": 1}


def with_hydrogens(elements, bonds, role):
    """Fill every heavy atom up to its standard valence with H atoms."""
    elements = list(elements)
    bonds = [tuple(b) for b in bonds]
    used = [0] * len(elements)
    for i, j, order in bonds:
        used[i] += order
        used[j] += order
    for idx in range(len(used)):
        missing = VALENCE[elements[idx]] - used[idx]
        if missing < 0:
            raise ValueError(f"atom {idx} ({elements[idx]}) over valence")
        for _ in range(missing):
            elements.append("H")
            bonds.append((idx, len(elements) - 1, 1))
    atoms = tuple(mg.Atom(el) for el in elements)
    return mg.MolecularGraph(atoms, tuple(bonds), role)


def chain(n):
    """n-carbon chain bonds."""
    return [(i, i + 1, 1) for i in range(n - 1)]


def benzene(offset=0):
    """Kekulé benzene ring bonds over atoms offset..offset+5."""
    ring = []
    for k in range(6):
        a, b = offset + k, offset + (k + 1) % 6
        ring.append((a, b, 2 if k % 2 == 0 else 1))
    return ring


ALCOHOLS = {
    "methanol": (["C", "O"], [(0, 1, 1)]),
    "ethanol": (["C", "C", "O"], chain(2) + [(1, 2, 1)]),
    "propan_1_ol": (["C", "C", "C", "O"], chain(3) + [(2, 3, 1)]),
    "propan_2_ol": (["C", "C", "C", "O"], chain(3) + [(1, 3, 1)]),
    "butan_1_ol": (["C"] * 4 + ["O"], chain(4) + [(3, 4, 1)]),
    "isobutanol": (["C", "C", "C", "C", "O"],
                   [(0, 1, 1), (1, 2, 1), (1, 3, 1), (3, 4, 1)]),
    "tert_butanol": (["C", "C", "C", "C", "O"],
                     [(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)]),
    "pentan_1_ol": (["C"] * 5 + ["O"], chain(5) + [(4, 5, 1)]),
    "isopentanol": (["C", "C", "C", "C", "C", "O"],
                    [(0, 1, 1), (1, 2, 1), (1, 3, 1), (3, 4, 1), (4, 5, 1)]),
    "hexan_1_ol": (["C"] * 6 + ["O"], chain(6) + [(5, 6, 1)]),
    "cyclopentanol": (["C"] * 5 + ["O"],
                      chain(5) + [(4, 0, 1), (0, 5, 1)]),
    "cyclohexanol": (["C"] * 6 + ["O"],
                     chain(6) + [(5, 0, 1), (0, 6, 1)]),
    "cyclopropyl_methanol": (["C", "C", "C", "C", "O"],
                             [(0, 1, 1), (1, 2, 1), (2, 0, 1),
                              (0, 3, 1), (3, 4, 1)]),
    "allyl_alcohol": (["C", "C", "C", "O"],
                      [(0, 1, 2), (1, 2, 1), (2, 3, 1)]),
    "propargyl_alcohol": (["C", "C", "C", "O"],
                          [(0, 1, 3), (1, 2, 1), (2, 3, 1)]),
    "benzyl_alcohol": (["C"] * 7 + ["O"],
                       benzene() + [(0, 6, 1), (6, 7, 1)]),
    "methoxyethanol": (["C", "O", "C", "C", "O"],
                       [(0, 1, 1), (1, 2, 1), (2, 3, 1), (3, 4, 1)]),
    "fluoroethanol": (["F", "C", "C", "O"],
                      [(0, 1, 1), (1, 2, 1), (2, 3, 1)]),
    "chloroethanol": (["Cl", "C", "C", "O"],
                      [(0, 1, 1), (1, 2, 1), (2, 3, 1)]),
    "aminoethanol": (["N", "C", "C", "O"],
                     [(0, 1, 1), (1, 2, 1), (2, 3, 1)]),
}

# acyl skeletons: carbonyl carbon first, its =O second; the halogen is
# appended per variant with a single bond to atom 0
ACYL_SKELETONS = {
    "acetyl": (["C", "O", "C"], [(0, 1, 2), (0, 2, 1)]),
    "propanoyl": (["C", "O", "C", "C"], [(0, 1, 2), (0, 2, 1), (2, 3, 1)]),
    "butanoyl": (["C", "O", "C", "C", "C"],
                 [(0, 1, 2), (0, 2, 1), (2, 3, 1), (3, 4, 1)]),
    "isobutyryl": (["C", "O", "C", "C", "C"],
                   [(0, 1, 2), (0, 2, 1), (2, 3, 1), (2, 4, 1)]),
    "benzoyl": (["C", "O"] + ["C"] * 6,
                [(0, 1, 2), (0, 2, 1)] + benzene(2)),
    "cyclopropanecarbonyl": (["C", "O", "C", "C", "C"],
                             [(0, 1, 2), (0, 2, 1),
                              (2, 3, 1), (3, 4, 1), (4, 2, 1)]),
}


def build_library():
    mols = []
    for name, (elements, bonds) in ALCOHOLS.items():
        mols.append((f"alcohol_{name}", with_hydrogens(elements, bonds, "alcohol")))
    for name, (elements, bonds) in ACYL_SKELETONS.items():
        for hal in mg.HALOGENS:
            els = list(elements) + [hal]
            bds = list(bonds) + [(0, len(elements), 1)]
            mols.append((f"halide_{name}_{hal.lower()}",
                         with_hydrogens(els, bds, "acyl_halide")))
    return mols


def main():
    default = pathlib.Path(__file__).resolve().parents[1] / "src/dgnn/data/library"
    outdir = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else default
    outdir.mkdir(parents=True, exist_ok=True)
    mols = build_library()
    for name, graph in mols:
        mg.save_graph(graph, outdir / f"{name}.json")
    n_alc = sum(1 for n, _ in mols if n.startswith("alcohol"))
    print(f"wrote {len(mols)} molecules ({n_alc} alcohols) to {outdir}")


if __name__ == "__main__":
    main()
