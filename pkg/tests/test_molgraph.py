import numpy as np
import pytest

from dgnn import molgraph as mg

import chem


def test_atom_rejects_unknown_element():
    with pytest.raises(mg.GraphError):
        mg.Atom("Xe")


def test_atom_rejects_bad_coords():
    with pytest.raises(mg.GraphError):
        mg.Atom("C", coords=(1.0, 2.0))
    with pytest.raises(mg.GraphError):
        mg.Atom("C", coords=(1.0, float("nan"), 0.0))


@pytest.mark.parametrize("bonds,msg", [
    ([(0, 0, 1)], "bad bond"),
    ([(0, 5, 1)], "bad bond"),
    ([(0, 1, 4)], "bad bond order"),
    ([(0, 1, 1), (1, 0, 1)], "duplicate"),
])
def test_graph_rejects_bad_bonds(bonds, msg):
    atoms = (mg.Atom("C"), mg.Atom("C"))
    with pytest.raises(mg.GraphError, match=msg):
        mg.MolecularGraph(atoms, tuple(bonds))


def test_graph_rejects_empty_and_disconnected():
    with pytest.raises(mg.GraphError):
        mg.MolecularGraph((), ())
    with pytest.raises(mg.GraphError, match="connected"):
        mg.MolecularGraph((mg.Atom("C"), mg.Atom("C")), ())


def test_graph_rejects_partial_coords():
    atoms = (mg.Atom("C", coords=(0, 0, 0)), mg.Atom("O"))
    with pytest.raises(mg.GraphError, match="coordinates"):
        mg.MolecularGraph(atoms, ((0, 1, 1),))


def test_json_round_trip():
    g = chem.acetyl_chloride()
    assert mg.graph_from_json(mg.graph_to_json(g)) == g


def test_file_round_trip(tmp_path):
    g = chem.build(["C", "O"], [(0, 1, 2)], coords=[(0, 0, 0), (1.2, 0, 0)])
    path = tmp_path / "mol.json"
    mg.save_graph(g, path)
    assert mg.load_graph(path) == g


def test_substructure_checks():
    assert mg.has_hydroxyl(chem.methanol())
    assert not mg.has_hydroxyl(chem.dimethyl_ether())
    assert mg.has_acyl_halide(chem.acetyl_chloride())
    assert not mg.has_acyl_halide(chem.methanol())
    assert mg.halide_element(chem.acetyl_chloride()) == "Cl"
    assert mg.halide_element(chem.acetyl_bromide()) == "Br"
    assert mg.halide_element(chem.methanol()) is None


def test_featurize_layout():
    feats = mg.featurize(chem.methanol())
    assert feats.shape == (6, 13)
    # carbon: element index 1, degree 4
    assert feats[0, 1] == 1.0 and feats[0, 12] == 1.0
    assert feats[0].sum() == 2.0
    # oxygen: element index 3, degree 2
    assert feats[1, 3] == 1.0 and feats[1, 10] == 1.0
    # hydrogen: element index 0, degree 1
    assert feats[2, 0] == 1.0 and feats[2, 9] == 1.0


def test_featurize_charge_and_degree_edge_cases():
    lone = chem.build(["O"], [], charges={0: -1})
    feats = mg.featurize(lone)
    assert feats[0, 8] == -1.0
    assert feats[0, 9:].sum() == 0.0  # degree 0 leaves the block empty

    crowded = chem.build(["C", "H", "H", "H", "H", "H"],
                         [(0, k, 1) for k in range(1, 6)])
    assert mg.featurize(crowded)[0, 12] == 1.0  # degree 5 clamps to 4


def _undirected_pairs(jg):
    return {(min(e.src, e.dst), max(e.src, e.dst)) for e in jg.edges}


def test_join_dg_counts_and_symmetry():
    a, h = chem.methanol(), chem.acetyl_chloride()
    jg = mg.join(a, h, "dg")
    assert jg.num_nodes == 13
    assert jg.graph_boundary == 6
    assert len(jg.edges) == 2 * (len(a.bonds) + len(h.bonds))
    directed = {(e.src, e.dst) for e in jg.edges}
    assert all((d, s) in directed for s, d in directed)
    assert list(jg.node_segments()) == [0] * 6 + [1] * 7


def test_join_fc_complete_and_flagged():
    a, h = chem.methanol(), chem.acetyl_chloride()
    jg = mg.join(a, h, "fc")
    n = jg.num_nodes
    assert len(jg.edges) == n * (n - 1)
    kinds = {e.kind for e in jg.edges}
    assert kinds == {mg.EDGE_KIND_BOND, mg.EDGE_KIND_VIRTUAL}
    # a chemical bond keeps its order one-hot and the bond flag
    bond = next(e for e in jg.edges if e.kind == mg.EDGE_KIND_BOND)
    v = bond.feature_vector()
    assert v[bond.bond_order - 1] == 1.0 and v[4] == 1.0 and v[5] == 0.0
    # cross-molecule edges carry zero distance
    for e in jg.edges:
        crosses = (e.src < 6) != (e.dst < 6)
        if crosses:
            assert e.kind == mg.EDGE_KIND_VIRTUAL and e.distance == 0.0


def test_join_gn_hub():
    a, h = chem.methanol(), chem.acetyl_chloride()
    jg = mg.join(a, h, "gn")
    assert jg.global_node_index == 13
    assert jg.num_nodes == 14
    assert np.all(jg.node_features[13] == 0.0)
    hub_edges = [e for e in jg.edges if 13 in (e.src, e.dst)]
    assert len(hub_edges) == 2 * 13
    assert all(e.kind == mg.EDGE_KIND_GLOBAL and e.distance == 0.0
               for e in hub_edges)
    # the hub never counts toward the second molecule's pooling segment
    assert list(jg.node_segments()) == [0] * 6 + [1] * 7 + [0]


def test_hop_distance_feature():
    a = chem.propanol()
    jg = mg.join(a, chem.acetyl_chloride(), "fc")
    # C0 and C2 sit two bonds apart -> virtual edge distance 1/2
    e = next(e for e in jg.edges if (e.src, e.dst) == (0, 2))
    assert e.distance == pytest.approx(0.5)
    b = next(e for e in jg.edges if (e.src, e.dst) == (0, 1))
    assert b.distance == pytest.approx(1.0)


def test_euclidean_distance_feature():
    coords = [(0.0, 0.0, 0.0), (3.0, 4.0, 0.0)]
    g = chem.build(["C", "O"], [(0, 1, 1)], coords=coords)
    jg = mg.join(g, chem.acetyl_chloride(), "dg")
    e = next(e for e in jg.edges if (e.src, e.dst) == (0, 1))
    assert e.distance == pytest.approx(5.0)


def test_edge_feature_layout():
    v = mg.Edge(0, 1, mg.EDGE_KIND_GLOBAL).feature_vector()
    assert list(v) == [0, 0, 0, 1, 0, 0, 1, 0]
    v = mg.Edge(0, 1, mg.EDGE_KIND_VIRTUAL, distance=0.25).feature_vector()
    assert list(v) == [0, 0, 0, 1, 0, 1, 0, 0.25]
    v = mg.Edge(0, 1, mg.EDGE_KIND_BOND, bond_order=2, distance=1.0).feature_vector()
    assert list(v) == [0, 1, 0, 0, 1, 0, 0, 1.0]


def test_normalizer_column_then_row():
    train = [np.array([[0.0, 5.0, 1.0], [2.0, 5.0, 3.0]])]
    norm = mg.Normalizer().fit(train)
    out = norm.apply(np.array([[1.0, 5.0, 2.0]]))
    # column 1 is constant on the fit set and passes through untouched;
    # columns 0 and 2 are centered to zero here, so the row keeps col 1 only
    assert out[0, 1] == pytest.approx(1.0)
    assert out[0, 0] == 0.0 and out[0, 2] == 0.0
    row = norm.apply(np.array([[0.0, 5.0, 1.0]]))
    assert np.linalg.norm(row[0]) == pytest.approx(1.0)


def test_normalizer_zero_row_stays_zero():
    norm = mg.Normalizer().fit([np.array([[0.0, 0.0], [0.0, 0.0]])])
    out = norm.apply(np.zeros((2, 2)))
    assert np.all(out == 0.0)


def test_normalizer_requires_fit_and_round_trips():
    with pytest.raises(RuntimeError):
        mg.Normalizer().apply(np.ones((1, 2)))
    rng = np.random.default_rng(3)
    norm = mg.Normalizer().fit([rng.standard_normal((20, 13))])
    clone = mg.Normalizer.from_json(norm.to_json())
    x = rng.standard_normal((4, 13))
    assert np.array_equal(norm.apply(x), clone.apply(x))
    assert np.array_equal(norm.mean, clone.mean)
