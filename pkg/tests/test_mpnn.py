import numpy as np
import pytest

from dgnn import autodiff as ad
from dgnn import molgraph as mg
from dgnn import mpnn

import chem
from reference import (
    gru_arrays,
    loop_forward,
    loop_message_step,
    loop_readout_concat,
    loop_readout_gated,
    loop_readout_global,
    net_arrays,
)


def small_config(**kw):
    base = dict(hidden_dim=6, steps=2, readout="gated", strategy="dg",
                net_width=10, seed=11)
    base.update(kw)
    return mpnn.ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        mpnn.ModelConfig(hidden_dim=0)
    with pytest.raises(ValueError):
        mpnn.ModelConfig(readout="mean")
    with pytest.raises(ValueError):
        mpnn.ModelConfig(strategy="cat")
    with pytest.raises(ValueError):
        mpnn.ModelConfig(readout="gr", strategy="fc")
    mpnn.ModelConfig(readout="gr", strategy="gn")


def test_init_shapes():
    cfg = small_config(readout="cr", strategy="dg")
    params = mpnn.init_params(cfg)
    d, w = cfg.hidden_dim, cfg.net_width
    assert params.embed_w.shape == (13, d)
    assert [t.shape for t, _ in params.edge_net] == [(8, w), (w, w), (w, d * d)]
    assert params.i_net[0][0].shape == ((cfg.steps + 1) * d, w)
    assert params.j_net[-1][0].shape == (w, d)
    assert params.head_w.shape == (2 * d, 1)
    names = [n for n, _ in params.named_tensors()]
    assert len(names) == len(set(names))


def test_init_is_seed_deterministic():
    a = mpnn.init_params(small_config())
    b = mpnn.init_params(small_config())
    for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert np.array_equal(ta.data, tb.data)
    c = mpnn.init_params(small_config(seed=12))
    assert not np.array_equal(a.embed_w.data, c.embed_w.data)


@pytest.mark.parametrize("seed", range(4))
def test_message_step_matches_loop(seed):
    rng = np.random.default_rng(seed)
    cfg = small_config()
    params = mpnn.init_params(cfg)
    n, d = 5, cfg.hidden_dim
    h = rng.standard_normal((n, d))
    n_edges = rng.integers(0, 10)
    ei = rng.integers(0, n, size=(n_edges, 2))
    ef = rng.standard_normal((n_edges, 8))

    got = mpnn.message_step(h, ei, ef, params).data
    edges = [(int(ei[k, 0]), int(ei[k, 1]), ef[k]) for k in range(n_edges)]
    want = loop_message_step(h, edges, net_arrays(params.edge_net),
                             gru_arrays(params.gru))
    assert np.allclose(got, want, atol=1e-12)


def test_isolated_nodes_get_zero_message():
    cfg = small_config()
    params = mpnn.init_params(cfg)
    h = np.random.default_rng(0).standard_normal((3, cfg.hidden_dim))
    out = mpnn.message_step(h, np.zeros((0, 2)), np.zeros((0, 8)), params).data
    want = loop_message_step(h, [], net_arrays(params.edge_net),
                             gru_arrays(params.gru))
    assert np.allclose(out, want, atol=1e-12)


def test_readouts_match_loops_with_segments():
    rng = np.random.default_rng(2)
    cfg = small_config()
    params = mpnn.init_params(cfg)
    d = cfg.hidden_dim
    h_last = ad.Tensor(rng.standard_normal((7, d)))
    h_first = ad.Tensor(rng.standard_normal((7, d)))
    segs = [0, 0, 1, 1, 1, 2, 2]
    i_l, j_l = net_arrays(params.i_net), net_arrays(params.j_net)

    got = mpnn.readout_gated_sum(h_last, h_first, params, segs, 3).data
    want = loop_readout_gated(h_last.data, h_first.data, i_l, j_l, segs, 3)
    assert np.allclose(got, want, atol=1e-12)

    got = mpnn.readout_global_node(h_last, h_first, [1, 4], params).data
    want = loop_readout_global(h_last.data, h_first.data, [1, 4], i_l, j_l)
    assert np.allclose(got, want, atol=1e-12)

    cfg_cr = small_config(readout="cr")
    params_cr = mpnn.init_params(cfg_cr)
    h_mid = ad.Tensor(rng.standard_normal((7, d)))
    got = mpnn.readout_concat([h_first, h_mid, h_last], params_cr, segs, 3).data
    want = loop_readout_concat(
        [h_first.data, h_mid.data, h_last.data],
        net_arrays(params_cr.i_net), net_arrays(params_cr.j_net), segs, 3)
    assert np.allclose(got, want, atol=1e-12)


def test_readout_global_requires_index():
    params = mpnn.init_params(small_config(readout="gr", strategy="gn"))
    h = ad.Tensor(np.zeros((3, 6)))
    with pytest.raises(ValueError):
        mpnn.readout_global_node(h, h, None, params)


@pytest.mark.parametrize("strategy,readout", [
    ("dg", "gated"), ("fc", "gated"), ("gn", "gated"),
    ("gn", "gr"), ("dg", "cr"), ("gn", "cr"),
])
def test_forward_matches_loop_oracle(strategy, readout):
    cfg = small_config(strategy=strategy, readout=readout)
    params = mpnn.init_params(cfg)
    jg = mg.join(chem.ethanol(), chem.acetyl_bromide(), strategy)
    batch = mpnn.batch_graphs([jg])
    got = float(mpnn.forward_batch(params, cfg, batch).data[0, 0])
    want = loop_forward(jg, params, cfg)
    assert got == pytest.approx(want, abs=1e-10)


def test_batch_matches_single_graph_runs():
    cfg = small_config(strategy="gn", readout="gr")
    params = mpnn.init_params(cfg)
    pairs = [(chem.methanol(), chem.acetyl_chloride()),
             (chem.ethanol(), chem.acetyl_bromide()),
             (chem.propanol(), chem.acetyl_chloride())]
    joined = [mg.join(a, h, "gn") for a, h in pairs]
    batch_out = mpnn.forward_batch(params, cfg, mpnn.batch_graphs(joined)).data
    for k, jg in enumerate(joined):
        single = mpnn.forward_batch(params, cfg, mpnn.batch_graphs([jg])).data
        assert batch_out[k, 0] == pytest.approx(single[0, 0], abs=1e-12)


@pytest.mark.parametrize("strategy", ["dg", "fc", "gn"])
def test_prediction_invariant_under_relabeling(strategy):
    readout = "gr" if strategy == "gn" else "gated"
    cfg = small_config(strategy=strategy, readout=readout)
    params = mpnn.init_params(cfg)
    a, h = chem.propanol(), chem.acetyl_bromide()
    base = mpnn.forward_batch(
        params, cfg, mpnn.batch_graphs([mg.join(a, h, strategy)])).data[0, 0]
    rng = np.random.default_rng(5)
    for _ in range(5):
        jg = mg.join(chem.permute_molecule(a, rng),
                     chem.permute_molecule(h, rng), strategy)
        out = mpnn.forward_batch(params, cfg, mpnn.batch_graphs([jg])).data[0, 0]
        assert out == pytest.approx(base, abs=1e-9)


def test_model_predict_and_denormalize():
    cfg = small_config(strategy="fc")
    model = mpnn.new_model(cfg)
    model.label_mean, model.label_std = 10.0, 2.0

    class Sample:
        alcohol = chem.methanol()
        halide = chem.acetyl_chloride()

    y = model.predict(Sample())
    assert isinstance(y, float)
    assert model.denormalize(y) == pytest.approx(y * 2.0 + 10.0)


def test_forward_gradients_flow_to_all_params():
    cfg = small_config(strategy="gn", readout="cr")
    params = mpnn.init_params(cfg)
    jg = mg.join(chem.methanol(), chem.acetyl_chloride(), "gn")
    out = mpnn.forward_batch(params, cfg, mpnn.batch_graphs([jg]))
    ad.backward(ad.tensor_sum(ad.mul(out, out)))
    for name, t in params.named_tensors():
        assert t.grad is not None, name
        assert np.all(np.isfinite(t.grad)), name


def test_clone_params_is_deep():
    params = mpnn.init_params(small_config())
    clone = mpnn.clone_params(params)
    clone.embed_w.data[0, 0] += 1.0
    assert params.embed_w.data[0, 0] != clone.embed_w.data[0, 0]
