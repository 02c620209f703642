"""Message-passing network over joined reactant graphs.

One message-passing step transforms each directed edge's feature vector into
a d x d matrix through a three-layer edge network, multiplies it onto the
source node state, sums the results per destination node and feeds the sum
into a GRU update of the node state.  Weights are shared across steps.

Three readouts produce the graph-level vector:

* ``gated``: sum over nodes of sigmoid(i([h_T, h_0])) * j(h_T),
* ``gr``: the same gate evaluated only at the hub node (``gn`` joining),
* ``cr``: gate on the concatenation of all per-step node states.

For the ``dg`` strategy each input graph is pooled separately and the two
vectors are concatenated before the linear output head.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import molgraph
from .seeds import derive_rng

READOUTS = ("gated", "gr", "cr")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    steps: int = 3
    readout: str = "gated"
    strategy: str = "gn"
    normalize: bool = False
    net_width: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.steps < 1:
            raise ValueError("hidden_dim and steps must be >= 1")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.strategy not in molgraph.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.readout == "gr" and self.strategy != "gn":
            raise ValueError("the hub-node readout needs the gn joining strategy")

    def to_json(self):
        return {
            "hidden_dim": self.hidden_dim,
            "steps": self.steps,
            "readout": self.readout,
            "strategy": self.strategy,
            "normalize": self.normalize,
            "net_width": self.net_width,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class MpnnParams:
    embed_w: ad.Tensor
    embed_b: ad.Tensor
    edge_net: list
    gru: ad.GruParams
    i_net: list
    j_net: list
    head_w: ad.Tensor
    head_b: ad.Tensor

    def named_tensors(self):
        out = [("embed.w", self.embed_w), ("embed.b", self.embed_b)]
        for k, (w, b) in enumerate(self.edge_net):
            out += [(f"edge.{k}.w", w), (f"edge.{k}.b", b)]
        g = self.gru
        out += [
            ("gru.w_z", g.w_z), ("gru.u_z", g.u_z), ("gru.b_z", g.b_z),
            ("gru.w_r", g.w_r), ("gru.u_r", g.u_r), ("gru.b_r", g.b_r),
            ("gru.w_h", g.w_h), ("gru.u_h", g.u_h), ("gru.b_h", g.b_h),
        ]
        for name, net in (("i", self.i_net), ("j", self.j_net)):
            for k, (w, b) in enumerate(net):
                out += [(f"{name}.{k}.w", w), (f"{name}.{k}.b", b)]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_net(rng, widths):
    """Stack of dense layers; hidden layers get ReLU at application time."""
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = ad.Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True)
        b = ad.Tensor(np.zeros(fan_out), requires_grad=True)
        layers.append((w, b))
    return layers


def apply_net(x, layers, final_activation="none"):
    for w, b in layers[:-1]:
        x = ad.dense(x, w, b, "relu")
    w, b = layers[-1]
    return ad.dense(x, w, b, final_activation)


def _init_gru(rng, d):
    def mat():
        return ad.Tensor(_glorot(rng, d, d), requires_grad=True)

    def vec():
        return ad.Tensor(np.zeros(d), requires_grad=True)

    return ad.GruParams(
        w_z=mat(), u_z=mat(), b_z=vec(),
        w_r=mat(), u_r=mat(), b_r=vec(),
        w_h=mat(), u_h=mat(), b_h=vec(),
    )


def i_net_input_dim(config):
    d = config.hidden_dim
    return (config.steps + 1) * d if config.readout == "cr" else 2 * d


def head_input_dim(config):
    return 2 * config.hidden_dim if config.strategy == "dg" else config.hidden_dim


def init_params(config, node_dim=molgraph.NODE_FEATURE_DIM,
                edge_dim=molgraph.EDGE_FEATURE_DIM):
    """Seeded parameter initialization; Glorot weights, zero biases."""
    rng = derive_rng(config.seed, "init", config.strategy, config.readout)
    d, w = config.hidden_dim, config.net_width
    embed = init_net(rng, [node_dim, d])[0]
    edge_net = init_net(rng, [edge_dim, w, w, d * d])
    gru = _init_gru(rng, d)
    i_net = init_net(rng, [i_net_input_dim(config), w, w, d])
    j_net = init_net(rng, [d, w, w, d])
    head = init_net(rng, [head_input_dim(config), 1])[0]
    return MpnnParams(
        embed_w=embed[0], embed_b=embed[1],
        edge_net=edge_net, gru=gru, i_net=i_net, j_net=j_net,
        head_w=head[0], head_b=head[1],
    )


# ---------------------------------------------------------------------------
# forward pieces


def embed_initial(features, params):
    """Project raw node features to model width (single linear layer)."""
    return ad.dense(features, params.embed_w, params.embed_b, "none")


def _unique_edge_rows(feats):
    """(unique rows, inverse) for a feature matrix, like np.unique(axis=0).

    The generic axis-0 unique lexsorts full rows, which shows up in
    profiles.  Our rows are indicator columns plus one trailing distance,
    so they can be keyed by a packed integer and deduplicated with scalar
    unique calls instead.  Anything else falls back to the generic path.
    """
    head = feats[:, :-1]
    if feats.shape[0] < 2 or not ((head == 0.0) | (head == 1.0)).all():
        return np.unique(feats, axis=0, return_inverse=True)
    code = head.astype(np.int64) @ (1 << np.arange(head.shape[1], dtype=np.int64))
    dist, dist_id = np.unique(feats[:, -1], return_inverse=True)
    key = code * np.int64(dist.shape[0]) + dist_id
    _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    return feats[first], inverse.reshape(-1)


def edge_matrices(edge_feats, params, d):
    """Edge network output reshaped row-major to one d x d matrix per edge.

    Feature rows are deduplicated before the network runs: batches contain
    few distinct rows, and recomputing identical rows would dominate
    runtime.  The gather reproduces the per-edge result bit for bit.
    """
    feats = np.asarray(edge_feats, dtype=np.float64)
    uniq, inverse = _unique_edge_rows(feats)
    if uniq.shape[0] < feats.shape[0]:
        flat = ad.gather_rows(apply_net(ad.as_tensor(uniq), params.edge_net),
                              inverse)
    else:
        flat = apply_net(ad.as_tensor(feats), params.edge_net)
    return ad.reshape(flat, (feats.shape[0], d, d))


@dataclass
class EdgePlan:
    """Message pass precomputed per batch: edges grouped by feature row.

    Identical feature rows share one edge matrix (the matrices do not
    change across steps), so the per-step work is one (nodes x d) matmul
    per distinct row instead of a batched per-edge product.
    """

    mats: list
    src: list
    dst: list


def edge_plan(edge_feats, edge_index, params, d):
    """Group edges by distinct feature row and transform each row once."""
    feats = np.asarray(edge_feats, dtype=np.float64)
    if feats.shape[0] == 0:
        return None
    uniq, inverse = _unique_edge_rows(feats)
    flat = apply_net(ad.as_tensor(uniq), params.edge_net)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(uniq.shape[0] + 1))
    mats, src, dst = [], [], []
    for u in range(uniq.shape[0]):
        ids = order[bounds[u]:bounds[u + 1]]
        mats.append(ad.reshape(ad.gather_rows(flat, np.array([u])), (d, d)))
        src.append(edge_index[ids, 0])
        dst.append(edge_index[ids, 1])
    return EdgePlan(mats=mats, src=src, dst=dst)


def _propagate(h, plan, gru):
    """One message pass given a precomputed edge plan.

    Messages into node v sum A_e @ h_src over incoming edges.  Edges with
    the same matrix commute with the sum, so each group pools its source
    states per destination first and applies the matrix to the pooled
    block: segment_sum(h[src], dst) @ A^T.
    """
    n, d = h.shape
    messages = None
    if plan is not None:
        for mat, src, dst in zip(plan.mats, plan.src, plan.dst):
            pooled = ad.segment_sum(ad.gather_rows(h, src), dst, n)
            part = ad.matmul(pooled, ad.transpose(mat))
            messages = part if messages is None else ad.add(messages, part)
    if messages is None:
        messages = ad.Tensor(np.zeros((n, d)))
    return ad.gru_cell(h, messages, gru)


def message_step(h, edge_index, edge_feats, params):
    """Aggregate transformed neighbor states into each node, then GRU-update.

    ``edge_index`` rows are (src, dst): the message flows src -> dst.
    Isolated nodes receive a zero message.
    """
    h = ad.as_tensor(h)
    d = h.shape[1]
    edge_index = np.asarray(edge_index, dtype=np.intp).reshape(-1, 2)
    if edge_index.shape[0] and (edge_index.min() < 0 or edge_index.max() >= h.shape[0]):
        raise IndexError("edge index out of range")
    plan = edge_plan(edge_feats, edge_index, params, d)
    return _propagate(h, plan, params.gru)


def _segments_or_default(tensor, segments, num_segments):
    if segments is None:
        return np.zeros(tensor.shape[0], dtype=np.intp), 1
    return np.asarray(segments, dtype=np.intp), int(num_segments)


def readout_gated_sum(h_last, h_first, params, segments=None, num_segments=1):
    """Per-graph sum of sigmoid(i([h_T, h_0])) * j(h_T)."""
    seg, num = _segments_or_default(h_last, segments, num_segments)
    gate = ad.sigmoid(apply_net(ad.concat([h_last, h_first], axis=1), params.i_net))
    gated = ad.mul(gate, apply_net(h_last, params.j_net))
    return ad.segment_sum(gated, seg, num)


def readout_global_node(h_last, h_first, global_index, params):
    """The gated readout evaluated only at the hub node(s), no sum."""
    if global_index is None:
        raise ValueError("hub-node readout called without a global node")
    idx = np.atleast_1d(np.asarray(global_index, dtype=np.intp))
    hg_last = ad.gather_rows(h_last, idx)
    hg_first = ad.gather_rows(h_first, idx)
    gate = ad.sigmoid(apply_net(ad.concat([hg_last, hg_first], axis=1), params.i_net))
    return ad.mul(gate, apply_net(hg_last, params.j_net))


def readout_concat(h_steps, params, segments=None, num_segments=1):
    """Gate on the concatenation of every per-step node state."""
    h_last = h_steps[-1]
    seg, num = _segments_or_default(h_last, segments, num_segments)
    gate = ad.sigmoid(apply_net(ad.concat(list(h_steps), axis=1), params.i_net))
    gated = ad.mul(gate, apply_net(h_last, params.j_net))
    return ad.segment_sum(gated, seg, num)


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    """Several joined graphs packed into one block-diagonal graph."""

    features: np.ndarray
    edge_index: np.ndarray
    edge_feats: np.ndarray
    readout_segments: np.ndarray
    num_graphs: int
    num_samples: int
    global_indices: np.ndarray | None


@dataclass
class PackedGraph:
    """One joined graph flattened to arrays so batching is concatenation.

    Extracting edge arrays from graph objects costs a Python loop per
    edge; packing once lets every epoch reuse the arrays.
    """

    features: np.ndarray
    edge_index: np.ndarray
    edge_feats: np.ndarray
    local_segments: np.ndarray
    segments_per_sample: int
    num_nodes: int
    global_index: int | None


def pack_graph(jg, normalizer=None):
    per_sample = 2 if jg.strategy == "dg" else 1
    f = normalizer.apply(jg.node_features) if normalizer else jg.node_features
    if per_sample == 2:
        local = jg.node_segments()
    else:
        local = np.zeros(jg.num_nodes, dtype=np.intp)
    return PackedGraph(
        features=f,
        edge_index=jg.edge_index(),
        edge_feats=jg.edge_features(),
        local_segments=local,
        segments_per_sample=per_sample,
        num_nodes=jg.num_nodes,
        global_index=jg.global_node_index,
    )


def batch_packed(packed_list):
    """Concatenate packed graphs; readout segments follow sample order.

    ``dg`` samples contribute two pooling segments each (graph 1 then
    graph 2); the other strategies contribute one.
    """
    feats, eidx, efeat, segments, globals_ = [], [], [], [], []
    offset = 0
    per_sample = packed_list[0].segments_per_sample
    for k, pg in enumerate(packed_list):
        feats.append(pg.features)
        if pg.edge_index.shape[0]:
            eidx.append(pg.edge_index + offset)
            efeat.append(pg.edge_feats)
        segments.append(pg.local_segments + per_sample * k)
        if pg.global_index is not None:
            globals_.append(offset + pg.global_index)
        offset += pg.num_nodes
    return GraphBatch(
        features=np.vstack(feats),
        edge_index=(np.vstack(eidx) if eidx else np.zeros((0, 2), dtype=np.intp)),
        edge_feats=(np.vstack(efeat)
                    if efeat else np.zeros((0, molgraph.EDGE_FEATURE_DIM))),
        readout_segments=np.concatenate(segments),
        num_graphs=per_sample * len(packed_list),
        num_samples=len(packed_list),
        global_indices=(np.array(globals_, dtype=np.intp) if globals_ else None),
    )


def batch_graphs(joined_list, normalizer=None):
    """Pack and concatenate joined graphs in one call."""
    return batch_packed([pack_graph(jg, normalizer) for jg in joined_list])


def forward_batch(params, config, batch, features=None):
    """Predictions (num_samples x 1) for a packed batch.

    ``features`` may be passed as a Tensor to differentiate with respect to
    the raw node features; by default the batch's array is used as constant.
    """
    x = features if features is not None else ad.Tensor(batch.features)
    h0 = embed_initial(x, params)
    d = config.hidden_dim
    plan = edge_plan(batch.edge_feats, batch.edge_index, params, d)
    h = h0
    steps = [h0]
    for _ in range(config.steps):
        h = _propagate(h, plan, params.gru)
        steps.append(h)

    if config.readout == "gated":
        pooled = readout_gated_sum(h, h0, params,
                                   batch.readout_segments, batch.num_graphs)
    elif config.readout == "cr":
        pooled = readout_concat(steps, params,
                                batch.readout_segments, batch.num_graphs)
    else:
        if batch.global_indices is None:
            raise ValueError("hub-node readout needs gn-joined graphs")
        pooled = readout_global_node(h, h0, batch.global_indices, params)

    if config.strategy == "dg":
        pooled = ad.reshape(pooled, (batch.num_samples, 2 * d))
    return ad.dense(pooled, params.head_w, params.head_b, "none")


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class Model:
    """Trained network plus the preprocessing state needed for inference."""

    config: ModelConfig
    params: MpnnParams
    normalizer: molgraph.Normalizer | None
    label_mean: float = 0.0
    label_std: float = 1.0

    def joined(self, sample):
        return molgraph.join(sample.alcohol, sample.halide, self.config.strategy)

    def predict_batch(self, samples):
        """Normalized-unit predictions for a list of reaction samples."""
        joined = [self.joined(s) for s in samples]
        batch = batch_graphs(joined, self.normalizer)
        out = forward_batch(self.params, self.config, batch)
        return out.data[:, 0].copy()

    def predict(self, sample):
        """Scalar prediction in normalized label units."""
        return float(self.predict_batch([sample])[0])

    def denormalize(self, y_norm):
        return y_norm * self.label_std + self.label_mean


def new_model(config, normalizer=None):
    return Model(config=config, params=init_params(config), normalizer=normalizer)


def clone_params(params):
    """Deep copy of all parameter arrays (used for best-checkpoint keeping)."""
    return replace(
        params,
        embed_w=_copy_t(params.embed_w), embed_b=_copy_t(params.embed_b),
        edge_net=[( _copy_t(w), _copy_t(b)) for w, b in params.edge_net],
        gru=ad.GruParams(*[_copy_t(t) for t in params.gru.tensors()]),
        i_net=[(_copy_t(w), _copy_t(b)) for w, b in params.i_net],
        j_net=[(_copy_t(w), _copy_t(b)) for w, b in params.j_net],
        head_w=_copy_t(params.head_w), head_b=_copy_t(params.head_b),
    )


def _copy_t(t):
    return ad.Tensor(t.data.copy(), requires_grad=t.requires_grad)
