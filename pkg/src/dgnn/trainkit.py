"""Training loop, metrics and experiment drivers.

Models train with Adam on the mean squared error of normalized labels.
Early stopping watches validation RMSE and restores the best checkpoint.
The experiment drivers reproduce the two comparison tables: strategies
against the MLP baseline on a random split, and the normalization/readout
variants on the leave-alcohol-out split.  Metric rows are emitted as CSV
with columns method,split,r2,rmse,sre,mae.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import baseline as bl
from . import dataset as ds
from . import molgraph as mg
from . import mpnn
from .seeds import derive_rng

METRIC_EPS = 1e-8
CSV_HEADER = "method,split,r2,rmse,sre,mae"


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; message carries the epoch."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 50
    seed: int = 0
    stop_at_train_mse: float | None = None
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.patience < 0:
            raise ValueError("lr and patience must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")

    def to_json(self):
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "patience": self.patience, "seed": self.seed,
            "stop_at_train_mse": self.stop_at_train_mse,
            "clip_norm": self.clip_norm,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float
    sre: float
    mae: float

    def row(self, method, split):
        return (f"{method},{split},{self.r2!r},{self.rmse!r},"
                f"{self.sre!r},{self.mae!r}")


def compute_metrics(y_true, y_pred, eps=METRIC_EPS):
    """r2, RMSE, SRE and MAE of predictions against targets.

    SRE is the mean squared relative error with an epsilon guard on the
    target magnitude.  RMSE >= MAE always holds (power-mean inequality) and
    is asserted.
    """
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"bad metric inputs: {y.shape} vs {p.shape}")
    err = p - y
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 0.0:
        raise ValueError("r-squared is undefined for constant targets")
    r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    sre = float(np.mean((err / (np.abs(y) + eps)) ** 2))
    assert rmse + 1e-12 >= mae
    return Metrics(r2=r2, rmse=rmse, sre=sre, mae=mae)


def evaluate(model, manifest, split_name, chunk=64):
    """Metrics on one split, computed in normalized label units."""
    samples = manifest.split_samples(split_name)
    if not samples:
        raise ValueError(f"split {split_name!r} is empty")
    if any(s.label_norm is None for s in samples):
        ds.normalize_labels(manifest)
    y = np.array([s.label_norm for s in samples])
    preds = predict_split(model, samples, chunk=chunk)
    return compute_metrics(y, preds)


def predict_split(model, samples, chunk=64):
    preds = []
    for lo in range(0, len(samples), chunk):
        preds.append(model.predict_batch(samples[lo:lo + chunk]))
    return np.concatenate(preds)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a fixed list of leaf tensors."""

    def __init__(self, tensors, config):
        self.tensors = list(tensors)
        self.lr = config.lr
        self.beta1, self.beta2 = config.beta1, config.beta2
        self.eps = config.eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, t in enumerate(self.tensors):
            if t.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * t.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * t.grad ** 2
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(tensors, max_norm):
    """Scale every gradient down when the global L2 norm exceeds max_norm.

    Recurrent updates occasionally produce gradient spikes that knock Adam
    out of a good basin; capping the global norm keeps those steps bounded
    without changing well-behaved ones.  Returns the pre-clip norm.
    """
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


# ---------------------------------------------------------------------------
# trainees: uniform view of the two model families for the loop below


class _GraphTrainee:
    def __init__(self, model, manifest):
        self.model = model
        if model.config.normalize and model.normalizer is None:
            feats = []
            for s in manifest.split_samples("train"):
                feats.append(mg.featurize(s.alcohol))
                feats.append(mg.featurize(s.halide))
            model.normalizer = mg.Normalizer().fit(feats)
        self.packed = [mpnn.pack_graph(model.joined(s), model.normalizer)
                       for s in manifest.samples]

    def forward(self, indices):
        batch = mpnn.batch_packed([self.packed[i] for i in indices])
        return mpnn.forward_batch(self.model.params, self.model.config, batch)

    def tensors(self):
        return self.model.params.tensors()

    def snapshot(self):
        return mpnn.clone_params(self.model.params)

    def restore(self, snap):
        self.model.params = snap


class _MlpTrainee:
    def __init__(self, model, manifest):
        self.model = model
        self.features = model.features(manifest.samples)

    def forward(self, indices):
        return bl.mlp_forward(self.model.params, self.features[indices])

    def tensors(self):
        return self.model.params.tensors()

    def snapshot(self):
        return bl.clone_mlp_params(self.model.params)

    def restore(self, snap):
        self.model.params = snap


def _trainee_for(model, manifest):
    if isinstance(model, mpnn.Model):
        return _GraphTrainee(model, manifest)
    if isinstance(model, bl.MlpModel):
        return _MlpTrainee(model, manifest)
    raise TypeError(f"unknown model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# training loop


def train(model, manifest, config):
    """Fit the model on the train split; returns (model, per-epoch log).

    Uses MSE on normalized labels.  With a non-empty validation split the
    best-validation-RMSE parameters are restored at the end and training
    stops early after ``patience`` epochs without improvement.
    """
    if any(s.label_norm is None for s in manifest.samples):
        ds.normalize_labels(manifest)
    model.label_mean = manifest.label_mean
    model.label_std = manifest.label_std

    idx_by_split = {name: [i for i, s in enumerate(manifest.samples)
                           if s.split == name]
                    for name in ("train", "val")}
    train_idx = np.array(idx_by_split["train"], dtype=np.intp)
    val_idx = np.array(idx_by_split["val"], dtype=np.intp)
    if train_idx.size == 0:
        raise ValueError("manifest has no training samples")

    trainee = _trainee_for(model, manifest)
    labels = np.array([s.label_norm for s in manifest.samples])
    optimizer = Adam(trainee.tensors(), config)
    rng = derive_rng(config.seed, "shuffle")

    best_val = math.inf
    best_snap = None
    since_best = 0
    log = []

    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(train_idx.size)]
        running = 0.0
        for lo in range(0, perm.size, config.batch_size):
            batch_idx = perm[lo:lo + config.batch_size]
            out = trainee.forward(batch_idx)
            target = ad.Tensor(labels[batch_idx].reshape(-1, 1))
            diff = ad.sub(out, target)
            loss = ad.scale(ad.tensor_sum(ad.mul(diff, diff)),
                            1.0 / batch_idx.size)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            ad.backward(loss)
            if config.clip_norm is not None:
                clip_gradients(optimizer.tensors, config.clip_norm)
            optimizer.step()
            running += value * batch_idx.size
        entry = {"epoch": epoch, "train_mse": running / perm.size}

        if config.stop_at_train_mse is not None:
            preds = _predict_indices(trainee, train_idx)
            exact = float(np.mean((preds - labels[train_idx]) ** 2))
            entry["train_mse_exact"] = exact

        if val_idx.size:
            preds = _predict_indices(trainee, val_idx)
            val = compute_metrics(labels[val_idx], preds)
            entry.update(val_rmse=val.rmse, val_mae=val.mae, val_r2=val.r2)
            if val.rmse < best_val:
                best_val = val.rmse
                best_snap = trainee.snapshot()
                since_best = 0
            else:
                since_best += 1
        log.append(entry)

        if (config.stop_at_train_mse is not None
                and entry["train_mse_exact"] < config.stop_at_train_mse):
            break
        if val_idx.size and config.patience and since_best >= config.patience:
            break

    if best_snap is not None:
        trainee.restore(best_snap)
    return model, log


def _predict_indices(trainee, indices, chunk=64):
    preds = []
    for lo in range(0, indices.size, chunk):
        out = trainee.forward(indices[lo:lo + chunk])
        preds.append(out.data[:, 0].copy())
    return np.concatenate(preds)


def write_epoch_log(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry) + "\n")


# ---------------------------------------------------------------------------
# experiment drivers


EXP_MODEL_DEFAULTS = dict(hidden_dim=16, net_width=64)
# Message passing depth per join strategy.  The fully connected join has
# diameter 2 (any two atoms meet through a cross edge), so two steps reach
# everything and more just adds noise.  The global-node join routes all
# cross-graph traffic through the hub, which needs about twice the depth.
# Disjoint graphs get the same depth as gn so the comparison isolates the
# join topology rather than the step budget.
EXP_STRATEGY_STEPS = {"dg": 4, "fc": 2, "gn": 4}
EXP_TRAIN_DEFAULTS = dict(epochs=1000, batch_size=64, lr=3e-3, patience=250)


def _write_rows(rows, out_csv):
    if out_csv is None:
        return
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")


def _run_methods(methods, manifest, train_config, out_csv, log_dir):
    rows = []
    results = {}
    for name, model in methods:
        model, log = train(model, manifest, train_config)
        metrics = {}
        for split_name in ("train", "val", "test"):
            metrics[split_name] = evaluate(model, manifest, split_name)
            rows.append(metrics[split_name].row(name, split_name))
        results[name] = (model, metrics)
        if log_dir is not None:
            write_epoch_log(log, f"{log_dir}/{name}_epochs.jsonl")
            test_samples = manifest.split_samples("test")
            y = np.array([s.label_norm for s in test_samples])
            preds = predict_split(model, test_samples)
            write_scatter_data(y, preds, f"{log_dir}/{name}_test_scatter.dat")
    _write_rows(rows, out_csv)
    return rows, results


def run_experiment1(manifest, seed=0, out_csv=None, log_dir=None,
                    model_overrides=None, train_overrides=None):
    """Strategy comparison (dg, fc, gn vs MLP) on a random-split manifest."""
    model_kw = dict(EXP_MODEL_DEFAULTS, **(model_overrides or {}))
    train_kw = dict(EXP_TRAIN_DEFAULTS, **(train_overrides or {}))
    methods = []
    for strategy in mg.STRATEGIES:
        kw = dict(model_kw)
        kw.setdefault("steps", EXP_STRATEGY_STEPS[strategy])
        cfg = mpnn.ModelConfig(strategy=strategy, readout="gated",
                               seed=seed, **kw)
        methods.append((f"mpnn_{strategy}", mpnn.new_model(cfg)))
    methods.append(("mlp", bl.new_mlp_model(bl.MlpConfig(seed=seed))))
    train_config = TrainConfig(seed=seed, **train_kw)
    if log_dir is not None:
        write_label_histogram(manifest, f"{log_dir}/labels_hist.dat")
    return _run_methods(methods, manifest, train_config, out_csv, log_dir)


def run_experiment2(manifest, seed=0, out_csv=None, log_dir=None,
                    model_overrides=None, train_overrides=None):
    """GN variants (plain, +Norm, +Norm CR, +Norm GR) plus the MLP baseline
    on a leave-alcohol-out manifest."""
    model_kw = dict(EXP_MODEL_DEFAULTS, **(model_overrides or {}))
    model_kw.setdefault("steps", EXP_STRATEGY_STEPS["gn"])
    train_kw = dict(EXP_TRAIN_DEFAULTS, **(train_overrides or {}))
    variants = [
        ("mpnn_gn", "gated", False),
        ("mpnn_gn_norm", "gated", True),
        ("mpnn_gn_norm_cr", "cr", True),
        ("mpnn_gn_norm_gr", "gr", True),
    ]
    methods = []
    for name, readout, normalize in variants:
        cfg = mpnn.ModelConfig(strategy="gn", readout=readout,
                               normalize=normalize, seed=seed, **model_kw)
        methods.append((name, mpnn.new_model(cfg)))
    methods.append(("mlp", bl.new_mlp_model(bl.MlpConfig(seed=seed))))
    train_config = TrainConfig(seed=seed, **train_kw)
    return _run_methods(methods, manifest, train_config, out_csv, log_dir)


# ---------------------------------------------------------------------------
# outlier detection


def detect_outliers(manifest, model_config, train_config, threshold_k=6.0,
                    max_iters=3, min_residual=1.0):
    """Iteratively remove samples with large absolute residuals.

    Every iteration trains a fresh model on all remaining samples, computes
    absolute residuals (raw label units), and flags residuals above
    median + threshold_k * MAD.  The threshold never drops below
    ``min_residual`` train-label standard deviations: without that floor the
    MAD shrinks every round as the pool gets cleaner and the loop starts
    trimming ordinary tail points.  Stops when nothing new is flagged or
    after ``max_iters`` rounds.  Returns (clean manifest, outlier records).
    """
    active = [replace(s, extra=dict(s.extra)) for s in manifest.samples]
    outliers = []
    for iteration in range(max_iters):
        work = ds.DatasetManifest(
            samples=[replace(s, split="train", extra=dict(s.extra))
                     for s in active])
        ds.normalize_labels(work)
        model = mpnn.new_model(replace(model_config,
                                       seed=model_config.seed + iteration))
        model, _ = train(model, work, train_config)
        preds = predict_split(model, work.samples)
        y = np.array([s.label_norm for s in work.samples])
        residuals = np.abs(preds - y) * work.label_std
        med = float(np.median(residuals))
        mad = float(np.median(np.abs(residuals - med)))
        threshold = max(med + threshold_k * mad,
                        min_residual * work.label_std)
        flagged = residuals > threshold
        if flagged.all():
            raise RuntimeError(
                "outlier threshold flagged every sample; aborting")
        if not flagged.any():
            break
        for keep, sample, resid in zip(~flagged, active, residuals):
            if not keep:
                outliers.append({
                    "sample_id": sample.sample_id,
                    "residual": float(resid),
                    "iteration": iteration,
                })
        active = [s for keep, s in zip(~flagged, active) if keep]
    clean = ds.DatasetManifest(samples=active, protocol=manifest.protocol)
    return clean, outliers


# ---------------------------------------------------------------------------
# gnuplot-style data files


def write_scatter_data(y_true, y_pred, path):
    """Two-column target/prediction rows, plottable with gnuplot."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# y_true y_pred\n")
        for y, p in zip(y_true, y_pred):
            fh.write(f"{float(y)!r} {float(p)!r}\n")


def write_label_histogram(manifest, path, bins=40):
    values = np.array([s.label for s in manifest.samples])
    counts, edges = np.histogram(values, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# bin_center count\n")
        for c, k in zip(centers, counts):
            fh.write(f"{float(c)!r} {int(k)}\n")
