"""Training/evaluation orchestration: dataset splits, the optimization loop
with early stopping, all reported metrics, congestion classification, and
the topology-transfer protocol (mask surgery + warm-start retraining with
spectral diagnostics attached).
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn, spectral
from .autodiff import Tensor
from .errors import (
    DimensionMismatch, Diverged, EmptyTestSet, NoBindingEvents,
)
from .grid_model import apply_outage

DC_FEATURE_IDX = (0, 1, 4, 5)    # p_max, p_min, cost_a, cost_b
AC_FEATURE_IDX = (0, 1, 2, 3, 4, 5)


@dataclass
class TrainConfig:
    model_kind: str = "gnn"              # gnn | fcnn
    widths: tuple = (4, 5, 10, 10, 5, 5)
    loss: nn.LossConfig = field(default_factory=nn.LossConfig)
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 60
    patience: int = 10
    min_delta: float = 1e-4
    split_fraction: float = 0.8          # train share of the dataset
    val_fraction: float = 0.1            # validation share carved from train
    seed: int = 0

    def validate(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.model_kind not in ("gnn", "fcnn"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        return self


@dataclass
class EvalReport:
    nmse_pi: float
    std_pi: float
    nmse_g: float
    feasibility_violation: float
    nmse_v: float = None
    std_v: float = None
    epochs: int = 0
    n_test: int = 0
    train_time_s: float = field(default=0.0, compare=False)

    def to_dict(self, include_timing=False):
        d = asdict(self)
        if not include_timing:
            d.pop("train_time_s")
        return d


def _splits(n, config):
    """Deterministic contiguous train/val/test index ranges."""
    n_train_full = int(round(n * config.split_fraction))
    n_val = int(round(n_train_full * config.val_fraction))
    train = np.arange(0, n_train_full - n_val)
    val = np.arange(n_train_full - n_val, n_train_full)
    test = np.arange(n_train_full, n)
    return train, val, test


def _feature_channels(dataset, widths):
    d0 = widths[0]
    names = dataset.header["feature_names"]
    if d0 == 4:
        idx = DC_FEATURE_IDX
    elif d0 == len(names):
        idx = tuple(range(len(names)))
    else:
        raise DimensionMismatch(
            f"first width {d0} matches neither the dc feature set (4) nor "
            f"the full feature set ({len(names)})")
    return np.asarray(idx, dtype=int)


def _targets(dataset, with_v):
    sl = dataset.label_slices()
    n = dataset.header["n_buses"]
    pi = dataset.labels[:, sl["pi"]]
    chans = [pi]
    if with_v:
        if "v" not in sl:
            raise DimensionMismatch("voltage channel requested but absent from dataset")
        chans.append(dataset.labels[:, sl["v"]])
    return np.stack(chans, axis=2)       # (B, N, C)


def _chain_inputs(features):
    """Raw per-sample cost/limit arrays for the latent chain."""
    return (features[:, :, 4], features[:, :, 5],
            features[:, :, 1], features[:, :, 0])   # a, b, p_min, p_max


def _fr_penalty_for_batch(pred_phys, feats_raw, grid, cfg):
    a, b, p_min, p_max = _chain_inputs(feats_raw)
    if cfg.fr_mode == "dc":
        pi_hat = _channel(pred_phys, 0)
        _, f_hat = nn.latent_chain_dc(pi_hat, grid, a, b, p_min, p_max,
                                      soft=True, sharpness=cfg.sigmoid_sharpness)
        return nn.fr_penalty(f_hat, grid.rate_a, cfg.active_lines,
                             smooth=cfg.smooth_hinge,
                             sharpness=cfg.sigmoid_sharpness)
    if cfg.fr_mode == "ac":
        pi_hat = _channel(pred_phys, 0)
        v_hat = _channel(pred_phys, 1)
        _, _, s_from, s_to = nn.latent_chain_ac(
            pi_hat, v_hat, grid, a, b, p_min, p_max,
            soft=True, sharpness=cfg.sigmoid_sharpness)
        kw = dict(active_lines=cfg.active_lines, smooth=cfg.smooth_hinge,
                  sharpness=cfg.sigmoid_sharpness, two_sided=False)
        return nn.fr_penalty(s_from, grid.rate_a, **kw) + \
            nn.fr_penalty(s_to, grid.rate_a, **kw)
    return None


def _channel(pred, c):
    return nn.select_channel(pred, c)


def _build_model(config, grid, out_channels):
    if config.model_kind == "gnn":
        return nn.GnnModel.for_grid(grid, config.widths, out_channels,
                                    seed=config.seed)
    return nn.FcnnModel(grid.n_buses, config.widths, out_channels,
                        seed=config.seed)


def _batch_loss(model, feats_raw, targets_std, p_star, grid, config):
    x_std = Tensor(model.norm.x(feats_raw[:, :, model._feat_idx]
                                if hasattr(model, "_feat_idx") else feats_raw))
    pred = model.forward(x_std)
    penalty = None
    pred_phys = None
    if config.loss.gamma_fr > 0 and config.loss.fr_mode != "none":
        pred_phys = model.norm.y_inv_t(pred)
        penalty = _fr_penalty_for_batch(pred_phys, feats_raw, grid, config.loss)
    loss = nn.composite_loss(pred, Tensor(targets_std), config.loss,
                             chain_penalty=penalty)
    if config.loss.gamma_p > 0 and p_star is not None:
        a, b, p_min, p_max = _chain_inputs(feats_raw)
        if pred_phys is None:
            pred_phys = model.norm.y_inv_t(pred)
        p_hat = nn.soft_projection(_channel(pred_phys, 0), a, b, p_min, p_max,
                                   config.loss.sigmoid_sharpness)
        loss = loss + nn.injection_error(p_hat, p_star) * config.loss.gamma_p
    return loss, pred


def train(dataset, grid, config, warm_model=None, optimizer_state=None):
    """Fit a model on the train split; return (model, test EvalReport).

    Deterministic for a fixed config seed. Early stopping monitors the
    composite loss on a validation slice carved out of the training split;
    the best-validation parameters (including the warm start itself, when
    one is given) are restored before evaluation.
    """
    config.validate()
    if dataset.header["n_buses"] != grid.n_buses:
        raise DimensionMismatch("dataset and grid bus counts differ")
    if dataset.header["n_lines"] != grid.n_lines:
        raise DimensionMismatch("dataset and grid line counts differ")
    t0 = time.perf_counter()
    feat_idx = _feature_channels(dataset, config.widths)
    with_v = config.loss.gamma_v > 0
    targets = _targets(dataset, with_v)
    tr, va, te = _splits(dataset.n_samples, config)
    if len(te) == 0 or len(tr) == 0:
        raise EmptyTestSet("dataset too small for the requested split")

    feats_all = dataset.features
    out_channels = targets.shape[2]
    if warm_model is None:
        model = _build_model(config, grid, out_channels)
        model.norm = nn.Normalizer.fit(feats_all[tr][:, :, feat_idx], targets[tr])
    else:
        model = warm_model
        if model.n_nodes != grid.n_buses:
            raise DimensionMismatch("warm-start model does not match the grid")
    model._feat_idx = feat_idx

    params = model.parameters()
    opt = nn.Adam(params, lr=config.lr, beta1=config.beta1,
                  beta2=config.beta2, eps=config.eps)
    if optimizer_state is not None:
        opt.load_snapshot(optimizer_state)

    targets_std = model.norm.y(targets)
    sl = dataset.label_slices()
    p_star_all = dataset.labels[:, sl["p"]] if "p" in sl else None

    def p_star_of(sel):
        return p_star_all[sel] if p_star_all is not None else None

    def split_loss(idx):
        total, count = 0.0, 0
        for s in range(0, len(idx), config.batch_size):
            sel = idx[s:s + config.batch_size]
            loss, _ = _batch_loss(model, feats_all[sel], targets_std[sel],
                                  p_star_of(sel), grid, config)
            total += loss.data.item() * len(sel)
            count += len(sel)
        return total / max(count, 1)

    best_val = split_loss(va) if len(va) else np.inf
    best_state = [p.data.copy() for p in params]
    best_epoch = 0
    stall = 0
    epochs_run = 0
    for epoch in range(config.max_epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(tr)
        for s in range(0, len(order), config.batch_size):
            sel = order[s:s + config.batch_size]
            opt.zero_grad()
            loss, _ = _batch_loss(model, feats_all[sel], targets_std[sel],
                                  p_star_of(sel), grid, config)
            if not np.isfinite(loss.data):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            model.apply_mask()
        epochs_run = epoch + 1
        if len(va):
            v = split_loss(va)
            if v < best_val - config.min_delta:
                best_val = v
                best_state = [p.data.copy() for p in params]
                best_epoch = epochs_run
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
        else:
            best_state = [p.data.copy() for p in params]
            best_epoch = epochs_run
    for p, saved in zip(params, best_state):
        p.data[...] = saved
    model.apply_mask()

    report = evaluate(model, dataset, grid, indices=te)
    report.epochs = best_epoch
    report.train_time_s = time.perf_counter() - t0
    return model, report


def evaluate(model, dataset, grid, indices=None):
    """Test-split metrics: normalized errors, dispatch error, flow violations.

    Per-sample normalized squared error ||y_hat - y||^2 / ||y||^2 is averaged
    over samples (std is the spread of the same quantity); dispatch error
    uses the hard-projected injections on flexible nodes; the violation rate
    is the per-line relative overload averaged over lines and samples.
    """
    if dataset.header["n_buses"] != grid.n_buses:
        raise DimensionMismatch("dataset and grid bus counts differ")
    idx = np.arange(dataset.n_samples) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise EmptyTestSet("no samples to evaluate")
    feat_idx = getattr(model, "_feat_idx", None)
    if feat_idx is None:
        feat_idx = _feature_channels(dataset, model.widths)
    feats = dataset.features[idx]
    with_v = model.out_channels >= 2
    targets = _targets(dataset, with_v)[idx]
    pred = model.forward(Tensor(model.norm.x(feats[:, :, feat_idx])))
    pred_phys = model.norm.y_inv_t(pred).data     # (B, N, C)

    def nmse_stats(yh, y):
        num = ((yh - y) ** 2).sum(axis=1)
        den = (y ** 2).sum(axis=1)
        den = np.where(den < 1e-30, 1.0, den)
        ratio = num / den
        return float(ratio.mean()), float(ratio.std())

    nmse_pi, std_pi = nmse_stats(pred_phys[:, :, 0], targets[:, :, 0])
    nmse_v = std_v = None
    if with_v:
        nmse_v, std_v = nmse_stats(pred_phys[:, :, 1], targets[:, :, 1])

    a, b, p_min, p_max = _chain_inputs(feats)
    p_hat = nn.hard_projection(Tensor(pred_phys[:, :, 0]), a, b, p_min, p_max).data
    sl = dataset.label_slices()
    p_star = dataset.labels[idx][:, sl["p"]]
    flex = (p_max - p_min) > nn.FIXED_NODE_TOL
    num = (((p_hat - p_star) * flex) ** 2).sum(axis=1)
    den = ((p_star * flex) ** 2).sum(axis=1)
    den = np.where(den < 1e-30, 1.0, den)
    nmse_g = float((num / den).mean())

    f_hat = p_hat @ grid.S.T
    over = np.maximum(np.abs(f_hat) - grid.rate_a, 0.0) / grid.rate_a
    violation = float(over.sum(axis=1).mean() / grid.n_lines)

    return EvalReport(nmse_pi=nmse_pi, std_pi=std_pi, nmse_g=nmse_g,
                      feasibility_violation=violation, nmse_v=nmse_v,
                      std_v=std_v, n_test=int(len(idx)))


# ---------------------------------------------------------------------------
# Congestion classification
# ---------------------------------------------------------------------------

@dataclass
class CongestionReport:
    active_lines: tuple
    per_line: dict                  # line -> {recall, precision, f1} or None
    recall: float                   # macro average over defined lines
    f1: float
    epochs: int = 0
    n_test: int = 0
    train_time_s: float = field(default=0.0, compare=False)


def congestion_classify(dataset, grid, config, top_k=10):
    """Train a GNN line-binding classifier on the top-k congested lines.

    Active lines are ranked by empirical binding frequency on the training
    split; a line with no binding events cannot be classified and raising
    keeps silent degenerate labels out of the reported averages.
    """
    config.validate()
    t0 = time.perf_counter()
    sl = dataset.label_slices()
    if "binding" not in sl:
        raise DimensionMismatch("dataset has no binding flags")
    tr, va, te = _splits(dataset.n_samples, config)
    flags = dataset.labels[:, sl["binding"]]
    freq = flags[tr].mean(axis=0)
    ranked = np.argsort(freq)[::-1][:top_k]
    active = tuple(int(e) for e in ranked if freq[e] > 0)
    if not active:
        raise NoBindingEvents("no line ever binds in the training split")

    feat_idx = _feature_channels(dataset, config.widths)
    feats_all = dataset.features
    y = flags[:, list(active)]
    pos_rate = np.clip(freq[list(active)], 1e-3, 1.0)
    pos_weight = np.clip((1.0 - pos_rate) / pos_rate, 1.0, 50.0)

    model = nn.GnnClassifier.for_grid(grid, config.widths, len(active),
                                      seed=config.seed)
    model.norm = nn.Normalizer.fit(feats_all[tr][:, :, feat_idx],
                                   np.zeros((1, 1, 1)))
    model._feat_idx = feat_idx
    model.active_lines = active
    params = model.parameters()
    opt = nn.Adam(params, lr=config.lr, beta1=config.beta1,
                  beta2=config.beta2, eps=config.eps)

    def split_loss(idx):
        total, count = 0.0, 0
        for s in range(0, len(idx), config.batch_size):
            sel = idx[s:s + config.batch_size]
            logits = model.forward(Tensor(model.norm.x(feats_all[sel][:, :, feat_idx])))
            loss = nn.bce_with_logits(logits, y[sel], pos_weight)
            total += loss.data.item() * len(sel)
            count += len(sel)
        return total / max(count, 1)

    best_val = split_loss(va) if len(va) else np.inf
    best_state = [p.data.copy() for p in params]
    stall, epochs_run, best_epoch = 0, 0, 0
    for epoch in range(config.max_epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(tr)
        for s in range(0, len(order), config.batch_size):
            sel = order[s:s + config.batch_size]
            opt.zero_grad()
            logits = model.forward(Tensor(model.norm.x(feats_all[sel][:, :, feat_idx])))
            loss = nn.bce_with_logits(logits, y[sel], pos_weight)
            if not np.isfinite(loss.data):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            model.apply_mask()
        epochs_run = epoch + 1
        if len(va):
            v = split_loss(va)
            if v < best_val - config.min_delta:
                best_val, best_state, best_epoch = v, [p.data.copy() for p in params], epochs_run
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
    for p, saved in zip(params, best_state):
        p.data[...] = saved
    model.apply_mask()

    logits = model.forward(Tensor(model.norm.x(feats_all[te][:, :, feat_idx]))).data
    pred = 1.0 / (1.0 + np.exp(-logits)) > 0.5
    truth = y[te] > 0.5
    per_line = {}
    recalls, f1s = [], []
    for j, e in enumerate(active):
        tp = int(np.sum(pred[:, j] & truth[:, j]))
        fn = int(np.sum(~pred[:, j] & truth[:, j]))
        fp = int(np.sum(pred[:, j] & ~truth[:, j]))
        if tp + fn == 0:
            per_line[e] = None      # no positive events in the test split
            continue
        recall = tp / (tp + fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        f1 = (2 * recall * precision / (recall + precision)
              if recall + precision else 0.0)
        per_line[e] = {"recall": recall, "precision": precision, "f1": f1}
        recalls.append(recall)
        f1s.append(f1)
    return model, CongestionReport(
        active_lines=active, per_line=per_line,
        recall=float(np.mean(recalls)) if recalls else 0.0,
        f1=float(np.mean(f1s)) if f1s else 0.0,
        epochs=best_epoch, n_test=int(len(te)),
        train_time_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Topology transfer
# ---------------------------------------------------------------------------

@dataclass
class TransferReport:
    scenario: str
    outaged_lines: tuple
    pre: EvalReport                 # after mask surgery, before retraining
    post: EvalReport                # after warm-start retraining
    retrain_epochs: int
    subspace_distance_fro: float
    subspace_distance_2: float
    dk_bounds: dict                 # per outaged line: {fro, l2} or "bridge"
    delta_h: float
    subspace_dim: int


def mask_surgery(model, post_grid):
    """Zero the graph-filter entries of outaged adjacencies in place."""
    surg = copy.deepcopy(model)
    surg.mask = post_grid.mask.copy()
    surg.apply_mask()
    return surg


def filter_perturbation(model_a, model_b):
    """Mean relative spectral-norm change of the feature filters H_t."""
    if len(model_a.layers) != len(model_b.layers):
        raise DimensionMismatch("models have different layer counts")
    total = 0.0
    for (_, H0, _), (_, H1, _) in zip(model_a.layers, model_b.layers):
        if H0.data.shape != H1.data.shape:
            raise DimensionMismatch("feature filter shapes differ")
        denom = np.linalg.norm(H0.data, 2)
        total += np.linalg.norm(H1.data - H0.data, 2) / denom
    return total / len(model_a.layers)


def topology_transfer(model, grid, contingency, new_dataset, config,
                      retrain_epochs=10, max_retrain_samples=None,
                      subspace_dim=None, scenario=""):
    """Adapt a trained model to a post-outage topology and report both the
    surgically-adjusted and the warm-start retrained accuracy.

    The feasibility internals (shift factors, susceptance inverse, active
    line set) are rebuilt on the post-outage network before retraining.
    """
    post = contingency.post_grid
    if new_dataset.header["n_lines"] != post.n_lines:
        raise DimensionMismatch("dataset was not generated on the post-outage grid")

    if max_retrain_samples is not None and new_dataset.n_samples > max_retrain_samples:
        from .case_io import DatasetFile
        new_dataset = DatasetFile(
            header=dict(new_dataset.header),
            features=new_dataset.features[:max_retrain_samples],
            labels=new_dataset.labels[:max_retrain_samples]).validate()

    surgical = mask_surgery(model, post)
    tr, va, te = _splits(new_dataset.n_samples, config)
    pre_report = evaluate(surgical, new_dataset, post, indices=te)

    retrain_cfg = copy.deepcopy(config)
    retrain_cfg.max_epochs = retrain_epochs
    if retrain_cfg.loss.fr_mode != "none" and retrain_cfg.loss.active_lines is not None:
        sl = new_dataset.label_slices()
        freq = new_dataset.labels[tr][:, sl["binding"]].mean(axis=0)
        k = len(retrain_cfg.loss.active_lines)
        ranked = np.argsort(freq)[::-1][:k]
        retrain_cfg.loss.active_lines = tuple(
            int(e) for e in ranked if freq[e] > 0)
    warm = copy.deepcopy(surgical)
    retrained, post_report = train(new_dataset, post, retrain_cfg,
                                   warm_model=warm)

    if pre_report.nmse_pi < post_report.nmse_pi:
        # the warm start itself was the best candidate on this scenario
        retrained, post_report = surgical, pre_report

    basis = spectral.eigendecompose_spd(grid.B_inv)
    s = subspace_dim or spectral.choose_subspace_dim(basis)
    basis_post = spectral.eigendecompose_spd(post.B_inv)
    d_fro = spectral.subspace_distance(basis.leading(s), basis_post.leading(s))
    d_2 = spectral.subspace_distance(basis.leading(s), basis_post.leading(s),
                                     "spectral")
    consts = spectral.separation_constants(basis, s)
    bounds = {}
    for k in sorted(contingency.outaged_lines):
        try:
            bounds[int(k)] = {
                "fro": spectral.dk_bound(grid, k, consts),
                "l2": spectral.dk_bound(grid, k, consts, "spectral"),
            }
        except Exception:
            bounds[int(k)] = "bridge"

    return retrained, TransferReport(
        scenario=scenario,
        outaged_lines=tuple(sorted(contingency.outaged_lines)),
        pre=pre_report, post=post_report,
        retrain_epochs=post_report.epochs,
        subspace_distance_fro=d_fro, subspace_distance_2=d_2,
        dk_bounds=bounds, delta_h=filter_perturbation(model, retrained),
        subspace_dim=s)


def transfer_scenarios(dataset, grid, n_scenarios=3, lines_per_scenario=2):
    """Pick outage scenarios among the most frequently binding non-bridge
    lines, keeping the surviving network connected."""
    sl = dataset.label_slices()
    freq = dataset.labels[:, sl["binding"]].mean(axis=0)
    ranked = [int(e) for e in np.argsort(freq)[::-1] if freq[e] > 0]
    scenarios = []
    used = set()
    for i in ranked:
        if len(scenarios) == n_scenarios:
            break
        if i in used:
            continue
        for j in ranked:
            if j == i or j in used:
                continue
            try:
                apply_outage(grid, {i, j})
            except Exception:
                continue
            scenarios.append((i, j)[:lines_per_scenario])
            used.update((i, j))
            break
    return scenarios


def write_report_json(path, payload):
    """Atomic JSON write (temp file + rename)."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
