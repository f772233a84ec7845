"""Topology-masked bilinear graph networks, fully-connected baselines, the
price-to-dispatch latent chain, flow-feasibility penalties, the composite
training loss, and the Adam optimizer.

Graph filters are dense arrays constrained to the grid's sparsity mask: the
mask multiplies the filter in every forward pass (so exterior gradients are
exactly zero) and is re-applied after every optimizer step (so exterior
entries stay exactly zero).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch, MissingChannel, ShapeMismatch
from .grid_model import normalized_bbus

DC_FEATURES = ("p_max", "p_min", "cost_a", "cost_b")
AC_FEATURES = ("p_max", "p_min", "q_max", "q_min", "cost_a", "cost_b")
FIXED_NODE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Loss configuration
# ---------------------------------------------------------------------------

class LossConfig:
    """Weights and switches for the composite training objective."""

    def __init__(self, gamma_pi=1.0, gamma_v=0.0, gamma_fr=0.0, gamma_p=0.0,
                 linf_pi_weight=0.0, fr_mode="none", active_lines=None,
                 sigmoid_sharpness=100.0, smooth_hinge=True):
        if min(gamma_pi, gamma_v, gamma_fr, gamma_p, linf_pi_weight) < 0:
            raise ValueError("loss weights must be nonnegative")
        if fr_mode not in ("none", "dc", "ac"):
            raise ValueError(f"unknown fr_mode {fr_mode!r}")
        self.gamma_pi = gamma_pi
        self.gamma_v = gamma_v
        self.gamma_fr = gamma_fr
        self.gamma_p = gamma_p
        self.linf_pi_weight = linf_pi_weight
        self.fr_mode = fr_mode
        self.active_lines = None if active_lines is None else tuple(int(k) for k in active_lines)
        self.sigmoid_sharpness = sigmoid_sharpness
        self.smooth_hinge = smooth_hinge

    def to_dict(self):
        return {
            "gamma_pi": self.gamma_pi, "gamma_v": self.gamma_v,
            "gamma_fr": self.gamma_fr, "gamma_p": self.gamma_p,
            "linf_pi_weight": self.linf_pi_weight, "fr_mode": self.fr_mode,
            "active_lines": None if self.active_lines is None else list(self.active_lines),
            "sigmoid_sharpness": self.sigmoid_sharpness,
            "smooth_hinge": self.smooth_hinge,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def _uniform(rng, lo_hi, shape):
    return rng.uniform(-lo_hi, lo_hi, size=shape)


class Normalizer:
    """Per-channel affine standardization fitted on the training split."""

    def __init__(self, mu_x, sigma_x, mu_y, sigma_y):
        self.mu_x = np.asarray(mu_x, dtype=np.float64)
        self.sigma_x = np.asarray(sigma_x, dtype=np.float64)
        self.mu_y = np.asarray(mu_y, dtype=np.float64)
        self.sigma_y = np.asarray(sigma_y, dtype=np.float64)

    @classmethod
    def identity(cls, d_in, d_out):
        return cls(np.zeros(d_in), np.ones(d_in), np.zeros(d_out), np.ones(d_out))

    @classmethod
    def fit(cls, features, targets):
        """features (B, N, d); targets (B, N, c). Statistics pool nodes."""
        mu_x = features.mean(axis=(0, 1))
        sigma_x = features.std(axis=(0, 1))
        mu_y = targets.mean(axis=(0, 1))
        sigma_y = targets.std(axis=(0, 1))
        return cls(mu_x, np.where(sigma_x < 1e-12, 1.0, sigma_x),
                   mu_y, np.where(sigma_y < 1e-12, 1.0, sigma_y))

    def x(self, features):
        return (features - self.mu_x) / self.sigma_x

    def y(self, targets):
        return (targets - self.mu_y) / self.sigma_y

    def y_inv_t(self, pred):
        """Unstandardize a prediction tensor back to physical units."""
        return pred * Tensor(self.sigma_y) + Tensor(self.mu_y)


class GnnModel:
    """Stack of masked bilinear graph layers with a linear per-node head.

    Layer t maps X -> relu((mask * W_t) X H_t + b_t); the head applies a
    feature filter only. Graph filters are initialized with the symmetric
    degree-normalized susceptance Laplacian, whose support equals the mask.
    """

    kind = "gnn"

    def __init__(self, mask, widths, out_channels=1, seed=0, w_init=None):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise ShapeMismatch("mask must be square")
        self.mask = mask
        self.n_nodes = mask.shape[0]
        self.widths = list(int(w) for w in widths)
        self.out_channels = int(out_channels)
        rng = np.random.default_rng(seed)
        if w_init is None:
            w_init = np.eye(self.n_nodes)
        self.layers = []
        for d_in, d_out in zip(self.widths[:-1], self.widths[1:]):
            W = Tensor((w_init * mask).copy(), requires_grad=True)
            H = Tensor(_uniform(rng, 1.0 / np.sqrt(d_in), (d_in, d_out)),
                       requires_grad=True)
            b = Tensor(_uniform(rng, 1.0 / np.sqrt(d_in), (d_out,)),
                       requires_grad=True)
            self.layers.append((W, H, b))
        d_last = self.widths[-1]
        self.head_w = Tensor(_uniform(rng, 1.0 / np.sqrt(d_last),
                                      (d_last, out_channels)), requires_grad=True)
        self.head_b = Tensor(_uniform(rng, 1.0 / np.sqrt(d_last), (out_channels,)),
                             requires_grad=True)
        self.norm = Normalizer.identity(self.widths[0], out_channels)

    @classmethod
    def for_grid(cls, grid, widths, out_channels=1, seed=0):
        return cls(grid.mask, widths, out_channels, seed,
                   w_init=normalized_bbus(grid))

    def parameters(self):
        out = []
        for W, H, b in self.layers:
            out.extend([W, H, b])
        out.extend([self.head_w, self.head_b])
        return out

    def apply_mask(self):
        for W, _, _ in self.layers:
            W.data *= self.mask

    def trunk(self, x):
        """Masked bilinear layers only; x is (B, N, d0)."""
        if x.shape[-1] != self.widths[0]:
            raise ShapeMismatch(
                f"input width {x.shape[-1]} != model width {self.widths[0]}")
        if x.shape[-2] != self.n_nodes:
            raise ShapeMismatch(
                f"input has {x.shape[-2]} nodes, model has {self.n_nodes}")
        mask_t = Tensor(self.mask.astype(np.float64))
        for W, H, b in self.layers:
            x = ad.relu(ad.matmul(ad.matmul(W * mask_t, x), H) + b)
        return x

    def forward(self, x):
        """(B, N, d0) -> (B, N, out_channels), standardized output scale."""
        return ad.matmul(self.trunk(x), self.head_w) + self.head_b

    def parameter_counts(self):
        """(masked_total, dense_equivalent_total, per_layer_masked)."""
        nnz = int(self.mask.sum())
        per_layer = [nnz + H.data.size + b.data.size for _, H, b in self.layers]
        masked = sum(per_layer) + self.head_w.data.size + self.head_b.data.size
        dense = sum(self.n_nodes ** 2 + H.data.size + b.data.size
                    for _, H, b in self.layers) \
            + self.head_w.data.size + self.head_b.data.size
        return masked, dense, per_layer

    # -- checkpointing -------------------------------------------------------

    def _norm_arrays(self):
        return [("norm.mu_x", self.norm.mu_x), ("norm.sigma_x", self.norm.sigma_x),
                ("norm.mu_y", self.norm.mu_y), ("norm.sigma_y", self.norm.sigma_y)]

    def checkpoint_payload(self, extra=None):
        manifest = {
            "kind": self.kind,
            "n_nodes": self.n_nodes,
            "widths": self.widths,
            "out_channels": self.out_channels,
            "mask_rows": [int(i) for i in np.nonzero(self.mask)[0]],
            "mask_cols": [int(j) for j in np.nonzero(self.mask)[1]],
            "extra": extra or {},
        }
        arrays = []
        for t, (W, H, b) in enumerate(self.layers):
            arrays += [(f"layers.{t}.W", W.data), (f"layers.{t}.H", H.data),
                       (f"layers.{t}.b", b.data)]
        arrays += [("head.w", self.head_w.data), ("head.b", self.head_b.data)]
        arrays += self._norm_arrays()
        return manifest, arrays

    @classmethod
    def from_checkpoint(cls, manifest, arrays):
        n = manifest["n_nodes"]
        mask = np.zeros((n, n), dtype=bool)
        mask[manifest["mask_rows"], manifest["mask_cols"]] = True
        model = cls(mask, manifest["widths"], manifest["out_channels"])
        _load_arrays(model, arrays)
        return model


class FcnnModel:
    """Fully-connected baseline over the flattened nodal feature vector."""

    kind = "fcnn"

    def __init__(self, n_nodes, widths, out_channels=1, seed=0):
        self.n_nodes = int(n_nodes)
        self.widths = list(int(w) for w in widths)
        self.out_channels = int(out_channels)
        rng = np.random.default_rng(seed)
        dims = [self.n_nodes * w for w in self.widths]
        self.layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            W = Tensor(_uniform(rng, 1.0 / np.sqrt(d_in), (d_in, d_out)),
                       requires_grad=True)
            b = Tensor(_uniform(rng, 1.0 / np.sqrt(d_in), (d_out,)),
                       requires_grad=True)
            self.layers.append((W, b))
        d_last = dims[-1]
        self.head_w = Tensor(_uniform(rng, 1.0 / np.sqrt(d_last),
                                      (d_last, self.n_nodes * out_channels)),
                             requires_grad=True)
        self.head_b = Tensor(_uniform(rng, 1.0 / np.sqrt(d_last),
                                      (self.n_nodes * out_channels,)),
                             requires_grad=True)
        self.norm = Normalizer.identity(self.widths[0], out_channels)

    def parameters(self):
        out = []
        for W, b in self.layers:
            out.extend([W, b])
        out.extend([self.head_w, self.head_b])
        return out

    def apply_mask(self):
        pass

    def forward(self, x):
        if x.shape[-1] != self.widths[0] or x.shape[-2] != self.n_nodes:
            raise ShapeMismatch("input shape disagrees with model layout")
        batch = x.shape[0]
        z = x.reshape(batch, self.n_nodes * self.widths[0])
        for W, b in self.layers:
            z = ad.relu(ad.matmul(z, W) + b)
        z = ad.matmul(z, self.head_w) + self.head_b
        return z.reshape(batch, self.n_nodes, self.out_channels)

    def parameter_counts(self):
        per_layer = [W.data.size + b.data.size for W, b in self.layers]
        total = sum(per_layer) + self.head_w.data.size + self.head_b.data.size
        return total, total, per_layer

    def checkpoint_payload(self, extra=None):
        manifest = {"kind": self.kind, "n_nodes": self.n_nodes,
                    "widths": self.widths, "out_channels": self.out_channels,
                    "extra": extra or {}}
        arrays = []
        for t, (W, b) in enumerate(self.layers):
            arrays += [(f"layers.{t}.W", W.data), (f"layers.{t}.b", b.data)]
        arrays += [("head.w", self.head_w.data), ("head.b", self.head_b.data)]
        arrays += [("norm.mu_x", self.norm.mu_x), ("norm.sigma_x", self.norm.sigma_x),
                   ("norm.mu_y", self.norm.mu_y), ("norm.sigma_y", self.norm.sigma_y)]
        return manifest, arrays

    @classmethod
    def from_checkpoint(cls, manifest, arrays):
        model = cls(manifest["n_nodes"], manifest["widths"],
                    manifest["out_channels"])
        _load_arrays(model, arrays)
        return model


class GnnClassifier:
    """GNN trunk plus one fully-connected layer mapping all node embeddings
    to per-line binding logits (line flow mixes every node through the
    shift-factor matrix, so the last layer is dense on purpose)."""

    kind = "gnn_classifier"

    def __init__(self, mask, widths, n_lines_out, seed=0, w_init=None):
        self.trunk_model = GnnModel(mask, widths, out_channels=1, seed=seed,
                                    w_init=w_init)
        rng = np.random.default_rng((seed, 997))
        d_flat = self.trunk_model.n_nodes * self.trunk_model.widths[-1]
        self.n_lines_out = int(n_lines_out)
        self.cls_w = Tensor(_uniform(rng, 1.0 / np.sqrt(d_flat),
                                     (d_flat, n_lines_out)), requires_grad=True)
        self.cls_b = Tensor(np.zeros(n_lines_out), requires_grad=True)
        self.norm = self.trunk_model.norm

    @classmethod
    def for_grid(cls, grid, widths, n_lines_out, seed=0):
        return cls(grid.mask, widths, n_lines_out, seed,
                   w_init=normalized_bbus(grid))

    @property
    def n_nodes(self):
        return self.trunk_model.n_nodes

    @property
    def mask(self):
        return self.trunk_model.mask

    def parameters(self):
        return self.trunk_model.parameters()[:-2] + [self.cls_w, self.cls_b]

    def apply_mask(self):
        self.trunk_model.apply_mask()

    def forward(self, x):
        """(B, N, d0) -> (B, K) binding logits."""
        z = self.trunk_model.trunk(x)
        batch = z.shape[0]
        flat = z.reshape(batch, self.n_nodes * self.trunk_model.widths[-1])
        return ad.matmul(flat, self.cls_w) + self.cls_b

    def checkpoint_payload(self, extra=None):
        manifest, arrays = self.trunk_model.checkpoint_payload(extra=extra)
        manifest["kind"] = self.kind
        manifest["n_lines_out"] = self.n_lines_out
        arrays = [(n, a) for n, a in arrays if not n.startswith("head.")]
        arrays += [("cls.w", self.cls_w.data), ("cls.b", self.cls_b.data)]
        return manifest, arrays

    @classmethod
    def from_checkpoint(cls, manifest, arrays):
        n = manifest["n_nodes"]
        mask = np.zeros((n, n), dtype=bool)
        mask[manifest["mask_rows"], manifest["mask_cols"]] = True
        model = cls(mask, manifest["widths"], manifest["n_lines_out"])
        _load_arrays(model.trunk_model, {k: v for k, v in arrays.items()
                                         if k.startswith(("layers.", "norm."))})
        model.cls_w.data[...] = arrays["cls.w"]
        model.cls_b.data[...] = arrays["cls.b"]
        model.norm = model.trunk_model.norm
        return model


def _load_arrays(model, arrays):
    named = dict(arrays) if not isinstance(arrays, dict) else arrays
    for t, layer in enumerate(model.layers):
        for slot, tensor in zip(("W", "H", "b") if len(layer) == 3 else ("W", "b"),
                                layer):
            key = f"layers.{t}.{slot}"
            if named[key].shape != tensor.data.shape:
                raise ShapeMismatch(f"{key}: {named[key].shape} vs {tensor.data.shape}")
            tensor.data[...] = named[key]
    if "head.w" in named and hasattr(model, "head_w"):
        model.head_w.data[...] = named["head.w"]
        model.head_b.data[...] = named["head.b"]
    model.norm = Normalizer(named["norm.mu_x"], named["norm.sigma_x"],
                            named["norm.mu_y"], named["norm.sigma_y"])


def model_from_checkpoint(manifest, arrays):
    kinds = {"gnn": GnnModel, "fcnn": FcnnModel, "gnn_classifier": GnnClassifier}
    kind = manifest.get("kind")
    if kind not in kinds:
        raise ShapeMismatch(f"unknown model kind {kind!r}")
    return kinds[kind].from_checkpoint(manifest, arrays)


# ---------------------------------------------------------------------------
# Latent chain: price -> dispatch -> flows
# ---------------------------------------------------------------------------

def _flex_split(p_min, p_max):
    flex = (p_max - p_min) > FIXED_NODE_TOL
    return flex.astype(np.float64), p_min


def hard_projection(pi_hat, a, b, p_min, p_max):
    """Clamp (pi - b) / (2a) into the injection box; fixed nodes bypass.

    All of a, b, p_min, p_max are (B, N) (or (N,)) constants; `pi_hat` is a
    tensor. Dispatch is exactly feasible w.r.t. the box for any price input.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    p_min = np.asarray(p_min, dtype=np.float64)
    p_max = np.asarray(p_max, dtype=np.float64)
    flex, fixed_val = _flex_split(p_min, p_max)
    a_safe = np.where(flex > 0, np.where(a > 0, a, 1.0), 1.0)
    r = (pi_hat - Tensor(b)) * Tensor(0.5 / a_safe)
    proj = ad.clamp(r, p_min, p_max)
    return proj * Tensor(flex) + Tensor((1.0 - flex) * fixed_val)


def soft_projection(pi_hat, a, b, p_min, p_max, sharpness=100.0):
    """Differentiable double sigmoid-blend of the box projection.

    Lower blend: r' = sigmoid(k (lo - r)) (lo - r) + r. The upper blend
    mirrors it, p = r' + sigmoid(k (r' - hi)) (hi - r'), so the map
    converges pointwise to hard_projection as the sharpness grows. Fixed
    nodes bypass exactly as in the hard form.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    p_min = np.asarray(p_min, dtype=np.float64)
    p_max = np.asarray(p_max, dtype=np.float64)
    flex, fixed_val = _flex_split(p_min, p_max)
    a_safe = np.where(flex > 0, np.where(a > 0, a, 1.0), 1.0)
    k = float(sharpness)
    r = (pi_hat - Tensor(b)) * Tensor(0.5 / a_safe)
    lo, hi = Tensor(p_min), Tensor(p_max)
    r1 = ad.sigmoid((lo - r) * k) * (lo - r) + r
    p = r1 + ad.sigmoid((r1 - hi) * k) * (hi - r1)
    return p * Tensor(flex) + Tensor((1.0 - flex) * fixed_val)


def latent_chain_dc(pi_hat, grid, a, b, p_min, p_max, soft=True, sharpness=100.0):
    """Price -> projected dispatch -> dc line flows S @ p. Returns (p, f)."""
    if soft:
        p_hat = soft_projection(pi_hat, a, b, p_min, p_max, sharpness)
    else:
        p_hat = hard_projection(pi_hat, a, b, p_min, p_max)
    f_hat = ad.matmul(p_hat, Tensor(grid.S.T))
    return p_hat, f_hat


def latent_chain_ac(pi_hat, v_hat, grid, a, b, p_min, p_max, soft=True,
                    sharpness=100.0):
    """Price and voltage -> dispatch, angles, and apparent flows.

    Angles come from the dc linearization theta = B^-1 p over non-reference
    buses (reference angle pinned to zero); apparent flow per line follows
    the sending-end formula in both directions. Returns (p, theta, s_from,
    s_to) with s_* of shape (B, E).
    """
    if soft:
        p_hat = soft_projection(pi_hat, a, b, p_min, p_max, sharpness)
    else:
        p_hat = hard_projection(pi_hat, a, b, p_min, p_max)
    n = grid.n_buses
    nonref = grid.nonref
    sel = np.zeros((n, n - 1))
    sel[nonref, np.arange(n - 1)] = 1.0
    theta_red = ad.matmul(ad.matmul(p_hat, Tensor(sel)), Tensor(grid.B_inv))
    theta = ad.matmul(theta_red, Tensor(sel.T))

    pick_from = np.zeros((n, grid.n_lines))
    pick_from[grid.from_idx, np.arange(grid.n_lines)] = 1.0
    pick_to = np.zeros((n, grid.n_lines))
    pick_to[grid.to_idx, np.arange(grid.n_lines)] = 1.0
    vi = ad.matmul(v_hat, Tensor(pick_from))
    vj = ad.matmul(v_hat, Tensor(pick_to))
    dth = ad.matmul(theta, Tensor(pick_from - pick_to))
    gap = ad.sqrt(vi * vi + vj * vj - 2.0 * vi * vj * ad.cos(dth))
    y = Tensor(grid.y_mag)
    return p_hat, theta, gap * vi * y, gap * vj * y


def fr_penalty(flows, limits, active_lines=None, smooth=False, sharpness=100.0,
               two_sided=True):
    """Mean-per-sample l1 of line-limit violations.

    `flows` is (B, E); for dc flows the violation is |f| - limit (both
    directions), for apparent flows pass two_sided=False per direction.
    The hinge can be sigmoid-smoothed for training.
    """
    limits_t = Tensor(np.asarray(limits, dtype=np.float64))
    if two_sided:
        over = flows - limits_t
        under = -flows - limits_t
        terms = [over, under]
    else:
        terms = [flows - limits_t]
    total = None
    for z in terms:
        if smooth:
            h = ad.sigmoid(z * float(sharpness)) * z
        else:
            h = ad.relu(z)
        if active_lines is not None:
            sel = np.zeros(h.shape[-1])
            sel[list(active_lines)] = 1.0
            h = h * Tensor(sel)
        total = h if total is None else total + h
    return total.sum(axis=-1).mean()


def composite_loss(pred, labels, config, chain_penalty=None):
    """Label fit plus weighted feasibility regularization.

    `pred` and `labels` are (B, N, C) tensors in standardized units with
    channel 0 the price and channel 1 (when present) the voltage magnitude;
    `chain_penalty` is the precomputed scalar FR tensor for this batch.
    """
    channels = pred.shape[-1]
    if config.gamma_v > 0 and channels < 2:
        raise MissingChannel("voltage loss requested but model has no v channel")
    err = pred - labels
    sq = err * err
    per_sample = sq.sum(axis=1)  # (B, C)
    chan_w = np.zeros(channels)
    chan_w[0] = config.gamma_pi
    if channels > 1:
        chan_w[1] = config.gamma_v
    loss = (per_sample * Tensor(chan_w)).sum(axis=-1).mean()
    if config.linf_pi_weight > 0:
        # smooth max over nodes of the price error channel
        abs_err = ad.relu(err) + ad.relu(-err)
        pi_err = (abs_err * Tensor(_channel_selector(channels, 0))).sum(axis=-1)
        smooth_max = ad.logsumexp(pi_err, axis=-1, temperature=1e-2)
        loss = loss + smooth_max.mean() * config.linf_pi_weight
    if config.gamma_fr > 0:
        if chain_penalty is None:
            raise MissingChannel("gamma_fr > 0 but no chain penalty supplied")
        loss = loss + chain_penalty * config.gamma_fr
    return loss


def _channel_selector(channels, idx):
    sel = np.zeros(channels)
    sel[idx] = 1.0
    return sel


def select_channel(pred, c):
    """Extract channel c of a (B, N, C) tensor as (B, N)."""
    sel = np.zeros((pred.shape[-1], 1))
    sel[c, 0] = 1.0
    return ad.matmul(pred, Tensor(sel)).reshape(pred.shape[0], pred.shape[1])


def injection_error(p_hat, p_star):
    """Auxiliary mean squared dispatch error (physical units)."""
    d = p_hat - Tensor(np.asarray(p_star, dtype=np.float64))
    return (d * d).sum(axis=-1).mean()


def bce_with_logits(logits, targets, pos_weight=None):
    """Numerically stable binary cross-entropy on logits, mean over all.

    `pos_weight` (broadcastable to the logits) scales the positive-class
    term, the usual counterweight for rare binding events.
    """
    t = Tensor(np.asarray(targets, dtype=np.float64))
    abs_x = ad.relu(logits) + ad.relu(-logits)
    softplus_neg_abs = ad.log(ad.exp(-abs_x) + 1.0)
    # softplus(-x) = relu(-x) + log(1 + exp(-|x|)), softplus(x) likewise
    pos_term = ad.relu(-logits) + softplus_neg_abs
    neg_term = ad.relu(logits) + softplus_neg_abs
    if pos_weight is None:
        w = 1.0
    else:
        w = Tensor(np.asarray(pos_weight, dtype=np.float64))
    return (t * pos_term * w + (1.0 - t) * neg_term).mean()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_snapshot(self):
        return {"t": self.t,
                "m": [m.copy() for m in self.m],
                "v": [v.copy() for v in self.v]}

    def load_snapshot(self, snap):
        self.t = snap["t"]
        self.m = [m.copy() for m in snap["m"]]
        self.v = [v.copy() for v in snap["v"]]
