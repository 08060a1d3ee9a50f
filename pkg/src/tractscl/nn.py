"""Minimal deterministic NN engine for streamline point clouds.

A shared pointwise MLP is applied identically to every point of a streamline
and max-pooled over points into a global feature vector, which feeds either a
projection head (for contrastive training; L2-normalized output) or a
classifier head.  All gradients are hand-written reverse-mode; max-pool
routes gradient to the argmax point with ties broken to the lowest point
index, which makes training bit-reproducible.

Default math is 64-bit; pass dtype=np.float32 at init for speed.
"""

from dataclasses import dataclass
import logging

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_ENCODER_WIDTHS = (64, 128, 256, 512, 1024)
DEFAULT_PROJECTION_WIDTHS = (256, 128)
DEFAULT_CLASSIFIER_WIDTHS = (512, 256, 2)
N_CLASSES = 2


class ShapeMismatch(ValueError):
    pass


class BadLabel(ValueError):
    pass


@dataclass(eq=False)
class ModelParams:
    """Weights and biases for encoder, projection head and classifier head."""

    encoder_w: list
    encoder_b: list
    proj_w: list
    proj_b: list
    cls_w: list
    cls_b: list

    @property
    def in_dim(self):
        return self.encoder_w[0].shape[0]

    @property
    def feat_dim(self):
        return self.encoder_w[-1].shape[1]

    @property
    def dtype(self):
        return self.encoder_w[0].dtype

    def param_items(self):
        """(name, array) pairs in declaration order; arrays are not copies."""
        items = []
        for group, ws, bs in (("encoder", self.encoder_w, self.encoder_b),
                              ("proj", self.proj_w, self.proj_b),
                              ("cls", self.cls_w, self.cls_b)):
            for i, (w, b) in enumerate(zip(ws, bs)):
                items.append((f"{group}.{i}.w", w))
                items.append((f"{group}.{i}.b", b))
        return items

    def copy(self):
        return ModelParams(
            [w.copy() for w in self.encoder_w], [b.copy() for b in self.encoder_b],
            [w.copy() for w in self.proj_w], [b.copy() for b in self.proj_b],
            [w.copy() for w in self.cls_w], [b.copy() for b in self.cls_b])

    def astype(self, dtype):
        return ModelParams(
            [w.astype(dtype) for w in self.encoder_w],
            [b.astype(dtype) for b in self.encoder_b],
            [w.astype(dtype) for w in self.proj_w],
            [b.astype(dtype) for b in self.proj_b],
            [w.astype(dtype) for w in self.cls_w],
            [b.astype(dtype) for b in self.cls_b])


def init_params(seed, in_dim=3,
                encoder_widths=DEFAULT_ENCODER_WIDTHS,
                projection_widths=DEFAULT_PROJECTION_WIDTHS,
                classifier_widths=DEFAULT_CLASSIFIER_WIDTHS,
                dtype=np.float64):
    """Glorot-uniform weights (U[-a, a], a = sqrt(6/(fan_in+fan_out))), zero biases."""
    if classifier_widths[-1] != N_CLASSES:
        raise ValueError(f"classifier must end in width {N_CLASSES}")
    rng = np.random.default_rng(seed)

    def make(widths, first_in):
        ws, bs = [], []
        fan_in = first_in
        for fan_out in widths:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype))
            bs.append(np.zeros(fan_out, dtype=dtype))
            fan_in = fan_out
        return ws, bs

    enc_w, enc_b = make(encoder_widths, in_dim)
    proj_w, proj_b = make(projection_widths, encoder_widths[-1])
    cls_w, cls_b = make(classifier_widths, encoder_widths[-1])
    return ModelParams(enc_w, enc_b, proj_w, proj_b, cls_w, cls_b)


# ---------------------------------------------------------------------------
# Encoder: shared pointwise MLP + max-pool over points
# ---------------------------------------------------------------------------

def encode_forward(params, batch):
    """(B, P, in_dim) -> (global features (B, feat_dim), cache for backward)."""
    batch = np.asarray(batch, dtype=params.dtype)
    if batch.ndim != 3 or batch.shape[2] != params.in_dim:
        raise ShapeMismatch(
            f"expected (B, P, {params.in_dim}), got {batch.shape}")
    if batch.shape[1] < 1:
        raise ShapeMismatch("need at least one point per streamline")
    if not np.isfinite(batch).all():
        raise ValueError("non-finite values in batch")
    b, p, d = batch.shape
    h = batch.reshape(b * p, d)
    inputs, masks = [], []
    for w, bias in zip(params.encoder_w, params.encoder_b):
        inputs.append(h)
        pre = h @ w + bias
        masks.append(pre > 0)
        h = np.maximum(pre, 0.0)
    feats = h.reshape(b, p, -1)
    idx = np.argmax(feats, axis=1)  # ties resolve to the lowest point index
    g = np.take_along_axis(feats, idx[:, None, :], axis=1)[:, 0, :]
    return g, (inputs, masks, idx, (b, p))


def encode(params, batch):
    return encode_forward(params, batch)[0]


def encode_backward(params, cache, dg):
    """Gradients of all encoder parameters given d loss / d global features."""
    inputs, masks, idx, (b, p) = cache
    f = dg.shape[1]
    dh3 = np.zeros((b, p, f), dtype=dg.dtype)
    np.put_along_axis(dh3, idx[:, None, :], dg[:, None, :], axis=1)
    dh = dh3.reshape(b * p, f)
    grads = {}
    for layer in reversed(range(len(params.encoder_w))):
        dpre = dh * masks[layer]
        grads[f"encoder.{layer}.w"] = inputs[layer].T @ dpre
        grads[f"encoder.{layer}.b"] = dpre.sum(axis=0)
        if layer > 0:
            dh = dpre @ params.encoder_w[layer].T
    return grads


# ---------------------------------------------------------------------------
# Projection head (contrastive features) and classifier head
# ---------------------------------------------------------------------------

def project_forward(params, g):
    """(B, feat_dim) -> (unit-norm contrastive features (B, proj_dim), cache).

    An exactly-zero pre-normalization row is divided by 1e-12 instead of its
    norm (yielding a zero output row) and flagged in the log.
    """
    g = np.asarray(g, dtype=params.dtype)
    a0 = g @ params.proj_w[0] + params.proj_b[0]
    mask0 = a0 > 0
    h0 = np.maximum(a0, 0.0)
    v = h0 @ params.proj_w[1] + params.proj_b[1]
    norms = np.sqrt((v * v).sum(axis=1))
    zero = norms == 0.0
    if zero.any():
        logger.warning("%d zero-vector rows before normalization", int(zero.sum()))
    n_eff = np.where(zero, 1e-12, norms)
    z = v / n_eff[:, None]
    return z, (g, mask0, h0, z, n_eff)


def project(params, g):
    return project_forward(params, g)[0]


def project_backward(params, cache, dz):
    """-> (projection parameter grads, d loss / d global features)."""
    g, mask0, h0, z, n_eff = cache
    dv = (dz - z * (z * dz).sum(axis=1, keepdims=True)) / n_eff[:, None]
    grads = {
        "proj.1.w": h0.T @ dv,
        "proj.1.b": dv.sum(axis=0),
    }
    dh0 = dv @ params.proj_w[1].T
    dpre0 = dh0 * mask0
    grads["proj.0.w"] = g.T @ dpre0
    grads["proj.0.b"] = dpre0.sum(axis=0)
    dg = dpre0 @ params.proj_w[0].T
    return grads, dg


def classify_forward(params, g):
    """(B, feat_dim) -> (raw logits (B, 2), cache).  No softmax applied."""
    g = np.asarray(g, dtype=params.dtype)
    if g.ndim != 2 or g.shape[1] != params.cls_w[0].shape[0]:
        raise ShapeMismatch(f"expected (B, {params.cls_w[0].shape[0]}), got {g.shape}")
    a0 = g @ params.cls_w[0] + params.cls_b[0]
    mask0 = a0 > 0
    h0 = np.maximum(a0, 0.0)
    a1 = h0 @ params.cls_w[1] + params.cls_b[1]
    mask1 = a1 > 0
    h1 = np.maximum(a1, 0.0)
    logits = h1 @ params.cls_w[2] + params.cls_b[2]
    return logits, (g, mask0, h0, mask1, h1)


def classify(params, g):
    return classify_forward(params, g)[0]


def classify_backward(params, cache, dlogits):
    """-> (classifier parameter grads, d loss / d global features)."""
    g, mask0, h0, mask1, h1 = cache
    grads = {
        "cls.2.w": h1.T @ dlogits,
        "cls.2.b": dlogits.sum(axis=0),
    }
    dh1 = dlogits @ params.cls_w[2].T
    dpre1 = dh1 * mask1
    grads["cls.1.w"] = h0.T @ dpre1
    grads["cls.1.b"] = dpre1.sum(axis=0)
    dh0 = dpre1 @ params.cls_w[1].T
    dpre0 = dh0 * mask0
    grads["cls.0.w"] = g.T @ dpre0
    grads["cls.0.b"] = dpre0.sum(axis=0)
    dg = dpre0 @ params.cls_w[0].T
    return grads, dg


# ---------------------------------------------------------------------------
# Losses and optimizer
# ---------------------------------------------------------------------------

def softmax_probs(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient wrt the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= c:
        raise BadLabel(f"labels must be in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(b), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and step counter."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: dict
    v: dict


def adam_init(params, names=None, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fresh optimizer state over the named parameters (default: all)."""
    items = dict(params.param_items())
    if names is None:
        names = list(items)
    m = {n: np.zeros_like(items[n]) for n in names}
    v = {n: np.zeros_like(items[n]) for n in names}
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0, m=m, v=v)


def adam_step(state, params, grads):
    """One bias-corrected Adam update, in place on params (no weight decay).

    Only parameters tracked by the state are updated; grads must provide an
    entry for each of them.
    """
    items = dict(params.param_items())
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in state.m:
        g = grads[name]
        state.m[name] *= state.beta1
        state.m[name] += (1.0 - state.beta1) * g
        state.v[name] *= state.beta2
        state.v[name] += (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        items[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
