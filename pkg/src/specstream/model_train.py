"""MLP stacks with explicit reverse-mode gradients, prediction heads,
negative sampling, AdamW, metrics, and the rolling training loop.

The loop follows the sliding evaluation protocol: after training on batch i,
the model scores batch i+1 as validation and batch i+2 as test, neither of
which may update parameters or memory that later training steps observe.
All randomness fans out from one root seed through named derivation domains
(see README "Randomness").
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import framelet, spectral_attention
from .eventstream import EventLog
from .framelet import FilterBank, ThetaStore, haar_filter_bank, theta_pull, theta_push
from .memory_window import (BatchGraph, MemoryState, MessageFn, advance_memory,
                            batch_bounds, encode_log, init_message_fn, make_batch)

_ACTIVATIONS = ("tanh", "relu", "identity", "sigmoid")
_CLAMP = 1e-7

# Seed-derivation domains (spawn_key[0] of the root SeedSequence).
DOMAIN_SVD = 0
DOMAIN_PARAMS = 1
DOMAIN_TRAIN_NEG = 2
DOMAIN_VAL_NEG = 3
DOMAIN_TEST_NEG = 4
DOMAIN_NODE_HEAD = 5


def derive_rng(seed: int, *key) -> np.random.Generator:
    """Generator for one derivation domain of the root seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_int(seed: int, *key) -> int:
    """Plain integer seed for APIs that take one."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Multi-layer perceptron with explicit gradients.
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Affine + activation chain in row convention: x @ W + b per layer."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists must have equal length")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.ascontiguousarray(w, dtype=np.float64)
            b = np.ascontiguousarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i} shapes do not chain: {w.shape}, {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"non-finite parameters in layer {i}")
            self.weights[i] = w
            self.biases[i] = b
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input width does not chain")

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases],
                         list(self.activations))


@dataclass
class MlpCtx:
    params: MlpParams
    inputs: list
    outputs: list


@dataclass(frozen=True)
class MlpGrads:
    d_weights: list
    d_biases: list
    d_input: np.ndarray


def init_mlp(dims, activations, seed: int = 0) -> MlpParams:
    """Glorot-uniform MLP initialization for the given width chain."""
    if len(dims) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-lim, lim, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases, list(activations))


def _activate(act: str, pre: np.ndarray) -> np.ndarray:
    if act == "tanh":
        return np.tanh(pre)
    if act == "relu":
        return np.maximum(pre, 0.0)
    if act == "sigmoid":
        return 1.0 / (1.0 + np.exp(-pre))
    return pre


def _activate_grad(act: str, out: np.ndarray) -> np.ndarray:
    if act == "tanh":
        return 1.0 - out * out
    if act == "relu":
        return (out > 0.0).astype(np.float64)
    if act == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(out)


def mlp_forward(p: MlpParams, x) -> tuple:
    """Returns (output, context); the context feeds :func:`mlp_backward`."""
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.shape[1] != p.d_in:
        raise ValueError(f"input width {x.shape[1]} != first layer {p.d_in}")
    inputs, outputs = [], []
    h = x
    for w, b, act in zip(p.weights, p.biases, p.activations):
        inputs.append(h)
        h = _activate(act, h @ w + b)
        outputs.append(h)
    return h, MlpCtx(params=p, inputs=inputs, outputs=outputs)


def mlp_backward(ctx: MlpCtx, grad_out) -> MlpGrads:
    """Exact reverse-mode gradients for a saved forward pass."""
    if not isinstance(ctx, MlpCtx):
        raise TypeError("missing or invalid forward context")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if g.shape != ctx.outputs[-1].shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match output {ctx.outputs[-1].shape}"
        )
    p = ctx.params
    n_layers = len(p.weights)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        g = g * _activate_grad(p.activations[i], ctx.outputs[i])
        d_weights[i] = ctx.inputs[i].T @ g
        d_biases[i] = g.sum(axis=0)
        g = g @ p.weights[i].T
    return MlpGrads(d_weights=d_weights, d_biases=d_biases, d_input=g)


# ---------------------------------------------------------------------------
# Heads, loss, sampling, optimizer, metrics.
# ---------------------------------------------------------------------------

def link_predict(h_u, h_v, head: MlpParams):
    """Probability that (u, v) interact: sigmoid MLP on concat(h_u, h_v)."""
    hu = np.atleast_2d(np.asarray(h_u, dtype=np.float64))
    hv = np.atleast_2d(np.asarray(h_v, dtype=np.float64))
    if hu.shape != hv.shape:
        raise ValueError(f"embedding shapes disagree: {hu.shape} vs {hv.shape}")
    if head.d_in != hu.shape[1] + hv.shape[1]:
        raise ValueError(
            f"head expects width {head.d_in}, got {hu.shape[1] + hv.shape[1]}"
        )
    if head.d_out != 1 or head.activations[-1] != "sigmoid":
        raise ValueError("link head must end in a single sigmoid output")
    out, _ = mlp_forward(head, np.concatenate([hu, hv], axis=1))
    probs = out[:, 0]
    return float(probs[0]) if np.asarray(h_u).ndim == 1 else probs


def negative_sample(batch: BatchGraph, ratio: float, rng: np.random.Generator):
    """Corrupted pairs for link prediction: per positive event, with
    probability ``ratio``, keep the source and draw a uniform batch-local
    destination that does not form a batch edge (up to 100 tries, then skip
    with a warning)."""
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    candidates = np.unique(batch.dst_local)
    edges = set(zip(batch.src_local.tolist(), batch.dst_local.tolist()))
    neg_src, neg_dst = [], []
    skipped = 0
    for j in range(batch.n_events):
        if rng.random() >= ratio:
            continue
        u = int(batch.src_local[j])
        for _ in range(100):
            v = int(candidates[rng.integers(candidates.shape[0])])
            if (u, v) not in edges:
                neg_src.append(u)
                neg_dst.append(v)
                break
        else:
            skipped += 1
    if skipped:
        warnings.warn(
            f"negative sampling skipped {skipped} positives: no non-edge found "
            "in 100 tries (graph too dense)",
            stacklevel=2,
        )
    return (np.asarray(neg_src, dtype=np.int64),
            np.asarray(neg_dst, dtype=np.int64))


def bce_loss(probabilities, labels) -> tuple:
    """Mean binary cross-entropy with inputs clamped to
    [1e-7, 1 - 1e-7]; returns (loss, gradient w.r.t. the probabilities).

    The gradient is exactly that of the clamped objective, i.e. zero where
    the clamp is active.
    """
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"lengths disagree: {p.shape} vs {y.shape}")
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    n = p.shape[0]
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    active = (p > _CLAMP) & (p < 1.0 - _CLAMP)
    grad = np.where(active, (pc - y) / (pc * (1.0 - pc)) / n, 0.0)
    return loss, grad


def adamw_step(params: dict, grads: dict, state: dict, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters first shrink by (1 - lr * weight_decay), then receive the
    bias-corrected moment update.  ``state`` accumulates per-key moments and
    step counts and may start empty.
    """
    beta1, beta2 = betas
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {key!r}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {key!r}")
        st = state.setdefault(key, {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0})
        st["t"] += 1
        p *= 1.0 - lr * weight_decay
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def precision(scores, labels, threshold: float = 0.5) -> float:
    """True positives over predicted positives (score >= threshold);
    0.0 with a warning when nothing is predicted positive."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"lengths disagree: {s.shape} vs {y.shape}")
    predicted = s >= threshold
    tp = int(np.sum(predicted & (y == 1)))
    fp = int(np.sum(predicted & (y == 0)))
    if tp + fp == 0:
        warnings.warn("no predicted positives; precision defined as 0.0",
                      stacklevel=2)
        return 0.0
    return tp / (tp + fp)


def roc_auc(scores, labels) -> float:
    """Probability a positive outranks a negative (ties count half), via
    midranks; exactly equals brute-force pair counting."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"lengths disagree: {s.shape} vs {y.shape}")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    n = s.shape[0]
    order = np.argsort(s, kind="stable")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Configuration, model bundle, reports.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for a training run.

    d_time is reserved for a time-encoding extension and takes no part in
    the current model.  lr defaults to the documented menu; overriding it is
    allowed and simply recorded in run outputs.
    """

    batch_size: int = 1000
    lr: float = 1e-4
    weight_decay: float = 1e-2
    max_epochs: int = 200
    d_mem: int = 100
    d_embed: int = 100
    d_time: int = 100
    hidden: int = 100
    neg_ratio: float = 0.5
    seed: int = 0
    rank_lo: int = 50
    rank_hi: int = 100
    svd_tol: float = 0.1
    svd_q: int = 3
    svd_fit: str = "train"
    train_frac: float = 0.70
    cheb_order: int = 16
    levels: int = 2
    patience: int = 10

    def __post_init__(self):
        positive = ("batch_size", "lr", "weight_decay", "max_epochs", "d_mem",
                    "d_embed", "d_time", "hidden", "neg_ratio", "rank_lo",
                    "rank_hi", "svd_tol", "svd_q", "cheb_order", "levels",
                    "patience")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.svd_fit not in ("all", "train"):
            raise ValueError(f"svd_fit must be 'all' or 'train', got {self.svd_fit!r}")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.rank_lo > self.rank_hi:
            raise ValueError("rank_lo must not exceed rank_hi")


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics for one split."""

    split: str
    precision: float
    roc_auc: float
    n_pos: int
    n_neg: int
    loss: float


@dataclass
class Model:
    """All trainable parameter groups except the per-node theta store."""

    f: MessageFn
    fc: MlpParams
    w_feat: np.ndarray
    link_head: MlpParams

    def param_dict(self) -> dict:
        out = {
            "mem_w1": self.f.w1, "mem_b1": self.f.b1,
            "mem_w2": self.f.w2, "mem_b2": self.f.b2,
            "w_feat": self.w_feat,
        }
        for i, (w, b) in enumerate(zip(self.fc.weights, self.fc.biases)):
            out[f"fc_w{i}"] = w
            out[f"fc_b{i}"] = b
        for i, (w, b) in enumerate(zip(self.link_head.weights, self.link_head.biases)):
            out[f"head_w{i}"] = w
            out[f"head_b{i}"] = b
        return out


@dataclass
class TrainResult:
    model: Model
    node_head: object
    theta: ThetaStore
    encoding: spectral_attention.SpectralEncoding
    fb: FilterBank
    reports: dict
    node_reports: dict
    history: list
    best_epoch: int
    n_params: int
    config: TrainConfig


def init_model(d_msg: int, cfg: TrainConfig) -> Model:
    d_h = d_msg + 2 * cfg.d_mem
    f = init_message_fn(d_msg, cfg.d_mem, cfg.hidden,
                        seed=derive_int(cfg.seed, DOMAIN_PARAMS, 0))
    fc = init_mlp([d_h, cfg.d_embed], ["relu"],
                  seed=derive_int(cfg.seed, DOMAIN_PARAMS, 1))
    rng = derive_rng(cfg.seed, DOMAIN_PARAMS, 2)
    lim = np.sqrt(6.0 / (2 * cfg.d_embed))
    w_feat = rng.uniform(-lim, lim, size=(cfg.d_embed, cfg.d_embed))
    link_head = init_mlp([2 * cfg.d_embed, cfg.hidden, 1], ["relu", "sigmoid"],
                         seed=derive_int(cfg.seed, DOMAIN_PARAMS, 3))
    return Model(f=f, fc=fc, w_feat=w_feat, link_head=link_head)


def count_parameters(model: Model, n_nodes: int, n_bands: int,
                     node_head: MlpParams = None) -> int:
    total = sum(int(p.size) for p in model.param_dict().values())
    total += n_nodes * n_bands
    if node_head is not None:
        total += sum(int(w.size) for w in node_head.weights)
        total += sum(int(b.size) for b in node_head.biases)
    return total


# ---------------------------------------------------------------------------
# Single-batch objective (training view) and scoring (inference view).
# ---------------------------------------------------------------------------

def _assemble_pairs(batch: BatchGraph, neg):
    neg_src, neg_dst = neg
    pair_src = np.concatenate([batch.src_local, neg_src])
    pair_dst = np.concatenate([batch.dst_local, neg_dst])
    labels = np.concatenate([np.ones(batch.n_events), np.zeros(neg_src.shape[0])])
    return pair_src, pair_dst, labels


def _message_forward_ctx(f: MessageFn, z: np.ndarray):
    pre = z @ f.w1.T + f.b1
    hidden = np.tanh(pre) if f.activation == "tanh" else pre
    out = hidden @ f.w2.T + f.b2
    return out, (z, hidden)


def _message_backward(f: MessageFn, ctx, d_out: np.ndarray) -> dict:
    z, hidden = ctx
    d_w2 = d_out.T @ hidden
    d_b2 = d_out.sum(axis=0)
    d_hidden = d_out @ f.w2
    d_pre = d_hidden * (1.0 - hidden * hidden) if f.activation == "tanh" else d_hidden
    return {
        "mem_w1": d_pre.T @ z,
        "mem_b1": d_pre.sum(axis=0),
        "mem_w2": d_w2,
        "mem_b2": d_b2,
    }


def _batch_partner_local(batch: BatchGraph) -> np.ndarray:
    return np.where(batch.anchor_is_src,
                    batch.dst_local[batch.anchor_event],
                    batch.src_local[batch.anchor_event])


def batch_objective(model: Model, fb: FilterBank, lap, batch: BatchGraph,
                    z_rows: np.ndarray, z_mask: np.ndarray,
                    theta_local: np.ndarray, neg) -> tuple:
    """Training-view loss for one batch, with every saved context needed to
    run the exact backward pass.

    Memory entering the node rows is re-expressed through the current update
    function applied to each node's recorded last input (gradient stops at
    that input), so the loss is differentiable in all parameter groups.
    """
    d_mem = model.f.d_out
    n_local = batch.n_local
    mem_hat = np.zeros((n_local, d_mem))
    idx = np.flatnonzero(z_mask)
    fctx = None
    if idx.size:
        out, fctx = _message_forward_ctx(model.f, z_rows[idx])
        mem_hat[idx] = out
    partner_local = _batch_partner_local(batch)
    h0 = np.concatenate(
        [batch.msg[batch.anchor_event], mem_hat, mem_hat[partner_local]], axis=1
    )
    e0, fc_ctx = mlp_forward(model.fc, h0)
    emb, ufg_ctx = ufgconv_wrapped_forward(lap, e0, theta_local, model.w_feat, fb)
    pair_src, pair_dst, labels = _assemble_pairs(batch, neg)
    h_pair = np.concatenate([emb[pair_src], emb[pair_dst]], axis=1)
    probs_2d, head_ctx = mlp_forward(model.link_head, h_pair)
    probs = probs_2d[:, 0]
    loss, d_probs = bce_loss(probs, labels)
    caches = {
        "batch": batch, "idx": idx, "fctx": fctx, "partner_local": partner_local,
        "fc_ctx": fc_ctx, "ufg_ctx": ufg_ctx, "head_ctx": head_ctx,
        "pair_src": pair_src, "pair_dst": pair_dst, "d_mem": d_mem,
        "emb_shape": emb.shape, "d_probs": d_probs, "labels": labels,
        "probs": probs,
    }
    return loss, caches


def ufgconv_wrapped_forward(lap, e0, theta_local, w_feat, fb):
    return framelet.ufgconv_forward(lap, e0, theta_local, w_feat, fb,
                                    activation="relu")


def batch_gradients(model: Model, caches: dict) -> tuple:
    """Reverse pass matching :func:`batch_objective`; returns (grads dict,
    d_theta)."""
    batch = caches["batch"]
    d_probs = caches["d_probs"]
    head_grads = mlp_backward(caches["head_ctx"], d_probs[:, None])
    d_emb = np.zeros(caches["emb_shape"])
    d_embed = d_emb.shape[1]
    np.add.at(d_emb, caches["pair_src"], head_grads.d_input[:, :d_embed])
    np.add.at(d_emb, caches["pair_dst"], head_grads.d_input[:, d_embed:])
    ufg = framelet.ufgconv_backward(caches["ufg_ctx"], d_emb)
    fc_grads = mlp_backward(caches["fc_ctx"], ufg.dx)
    d_h0 = fc_grads.d_input
    d_msg_width = batch.msg.shape[1]
    d_mem = caches["d_mem"]
    d_mem_hat = d_h0[:, d_msg_width:d_msg_width + d_mem].copy()
    np.add.at(d_mem_hat, caches["partner_local"],
              d_h0[:, d_msg_width + d_mem:])
    grads = {
        "w_feat": ufg.dw_feat,
        "mem_w1": np.zeros_like(model.f.w1),
        "mem_b1": np.zeros_like(model.f.b1),
        "mem_w2": np.zeros_like(model.f.w2),
        "mem_b2": np.zeros_like(model.f.b2),
    }
    idx = caches["idx"]
    if idx.size:
        mem_grads = _message_backward(model.f, caches["fctx"], d_mem_hat[idx])
        grads.update(mem_grads)
    for i, (dw, db) in enumerate(zip(fc_grads.d_weights, fc_grads.d_biases)):
        grads[f"fc_w{i}"] = dw
        grads[f"fc_b{i}"] = db
    for i, (dw, db) in enumerate(zip(head_grads.d_weights, head_grads.d_biases)):
        grads[f"head_w{i}"] = dw
        grads[f"head_b{i}"] = db
    return grads, ufg.dtheta


def score_batch(model: Model, fb: FilterBank, lap, theta: ThetaStore,
                batch: BatchGraph, neg) -> tuple:
    """Inference-view scoring of a batch: stored memory, no contexts kept.

    Returns (scores, labels, loss).
    """
    theta_local = theta_pull(theta, batch.node_ids)
    e0, _ = mlp_forward(model.fc, batch.h0)
    emb, _ = framelet.ufgconv_forward(lap, e0, theta_local, model.w_feat, fb,
                                      activation="relu")
    pair_src, pair_dst, labels = _assemble_pairs(batch, neg)
    h_pair = np.concatenate([emb[pair_src], emb[pair_dst]], axis=1)
    probs = mlp_forward(model.link_head, h_pair)[0][:, 0]
    loss, _ = bce_loss(probs, labels)
    return probs, labels, loss


def _split_report(split: str, scores: list, labels: list, losses: list) -> EvalReport:
    s = np.concatenate(scores) if scores else np.zeros(0)
    y = np.concatenate(labels) if labels else np.zeros(0)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos and n_neg:
        auc = roc_auc(s, y)
        prec = precision(s, y)
    else:
        warnings.warn(f"{split}: only one class present; metrics degenerate",
                      stacklevel=2)
        auc = 0.5
        prec = precision(s, y) if n_pos else 0.0
    return EvalReport(split=split, precision=prec, roc_auc=auc,
                      n_pos=n_pos, n_neg=n_neg,
                      loss=float(np.mean(losses)) if losses else float("nan"))


# ---------------------------------------------------------------------------
# The training loop.
# ---------------------------------------------------------------------------

def _snapshot(model: Model, theta: ThetaStore) -> dict:
    return {
        "params": {k: v.copy() for k, v in model.param_dict().items()},
        "theta": {k: v.copy() for k, v in theta.data.items()},
    }


def _restore(model: Model, theta: ThetaStore, snap: dict) -> None:
    live = model.param_dict()
    for key, value in snap["params"].items():
        np.copyto(live[key], value)
    theta.data.clear()
    theta.data.update({k: v.copy() for k, v in snap["theta"].items()})


def prepare_encoding(log: EventLog, cfg: TrainConfig) -> spectral_attention.SpectralEncoding:
    """Fit the spectral basis per config: on the chronological training
    prefix (svd_fit='train') or on the full stream (svd_fit='all')."""
    fit_rows = int(log.n * cfg.train_frac) if cfg.svd_fit == "train" else None
    return spectral_attention.spectral_encode(
        log, lo=cfg.rank_lo, hi=cfg.rank_hi, tol=cfg.svd_tol, q=cfg.svd_q,
        seed=derive_int(cfg.seed, DOMAIN_SVD), fit_rows=fit_rows,
    )


def train(log: EventLog, cfg: TrainConfig, encoding=None,
          node_task: bool = True) -> TrainResult:
    """End-to-end training with the sliding train/val/test protocol.

    Per epoch, memory starts fresh and the loop visits batches 1..n-2:
    train on batch i, then score batch i+1 (validation) and batch i+2
    (test, through a discarded memory copy) with no parameter updates.
    Theta persists across batches and epochs.  Early stopping watches the
    validation ROC-AUC with the configured patience; the best-validation
    epoch's parameters and reports are returned.
    """
    if encoding is None:
        encoding = prepare_encoding(log, cfg)
    stream = encode_log(log, encoding)
    bounds = batch_bounds(stream.n, cfg.batch_size)
    n_batches = len(bounds)
    if n_batches < 3:
        raise ValueError(
            f"need at least 3 batches, got {n_batches} "
            f"({stream.n} events at batch size {cfg.batch_size})"
        )
    model = init_model(stream.d_msg, cfg)
    fb = haar_filter_bank(cfg.cheb_order, cfg.levels)
    theta = ThetaStore(n_bands=fb.n_bands)
    opt_state = {}
    theta_state = {}
    # Batch adjacency is a fixed function of the stream partition, so the
    # Laplacians are computed once and reused across epochs.
    laps = [None] * n_batches

    def lap_for(i: int, batch: BatchGraph):
        if laps[i] is None:
            laps[i] = framelet.normalized_laplacian(batch.adjacency)
        return laps[i]

    history = []
    best = {"val_auc": -np.inf, "epoch": 0, "snap": None}
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        state = MemoryState.new(stream.n_nodes, cfg.d_mem, stream.d_msg)
        acc = {split: ([], [], []) for split in ("train", "val", "test")}
        for i in range(n_batches - 2):
            batch = make_batch(stream, *bounds[i], state)
            z_rows = state.last_z[batch.node_ids].copy()
            z_mask = state.has_z[batch.node_ids].astype(bool)
            theta_local = theta_pull(theta, batch.node_ids)
            neg = negative_sample(batch, cfg.neg_ratio,
                                  derive_rng(cfg.seed, DOMAIN_TRAIN_NEG, epoch, i))
            lap = lap_for(i, batch)
            loss, caches = batch_objective(model, fb, lap, batch, z_rows,
                                           z_mask, theta_local, neg)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at batch {i} (epoch {epoch})")
            grads, d_theta = batch_gradients(model, caches)
            adamw_step(model.param_dict(), grads, opt_state, cfg.lr,
                       cfg.weight_decay)
            _theta_adamw(theta_local, d_theta, batch.node_ids, theta_state,
                         cfg.lr, cfg.weight_decay)
            theta_push(theta, batch.node_ids, theta_local)
            acc["train"][0].append(caches["probs"])
            acc["train"][1].append(caches["labels"])
            acc["train"][2].append(loss)

            advance_memory(state, stream, *bounds[i], model.f)

            val_batch = make_batch(stream, *bounds[i + 1], state)
            val_neg = negative_sample(val_batch, cfg.neg_ratio,
                                      derive_rng(cfg.seed, DOMAIN_VAL_NEG, epoch, i + 1))
            v_scores, v_labels, v_loss = score_batch(
                model, fb, lap_for(i + 1, val_batch), theta, val_batch, val_neg)
            acc["val"][0].append(v_scores)
            acc["val"][1].append(v_labels)
            acc["val"][2].append(v_loss)

            tmp = state.copy()
            advance_memory(tmp, stream, *bounds[i + 1], model.f)
            test_batch = make_batch(stream, *bounds[i + 2], tmp)
            test_neg = negative_sample(test_batch, cfg.neg_ratio,
                                       derive_rng(cfg.seed, DOMAIN_TEST_NEG, i + 2))
            t_scores, t_labels, t_loss = score_batch(
                model, fb, lap_for(i + 2, test_batch), theta, test_batch, test_neg)
            acc["test"][0].append(t_scores)
            acc["test"][1].append(t_labels)
            acc["test"][2].append(t_loss)

        seconds = time.perf_counter() - tic
        reports = {split: _split_report(split, *acc[split]) for split in acc}
        for split in ("train", "val", "test"):
            r = reports[split]
            history.append({
                "epoch": epoch, "split": split, "precision": r.precision,
                "roc_auc": r.roc_auc, "loss": r.loss, "seconds": seconds,
            })
        if reports["val"].roc_auc > best["val_auc"]:
            best = {"val_auc": reports["val"].roc_auc, "epoch": epoch,
                    "snap": _snapshot(model, theta)}
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    _restore(model, theta, best["snap"])
    # Final reports come from the same frozen-parameter pass a reloaded
    # checkpoint runs, so recorded metrics are reproducible bit-exactly.
    final_reports = evaluate(log, cfg, model, fb, theta, encoding)
    node_head = None
    node_reports = None
    if node_task:
        node_head, node_reports = _train_node_head(model, fb, theta, stream,
                                                   bounds, laps, cfg)
    n_params = count_parameters(model, stream.n_nodes, fb.n_bands, node_head)
    return TrainResult(
        model=model, node_head=node_head, theta=theta, encoding=encoding,
        fb=fb, reports=final_reports, node_reports=node_reports,
        history=history, best_epoch=best["epoch"], n_params=n_params,
        config=cfg,
    )


def _theta_adamw(theta_local: np.ndarray, d_theta: np.ndarray, node_ids,
                 theta_state: dict, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Per-node AdamW on the pulled theta block (moments keyed by global
    node id, kept outside the store)."""
    beta1, beta2 = betas
    if not np.isfinite(d_theta).all():
        raise ValueError("non-finite theta gradient")
    for row, node in enumerate(np.asarray(node_ids, dtype=np.int64)):
        st = theta_state.setdefault(int(node), {
            "m": np.zeros(theta_local.shape[1]),
            "v": np.zeros(theta_local.shape[1]),
            "t": 0,
        })
        st["t"] += 1
        g = d_theta[row]
        theta_local[row] *= 1.0 - lr * weight_decay
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        theta_local[row] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _embed_batch(model: Model, fb: FilterBank, lap, theta: ThetaStore,
                 batch: BatchGraph) -> np.ndarray:
    theta_local = theta_pull(theta, batch.node_ids)
    e0, _ = mlp_forward(model.fc, batch.h0)
    emb, _ = framelet.ufgconv_forward(lap, e0, theta_local, model.w_feat, fb,
                                      activation="relu")
    return emb


def _train_node_head(model: Model, fb: FilterBank, theta: ThetaStore,
                     stream, bounds, laps, cfg: TrainConfig):
    """Fit the state-change head on frozen embeddings.

    One inference pass collects the source node's embedding per event with
    its state label; rows are split chronologically 70/15/15 and a small
    sigmoid MLP is trained with AdamW.  Skipped (returns None) when the
    labels are single-class.
    """
    rows, labels = [], []
    state = MemoryState.new(stream.n_nodes, cfg.d_mem, stream.d_msg)
    for i, (start, stop) in enumerate(bounds):
        batch = make_batch(stream, start, stop, state)
        lap = laps[i] if laps[i] is not None else framelet.normalized_laplacian(batch.adjacency)
        emb = _embed_batch(model, fb, lap, theta, batch)
        rows.append(emb[batch.src_local])
        labels.append(batch.state_label.astype(np.float64))
        advance_memory(state, stream, start, stop, model.f)
    x = np.concatenate(rows)
    y = np.concatenate(labels)
    if len(np.unique(y)) < 2:
        warnings.warn("state labels are single-class; node head skipped",
                      stacklevel=2)
        return None, None
    n = x.shape[0]
    n_train = int(0.7 * n)
    n_val = int(0.15 * n)
    parts = {
        "train": (x[:n_train], y[:n_train]),
        "val": (x[n_train:n_train + n_val], y[n_train:n_train + n_val]),
        "test": (x[n_train + n_val:], y[n_train + n_val:]),
    }
    head = init_mlp([cfg.d_embed, cfg.hidden, 1], ["relu", "sigmoid"],
                    seed=derive_int(cfg.seed, DOMAIN_NODE_HEAD))
    opt_state = {}
    params = {"w0": head.weights[0], "b0": head.biases[0],
              "w1": head.weights[1], "b1": head.biases[1]}
    xt, yt = parts["train"]
    for _ in range(200):
        out, ctx = mlp_forward(head, xt)
        _, d_probs = bce_loss(out[:, 0], yt)
        g = mlp_backward(ctx, d_probs[:, None])
        grads = {"w0": g.d_weights[0], "b0": g.d_biases[0],
                 "w1": g.d_weights[1], "b1": g.d_biases[1]}
        adamw_step(params, grads, opt_state, 1e-3, cfg.weight_decay)
    reports = {}
    for split, (xs, ys) in parts.items():
        if xs.shape[0] == 0 or len(np.unique(ys)) < 2:
            continue
        probs = mlp_forward(head, xs)[0][:, 0]
        loss, _ = bce_loss(probs, ys)
        reports[split] = EvalReport(
            split=f"node_{split}", precision=precision(probs, ys),
            roc_auc=roc_auc(probs, ys), n_pos=int(ys.sum()),
            n_neg=int((1 - ys).sum()), loss=loss,
        )
    return head, reports


def evaluate(log: EventLog, cfg: TrainConfig, model: Model, fb: FilterBank,
             theta: ThetaStore, encoding) -> dict:
    """Scoring-only pass over the stream with frozen parameters, using the
    same sliding protocol and the deterministic test negatives."""
    # Project through the stored basis so checkpoints (which keep only the
    # basis, not the projected rows) evaluate against any compatible log.
    stream = encode_log(log, spectral_attention.encode_rows(encoding, log.features))
    bounds = batch_bounds(stream.n, cfg.batch_size)
    if len(bounds) < 3:
        raise ValueError("need at least 3 batches to evaluate")
    state = MemoryState.new(stream.n_nodes, cfg.d_mem, stream.d_msg)
    acc = {split: ([], [], []) for split in ("train", "val", "test")}
    lap_cache = {}

    def lap_for(i, batch):
        if i not in lap_cache:
            lap_cache[i] = framelet.normalized_laplacian(batch.adjacency)
        return lap_cache[i]

    for i in range(len(bounds) - 2):
        batch = make_batch(stream, *bounds[i], state)
        neg = negative_sample(batch, cfg.neg_ratio,
                              derive_rng(cfg.seed, DOMAIN_TRAIN_NEG, 1, i))
        s, y, loss = score_batch(model, fb, lap_for(i, batch), theta, batch, neg)
        acc["train"][0].append(s)
        acc["train"][1].append(y)
        acc["train"][2].append(loss)
        advance_memory(state, stream, *bounds[i], model.f)

        val_batch = make_batch(stream, *bounds[i + 1], state)
        val_neg = negative_sample(val_batch, cfg.neg_ratio,
                                  derive_rng(cfg.seed, DOMAIN_VAL_NEG, 1, i + 1))
        s, y, loss = score_batch(model, fb, lap_for(i + 1, val_batch), theta,
                                 val_batch, val_neg)
        acc["val"][0].append(s)
        acc["val"][1].append(y)
        acc["val"][2].append(loss)

        tmp = state.copy()
        advance_memory(tmp, stream, *bounds[i + 1], model.f)
        test_batch = make_batch(stream, *bounds[i + 2], tmp)
        test_neg = negative_sample(test_batch, cfg.neg_ratio,
                                   derive_rng(cfg.seed, DOMAIN_TEST_NEG, i + 2))
        s, y, loss = score_batch(model, fb, lap_for(i + 2, test_batch), theta,
                                 test_batch, test_neg)
        acc["test"][0].append(s)
        acc["test"][1].append(y)
        acc["test"][2].append(loss)
    return {split: _split_report(split, *acc[split]) for split in acc}


# ---------------------------------------------------------------------------
# Checkpointing.
# ---------------------------------------------------------------------------

def save_checkpoint(path, result: TrainResult) -> None:
    """Single-file bundle of parameters, theta store, basis, and run
    metadata (versioned)."""
    cfg_json = json.dumps({f: getattr(result.config, f)
                           for f in result.config.__dataclass_fields__})
    arrays = {f"param_{k}": v for k, v in result.model.param_dict().items()}
    theta_ids = np.asarray(sorted(result.theta.data), dtype=np.int64)
    theta_vals = (np.stack([result.theta.data[int(i)] for i in theta_ids])
                  if theta_ids.size else np.zeros((0, result.theta.n_bands)))
    node_arrays = {}
    if result.node_head is not None:
        for i, (w, b) in enumerate(zip(result.node_head.weights,
                                       result.node_head.biases)):
            node_arrays[f"node_w{i}"] = w
            node_arrays[f"node_b{i}"] = b
    np.savez(
        path,
        version=np.int64(1),
        config_json=np.frombuffer(cfg_json.encode(), dtype=np.uint8),
        rng_json=np.frombuffer(
            json.dumps({"root_seed": result.config.seed,
                        "best_epoch": result.best_epoch}).encode(),
            dtype=np.uint8),
        theta_ids=theta_ids,
        theta_vals=theta_vals,
        theta_n_bands=np.int64(result.theta.n_bands),
        theta_default=np.float64(result.theta.default),
        enc_v=result.encoding.v,
        enc_sigma=result.encoding.sigma,
        enc_meta=np.asarray([result.encoding.rank, result.encoding.q,
                             result.encoding.seed,
                             1 if result.encoding.warned else 0], dtype=np.uint64),
        enc_err=np.float64(result.encoding.err),
        fb_meta=np.asarray([result.fb.m, result.fb.levels], dtype=np.int64),
        mem_activation=np.frombuffer(result.model.f.activation.encode(),
                                     dtype=np.uint8),
        **arrays,
        **node_arrays,
    )


def load_checkpoint(path) -> dict:
    """Load a checkpoint into {model, node_head, theta, fb, config, encoding
    (projection basis only), rng} ready for :func:`evaluate`."""
    with np.load(path) as data:
        version = int(data["version"])
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg_fields = json.loads(bytes(data["config_json"]).decode())
        cfg = TrainConfig(**cfg_fields)
        rng_meta = json.loads(bytes(data["rng_json"]).decode())
        activation = bytes(data["mem_activation"]).decode()
        f = MessageFn(w1=data["param_mem_w1"], b1=data["param_mem_b1"],
                      w2=data["param_mem_w2"], b2=data["param_mem_b2"],
                      activation=activation)
        fc_layers = sorted(k for k in data.files if k.startswith("param_fc_w"))
        fc = MlpParams(
            weights=[data[f"param_fc_w{i}"] for i in range(len(fc_layers))],
            biases=[data[f"param_fc_b{i}"] for i in range(len(fc_layers))],
            activations=["relu"] * len(fc_layers),
        )
        head_layers = sorted(k for k in data.files if k.startswith("param_head_w"))
        head_acts = ["relu"] * (len(head_layers) - 1) + ["sigmoid"]
        link_head = MlpParams(
            weights=[data[f"param_head_w{i}"] for i in range(len(head_layers))],
            biases=[data[f"param_head_b{i}"] for i in range(len(head_layers))],
            activations=head_acts,
        )
        model = Model(f=f, fc=fc, w_feat=data["param_w_feat"].copy(),
                      link_head=link_head)
        theta = ThetaStore(n_bands=int(data["theta_n_bands"]),
                           default=float(data["theta_default"]))
        ids = data["theta_ids"]
        vals = data["theta_vals"]
        for i, node in enumerate(ids):
            theta.data[int(node)] = vals[i].copy()
        node_head = None
        node_layers = sorted(k for k in data.files if k.startswith("node_w"))
        if node_layers:
            node_acts = ["relu"] * (len(node_layers) - 1) + ["sigmoid"]
            node_head = MlpParams(
                weights=[data[f"node_w{i}"] for i in range(len(node_layers))],
                biases=[data[f"node_b{i}"] for i in range(len(node_layers))],
                activations=node_acts,
            )
        rank, q, svd_seed, warned = (int(v) for v in data["enc_meta"])
        v = data["enc_v"].copy()
        encoding = spectral_attention.SpectralEncoding(
            xt=np.zeros((0, rank)), v=v, sigma=data["enc_sigma"].copy(),
            rank=rank, err=float(data["enc_err"]), warned=bool(warned),
            q=q, seed=svd_seed,
        )
        fb = haar_filter_bank(int(data["fb_meta"][0]), int(data["fb_meta"][1]))
    return {"model": model, "node_head": node_head, "theta": theta, "fb": fb,
            "config": cfg, "encoding": encoding, "rng": rng_meta}
