"""Transformer encoder classifier over 50 x 36 maneuver samples.

Pre-norm residual blocks with learned positional embeddings, mean pooling
over time, and a linear head. Gradients come from the in-repo tape
(:mod:`lcpred.autodiff`); training uses Adam with seeded shuffling and
early stopping on validation accuracy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptySet, InvalidConfig, ShapeMismatch
from .features import N_FEATURES, N_TIMESTEPS


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    pooling: str = "mean"
    n_classes: int = 3
    seed: int = 0
    n_timesteps: int = N_TIMESTEPS
    n_features: int = N_FEATURES

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.pooling not in ("mean", "cls-token"):
            raise InvalidConfig(f"unknown pooling {self.pooling!r}")
        if self.n_classes != 3:
            raise InvalidConfig("this classifier is three-class")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1:
            raise InvalidConfig("lr must be >= 0 and batch_size >= 1")


def init_model(config: ModelConfig, dtype=np.float32) -> dict:
    """Seed-deterministic parameter initialization; returns name -> ndarray."""
    rng = np.random.default_rng(config.seed)
    d, h, f = config.d_model, config.n_heads, config.d_ff
    t_steps, n_feat = config.n_timesteps, config.n_features
    params = {}

    def uniform(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(dtype)

    params["input.w"] = uniform((n_feat, d), n_feat, d)
    params["input.b"] = np.zeros(d, dtype=dtype)
    params["pos"] = (rng.uniform(-0.02, 0.02, size=(t_steps + (config.pooling == "cls-token"), d))
                     .astype(dtype))
    for i in range(config.n_layers):
        p = f"layer{i}"
        for name in ("q", "k", "v", "o"):
            params[f"{p}.attn.{name}.w"] = uniform((d, d), d, d)
            params[f"{p}.attn.{name}.b"] = np.zeros(d, dtype=dtype)
        params[f"{p}.ff.w1"] = uniform((d, f), d, f)
        params[f"{p}.ff.b1"] = np.zeros(f, dtype=dtype)
        params[f"{p}.ff.w2"] = uniform((f, d), f, d)
        params[f"{p}.ff.b2"] = np.zeros(d, dtype=dtype)
        params[f"{p}.ln1.g"] = np.ones(d, dtype=dtype)
        params[f"{p}.ln1.b"] = np.zeros(d, dtype=dtype)
        params[f"{p}.ln2.g"] = np.ones(d, dtype=dtype)
        params[f"{p}.ln2.b"] = np.zeros(d, dtype=dtype)
    params["final_ln.g"] = np.ones(d, dtype=dtype)
    params["final_ln.b"] = np.zeros(d, dtype=dtype)
    params["head.w"] = uniform((d, config.n_classes), d, config.n_classes)
    params["head.b"] = np.zeros(config.n_classes, dtype=dtype)
    if config.pooling == "cls-token":
        params["cls"] = (rng.uniform(-0.02, 0.02, size=(1, d)).astype(dtype))
    return params


def n_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def _attention(h: Tensor, p: dict, prefix: str, config: ModelConfig) -> Tensor:
    b, t, d = h.shape
    n_heads = config.n_heads
    hd = d // n_heads

    def proj(name):
        z = ad.add(ad.matmul(h, p[f"{prefix}.attn.{name}.w"]), p[f"{prefix}.attn.{name}.b"])
        z = ad.reshape(z, (b, t, n_heads, hd))
        return ad.transpose(z, (0, 2, 1, 3))  # (B, H, T, hd)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    att = ad.softmax(scores)
    ctx = ad.matmul(att, v)                       # (B, H, T, hd)
    ctx = ad.transpose(ctx, (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (b, t, d))
    return ad.add(ad.matmul(ctx, p[f"{prefix}.attn.o.w"]), p[f"{prefix}.attn.o.b"]), att


def forward(params: dict, batch: np.ndarray, config: ModelConfig,
            train: bool = False, dropout_rng=None, return_attention: bool = False):
    """Logits for a (B, T, F) batch. Dropout fires only with ``train=True``."""
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1:] != (config.n_timesteps, config.n_features):
        raise ShapeMismatch(f"expected (B, {config.n_timesteps}, {config.n_features}), got {batch.shape}")
    p = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    x = Tensor(batch.astype(params["input.w"].dtype, copy=False))
    drop = config.dropout if train else 0.0
    if drop > 0 and dropout_rng is None:
        dropout_rng = np.random.default_rng(0)

    h = ad.add(ad.matmul(x, p["input.w"]), p["input.b"])
    if config.pooling == "cls-token":
        h = _prepend_cls(h, p["cls"], batch.shape[0], config.d_model)
    h = ad.add(h, p["pos"])
    attentions = []
    for i in range(config.n_layers):
        prefix = f"layer{i}"
        normed = ad.layer_norm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        attn_out, att = _attention(normed, p, prefix, config)
        if drop > 0:
            attn_out = ad.dropout(attn_out, drop, dropout_rng)
        h = ad.add(h, attn_out)
        normed = ad.layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        ff = ad.gelu(ad.add(ad.matmul(normed, p[f"{prefix}.ff.w1"]), p[f"{prefix}.ff.b1"]))
        ff = ad.add(ad.matmul(ff, p[f"{prefix}.ff.w2"]), p[f"{prefix}.ff.b2"])
        if drop > 0:
            ff = ad.dropout(ff, drop, dropout_rng)
        h = ad.add(h, ff)
        attentions.append(att)
    h = ad.layer_norm(h, p["final_ln.g"], p["final_ln.b"])
    if config.pooling == "cls-token":
        pooled = ad.Tensor(h.data[:, 0, :], (h,), _cls_slice_backward(h))
    else:
        pooled = ad.mean(h, axis=1)
    logits = ad.add(ad.matmul(pooled, p["head.w"]), p["head.b"])
    if return_attention:
        return logits, p, attentions
    return logits, p


def _cls_slice_backward(h):
    def bwd(g):
        full = np.zeros_like(h.data)
        full[:, 0, :] = g
        return ((h, full),)
    return bwd


def _prepend_cls(h: Tensor, cls: Tensor, batch_size: int, d_model: int) -> Tensor:
    data = np.concatenate(
        [np.broadcast_to(cls.data, (batch_size, 1, d_model)), h.data], axis=1)

    def bwd(g):
        return ((h, g[:, 1:, :]), (cls, g[:, :1, :].sum(axis=0)))

    return Tensor(data, (h, cls), bwd)


def loss_and_grads(params: dict, batch: np.ndarray, labels: np.ndarray,
                   config: ModelConfig, train: bool = False, dropout_rng=None):
    """Mean cross-entropy and gradient arrays for every parameter tensor."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != np.asarray(batch).shape[0]:
        raise ShapeMismatch("labels must be (B,) matching the batch")
    logits, p = forward(params, batch, config, train=train, dropout_rng=dropout_rng)
    loss = ad.cross_entropy_with_logits(logits, labels)
    loss.backward()
    grads = {name: p[name].grad if p[name].grad is not None else np.zeros_like(params[name])
             for name in params}
    return float(loss.data), grads


def predict(params: dict, sample: np.ndarray, config: ModelConfig):
    """(class index, class probabilities) for one 50 x 36 sample."""
    logits, _ = forward(params, np.asarray(sample)[None, :, :], config, train=False)
    z = logits.data[0].astype(np.float64)
    z -= z.max()
    probs = np.exp(z) / np.exp(z).sum()
    return int(np.argmax(z)), probs


def evaluate(params: dict, X: np.ndarray, y: np.ndarray, config: ModelConfig,
             batch_size: int = 256):
    """(accuracy, predicted labels) over a dataset in eval mode."""
    preds = np.empty(len(X), dtype=int)
    for lo in range(0, len(X), batch_size):
        logits, _ = forward(params, X[lo:lo + batch_size], config, train=False)
        preds[lo:lo + batch_size] = np.argmax(logits.data, axis=1)
    return float((preds == y).mean()), preds


def train(params: dict, train_set, val_set, config: ModelConfig,
          tcfg: TrainConfig):
    """Adam training with seeded shuffling and best-checkpoint retention.

    ``train_set`` and ``val_set`` are (X, y) pairs already normalized with
    the same normalizer. Returns (best params, history).
    """
    X, y = train_set
    Xv, yv = val_set
    if len(X) == 0 or len(Xv) == 0:
        raise EmptySet("training and validation sets must be non-empty")
    rng = np.random.default_rng(tcfg.seed)
    dropout_rng = np.random.default_rng(tcfg.seed + 1)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    best = {k: v.copy() for k, v in params.items()}
    best_acc = -1.0
    since_best = 0
    history = []
    for epoch in range(tcfg.max_epochs):
        order = rng.permutation(len(X))
        losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            loss, grads = loss_and_grads(params, X[idx], y[idx], config,
                                         train=True, dropout_rng=dropout_rng)
            losses.append(loss)
            step += 1
            bc1 = 1.0 - tcfg.beta1 ** step
            bc2 = 1.0 - tcfg.beta2 ** step
            for name, g in grads.items():
                m[name] = tcfg.beta1 * m[name] + (1 - tcfg.beta1) * g
                v2[name] = tcfg.beta2 * v2[name] + (1 - tcfg.beta2) * g * g
                update = (tcfg.lr * (m[name] / bc1)
                          / (np.sqrt(v2[name] / bc2) + tcfg.eps))
                params[name] = params[name] - update.astype(params[name].dtype)
        val_acc, _ = evaluate(params, Xv, yv, config)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc = val_acc
            best = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best > tcfg.patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + manifest of little-endian float32 blobs

CKPT_MAGIC = b"LCCK"


def save_checkpoint(path, params: dict, config: ModelConfig, extra: dict | None = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        blobs.append(arr.tobytes())
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blobs[-1])
    header = {
        "format": "lcpred-checkpoint-v1",
        "modelConfig": asdict(config),
        "manifest": manifest,
    }
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns (params, ModelConfig, header)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    params = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(shape).copy()
    config = ModelConfig(**header["modelConfig"])
    return params, config, header
