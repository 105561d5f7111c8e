"""Trainable attention refiner for uncertain points, in plain float64 numpy.

Architecture: a two-layer embedding lifts the 5 + C point features to a
256-d token, four stacked self-attention layers follow (each layer's input
is its predecessor's output), their outputs are concatenated and a
three-layer head maps the 1024-d result to class logits.

Each attention layer computes Q and K with ONE shared projection (so the raw
score matrix Q K^T is symmetric by construction), V with a second
projection, scales scores by 1/sqrt(d) and applies a row softmax. No
positional encoding is used: the points are an unordered set and the whole
network is permutation-equivariant.

The loss is weighted softmax cross-entropy plus the Lovasz-Softmax Jaccard
surrogate; gradients are exact analytic expressions, verified against
central finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rand import derive_seed, generator
from .errors import DataFormatError, NumericError
from .kitti_io import atomic_write_bytes
from .uncertainty import UncertainPointSet, sample_positions

CHECKPOINT_MAGIC = b"TUPR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    in_dim: int = 25
    embed_hidden: int = 128
    embed_dim: int = 256
    attn_layers: int = 4
    head_hidden1: int = 512
    head_hidden2: int = 256
    num_classes: int = 20

    @property
    def concat_dim(self) -> int:
        return self.attn_layers * self.embed_dim


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_backward(softmaxed: np.ndarray, grad: np.ndarray) -> np.ndarray:
    inner = (grad * softmaxed).sum(axis=1, keepdims=True)
    return softmaxed * (grad - inner)


def attention_layer(
    f_in: np.ndarray,
    wp: np.ndarray,
    bp: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
) -> np.ndarray:
    """One self-attention layer with shared Q/K projection.

    Q = K = f_in @ wp + bp, V = f_in @ wv + bv, scores = Q K^T / sqrt(d),
    output = row_softmax(scores) @ V.
    """
    out, _ = _attention_forward(f_in, wp, bp, wv, bv)
    return out


def _attention_forward(f_in, wp, bp, wv, bv):
    n, d = f_in.shape[0], wp.shape[1]
    if f_in.shape[1] != wp.shape[0]:
        raise DataFormatError(
            f"attention input width {f_in.shape[1]} does not match projection {wp.shape}"
        )
    q = f_in @ wp + bp
    v = f_in @ wv + bv
    scores = (q @ q.T) / np.sqrt(d)
    attn = softmax_rows(scores)
    out = attn @ v
    return out, (f_in, q, v)


def _attention_backward(cache, wp, wv, d_out):
    f_in, q, v = cache
    d = q.shape[1]
    scores = (q @ q.T) / np.sqrt(d)
    attn = softmax_rows(scores)

    d_attn = d_out @ v.T
    d_v = attn.T @ d_out
    d_scores = _softmax_backward(attn, d_attn) / np.sqrt(d)
    d_q = (d_scores + d_scores.T) @ q

    grads = {
        "wp": f_in.T @ d_q,
        "bp": d_q.sum(axis=0),
        "wv": f_in.T @ d_v,
        "bv": d_v.sum(axis=0),
    }
    d_in = d_q @ wp.T + d_v @ wv.T
    return d_in, grads


class RefinerModel:
    """All learnable parameters plus the (non-trained) input standardization.

    Parameter blocks, in declaration (and checkpoint) order: the two
    embedding layers, per attention layer the shared Q/K projection and the
    V projection, the three head layers, then the feature mean and scale
    buffers.
    """

    def __init__(self, dims: ModelDims = ModelDims(), seed: int = 0):
        self.dims = dims
        rng = generator("refiner-init", seed)
        self.params: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"{name}.b"] = np.zeros(fan_out)

        dense("embed0", dims.in_dim, dims.embed_hidden)
        dense("embed1", dims.embed_hidden, dims.embed_dim)
        for i in range(dims.attn_layers):
            dense(f"attn{i}.p", dims.embed_dim, dims.embed_dim)
            dense(f"attn{i}.v", dims.embed_dim, dims.embed_dim)
        dense("head0", dims.concat_dim, dims.head_hidden1)
        dense("head1", dims.head_hidden1, dims.head_hidden2)
        dense("head2", dims.head_hidden2, dims.num_classes)

        self.feature_mean = np.zeros(dims.in_dim)
        self.feature_scale = np.ones(dims.in_dim)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_feature_standardization(self, features: np.ndarray) -> None:
        self.feature_mean = features.mean(axis=0)
        self.feature_scale = np.maximum(features.std(axis=0), 1e-6)

    def forward(self, features: np.ndarray, want_cache: bool = False):
        """Logits (n, C) for feature rows (n, 5 + C)."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.dims.in_dim:
            raise DataFormatError(
                f"features must be (n, {self.dims.in_dim}), got {features.shape}"
            )
        if features.shape[0] < 1:
            raise DataFormatError("forward needs at least one point")
        p = self.params

        x = (features - self.feature_mean) / self.feature_scale
        a0 = x @ p["embed0.w"] + p["embed0.b"]
        h0 = _relu(a0)
        a1 = h0 @ p["embed1.w"] + p["embed1.b"]
        embedded = _relu(a1)

        layer_outs = []
        attn_caches = []
        layer_in = embedded
        for i in range(self.dims.attn_layers):
            out, cache = _attention_forward(
                layer_in, p[f"attn{i}.p.w"], p[f"attn{i}.p.b"],
                p[f"attn{i}.v.w"], p[f"attn{i}.v.b"],
            )
            if not np.isfinite(out).all():
                raise NumericError(f"non-finite activations in attention layer {i}")
            layer_outs.append(out)
            attn_caches.append(cache)
            layer_in = out

        concat = np.concatenate(layer_outs, axis=1)
        z0 = concat @ p["head0.w"] + p["head0.b"]
        r0 = _relu(z0)
        z1 = r0 @ p["head1.w"] + p["head1.b"]
        r1 = _relu(z1)
        logits = r1 @ p["head2.w"] + p["head2.b"]
        if not np.isfinite(logits).all():
            raise NumericError("non-finite logits")

        if not want_cache:
            return logits
        cache = {
            "x": x, "a0": a0, "h0": h0, "a1": a1,
            "attn": attn_caches, "concat": concat,
            "z0": z0, "r0": r0, "z1": z1, "r1": r1,
        }
        return logits, cache

    def backward(self, cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Analytic gradients of every trainable parameter."""
        p = self.params
        grads: dict[str, np.ndarray] = {}

        grads["head2.w"] = cache["r1"].T @ d_logits
        grads["head2.b"] = d_logits.sum(axis=0)
        d_r1 = d_logits @ p["head2.w"].T
        d_z1 = d_r1 * (cache["z1"] > 0)
        grads["head1.w"] = cache["r0"].T @ d_z1
        grads["head1.b"] = d_z1.sum(axis=0)
        d_r0 = d_z1 @ p["head1.w"].T
        d_z0 = d_r0 * (cache["z0"] > 0)
        grads["head0.w"] = cache["concat"].T @ d_z0
        grads["head0.b"] = d_z0.sum(axis=0)
        d_concat = d_z0 @ p["head0.w"].T

        d = self.dims.embed_dim
        d_carry = np.zeros_like(d_concat[:, :d])
        for i in reversed(range(self.dims.attn_layers)):
            d_out = d_concat[:, i * d : (i + 1) * d] + d_carry
            d_carry, layer_grads = _attention_backward(
                cache["attn"][i], p[f"attn{i}.p.w"], p[f"attn{i}.v.w"], d_out
            )
            grads[f"attn{i}.p.w"] = layer_grads["wp"]
            grads[f"attn{i}.p.b"] = layer_grads["bp"]
            grads[f"attn{i}.v.w"] = layer_grads["wv"]
            grads[f"attn{i}.v.b"] = layer_grads["bv"]

        d_a1 = d_carry * (cache["a1"] > 0)
        grads["embed1.w"] = cache["h0"].T @ d_a1
        grads["embed1.b"] = d_a1.sum(axis=0)
        d_h0 = d_a1 @ p["embed1.w"].T
        d_a0 = d_h0 * (cache["a0"] > 0)
        grads["embed0.w"] = cache["x"].T @ d_a0
        grads["embed0.b"] = d_a0.sum(axis=0)
        return grads


def wce_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    ignore_class: int | None = None,
):
    """Weighted cross entropy, mean over non-ignored points; returns (loss, d_logits)."""
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    n = logits.shape[0]
    mask = np.ones(n, dtype=bool) if ignore_class is None else targets != ignore_class
    m = int(mask.sum())
    if m == 0:
        raise DataFormatError("weighted cross entropy: every target is ignored")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    w = np.where(mask, weights[targets], 0.0)
    loss = float(-(w * log_probs[rows, targets])[mask].sum() / m)

    d_logits = np.exp(log_probs)
    d_logits[rows, targets] -= 1.0
    d_logits *= (w / m)[:, None]
    return loss, d_logits


def lovasz_softmax_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    ignore_class: int | None = None,
):
    """Lovasz extension of the per-class Jaccard loss, mean over present classes.

    Per class c: errors m_i = |1{y_i = c} - p_i(c)| are sorted descending
    (ties keep original order) and dotted with the discrete gradient of the
    Jaccard loss along that order. Returns (loss, d_probs); the gradient
    uses the subgradient of the stable ordering.
    """
    targets = np.asarray(targets)
    n = probs.shape[0]
    mask = np.ones(n, dtype=bool) if ignore_class is None else targets != ignore_class
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        raise DataFormatError("Lovasz loss: every target is ignored")

    kept_targets = targets[rows]
    present = np.unique(kept_targets)
    d_probs = np.zeros_like(probs)
    total = 0.0
    for c in present:
        fg = (kept_targets == c).astype(np.float64)
        p_c = probs[rows, c]
        errors = np.abs(fg - p_c)
        order = np.argsort(-errors, kind="stable")
        fg_sorted = fg[order]
        fg_total = fg_sorted.sum()
        intersection = fg_total - np.cumsum(fg_sorted)
        union = fg_total + np.cumsum(1.0 - fg_sorted)
        jaccard = 1.0 - intersection / union
        grad = np.empty_like(jaccard)
        grad[0] = jaccard[0]
        grad[1:] = jaccard[1:] - jaccard[:-1]
        total += float(errors[order] @ grad)

        d_err = np.empty_like(grad)
        d_err[order] = grad
        d_probs[rows, c] += -np.sign(fg - p_c) * d_err

    total /= len(present)
    d_probs /= len(present)
    return total, d_probs


@dataclass
class LossResult:
    total: float
    wce: float
    lovasz: float
    grads: dict[str, np.ndarray]
    logits: np.ndarray


def total_loss(
    model: RefinerModel,
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    ignore_class: int | None = None,
) -> LossResult:
    """Combined loss (cross entropy + Lovasz) with full parameter gradients."""
    logits, cache = model.forward(features, want_cache=True)
    wce, d_logits_wce = wce_loss(logits, targets, weights, ignore_class)
    probs = softmax_rows(logits)
    lovasz, d_probs = lovasz_softmax_loss(probs, targets, ignore_class)
    d_logits = d_logits_wce + _softmax_backward(probs, d_probs)
    grads = model.backward(cache, d_logits)
    result = LossResult(total=wce + lovasz, wce=wce, lovasz=lovasz, grads=grads, logits=logits)
    if not np.isfinite(result.total):
        raise NumericError(f"non-finite loss: wce={wce}, lovasz={lovasz}")
    return result


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    class_weight_eps: float = 1.02
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise DataFormatError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise DataFormatError("learning_rate must be > 0")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)


class Adam:
    """Classic Adam with bias correction; state keyed like the param dict."""

    def __init__(self, model: RefinerModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        correction1 = 1.0 - cfg.beta1**self.t
        correction2 = 1.0 - cfg.beta2**self.t
        for key, param in self.model.params.items():
            g = grads[key]
            self.m[key] = cfg.beta1 * self.m[key] + (1.0 - cfg.beta1) * g
            self.v[key] = cfg.beta2 * self.v[key] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[key] / correction1
            v_hat = self.v[key] / correction2
            param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def class_frequency_weights(
    label_arrays, num_classes: int, ignore_class: int | None, eps: float = 1.02
) -> np.ndarray:
    """w_c = 1 / ln(eps + f_c) from corpus class frequencies; ignore weight 0."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_arrays:
        counts += np.bincount(np.asarray(labels), minlength=num_classes)
    if ignore_class is not None:
        counts[ignore_class] = 0
    total = counts.sum()
    if total == 0:
        raise DataFormatError("cannot derive class weights: no labeled points")
    weights = 1.0 / np.log(eps + counts / total)
    if ignore_class is not None:
        weights[ignore_class] = 0.0
    return weights


@dataclass
class EpochStats:
    epoch: int
    loss: float
    wce: float
    lovasz: float


def train(
    model: RefinerModel,
    scans,
    cfg: TrainConfig,
    n_u: int = 4096,
    ignore_class: int | None = None,
) -> list[EpochStats]:
    """Train in place on (pool, ground-truth-labels) pairs; returns the epoch log.

    One optimizer step per scan per epoch, on a freshly sampled batch of at
    most ``n_u`` pool entries. Scan order is reshuffled each epoch; all
    randomness derives from ``cfg.seed`` so identical runs produce
    bit-identical parameters. The coarse probabilities inside the features
    are plain inputs: nothing upstream of the refiner is updated.
    """
    scans = [(pool, np.asarray(gt)) for pool, gt in scans if len(pool) > 0]
    if not scans:
        raise DataFormatError("training needs at least one scan with a non-empty pool")
    for pool, gt in scans:
        if len(gt) != len(pool):
            raise DataFormatError("ground-truth labels must cover the pool")

    weights = cfg.class_weights
    if weights is None:
        weights = class_frequency_weights(
            [gt for _, gt in scans], model.dims.num_classes, ignore_class, cfg.class_weight_eps
        )

    model.set_feature_standardization(
        np.concatenate([pool.features for pool, _ in scans], axis=0)
    )

    optimizer = Adam(model, cfg)
    log: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = generator("epoch-order", cfg.seed, epoch).permutation(len(scans))
        totals = np.zeros(3)
        for scan_index in order:
            pool, gt = scans[scan_index]
            pos = sample_positions(
                len(pool), n_u, derive_seed(cfg.seed, "batch", epoch, int(scan_index))
            )
            try:
                result = total_loss(
                    model, pool.features[pos], gt[pos], weights, ignore_class
                )
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, scan {int(scan_index)}: {exc}"
                ) from exc
            optimizer.step(result.grads)
            totals += (result.total, result.wce, result.lovasz)
        mean = totals / len(scans)
        log.append(EpochStats(epoch=epoch, loss=mean[0], wce=mean[1], lovasz=mean[2]))
    return log


def refine(
    model: RefinerModel,
    pool: UncertainPointSet,
    context_limit: int = 16384,
    chunk_size: int = 4096,
    seed: int = 0,
) -> np.ndarray:
    """Predicted class per pool entry (argmax, ties to the smaller id).

    Pools up to ``context_limit`` run as one attention context; larger pools
    are split into seeded random chunks of ``chunk_size`` so every entry
    still attends to a representative sample.
    """
    features = pool.features if isinstance(pool, UncertainPointSet) else np.asarray(pool)
    m = len(features)
    if m == 0:
        raise DataFormatError("cannot refine an empty pool")
    if m <= context_limit:
        return np.argmax(model.forward(features), axis=1).astype(np.int32)

    perm = generator("refine-chunks", seed).permutation(m)
    out = np.empty(m, dtype=np.int32)
    for start in range(0, m, chunk_size):
        sel = perm[start : start + chunk_size]
        out[sel] = np.argmax(model.forward(features[sel]), axis=1)
    return out


def save_checkpoint(model: RefinerModel, path) -> None:
    """Magic + version + dims header, then raw f64 blocks in declaration order."""
    d = model.dims
    header = CHECKPOINT_MAGIC + struct.pack(
        "<8I", CHECKPOINT_VERSION, d.in_dim, d.embed_hidden, d.embed_dim,
        d.attn_layers, d.head_hidden1, d.head_hidden2, d.num_classes,
    )
    blocks = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params.values()]
    blocks.append(np.ascontiguousarray(model.feature_mean, dtype="<f8").tobytes())
    blocks.append(np.ascontiguousarray(model.feature_scale, dtype="<f8").tobytes())
    atomic_write_bytes(path, header + b"".join(blocks))


def load_checkpoint(path) -> RefinerModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a refiner checkpoint (bad magic)")
    fields = struct.unpack_from("<8I", data, 4)
    if fields[0] != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {fields[0]}")
    dims = ModelDims(*fields[1:])
    model = RefinerModel(dims)
    offset = 4 + struct.calcsize("<8I")
    expected = offset + 8 * (model.num_parameters() + 2 * dims.in_dim)
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: size {len(data)} does not match header (expected {expected})"
        )
    for key, param in model.params.items():
        block = np.frombuffer(data, dtype="<f8", count=param.size, offset=offset)
        model.params[key] = block.reshape(param.shape).copy()
        offset += 8 * param.size
    model.feature_mean = np.frombuffer(data, dtype="<f8", count=dims.in_dim, offset=offset).copy()
    offset += 8 * dims.in_dim
    model.feature_scale = np.frombuffer(data, dtype="<f8", count=dims.in_dim, offset=offset).copy()
    return model
