"""Reference convolutional classifier with explicit forward and backward.

The network is small on purpose: every gradient is computed by hand in
float64, which keeps central finite differences a usable oracle.  The
architecture pattern is fixed — inputs are zero-centered (x - 0.5), then
repeated [3x3 same conv, relu, 2x2 max pool] blocks, then a dense
embedding layer (relu) and a dense output layer — with sizes chosen at
construction.  The embedding (the input to the final dense layer) is
exposed because the embedding-distance stability loss needs it.

The reference instance takes 32x32x3 input: conv 16 -> conv 32 ->
embedding 64 -> class logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envsim import bilinear_resize
from .seeding import derive_rng

LOG_EPS = 1e-12
CHECKPOINT_VERSION = 1
INPUT_SIZE = 32
LOSS_KINDS = ("relative_entropy", "embedding_distance")


class CheckpointError(ValueError):
    """Checkpoint file or sidecar is missing, mismatched, or wrong version."""


@dataclass
class ConvLayer:
    weights: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)


@dataclass
class Dense:
    weights: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)


@dataclass
class ModelParams:
    conv_stack: list[ConvLayer]
    dense_embed: Dense
    dense_out: Dense

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays in fixed serialization order."""
        out = []
        for i, layer in enumerate(self.conv_stack):
            out.append((f"conv{i}.weights", layer.weights))
            out.append((f"conv{i}.bias", layer.bias))
        out.append(("dense_embed.weights", self.dense_embed.weights))
        out.append(("dense_embed.bias", self.dense_embed.bias))
        out.append(("dense_out.weights", self.dense_out.weights))
        out.append(("dense_out.bias", self.dense_out.bias))
        return out

    @property
    def num_classes(self) -> int:
        return self.dense_out.weights.shape[1]


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    probabilities: np.ndarray
    embedding: np.ndarray


@dataclass(frozen=True)
class LossConfig:
    """Names the stability loss and its weight; alpha = 0 is plain CE."""

    loss_kind: str = "relative_entropy"
    alpha: float = 0.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


# ---------------------------------------------------------------------------
# construction


def _tree_map(fn, *params: ModelParams) -> ModelParams:
    convs = [
        ConvLayer(
            weights=fn(*(p.conv_stack[i].weights for p in params)),
            bias=fn(*(p.conv_stack[i].bias for p in params)),
        )
        for i in range(len(params[0].conv_stack))
    ]
    return ModelParams(
        conv_stack=convs,
        dense_embed=Dense(
            weights=fn(*(p.dense_embed.weights for p in params)),
            bias=fn(*(p.dense_embed.bias for p in params)),
        ),
        dense_out=Dense(
            weights=fn(*(p.dense_out.weights for p in params)),
            bias=fn(*(p.dense_out.bias for p in params)),
        ),
    )


def copy_params(params: ModelParams) -> ModelParams:
    return _tree_map(np.copy, params)


def zeros_like_params(params: ModelParams) -> ModelParams:
    return _tree_map(np.zeros_like, params)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_params(
    input_hw: tuple[int, int],
    conv_channels: list[int],
    embed_dim: int,
    num_classes: int,
    seed: int,
) -> ModelParams:
    """He-uniform initialized parameters for the fixed block pattern.

    Each conv block halves the spatial size, so both input dimensions
    must be divisible by 2**len(conv_channels).
    """
    h, w = input_hw
    factor = 2 ** len(conv_channels)
    if h % factor or w % factor:
        raise ValueError(f"input {h}x{w} not divisible by pooling factor {factor}")
    rng = derive_rng(seed, "init")
    conv_stack = []
    c_in = 3
    for c_out in conv_channels:
        conv_stack.append(
            ConvLayer(
                weights=_he_uniform(rng, (3, 3, c_in, c_out), fan_in=9 * c_in),
                bias=np.zeros(c_out),
            )
        )
        c_in = c_out
    flat_dim = (h // factor) * (w // factor) * c_in
    dense_embed = Dense(
        weights=_he_uniform(rng, (flat_dim, embed_dim), fan_in=flat_dim),
        bias=np.zeros(embed_dim),
    )
    dense_out = Dense(
        weights=_he_uniform(rng, (embed_dim, num_classes), fan_in=embed_dim),
        bias=np.zeros(num_classes),
    )
    return ModelParams(conv_stack=conv_stack, dense_embed=dense_embed, dense_out=dense_out)


def init_reference_params(num_classes: int, seed: int) -> ModelParams:
    """The stock 32x32 architecture: conv 16 -> conv 32 -> embed 64 -> C."""
    return build_params((INPUT_SIZE, INPUT_SIZE), [16, 32], 64, num_classes, seed)


def preprocess(img: np.ndarray, height: int = INPUT_SIZE, width: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resize to the model input size; no cropping."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    return bilinear_resize(img, height, width)


# ---------------------------------------------------------------------------
# primitive ops


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction); expects finite logits.

    Non-finite inputs are not rejected here; they propagate as NaN so a
    training loop can detect divergence at its loss check.
    """
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(probs: np.ndarray, target: int) -> float:
    """-log(p_target), with the probability floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < p.shape[-1]:
        raise ValueError(f"target {target} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[target], LOG_EPS)))


def predict_topk(probs: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k (class, confidence) pairs, ties broken by ascending class index."""
    p = np.asarray(probs, dtype=np.float64)
    n = p.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} classes")
    order = np.lexsort((np.arange(n), -p))
    return [(int(i), float(p[i])) for i in order[:k]]


def _conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """3x3 same convolution, stride 1, zero padding."""
    kh, kw = layer.weights.shape[:2]
    ph, pw = kh // 2, kw // 2
    b, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    z = np.zeros((b, h, w, layer.weights.shape[3]), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            z += xp[:, dy:dy + h, dx:dx + w, :] @ layer.weights[dy, dx]
    return z + layer.bias


def _conv_backward(x: np.ndarray, layer: ConvLayer, dz: np.ndarray):
    kh, kw = layer.weights.shape[:2]
    ph, pw = kh // 2, kw // 2
    b, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    dw = np.zeros_like(layer.weights)
    dxp = np.zeros_like(xp)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, dy:dy + h, dx:dx + w, :]
            dw[dy, dx] = np.tensordot(patch, dz, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, dy:dy + h, dx:dx + w, :] += dz @ layer.weights[dy, dx].T
    db = dz.sum(axis=(0, 1, 2))
    dx = dxp[:, ph:ph + h, pw:pw + w, :]
    return dx, dw, db


def _maxpool_forward(x: np.ndarray):
    """2x2 max pool, stride 2; ties resolve to the first window position."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling requires even spatial dims, got {h}x{w}")
    windows = (
        x.reshape(b, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, h // 2, w // 2, c, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(dout: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    b, h, w, c = in_shape
    dwindows = np.zeros((b, h // 2, w // 2, c, 4), dtype=np.float64)
    np.put_along_axis(dwindows, idx[..., None], dout[..., None], axis=-1)
    return (
        dwindows.reshape(b, h // 2, w // 2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, h, w, c)
    )


# ---------------------------------------------------------------------------
# forward / backward


def forward_batch(params: ModelParams, x: np.ndarray):
    """Forward pass over a batch (B, H, W, 3); returns results and caches."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[3] != 3:
        raise ValueError(f"expected batch of (H, W, 3) images, got shape {x.shape}")
    conv_caches = []
    act = x - 0.5  # center [0, 1] intensities
    for layer in params.conv_stack:
        z = _conv_forward(act, layer)
        relu = np.maximum(z, 0.0)
        pooled, idx = _maxpool_forward(relu)
        conv_caches.append((act, z, idx, relu.shape))
        act = pooled
    flat = act.reshape(act.shape[0], -1)
    if flat.shape[1] != params.dense_embed.weights.shape[0]:
        raise ValueError(
            f"wrong input size: flattened dim {flat.shape[1]} does not match "
            f"embedding weights {params.dense_embed.weights.shape[0]}"
        )
    emb_pre = flat @ params.dense_embed.weights + params.dense_embed.bias
    embedding = np.maximum(emb_pre, 0.0)
    logits = embedding @ params.dense_out.weights + params.dense_out.bias
    probs = softmax(logits, axis=-1)
    cache = {
        "conv": conv_caches,
        "flat": flat,
        "emb_pre": emb_pre,
        "embedding": embedding,
        "pooled_shape": act.shape,
    }
    return logits, probs, embedding, cache


def forward(params: ModelParams, img: np.ndarray) -> ForwardResult:
    """Forward pass for one image; deterministic and pure."""
    logits, probs, embedding, _ = forward_batch(params, np.asarray(img)[None])
    return ForwardResult(logits=logits[0], probabilities=probs[0], embedding=embedding[0])


def _backward_batch(params: ModelParams, cache, dlogits: np.ndarray, dembedding=None) -> ModelParams:
    """Backpropagate logits (and optional direct embedding) gradients."""
    grads = zeros_like_params(params)
    embedding = cache["embedding"]
    grads.dense_out.weights[:] = embedding.T @ dlogits
    grads.dense_out.bias[:] = dlogits.sum(axis=0)
    demb = dlogits @ params.dense_out.weights.T
    if dembedding is not None:
        demb = demb + dembedding
    demb = demb * (cache["emb_pre"] > 0.0)
    flat = cache["flat"]
    grads.dense_embed.weights[:] = flat.T @ demb
    grads.dense_embed.bias[:] = demb.sum(axis=0)
    dact = (demb @ params.dense_embed.weights.T).reshape(cache["pooled_shape"])
    for i in reversed(range(len(params.conv_stack))):
        x_in, z, idx, relu_shape = cache["conv"][i]
        drelu = _maxpool_backward(dact, idx, relu_shape)
        dz = drelu * (z > 0.0)
        dact, dw, db = _conv_backward(x_in, params.conv_stack[i], dz)
        grads.conv_stack[i].weights[:] = dw
        grads.conv_stack[i].bias[:] = db
    return grads


def _softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Jacobian-transpose product of softmax, rowwise."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


@dataclass(frozen=True)
class GradientResult:
    grads: ModelParams
    loss: float
    loss_base: float  # mean cross-entropy term
    loss_stability: float  # mean stability term (before alpha)


def gradient(params: ModelParams, batch, loss_config: LossConfig) -> GradientResult:
    """Exact mean-batch gradients of cross-entropy + alpha * stability loss.

    ``batch`` is a list of (image, paired_image_or_None, target).  The
    cross-entropy term sees only the clean image; the stability term
    couples the clean and paired forward passes, and gradients flow
    through both branches.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    alpha = loss_config.alpha
    xs = np.stack([item[0] for item in batch])
    targets = np.asarray([item[2] for item in batch], dtype=np.int64)
    n = len(batch)

    logits, probs, embedding, cache = forward_batch(params, xs)
    n_classes = probs.shape[1]
    if targets.min() < 0 or targets.max() >= n_classes:
        raise ValueError("target class out of range")

    loss_base = float(
        np.mean([-np.log(max(probs[i, targets[i]], LOG_EPS)) for i in range(n)])
    )
    # d(-log max(p_t, eps))/dp, zero where the floor is engaged
    dprobs = np.zeros_like(probs)
    rows = np.arange(n)
    p_t = probs[rows, targets]
    live = p_t > LOG_EPS
    dprobs[rows[live], targets[live]] = -1.0 / p_t[live]
    dlogits = _softmax_vjp(probs, dprobs) / n

    if alpha == 0.0:
        grads = _backward_batch(params, cache, dlogits)
        return GradientResult(grads=grads, loss=loss_base, loss_base=loss_base, loss_stability=0.0)

    if any(item[1] is None for item in batch):
        raise ValueError(f"loss kind {loss_config.loss_kind!r} requires a paired image per item")
    xps = np.stack([item[1] for item in batch])
    logits_p, probs_p, embedding_p, cache_p = forward_batch(params, xps)

    if loss_config.loss_kind == "relative_entropy":
        clean_floored = np.maximum(probs, LOG_EPS)
        noisy_floored = np.maximum(probs_p, LOG_EPS)
        per_item = (probs * (np.log(clean_floored) - np.log(noisy_floored))).sum(axis=1)
        loss_stab = float(per_item.mean())
        # clean branch: d/dp [p * (log p~ - log p'~)]
        dprobs_s = np.log(clean_floored) - np.log(noisy_floored)
        dprobs_s = dprobs_s + np.where(probs > LOG_EPS, probs / clean_floored, 0.0)
        dlogits = dlogits + _softmax_vjp(probs, dprobs_s) * (alpha / n)
        # noisy branch: d/dp' [-p * log p'~]
        dprobs_p = np.where(probs_p > LOG_EPS, -probs / noisy_floored, 0.0)
        dlogits_p = _softmax_vjp(probs_p, dprobs_p) * (alpha / n)
        grads = _backward_batch(params, cache, dlogits)
        grads_p = _backward_batch(params, cache_p, dlogits_p)
    else:  # embedding_distance
        diff = embedding - embedding_p
        norms = np.sqrt((diff * diff).sum(axis=1))
        loss_stab = float(norms.mean())
        safe = np.where(norms > 0.0, norms, 1.0)
        dpair = np.where(norms[:, None] > 0.0, diff / safe[:, None], 0.0) * (alpha / n)
        grads = _backward_batch(params, cache, dlogits, dembedding=dpair)
        grads_p = _backward_batch(params, cache_p, np.zeros_like(logits_p), dembedding=-dpair)

    grads = _tree_map(np.add, grads, grads_p)
    total = loss_base + alpha * loss_stab
    return GradientResult(grads=grads, loss=total, loss_base=loss_base, loss_stability=loss_stab)


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    learning_rate: float,
    momentum: float,
    velocity: ModelParams | None = None,
) -> tuple[ModelParams, ModelParams]:
    """Classical momentum update; returns new params and new velocity.

    v <- momentum * v - lr * g;  p <- p + v.  Inputs are never mutated.
    """
    for (name_p, arr_p), (name_g, arr_g) in zip(params.arrays(), grads.arrays()):
        if arr_p.shape != arr_g.shape:
            raise ValueError(f"shape mismatch for {name_p}: {arr_p.shape} vs {arr_g.shape}")
    if velocity is None:
        velocity = zeros_like_params(params)
    new_velocity = _tree_map(lambda v, g: momentum * v - learning_rate * g, velocity, grads)
    new_params = _tree_map(np.add, params, new_velocity)
    return new_params, new_velocity


# ---------------------------------------------------------------------------
# checkpoints: raw little-endian float32 + JSON shape sidecar


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_params(params: ModelParams, path: str | Path) -> None:
    path = Path(path)
    blob = b"".join(arr.astype("<f4").tobytes() for _, arr in params.arrays())
    path.write_bytes(blob)
    sidecar = {
        "format_version": CHECKPOINT_VERSION,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in params.arrays()],
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> ModelParams:
    path = Path(path)
    sidecar_file = _sidecar_path(path)
    if not path.is_file() or not sidecar_file.is_file():
        raise CheckpointError(f"checkpoint or sidecar missing for {path}")
    sidecar = json.loads(sidecar_file.read_text(encoding="utf-8"))
    version = sidecar.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version!r} found, expected {CHECKPOINT_VERSION}"
        )
    blob = path.read_bytes()
    arrays = {}
    offset = 0
    for spec in sidecar["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: binary payload shorter than sidecar shapes")
        arrays[spec["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: binary payload longer than sidecar shapes")

    conv_names = sorted(
        {name.split(".")[0] for name in arrays if name.startswith("conv")},
        key=lambda s: int(s[4:]),
    )
    try:
        conv_stack = [
            ConvLayer(weights=arrays[f"{c}.weights"], bias=arrays[f"{c}.bias"]) for c in conv_names
        ]
        dense_embed = Dense(weights=arrays["dense_embed.weights"], bias=arrays["dense_embed.bias"])
        dense_out = Dense(weights=arrays["dense_out.weights"], bias=arrays["dense_out.bias"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: sidecar missing array {exc}") from exc
    return ModelParams(conv_stack=conv_stack, dense_embed=dense_embed, dense_out=dense_out)


def checkpoint_digest(params: ModelParams) -> str:
    """SHA-256 of the float32 serialization; handy for reproducibility checks."""
    blob = b"".join(arr.astype("<f4").tobytes() for _, arr in params.arrays())
    return hashlib.sha256(blob).hexdigest()
