"""Point-displacement denoiser: MLP embedding, self-attention stack, 3D head.

The network maps a set of normalized-box-view points (plus a noise-level
conditioning scalar) to one predicted displacement per point. There is no
positional encoding, so the map is permutation-equivariant by
construction. Padded points are excluded from attention and from the
loss; outputs at padded slots are zero.

Weights live in a flat dict of float32 arrays (the checkpoint blob is
float32, so storage round-trips bitwise). Forward and backward promote to
a caller-chosen compute dtype: float32 for throughput in the training
loop, float64 where tests compare against finite differences.

Reverse-mode gradients are implemented directly over this module's own
computation graph; matrix products go through numpy/BLAS while the
elementwise-heavy pieces (GELU, masked softmax, layer norm) are the
kernels of kernels.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError, NumericError
from .rng import substream

LN_EPS = 1e-5


@dataclass(frozen=True)
class DenoiserConfig:
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    feedforward_dim: int = 128
    max_points: int = 128
    noise_embed_dim: int = 64
    profile: str = "desk"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise DataError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.max_points < 1:
            raise DataError("max_points must be >= 1")
        if min(self.hidden_dim, self.num_layers, self.num_heads, self.feedforward_dim, self.noise_embed_dim) < 1:
            raise DataError("all dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "feedforward_dim": self.feedforward_dim,
            "max_points": self.max_points,
            "noise_embed_dim": self.noise_embed_dim,
            "profile": self.profile,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


DESK_CONFIG = DenoiserConfig()
PAPER_CONFIG = DenoiserConfig(
    hidden_dim=1024,
    num_layers=12,
    num_heads=8,
    feedforward_dim=2048,
    max_points=256,
    noise_embed_dim=1024,
    profile="paper",
)


@dataclass(frozen=True)
class PointBatch:
    """Zero-padded point sets with validity mask and per-set conditioning."""

    points: np.ndarray  # (B, N, 3)
    mask: np.ndarray  # (B, N) bool
    c_noise: np.ndarray  # (B,)

    def __post_init__(self):
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise DataError(f"batch points must be (B, N, 3), got {self.points.shape}")
        if self.mask.shape != self.points.shape[:2]:
            raise DataError("mask shape must match (B, N)")
        if self.c_noise.shape != (self.points.shape[0],):
            raise DataError("c_noise must have one entry per batch element")
        if not np.all(self.mask.any(axis=1)):
            raise DataError("every batch element needs at least one valid point")


def make_point_batch(point_sets: list[np.ndarray], c_noise: list[float], max_points: int, pad_to: int | None = None) -> PointBatch:
    """Pad a list of (M_i, 3) NBV point sets into one batch."""
    if len(point_sets) != len(c_noise):
        raise DataError("one c_noise per point set required")
    counts = [len(p) for p in point_sets]
    if min(counts, default=0) < 1:
        raise DataError("point sets must be non-empty")
    if max(counts) > max_points:
        raise DataError(f"point set of size {max(counts)} exceeds max_points {max_points}")
    n = pad_to if pad_to is not None else max(counts)
    if n > max_points:
        raise DataError("pad_to exceeds max_points")
    b = len(point_sets)
    points = np.zeros((b, n, 3))
    mask = np.zeros((b, n), dtype=bool)
    for i, pts in enumerate(point_sets):
        points[i, : counts[i]] = pts
        mask[i, : counts[i]] = True
    return PointBatch(points=points, mask=mask, c_noise=np.asarray(c_noise, dtype=np.float64))


def noise_conditioning(sigma: float) -> float:
    """Noise-level preconditioning scalar ln(sigma) / 4."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    return math.log(sigma) / 4.0


def _layer_names(i: int) -> dict[str, str]:
    p = f"layers.{i}."
    return {k: p + k for k in ("ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.g", "ln2.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2")}


def weight_shapes(config: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    h, f, e = config.hidden_dim, config.feedforward_dim, config.noise_embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w1": (3, h),
        "embed.b1": (h,),
        "embed.w2": (h, h),
        "embed.b2": (h,),
        "noise.w1": (1, e),
        "noise.b1": (e,),
        "noise.w2": (e, h),
        "noise.b2": (h,),
        "head.w": (h, 3),
        "head.b": (3,),
    }
    for i in range(config.num_layers):
        n = _layer_names(i)
        shapes.update(
            {
                n["ln1.g"]: (h,),
                n["ln1.b"]: (h,),
                n["wq"]: (h, h),
                n["bq"]: (h,),
                n["wk"]: (h, h),
                n["bk"]: (h,),
                n["wv"]: (h, h),
                n["bv"]: (h,),
                n["wo"]: (h, h),
                n["bo"]: (h,),
                n["ln2.g"]: (h,),
                n["ln2.b"]: (h,),
                n["ff.w1"]: (h, f),
                n["ff.b1"]: (f,),
                n["ff.w2"]: (f, h),
                n["ff.b2"]: (h,),
            }
        )
    return shapes


def parameter_count(config: DenoiserConfig) -> int:
    return sum(int(np.prod(s)) for s in weight_shapes(config).values())


def init_weights(config: DenoiserConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded initialization; the output head starts at zero so a fresh
    model predicts zero displacement everywhere."""
    rng = substream(seed, "denoiser-init")
    weights: dict[str, np.ndarray] = {}
    for name, shape in weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head."):
            weights[name] = np.zeros(shape, dtype=np.float32)
        elif leaf == "g":
            weights[name] = np.ones(shape, dtype=np.float32)
        elif leaf in ("b", "b1", "b2", "bq", "bk", "bv", "bo"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[0]
            weights[name] = (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)
    return weights


def _check_weights(weights: dict[str, np.ndarray], config: DenoiserConfig) -> None:
    shapes = weight_shapes(config)
    missing = sorted(set(shapes) - set(weights))
    if missing:
        raise DataError(f"missing weight tensors: {missing[:4]}{'...' if len(missing) > 4 else ''}")
    for name, shape in shapes.items():
        if tuple(weights[name].shape) != shape:
            raise DataError(f"weight {name} has shape {weights[name].shape}, expected {shape}")


def _cast(weights: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in weights.items()}


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = x @ w
    out += b
    return out


def _linear_bwd(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    dw = xf.T @ dyf
    db = dyf.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def _merge_heads(x4: np.ndarray) -> np.ndarray:
    b, nh, n, dh = x4.shape
    return np.ascontiguousarray(x4.transpose(0, 2, 1, 3)).reshape(b, n, nh * dh)


def _split_heads(x: np.ndarray, nh: int) -> np.ndarray:
    b, n, h = x.shape
    return np.ascontiguousarray(x.reshape(b, n, nh, h // nh).transpose(0, 2, 1, 3))


def _forward_graph(weights, config: DenoiserConfig, batch: PointBatch, dtype, keep_cache: bool):
    w = _cast(weights, dtype)
    b, n, _ = batch.points.shape
    nh = config.num_heads
    dh = config.hidden_dim // nh
    inv_sqrt_dh = dtype(1.0 / math.sqrt(dh))
    mask = np.ascontiguousarray(batch.mask)
    maskf = mask.astype(dtype)[..., None]

    pts = np.ascontiguousarray(batch.points, dtype=dtype)
    cn = np.ascontiguousarray(batch.c_noise, dtype=dtype)[:, None]

    e1 = _linear(pts, w["embed.w1"], w["embed.b1"])
    a1 = kernels.gelu_fwd(e1)
    x = _linear(a1, w["embed.w2"], w["embed.b2"])

    n1 = _linear(cn, w["noise.w1"], w["noise.b1"])
    na = kernels.gelu_fwd(n1)
    nemb = _linear(na, w["noise.w2"], w["noise.b2"])
    x = x + nemb[:, None, :]

    cache = {"pts": pts, "cn": cn, "e1": e1, "a1": a1, "n1": n1, "na": na, "mask": mask, "maskf": maskf, "layers": []}
    h = config.hidden_dim
    for i in range(config.num_layers):
        ln = _layer_names(i)
        y1, xhat1, rstd1 = kernels.layernorm_fwd(x, w[ln["ln1.g"]], w[ln["ln1.b"]], dtype(LN_EPS))
        # one fused projection for q, k, v
        wqkv = np.concatenate([w[ln["wq"]], w[ln["wk"]], w[ln["wv"]]], axis=1)
        bqkv = np.concatenate([w[ln["bq"]], w[ln["bk"]], w[ln["bv"]]])
        qkv = _linear(y1, wqkv, bqkv)
        q = _split_heads(qkv[..., :h], nh)
        k = _split_heads(qkv[..., h : 2 * h], nh)
        v = _split_heads(qkv[..., 2 * h :], nh)
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= inv_sqrt_dh
        probs = kernels.masked_softmax_fwd(scores.reshape(b, nh * n, n), mask).reshape(b, nh, n, n)
        ctx = _merge_heads(probs @ v)
        attn = _linear(ctx, w[ln["wo"]], w[ln["bo"]])
        x_attn = x
        x_attn += attn

        y2, xhat2, rstd2 = kernels.layernorm_fwd(x_attn, w[ln["ln2.g"]], w[ln["ln2.b"]], dtype(LN_EPS))
        f1 = _linear(y2, w[ln["ff.w1"]], w[ln["ff.b1"]])
        fa = kernels.gelu_fwd(f1)
        f2 = _linear(fa, w[ln["ff.w2"]], w[ln["ff.b2"]])
        x = x_attn
        x += f2
        if keep_cache:
            cache["layers"].append(
                {"y1": y1, "xhat1": xhat1, "rstd1": rstd1, "q": q, "k": k, "v": v, "probs": probs, "ctx": ctx,
                 "y2": y2, "xhat2": xhat2, "rstd2": rstd2, "f1": f1, "fa": fa}
            )

    out = _linear(x, w["head.w"], w["head.b"]) * maskf
    if not np.all(np.isfinite(out)):
        raise NumericError(
            f"non-finite denoiser output (c_noise range [{batch.c_noise.min():.3g}, {batch.c_noise.max():.3g}])"
        )
    cache["x_final"] = x
    return out, cache, w


def forward(weights: dict[str, np.ndarray], config: DenoiserConfig, batch: PointBatch, dtype=np.float64) -> np.ndarray:
    """Per-point 3D displacement predictions; padded slots are zero."""
    _check_weights(weights, config)
    out, _, _ = _forward_graph(weights, config, batch, np.dtype(dtype).type, keep_cache=False)
    return out


def noise_embedding(weights: dict[str, np.ndarray], sigma: float, dtype=np.float64) -> tuple[float, np.ndarray]:
    """Conditioning scalar for sigma and its learned embedding vector."""
    c = noise_conditioning(sigma)
    dt = np.dtype(dtype).type
    cn = np.array([[c]], dtype=dt)
    n1 = _linear(cn, np.asarray(weights["noise.w1"], dt), np.asarray(weights["noise.b1"], dt))
    na = kernels.gelu_fwd(n1)
    emb = _linear(na, np.asarray(weights["noise.w2"], dt), np.asarray(weights["noise.b2"], dt))
    return c, emb[0]


def loss_and_grad(
    weights: dict[str, np.ndarray],
    config: DenoiserConfig,
    batch: PointBatch,
    targets: np.ndarray,
    dtype=np.float64,
    return_per_element: bool = False,
):
    """Masked mean squared displacement error and exact weight gradients.

    The loss is the mean over valid points of the squared L2 norm of
    (prediction - target). With return_per_element=True a third value is
    returned: the mean point loss of each batch element.
    """
    _check_weights(weights, config)
    if targets.shape != batch.points.shape:
        raise DataError(f"targets shape {targets.shape} must match batch points {batch.points.shape}")
    dt = np.dtype(dtype).type
    out, cache, w = _forward_graph(weights, config, batch, dt, keep_cache=True)

    maskf = cache["maskf"]
    n_valid = float(batch.mask.sum())
    diff = (out - np.asarray(targets, dtype=dt)) * maskf
    sq = diff.astype(np.float64) ** 2
    loss = float(np.sum(sq) / n_valid)
    per_element = sq.sum(axis=2).sum(axis=1) / np.maximum(batch.mask.sum(axis=1), 1)

    nh = config.num_heads
    dh = config.hidden_dim // nh
    inv_sqrt_dh = dt(1.0 / math.sqrt(dh))
    grads: dict[str, np.ndarray] = {}

    dout = (2.0 / n_valid) * diff  # already masked
    dx, grads["head.w"], grads["head.b"] = _linear_bwd(cache["x_final"], w["head.w"], dout)

    for i in reversed(range(config.num_layers)):
        ln = _layer_names(i)
        c = cache["layers"][i]
        # feed-forward block
        dfa, grads[ln["ff.w2"]], grads[ln["ff.b2"]] = _linear_bwd(c["fa"], w[ln["ff.w2"]], dx)
        df1 = kernels.gelu_bwd(c["f1"], dfa)
        dy2, grads[ln["ff.w1"]], grads[ln["ff.b1"]] = _linear_bwd(c["y2"], w[ln["ff.w1"]], df1)
        dx_ln2, grads[ln["ln2.g"]], grads[ln["ln2.b"]] = kernels.layernorm_bwd(dy2, c["xhat2"], c["rstd2"], w[ln["ln2.g"]])
        dx += dx_ln2
        # attention block
        dctx, grads[ln["wo"]], grads[ln["bo"]] = _linear_bwd(c["ctx"], w[ln["wo"]], dx)
        dctx4 = _split_heads(dctx, nh)
        dprobs = dctx4 @ c["v"].transpose(0, 1, 3, 2)
        dv4 = c["probs"].transpose(0, 1, 3, 2) @ dctx4
        dscores = kernels.softmax_bwd(c["probs"], dprobs)
        dscores *= inv_sqrt_dh
        dq4 = dscores @ c["k"]
        dk4 = dscores.transpose(0, 1, 3, 2) @ c["q"]
        dqkv = np.concatenate([_merge_heads(dq4), _merge_heads(dk4), _merge_heads(dv4)], axis=-1)
        h = config.hidden_dim
        wqkv = np.concatenate([w[ln["wq"]], w[ln["wk"]], w[ln["wv"]]], axis=1)
        dy1, dwqkv, dbqkv = _linear_bwd(c["y1"], wqkv, dqkv)
        for j, (wn, bn) in enumerate((("wq", "bq"), ("wk", "bk"), ("wv", "bv"))):
            grads[ln[wn]] = dwqkv[:, j * h : (j + 1) * h]
            grads[ln[bn]] = dbqkv[j * h : (j + 1) * h]
        dx_ln1, grads[ln["ln1.g"]], grads[ln["ln1.b"]] = kernels.layernorm_bwd(dy1, c["xhat1"], c["rstd1"], w[ln["ln1.g"]])
        dx += dx_ln1

    # noise-conditioning path (c_noise itself is an input, not a parameter)
    dnemb = dx.sum(axis=1)
    dna, grads["noise.w2"], grads["noise.b2"] = _linear_bwd(cache["na"], w["noise.w2"], dnemb)
    dn1 = kernels.gelu_bwd(cache["n1"], dna)
    _, grads["noise.w1"], grads["noise.b1"] = _linear_bwd(cache["cn"], w["noise.w1"], dn1)

    # point-embedding path
    da1, grads["embed.w2"], grads["embed.b2"] = _linear_bwd(cache["a1"], w["embed.w2"], dx)
    de1 = kernels.gelu_bwd(cache["e1"], da1)
    _, grads["embed.w1"], grads["embed.b1"] = _linear_bwd(cache["pts"], w["embed.w1"], de1)

    if return_per_element:
        return loss, grads, per_element
    return loss, grads
