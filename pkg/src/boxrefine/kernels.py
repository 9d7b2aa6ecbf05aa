"""Hot numeric kernels with two interchangeable backends.

Two families of inner loops dominate runtime and are provided both as
numba @njit kernels and as pure-numpy implementations:

  * convex polygon clipping for rotated-rectangle overlap (IoU / NMS /
    detection matching): branchy scalar code where numba is orders of
    magnitude faster than interpreted Python;
  * elementwise ops of the denoiser (tanh-GELU, masked softmax, layer
    norm, forward and backward): transcendental-bound loops where
    numpy's SIMD float32 ufuncs beat scalar libm calls from numba on a
    single core.

Backend selection: BOXREFINE_BACKEND may be set to "numba" or "numpy" to
force one backend everywhere. Unset ("auto"), each kernel uses the
backend that wins its benchmark (see benchmarks/bench_kernels.py, which
times both via the `numba_impl` / `numpy_impl` namespaces exported
here). Both backends implement identical algorithms; results agree to
float rounding. Matrix multiplies are deliberately left to numpy/BLAS in
the callers.

Workspace note: masked_softmax_fwd may reuse its `scores` argument as
scratch space; callers must not reuse that array afterwards.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

from .errors import ConfigError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# Pure-numpy backend
# ---------------------------------------------------------------------------


def _clip_area_py(ca, cb):
    """Area of the intersection of two convex quads (CCW corners, (4,2))."""
    poly = [(float(ca[i, 0]), float(ca[i, 1])) for i in range(4)]
    for e in range(4):
        if not poly:
            return 0.0
        p1x, p1y = float(cb[e, 0]), float(cb[e, 1])
        p2x, p2y = float(cb[(e + 1) % 4, 0]), float(cb[(e + 1) % 4, 1])
        ex, ey = p2x - p1x, p2y - p1y
        out = []
        n = len(poly)
        for i in range(n):
            sx, sy = poly[i - 1]
            px, py = poly[i]
            side_s = ex * (sy - p1y) - ey * (sx - p1x)
            side_p = ex * (py - p1y) - ey * (px - p1x)
            if side_p >= 0.0:
                if side_s < 0.0:
                    t = side_s / (side_s - side_p)
                    out.append((sx + t * (px - sx), sy + t * (py - sy)))
                out.append((px, py))
            elif side_s >= 0.0:
                t = side_s / (side_s - side_p)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
        poly = out
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i - 1]
        x1, y1 = poly[i]
        area += x0 * y1 - x1 * y0
    return abs(area) * 0.5


def _pairwise_overlap_py(corners_a, corners_b):
    na, nb = corners_a.shape[0], corners_b.shape[0]
    out = np.zeros((na, nb), dtype=np.float64)
    for i in range(na):
        for j in range(nb):
            out[i, j] = _clip_area_py(corners_a[i], corners_b[j])
    return out


def _nms_keep_py(corners, areas, order, threshold):
    n = corners.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    alive = np.ones(n, dtype=np.bool_)
    for oi in range(n):
        i = order[oi]
        if not alive[i]:
            continue
        keep[i] = True
        for oj in range(oi + 1, n):
            j = order[oj]
            if not alive[j]:
                continue
            inter = _clip_area_py(corners[i], corners[j])
            union = areas[i] + areas[j] - inter
            iou = inter / union if union > 1e-12 else 0.0
            if iou > threshold:
                alive[j] = False
    return keep


def _gelu_inner_tanh_py(x):
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(_GELU_A)
    t = np.multiply(x, x)
    np.multiply(t, x, out=t)
    np.multiply(t, a, out=t)
    np.add(t, x, out=t)
    np.multiply(t, c, out=t)
    np.tanh(t, out=t)
    return t


def _gelu_fwd_py(x):
    # tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3)))
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    t = _gelu_inner_tanh_py(x)
    np.add(t, one, out=t)
    np.multiply(t, x, out=t)
    np.multiply(t, half, out=t)
    return t


def _gelu_bwd_py(x, dy):
    c = x.dtype.type(_GELU_C)
    a3 = x.dtype.type(3.0 * _GELU_A)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    t = _gelu_inner_tanh_py(x)
    du = np.multiply(x, x)
    np.multiply(du, a3, out=du)
    np.add(du, one, out=du)
    np.multiply(du, c, out=du)  # du = c (1 + 3a x^2)
    np.multiply(du, x, out=du)
    grad = np.multiply(t, t)
    np.subtract(one, grad, out=grad)
    np.multiply(grad, du, out=grad)  # x (1 - t^2) du
    np.add(grad, t, out=grad)
    np.add(grad, one, out=grad)
    np.multiply(grad, half, out=grad)
    np.multiply(grad, dy, out=grad)
    return grad


def _layernorm_fwd_py(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[..., 0]


def _layernorm_bwd_py(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[..., None]
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dgamma, dbeta


def _masked_softmax_fwd_py(scores, key_mask):
    # scores (B, R, Nk), key_mask (B, Nk) bool; rows must have >=1 valid
    # key. The scores array is consumed as workspace (see module note).
    bias = np.zeros(key_mask.shape, dtype=scores.dtype)
    bias[~key_mask] = scores.dtype.type(-1e30)
    t = scores
    np.add(t, bias[:, None, :], out=t)
    m = t.max(axis=-1, keepdims=True)  # equals the max over valid keys
    np.subtract(t, m, out=t)
    np.exp(t, out=t)  # masked slots underflow to exactly 0
    np.divide(t, t.sum(axis=-1, keepdims=True), out=t)
    return t


def _softmax_bwd_py(probs, dprobs):
    t = np.multiply(probs, dprobs)
    inner = t.sum(axis=-1, keepdims=True)
    np.subtract(dprobs, inner, out=t)
    np.multiply(t, probs, out=t)
    return t


numpy_impl = SimpleNamespace(
    clip_area=_clip_area_py,
    pairwise_overlap=_pairwise_overlap_py,
    nms_keep=_nms_keep_py,
    gelu_fwd=_gelu_fwd_py,
    gelu_bwd=_gelu_bwd_py,
    layernorm_fwd=_layernorm_fwd_py,
    layernorm_bwd=_layernorm_bwd_py,
    masked_softmax_fwd=_masked_softmax_fwd_py,
    softmax_bwd=_softmax_bwd_py,
)


# ---------------------------------------------------------------------------
# Numba backend
# ---------------------------------------------------------------------------

numba_impl = None

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _clip_area_nb(ca, cb):
        poly_x = np.empty(16, dtype=np.float64)
        poly_y = np.empty(16, dtype=np.float64)
        new_x = np.empty(16, dtype=np.float64)
        new_y = np.empty(16, dtype=np.float64)
        n = 4
        for i in range(4):
            poly_x[i] = ca[i, 0]
            poly_y[i] = ca[i, 1]
        for e in range(4):
            if n == 0:
                return 0.0
            p1x = cb[e, 0]
            p1y = cb[e, 1]
            p2x = cb[(e + 1) % 4, 0]
            p2y = cb[(e + 1) % 4, 1]
            ex = p2x - p1x
            ey = p2y - p1y
            m = 0
            for i in range(n):
                sj = i - 1 if i > 0 else n - 1
                sx = poly_x[sj]
                sy = poly_y[sj]
                px = poly_x[i]
                py = poly_y[i]
                side_s = ex * (sy - p1y) - ey * (sx - p1x)
                side_p = ex * (py - p1y) - ey * (px - p1x)
                if side_p >= 0.0:
                    if side_s < 0.0:
                        t = side_s / (side_s - side_p)
                        new_x[m] = sx + t * (px - sx)
                        new_y[m] = sy + t * (py - sy)
                        m += 1
                    new_x[m] = px
                    new_y[m] = py
                    m += 1
                elif side_s >= 0.0:
                    t = side_s / (side_s - side_p)
                    new_x[m] = sx + t * (px - sx)
                    new_y[m] = sy + t * (py - sy)
                    m += 1
            n = m
            for i in range(n):
                poly_x[i] = new_x[i]
                poly_y[i] = new_y[i]
        if n < 3:
            return 0.0
        area = 0.0
        for i in range(n):
            j = i - 1 if i > 0 else n - 1
            area += poly_x[j] * poly_y[i] - poly_x[i] * poly_y[j]
        return abs(area) * 0.5

    @numba.njit(cache=True)
    def _pairwise_overlap_nb(corners_a, corners_b):
        na = corners_a.shape[0]
        nb = corners_b.shape[0]
        out = np.zeros((na, nb), dtype=np.float64)
        for i in range(na):
            for j in range(nb):
                out[i, j] = _clip_area_nb(corners_a[i], corners_b[j])
        return out

    @numba.njit(cache=True)
    def _nms_keep_nb(corners, areas, order, threshold):
        n = corners.shape[0]
        keep = np.zeros(n, dtype=np.bool_)
        alive = np.ones(n, dtype=np.bool_)
        for oi in range(n):
            i = order[oi]
            if not alive[i]:
                continue
            keep[i] = True
            for oj in range(oi + 1, n):
                j = order[oj]
                if not alive[j]:
                    continue
                inter = _clip_area_nb(corners[i], corners[j])
                union = areas[i] + areas[j] - inter
                iou = inter / union if union > 1e-12 else 0.0
                if iou > threshold:
                    alive[j] = False
        return keep

    @numba.njit(cache=True)
    def _gelu_fwd_nb(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
            flat_o[i] = 0.5 * v * (1.0 + t)
        return out

    @numba.njit(cache=True)
    def _gelu_bwd_nb(x, dy):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_d = dy.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            flat_o[i] = flat_d[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out

    @numba.njit(cache=True)
    def _layernorm_fwd_nb(x, gamma, beta, eps):
        rows = x.reshape(-1, x.shape[-1])
        h = rows.shape[1]
        y = np.empty_like(x)
        yr = y.reshape(-1, h)
        xhat = np.empty_like(x)
        xhr = xhat.reshape(-1, h)
        rstd = np.empty(rows.shape[0], dtype=x.dtype)
        for r in range(rows.shape[0]):
            mu = 0.0
            for c in range(h):
                mu += rows[r, c]
            mu /= h
            var = 0.0
            for c in range(h):
                d = rows[r, c] - mu
                var += d * d
            var /= h
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for c in range(h):
                xv = (rows[r, c] - mu) * rs
                xhr[r, c] = xv
                yr[r, c] = xv * gamma[c] + beta[c]
        return y, xhat, rstd.reshape(x.shape[:-1])

    @numba.njit(cache=True)
    def _layernorm_bwd_nb(dy, xhat, rstd, gamma):
        h = dy.shape[-1]
        dyr = dy.reshape(-1, h)
        xhr = xhat.reshape(-1, h)
        rsr = rstd.ravel()
        dx = np.empty_like(dy)
        dxr = dx.reshape(-1, h)
        dgamma = np.zeros(h, dtype=np.float64)
        dbeta = np.zeros(h, dtype=np.float64)
        for r in range(dyr.shape[0]):
            m1 = 0.0
            m2 = 0.0
            for c in range(h):
                dxh = dyr[r, c] * gamma[c]
                m1 += dxh
                m2 += dxh * xhr[r, c]
            m1 /= h
            m2 /= h
            for c in range(h):
                dxh = dyr[r, c] * gamma[c]
                dxr[r, c] = (dxh - m1 - xhr[r, c] * m2) * rsr[r]
                dgamma[c] += dyr[r, c] * xhr[r, c]
                dbeta[c] += dyr[r, c]
        return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)

    @numba.njit(cache=True)
    def _masked_softmax_fwd_nb(scores, key_mask):
        b, rows, nk = scores.shape
        probs = np.empty_like(scores)
        for bi in range(b):
            for r in range(rows):
                m = -np.inf
                for k in range(nk):
                    if key_mask[bi, k] and scores[bi, r, k] > m:
                        m = scores[bi, r, k]
                z = 0.0
                for k in range(nk):
                    if key_mask[bi, k]:
                        e = math.exp(scores[bi, r, k] - m)
                        probs[bi, r, k] = e
                        z += e
                    else:
                        probs[bi, r, k] = 0.0
                inv = 1.0 / z
                for k in range(nk):
                    probs[bi, r, k] *= inv
        return probs

    @numba.njit(cache=True)
    def _softmax_bwd_nb(probs, dprobs):
        rows = probs.reshape(-1, probs.shape[-1])
        drows = dprobs.reshape(-1, probs.shape[-1])
        out = np.empty_like(probs)
        orows = out.reshape(-1, probs.shape[-1])
        nk = rows.shape[1]
        for r in range(rows.shape[0]):
            inner = 0.0
            for k in range(nk):
                inner += rows[r, k] * drows[r, k]
            for k in range(nk):
                orows[r, k] = rows[r, k] * (drows[r, k] - inner)
        return out

    numba_impl = SimpleNamespace(
        clip_area=_clip_area_nb,
        pairwise_overlap=_pairwise_overlap_nb,
        nms_keep=_nms_keep_nb,
        gelu_fwd=_gelu_fwd_nb,
        gelu_bwd=_gelu_bwd_nb,
        layernorm_fwd=_layernorm_fwd_nb,
        layernorm_bwd=_layernorm_bwd_nb,
        masked_softmax_fwd=_masked_softmax_fwd_nb,
        softmax_bwd=_softmax_bwd_nb,
    )


def _resolve_backend():
    """Pick the active implementation of each kernel from BOXREFINE_BACKEND.

    "numba" / "numpy" force one backend everywhere. Unset (auto), each
    kernel uses its measured winner on a single core (see
    benchmarks/bench_kernels.py): numba for the branchy clipping loops
    and the fused per-row reductions (softmax backward, layer norm),
    numpy for the SIMD-friendly transcendental sweeps (softmax forward,
    tanh-GELU).
    """
    requested = os.environ.get("BOXREFINE_BACKEND", "").strip().lower()
    if requested not in ("", "auto", "numba", "numpy"):
        raise ConfigError(f"BOXREFINE_BACKEND must be 'numba', 'numpy' or 'auto', got {requested!r}")
    if requested == "numpy":
        return "numpy", {name: numpy_impl for name in _KERNEL_NAMES}
    if requested == "numba":
        if not HAVE_NUMBA:
            raise ConfigError("BOXREFINE_BACKEND=numba but numba is not importable")
        return "numba", {name: numba_impl for name in _KERNEL_NAMES}
    if not HAVE_NUMBA:
        return "numpy", {name: numpy_impl for name in _KERNEL_NAMES}
    table = {name: numba_impl for name in _KERNEL_NAMES}
    table["masked_softmax_fwd"] = numpy_impl
    table["gelu_fwd"] = numpy_impl
    table["gelu_bwd"] = numpy_impl
    return "auto", table


_KERNEL_NAMES = (
    "clip_area",
    "pairwise_overlap",
    "nms_keep",
    "gelu_fwd",
    "gelu_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "masked_softmax_fwd",
    "softmax_bwd",
)

BACKEND, _table = _resolve_backend()

clip_area = _table["clip_area"].clip_area
pairwise_overlap = _table["pairwise_overlap"].pairwise_overlap
nms_keep = _table["nms_keep"].nms_keep
gelu_fwd = _table["gelu_fwd"].gelu_fwd
gelu_bwd = _table["gelu_bwd"].gelu_bwd
layernorm_fwd = _table["layernorm_fwd"].layernorm_fwd
layernorm_bwd = _table["layernorm_bwd"].layernorm_bwd
masked_softmax_fwd = _table["masked_softmax_fwd"].masked_softmax_fwd
softmax_bwd = _table["softmax_bwd"].softmax_bwd
