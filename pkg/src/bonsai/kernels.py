"""Hot inner loops: depthwise convolution and 3x3 pooling.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with the same signature and the same accumulation order. The backend is
chosen once at import time:

    BONSAI_NO_NUMBA=1   force the numpy path
    (unset)             numba if importable, numpy otherwise

``BACKEND`` names the active path and ``use_backend`` switches it at runtime
(tests and the benchmark compare both).
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_disabled():
    return os.environ.get("BONSAI_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


# --------------------------------------------------------------------------
# numpy fallback
# --------------------------------------------------------------------------

def _np_dw_forward(xp, w, stride, dil, ho, wo):
    n, c = xp.shape[:2]
    k = w.shape[1]
    out = np.zeros((n, c, ho, wo))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for p in range(k):
        for q in range(k):
            win = xp[:, :, p * dil:p * dil + hspan:stride, q * dil:q * dil + wspan:stride]
            out += win * w[:, p, q][None, :, None, None]
    return out


def _np_dw_backward(xp, w, gout, stride, dil):
    n, c, ho, wo = gout.shape
    k = w.shape[1]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for p in range(k):
        for q in range(k):
            hs = slice(p * dil, p * dil + hspan, stride)
            ws = slice(q * dil, q * dil + wspan, stride)
            gxp[:, :, hs, ws] += gout * w[:, p, q][None, :, None, None]
            gw[:, p, q] = (xp[:, :, hs, ws] * gout).sum(axis=(0, 2, 3))
    return gxp, gw


def _np_maxpool_forward(xp, stride, ho, wo):
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    wins = np.stack([xp[:, :, p:p + hspan:stride, q:q + wspan:stride]
                     for p in range(3) for q in range(3)])
    arg = wins.argmax(axis=0)
    out = np.take_along_axis(wins, arg[None], axis=0)[0]
    return out, arg.astype(np.int64)


def _np_maxpool_backward(arg, gout, stride, hp, wp):
    n, c, ho, wo = gout.shape
    gxp = np.zeros((n, c, hp, wp))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for p in range(3):
        for q in range(3):
            mask = arg == p * 3 + q
            gxp[:, :, p:p + hspan:stride, q:q + wspan:stride] += np.where(mask, gout, 0.0)
    return gxp


def _np_avgpool_forward(xp, stride, ho, wo):
    n, c = xp.shape[:2]
    out = np.zeros((n, c, ho, wo))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for p in range(3):
        for q in range(3):
            out += xp[:, :, p:p + hspan:stride, q:q + wspan:stride]
    return out / 9.0


def _np_avgpool_backward(gout, stride, hp, wp):
    n, c, ho, wo = gout.shape
    gxp = np.zeros((n, c, hp, wp))
    share = gout / 9.0
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for p in range(3):
        for q in range(3):
            gxp[:, :, p:p + hspan:stride, q:q + wspan:stride] += share
    return gxp


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

def _build_numba():
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def dw_forward(xp, w, stride, dil, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        k = w.shape[1]
        out = np.zeros((n, c, ho, wo))
        for b in range(n):
            for ch in range(c):
                plane = xp[b, ch]
                o = out[b, ch]
                for p in range(k):
                    for q in range(k):
                        wv = w[ch, p, q]
                        if stride == 1:
                            for i in range(ho):
                                row = plane[i + p * dil, q * dil:q * dil + wo]
                                orow = o[i]
                                for j in range(wo):
                                    orow[j] += row[j] * wv
                        else:
                            for i in range(ho):
                                r = i * stride + p * dil
                                for j in range(wo):
                                    o[i, j] += plane[r, j * stride + q * dil] * wv
        return out

    @njit
    def dw_backward(xp, w, gout, stride, dil):
        n, c, ho, wo = gout.shape
        k = w.shape[1]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for b in range(n):
            for ch in range(c):
                plane = xp[b, ch]
                gplane = gxp[b, ch]
                g = gout[b, ch]
                for p in range(k):
                    for q in range(k):
                        wv = w[ch, p, q]
                        acc = 0.0
                        if stride == 1:
                            for i in range(ho):
                                row = plane[i + p * dil, q * dil:q * dil + wo]
                                grow = gplane[i + p * dil, q * dil:q * dil + wo]
                                gr = g[i]
                                for j in range(wo):
                                    grow[j] += gr[j] * wv
                                    acc += row[j] * gr[j]
                        else:
                            for i in range(ho):
                                r = i * stride + p * dil
                                for j in range(wo):
                                    col = j * stride + q * dil
                                    gplane[r, col] += g[i, j] * wv
                                    acc += plane[r, col] * g[i, j]
                        gw[ch, p, q] += acc
        return gxp, gw

    @njit
    def maxpool_forward(xp, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        out = np.empty((n, c, ho, wo))
        arg = np.empty((n, c, ho, wo), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = xp[b, ch, i * stride, j * stride]
                        where = 0
                        for p in range(3):
                            for q in range(3):
                                v = xp[b, ch, i * stride + p, j * stride + q]
                                if v > best:
                                    best = v
                                    where = p * 3 + q
                        out[b, ch, i, j] = best
                        arg[b, ch, i, j] = where
        return out, arg

    @njit
    def maxpool_backward(arg, gout, stride, hp, wp):
        n, c, ho, wo = gout.shape
        gxp = np.zeros((n, c, hp, wp))
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        a = arg[b, ch, i, j]
                        gxp[b, ch, i * stride + a // 3, j * stride + a % 3] += gout[b, ch, i, j]
        return gxp

    @njit
    def avgpool_forward(xp, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        out = np.zeros((n, c, ho, wo))
        for b in range(n):
            for ch in range(c):
                for p in range(3):
                    for q in range(3):
                        for i in range(ho):
                            for j in range(wo):
                                out[b, ch, i, j] += xp[b, ch, i * stride + p, j * stride + q]
        return out / 9.0

    @njit
    def avgpool_backward(gout, stride, hp, wp):
        n, c, ho, wo = gout.shape
        gxp = np.zeros((n, c, hp, wp))
        for b in range(n):
            for ch in range(c):
                for p in range(3):
                    for q in range(3):
                        for i in range(ho):
                            for j in range(wo):
                                gxp[b, ch, i * stride + p, j * stride + q] += gout[b, ch, i, j] / 9.0
        return gxp

    return {
        "dw_forward": dw_forward,
        "dw_backward": dw_backward,
        "maxpool_forward": maxpool_forward,
        "maxpool_backward": maxpool_backward,
        "avgpool_forward": avgpool_forward,
        "avgpool_backward": avgpool_backward,
    }


NUMPY_KERNELS = {
    "dw_forward": _np_dw_forward,
    "dw_backward": _np_dw_backward,
    "maxpool_forward": _np_maxpool_forward,
    "maxpool_backward": _np_maxpool_backward,
    "avgpool_forward": _np_avgpool_forward,
    "avgpool_backward": _np_avgpool_backward,
}

NUMBA_KERNELS = _build_numba() if numba is not None else None

BACKEND = "numpy"
_active = NUMPY_KERNELS


def use_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global BACKEND, _active
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and NUMBA_KERNELS is None:
        raise RuntimeError("numba is not importable")
    previous = BACKEND
    BACKEND = name
    _active = NUMBA_KERNELS if name == "numba" else NUMPY_KERNELS
    return previous


use_backend("numpy" if (_env_disabled() or NUMBA_KERNELS is None) else "numba")


def dw_forward(xp, w, stride, dil, ho, wo):
    return _active["dw_forward"](xp, w, stride, dil, ho, wo)


def dw_backward(xp, w, gout, stride, dil):
    return _active["dw_backward"](xp, w, np.ascontiguousarray(gout), stride, dil)


def maxpool_forward(xp, stride, ho, wo):
    return _active["maxpool_forward"](xp, stride, ho, wo)


def maxpool_backward(arg, gout, stride, hp, wp):
    return _active["maxpool_backward"](arg, np.ascontiguousarray(gout), stride, hp, wp)


def avgpool_forward(xp, stride, ho, wo):
    return _active["avgpool_forward"](xp, stride, ho, wo)


def avgpool_backward(gout, stride, hp, wp):
    return _active["avgpool_backward"](np.ascontiguousarray(gout), stride, hp, wp)
