"""Numba kernels for 3D convolution.

All kernels accumulate in float64 with a fixed loop order, so results do not
depend on how callers split work across threads. Flat indices are cast to
unsigned so LLVM drops the negative-index wraparound check and vectorizes the
inner loops.
"""
import numba as nb
import numpy as np

_u = nb.uint64
_TILE = 256


@nb.njit(nogil=True, cache=True, fastmath={'contract'})
def conv_s1(xp, w, out):
    """Stride-1 correlation of padded input ``xp`` (N,C,Dp,Hp,Wp) with ``w`` (F,C,k,k,k).

    Output positions are computed on the padded flat grid so every kernel tap
    is a contiguous shifted slice; columns that wrap past a row are discarded.
    """
    N, C, Dp, Hp, Wp = xp.shape
    F, k = w.shape[0], w.shape[2]
    Do, Ho, Wo = out.shape[2], out.shape[3], out.shape[4]
    K = k * k * k
    Lp = Dp * Hp * Wp
    L = (Do - 1) * Hp * Wp + (Ho - 1) * Wp + Wo
    offs = np.empty(K, np.int64)
    wk = np.empty((F, C, K))
    o = 0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                offs[o] = i * Hp * Wp + j * Wp + l
                for f in range(F):
                    for c in range(C):
                        wk[f, c, o] = w[f, c, i, j, l]
                o += 1
    F4 = F - F % 4
    buf = np.empty(F * Do * Hp * Wp)
    acc = np.empty(F * _TILE)
    for n in range(N):
        x1 = xp[n].ravel()
        for p0 in range(0, L, _TILE):
            t = min(_TILE, L - p0)
            acc[:] = 0.0
            for c in range(C):
                for o in range(K):
                    base = _u(c * Lp + p0 + offs[o])
                    # four output channels share each input load
                    for f in range(0, F4, 4):
                        w0 = wk[f, c, o]
                        w1 = wk[f + 1, c, o]
                        w2 = wk[f + 2, c, o]
                        w3 = wk[f + 3, c, o]
                        a0 = _u(f * _TILE)
                        for q in range(t):
                            xv = np.float64(x1[base + _u(q)])
                            i = a0 + _u(q)
                            acc[i] += w0 * xv
                            acc[i + _u(_TILE)] += w1 * xv
                            acc[i + _u(2 * _TILE)] += w2 * xv
                            acc[i + _u(3 * _TILE)] += w3 * xv
                    for f in range(F4, F):
                        wv = wk[f, c, o]
                        ab = _u(f * _TILE)
                        for q in range(t):
                            acc[ab + _u(q)] += wv * x1[base + _u(q)]
            for f in range(F):
                ob = f * Do * Hp * Wp + p0
                for q in range(t):
                    buf[ob + q] = acc[f * _TILE + q]
        for f in range(F):
            for d in range(Do):
                for h in range(Ho):
                    rb = f * Do * Hp * Wp + d * Hp * Wp + h * Wp
                    for x in range(Wo):
                        out[n, f, d, h, x] = buf[rb + x]


@nb.njit(nogil=True, cache=True)
def im2col(xp, k, s, Do, Ho, Wo, cols):
    """Unfold one padded sample ``xp`` (C,Dp,Hp,Wp) into ``cols`` (C*k^3, Do*Ho*Wo)."""
    C = xp.shape[0]
    r = 0
    for c in range(C):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    p = 0
                    for d in range(Do):
                        for h in range(Ho):
                            row = xp[c, d * s + i, h * s + j]
                            for x in range(Wo):
                                cols[r, p] = row[_u(x * s + l)]
                                p += 1
                    r += 1


@nb.njit(nogil=True, cache=True)
def col2im(cols, k, s, Do, Ho, Wo, gxp):
    """Adjoint of :func:`im2col`: accumulate ``cols`` back into ``gxp`` (C,Dp,Hp,Wp)."""
    C = gxp.shape[0]
    r = 0
    for c in range(C):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    p = 0
                    for d in range(Do):
                        for h in range(Ho):
                            row = gxp[c, d * s + i, h * s + j]
                            for x in range(Wo):
                                row[_u(x * s + l)] += cols[r, p]
                                p += 1
                    r += 1
