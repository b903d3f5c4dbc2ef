"""Convolution and pooling kernels.

Two interchangeable implementations live here: direct nested loops compiled
with numba, and an im2col path in plain numpy. ``BASENAS_BACKEND=numpy``
selects the latter. The two agree to ~1e-12 relative; summation order differs
so bitwise equality is not expected.

Shapes follow NCHW. Weights are ``(C_out, C_in // groups, kh, kw)``.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from .._jit import USE_NUMBA, njit


def out_size(n, k, stride, pad, dilation):
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


# --------------------------------------------------------------------------
# numba direct loops


@njit
def _pad_flat(x, ph, pw, tail):
    B, C, H, W = x.shape
    Wp = W + 2 * pw
    xp = np.zeros((B, C, (H + 2 * ph) * Wp + tail))
    for b in range(B):
        for c in range(C):
            for h in range(H):
                base = (h + ph) * Wp + pw
                for w_ in range(W):
                    xp[b, c, base + w_] = x[b, c, h, w_]
    return xp


@njit
def _conv2d_direct(x, w, sh, sw, ph, pw, dh, dw, groups):
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    cout_g = Cout // groups
    Ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    Wp = W + 2 * pw
    xp = _pad_flat(x, ph, pw, dw * (kw - 1) + sw * Wo)
    y = np.zeros((B, Cout, Ho, Wo))
    for b in range(B):
        for oc in range(Cout):
            g = oc // cout_g
            for icl in range(cin_g):
                ic = g * cin_g + icl
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, icl, i, j]
                        for oh in range(Ho):
                            start = (oh * sh + i * dh) * Wp + j * dw
                            xs = xp[b, ic, start:start + sw * Wo]
                            yr = y[b, oc, oh]
                            for ow in range(Wo):
                                yr[ow] += wv * xs[ow * sw]
    return y


@njit
def _conv2d_input_grad_direct(gy, w, H, W, sh, sw, ph, pw, dh, dw, groups):
    B, Cout, Ho, Wo = gy.shape
    _, cin_g, kh, kw = w.shape
    cout_g = Cout // groups
    Cin = cin_g * groups
    Wp = W + 2 * pw
    gxp = np.zeros((H + 2 * ph) * Wp + dw * (kw - 1) + sw * Wo)
    gx = np.empty((B, Cin, H, W))
    for b in range(B):
        for ic in range(Cin):
            g = ic // cin_g
            icl = ic - g * cin_g
            gxp[:] = 0.0
            for ocl in range(cout_g):
                oc = g * cout_g + ocl
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, icl, i, j]
                        for oh in range(Ho):
                            start = (oh * sh + i * dh) * Wp + j * dw
                            gs = gxp[start:start + sw * Wo]
                            gr = gy[b, oc, oh]
                            for ow in range(Wo):
                                gs[ow * sw] += wv * gr[ow]
            for h in range(H):
                base = (h + ph) * Wp + pw
                for w_ in range(W):
                    gx[b, ic, h, w_] = gxp[base + w_]
    return gx


@njit
def _conv2d_weight_grad_direct(x, gy, kh, kw, sh, sw, ph, pw, dh, dw, groups):
    B, Cin, H, W = x.shape
    _, Cout, Ho, Wo = gy.shape
    cin_g = Cin // groups
    cout_g = Cout // groups
    Wp = W + 2 * pw
    xp = _pad_flat(x, ph, pw, dw * (kw - 1) + sw * Wo)
    gw = np.zeros((Cout, cin_g, kh, kw))
    for oc in range(Cout):
        g = oc // cout_g
        for icl in range(cin_g):
            ic = g * cin_g + icl
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for b in range(B):
                        for oh in range(Ho):
                            start = (oh * sh + i * dh) * Wp + j * dw
                            xs = xp[b, ic, start:start + sw * Wo]
                            gr = gy[b, oc, oh]
                            for ow in range(Wo):
                                acc += xs[ow * sw] * gr[ow]
                    gw[oc, icl, i, j] = acc
    return gw


@njit
def _maxpool_argmax_direct(x, k, s, p):
    B, C, H, W = x.shape
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    idx = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            base = (b * C + c) * H * W
            for oh in range(Ho):
                for ow in range(Wo):
                    best = -np.inf
                    arg = -1
                    for i in range(k):
                        ih = oh * s - p + i
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(k):
                            iw = ow * s - p + j
                            if iw < 0 or iw >= W:
                                continue
                            v = x[b, c, ih, iw]
                            if v > best:
                                best = v
                                arg = ih * W + iw
                    idx[b, c, oh, ow] = base + arg
    return idx


# Stride-1 kernels work on "wide" rows: the padded input is flattened and the
# output is computed at every padded column, so each inner loop runs over a
# whole feature map. Columns past the true output width are junk and cropped.


@njit
def _conv2d_s1(x, w, ph, pw, dh, dw, groups):
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    cout_g = Cout // groups
    Wp = W + 2 * pw
    Ho = H + 2 * ph - dh * (kh - 1)
    Wo = Wp - dw * (kw - 1)
    n = Ho * Wp
    xp = _pad_flat(x, ph, pw, dw * (kw - 1))
    yw = np.zeros(n)
    y = np.empty((B, Cout, Ho, Wo))
    for b in range(B):
        for oc in range(Cout):
            g = oc // cout_g
            yw[:] = 0.0
            for icl in range(cin_g):
                ic = g * cin_g + icl
                for i in range(kh):
                    for j in range(kw):
                        off = i * dh * Wp + j * dw
                        wv = w[oc, icl, i, j]
                        xs = xp[b, ic, off:off + n]
                        for q in range(n):
                            yw[q] += wv * xs[q]
            for oh in range(Ho):
                for ow in range(Wo):
                    y[b, oc, oh, ow] = yw[oh * Wp + ow]
    return y


@njit
def _conv2d_input_grad_s1(gy, w, H, W, ph, pw, dh, dw, groups):
    B, Cout, Ho, Wo = gy.shape
    _, cin_g, kh, kw = w.shape
    cout_g = Cout // groups
    Cin = cin_g * groups
    Wp = W + 2 * pw
    n = Ho * Wp
    gyw = np.zeros((B, Cout, n))
    for b in range(B):
        for oc in range(Cout):
            for oh in range(Ho):
                for ow in range(Wo):
                    gyw[b, oc, oh * Wp + ow] = gy[b, oc, oh, ow]
    gxp = np.zeros(((H + 2 * ph) * Wp + dw * (kw - 1)))
    gx = np.empty((B, Cin, H, W))
    for b in range(B):
        for ic in range(Cin):
            g = ic // cin_g
            icl = ic - g * cin_g
            gxp[:] = 0.0
            for ocl in range(cout_g):
                oc = g * cout_g + ocl
                for i in range(kh):
                    for j in range(kw):
                        off = i * dh * Wp + j * dw
                        wv = w[oc, icl, i, j]
                        gs = gxp[off:off + n]
                        gr = gyw[b, oc]
                        for q in range(n):
                            gs[q] += wv * gr[q]
            for h in range(H):
                base = (h + ph) * Wp + pw
                for w_ in range(W):
                    gx[b, ic, h, w_] = gxp[base + w_]
    return gx


@njit
def _conv2d_weight_grad_s1(x, gy, kh, kw, ph, pw, dh, dw, groups):
    B, Cin, H, W = x.shape
    _, Cout, Ho, Wo = gy.shape
    cin_g = Cin // groups
    cout_g = Cout // groups
    Wp = W + 2 * pw
    n = Ho * Wp
    xp = _pad_flat(x, ph, pw, dw * (kw - 1))
    gyw = np.zeros((B, Cout, n))
    for b in range(B):
        for oc in range(Cout):
            for oh in range(Ho):
                for ow in range(Wo):
                    gyw[b, oc, oh * Wp + ow] = gy[b, oc, oh, ow]
    gw = np.zeros((Cout, cin_g, kh, kw))
    for oc in range(Cout):
        g = oc // cout_g
        for icl in range(cin_g):
            ic = g * cin_g + icl
            for i in range(kh):
                for j in range(kw):
                    off = i * dh * Wp + j * dw
                    acc = 0.0
                    for b in range(B):
                        xs = xp[b, ic, off:off + n]
                        gr = gyw[b, oc]
                        for q in range(n):
                            acc += xs[q] * gr[q]
                    gw[oc, icl, i, j] = acc
    return gw


# --------------------------------------------------------------------------
# numpy im2col path


def _windows(xp, kh, kw, Ho, Wo, sh, sw, dh, dw):
    B, C, _, _ = xp.shape
    sB, sC, sH, sW = xp.strides
    return as_strided(
        xp,
        shape=(B, C, Ho, Wo, kh, kw),
        strides=(sB, sC, sh * sH, sw * sW, dh * sH, dw * sW),
        writeable=False,
    )


def _conv2d_im2col(x, w, sh, sw, ph, pw, dh, dw, groups):
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    Ho = out_size(H, kh, sh, ph, dh)
    Wo = out_size(W, kw, sw, pw, dw)
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))))
    cols = _windows(xp, kh, kw, Ho, Wo, sh, sw, dh, dw)
    cols = cols.reshape(B, groups, cin_g, Ho, Wo, kh, kw)
    wg = w.reshape(groups, Cout // groups, cin_g, kh, kw)
    y = np.einsum("bgchwij,gocij->bgohw", cols, wg, optimize=True)
    return np.ascontiguousarray(y.reshape(B, Cout, Ho, Wo))


def _conv2d_input_grad_im2col(gy, w, H, W, sh, sw, ph, pw, dh, dw, groups):
    B, Cout, Ho, Wo = gy.shape
    _, cin_g, kh, kw = w.shape
    Cin = cin_g * groups
    gyg = gy.reshape(B, groups, Cout // groups, Ho, Wo)
    wg = w.reshape(groups, Cout // groups, cin_g, kh, kw)
    cols = np.einsum("bgohw,gocij->bgchwij", gyg, wg, optimize=True)
    cols = cols.reshape(B, Cin, Ho, Wo, kh, kw)
    gxp = np.zeros((B, Cin, H + 2 * ph + sh * Ho, W + 2 * pw + sw * Wo))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i * dh: i * dh + sh * (Ho - 1) + 1: sh,
                j * dw: j * dw + sw * (Wo - 1) + 1: sw] += cols[..., i, j]
    return np.ascontiguousarray(gxp[:, :, ph: ph + H, pw: pw + W])


def _conv2d_weight_grad_im2col(x, gy, kh, kw, sh, sw, ph, pw, dh, dw, groups):
    B, Cin, H, W = x.shape
    _, Cout, Ho, Wo = gy.shape
    cin_g = Cin // groups
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))))
    cols = _windows(xp, kh, kw, Ho, Wo, sh, sw, dh, dw)
    cols = cols.reshape(B, groups, cin_g, Ho, Wo, kh, kw)
    gyg = gy.reshape(B, groups, Cout // groups, Ho, Wo)
    gw = np.einsum("bgchwij,bgohw->gocij", cols, gyg, optimize=True)
    return np.ascontiguousarray(gw.reshape(Cout, cin_g, kh, kw))


def _maxpool_argmax_numpy(x, k, s, p):
    B, C, H, W = x.shape
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    cols = _windows(np.ascontiguousarray(xp), k, k, Ho, Wo, s, s, 1, 1)
    flat = cols.reshape(B, C, Ho, Wo, k * k)
    a = np.argmax(flat, axis=-1)  # first maximum wins, as in the loop kernel
    ih = np.arange(Ho)[:, None] * s - p + a // k
    iw = np.arange(Wo)[None, :] * s - p + a % k
    base = (np.arange(B)[:, None] * C + np.arange(C)[None, :]) * H * W
    return (base[:, :, None, None] + ih * W + iw).astype(np.int64)


# --------------------------------------------------------------------------
# dispatch


def _args(x, w, stride, padding, dilation, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    return (int(stride[0]), int(stride[1]), int(padding[0]), int(padding[1]),
            int(dilation[0]), int(dilation[1]), int(groups))


def conv2d(x, w, stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1, backend=None):
    a = _args(x, w, stride, padding, dilation, groups)
    if _numba(backend):
        if a[0] == 1 and a[1] == 1:
            return _conv2d_s1(x, w, *a[2:])
        return _conv2d_direct(x, w, *a)
    return _conv2d_im2col(x, w, *a)


def conv2d_input_grad(gy, w, in_hw, stride=(1, 1), padding=(0, 0), dilation=(1, 1),
                      groups=1, backend=None):
    a = _args(gy, w, stride, padding, dilation, groups)
    H, W = int(in_hw[0]), int(in_hw[1])
    if _numba(backend):
        if a[0] == 1 and a[1] == 1:
            return _conv2d_input_grad_s1(gy, w, H, W, *a[2:])
        return _conv2d_input_grad_direct(gy, w, H, W, *a)
    return _conv2d_input_grad_im2col(gy, w, H, W, *a)


def conv2d_weight_grad(x, gy, k_hw, stride=(1, 1), padding=(0, 0), dilation=(1, 1),
                       groups=1, backend=None):
    a = _args(x, gy, stride, padding, dilation, groups)
    kh, kw = int(k_hw[0]), int(k_hw[1])
    if _numba(backend):
        if a[0] == 1 and a[1] == 1:
            return _conv2d_weight_grad_s1(x, gy, kh, kw, *a[2:])
        return _conv2d_weight_grad_direct(x, gy, kh, kw, *a)
    return _conv2d_weight_grad_im2col(x, gy, kh, kw, *a)


def maxpool_argmax(x, k, stride, pad, backend=None):
    """Flat indices into ``x`` of each pooling window's maximum (first on ties)."""
    if _numba(backend):
        return _maxpool_argmax_direct(x, int(k), int(stride), int(pad))
    return _maxpool_argmax_numpy(x, int(k), int(stride), int(pad))


def _numba(backend):
    if backend is None:
        return USE_NUMBA
    return backend == "numba"
