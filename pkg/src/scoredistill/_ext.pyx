# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: fused direct-parameter distillation loop and splat rasterizer."""

from libc.math cimport exp, log, sqrt, INFINITY, isfinite, NAN
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453

# record columns, shared with generator.RECORD_FIELDS
cdef enum:
    R_T = 0
    R_ALPHA = 1
    R_DOT = 2
    R_NCG = 3
    R_NSG = 4
    R_NSGR = 5
    R_PCG = 6
    R_PSG = 7
    R_DSQ = 8
    R_LPXY = 9
    R_LPX = 10
    NREC = 11

cdef enum:
    KIND_SDS = 0
    KIND_CSD = 1
    KIND_FIXED = 2
    KIND_BSD = 3


cdef inline void comp_logn(const double* x, int D, double a, double s,
                           const double[:, ::1] means, const double[::1] scales,
                           double* logn, double* var) noexcept nogil:
    cdef int k, d
    cdef int M = scales.shape[0]
    cdef double sq, diff
    for k in range(M):
        var[k] = a * a * scales[k] * scales[k] + s * s
        sq = 0.0
        for d in range(D):
            diff = x[d] - a * means[k, d]
            sq = sq + diff * diff
        logn[k] = -0.5 * sq / var[k] - 0.5 * D * (LOG_2PI + log(var[k]))


cdef inline double weighted_lse(const double* logn, const double[::1] logw, int M,
                                double* lw) noexcept nogil:
    cdef int k
    cdef double mx = -INFINITY, acc = 0.0
    for k in range(M):
        lw[k] = logw[k] + logn[k]
        if lw[k] > mx:
            mx = lw[k]
    if mx == -INFINITY:
        return -INFINITY
    for k in range(M):
        if lw[k] != -INFINITY:
            acc = acc + exp(lw[k] - mx)
    return mx + log(acc)


cdef inline void weighted_score(const double* x, int D, double a, const double[:, ::1] means,
                                const double* var, const double* lw, double lse, int M,
                                double* out) noexcept nogil:
    cdef int k, d
    cdef double r
    if lse == -INFINITY:
        # every component underflowed: the score is not computable here
        for d in range(D):
            out[d] = NAN
        return
    for d in range(D):
        out[d] = 0.0
    for k in range(M):
        if lw[k] == -INFINITY:
            continue
        r = exp(lw[k] - lse) / var[k]
        for d in range(D):
            out[d] = out[d] - r * (x[d] - a * means[k, d])


def direct_trajectory(double[::1] x, const cnp.int64_t[::1] ts, const double[:, ::1] eps,
                      const double[::1] alpha, const double[::1] sigma, const double[::1] omega,
                      const double[:, ::1] means, const double[::1] scales,
                      const double[::1] logw_cond, const double[::1] logw_null,
                      int kind, double cfg, double u, double v, double lam, bint subtract_eps,
                      bint adam, double lr, double b1, double b2, double adam_eps,
                      double[::1] m, double[::1] vv, cnp.int64_t step0,
                      double[:, ::1] traj, double[:, ::1] rec,
                      cnp.int64_t tail_from, double[::1] dsum):
    """Run ``len(ts)`` distillation steps on directly parameterized ``x`` in place.

    Returns the number of completed steps; fewer than ``len(ts)`` means the
    gradient went non-finite at that step (its record is still written).
    """
    cdef Py_ssize_t n = ts.shape[0], i
    cdef int D = x.shape[0], M = scales.shape[0], d
    cdef double[::1] work = np.empty(9 * D + 4 * M, dtype=np.float64)
    cdef double* xt = &work[0]
    cdef double* sc = xt + D
    cdef double* su = sc + D
    cdef double* cg = su + D
    cdef double* sg = cg + D
    cdef double* sgr = sg + D
    cdef double* dd = sgr + D
    cdef double* xp = dd + D
    cdef double* smooth
    cdef double* logn = xp + 2 * D
    cdef double* var = logn + M
    cdef double* lw = var + M
    cdef double* lw2 = lw + M
    cdef double a, s, w, lse_c, lse_u, ec, eu, g, mh, vh, al, denom, ahat, n1, n2
    cdef double dot, ncg, nsg, nsgr, pcg, psg, dsq, bc1, bc2
    cdef cnp.int64_t t, k
    cdef bint finite
    cdef Py_ssize_t done = n
    with nogil:
        for i in range(n):
            t = ts[i]
            a = alpha[t]
            s = sigma[t]
            w = omega[t]
            for d in range(D):
                xp[d] = x[d]
            # clean densities at the current sample
            comp_logn(xp, D, 1.0, 0.0, means, scales, logn, var)
            rec[i, R_LPXY] = weighted_lse(logn, logw_cond, M, lw)
            rec[i, R_LPX] = weighted_lse(logn, logw_null, M, lw)

            for d in range(D):
                xt[d] = a * xp[d] + s * eps[i, d]
            comp_logn(xt, D, a, s, means, scales, logn, var)
            lse_c = weighted_lse(logn, logw_cond, M, lw)
            lse_u = weighted_lse(logn, logw_null, M, lw2)
            weighted_score(xt, D, a, means, var, lw, lse_c, M, sc)
            weighted_score(xt, D, a, means, var, lw2, lse_u, M, su)

            dot = 0.0; ncg = 0.0; nsg = 0.0; nsgr = 0.0
            for d in range(D):
                ec = -s * sc[d]
                eu = -s * su[d]
                sg[d] = eu / s
                cg[d] = (ec - eu) / s
                sgr[d] = sg[d] - eps[i, d] / s
                dot = dot + cg[d] * sg[d]
                ncg = ncg + cg[d] * cg[d]
                nsg = nsg + sg[d] * sg[d]
                nsgr = nsgr + sgr[d] * sgr[d]
            smooth = sgr if subtract_eps else sg

            al = NAN
            if kind == KIND_SDS:
                for d in range(D):
                    dd[d] = cfg * cg[d] + smooth[d]
            elif kind == KIND_CSD:
                for d in range(D):
                    dd[d] = cg[d]
            elif kind == KIND_FIXED:
                for d in range(D):
                    dd[d] = u * cg[d] + v * smooth[d]
            else:
                n1 = 0.0; n2 = 0.0; denom = 0.0; ahat = 0.0
                for d in range(D):
                    n1 = n1 + (lam * cg[d]) * (lam * cg[d])
                    n2 = n2 + smooth[d] * smooth[d]
                    g = smooth[d] - lam * cg[d]
                    denom = denom + g * g
                    ahat = ahat + g * smooth[d]
                if sqrt(n1) < 1e-18 and sqrt(n2) < 1e-18:
                    al = 0.5
                    for d in range(D):
                        dd[d] = 0.0
                else:
                    if denom < 1e-24:
                        al = 0.5
                    else:
                        al = ahat / denom
                        if al < 0.0:
                            al = 0.0
                        elif al > 1.0:
                            al = 1.0
                    for d in range(D):
                        dd[d] = al * (lam * cg[d]) + (1.0 - al) * smooth[d]

            pcg = 0.0; psg = 0.0; dsq = 0.0
            for d in range(D):
                pcg = pcg + dd[d] * cg[d]
                psg = psg + dd[d] * smooth[d]
                dsq = dsq + dd[d] * dd[d]
            rec[i, R_T] = <double>t
            rec[i, R_ALPHA] = al
            rec[i, R_DOT] = dot
            rec[i, R_NCG] = sqrt(ncg)
            rec[i, R_NSG] = sqrt(nsg)
            rec[i, R_NSGR] = sqrt(nsgr)
            rec[i, R_PCG] = pcg
            rec[i, R_PSG] = psg
            rec[i, R_DSQ] = dsq

            finite = True
            for d in range(D):
                if not isfinite(w * dd[d]):
                    finite = False
            if not finite:
                done = i
                break
            if i >= tail_from:
                for d in range(D):
                    dsum[d] = dsum[d] + dd[d]

            k = step0 + i + 1
            if adam:
                bc1 = 1.0 - b1 ** k
                bc2 = 1.0 - b2 ** k
                for d in range(D):
                    g = w * dd[d]
                    m[d] = b1 * m[d] + (1.0 - b1) * g
                    vv[d] = b2 * vv[d] + (1.0 - b2) * g * g
                    mh = m[d] / bc1
                    vh = vv[d] / bc2
                    x[d] = x[d] - lr * mh / (sqrt(vh) + adam_eps)
            else:
                for d in range(D):
                    x[d] = x[d] - lr * w * dd[d]
            for d in range(D):
                traj[i, d] = x[d]
    return done


cdef inline double sigmoid(double z) noexcept nogil:
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    cdef double e = exp(z)
    return e / (1.0 + e)


def splat_render(const double[:, ::1] params, int W, int H, double[::1] out):
    """Additive isotropic splats; ``params`` rows are (cx, cy, log_s, r, g, b, opacity_logit)."""
    cdef Py_ssize_t K = params.shape[0], k, row, col, c, base
    cdef double cx, cy, s2, op, px, py, dx, dy, g, aspect = <double>H / W
    with nogil:
        for c in range(H * W * 3):
            out[c] = 0.0
        for k in range(K):
            cx = params[k, 0]
            cy = params[k, 1]
            s2 = exp(2.0 * params[k, 2])
            op = sigmoid(params[k, 6])
            for row in range(H):
                py = (row + 0.5) / H
                dy = (py - cy) * aspect
                for col in range(W):
                    px = (col + 0.5) / W
                    dx = px - cx
                    g = op * exp(-(dx * dx + dy * dy) / (2.0 * s2))
                    base = (row * W + col) * 3
                    out[base] += g * params[k, 3]
                    out[base + 1] += g * params[k, 4]
                    out[base + 2] += g * params[k, 5]


def splat_vjp(const double[:, ::1] params, int W, int H, const double[::1] cot,
              double[:, ::1] grad):
    cdef Py_ssize_t K = params.shape[0], k, row, col, base
    cdef double cx, cy, s2, op, px, py, dx, dy, ker, q, aspect = <double>H / W
    cdef double gcx, gcy, gls, gr, gg, gb, gop
    with nogil:
        for k in range(K):
            cx = params[k, 0]
            cy = params[k, 1]
            s2 = exp(2.0 * params[k, 2])
            op = sigmoid(params[k, 6])
            gcx = 0.0; gcy = 0.0; gls = 0.0; gr = 0.0; gg = 0.0; gb = 0.0; gop = 0.0
            for row in range(H):
                py = (row + 0.5) / H
                dy = (py - cy) * aspect
                for col in range(W):
                    px = (col + 0.5) / W
                    dx = px - cx
                    ker = exp(-(dx * dx + dy * dy) / (2.0 * s2))
                    base = (row * W + col) * 3
                    gr += ker * cot[base]
                    gg += ker * cot[base + 1]
                    gb += ker * cot[base + 2]
                    q = ker * (cot[base] * params[k, 3] + cot[base + 1] * params[k, 4]
                               + cot[base + 2] * params[k, 5])
                    gop += q
                    gcx += q * dx
                    gcy += q * dy
                    gls += q * (dx * dx + dy * dy)
            grad[k, 0] = op * gcx / s2
            grad[k, 1] = op * gcy * aspect / s2
            grad[k, 2] = op * gls / s2
            grad[k, 3] = op * gr
            grad[k, 4] = op * gg
            grad[k, 5] = op * gb
            grad[k, 6] = op * (1.0 - op) * gop
