# cython: language_level=3
"""Compiled numeric kernels.

Mirror of ``_kernels_py`` with the same signatures and the same accumulation
order.  Compiled with -ffp-contract=off so results stay bit-identical to the
pure backend.
"""

from libc.math cimport exp, log, log1p, sqrt, tanh, isfinite, pow

BACKEND_NAME = "compiled"

cdef double _LOG_2PI = 1.8378770664093453


def matmul(double[::1] a, double[::1] b, double[::1] out,
           Py_ssize_t n, Py_ssize_t k, Py_ssize_t m):
    cdef Py_ssize_t i, j, l, ai, oi
    cdef double s
    for i in range(n):
        ai = i * k
        oi = i * m
        for j in range(m):
            s = 0.0
            for l in range(k):
                s = s + a[ai + l] * b[l * m + j]
            out[oi + j] = s


def matmul_nt_acc(double[::1] g, double[::1] b, double[::1] out,
                  Py_ssize_t n, Py_ssize_t m, Py_ssize_t k):
    cdef Py_ssize_t i, j, l, gi, oi, bl
    cdef double s
    for i in range(n):
        gi = i * m
        oi = i * k
        for l in range(k):
            s = 0.0
            bl = l * m
            for j in range(m):
                s = s + g[gi + j] * b[bl + j]
            out[oi + l] += s


def matmul_tn_acc(double[::1] a, double[::1] g, double[::1] out,
                  Py_ssize_t n, Py_ssize_t k, Py_ssize_t m):
    cdef Py_ssize_t i, j, l, ol
    cdef double s
    for l in range(k):
        ol = l * m
        for j in range(m):
            s = 0.0
            for i in range(n):
                s = s + a[i * k + l] * g[i * m + j]
            out[ol + j] += s


def add_bias(double[::1] x, double[::1] bias, double[::1] out,
             Py_ssize_t n, Py_ssize_t m):
    cdef Py_ssize_t i, j, off
    for i in range(n):
        off = i * m
        for j in range(m):
            out[off + j] = x[off + j] + bias[j]


def colsum_acc(double[::1] g, double[::1] out, Py_ssize_t n, Py_ssize_t m):
    cdef Py_ssize_t i, j
    cdef double s
    for j in range(m):
        s = 0.0
        for i in range(n):
            s = s + g[i * m + j]
        out[j] += s


def ew_tanh(double[::1] x, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] = tanh(x[i])


def ew_sigmoid(double[::1] x, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    cdef double v, e
    for i in range(nn):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            out[i] = e / (1.0 + e)


def ew_softplus(double[::1] x, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    cdef double v
    for i in range(nn):
        v = x[i]
        out[i] = v if v > 30.0 else log1p(exp(v))


def ew_relu(double[::1] x, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    cdef double v
    for i in range(nn):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def ew_exp(double[::1] x, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] = exp(x[i])


def ew_add(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] = a[i] + b[i]


def ew_sub(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] = a[i] - b[i]


def ew_mul(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] = a[i] * b[i]


def ew_scale(double[::1] x, double c, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] = c * x[i]


def acc_scaled(double[::1] x, double c, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] += c * x[i]


def acc_const(double c, double[::1] out, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        out[i] += c


def bw_tanh_acc(double[::1] y, double[::1] g, double[::1] da, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        da[i] += g[i] * (1.0 - y[i] * y[i])


def bw_sigmoid_acc(double[::1] y, double[::1] g, double[::1] da, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        da[i] += g[i] * y[i] * (1.0 - y[i])


def bw_softplus_acc(double[::1] x, double[::1] g, double[::1] da, Py_ssize_t nn):
    cdef Py_ssize_t i
    cdef double v, s, e
    for i in range(nn):
        v = x[i]
        if v >= 0.0:
            s = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            s = e / (1.0 + e)
        da[i] += g[i] * s


def bw_relu_acc(double[::1] x, double[::1] g, double[::1] da, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        if x[i] > 0.0:
            da[i] += g[i]


def bw_exp_acc(double[::1] y, double[::1] g, double[::1] da, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        da[i] += g[i] * y[i]


def bw_mul_acc(double[::1] other, double[::1] g, double[::1] da, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        da[i] += g[i] * other[i]


def sum_all(double[::1] x, Py_ssize_t nn):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(nn):
        s = s + x[i]
    return s


def all_finite(double[::1] x, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        if not isfinite(x[i]):
            return 0
    return 1


def logsumexp(double[::1] v, Py_ssize_t nn):
    cdef Py_ssize_t i
    cdef double mx = v[0]
    cdef double s = 0.0
    for i in range(1, nn):
        if v[i] > mx:
            mx = v[i]
    for i in range(nn):
        s = s + exp(v[i] - mx)
    return mx + log(s)


def bernoulli_ll(double[::1] p, double[::1] x, double[::1] out,
                 Py_ssize_t n, Py_ssize_t d, double lo, double hi):
    cdef Py_ssize_t i, j, off
    cdef double s, q, xv
    for i in range(n):
        off = i * d
        s = 0.0
        for j in range(d):
            q = p[off + j]
            if q < lo:
                q = lo
            elif q > hi:
                q = hi
            xv = x[off + j]
            s = s + xv * log(q) + (1.0 - xv) * log(1.0 - q)
        out[i] = s


def bernoulli_ll_bwd_acc(double[::1] p, double[::1] x, double[::1] g,
                         double[::1] dp, Py_ssize_t n, Py_ssize_t d,
                         double lo, double hi):
    cdef Py_ssize_t i, j, off
    cdef double gi, q, xv
    for i in range(n):
        off = i * d
        gi = g[i]
        for j in range(d):
            q = p[off + j]
            if lo <= q <= hi:
                xv = x[off + j]
                dp[off + j] += gi * (xv / q - (1.0 - xv) / (1.0 - q))


def gaussian_ll(double[::1] mu, double[::1] sigma, double[::1] x,
                double[::1] out, Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, off
    cdef double s, sd, z
    for i in range(n):
        off = i * d
        s = 0.0
        for j in range(d):
            sd = sigma[off + j]
            z = (x[off + j] - mu[off + j]) / sd
            s = s - 0.5 * _LOG_2PI - log(sd) - 0.5 * z * z
        out[i] = s


def gaussian_ll_bwd_acc(double[::1] mu, double[::1] sigma, double[::1] x,
                        double[::1] g, double[::1] dmu, double[::1] dsigma,
                        Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, off
    cdef double gi, sd, diff
    for i in range(n):
        off = i * d
        gi = g[i]
        for j in range(d):
            sd = sigma[off + j]
            diff = x[off + j] - mu[off + j]
            dmu[off + j] += gi * diff / (sd * sd)
            dsigma[off + j] += gi * (diff * diff / (sd * sd * sd) - 1.0 / sd)


def kl_std_normal(double[::1] mu, double[::1] sigma, double[::1] out,
                  Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, off
    cdef double s, m, sd
    for i in range(n):
        off = i * d
        s = 0.0
        for j in range(d):
            m = mu[off + j]
            sd = sigma[off + j]
            s = s + m * m + sd * sd - 1.0 - 2.0 * log(sd)
        out[i] = 0.5 * s


def kl_std_normal_bwd_acc(double[::1] mu, double[::1] sigma, double[::1] g,
                          double[::1] dmu, double[::1] dsigma,
                          Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, off
    cdef double gi, sd
    for i in range(n):
        off = i * d
        gi = g[i]
        for j in range(d):
            sd = sigma[off + j]
            dmu[off + j] += gi * mu[off + j]
            dsigma[off + j] += gi * (sd - 1.0 / sd)


def bn_train(double[::1] x, double[::1] gamma, double[::1] beta,
             double[::1] out, double[::1] xhat, double[::1] mean,
             double[::1] var, Py_ssize_t n, Py_ssize_t d, double eps):
    cdef Py_ssize_t i, j
    cdef double s, mu, s2, diff, v, istd, gj, bj, h
    for j in range(d):
        s = 0.0
        for i in range(n):
            s = s + x[i * d + j]
        mu = s / n
        s2 = 0.0
        for i in range(n):
            diff = x[i * d + j] - mu
            s2 = s2 + diff * diff
        v = s2 / n
        mean[j] = mu
        var[j] = v
        istd = 1.0 / sqrt(v + eps)
        gj = gamma[j]
        bj = beta[j]
        for i in range(n):
            h = (x[i * d + j] - mu) * istd
            xhat[i * d + j] = h
            out[i * d + j] = gj * h + bj


def bn_train_bwd_acc(double[::1] xhat, double[::1] var, double[::1] gamma,
                     double[::1] g, double[::1] dx, double[::1] dgamma,
                     double[::1] dbeta, Py_ssize_t n, Py_ssize_t d, double eps):
    cdef Py_ssize_t i, j, idx
    cdef double s1, s2, gi, coef
    for j in range(d):
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            gi = g[i * d + j]
            s1 = s1 + gi
            s2 = s2 + gi * xhat[i * d + j]
        dbeta[j] += s1
        dgamma[j] += s2
        coef = gamma[j] / sqrt(var[j] + eps) / n
        for i in range(n):
            idx = i * d + j
            dx[idx] += coef * (n * g[idx] - s1 - xhat[idx] * s2)


def bn_eval(double[::1] x, double[::1] gamma, double[::1] beta,
            double[::1] rmean, double[::1] rvar, double[::1] out,
            Py_ssize_t n, Py_ssize_t d, double eps):
    cdef Py_ssize_t i, j
    cdef double istd, gj, bj, mu
    for j in range(d):
        istd = 1.0 / sqrt(rvar[j] + eps)
        gj = gamma[j]
        bj = beta[j]
        mu = rmean[j]
        for i in range(n):
            out[i * d + j] = gj * (x[i * d + j] - mu) * istd + bj


def bn_eval_bwd_acc(double[::1] x, double[::1] gamma, double[::1] rmean,
                    double[::1] rvar, double[::1] g, double[::1] dx,
                    double[::1] dgamma, double[::1] dbeta,
                    Py_ssize_t n, Py_ssize_t d, double eps):
    cdef Py_ssize_t i, j, idx
    cdef double istd, gj, mu, s1, s2, gi
    for j in range(d):
        istd = 1.0 / sqrt(rvar[j] + eps)
        gj = gamma[j]
        mu = rmean[j]
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            idx = i * d + j
            gi = g[idx]
            s1 = s1 + gi
            s2 = s2 + gi * (x[idx] - mu) * istd
            dx[idx] += gi * gj * istd
        dbeta[j] += s1
        dgamma[j] += s2


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                Py_ssize_t t, double lr, double b1, double b2, double eps,
                Py_ssize_t nn):
    cdef Py_ssize_t i
    cdef double bc1, bc2, gi, mi, vi
    bc1 = 1.0 - pow(b1, t)
    bc2 = 1.0 - pow(b2, t)
    for i in range(nn):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (sqrt(vi / bc2) + eps)


def sgd_update(double[::1] p, double[::1] g, double lr, Py_ssize_t nn):
    cdef Py_ssize_t i
    for i in range(nn):
        p[i] -= lr * g[i]


def softmax_xent(double[::1] logits, long long[::1] labels, double[::1] w,
                 double[::1] out, double[::1] probs, Py_ssize_t n,
                 Py_ssize_t kcls):
    cdef Py_ssize_t i, j, off, y
    cdef double mx, z, e
    for i in range(n):
        off = i * kcls
        mx = logits[off]
        for j in range(1, kcls):
            if logits[off + j] > mx:
                mx = logits[off + j]
        z = 0.0
        for j in range(kcls):
            e = exp(logits[off + j] - mx)
            probs[off + j] = e
            z = z + e
        for j in range(kcls):
            probs[off + j] /= z
        y = labels[i]
        out[i] = w[i] * (mx + log(z) - logits[off + y])


def softmax_xent_bwd_acc(double[::1] probs, long long[::1] labels,
                         double[::1] w, double[::1] g, double[::1] dlogits,
                         Py_ssize_t n, Py_ssize_t kcls):
    cdef Py_ssize_t i, j, off, y
    cdef double gw, delta
    for i in range(n):
        off = i * kcls
        gw = g[i] * w[i]
        y = labels[i]
        for j in range(kcls):
            delta = 1.0 if j == y else 0.0
            dlogits[off + j] += gw * (probs[off + j] - delta)


def row_softmax(double[::1] logits, double[::1] out, Py_ssize_t n,
                Py_ssize_t kcls):
    cdef Py_ssize_t i, j, off
    cdef double mx, z, e
    for i in range(n):
        off = i * kcls
        mx = logits[off]
        for j in range(1, kcls):
            if logits[off + j] > mx:
                mx = logits[off + j]
        z = 0.0
        for j in range(kcls):
            e = exp(logits[off + j] - mx)
            out[off + j] = e
            z = z + e
        for j in range(kcls):
            out[off + j] /= z
