"""Pure-Python numeric kernels.

Fallback backend used when the compiled extension is unavailable (or when
``VAEMIX_PURE_KERNELS=1``).  Every function here has a compiled twin in
``_kernels.pyx`` with the same signature and, critically, the same
accumulation order, so the two backends produce bit-identical results.

All buffers are flat float64 arrays (``array('d')``); integer label buffers
are ``array('q')``.  Forward kernels overwrite their output buffer, gradient
kernels accumulate (+=) into theirs.
"""

import math

BACKEND_NAME = "pure"

_LOG_2PI = 1.8378770664093453


# ---------------------------------------------------------------------------
# dense linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b, out, n, k, m):
    """out[n,m] = a[n,k] @ b[k,m]"""
    for i in range(n):
        ai = i * k
        oi = i * m
        for j in range(m):
            s = 0.0
            for l in range(k):
                s = s + a[ai + l] * b[l * m + j]
            out[oi + j] = s


def matmul_nt_acc(g, b, out, n, m, k):
    """out[n,k] += g[n,m] @ b[k,m]^T"""
    for i in range(n):
        gi = i * m
        oi = i * k
        for l in range(k):
            s = 0.0
            bl = l * m
            for j in range(m):
                s = s + g[gi + j] * b[bl + j]
            out[oi + l] += s


def matmul_tn_acc(a, g, out, n, k, m):
    """out[k,m] += a[n,k]^T @ g[n,m]"""
    for l in range(k):
        ol = l * m
        for j in range(m):
            s = 0.0
            for i in range(n):
                s = s + a[i * k + l] * g[i * m + j]
            out[ol + j] += s


def add_bias(x, bias, out, n, m):
    for i in range(n):
        off = i * m
        for j in range(m):
            out[off + j] = x[off + j] + bias[j]


def colsum_acc(g, out, n, m):
    for j in range(m):
        s = 0.0
        for i in range(n):
            s = s + g[i * m + j]
        out[j] += s


# ---------------------------------------------------------------------------
# elementwise maps
# ---------------------------------------------------------------------------

def ew_tanh(x, out, nn):
    for i in range(nn):
        out[i] = math.tanh(x[i])


def ew_sigmoid(x, out, nn):
    for i in range(nn):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            out[i] = e / (1.0 + e)


def ew_softplus(x, out, nn):
    # log(1 + exp(x)); for x > 30 the correction is below float64 resolution
    for i in range(nn):
        v = x[i]
        out[i] = v if v > 30.0 else math.log1p(math.exp(v))


def ew_relu(x, out, nn):
    for i in range(nn):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def ew_exp(x, out, nn):
    for i in range(nn):
        out[i] = math.exp(x[i])


def ew_add(a, b, out, nn):
    for i in range(nn):
        out[i] = a[i] + b[i]


def ew_sub(a, b, out, nn):
    for i in range(nn):
        out[i] = a[i] - b[i]


def ew_mul(a, b, out, nn):
    for i in range(nn):
        out[i] = a[i] * b[i]


def ew_scale(x, c, out, nn):
    for i in range(nn):
        out[i] = c * x[i]


def acc_scaled(x, c, out, nn):
    """out += c * x"""
    for i in range(nn):
        out[i] += c * x[i]


def acc_const(c, out, nn):
    """out += c"""
    for i in range(nn):
        out[i] += c


def bw_tanh_acc(y, g, da, nn):
    for i in range(nn):
        da[i] += g[i] * (1.0 - y[i] * y[i])


def bw_sigmoid_acc(y, g, da, nn):
    for i in range(nn):
        da[i] += g[i] * y[i] * (1.0 - y[i])


def bw_softplus_acc(x, g, da, nn):
    for i in range(nn):
        v = x[i]
        if v >= 0.0:
            s = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            s = e / (1.0 + e)
        da[i] += g[i] * s


def bw_relu_acc(x, g, da, nn):
    for i in range(nn):
        if x[i] > 0.0:
            da[i] += g[i]


def bw_exp_acc(y, g, da, nn):
    for i in range(nn):
        da[i] += g[i] * y[i]


def bw_mul_acc(other, g, da, nn):
    for i in range(nn):
        da[i] += g[i] * other[i]


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x, nn):
    s = 0.0
    for i in range(nn):
        s = s + x[i]
    return s


def all_finite(x, nn):
    for i in range(nn):
        if not math.isfinite(x[i]):
            return 0
    return 1


def logsumexp(v, nn):
    mx = v[0]
    for i in range(1, nn):
        if v[i] > mx:
            mx = v[i]
    s = 0.0
    for i in range(nn):
        s = s + math.exp(v[i] - mx)
    return mx + math.log(s)


# ---------------------------------------------------------------------------
# fused per-row likelihood / divergence terms
# ---------------------------------------------------------------------------

def bernoulli_ll(p, x, out, n, d, lo, hi):
    """out[i] = sum_j x*log(clamp(p)) + (1-x)*log(1-clamp(p))"""
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
            s = s + xv * math.log(q) + (1.0 - xv) * math.log(1.0 - q)
        out[i] = s


def bernoulli_ll_bwd_acc(p, x, g, dp, n, d, lo, hi):
    # zero gradient in the clamped region: d clamp(p)/dp = 0 there
    for i in range(n):
        off = i * d
        gi = g[i]
        for j in range(d):
            q = p[off + j]
            if lo <= q <= hi:
                xv = x[off + j]
                dp[off + j] += gi * (xv / q - (1.0 - xv) / (1.0 - q))


def gaussian_ll(mu, sigma, x, out, n, d):
    """out[i] = sum_j log N(x | mu, sigma^2), sigma the standard deviation"""
    for i in range(n):
        off = i * d
        s = 0.0
        for j in range(d):
            sd = sigma[off + j]
            z = (x[off + j] - mu[off + j]) / sd
            s = s - 0.5 * _LOG_2PI - math.log(sd) - 0.5 * z * z
        out[i] = s


def gaussian_ll_bwd_acc(mu, sigma, x, g, dmu, dsigma, n, d):
    for i in range(n):
        off = i * d
        gi = g[i]
        for j in range(d):
            sd = sigma[off + j]
            diff = x[off + j] - mu[off + j]
            dmu[off + j] += gi * diff / (sd * sd)
            dsigma[off + j] += gi * (diff * diff / (sd * sd * sd) - 1.0 / sd)


def kl_std_normal(mu, sigma, out, n, d):
    """out[i] = 0.5 * sum_j (mu^2 + sigma^2 - 1 - log sigma^2)"""
    for i in range(n):
        off = i * d
        s = 0.0
        for j in range(d):
            m = mu[off + j]
            sd = sigma[off + j]
            s = s + m * m + sd * sd - 1.0 - 2.0 * math.log(sd)
        out[i] = 0.5 * s


def kl_std_normal_bwd_acc(mu, sigma, g, dmu, dsigma, n, d):
    for i in range(n):
        off = i * d
        gi = g[i]
        for j in range(d):
            sd = sigma[off + j]
            dmu[off + j] += gi * mu[off + j]
            dsigma[off + j] += gi * (sd - 1.0 / sd)


# ---------------------------------------------------------------------------
# batch normalization (per-column statistics)
# ---------------------------------------------------------------------------

def bn_train(x, gamma, beta, out, xhat, mean, var, n, d, eps):
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
        istd = 1.0 / math.sqrt(v + eps)
        gj = gamma[j]
        bj = beta[j]
        for i in range(n):
            h = (x[i * d + j] - mu) * istd
            xhat[i * d + j] = h
            out[i * d + j] = gj * h + bj


def bn_train_bwd_acc(xhat, var, gamma, g, dx, dgamma, dbeta, n, d, eps):
    for j in range(d):
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            gi = g[i * d + j]
            s1 = s1 + gi
            s2 = s2 + gi * xhat[i * d + j]
        dbeta[j] += s1
        dgamma[j] += s2
        coef = gamma[j] / math.sqrt(var[j] + eps) / n
        for i in range(n):
            idx = i * d + j
            dx[idx] += coef * (n * g[idx] - s1 - xhat[idx] * s2)


def bn_eval(x, gamma, beta, rmean, rvar, out, n, d, eps):
    for j in range(d):
        istd = 1.0 / math.sqrt(rvar[j] + eps)
        gj = gamma[j]
        bj = beta[j]
        mu = rmean[j]
        for i in range(n):
            out[i * d + j] = gj * (x[i * d + j] - mu) * istd + bj


def bn_eval_bwd_acc(x, gamma, rmean, rvar, g, dx, dgamma, dbeta, n, d, eps):
    for j in range(d):
        istd = 1.0 / math.sqrt(rvar[j] + eps)
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


# ---------------------------------------------------------------------------
# optimizers (in place)
# ---------------------------------------------------------------------------

def adam_update(p, g, m, v, t, lr, b1, b2, eps, nn):
    """Bias-corrected Adam step; t is the already-incremented step count."""
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i in range(nn):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


def sgd_update(p, g, lr, nn):
    for i in range(nn):
        p[i] -= lr * g[i]


# ---------------------------------------------------------------------------
# softmax classifier head
# ---------------------------------------------------------------------------

def softmax_xent(logits, labels, w, out, probs, n, kcls):
    """out[i] = w[i] * (-log softmax(logits[i])[labels[i]]); probs saved."""
    for i in range(n):
        off = i * kcls
        mx = logits[off]
        for j in range(1, kcls):
            if logits[off + j] > mx:
                mx = logits[off + j]
        z = 0.0
        for j in range(kcls):
            e = math.exp(logits[off + j] - mx)
            probs[off + j] = e
            z = z + e
        for j in range(kcls):
            probs[off + j] /= z
        y = labels[i]
        out[i] = w[i] * (mx + math.log(z) - logits[off + y])


def softmax_xent_bwd_acc(probs, labels, w, g, dlogits, n, kcls):
    for i in range(n):
        off = i * kcls
        gw = g[i] * w[i]
        y = labels[i]
        for j in range(kcls):
            delta = 1.0 if j == y else 0.0
            dlogits[off + j] += gw * (probs[off + j] - delta)


def row_softmax(logits, out, n, kcls):
    for i in range(n):
        off = i * kcls
        mx = logits[off]
        for j in range(1, kcls):
            if logits[off + j] > mx:
                mx = logits[off + j]
        z = 0.0
        for j in range(kcls):
            e = math.exp(logits[off + j] - mx)
            out[off + j] = e
            z = z + e
        for j in range(kcls):
            out[off + j] /= z
