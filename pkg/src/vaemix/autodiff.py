"""Reverse-mode autodiff on a replay tape.

Define-by-run: every forward op appends one backward closure to the tape;
``Tape.backward`` replays them in reverse, visiting each op once.  Adjoint
buffers are allocated lazily on first accumulation, so a parameter that never
receives an adjoint stays at ``grad is None`` and reads back as zeros.

A Tape is built per forward pass and discarded after one backward.  Vars
marked const (inputs, frozen noise) never accumulate adjoints.
"""

import math
from array import array
from typing import List, Optional, Sequence

from .backend import kernels as K
from .errors import ShapeError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Var:
    """A tensor value plus its (lazily created) adjoint buffer."""

    __slots__ = ("value", "grad", "const")

    def __init__(self, value: Tensor, const: bool = False):
        self.value = value
        self.grad: Optional[array] = None
        self.const = const

    def grad_tensor(self) -> Tensor:
        """Adjoint as a Tensor; zeros when nothing flowed back here."""
        if self.grad is None:
            return Tensor(self.value.shape)
        return Tensor(self.value.shape, self.grad)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, const={self.const})"


def _buf(v: Var) -> array:
    if v.grad is None:
        v.grad = array("d", bytes(8 * v.value.size))
    return v.grad


def log_sum_exp(values: Sequence[float]) -> float:
    """max(v) + log sum exp(v - max); exact for a single element."""
    n = len(values)
    if n == 0:
        raise ShapeError("log_sum_exp of empty input")
    mx = values[0]
    for i in range(1, n):
        if values[i] > mx:
            mx = values[i]
    s = 0.0
    for i in range(n):
        s = s + math.exp(values[i] - mx)
    return mx + math.log(s)


class Tape:
    """Wengert list of backward closures; single-use."""

    def __init__(self):
        self._ops: List = []

    def record(self, bw) -> None:
        self._ops.append(bw)

    def backward(self, loss: Var) -> None:
        if loss.value.size != 1:
            raise ShapeError(
                f"backward needs a scalar loss, got shape {loss.value.shape}"
            )
        if loss.grad is None:
            loss.grad = array("d", [1.0])
        for bw in reversed(self._ops):
            bw()

    # -- affine -------------------------------------------------------------

    def linear(self, x: Var, w: Var, b: Var) -> Var:
        n, k = x.value.shape
        kw, m = w.value.shape
        if k != kw or b.value.shape != (m,):
            raise ShapeError(
                f"linear: x{x.value.shape} @ W{w.value.shape} + b{b.value.shape}"
            )
        out = Var(Tensor((n, m)))
        K.matmul(x.value.data, w.value.data, out.value.data, n, k, m)
        K.add_bias(out.value.data, b.value.data, out.value.data, n, m)

        def bw():
            g = out.grad
            if g is None:
                return
            if not x.const:
                K.matmul_nt_acc(g, w.value.data, _buf(x), n, m, k)
            if not w.const:
                K.matmul_tn_acc(x.value.data, g, _buf(w), n, k, m)
            if not b.const:
                K.colsum_acc(g, _buf(b), n, m)

        self.record(bw)
        return out

    # -- elementwise unary ----------------------------------------------------

    def _unary(self, x: Var, fwd, bwd, save_input: bool) -> Var:
        out = Var(Tensor(x.value.shape))
        nn = x.value.size
        fwd(x.value.data, out.value.data, nn)
        saved = x.value.data if save_input else out.value.data

        def bw():
            g = out.grad
            if g is None or x.const:
                return
            bwd(saved, g, _buf(x), nn)

        self.record(bw)
        return out

    def tanh(self, x: Var) -> Var:
        return self._unary(x, K.ew_tanh, K.bw_tanh_acc, save_input=False)

    def sigmoid(self, x: Var) -> Var:
        return self._unary(x, K.ew_sigmoid, K.bw_sigmoid_acc, save_input=False)

    def softplus(self, x: Var) -> Var:
        return self._unary(x, K.ew_softplus, K.bw_softplus_acc, save_input=True)

    def relu(self, x: Var) -> Var:
        return self._unary(x, K.ew_relu, K.bw_relu_acc, save_input=True)

    def exp(self, x: Var) -> Var:
        return self._unary(x, K.ew_exp, K.bw_exp_acc, save_input=False)

    # -- elementwise binary ---------------------------------------------------

    def _check_same(self, a: Var, b: Var) -> None:
        if a.value.shape != b.value.shape:
            raise ShapeError(
                f"elementwise op on shapes {a.value.shape} and {b.value.shape}"
            )

    def add(self, a: Var, b: Var) -> Var:
        self._check_same(a, b)
        out = Var(Tensor(a.value.shape))
        nn = out.value.size
        K.ew_add(a.value.data, b.value.data, out.value.data, nn)

        def bw():
            g = out.grad
            if g is None:
                return
            if not a.const:
                K.acc_scaled(g, 1.0, _buf(a), nn)
            if not b.const:
                K.acc_scaled(g, 1.0, _buf(b), nn)

        self.record(bw)
        return out

    def sub(self, a: Var, b: Var) -> Var:
        self._check_same(a, b)
        out = Var(Tensor(a.value.shape))
        nn = out.value.size
        K.ew_sub(a.value.data, b.value.data, out.value.data, nn)

        def bw():
            g = out.grad
            if g is None:
                return
            if not a.const:
                K.acc_scaled(g, 1.0, _buf(a), nn)
            if not b.const:
                K.acc_scaled(g, -1.0, _buf(b), nn)

        self.record(bw)
        return out

    def mul(self, a: Var, b: Var) -> Var:
        self._check_same(a, b)
        out = Var(Tensor(a.value.shape))
        nn = out.value.size
        K.ew_mul(a.value.data, b.value.data, out.value.data, nn)

        def bw():
            g = out.grad
            if g is None:
                return
            if not a.const:
                K.bw_mul_acc(b.value.data, g, _buf(a), nn)
            if not b.const:
                K.bw_mul_acc(a.value.data, g, _buf(b), nn)

        self.record(bw)
        return out

    def scale(self, x: Var, c: float) -> Var:
        out = Var(Tensor(x.value.shape))
        nn = x.value.size
        K.ew_scale(x.value.data, c, out.value.data, nn)

        def bw():
            g = out.grad
            if g is None or x.const:
                return
            K.acc_scaled(g, c, _buf(x), nn)

        self.record(bw)
        return out

    def mean(self, x: Var) -> Var:
        """Mean over all elements; returns a 1-element Var."""
        nn = x.value.size
        if nn == 0:
            raise ShapeError("mean of empty tensor")
        out = Var(Tensor((1,), array("d", [K.sum_all(x.value.data, nn) / nn])))

        def bw():
            g = out.grad
            if g is None or x.const:
                return
            K.acc_const(g[0] / nn, _buf(x), nn)

        self.record(bw)
        return out

    # -- likelihood / divergence rows ------------------------------------------

    def bernoulli_ll(self, p: Var, x: Tensor, clamp: float = 1e-7) -> Var:
        n, d = p.value.shape
        if x.shape != p.value.shape:
            raise ShapeError(f"bernoulli_ll: p{p.value.shape} vs x{x.shape}")
        lo, hi = clamp, 1.0 - clamp
        out = Var(Tensor((n,)))
        K.bernoulli_ll(p.value.data, x.data, out.value.data, n, d, lo, hi)

        def bw():
            g = out.grad
            if g is None or p.const:
                return
            K.bernoulli_ll_bwd_acc(p.value.data, x.data, g, _buf(p), n, d, lo, hi)

        self.record(bw)
        return out

    def gaussian_ll(self, mu: Var, sigma: Var, x: Tensor) -> Var:
        n, d = mu.value.shape
        if sigma.value.shape != (n, d) or x.shape != (n, d):
            raise ShapeError(
                f"gaussian_ll: mu{mu.value.shape} sigma{sigma.value.shape} x{x.shape}"
            )
        out = Var(Tensor((n,)))
        K.gaussian_ll(mu.value.data, sigma.value.data, x.data, out.value.data, n, d)

        def bw():
            g = out.grad
            if g is None:
                return
            dmu = _buf(mu) if not mu.const else None
            dsg = _buf(sigma) if not sigma.const else None
            if dmu is not None and dsg is not None:
                K.gaussian_ll_bwd_acc(
                    mu.value.data, sigma.value.data, x.data, g, dmu, dsg, n, d
                )
            elif dmu is not None or dsg is not None:
                scratch = array("d", bytes(8 * n * d))
                K.gaussian_ll_bwd_acc(
                    mu.value.data,
                    sigma.value.data,
                    x.data,
                    g,
                    dmu if dmu is not None else scratch,
                    dsg if dsg is not None else scratch,
                    n,
                    d,
                )

        self.record(bw)
        return out

    def kl_std_normal(self, mu: Var, sigma: Var) -> Var:
        n, d = mu.value.shape
        if sigma.value.shape != (n, d):
            raise ShapeError(
                f"kl_std_normal: mu{mu.value.shape} vs sigma{sigma.value.shape}"
            )
        out = Var(Tensor((n,)))
        K.kl_std_normal(mu.value.data, sigma.value.data, out.value.data, n, d)

        def bw():
            g = out.grad
            if g is None:
                return
            dmu = _buf(mu) if not mu.const else None
            dsg = _buf(sigma) if not sigma.const else None
            if dmu is not None and dsg is not None:
                K.kl_std_normal_bwd_acc(
                    mu.value.data, sigma.value.data, g, dmu, dsg, n, d
                )
            elif dmu is not None or dsg is not None:
                scratch = array("d", bytes(8 * n * d))
                K.kl_std_normal_bwd_acc(
                    mu.value.data,
                    sigma.value.data,
                    g,
                    dmu if dmu is not None else scratch,
                    dsg if dsg is not None else scratch,
                    n,
                    d,
                )

        self.record(bw)
        return out

    # -- batch normalization ----------------------------------------------------

    def batchnorm(
        self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Tensor,
        running_var: Tensor,
        training: bool,
        momentum: float = BN_MOMENTUM,
        eps: float = BN_EPS,
    ) -> Var:
        n, d = x.value.shape
        if gamma.value.shape != (d,) or beta.value.shape != (d,):
            raise ShapeError(f"batchnorm: gamma/beta must have shape ({d},)")
        out = Var(Tensor((n, d)))
        if training:
            if n < 2:
                raise ShapeError(
                    f"batchnorm in train mode needs a batch of at least 2, got {n}"
                )
            xhat = array("d", bytes(8 * n * d))
            bmean = array("d", bytes(8 * d))
            bvar = array("d", bytes(8 * d))
            K.bn_train(
                x.value.data, gamma.value.data, beta.value.data,
                out.value.data, xhat, bmean, bvar, n, d, eps,
            )
            for j in range(d):
                running_mean.data[j] = momentum * running_mean.data[j] + (1.0 - momentum) * bmean[j]
                running_var.data[j] = momentum * running_var.data[j] + (1.0 - momentum) * bvar[j]

            def bw_train():
                g = out.grad
                if g is None:
                    return
                dx = _buf(x) if not x.const else array("d", bytes(8 * n * d))
                K.bn_train_bwd_acc(
                    xhat, bvar, gamma.value.data, g,
                    dx, _buf(gamma), _buf(beta), n, d, eps,
                )

            self.record(bw_train)
        else:
            rmean = array("d", running_mean.data)
            rvar = array("d", running_var.data)
            K.bn_eval(
                x.value.data, gamma.value.data, beta.value.data,
                rmean, rvar, out.value.data, n, d, eps,
            )

            def bw_eval():
                g = out.grad
                if g is None:
                    return
                dx = _buf(x) if not x.const else array("d", bytes(8 * n * d))
                K.bn_eval_bwd_acc(
                    x.value.data, gamma.value.data, rmean, rvar, g,
                    dx, _buf(gamma), _buf(beta), n, d, eps,
                )

            self.record(bw_eval)
        return out

    # -- classifier loss ----------------------------------------------------------

    def softmax_xent(self, logits: Var, labels, weights: Tensor) -> Var:
        """Per-row weighted cross-entropy; labels is an int buffer, weights (n,)."""
        n, kcls = logits.value.shape
        if len(labels) != n or weights.shape != (n,):
            raise ShapeError(
                f"softmax_xent: logits{logits.value.shape}, "
                f"{len(labels)} labels, weights{weights.shape}"
            )
        out = Var(Tensor((n,)))
        probs = array("d", bytes(8 * n * kcls))
        K.softmax_xent(logits.value.data, labels, weights.data,
                       out.value.data, probs, n, kcls)

        def bw():
            g = out.grad
            if g is None or logits.const:
                return
            K.softmax_xent_bwd_acc(probs, labels, weights.data, g,
                                   _buf(logits), n, kcls)

        self.record(bw)
        return out
