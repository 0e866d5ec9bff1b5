"""Mixture-of-experts semi-supervised classifier.

One softmax expert per mixture component over a shared trunk (the base
encoder's first layer), gated at prediction time by the generative
responsibilities: p(y|x) = sum_c softmax(expert_c(trunk(x))) * resp_c(x).

Training minimizes the responsibility-weighted log loss with the
responsibilities held constant; gradients never flow into the generative
side.  Expert heads start at zero, so experts stay tied exactly as long as
their weights are uniform, and a one-expert model is the plain softmax
baseline.
"""

import math
from array import array
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .autodiff import Tape, Var
from .backend import kernels as K
from .data_io import gather_rows
from .errors import ConfigError, DataError, NumericsError, ShapeError
from .optim import AdamState, sgd_step
from .rng import (
    STREAM_MOE_SHUFFLE_BASE,
    STREAM_PROBE_SHUFFLE_BASE,
    CounterRng,
)
from .tensor import Tensor
from .vae import VaeModel
from .mixture import responsibility


@dataclass
class MoeConfig:
    n_classes: int
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 100
    train_trunk: bool = False

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


class MoeModel:
    """Shared trunk plus one zero-initialized softmax head per expert."""

    def __init__(self, config: MoeConfig, trunk_source: VaeModel,
                 n_experts: int):
        if n_experts < 1:
            raise ConfigError("need at least one expert")
        self.config = config
        self.n_experts = n_experts
        vcfg = trunk_source.config
        self.hidden_dim = vcfg.hidden_dim
        self.input_dim = vcfg.input_dim
        self.activation = vcfg.architecture  # asymmetric=tanh, symmetric=softplus

        src = dict(trunk_source.parameters())
        self.trunk_w = src["enc.w1"].copy()
        self.trunk_b = src["enc.b1"].copy()
        self.trunk_gamma = src["enc.bn.gamma"].copy()
        self.trunk_beta = src["enc.bn.beta"].copy()
        buf = dict(trunk_source.buffers())
        self.trunk_rmean = buf["enc.bn.rmean"].copy()
        self.trunk_rvar = buf["enc.bn.rvar"].copy()

        self.experts: List[Tuple[Tensor, Tensor]] = [
            (Tensor((self.hidden_dim, config.n_classes)),
             Tensor((config.n_classes,)))
            for _ in range(n_experts)
        ]
        self.adam = AdamState(self.trainable_tensors(),
                              learning_rate=config.learning_rate)

    def trunk_params(self) -> List[Tuple[str, Tensor]]:
        return [
            ("trunk.w", self.trunk_w), ("trunk.b", self.trunk_b),
            ("trunk.bn.gamma", self.trunk_gamma),
            ("trunk.bn.beta", self.trunk_beta),
        ]

    def expert_params(self) -> List[Tuple[str, Tensor]]:
        out = []
        for c, (w, b) in enumerate(self.experts):
            out.append((f"expert{c}.w", w))
            out.append((f"expert{c}.b", b))
        return out

    def trainable(self) -> List[Tuple[str, Tensor]]:
        named = self.expert_params()
        if self.config.train_trunk:
            named.extend(self.trunk_params())
        return named

    def trainable_tensors(self) -> List[Tensor]:
        return [t for _, t in self.trainable()]

    def _trunk_forward(self, tape: Tape, pv: Dict[str, Var], x: Tensor,
                       training: bool) -> Var:
        frozen = not self.config.train_trunk
        xv = Var(x, const=True)
        w = pv.get("trunk.w") or Var(self.trunk_w, const=frozen)
        b = pv.get("trunk.b") or Var(self.trunk_b, const=frozen)
        gamma = pv.get("trunk.bn.gamma") or Var(self.trunk_gamma, const=frozen)
        beta = pv.get("trunk.bn.beta") or Var(self.trunk_beta, const=frozen)
        pre = tape.linear(xv, w, b)
        bn_training = training and self.config.train_trunk and x.shape[0] >= 2
        norm = tape.batchnorm(pre, gamma, beta, self.trunk_rmean,
                              self.trunk_rvar, bn_training)
        if self.activation == "asymmetric":
            return tape.tanh(norm)
        return tape.softplus(norm)

    def _loss(self, tape: Tape, pv: Dict[str, Var], x: Tensor, labels: array,
              weights: Tensor) -> Var:
        """mean_i sum_c w_ic * xent(expert_c(trunk(x_i)), y_i)."""
        n = x.shape[0]
        C = self.n_experts
        if weights.shape != (n, C):
            raise ShapeError(
                f"weights {weights.shape}, expected ({n}, {C})"
            )
        h = self._trunk_forward(tape, pv, x, training=True)
        acc: Optional[Var] = None
        for c in range(C):
            wcol = Tensor((n,))
            for i in range(n):
                wcol.data[i] = weights.data[i * C + c]
            logits = tape.linear(h, pv[f"expert{c}.w"], pv[f"expert{c}.b"])
            rows = tape.softmax_xent(logits, labels, wcol)
            acc = rows if acc is None else tape.add(acc, rows)
        return tape.mean(acc)

    def train_step(self, x: Tensor, labels: array, weights: Tensor,
                   optimizer: str = "adam") -> float:
        tape = Tape()
        pv = {name: Var(t) for name, t in self.trainable()}
        loss = self._loss(tape, pv, x, labels, weights)
        loss_val = loss.value.item()
        if not math.isfinite(loss_val):
            raise NumericsError(
                f"non-finite classifier loss on a batch of {x.shape[0]}"
            )
        tape.backward(loss)
        grads = [pv[name].grad_tensor() for name, _ in self.trainable()]
        if optimizer == "adam":
            self.adam.step(self.trainable_tensors(), grads)
        elif optimizer == "sgd":
            sgd_step(self.trainable_tensors(), grads, self.config.learning_rate)
        else:
            raise ConfigError(f"unknown optimizer {optimizer!r}")
        return loss_val

    def logits_all(self, x: Tensor) -> List[Tensor]:
        """Eval-mode per-expert class probabilities (each row a simplex point)."""
        tape = Tape()
        h = self._trunk_forward(tape, {}, x, training=False)
        n = x.shape[0]
        out = []
        for w, b in self.experts:
            logits = tape.linear(h, Var(w, const=True), Var(b, const=True))
            probs = Tensor((n, self.config.n_classes))
            K.row_softmax(logits.value.data, probs.data, n, self.config.n_classes)
            out.append(probs)
        return out


def predict(model: MoeModel, components: Sequence[VaeModel], x: Tensor,
            rng: CounterRng, gating_samples: Optional[int] = None) -> Tensor:
    """Responsibility-gated class distribution, one row per instance."""
    if len(components) != model.n_experts:
        raise ConfigError(
            f"{model.n_experts} experts but {len(components)} components"
        )
    n = x.shape[0]
    kcls = model.config.n_classes
    C = model.n_experts
    if C == 1:
        resp = Tensor.full((n, 1), 1.0)
    else:
        resp = responsibility(components, x, rng, mc_samples=gating_samples)
    per_expert = model.logits_all(x)
    out = Tensor((n, kcls))
    for c in range(C):
        probs = per_expert[c]
        for i in range(n):
            w = resp.data[i * C + c]
            for j in range(kcls):
                out.data[i * kcls + j] += w * probs.data[i * kcls + j]
    return out


def train(model: MoeModel, components: Sequence[VaeModel], x: Tensor,
          labels: array, seed: int, resp_rng: CounterRng,
          optimizer: str = "adam",
          gating_samples: Optional[int] = None) -> List[float]:
    """Fit the experts with frozen responsibilities; returns per-epoch loss."""
    if x.shape[0] == 0:
        raise DataError("labeled set is empty")
    if len(components) != model.n_experts:
        raise ConfigError(
            f"{model.n_experts} experts but {len(components)} components"
        )
    n = x.shape[0]
    C = model.n_experts
    if C == 1:
        resp = Tensor.full((n, 1), 1.0)
    else:
        resp = responsibility(components, x, resp_rng,
                              mc_samples=gating_samples)
    return train_with_weights(model, x, labels, resp, seed, optimizer)


def train_with_weights(model: MoeModel, x: Tensor, labels: array,
                       weights: Tensor, seed: int,
                       optimizer: str = "adam",
                       shuffle_stream_base: int = STREAM_MOE_SHUFFLE_BASE,
                       ) -> List[float]:
    n = x.shape[0]
    C = model.n_experts
    cfg = model.config
    curve = []
    for epoch in range(cfg.epochs):
        order = CounterRng(seed, shuffle_stream_base + epoch).permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = gather_rows(x, idx)
            yb = array("q", (labels[i] for i in idx))
            wb = Tensor((len(idx), C))
            for r, i in enumerate(idx):
                wb.data[r * C : (r + 1) * C] = weights.data[i * C : (i + 1) * C]
            total += model.train_step(xb, yb, wb, optimizer)
            batches += 1
        curve.append(total / batches)
    return curve


def train_baseline(config: MoeConfig, trunk_source: VaeModel, x: Tensor,
                   labels: array, seed: int,
                   optimizer: str = "adam",
                   shuffle_stream_base: int = STREAM_MOE_SHUFFLE_BASE,
                   ) -> Tuple[MoeModel, List[float]]:
    """Single softmax head over the same trunk, unweighted log loss."""
    model = MoeModel(config, trunk_source, n_experts=1)
    weights = Tensor.full((x.shape[0], 1), 1.0)
    curve = train_with_weights(model, x, labels, weights, seed, optimizer,
                               shuffle_stream_base)
    return model, curve


def evaluate(model: MoeModel, components: Sequence[VaeModel], x: Tensor,
             labels: array, rng: CounterRng,
             gating_samples: Optional[int] = None):
    """(error_rate, per_class_accuracy, log_loss); argmax ties go low."""
    n = x.shape[0]
    kcls = model.config.n_classes
    probs = predict(model, components, x, rng, gating_samples)
    wrong = 0
    nll = 0.0
    per_class_total = [0] * kcls
    per_class_right = [0] * kcls
    for i in range(n):
        off = i * kcls
        best = 0
        for j in range(1, kcls):
            if probs.data[off + j] > probs.data[off + best]:
                best = j
        y = labels[i]
        per_class_total[y] += 1
        if best == y:
            per_class_right[y] += 1
        else:
            wrong += 1
        nll -= math.log(max(probs.data[off + y], 1e-300))
    per_class = [
        (per_class_right[c] / per_class_total[c]) if per_class_total[c] else 0.0
        for c in range(kcls)
    ]
    return wrong / n, per_class, nll / n


# ---------------------------------------------------------------------------
# latent-space linear probe
# ---------------------------------------------------------------------------

def latent_features(components: Sequence[VaeModel], x: Tensor,
                    rng: CounterRng,
                    gating_samples: Optional[int] = None) -> Tensor:
    """Concatenation over components of responsibility-weighted (mu, sigma)."""
    C = len(components)
    k = components[0].config.latent_dim
    n = x.shape[0]
    if C == 1:
        resp = Tensor.full((n, 1), 1.0)
    else:
        resp = responsibility(components, x, rng, mc_samples=gating_samples)
    latents = [comp.encode(x) for comp in components]
    width = C * 2 * k
    out = Tensor((n, width))
    for c in range(C):
        mu = latents[c].mu
        sigma = latents[c].sigma
        for i in range(n):
            w = resp.data[i * C + c]
            dst = i * width + c * 2 * k
            src = i * k
            for j in range(k):
                out.data[dst + j] = w * mu.data[src + j]
                out.data[dst + k + j] = w * sigma.data[src + j]
    return out


def linear_probe(train_features: Tensor, train_labels: array,
                 test_features: Tensor, test_labels: array,
                 n_classes: int, seed: int, epochs: int = 200,
                 batch_size: int = 100,
                 learning_rate: float = 0.01) -> float:
    """Multinomial logistic regression by Adam; returns test accuracy."""
    n, fdim = train_features.shape
    w = Var(Tensor((fdim, n_classes)))
    b = Var(Tensor((n_classes,)))
    adam = AdamState([w.value, b.value], learning_rate=learning_rate)
    ones_cache: Dict[int, Tensor] = {}
    for epoch in range(epochs):
        order = CounterRng(seed, STREAM_PROBE_SHUFFLE_BASE + epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = gather_rows(train_features, idx)
            yb = array("q", (train_labels[i] for i in idx))
            m = len(idx)
            if m not in ones_cache:
                ones_cache[m] = Tensor.full((m,), 1.0)
            tape = Tape()
            wv = Var(w.value)
            bv = Var(b.value)
            logits = tape.linear(Var(xb, const=True), wv, bv)
            loss = tape.mean(tape.softmax_xent(logits, yb, ones_cache[m]))
            tape.backward(loss)
            adam.step([w.value, b.value],
                      [wv.grad_tensor(), bv.grad_tensor()])
    # accuracy on the held-out features
    nt = test_features.shape[0]
    logits = Tensor((nt, n_classes))
    K.matmul(test_features.data, w.value.data, logits.data,
             nt, fdim, n_classes)
    K.add_bias(logits.data, b.value.data, logits.data, nt, n_classes)
    right = 0
    for i in range(nt):
        off = i * n_classes
        best = 0
        for j in range(1, n_classes):
            if logits.data[off + j] > logits.data[off + best]:
                best = j
        if best == test_labels[i]:
            right += 1
    return right / nt


def moe_named_tensors(model: MoeModel):
    meta = {
        "kind": "moe",
        "n_experts": model.n_experts,
        "config": {
            "n_classes": model.config.n_classes,
            "learning_rate": model.config.learning_rate,
            "epochs": model.config.epochs,
            "batch_size": model.config.batch_size,
            "train_trunk": model.config.train_trunk,
        },
        "adam_t": model.adam.t,
        "activation": model.activation,
    }
    tensors = [(f"moe/{name}", t) for name, t in model.trunk_params()]
    tensors.append(("moe/trunk.bn.rmean", model.trunk_rmean))
    tensors.append(("moe/trunk.bn.rvar", model.trunk_rvar))
    tensors.extend((f"moe/{name}", t) for name, t in model.expert_params())
    for (name, _), m, v in zip(model.trainable(), model.adam.m, model.adam.v):
        tensors.append((f"moe/adam.m.{name}", m))
        tensors.append((f"moe/adam.v.{name}", v))
    return meta, tensors


def moe_from_named_tensors(meta: dict, tensors: Dict[str, Tensor],
                           trunk_source: VaeModel) -> MoeModel:
    from .vae import _copy_into

    cfg = MoeConfig(**meta["config"])
    model = MoeModel(cfg, trunk_source, n_experts=int(meta["n_experts"]))
    for name, t in model.trunk_params():
        _copy_into(t, tensors, f"moe/{name}")
    _copy_into(model.trunk_rmean, tensors, "moe/trunk.bn.rmean")
    _copy_into(model.trunk_rvar, tensors, "moe/trunk.bn.rvar")
    for name, t in model.expert_params():
        _copy_into(t, tensors, f"moe/{name}")
    for (name, _), m, v in zip(model.trainable(), model.adam.m, model.adam.v):
        _copy_into(m, tensors, f"moe/adam.m.{name}")
        _copy_into(v, tensors, f"moe/adam.v.{name}")
    model.adam.t = int(meta["adam_t"])
    return model
