"""A single variational autoencoder.

Encoder q(z|x) = N(mu(x), sigma(x) I), standard normal prior, and one of two
decoder families: a bernoulli decoder (affine -> batchnorm -> tanh -> affine
-> sigmoid, for binary data) or a gaussian decoder with mean and deviation
heads (softplus units, for continuous data).  The loss is the negative ELBO
with the reconstruction term estimated by L reparameterized Monte Carlo
draws.

The sigma heads emit log-variance; sigma = exp(0.5 * head output), which
keeps deviations strictly positive everywhere.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from .autodiff import Tape, Var
from .backend import kernels as K
from .errors import ConfigError, DataError, NumericsError, ShapeError
from .optim import AdamState
from .rng import CounterRng
from .tensor import Tensor, glorot_uniform

BERNOULLI_CLAMP = 1e-7


def default_latent_dim(hidden_dim: int) -> int:
    return max(1, round(0.1 * hidden_dim))


@dataclass
class VaeConfig:
    input_dim: int
    hidden_dim: int = 100
    latent_dim: Optional[int] = None
    decoder_kind: str = "bernoulli"
    architecture: str = "asymmetric"
    mc_samples: int = 2
    learning_rate: float = 0.001

    def __post_init__(self):
        if self.latent_dim is None:
            self.latent_dim = default_latent_dim(self.hidden_dim)
        if self.input_dim < 1 or self.hidden_dim < 1 or self.latent_dim < 1:
            raise ConfigError(
                f"dimensions must be >= 1: input={self.input_dim} "
                f"hidden={self.hidden_dim} latent={self.latent_dim}"
            )
        if self.decoder_kind not in ("bernoulli", "gaussian"):
            raise ConfigError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.architecture not in ("asymmetric", "symmetric"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


class LatentGaussian(NamedTuple):
    mu: Tensor
    sigma: Tensor


def reparameterize(latent: LatentGaussian, eps: Tensor) -> Tensor:
    """z = mu + sigma * eps, elementwise."""
    if eps.shape != latent.mu.shape:
        raise ShapeError(f"eps{eps.shape} vs mu{latent.mu.shape}")
    z = Tensor(latent.mu.shape)
    K.ew_mul(latent.sigma.data, eps.data, z.data, z.size)
    K.ew_add(latent.mu.data, z.data, z.data, z.size)
    return z


def kl_diag_gaussian(latent: LatentGaussian) -> Tensor:
    """Per-row KL(q || N(0, I)); closed form for diagonal gaussians."""
    n, d = latent.mu.shape
    out = Tensor((n,))
    K.kl_std_normal(latent.mu.data, latent.sigma.data, out.data, n, d)
    return out


def recon_log_likelihood(x: Tensor, decoder_params, kind: str) -> Tensor:
    """Per-row log p(x | decoder output)."""
    n, d = x.shape
    out = Tensor((n,))
    if kind == "bernoulli":
        _check_binary_range(x)
        p = decoder_params
        K.bernoulli_ll(p.data, x.data, out.data, n, d,
                       BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP)
    elif kind == "gaussian":
        mu, sigma = decoder_params
        K.gaussian_ll(mu.data, sigma.data, x.data, out.data, n, d)
    else:
        raise ConfigError(f"unknown decoder kind {kind!r}")
    return out


def _check_binary_range(x: Tensor) -> None:
    if x.size and (min(x.data) < 0.0 or max(x.data) > 1.0):
        raise DataError("bernoulli decoder requires inputs in [0, 1]")


class VaeModel:
    """Parameters, batchnorm running stats, Adam state, and a noise stream."""

    def __init__(self, config: VaeConfig, init_rng: CounterRng,
                 eps_rng: CounterRng, tag: str = "base"):
        c = config
        self.config = c
        self.tag = tag
        self.eps_rng = eps_rng
        self._params: List[Tuple[str, Tensor]] = []

        def weight(name, fan_in, fan_out):
            t = glorot_uniform(init_rng, fan_in, fan_out, (fan_in, fan_out))
            self._params.append((name, t))
            return t

        def const(name, shape, value=0.0):
            t = Tensor(shape) if value == 0.0 else Tensor.full(shape, value)
            self._params.append((name, t))
            return t

        weight("enc.w1", c.input_dim, c.hidden_dim)
        const("enc.b1", (c.hidden_dim,))
        const("enc.bn.gamma", (c.hidden_dim,), 1.0)
        const("enc.bn.beta", (c.hidden_dim,))
        weight("enc.mu.w", c.hidden_dim, c.latent_dim)
        const("enc.mu.b", (c.latent_dim,))
        weight("enc.logvar.w", c.hidden_dim, c.latent_dim)
        const("enc.logvar.b", (c.latent_dim,))
        weight("dec.w1", c.latent_dim, c.hidden_dim)
        const("dec.b1", (c.hidden_dim,))
        const("dec.bn.gamma", (c.hidden_dim,), 1.0)
        const("dec.bn.beta", (c.hidden_dim,))
        if c.decoder_kind == "bernoulli":
            weight("dec.out.w", c.hidden_dim, c.input_dim)
            const("dec.out.b", (c.input_dim,))
        else:
            weight("dec.mu.w", c.hidden_dim, c.input_dim)
            const("dec.mu.b", (c.input_dim,))
            weight("dec.logvar.w", c.hidden_dim, c.input_dim)
            const("dec.logvar.b", (c.input_dim,))

        self.enc_rmean = Tensor((c.hidden_dim,))
        self.enc_rvar = Tensor.full((c.hidden_dim,), 1.0)
        self.dec_rmean = Tensor((c.hidden_dim,))
        self.dec_rvar = Tensor.full((c.hidden_dim,), 1.0)

        self.adam = AdamState(self.param_tensors(), learning_rate=c.learning_rate)

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self._params)

    def param_tensors(self) -> List[Tensor]:
        return [t for _, t in self._params]

    def buffers(self) -> List[Tuple[str, Tensor]]:
        return [
            ("enc.bn.rmean", self.enc_rmean),
            ("enc.bn.rvar", self.enc_rvar),
            ("dec.bn.rmean", self.dec_rmean),
            ("dec.bn.rvar", self.dec_rvar),
        ]

    def all_params_finite(self) -> bool:
        return all(t.all_finite() for _, t in self._params)

    def clone(self, eps_rng: CounterRng, tag: str,
              config: Optional[VaeConfig] = None) -> "VaeModel":
        """Deep copy with fresh (zeroed) Adam state and its own noise stream.

        An override config may change training hyperparameters (learning
        rate, mc_samples) but must keep the same tensor shapes.
        """
        dup = VaeModel.__new__(VaeModel)
        dup.config = config or self.config
        dup.tag = tag
        dup.eps_rng = eps_rng
        dup._params = [(n, t.copy()) for n, t in self._params]
        dup.enc_rmean = self.enc_rmean.copy()
        dup.enc_rvar = self.enc_rvar.copy()
        dup.dec_rmean = self.dec_rmean.copy()
        dup.dec_rvar = self.dec_rvar.copy()
        dup.adam = AdamState(dup.param_tensors(),
                             learning_rate=dup.config.learning_rate)
        return dup

    def _param_vars(self) -> Dict[str, Var]:
        return {name: Var(t) for name, t in self._params}

    def _act(self, tape: Tape, h: Var) -> Var:
        if self.config.architecture == "asymmetric":
            return tape.tanh(h)
        return tape.softplus(h)

    # -- network forward --------------------------------------------------------

    def _encode_vars(self, tape: Tape, pv: Dict[str, Var], xv: Var,
                     training: bool) -> Tuple[Var, Var]:
        pre = tape.linear(xv, pv["enc.w1"], pv["enc.b1"])
        norm = tape.batchnorm(pre, pv["enc.bn.gamma"], pv["enc.bn.beta"],
                              self.enc_rmean, self.enc_rvar, training)
        h = self._act(tape, norm)
        mu = tape.linear(h, pv["enc.mu.w"], pv["enc.mu.b"])
        logvar = tape.linear(h, pv["enc.logvar.w"], pv["enc.logvar.b"])
        sigma = tape.exp(tape.scale(logvar, 0.5))
        return mu, sigma

    def _decode_vars(self, tape: Tape, pv: Dict[str, Var], z: Var,
                     training: bool):
        pre = tape.linear(z, pv["dec.w1"], pv["dec.b1"])
        norm = tape.batchnorm(pre, pv["dec.bn.gamma"], pv["dec.bn.beta"],
                              self.dec_rmean, self.dec_rvar, training)
        h = self._act(tape, norm)
        if self.config.decoder_kind == "bernoulli":
            return tape.sigmoid(tape.linear(h, pv["dec.out.w"], pv["dec.out.b"]))
        mu = tape.linear(h, pv["dec.mu.w"], pv["dec.mu.b"])
        logvar = tape.linear(h, pv["dec.logvar.w"], pv["dec.logvar.b"])
        sigma = tape.exp(tape.scale(logvar, 0.5))
        return mu, sigma

    def _recon_rows(self, tape: Tape, pv: Dict[str, Var], z: Var, x: Tensor,
                    training: bool) -> Var:
        dec = self._decode_vars(tape, pv, z, training)
        if self.config.decoder_kind == "bernoulli":
            return tape.bernoulli_ll(dec, x, clamp=BERNOULLI_CLAMP)
        return tape.gaussian_ll(dec[0], dec[1], x)

    def _elbo(self, tape: Tape, pv: Dict[str, Var], x: Tensor,
              eps_list: Sequence[Tensor], training: bool):
        """loss = mean KL - mean recon; identity holds exactly in floats."""
        if x.shape[0] == 0:
            raise ShapeError("empty batch")
        if self.config.decoder_kind == "bernoulli":
            _check_binary_range(x)
        xv = Var(x, const=True)
        mu, sigma = self._encode_vars(tape, pv, xv, training)
        kl_rows = tape.kl_std_normal(mu, sigma)
        acc = None
        for eps in eps_list:
            z = tape.add(mu, tape.mul(sigma, Var(eps, const=True)))
            rows = self._recon_rows(tape, pv, z, x, training)
            acc = rows if acc is None else tape.add(acc, rows)
        recon_rows = tape.scale(acc, 1.0 / len(eps_list))
        kl_term = tape.mean(kl_rows)
        recon_term = tape.mean(recon_rows)
        loss = tape.sub(kl_term, recon_term)
        return loss, recon_term, kl_term

    # -- public inference ---------------------------------------------------------

    def encode(self, x: Tensor) -> LatentGaussian:
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"encode expects (n, {self.config.input_dim}), got {x.shape}"
            )
        tape = Tape()
        mu, sigma = self._encode_vars(tape, self._param_vars(),
                                      Var(x, const=True), training=False)
        return LatentGaussian(mu.value, sigma.value)

    def decode(self, z: Tensor):
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(
                f"decode expects (n, {self.config.latent_dim}), got {z.shape}"
            )
        tape = Tape()
        dec = self._decode_vars(tape, self._param_vars(),
                                Var(z, const=True), training=False)
        if self.config.decoder_kind == "bernoulli":
            return dec.value
        return dec[0].value, dec[1].value

    def draw_eps(self, n: int) -> Tensor:
        eps = Tensor((n, self.config.latent_dim))
        self.eps_rng.fill_normal(eps.data, eps.size)
        return eps

    def elbo_eval(self, x: Tensor, eps_list: Optional[Sequence[Tensor]] = None,
                  training: bool = False) -> Tuple[float, float, float]:
        """(loss, recon_term, kl_term) without touching parameters.

        Eval-mode batchnorm by default so repeated calls are pure.
        """
        if eps_list is None:
            eps_list = [self.draw_eps(x.shape[0])
                        for _ in range(self.config.mc_samples)]
        tape = Tape()
        loss, recon, kl = self._elbo(tape, self._param_vars(), x, eps_list, training)
        return loss.value.item(), recon.value.item(), kl.value.item()

    def expected_reconstruction_single(self, x: Tensor,
                                       rng: Optional[CounterRng] = None,
                                       n_samples: int = 1) -> Tensor:
        """Mean decoder mean over n_samples posterior draws; rng=None uses eps=0."""
        if n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        n = x.shape[0]
        tape = Tape()
        pv = self._param_vars()
        mu, sigma = self._encode_vars(tape, pv, Var(x, const=True), training=False)
        out = Tensor((n, self.config.input_dim))
        eps = Tensor((n, self.config.latent_dim))
        for _ in range(n_samples):
            if rng is not None:
                rng.fill_normal(eps.data, eps.size)
            z = tape.add(mu, tape.mul(sigma, Var(eps.copy(), const=True)))
            dec = self._decode_vars(tape, pv, z, training=False)
            mean = dec if self.config.decoder_kind == "bernoulli" else dec[0]
            K.acc_scaled(mean.value.data, 1.0, out.data, out.size)
        K.ew_scale(out.data, 1.0 / n_samples, out.data, out.size)
        return out

    def recon_ll_rows(self, x: Tensor, eps_list: Sequence[Tensor]) -> Tensor:
        """Per-row reconstruction log-likelihood, averaged over shared eps draws."""
        tape = Tape()
        pv = self._param_vars()
        mu, sigma = self._encode_vars(tape, pv, Var(x, const=True), training=False)
        n = x.shape[0]
        out = Tensor((n,))
        for eps in eps_list:
            z = tape.add(mu, tape.mul(sigma, Var(eps, const=True)))
            rows = self._recon_rows(tape, pv, z, x, training=False)
            K.acc_scaled(rows.value.data, 1.0, out.data, n)
        K.ew_scale(out.data, 1.0 / len(eps_list), out.data, n)
        return out

    # -- training --------------------------------------------------------------------

    def train_step(self, x: Tensor, sign: int = 1,
                   eps_list: Optional[Sequence[Tensor]] = None,
                   optimizer: str = "adam") -> Tuple[float, float, float]:
        """One optimizer step on the ELBO loss; sign=-1 unlearns the batch.

        Batches of one row fall back to eval-mode batchnorm (batch statistics
        are undefined there); gradients still flow through the frozen stats.
        """
        n = x.shape[0]
        if eps_list is None:
            eps_list = [self.draw_eps(n) for _ in range(self.config.mc_samples)]
        tape = Tape()
        pv = self._param_vars()
        loss, recon, kl = self._elbo(tape, pv, x, eps_list, training=(n >= 2))
        loss_val = loss.value.item()
        if not math.isfinite(loss_val):
            raise NumericsError(
                f"non-finite loss on component {self.tag!r} for a batch of {n}"
            )
        tape.backward(loss)
        grads = [pv[name].grad_tensor() for name, _ in self._params]
        if optimizer == "adam":
            self.adam.step(self.param_tensors(), grads, sign=sign)
        elif optimizer == "sgd":
            from .optim import sgd_step
            sgd_step(self.param_tensors(), grads, sign * self.config.learning_rate)
        else:
            raise ConfigError(f"unknown optimizer {optimizer!r}")
        if not self.all_params_finite():
            raise NumericsError(
                f"non-finite parameters on component {self.tag!r} after update"
            )
        return loss_val, recon.value.item(), kl.value.item()


def model_named_tensors(model: VaeModel, prefix: str) -> List[Tuple[str, Tensor]]:
    """Every tensor a checkpoint must carry, keyed under prefix."""
    out = []
    for name, t in model.parameters():
        out.append((f"{prefix}/{name}", t))
    for name, t in model.buffers():
        out.append((f"{prefix}/{name}", t))
    for (name, _), m, v in zip(model.parameters(), model.adam.m, model.adam.v):
        out.append((f"{prefix}/adam.m.{name}", m))
        out.append((f"{prefix}/adam.v.{name}", v))
    return out


def model_meta(model: VaeModel) -> dict:
    return {
        "tag": model.tag,
        "adam_t": model.adam.t,
        "eps_rng": model.eps_rng.state(),
    }


def model_from_tensors(config: VaeConfig, prefix: str, meta: dict,
                       tensors: Dict[str, Tensor]) -> VaeModel:
    """Rebuild a model from checkpoint tensors, bit-exact."""
    rng_state = meta["eps_rng"]
    model = VaeModel(
        config,
        init_rng=CounterRng(0, 0),
        eps_rng=CounterRng.from_state(rng_state),
        tag=meta["tag"],
    )
    for name, t in model.parameters():
        _copy_into(t, tensors, f"{prefix}/{name}")
    for name, t in model.buffers():
        _copy_into(t, tensors, f"{prefix}/{name}")
    for (name, _), m, v in zip(model.parameters(), model.adam.m, model.adam.v):
        _copy_into(m, tensors, f"{prefix}/adam.m.{name}")
        _copy_into(v, tensors, f"{prefix}/adam.v.{name}")
    model.adam.t = int(meta["adam_t"])
    return model


def _copy_into(dst: Tensor, tensors: Dict[str, Tensor], key: str) -> None:
    from .errors import CheckpointCorruptError

    src = tensors.get(key)
    if src is None:
        raise CheckpointCorruptError(f"checkpoint is missing tensor {key!r}")
    if src.shape != dst.shape:
        raise CheckpointCorruptError(
            f"checkpoint tensor {key!r} has shape {src.shape}, "
            f"model expects {dst.shape}"
        )
    dst.data[:] = src.data


def pretrain(model: VaeModel, instances: Tensor, max_iterations: int,
             batch_size: int, shuffle_seed: int,
             convergence_tol: float = 1e-4,
             window: int = 20,
             patience: int = 3,
             step_callback=None) -> List[float]:
    """Plain minibatch training until the smoothed loss flattens.

    Convergence: the mean loss over each non-overlapping `window`-step block
    changes by less than `convergence_tol` (relative) for `patience`
    consecutive blocks.  Returns the per-step loss curve.
    """
    from .data_io import batch_iter
    from .rng import STREAM_SHUFFLE_BASE

    curve: List[float] = []
    prev_block: Optional[float] = None
    flat_blocks = 0
    step = 0
    epoch = 0
    while step < max_iterations:
        for batch in batch_iter(instances, batch_size,
                                shuffle_seed, STREAM_SHUFFLE_BASE + epoch):
            loss, recon, kl = model.train_step(batch)
            curve.append(loss)
            if step_callback is not None:
                step_callback(step, loss, recon, kl)
            step += 1
            if step % window == 0:
                block = sum(curve[-window:]) / window
                if prev_block is not None:
                    denom = max(abs(prev_block), 1e-12)
                    if abs(block - prev_block) / denom < convergence_tol:
                        flat_blocks += 1
                    else:
                        flat_blocks = 0
                prev_block = block
                if flat_blocks >= patience:
                    return curve
            if step >= max_iterations:
                break
        epoch += 1
    return curve
