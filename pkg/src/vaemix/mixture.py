"""Infinite mixture of VAEs trained by blocked Gibbs sampling.

The mixture alternates two blocks: (1) sample a component assignment for each
instance from the Dirichlet-process conditional, where a component's pull is
its occupation number (n-1) * responsibility and a fresh component is born
with probability alpha / (n-1+alpha); (2) update component parameters from
the per-component change-sets: one negative-learning-rate step on the
instances that left, one positive step on the instances that joined.

New components are deep copies of a pre-trained base model, so they can
reconstruct inputs immediately; components that lose all instances are
removed.  Responsibilities share one set of reparameterization draws across
components, which makes them exactly invariant to component order.
"""

import math
from array import array
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

from .autodiff import log_sum_exp
from .backend import kernels as K
from .data_io import gather_rows
from .errors import ConfigError, DataError
from .rng import STREAM_COMPONENT_BASE, STREAM_GIBBS, STREAM_INIT, \
    STREAM_PRETRAIN_EPS, CounterRng
from .tensor import Tensor
from .vae import VaeConfig, VaeModel, pretrain


class _Spawn:
    """Sentinel returned by sample_assignment when the new-component slot wins."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "SPAWN"


SPAWN = _Spawn()


@dataclass
class MixtureConfig:
    alpha: float = 2.0
    c_max: int = 64
    max_sweeps: int = 50
    convergence_tol: float = 1e-4
    convergence_patience: int = 3
    # optimizer for the forget/learn steps: "sgd" scales the step by the
    # actual gradient, so it anneals on its own as components specialize;
    # "adam" keeps the full step size forever and can orbit the optimum.
    update_rule: str = "sgd"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.c_max < 1:
            raise ConfigError("c_max must be >= 1")
        if self.max_sweeps < 0:
            raise ConfigError("max_sweeps must be >= 0")
        if self.convergence_tol <= 0:
            raise ConfigError("convergence_tol must be positive")
        if self.update_rule not in ("adam", "sgd"):
            raise ConfigError(f"unknown update rule {self.update_rule!r}")


class AssignmentDistribution(NamedTuple):
    existing: List[float]
    new: float


class MixtureState:
    def __init__(self, base_model: VaeModel, components: List[VaeModel],
                 n_instances: int, alpha: float, c_max: int, seed: int,
                 gibbs_rng: Optional[CounterRng] = None,
                 next_serial: Optional[int] = None,
                 update_rule: str = "sgd"):
        self.base_model = base_model
        self.components = components
        self.assignments = array("q", [-1] * n_instances)
        self.alpha = alpha
        self.c_max = c_max
        self.seed = seed
        self.gibbs_rng = gibbs_rng or CounterRng(seed, STREAM_GIBBS)
        self.next_serial = len(components) if next_serial is None else next_serial
        self.update_rule = update_rule
        self.added: List[List[int]] = [[] for _ in components]
        self.removed: List[List[int]] = [[] for _ in components]
        # convergence bookkeeping, persisted so resumes continue the streak
        self.sweeps_done = 0
        self.prev_elbo: Optional[float] = None
        self.flat_streak = 0

    @property
    def n_components(self) -> int:
        return len(self.components)

    def occupancy(self) -> List[int]:
        counts = [0] * len(self.components)
        for c in self.assignments:
            if c >= 0:
                counts[c] += 1
        return counts


# ---------------------------------------------------------------------------
# assignment math
# ---------------------------------------------------------------------------

def shared_eps(rng: CounterRng, n: int, latent_dim: int,
               count: int) -> List[Tensor]:
    """Reparameterization draws reused across every component."""
    out = []
    for _ in range(count):
        eps = Tensor((n, latent_dim))
        rng.fill_normal(eps.data, eps.size)
        out.append(eps)
    return out


def loglik_columns(components: Sequence[VaeModel], x: Tensor,
                   eps_list: Sequence[Tensor]) -> List[Tensor]:
    """Per-component expected reconstruction log-likelihood, one column each."""
    return [comp.recon_ll_rows(x, eps_list) for comp in components]


def _softmax_row(logliks: Sequence[float]) -> List[float]:
    lse = log_sum_exp(logliks)
    return [math.exp(v - lse) for v in logliks]


def responsibility(components: Sequence[VaeModel], x: Tensor,
                   rng: CounterRng, mc_samples: Optional[int] = None) -> Tensor:
    """Softmax over components of expected reconstruction log-likelihood.

    Returns an (n, C) tensor; draws are shared across components so identical
    components come out exactly uniform.
    """
    if not components:
        raise ConfigError("responsibility needs at least one component")
    cfg = components[0].config
    L = cfg.mc_samples if mc_samples is None else mc_samples
    n = x.shape[0]
    eps_list = shared_eps(rng, n, cfg.latent_dim, L)
    cols = loglik_columns(components, x, eps_list)
    out = Tensor((n, len(components)))
    for i in range(n):
        row = _softmax_row([col.data[i] for col in cols])
        for c, v in enumerate(row):
            out.data[i * len(components) + c] = v
    return out


def occupation_number(n: int, responsibility_c: float) -> float:
    """Soft occupancy (n-1) * responsibility; zero for a lone instance."""
    if n < 1:
        raise DataError(f"occupation number needs n >= 1, got {n}")
    return (n - 1) * responsibility_c


def assignment_distribution(n: int, alpha: float,
                            resp_row: Sequence[float]) -> AssignmentDistribution:
    """existing_c = eta_c / (n-1+alpha), new = alpha / (n-1+alpha)."""
    denom = n - 1 + alpha
    existing = [occupation_number(n, r) / denom for r in resp_row]
    return AssignmentDistribution(existing, alpha / denom)


def sample_assignment(dist: AssignmentDistribution, rng: CounterRng):
    """Categorical draw over existing components with SPAWN as the tail slot."""
    u = rng.uniform()
    acc = 0.0
    for i, p in enumerate(dist.existing):
        acc += p
        if u < acc:
            return i
    return SPAWN


def _sample_existing_only(dist: AssignmentDistribution, rng: CounterRng) -> int:
    """Draw among existing components, renormalized; used at the C_max cap."""
    total = 0.0
    for p in dist.existing:
        total += p
    u = rng.uniform() * total
    acc = 0.0
    last = len(dist.existing) - 1
    for i, p in enumerate(dist.existing):
        acc += p
        if u < acc:
            return i
    return last


def _argmax_existing(dist: AssignmentDistribution) -> int:
    best = 0
    for i in range(1, len(dist.existing)):
        if dist.existing[i] > dist.existing[best]:
            best = i
    return best


# ---------------------------------------------------------------------------
# structural moves
# ---------------------------------------------------------------------------

def spawn_component(state: MixtureState) -> int:
    """Append a deep copy of the pre-trained base; returns its index."""
    if state.base_model is None:
        raise ConfigError("cannot spawn: no pre-trained base model")
    serial = state.next_serial
    state.next_serial += 1
    # new components train under the same config as their siblings, which
    # may differ from the base model's pre-training config
    cfg = state.components[0].config if state.components else None
    comp = state.base_model.clone(
        CounterRng(state.seed, STREAM_COMPONENT_BASE + serial),
        tag=f"c{serial}", config=cfg,
    )
    state.components.append(comp)
    state.added.append([])
    state.removed.append([])
    return len(state.components) - 1


def remove_empty(state: MixtureState) -> int:
    """Drop components with no instances; reindex survivors stably."""
    counts = state.occupancy()
    keep = [c for c, k in enumerate(counts) if k > 0]
    if len(keep) == len(state.components):
        return 0
    remap = {old: new for new, old in enumerate(keep)}
    state.components = [state.components[c] for c in keep]
    state.added = [state.added[c] for c in keep]
    state.removed = [state.removed[c] for c in keep]
    for i, c in enumerate(state.assignments):
        if c >= 0:
            state.assignments[i] = remap[c]
    return len(counts) - len(keep)


def forget_learn_update(state: MixtureState, c: int, x: Tensor) -> None:
    """Unlearn the leavers (negative lr), learn the joiners; clear the sets."""
    comp = state.components[c]
    leaving = state.removed[c]
    joining = state.added[c]
    if leaving:
        comp.train_step(gather_rows(x, leaving), sign=-1,
                        optimizer=state.update_rule)
    if joining:
        comp.train_step(gather_rows(x, joining), sign=1,
                        optimizer=state.update_rule)
    state.removed[c] = []
    state.added[c] = []


# ---------------------------------------------------------------------------
# the sweep
# ---------------------------------------------------------------------------

def gibbs_sweep(state: MixtureState, x: Tensor, mode: str = "sample",
                allow_spawn: bool = True) -> dict:
    """One assignment pass plus the per-component forget/learn updates.

    mode="argmax" is the zero-temperature diagnostic: deterministic given
    state, ties to the lowest index, never spawns.
    """
    if mode not in ("sample", "argmax"):
        raise ConfigError(f"unknown sweep mode {mode!r}")
    n = x.shape[0]
    rng = state.gibbs_rng
    cfg = state.components[0].config
    eps_list = shared_eps(rng, n, cfg.latent_dim, cfg.mc_samples)
    cols = [col.data for col in loglik_columns(state.components, x, eps_list)]
    base_col: Optional[array] = None

    order = rng.permutation(n)
    reassignments = 0
    spawns = 0
    for i in order:
        old_c = state.assignments[i]
        if old_c < 0:
            raise DataError(
                f"instance {i} has no assignment; initialize before sweeping"
            )
        resp_row = _softmax_row([col[i] for col in cols])
        dist = assignment_distribution(n, state.alpha, resp_row)
        if mode == "argmax":
            new_c = _argmax_existing(dist)
        elif allow_spawn and len(state.components) < state.c_max:
            drawn = sample_assignment(dist, rng)
            if drawn is SPAWN:
                new_c = spawn_component(state)
                if base_col is None:
                    base_col = state.base_model.recon_ll_rows(x, eps_list).data
                cols.append(base_col)
                spawns += 1
            else:
                new_c = drawn
        else:
            new_c = _sample_existing_only(dist, rng)
        if new_c != old_c:
            state.removed[old_c].append(i)
            state.added[new_c].append(i)
            state.assignments[i] = new_c
            reassignments += 1

    added_total = sum(len(a) for a in state.added)
    removed_total = sum(len(r) for r in state.removed)
    removals = remove_empty(state)
    for c in range(len(state.components)):
        forget_learn_update(state, c, x)

    elbo, recon, kl = mixture_elbo(state, x)
    state.sweeps_done += 1
    return {
        "reassignments": reassignments,
        "spawns": spawns,
        "removals": removals,
        "added_total": added_total,
        "removed_total": removed_total,
        "component_count": len(state.components),
        "elbo": elbo,
        "recon": recon,
        "kl": kl,
    }


def mixture_elbo(state: MixtureState, x: Tensor) -> Tuple[float, float, float]:
    """Occupancy-weighted mean (loss, recon term, kl term) over the dataset.

    Each instance is scored by its assigned component with frozen parameters
    and eval-mode batchnorm; draws come from the Gibbs stream.
    """
    n = x.shape[0]
    total_loss = 0.0
    total_recon = 0.0
    total_kl = 0.0
    for c, comp in enumerate(state.components):
        rows = [i for i in range(n) if state.assignments[i] == c]
        if not rows:
            continue
        xb = gather_rows(x, rows)
        eps_list = shared_eps(state.gibbs_rng, len(rows),
                              comp.config.latent_dim, comp.config.mc_samples)
        loss, recon, kl = comp.elbo_eval(xb, eps_list, training=False)
        total_loss += loss * len(rows)
        total_recon += recon * len(rows)
        total_kl += kl * len(rows)
    return total_loss / n, total_recon / n, total_kl / n


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def seed_assignments_with_labels(state: MixtureState, x: Tensor,
                                 labeled: Sequence[Tuple[int, int]]) -> None:
    """Force each labeled instance onto the component of its class, then
    apply one forget/learn pass so components start class-specialized."""
    C = len(state.components)
    for i, y in labeled:
        if y < 0 or y >= C:
            raise DataError(f"label {y} has no component (C={C})")
        old = state.assignments[i]
        if old == y:
            continue
        if old >= 0:
            state.removed[old].append(i)
        state.added[y].append(i)
        state.assignments[i] = y
    for c in range(C):
        forget_learn_update(state, c, x)


def _assign_initial(state: MixtureState, x: Tensor) -> None:
    """Give every still-unassigned instance a component.

    With one component this is trivial; with several (label-seeded init) the
    draw follows the responsibilities under the current parameters.  Initial
    placement is not a reassignment, so change-sets stay empty.
    """
    n = x.shape[0]
    C = len(state.components)
    todo = [i for i in range(n) if state.assignments[i] < 0]
    if not todo:
        return
    if C == 1:
        for i in todo:
            state.assignments[i] = 0
        return
    cfg = state.components[0].config
    xb = gather_rows(x, todo)
    eps_list = shared_eps(state.gibbs_rng, len(todo), cfg.latent_dim,
                          cfg.mc_samples)
    cols = [col.data for col in loglik_columns(state.components, xb, eps_list)]
    for row, i in enumerate(todo):
        resp = _softmax_row([col[row] for col in cols])
        state.assignments[i] = state.gibbs_rng.choice(resp)


def fit(x: Tensor, vae_config: VaeConfig, mix_config: MixtureConfig,
        seed: int, pretrain_iterations: int = 1000, batch_size: int = 500,
        labeled: Optional[Sequence[Tuple[int, int]]] = None,
        n_classes: Optional[int] = None,
        pretrain_callback: Optional[Callable] = None,
        sweep_callback: Optional[Callable] = None,
        base_model: Optional[VaeModel] = None) -> MixtureState:
    """Pre-train the base, initialize components, and sweep to convergence.

    Convergence: the relative change of the mixture ELBO loss stays below
    mix_config.convergence_tol for convergence_patience consecutive sweeps.
    A supplied base_model skips pre-training (checkpoint reuse).
    """
    if x.shape[0] == 0:
        raise DataError("cannot fit an empty dataset")
    if base_model is None:
        base_model = VaeModel(
            vae_config,
            init_rng=CounterRng(seed, STREAM_INIT),
            eps_rng=CounterRng(seed, STREAM_PRETRAIN_EPS),
            tag="base",
        )
        pretrain(base_model, x, pretrain_iterations, batch_size, seed,
                 convergence_tol=mix_config.convergence_tol,
                 step_callback=pretrain_callback)
    else:
        bc = base_model.config
        same_shape = (bc.input_dim == vae_config.input_dim
                      and bc.hidden_dim == vae_config.hidden_dim
                      and bc.latent_dim == vae_config.latent_dim
                      and bc.decoder_kind == vae_config.decoder_kind
                      and bc.architecture == vae_config.architecture)
        if not same_shape:
            raise ConfigError(
                "supplied base model does not match vae_config dimensions"
            )

    if labeled:
        if n_classes is None:
            n_classes = max(y for _, y in labeled) + 1
        c_init = n_classes
    else:
        c_init = 1
    components = [
        base_model.clone(CounterRng(seed, STREAM_COMPONENT_BASE + serial),
                         tag=f"c{serial}", config=vae_config)
        for serial in range(c_init)
    ]
    state = MixtureState(base_model, components, x.shape[0],
                         mix_config.alpha, mix_config.c_max, seed,
                         next_serial=c_init,
                         update_rule=mix_config.update_rule)
    if labeled:
        seed_assignments_with_labels(state, x, labeled)
    _assign_initial(state, x)
    return resume_fit(state, x, mix_config, sweep_callback)


def resume_fit(state: MixtureState, x: Tensor, mix_config: MixtureConfig,
               sweep_callback: Optional[Callable] = None) -> MixtureState:
    """Continue sweeping an initialized state until convergence or the cap."""
    while state.sweeps_done < mix_config.max_sweeps:
        stats = gibbs_sweep(state, x)
        elbo = stats["elbo"]
        if state.prev_elbo is not None:
            denom = max(abs(state.prev_elbo), 1e-12)
            if abs(elbo - state.prev_elbo) / denom < mix_config.convergence_tol:
                state.flat_streak += 1
            else:
                state.flat_streak = 0
        state.prev_elbo = elbo
        if sweep_callback is not None:
            sweep_callback(state.sweeps_done - 1, stats, state)
        if state.flat_streak >= mix_config.convergence_patience:
            break
    return state


# ---------------------------------------------------------------------------
# inference over the fitted mixture
# ---------------------------------------------------------------------------

def expected_reconstruction(state: MixtureState, x: Tensor, rng: CounterRng,
                            n_samples: int = 20) -> Tensor:
    """Responsibility-weighted mean of per-component reconstructions."""
    comps = state.components
    if not comps:
        raise ConfigError("mixture has no components")
    cfg = comps[0].config
    n = x.shape[0]
    resp = responsibility(comps, x, rng)
    recon_eps = shared_eps(rng, n, cfg.latent_dim, n_samples)
    out = Tensor((n, cfg.input_dim))
    d = cfg.input_dim
    C = len(comps)
    for c, comp in enumerate(comps):
        rc = _expected_recon_with_eps(comp, x, recon_eps)
        for i in range(n):
            w = resp.data[i * C + c]
            off = i * d
            for j in range(d):
                out.data[off + j] += w * rc.data[off + j]
    return out


def _expected_recon_with_eps(model: VaeModel, x: Tensor,
                             eps_list: Sequence[Tensor]) -> Tensor:
    """Like the model's own expected reconstruction, but with shared draws."""
    from .autodiff import Tape, Var

    tape = Tape()
    pv = model._param_vars()
    mu, sigma = model._encode_vars(tape, pv, Var(x, const=True), training=False)
    out = Tensor((x.shape[0], model.config.input_dim))
    for eps in eps_list:
        z = tape.add(mu, tape.mul(sigma, Var(eps, const=True)))
        dec = model._decode_vars(tape, pv, z, training=False)
        mean = dec if model.config.decoder_kind == "bernoulli" else dec[0]
        K.acc_scaled(mean.value.data, 1.0, out.data, out.size)
    K.ew_scale(out.data, 1.0 / len(eps_list), out.data, out.size)
    return out


def reconstruction_errors(state: MixtureState, x: Tensor, rng: CounterRng,
                          n_samples: int = 20) -> List[float]:
    """Per-instance L2 norm of x minus its expected reconstruction."""
    recon = expected_reconstruction(state, x, rng, n_samples)
    n, d = x.shape
    out = []
    for i in range(n):
        s = 0.0
        off = i * d
        for j in range(d):
            diff = x.data[off + j] - recon.data[off + j]
            s += diff * diff
        out.append(math.sqrt(s))
    return out


def mixture_named_tensors(state: MixtureState):
    """(meta, tensors) pair for the checkpoint container."""
    from dataclasses import asdict

    from .vae import model_meta, model_named_tensors

    meta = {
        "kind": "mixture",
        "alpha": state.alpha,
        "c_max": state.c_max,
        "seed": state.seed,
        "assignments": list(state.assignments),
        "next_serial": state.next_serial,
        "update_rule": state.update_rule,
        "gibbs_rng": state.gibbs_rng.state(),
        "sweeps_done": state.sweeps_done,
        "prev_elbo": state.prev_elbo,
        "flat_streak": state.flat_streak,
        "vae_config": asdict(state.components[0].config),
        "base": model_meta(state.base_model),
        "components": [model_meta(c) for c in state.components],
    }
    tensors = model_named_tensors(state.base_model, "base")
    for idx, comp in enumerate(state.components):
        tensors.extend(model_named_tensors(comp, f"comp{idx}"))
    return meta, tensors


def mixture_from_named_tensors(meta: dict, tensors) -> MixtureState:
    from .vae import VaeConfig, model_from_tensors

    cfg = VaeConfig(**meta["vae_config"])
    base = model_from_tensors(cfg, "base", meta["base"], tensors)
    components = [
        model_from_tensors(cfg, f"comp{idx}", cmeta, tensors)
        for idx, cmeta in enumerate(meta["components"])
    ]
    state = MixtureState(
        base, components, len(meta["assignments"]),
        alpha=meta["alpha"], c_max=meta["c_max"], seed=meta["seed"],
        gibbs_rng=CounterRng.from_state(meta["gibbs_rng"]),
        next_serial=meta["next_serial"],
        update_rule=meta.get("update_rule", "sgd"),
    )
    for i, c in enumerate(meta["assignments"]):
        state.assignments[i] = c
    state.sweeps_done = int(meta["sweeps_done"])
    state.prev_elbo = meta["prev_elbo"]
    state.flat_streak = int(meta["flat_streak"])
    return state


def export_latent_stats(state: MixtureState, x: Tensor,
                        rng: CounterRng) -> Tuple[List[str], List[list]]:
    """(header, rows): one row per (instance, component) with that
    component's posterior moments and responsibility."""
    comps = state.components
    cfg = comps[0].config
    k = cfg.latent_dim
    n = x.shape[0]
    C = len(comps)
    resp = responsibility(comps, x, rng)
    latents = [comp.encode(x) for comp in comps]
    header = (
        ["instance_id", "component_id"]
        + [f"mu_{j}" for j in range(k)]
        + [f"sigma_{j}" for j in range(k)]
        + ["responsibility"]
    )
    rows = []
    for i in range(n):
        for c in range(C):
            mu = latents[c].mu
            sigma = latents[c].sigma
            row = [i, c]
            row.extend(mu.data[i * k : (i + 1) * k])
            row.extend(sigma.data[i * k : (i + 1) * k])
            row.append(resp.data[i * C + c])
            rows.append(row)
    return header, rows
