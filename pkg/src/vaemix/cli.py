"""Command-line driver.

Subcommands cover the full pipeline: pretrain (base model), fit-mixture
(blocked Gibbs over components), train-semisup (experts + baseline over
trials), reconstruct, export-latents, and eval.  Every command is a pure
function of (config, dataset files, seed): reruns emit byte-identical
metrics.  Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.
"""

import argparse
import dataclasses
import json
import os
import statistics
import sys
import time
from array import array
from typing import List, Optional, Tuple

from .config import RunConfig, build_config
from .data_io import (
    Dataset,
    MetricsWriter,
    binarize,
    gather_rows,
    load_checkpoint,
    load_idx,
    random_prototypes,
    save_checkpoint,
    synth_patterns,
    write_csv,
)
from .errors import ConfigError, DataError, NumericsError, VaemixError
from .mixture import (
    MixtureConfig,
    MixtureState,
    expected_reconstruction,
    export_latent_stats,
    fit,
    mixture_from_named_tensors,
    mixture_named_tensors,
    resume_fit,
)
from .moe import (
    MoeConfig,
    MoeModel,
    evaluate,
    latent_features,
    linear_probe,
    moe_from_named_tensors,
    moe_named_tensors,
    train_baseline,
    train_with_weights,
)
from .mixture import responsibility
from .rng import (
    STREAM_EVAL,
    STREAM_INIT,
    STREAM_LABEL_BASE,
    STREAM_MOE_RESP,
    STREAM_MOE_SHUFFLE_BASE,
    STREAM_PRETRAIN_EPS,
    CounterRng,
)
from .tensor import Tensor
from .vae import VaeConfig, VaeModel, model_from_tensors, model_meta, \
    model_named_tensors, pretrain

# streams reserved for label seeding during mixture init
SEED_LABEL_STREAM = 49_999

# synthetic data streams (keyed by data_seed, independent of the run seed)
SYNTH_PROTO_STREAM = 100
SYNTH_TRAIN_STREAM = 101
SYNTH_TEST_STREAM = 102


def _wall_ms_enabled() -> bool:
    return os.environ.get("VAEMIX_WALL_MS", "") not in ("", "0")


class _Clock:
    """Millisecond timer that reports nothing unless explicitly enabled,
    keeping metrics files byte-identical across reruns."""

    def __init__(self):
        self.enabled = _wall_ms_enabled()
        self.start = time.monotonic()

    def ms(self) -> Optional[float]:
        if not self.enabled:
            return None
        return (time.monotonic() - self.start) * 1000.0


def make_synth_split(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    protos = random_prototypes(
        cfg.synth_classes, cfg.synth_dim,
        CounterRng(cfg.data_seed, SYNTH_PROTO_STREAM),
    )

    def split_counts(total: int) -> List[int]:
        k = cfg.synth_classes
        base = total // k
        counts = [base] * k
        for i in range(total - base * k):
            counts[i] += 1
        return counts

    train = synth_patterns(protos, split_counts(cfg.synth_count),
                           cfg.synth_flip,
                           CounterRng(cfg.data_seed, SYNTH_TRAIN_STREAM))
    test = synth_patterns(protos, split_counts(cfg.synth_test_count),
                          cfg.synth_flip,
                          CounterRng(cfg.data_seed, SYNTH_TEST_STREAM))
    return train, test


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    if cfg.dataset == "synth":
        return make_synth_split(cfg)
    train = load_idx(cfg.images_path, cfg.labels_path or None)
    test = None
    if cfg.test_images_path:
        test = load_idx(cfg.test_images_path, cfg.test_labels_path or None)
    if cfg.binarize_input and cfg.decoder_kind == "bernoulli":
        train = binarize(train)
        if test is not None:
            test = binarize(test)
    return train, test


def vae_config_for(cfg: RunConfig, input_dim: int) -> VaeConfig:
    return VaeConfig(
        input_dim=input_dim,
        hidden_dim=cfg.hidden_dim,
        latent_dim=cfg.latent_dim,
        decoder_kind=cfg.decoder_kind,
        architecture=cfg.architecture,
        mc_samples=cfg.mc_samples,
        learning_rate=cfg.learning_rate,
    )


def mixture_config_for(cfg: RunConfig) -> MixtureConfig:
    return MixtureConfig(
        alpha=cfg.alpha,
        c_max=cfg.c_max,
        max_sweeps=cfg.max_sweeps,
        convergence_tol=cfg.convergence_tol,
        update_rule=cfg.update_rule,
    )


def _paths(cfg: RunConfig) -> dict:
    out = cfg.out_dir
    return {
        "base": os.path.join(out, "base.ckpt"),
        "mixture": os.path.join(out, "mixture.ckpt"),
        "moe": os.path.join(out, "moe.ckpt"),
        "baseline": os.path.join(out, "baseline.ckpt"),
        "report": os.path.join(out, "report.json"),
        "sweeps": os.path.join(out, "sweeps.csv"),
        "latents": os.path.join(out, "latents.csv"),
        "recon": os.path.join(out, "reconstructions.csv"),
    }


def _metrics(cfg: RunConfig, command: str) -> MetricsWriter:
    path = os.path.join(cfg.out_dir, f"metrics_{command}.csv")
    return MetricsWriter(path, comment=f"config {cfg.echo()}")


def draw_balanced_labels(labels: array, n_classes: int, budget: int,
                         rng: CounterRng) -> List[int]:
    """Class-balanced subset of `budget` indices (remainder to low classes)."""
    per, rem = divmod(budget, n_classes)
    chosen: List[int] = []
    for cls in range(n_classes):
        pool = [i for i, y in enumerate(labels) if y == cls]
        take = per + (1 if cls < rem else 0)
        if take > len(pool):
            raise DataError(
                f"label budget wants {take} of class {cls}, only "
                f"{len(pool)} available"
            )
        perm = rng.permutation(len(pool))
        chosen.extend(pool[j] for j in perm[:take])
    return sorted(chosen)


def _load_mixture(path: str) -> MixtureState:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "mixture":
        raise ConfigError(f"{path} is not a mixture checkpoint")
    return mixture_from_named_tensors(meta, tensors)


def _load_base(path: str) -> Tuple[VaeModel, VaeConfig]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ConfigError(f"{path} is not a base model checkpoint")
    vc = VaeConfig(**meta["vae_config"])
    return model_from_tensors(vc, "base", meta["model"], tensors), vc


def _mean_std(values: List[float]) -> Tuple[float, float]:
    mean = sum(values) / len(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, args) -> int:
    data, _ = load_datasets(cfg)
    vc = vae_config_for(cfg, data.dim)
    model = VaeModel(
        vc,
        init_rng=CounterRng(cfg.seed, STREAM_INIT),
        eps_rng=CounterRng(cfg.seed, STREAM_PRETRAIN_EPS),
        tag="base",
    )
    run_id = f"pretrain-seed{cfg.seed}"
    clock = _Clock()
    with _metrics(cfg, "pretrain") as metrics:
        def on_step(step, loss, recon, kl):
            metrics.emit({
                "run_id": run_id,
                "phase": "pretrain",
                "sweep_or_epoch": step,
                "component_count": 1,
                "elbo": -loss,
                "recon_error": -recon,
                "kl": kl,
                "wall_ms": clock.ms(),
            })

        curve = pretrain(model, data.instances, cfg.max_iterations,
                         cfg.batch_size, cfg.seed,
                         convergence_tol=cfg.convergence_tol,
                         step_callback=on_step)
    meta = {
        "kind": "vae",
        "config_echo": json.loads(cfg.echo()),
        "vae_config": dataclasses.asdict(vc),
        "model": model_meta(model),
        "steps": len(curve),
    }
    path = _paths(cfg)["base"]
    save_checkpoint(path, meta, model_named_tensors(model, "base"))
    print(f"pretrained base model: {len(curve)} steps, "
          f"final loss {curve[-1]:.6g} -> {path}")
    return 0


def cmd_fit_mixture(cfg: RunConfig, args) -> int:
    data, _ = load_datasets(cfg)
    paths = _paths(cfg)
    run_id = f"fit-seed{cfg.seed}"
    clock = _Clock()
    mix_cfg = mixture_config_for(cfg)

    sweeps_path = paths["sweeps"]
    sweeps_new = not (os.path.exists(sweeps_path)
                      and os.path.getsize(sweeps_path) > 0)
    sweeps_f = open(sweeps_path, "a", encoding="utf-8")
    if sweeps_new:
        sweeps_f.write("sweep,reassignments,spawns,removals,"
                       "added_total,removed_total,component_count\n")

    with _metrics(cfg, "fit") as metrics:
        def on_sweep(sweep, stats, state):
            metrics.emit({
                "run_id": run_id,
                "phase": "fit",
                "sweep_or_epoch": sweep,
                "component_count": stats["component_count"],
                "elbo": -stats["elbo"],
                "recon_error": -stats["recon"],
                "kl": stats["kl"],
                "wall_ms": clock.ms(),
            })
            sweeps_f.write(
                f"{sweep},{stats['reassignments']},{stats['spawns']},"
                f"{stats['removals']},{stats['added_total']},"
                f"{stats['removed_total']},{stats['component_count']}\n"
            )
            sweeps_f.flush()
            meta, tensors = mixture_named_tensors(state)
            meta["config_echo"] = json.loads(cfg.echo())
            save_checkpoint(paths["mixture"], meta, tensors)

        try:
            if args.resume and os.path.exists(paths["mixture"]):
                state = _load_mixture(paths["mixture"])
                state = resume_fit(state, data.instances, mix_cfg, on_sweep)
            else:
                base_path = args.base or paths["base"]
                base, vc = _load_base(base_path)
                sweep_lr = cfg.sweep_learning_rate or cfg.learning_rate
                sweep_vc = dataclasses.replace(vc, learning_rate=sweep_lr)
                labeled = None
                n_classes = None
                if args.seed_labels:
                    if data.labels is None:
                        raise DataError(
                            "label seeding requested but the dataset "
                            "has no labels"
                        )
                    idx = draw_balanced_labels(
                        data.labels, data.n_classes, cfg.label_budget,
                        CounterRng(cfg.seed, SEED_LABEL_STREAM),
                    )
                    labeled = [(i, data.labels[i]) for i in idx]
                    n_classes = data.n_classes
                state = fit(
                    data.instances, sweep_vc, mix_cfg, cfg.seed,
                    labeled=labeled, n_classes=n_classes,
                    sweep_callback=on_sweep, base_model=base,
                )
        finally:
            sweeps_f.close()

    meta, tensors = mixture_named_tensors(state)
    meta["config_echo"] = json.loads(cfg.echo())
    save_checkpoint(paths["mixture"], meta, tensors)
    print(f"fitted mixture: {state.n_components} components after "
          f"{state.sweeps_done} sweeps -> {paths['mixture']}")
    return 0


def cmd_train_semisup(cfg: RunConfig, args) -> int:
    data, test = load_datasets(cfg)
    if data.labels is None:
        raise DataError("train-semisup needs a labeled dataset")
    eval_set = test if test is not None and test.labels is not None else data
    paths = _paths(cfg)
    state = _load_mixture(args.mixture or paths["mixture"])
    C = state.n_components
    n_classes = data.n_classes
    moe_cfg = MoeConfig(
        n_classes=n_classes,
        learning_rate=cfg.moe_learning_rate,
        epochs=cfg.moe_epochs,
        batch_size=cfg.moe_batch_size,
        train_trunk=cfg.train_trunk,
    )
    gating = cfg.gating_samples or None
    clock = _Clock()
    trial_rows = []
    moe_errors = []
    base_errors = []
    last_moe = None
    last_baseline = None
    with _metrics(cfg, "semisup") as metrics:
        for t in range(cfg.n_trials):
            idx = draw_balanced_labels(
                data.labels, n_classes, cfg.label_budget,
                CounterRng(cfg.seed, STREAM_LABEL_BASE + t),
            )
            x_lab = gather_rows(data.instances, idx)
            y_lab = array("q", (data.labels[i] for i in idx))

            moe = MoeModel(moe_cfg, state.base_model, n_experts=C)
            if C == 1:
                resp = Tensor.full((x_lab.shape[0], 1), 1.0)
            else:
                resp = responsibility(
                    state.components, x_lab,
                    CounterRng(cfg.seed, STREAM_MOE_RESP + 100 * t),
                    mc_samples=gating,
                )
            train_with_weights(moe, x_lab, y_lab, resp, cfg.seed,
                               shuffle_stream_base=STREAM_MOE_SHUFFLE_BASE
                               + 100_000 * t)
            moe_err, moe_pc, moe_nll = evaluate(
                moe, state.components, eval_set.instances, eval_set.labels,
                CounterRng(cfg.seed, STREAM_EVAL + 100 * t),
                gating_samples=gating,
            )

            baseline, _ = train_baseline(
                moe_cfg, state.base_model, x_lab, y_lab, cfg.seed,
                shuffle_stream_base=STREAM_MOE_SHUFFLE_BASE + 100_000 * t,
            )
            base_err, base_pc, base_nll = evaluate(
                baseline, [state.base_model], eval_set.instances,
                eval_set.labels,
                CounterRng(cfg.seed, STREAM_EVAL + 100 * t),
            )

            moe_errors.append(moe_err)
            base_errors.append(base_err)
            last_moe, last_baseline = moe, baseline
            for arm, err, nll, pc in (
                ("moe", moe_err, moe_nll, moe_pc),
                ("baseline", base_err, base_nll, base_pc),
            ):
                metrics.emit({
                    "run_id": f"semisup-seed{cfg.seed}-t{t}-{arm}",
                    "phase": "semisup",
                    "sweep_or_epoch": t,
                    "component_count": C,
                    "error_rate": err,
                    "wall_ms": clock.ms(),
                })
                trial_rows.append({
                    "trial": t,
                    "arm": arm,
                    "error_rate": err,
                    "log_loss": nll,
                    "per_class_accuracy": pc,
                    "labels_used": len(idx),
                })

    moe_mean, moe_std = _mean_std(moe_errors)
    base_mean, base_std = _mean_std(base_errors)
    report = {
        "n_trials": cfg.n_trials,
        "label_budget": cfg.label_budget,
        "component_count": C,
        "trials": trial_rows,
        "moe": {"mean_error": moe_mean, "std_error": moe_std},
        "baseline": {"mean_error": base_mean, "std_error": base_std},
    }
    with open(paths["report"], "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    meta, tensors = moe_named_tensors(last_moe)
    meta["config_echo"] = json.loads(cfg.echo())
    save_checkpoint(paths["moe"], meta, tensors)
    meta_b, tensors_b = moe_named_tensors(last_baseline)
    meta_b["config_echo"] = json.loads(cfg.echo())
    save_checkpoint(paths["baseline"], meta_b, tensors_b)
    print(f"semi-supervised report ({cfg.n_trials} trials, "
          f"{cfg.label_budget} labels): "
          f"moe {moe_mean:.4f} +/- {moe_std:.4f}, "
          f"baseline {base_mean:.4f} +/- {base_std:.4f} -> {paths['report']}")
    return 0


def _pick_split(cfg: RunConfig, split: str) -> Dataset:
    train, test = load_datasets(cfg)
    if split == "train":
        return train
    if test is None:
        raise DataError("no test split available; use --split train")
    return test


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    data = _pick_split(cfg, args.split)
    paths = _paths(cfg)
    state = _load_mixture(args.mixture or paths["mixture"])
    x = data.instances
    recon = expected_reconstruction(
        state, x, CounterRng(cfg.seed, STREAM_EVAL), cfg.recon_samples,
    )
    n, d = x.shape
    errors = []
    rows = []
    for i in range(n):
        s = 0.0
        off = i * d
        for j in range(d):
            diff = x.data[off + j] - recon.data[off + j]
            s += diff * diff
        err = s ** 0.5
        errors.append(err)
        rows.append([i, err] + list(recon.data[off : off + d]))
    header = ["instance_id", "l2_error"] + [f"recon_{j}" for j in range(d)]
    write_csv(paths["recon"], header, rows)
    mean_err = sum(errors) / len(errors)
    clock = _Clock()
    with _metrics(cfg, "reconstruct") as metrics:
        metrics.emit({
            "run_id": f"reconstruct-seed{cfg.seed}",
            "phase": "reconstruct",
            "sweep_or_epoch": 0,
            "component_count": state.n_components,
            "recon_error": mean_err,
            "wall_ms": clock.ms(),
        })
    print(f"mean reconstruction error {mean_err:.6g} over {n} instances "
          f"-> {paths['recon']}")
    return 0


def cmd_export_latents(cfg: RunConfig, args) -> int:
    data = _pick_split(cfg, args.split)
    paths = _paths(cfg)
    state = _load_mixture(args.mixture or paths["mixture"])
    header, rows = export_latent_stats(
        state, data.instances, CounterRng(cfg.seed, STREAM_EVAL),
    )
    write_csv(paths["latents"], header, rows)
    print(f"wrote {len(rows)} latent rows ({state.n_components} components "
          f"x {data.n} instances) -> {paths['latents']}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    data, test = load_datasets(cfg)
    eval_set = test if test is not None else data
    paths = _paths(cfg)
    state = _load_mixture(args.mixture or paths["mixture"])
    C = state.n_components
    lines = [f"components: {C}"]

    recon_rng = CounterRng(cfg.seed, STREAM_EVAL)
    recon = expected_reconstruction(state, eval_set.instances, recon_rng,
                                    cfg.recon_samples)
    n, d = eval_set.instances.shape
    total = 0.0
    for i in range(n):
        s = 0.0
        off = i * d
        for j in range(d):
            diff = eval_set.instances.data[off + j] - recon.data[off + j]
            s += diff * diff
        total += s ** 0.5
    lines.append(f"mean reconstruction error: {total / n:.6g}")

    if data.labels is not None and eval_set.labels is not None:
        gating = cfg.gating_samples or None
        accs_mix = []
        accs_single = []
        for t in range(cfg.n_trials):
            idx = draw_balanced_labels(
                data.labels, data.n_classes, cfg.label_budget,
                CounterRng(cfg.seed, STREAM_LABEL_BASE + t),
            )
            x_lab = gather_rows(data.instances, idx)
            y_lab = array("q", (data.labels[i] for i in idx))
            feats_tr = latent_features(
                state.components, x_lab,
                CounterRng(cfg.seed, STREAM_MOE_RESP + 100 * t),
                gating_samples=gating)
            feats_te = latent_features(
                state.components, eval_set.instances,
                CounterRng(cfg.seed, STREAM_EVAL + 100 * t),
                gating_samples=gating)
            accs_mix.append(linear_probe(
                feats_tr, y_lab, feats_te, eval_set.labels,
                data.n_classes, cfg.seed))
            sf_tr = latent_features([state.base_model], x_lab,
                                    CounterRng(cfg.seed, 1))
            sf_te = latent_features([state.base_model], eval_set.instances,
                                    CounterRng(cfg.seed, 1))
            accs_single.append(linear_probe(
                sf_tr, y_lab, sf_te, eval_set.labels,
                data.n_classes, cfg.seed))
        mix_mean, _ = _mean_std(accs_mix)
        single_mean, _ = _mean_std(accs_single)
        lines.append(f"probe accuracy (mixture latents): {mix_mean:.4f}")
        lines.append(f"probe accuracy (single latents): {single_mean:.4f}")

    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out-dir", dest="out_dir", help="artifact directory")
    p.add_argument("--trials", dest="n_trials", type=int,
                   help="trial count for semi-supervised runs")
    p.add_argument("--label-budget", dest="label_budget", type=int,
                   help="total labeled instances to draw")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vaemix",
        description="Nonparametric mixture of variational autoencoders "
                    "with responsibility-gated semi-supervised experts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base model")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fit-mixture", help="blocked Gibbs over components")
    _add_common(p)
    p.add_argument("--base", help="base model checkpoint path")
    p.add_argument("--resume", action="store_true",
                   help="continue from the last mixture checkpoint")
    p.add_argument("--seed-labels", action="store_true",
                   help="initialize one component per class from labels")
    p.set_defaults(func=cmd_fit_mixture)

    p = sub.add_parser("train-semisup",
                       help="train gated experts and the baseline arm")
    _add_common(p)
    p.add_argument("--mixture", help="mixture checkpoint path")
    p.set_defaults(func=cmd_train_semisup)

    p = sub.add_parser("reconstruct", help="expected reconstructions + errors")
    _add_common(p)
    p.add_argument("--mixture", help="mixture checkpoint path")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("export-latents", help="per-component latent stats")
    _add_common(p)
    p.add_argument("--mixture", help="mixture checkpoint path")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("eval", help="summary metrics for stored checkpoints")
    _add_common(p)
    p.add_argument("--mixture", help="mixture checkpoint path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(
            args.config,
            seed=args.seed,
            out_dir=args.out_dir,
            n_trials=args.n_trials,
            label_budget=args.label_budget,
        )
        os.makedirs(cfg.out_dir, exist_ok=True)
        return args.func(cfg, args)
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (VaemixError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
