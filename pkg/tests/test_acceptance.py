"""End-to-end checks of the package's numerical and behavioral guarantees.

Each test records one line in the terminal summary (see conftest).  The
mixture fits are expensive, so they are built once per module and shared by
the tests that need them; the wall-clock budget of each check counts the
fits it triggered.
"""
import math
import os
import time
from array import array
from dataclasses import replace

import numpy as np
import pytest

from conftest import record_acceptance, tensor_from_rows, tensor_randn
from vaemix.cli import SEED_LABEL_STREAM, draw_balanced_labels
from vaemix.cli import main as cli_main
from vaemix.data_io import (gather_rows, load_checkpoint, load_idx,
                            random_prototypes, save_checkpoint, synth_patterns,
                            write_idx_images, write_idx_labels)
from vaemix.mixture import (MixtureConfig, MixtureState, assignment_distribution,
                            expected_reconstruction, fit,
                            mixture_from_named_tensors, mixture_named_tensors,
                            reconstruction_errors, responsibility,
                            sample_assignment)
from vaemix.moe import (MoeConfig, MoeModel, evaluate, latent_features,
                        linear_probe, train_baseline, train_with_weights)
from vaemix.rng import (STREAM_COMPONENT_BASE, STREAM_EVAL, STREAM_INIT,
                        STREAM_LABEL_BASE, STREAM_MOE_RESP,
                        STREAM_MOE_SHUFFLE_BASE, STREAM_PRETRAIN_EPS,
                        CounterRng)
from vaemix.tensor import Tensor
from vaemix.vae import (LatentGaussian, VaeConfig, VaeModel, kl_diag_gaussian,
                        pretrain)

# shared experiment setup: 4 planted prototypes in 64 dimensions, 5% flips
DATA_SEED = 777
SEEDS = (0, 1, 2)
N_CLASSES = 4
VC = VaeConfig(input_dim=64, hidden_dim=16, latent_dim=2,
               decoder_kind="bernoulli", architecture="asymmetric",
               mc_samples=2, learning_rate=0.01)
SWEEP_VC = replace(VC, learning_rate=0.05)
MIX = MixtureConfig(alpha=0.2, c_max=6, max_sweeps=250,
                    convergence_tol=1e-4, update_rule="adam")
PRETRAIN_ITERS = 1500
PRETRAIN_BATCH = 250
GATING = 16          # responsibility draws when gating classifier or probe
MOE_EPOCHS = 150
MOE_LR = 0.003


def mean(values):
    return sum(values) / len(values)


@pytest.fixture(scope="module")
def synth():
    protos = random_prototypes(N_CLASSES, VC.input_dim,
                               CounterRng(DATA_SEED, 100))
    train = synth_patterns(protos, [500] * N_CLASSES, 0.05,
                           CounterRng(DATA_SEED, 101))
    test = synth_patterns(protos, [100] * N_CLASSES, 0.05,
                          CounterRng(DATA_SEED, 102))
    return train, test


@pytest.fixture(scope="module")
def bases(synth):
    """One pretrained base VAE per seed, shared by every fit below."""
    train, _ = synth
    t0 = time.monotonic()
    models = {}
    for seed in SEEDS:
        model = VaeModel(VC, init_rng=CounterRng(seed, STREAM_INIT),
                         eps_rng=CounterRng(seed, STREAM_PRETRAIN_EPS),
                         tag="base")
        pretrain(model, train.instances, PRETRAIN_ITERS, PRETRAIN_BATCH,
                 seed, convergence_tol=MIX.convergence_tol)
        models[seed] = model
    return models, time.monotonic() - t0


@pytest.fixture(scope="module")
def unseeded_states(synth, bases):
    train, _ = synth
    models, _ = bases
    t0 = time.monotonic()
    states = {seed: fit(train.instances, SWEEP_VC, MIX, seed,
                        base_model=models[seed])
              for seed in SEEDS}
    return states, time.monotonic() - t0


@pytest.fixture(scope="module")
def seeded_states(synth, bases):
    """Mixtures whose initial components were anchored by 5 labels/class."""
    train, _ = synth
    models, _ = bases
    t0 = time.monotonic()
    states = {}
    for seed in SEEDS:
        idx = draw_balanced_labels(train.labels, N_CLASSES, 20,
                                   CounterRng(seed, SEED_LABEL_STREAM))
        labeled = [(i, train.labels[i]) for i in idx]
        states[seed] = fit(train.instances, SWEEP_VC, MIX, seed,
                           labeled=labeled, n_classes=N_CLASSES,
                           base_model=models[seed])
    return states, time.monotonic() - t0


def test_01_elbo_gradients_match_finite_differences():
    t0 = time.monotonic()
    model = VaeModel(VaeConfig(input_dim=3, hidden_dim=4, latent_dim=1,
                               mc_samples=2),
                     init_rng=CounterRng(21, 0), eps_rng=CounterRng(21, 1),
                     tag="fd")
    n = 4
    x = Tensor((n, 3))
    r = CounterRng(8, 0)
    for i in range(x.size):
        x.data[i] = 1.0 if r.uniform() < 0.5 else 0.0
    eps_list = [tensor_randn((n, 1), CounterRng(9, s)) for s in (0, 1)]

    from vaemix.autodiff import Tape

    def loss_value():
        tape = Tape()
        loss, _, _ = model._elbo(tape, model._param_vars(), x, eps_list,
                                 training=False)
        return loss.value.item()

    tape = Tape()
    pv = model._param_vars()
    loss, _, _ = model._elbo(tape, pv, x, eps_list, training=False)
    tape.backward(loss)
    grads = {name: pv[name].grad_tensor() for name, _ in model.parameters()}

    h = 1e-5
    worst = 0.0
    n_params = 0
    for name, t in model.parameters():
        for i in range(t.size):
            n_params += 1
            keep = t.data[i]
            t.data[i] = keep + h
            fp = loss_value()
            t.data[i] = keep - h
            fm = loss_value()
            t.data[i] = keep
            fd = (fp - fm) / (2 * h)
            a = grads[name].data[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-3))
    elapsed = time.monotonic() - t0
    ok = n_params <= 200 and worst < 1e-4 and elapsed < 30
    record_acceptance(
        1, "ELBO gradients match central finite differences", ok,
        f"{n_params} params, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_02_closed_form_kl_matches_monte_carlo():
    t0 = time.monotonic()
    rng = CounterRng(31, 0)
    m = 100_000
    buf = array("d", bytes(8 * m))
    worst_z = 0.0
    for k in range(20):
        mu = rng.uniform() * 4.0 - 2.0
        sigma = math.exp(rng.uniform() * 2.0 - 1.0)
        lat = LatentGaussian(tensor_from_rows([[mu]]),
                             tensor_from_rows([[sigma]]))
        closed = kl_diag_gaussian(lat).data[0]
        CounterRng(31, k + 1).fill_normal(buf, m)
        eps = np.frombuffer(buf, dtype=np.float64)
        z = mu + sigma * eps
        # log q(z) - log p(z) with z = mu + sigma*eps; the 2*pi terms cancel
        vals = -math.log(sigma) + (z * z - eps * eps) / 2.0
        est = float(vals.mean())
        se = float(vals.std(ddof=1)) / math.sqrt(m)
        worst_z = max(worst_z, abs(est - closed) / se)
    elapsed = time.monotonic() - t0
    ok = worst_z <= 3.0 and elapsed < 30
    record_acceptance(
        2, "closed-form KL matches a Monte Carlo estimate", ok,
        f"20 pairs x {m} draws, worst gap {worst_z:.2f} SE, {elapsed:.1f}s")


def test_03_assignment_probabilities_form_a_distribution():
    t0 = time.monotonic()
    rng = CounterRng(41, 0)
    worst = 0.0
    for _ in range(200):
        n = 2 + rng.randint(99)
        alpha = 10.0 * (1.0 - rng.uniform())
        C = 1 + rng.randint(8)
        raw = [rng.uniform() + 1e-9 for _ in range(C)]
        s = sum(raw)
        dist = assignment_distribution(n, alpha, [v / s for v in raw])
        worst = max(worst, abs(sum(dist.existing) + dist.new - 1.0))
    lone = assignment_distribution(1, 3.7, [0.25, 0.75])
    lone_ok = lone.new == 1.0 and all(p == 0.0 for p in lone.existing)
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-12 and lone_ok and elapsed < 1
    record_acceptance(
        3, "assignment probabilities form a distribution", ok,
        f"200 cases, worst sum gap {worst:.1e}, lone instance spawns, "
        f"{elapsed:.2f}s")


def test_04_assignment_sampler_matches_its_probabilities():
    t0 = time.monotonic()
    dist = assignment_distribution(6, 1.7, [0.4, 0.35, 0.25])
    probs = list(dist.existing) + [dist.new]
    m = 100_000
    counts = [0] * len(probs)
    rng = CounterRng(43, 0)
    for _ in range(m):
        slot = sample_assignment(dist, rng)
        counts[slot if isinstance(slot, int) else len(probs) - 1] += 1
    worst = 0.0
    ok = True
    for c, p in zip(counts, probs):
        sd = math.sqrt(m * p * (1.0 - p))
        pull = abs(c - m * p) / sd
        worst = max(worst, pull)
        ok = ok and pull <= 4.0
    elapsed = time.monotonic() - t0
    ok = ok and elapsed < 10
    record_acceptance(
        4, "assignment sampler matches its probabilities", ok,
        f"{m} draws over 4 slots, worst pull {worst:.2f} sd, {elapsed:.1f}s")


def test_05_mixture_reconstructs_better_than_one_vae(synth, bases,
                                                     unseeded_states):
    _, test = synth
    models, pretrain_s = bases
    states, fit_s = unseeded_states
    t0 = time.monotonic()
    wins = 0
    parts = []
    for seed in SEEDS:
        state = states[seed]
        errs_mix = reconstruction_errors(state, test.instances,
                                         CounterRng(seed, STREAM_EVAL), 20)
        base = models[seed]
        single = MixtureState(
            base,
            [base.clone(CounterRng(seed, STREAM_COMPONENT_BASE),
                        tag="c0", config=VC)],
            len(state.assignments), MIX.alpha, MIX.c_max, seed)
        errs_one = reconstruction_errors(single, test.instances,
                                         CounterRng(seed, STREAM_EVAL), 20)
        better = state.n_components >= 2 and mean(errs_mix) < mean(errs_one)
        wins += better
        parts.append(f"seed{seed} C={state.n_components} "
                     f"{mean(errs_mix):.4f}/{mean(errs_one):.4f}")
    elapsed = time.monotonic() - t0 + pretrain_s + fit_s
    ok = wins >= 2 and elapsed < 600
    record_acceptance(
        5, "mixture reconstructs held-out data better than one VAE", ok,
        f"{'; '.join(parts)}; wins {wins}/3, {elapsed:.0f}s incl. fits")


def test_06_gated_classifier_matches_supervised_baseline(synth, seeded_states):
    train, test = synth
    states, fit_s = seeded_states
    t0 = time.monotonic()
    moe_cfg = MoeConfig(n_classes=N_CLASSES, learning_rate=MOE_LR,
                        epochs=MOE_EPOCHS)

    def run_arm(seed, state, budget, trials):
        moes, singles = [], []
        for t in range(trials):
            idx = draw_balanced_labels(train.labels, N_CLASSES, budget,
                                       CounterRng(seed, STREAM_LABEL_BASE + t))
            x_lab = gather_rows(train.instances, idx)
            y_lab = array("q", (train.labels[i] for i in idx))
            moe = MoeModel(moe_cfg, state.base_model,
                           n_experts=state.n_components)
            resp = responsibility(state.components, x_lab,
                                  CounterRng(seed, STREAM_MOE_RESP + 100 * t),
                                  mc_samples=GATING)
            train_with_weights(moe, x_lab, y_lab, resp, seed,
                               shuffle_stream_base=STREAM_MOE_SHUFFLE_BASE
                               + 100_000 * t)
            err, _, _ = evaluate(moe, state.components, test.instances,
                                 test.labels,
                                 CounterRng(seed, STREAM_EVAL + 100 * t),
                                 gating_samples=GATING)
            single, _ = train_baseline(moe_cfg, state.base_model, x_lab,
                                       y_lab, seed,
                                       shuffle_stream_base=
                                       STREAM_MOE_SHUFFLE_BASE + 100_000 * t)
            serr, _, _ = evaluate(single, [state.base_model], test.instances,
                                  test.labels,
                                  CounterRng(seed, STREAM_EVAL + 100 * t))
            moes.append(err)
            singles.append(serr)
        return mean(moes), mean(singles)

    wins_few = 0
    wins_all = 0
    parts = []
    for seed in SEEDS:
        state = states[seed]
        few_moe, few_single = run_arm(seed, state, 20, 3)   # 5 labels/class
        all_moe, all_single = run_arm(seed, state, 2000, 1)  # every label
        wins_few += few_moe <= few_single
        wins_all += abs(all_moe - all_single) <= 0.005
        parts.append(f"seed{seed} few {few_moe:.4f}/{few_single:.4f} "
                     f"full gap {abs(all_moe - all_single):.4f}")
    elapsed = time.monotonic() - t0 + fit_s
    ok = wins_few >= 2 and wins_all >= 2 and elapsed < 600
    record_acceptance(
        6, "gated classifier matches the supervised baseline", ok,
        f"{'; '.join(parts)}; few {wins_few}/3, full {wins_all}/3, "
        f"{elapsed:.0f}s incl. fits")


def test_07_signed_updates_move_batch_loss_the_right_way():
    t0 = time.monotonic()
    protos = random_prototypes(2, 16, CounterRng(5, 0))
    data = synth_patterns(protos, [40, 40], 0.1, CounterRng(5, 1))
    vc = VaeConfig(input_dim=16, hidden_dim=8, latent_dim=2,
                   mc_samples=2, learning_rate=0.01)
    raises = 0
    lowers = 0
    for rep in range(10):
        model = VaeModel(vc, init_rng=CounterRng(rep, 0),
                         eps_rng=CounterRng(rep, 1), tag="m")
        pretrain(model, data.instances, 100, 40, rep)
        idx = CounterRng(rep, 2).permutation(80)[:20]
        xb = gather_rows(data.instances, idx)
        eps_rng = CounterRng(rep, 3)
        eps = [tensor_randn((20, 2), eps_rng) for _ in range(2)]
        unlearn = model.clone(CounterRng(rep, 4), tag="u")
        learn = model.clone(CounterRng(rep, 5), tag="l")
        before = unlearn.elbo_eval(xb, eps)[0]
        unlearn.train_step(xb, sign=-1, eps_list=eps, optimizer="adam")
        raises += unlearn.elbo_eval(xb, eps)[0] >= before
        learn.train_step(xb, sign=1, eps_list=eps, optimizer="adam")
        lowers += learn.elbo_eval(xb, eps)[0] <= before
    elapsed = time.monotonic() - t0
    ok = raises >= 8 and lowers >= 8 and elapsed < 60
    record_acceptance(
        7, "signed updates move the batch loss the right way", ok,
        f"unlearn raises {raises}/10, learn lowers {lowers}/10, "
        f"{elapsed:.0f}s")


TINY = """
seed = 0
alpha = 0.5
hidden_dim = 4
latent_dim = 1
mc_samples = 1
learning_rate = 0.01
batch_size = 20
max_iterations = 30
max_sweeps = 2
c_max = 3
update_rule = adam
convergence_tol = 1e-8
recon_samples = 2
dataset = synth
data_seed = 7
synth_classes = 2
synth_dim = 6
synth_count = 40
synth_test_count = 12
synth_flip = 0.1
"""


def test_08_reruns_and_checkpoints_are_bit_exact(tmp_path):
    t0 = time.monotonic()
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY)

    def run(out):
        os.makedirs(out)
        assert cli_main(["pretrain", "--config", str(cfg_path),
                         "--out-dir", out]) == 0
        assert cli_main(["fit-mixture", "--config", str(cfg_path),
                         "--out-dir", out]) == 0

    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    run(a)
    run(b)
    identical = []
    for name in ("metrics_pretrain.csv", "metrics_fit.csv", "sweeps.csv",
                 "base.ckpt", "mixture.ckpt"):
        with open(os.path.join(a, name), "rb") as fa, \
                open(os.path.join(b, name), "rb") as fb:
            identical.append(fa.read() == fb.read())

    # serialize -> deserialize must leave a probe reconstruction untouched
    meta, tensors = load_checkpoint(os.path.join(a, "mixture.ckpt"))
    state = mixture_from_named_tensors(meta, tensors)
    m2, t2 = mixture_named_tensors(state)
    probe_path = str(tmp_path / "probe.ckpt")
    save_checkpoint(probe_path, m2, t2)
    state2 = mixture_from_named_tensors(*load_checkpoint(probe_path))
    probe = Tensor((8, 6))
    r = CounterRng(7, 9)
    for i in range(probe.size):
        probe.data[i] = 1.0 if r.uniform() < 0.5 else 0.0
    r1 = expected_reconstruction(state, probe, CounterRng(0, STREAM_EVAL), 2)
    r2 = expected_reconstruction(state2, probe, CounterRng(0, STREAM_EVAL), 2)
    roundtrip = r1.data.tobytes() == r2.data.tobytes()
    elapsed = time.monotonic() - t0
    ok = all(identical) and roundtrip and elapsed < 60
    record_acceptance(
        8, "reruns and checkpoints are bit-exact", ok,
        f"5 artifacts byte-identical: {all(identical)}, "
        f"probe roundtrip exact: {roundtrip}, {elapsed:.0f}s")


def test_09_mixture_latents_probe_at_least_as_well(synth, unseeded_states):
    train, test = synth
    states, _ = unseeded_states
    t0 = time.monotonic()
    wins = 0
    parts = []
    for seed in SEEDS:
        state = states[seed]
        mix_acc, one_acc = [], []
        for t in range(3):
            idx = draw_balanced_labels(train.labels, N_CLASSES, 100,
                                       CounterRng(seed, STREAM_LABEL_BASE + t))
            x_lab = gather_rows(train.instances, idx)
            y_lab = array("q", (train.labels[i] for i in idx))
            ftr = latent_features(state.components, x_lab,
                                  CounterRng(seed, STREAM_MOE_RESP + 100 * t),
                                  gating_samples=GATING)
            fte = latent_features(state.components, test.instances,
                                  CounterRng(seed, STREAM_EVAL + 100 * t),
                                  gating_samples=GATING)
            mix_acc.append(linear_probe(ftr, y_lab, fte, test.labels,
                                        N_CLASSES, seed))
            str_ = latent_features([state.base_model], x_lab,
                                   CounterRng(seed, 1))
            ste = latent_features([state.base_model], test.instances,
                                  CounterRng(seed, 1))
            one_acc.append(linear_probe(str_, y_lab, ste, test.labels,
                                        N_CLASSES, seed))
        win = mean(mix_acc) >= mean(one_acc)
        wins += win
        parts.append(f"seed{seed} {mean(mix_acc):.4f}/{mean(one_acc):.4f}")
    elapsed = time.monotonic() - t0
    ok = wins >= 2 and elapsed < 300
    record_acceptance(
        9, "mixture latents probe at least as well as single-VAE latents", ok,
        f"{'; '.join(parts)}; wins {wins}/3, {elapsed:.0f}s "
        "(reuses the fitted mixtures)")


def test_10_idx_loader_handles_mnist_format(tmp_path):
    t0 = time.monotonic()
    candidates = [os.environ.get("MNIST_DIR", "")]
    candidates += ["/root/pkg/data/mnist", "/root/data/mnist", "/root/mnist"]
    found = None
    for root in candidates:
        if root and os.path.exists(os.path.join(root,
                                                "train-images-idx3-ubyte")):
            found = root
            break
    if found:
        tr = load_idx(os.path.join(found, "train-images-idx3-ubyte"),
                      os.path.join(found, "train-labels-idx1-ubyte"))
        te = load_idx(os.path.join(found, "t10k-images-idx3-ubyte"),
                      os.path.join(found, "t10k-labels-idx1-ubyte"))
        shapes_ok = (tr.instances.shape == (60000, 784)
                     and te.instances.shape == (10000, 784))
        labels_ok = (min(tr.labels) >= 0 and max(tr.labels) <= 9
                     and min(te.labels) >= 0 and max(te.labels) <= 9)
        detail = "real MNIST files"
    else:
        # same wire format at fixture scale: 28x28 images, labels 0..9
        rng = CounterRng(97, 0)
        n = 10
        rows = [[rng.randint(256) for _ in range(784)] for _ in range(n)]
        labels = list(range(10))
        img = str(tmp_path / "imgs")
        lab = str(tmp_path / "labels")
        write_idx_images(img, rows, 28, 28)
        write_idx_labels(lab, labels)
        ds = load_idx(img, lab)
        shapes_ok = ds.instances.shape == (n, 784)
        pix_ok = all(0.0 <= v <= 1.0 for v in ds.instances.data)
        exact = all(abs(ds.instances.data[i * 784 + j] - rows[i][j] / 255.0)
                    == 0.0 for i in range(n) for j in range(784))
        labels_ok = list(ds.labels) == labels and pix_ok and exact
        detail = "MNIST files absent; fixture IDX files stand in"
    elapsed = time.monotonic() - t0
    ok = shapes_ok and labels_ok and elapsed < 30
    record_acceptance(
        10, "IDX loader handles MNIST-format files", ok,
        f"{detail}, {elapsed:.1f}s")
