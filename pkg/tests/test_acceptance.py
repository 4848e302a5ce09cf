"""End-to-end acceptance checks, one test per criterion.

Each test records what it measured with ``record_property("measured", ...)``;
conftest prints one PASS/FAIL line per criterion at the end of the session.
The two full training runs are shared session fixtures, so running this file
alone takes roughly twenty minutes on one CPU core.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest
from scipy.stats import chi2, kendalltau, spearmanr

from hpmlab import objectives as obj
from hpmlab import tensor as T
from hpmlab.checkpoint import to_bytes
from hpmlab.config import TrainConfig
from hpmlab.data import SyntheticCorpusSpec, generate_synthetic_corpus, num_classes, patchify
from hpmlab.ema import ema_update, init_teacher
from hpmlab.masking import MaskSchedule, alpha_at, generate_batch_masks, generate_mask
from hpmlab.model import HpmModel, MaskIndex, student_forward, teacher_forward
from hpmlab.probe import encoder_features, knn_predict, loss_correlation, measured_patch_losses, textured_gap
from hpmlab.tensor import Tensor
from hpmlab.trainer import Trainer

from conftest import fd_grad, rel_err
from test_model import check_combined_gradient
from test_objectives import relative_oracle

TRAIN, HELDOUT = 1000, 100
CORPUS_SEED = 2024
N_MASKS = 10
PROBE_SEED = 99


# ---------------------------------------------------------------------------
# shared default and hardest-only runs


@dataclass
class Run:
    trainer: Trainer
    random_init: HpmModel
    epoch_means: list
    seconds: float


@pytest.fixture(scope="session")
def corpus():
    # train and held-out images come from one generation call so they share the texture bank
    full = generate_synthetic_corpus(SyntheticCorpusSpec(count=TRAIN + HELDOUT, seed=CORPUS_SEED))
    train = full.subset(np.arange(TRAIN))
    held = full.subset(np.arange(TRAIN, TRAIN + HELDOUT))
    return train, held, patchify(held.images, 4).values.astype(np.float32)


def _train(config, images):
    start = time.perf_counter()
    trainer = Trainer(config, images)
    random_init = trainer.student.clone()
    means = trainer.fit()
    return Run(trainer, random_init, means, time.perf_counter() - start)


@pytest.fixture(scope="session")
def default_run(corpus):
    return _train(TrainConfig(), corpus[0].images)


@pytest.fixture(scope="session")
def hardest_run(corpus):
    return _train(TrainConfig(alpha_0=1.0, alpha_T=1.0), corpus[0].images)


def heldout_rec_loss(model, patches):
    """Mean masked-patch L_rec over a fixed set of random masks."""
    rng = np.random.Generator(np.random.PCG64(PROBE_SEED))
    mean, _ = measured_patch_losses(model, patches, N_MASKS, 0.75, rng)
    return float(np.nanmean(mean))


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def _op_cases(rng):
    x = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    g = rng.uniform(0.5, 1.5, 4)
    idx = np.array([[2, 0, 1], [1, 1, 2], [0, 2, 2]])
    return {
        "add": (lambda a, c: a + c, [x, rng.standard_normal(4)]),
        "sub": (lambda a, c: a - c, [x, rng.standard_normal((3, 4))]),
        "rsub": (lambda a: 2.0 - a, [x]),
        "mul": (lambda a, c: a * c, [x, rng.standard_normal((3, 4))]),
        "div": (lambda a: a / 3.0, [x]),
        "neg": (lambda a: -a, [x]),
        "pow2": (lambda a: a ** 2, [x]),
        "square": (T.square, [x]),
        "exp": (T.exp, [x]),
        "log": (T.log, [pos]),
        "sum": (lambda a: T.sum_(a, axis=1), [x]),
        "mean": (lambda a: T.mean(a, axis=0, keepdims=True), [x]),
        "reshape": (lambda a: a.reshape(2, 6), [x]),
        "transpose": (lambda a: a.transpose(1, 0), [x]),
        "broadcast_to": (lambda a: T.broadcast_to(a, (2, 3, 4)), [x]),
        "concat": (lambda a, c: T.concat([a, c], axis=0), [x, rng.standard_normal((2, 4))]),
        "gather": (lambda a: T.gather(a.reshape(3, 4, 1), idx), [x]),
        "pairwise_diff": (T.pairwise_diff, [x]),
        "matmul": (T.matmul, [x, w]),
        "linear": (T.linear, [x, w, b]),
        "gelu": (T.gelu, [x]),
        "sigmoid": (T.sigmoid, [x]),
        "softplus": (T.softplus, [3 * x]),
        "log_sigmoid": (T.log_sigmoid, [3 * x]),
        "softmax": (lambda a: T.softmax(a, axis=-1), [x]),
        "layer_norm": (lambda a, gg, bb: T.layer_norm(a, gg, bb, eps=1e-5), [x, g, rng.standard_normal(4)]),
        "l2_normalize": (lambda a: T.l2_normalize(a, axis=-1), [x]),
    }


def _op_error(fn, inputs, dtype, h, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    with T.default_dtype(dtype):
        leaves = [Tensor(v, requires_grad=True) for v in inputs]
        out = fn(*leaves)
        weights = rng.standard_normal(out.shape)
        T.sum_(out * weights).backward()
    with T.default_dtype(np.float64):
        exact = [v.astype(dtype).astype(np.float64) for v in inputs]

        def f():
            return float((fn(*[Tensor(v) for v in exact]).data * weights).sum())

        expected = fd_grad(f, exact, h)
    return max(rel_err(t.grad, e) for t, e in zip(leaves, expected))


def test_criterion_01_gradient_fidelity(record_property):
    start = time.perf_counter()
    worst = {}
    for dtype, h in ((np.float32, 1e-3), (np.float64, 1e-5)):
        cases = _op_cases(np.random.Generator(np.random.PCG64(11)))
        errs = {name: _op_error(fn, inputs, dtype, h, seed) for seed, (name, (fn, inputs)) in enumerate(cases.items())}
        errs["combined_loss"] = check_combined_gradient(dtype)
        worst[np.dtype(dtype).name] = max(errs.items(), key=lambda kv: kv[1])
    seconds = time.perf_counter() - start
    record_property("measured", f"ops={len(cases)}+combined; worst f32 {worst['float32'][0]}={worst['float32'][1]:.2e}; "
                                f"worst f64 {worst['float64'][0]}={worst['float64'][1]:.2e}; {seconds:.1f}s")
    assert worst["float32"][1] < 1e-3
    assert worst["float64"][1] < 1e-6
    assert seconds < 60


# ---------------------------------------------------------------------------
# 2. pair-loss oracle


def test_criterion_02_pair_loss_oracle(record_property):
    rng = np.random.Generator(np.random.PCG64(2))
    worst = 0.0
    with T.default_dtype(np.float64):
        for n in range(2, 9):
            for _ in range(20):
                pred = rng.standard_normal((3, n))
                losses = rng.random((3, n))
                if n > 2:
                    losses[0, 0] = losses[0, 1]  # a tie that must drop out of the pair count
                ids = np.tile(np.arange(n), (3, 1))
                got = obj.pred_loss_relative(Tensor(pred), losses, ids).item()
                worst = max(worst, abs(got - relative_oracle(pred, losses)))
    record_property("measured", f"max |diff| = {worst:.2e} over sizes 2-8")
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# 3. order-only dependence


def test_criterion_03_order_only_dependence(record_property):
    rng = np.random.Generator(np.random.PCG64(3))
    pred = rng.standard_normal((4, 48))
    losses = rng.random((4, 48))
    ids = np.tile(np.arange(48), (4, 1))
    ref = obj.pred_loss_relative(Tensor(pred), losses, ids).data.tobytes()
    values = set()
    for c in (0.01, 1.0, 100.0):
        for b in (-5.0, 0.0, 5.0):
            out = obj.pred_loss_relative(Tensor(pred), c * losses + b, ids)
            values.add(out.data.tobytes())
    record_property("measured", f"{len(values)} distinct value(s) over 9 affine maps")
    assert values == {ref}


# ---------------------------------------------------------------------------
# 4. mask counts, endpoints and uniformity


def test_criterion_04_mask_counts_and_uniformity(record_property):
    rng = np.random.Generator(np.random.PCG64(4))
    checked = 0
    for gamma in (0.5, 0.75, 0.9):
        for n in (16, 49, 64, 196):
            pred = rng.standard_normal(n)
            for alpha in np.round(np.arange(0.0, 1.01, 0.1), 1):
                m = generate_mask(pred, MaskSchedule(gamma, alpha, alpha, 10), 0, rng)
                assert (~m.visible).sum() == math.floor(gamma * n)
                assert m.n_pred == math.floor(alpha * gamma * n)
                checked += 1
    for a0, aT, epochs in ((0.0, 0.5, 100), (0.3, 0.9, 7), (1.0, 0.0, 13)):
        s = MaskSchedule(0.75, a0, aT, epochs)
        assert alpha_at(s, 0) == a0 and alpha_at(s, epochs) == aT
    n, seeds = 16, 10_000
    counts = np.zeros(n)
    uniform = MaskSchedule(0.75, 0.0, 0.0, 10)
    for seed in range(seeds):
        counts += ~generate_mask(np.zeros(n), uniform, 0, seed).visible
    p = 12 / 16
    # each mask has a fixed total, which costs the statistic one degree of freedom
    stat = (n - 1) / n * np.sum((counts - seeds * p) ** 2) / (seeds * p * (1 - p))
    pval = chi2.sf(stat, n - 1)
    record_property("measured", f"{checked} count cases exact; chi2={stat:.2f} p={pval:.3f}")
    assert pval > 0.001


# ---------------------------------------------------------------------------
# 5. EMA geometry


def test_criterion_05_ema_geometry(record_property):
    from test_ema import flat, model

    worst = 0.0
    with T.default_dtype(np.float64):
        for m in (0.0, 0.9, 0.996, 1.0):
            student = model(0)
            state = init_teacher(model(1), momentum=m)
            gap0 = np.linalg.norm(flat(state.teacher) - flat(student))
            for k in range(1, 31):
                ema_update(state, student)
                gap = np.linalg.norm(flat(state.teacher) - flat(student))
                expected = m ** k * gap0
                if expected == 0.0:
                    assert gap == 0.0
                else:
                    worst = max(worst, abs(gap - expected) / expected)
    record_property("measured", f"max relative deviation {worst:.2e}")
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# 6. ranking recovery


def test_criterion_06_ranking_recovery(record_property):
    rng = np.random.Generator(np.random.PCG64(6))
    losses = rng.random((1, 16))
    ids = np.arange(16)[None]
    p = Tensor(rng.standard_normal((1, 16)), requires_grad=True)
    first = None
    for step in range(1, 2001):
        p.zero_grad()
        obj.pred_loss_relative(p, losses, ids).backward()
        p.data -= np.float32(1.0) * p.grad
        if kendalltau(p.data[0], losses[0]).statistic == 1.0:
            first = step
            break
    record_property("measured", f"tau = 1 after {first} steps" if first else "tau < 1 after 2000 steps")
    assert first is not None


# ---------------------------------------------------------------------------
# 7. end-to-end hard-patch discovery


def brute_force_rho(student, teacher, patches, n_masks, seed):
    """Per image, per mask, per patch loops over the same masks loss_correlation draws."""
    rng = np.random.Generator(np.random.PCG64(seed))
    B, N = patches.shape[:2]
    schedule = MaskSchedule(gamma=0.75, alpha_0=0.0, alpha_T=0.0)
    masks = [generate_batch_masks(np.zeros((B, N)), schedule, 0, rng, alpha=0.0) for _ in range(n_masks)]
    target = obj.pixel_target(patches).values
    predicted = teacher_forward(teacher, patches).pred_loss.data
    rhos = []
    with T.no_grad():
        for b in range(B):
            total, hits = np.zeros(N), np.zeros(N)
            for vis in masks:
                rec = student_forward(student, patches[b:b + 1], vis[b:b + 1]).reconstruction.data[0]
                for i in range(N):
                    if not vis[b, i]:
                        total[i] += np.mean((rec[i].astype(np.float64) - target[b, i]) ** 2)
                        hits[i] += 1
            keep = hits > 0
            rhos.append(spearmanr(predicted[b, keep], total[keep] / hits[keep]).statistic)
    return float(np.mean(rhos))


def test_criterion_07_hard_patch_discovery(default_run, corpus, record_property):
    _, held, patches = corpus
    run = default_run
    start = time.perf_counter()
    student, teacher = run.trainer.student, run.trainer.ema.teacher
    rho, tau, excluded = loss_correlation(student, teacher, patches, N_MASKS, 0.75, PROBE_SEED)
    predicted = teacher_forward(teacher, patches).pred_loss.data
    gaps = textured_gap(predicted, held.textured)
    positive = float(np.mean(gaps > 0))
    seconds = run.seconds + time.perf_counter() - start
    oracle = brute_force_rho(student, teacher, patches[:20], N_MASKS, PROBE_SEED)
    fast = loss_correlation(student, teacher, patches[:20], N_MASKS, 0.75, PROBE_SEED)[0]
    record_property("measured", f"rho={rho:.3f} tau={tau:.3f} excluded={excluded}; textured>flat in "
                                f"{positive:.0%}; oracle check {fast:.6f} vs {oracle:.6f}; {seconds / 60:.1f} min")
    assert abs(fast - oracle) < 1e-6
    assert rho >= 0.5
    assert positive >= 0.95
    assert seconds <= 15 * 60


# ---------------------------------------------------------------------------
# 8. training sanity


def test_criterion_08_training_sanity(default_run, record_property):
    means = default_run.epoch_means
    history = default_run.trainer.history
    finite = all(np.isfinite([m.rec_loss, m.pred_loss, m.total_loss]).all() for m in history)
    ratio = means[49] / means[0]
    record_property("measured", f"L_rec epoch 1 {means[0]:.4f} -> epoch 50 {means[49]:.4f} "
                                f"(ratio {ratio:.3f}); all finite: {finite}")
    assert finite
    assert ratio <= 0.5


# ---------------------------------------------------------------------------
# 9. ablation ordering


def test_criterion_09_hardest_masking_hurts_reconstruction(default_run, hardest_run, corpus, record_property):
    patches = corpus[2]
    easy = heldout_rec_loss(default_run.trainer.student, patches)
    hard = heldout_rec_loss(hardest_run.trainer.student, patches)
    record_property("measured", f"held-out L_rec default {easy:.4f} vs alpha=1 {hard:.4f}")
    assert hard > easy


# ---------------------------------------------------------------------------
# 10. determinism and persistence


def test_criterion_10_determinism_and_resume(corpus, tmp_path, record_property):
    images = corpus[0].images[:96]
    config = TrainConfig(epochs=4, warmup_epochs=1, batch_size=32, checkpoint_every=2, seed=5)
    a = Trainer(config, images, out_dir=tmp_path / "a")
    a.fit()
    b = Trainer(config, images, out_dir=tmp_path / "b")
    b.fit()
    same_files = all((tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
                     for name in ("checkpoint_0002.hpmk", "checkpoint_0004.hpmk", "metrics.csv"))
    resumed = Trainer.resume(tmp_path / "a" / "checkpoint_0002.hpmk", images)
    resumed.fit()
    same_resume = to_bytes(resumed.checkpoint()) == to_bytes(a.checkpoint())
    record_property("measured", f"same-seed files identical: {same_files}; resume bit-exact: {same_resume}")
    assert same_files
    assert same_resume


# ---------------------------------------------------------------------------
# 11. probe improvement


def test_criterion_11_knn_probe_improvement(default_run, corpus, record_property):
    train, held, patches = corpus
    train_patches = default_run.trainer.patches
    trained_tr = encoder_features(default_run.trainer.student, train_patches)
    trained_te = encoder_features(default_run.trainer.student, patches)
    random_tr = encoder_features(default_run.random_init, train_patches)
    random_te = encoder_features(default_run.random_init, patches)
    trained = float(np.mean(knn_predict(trained_tr, train.labels, trained_te, 10) == held.labels))
    random = float(np.mean(knn_predict(random_tr, train.labels, random_te, 10) == held.labels))
    # shuffled-label oracle: the same features with permuted training labels must sit at chance
    chance = 1.0 / num_classes()
    perm = np.random.Generator(np.random.PCG64(11)).permutation(len(train.labels))
    shuffled = float(np.mean(knn_predict(trained_tr, train.labels[perm], trained_te, 10) == held.labels))
    band = 3.0 * math.sqrt(chance * (1 - chance) / len(held.labels))
    record_property("measured", f"kNN@10 trained {trained:.2f} vs random-init {random:.2f} "
                                f"(gain {trained - random:+.2f}); shuffled labels {shuffled:.2f}, "
                                f"chance {chance:.2f} +/- {band:.2f}")
    assert abs(shuffled - chance) <= band
    assert trained - random >= 0.10
