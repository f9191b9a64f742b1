"""End-to-end acceptance suite.

Each test function covers one acceptance criterion and emits one pass/fail
line under `pytest -v`. The three training runs (cohorts of 50, 100 and 200
masks) are expensive, so trained models are cached on disk under
tests/_cache and reused across criteria; delete that directory to retrain.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from normshape import autodiff as ad
from normshape.augment import AugmentRanges, similarity_transform
from normshape.detect import asm_fit, asm_project, fit_normative, volume_baseline_score, zero_shot_score
from normshape.evaluate import (
    REPORT_HEADER,
    auc,
    bootstrap,
    crossval_fewshot,
    interpolate_groups,
    report_from_scores,
    stratified_kfold,
)
from normshape.optim import SgdSchedule
from normshape.synth import AbnormalityParams, ShapeGenParams, gen_cohort
from normshape.vae import (
    LatentPosterior,
    VaeConfig,
    VaeParams,
    bernoulli_nll,
    decode,
    encode_batch,
    kl_gaussian,
    loss_graph,
    plan_total_steps,
    reconstruct,
    train,
)
from normshape.volume import MaskVolume, ScalarField, dice, signed_distance

CACHE = Path(__file__).parent / "_cache"
CHANNELS = (4, 8, 16)
EPOCHS = 200
KL_WARMUP = 100


def model_config() -> VaeConfig:
    return VaeConfig(channels=CHANNELS, kl_warmup_steps=KL_WARMUP)


def healthy_cohort(n: int, base_seed: int):
    return gen_cohort(n, ShapeGenParams(seed=0), None, base_seed)


def trained(n: int):
    """Train (or load from cache) the standard model on n healthy masks."""
    CACHE.mkdir(exist_ok=True)
    ckpt = CACHE / f"model_{n}.nsckpt"
    meta_path = CACHE / f"model_{n}.json"
    cfg = model_config()
    if ckpt.exists() and meta_path.exists():
        return VaeParams.load(ckpt, cfg), json.loads(meta_path.read_text())
    cohort = healthy_cohort(n, 0)
    total = plan_total_steps(int(round(0.8 * n)), EPOCHS)
    sched = SgdSchedule(lr0=1e-4, total_steps=total, power=0.9, momentum=0.9)
    t0 = time.time()
    params, hist = train(cohort, cfg, sched, AugmentRanges(), epochs=EPOCHS)
    meta = {
        "elapsed_s": time.time() - t0,
        "best_val_dice": max(r["val_dice"] for r in hist.rows()),
    }
    params.save(ckpt)
    meta_path.write_text(json.dumps(meta))
    return params, meta


@pytest.fixture(scope="module")
def main_model():
    return trained(200)


@pytest.fixture(scope="module")
def test_sets():
    healthy = healthy_cohort(40, 1000)
    # strong localized shrinkage with volume compensation: clear shape
    # change, uninformative volume
    ab_volpres = gen_cohort(
        40,
        ShapeGenParams(seed=0),
        AbnormalityParams(shrink_factor=0.25, shrink_width=0.6),
        2000,
    )
    ab_shrink = gen_cohort(
        40, ShapeGenParams(seed=0), AbnormalityParams(volume_preserving=False), 3000
    )
    return healthy, ab_volpres, ab_shrink


@pytest.fixture(scope="module")
def latents(main_model, test_sets):
    params, _ = main_model
    healthy, ab_volpres, ab_shrink = test_sets
    return {
        "train": encode_batch(params, healthy_cohort(200, 0)),
        "healthy": encode_batch(params, healthy),
        "ab_volpres": encode_batch(params, ab_volpres),
        "ab_shrink": encode_batch(params, ab_shrink),
    }


def _test_labels():
    return np.array([0] * 40 + [1] * 40)


# ---------------------------------------------------------------------------
# criterion 1: parameter gradients vs central finite differences
# ---------------------------------------------------------------------------

def test_c01_gradients_match_finite_differences():
    t0 = time.time()
    cfg = VaeConfig(
        input_dims=(8, 8, 4), stages=2, channels=(2, 4), latent_dim=4, dtype="float64"
    )
    params = VaeParams(cfg, seed=0)
    rng = np.random.default_rng(0)
    # nudge all parameters off their init so no activation sits exactly on
    # the leaky-relu kink (finite differences would straddle it)
    for p in params.params.values():
        p.value = p.value + rng.normal(0.0, 0.05, p.value.shape)
    xi, yi, zi = np.mgrid[0:8, 0:8, 0:4]
    ball = ((xi - 4) ** 2 + (yi - 3) ** 2 + (2 * (zi - 2)) ** 2 <= 9).astype(np.float64)
    x = ball[None, None]
    eps = rng.standard_normal((1, cfg.latent_dim))
    klw = 0.5

    def total_loss():
        per_sample, _ = loss_graph(params, x, eps, klw)
        return float(per_sample.data.sum())

    params.zero_grads()
    per_sample, _ = loss_graph(params, x, eps, klw)
    ad.backward(ad.vsum(per_sample))
    analytic = {k: p.grad.copy() for k, p in params.params.items()}

    h = 1e-5
    worst = 0.0
    for name, p in params.params.items():
        flat = p.value.reshape(-1)
        g_an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = total_loss()
            flat[i] = orig - h
            down = total_loss()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            rel = abs(g_an[i] - fd) / max(abs(g_an[i]), abs(fd), 1e-4)
            worst = max(worst, rel)
    elapsed = time.time() - t0
    assert worst < 1e-3, f"max relative gradient error {worst:.2e}"
    assert elapsed < 120, f"gradient check took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# criterion 2: closed-form KL vs Monte Carlo
# ---------------------------------------------------------------------------

def test_c02_kl_closed_form_matches_monte_carlo():
    t0 = time.time()
    rng = np.random.default_rng(1)
    dim = 8
    for _ in range(50):
        mu = rng.uniform(0.5, 2.0, dim) * rng.choice([-1.0, 1.0], dim)
        lv = rng.uniform(-1.0, 1.0, dim)
        analytic = kl_gaussian(LatentPosterior(mu=mu, logvar=lv))
        eps = rng.standard_normal((1_000_000, dim))
        z = mu + np.exp(0.5 * lv) * eps
        # log q(z) - log p(z) for z ~ q, averaged
        mc = float(0.5 * (z * z - eps * eps - lv).sum(axis=1).mean())
        assert abs(mc - analytic) / analytic < 0.01, (analytic, mc)
    assert time.time() - t0 < 60


# ---------------------------------------------------------------------------
# criterion 3: held-out reconstruction quality after the 200-mask run
# ---------------------------------------------------------------------------

def test_c03_heldout_reconstruction_dice(main_model, test_sets):
    params, meta = main_model
    healthy, _, _ = test_sets
    dices = [dice(m, reconstruct(params, m)) for m in healthy]
    mean_dice = float(np.mean(dices))
    assert mean_dice >= 0.80, f"held-out mean dice {mean_dice:.3f}"
    assert meta["elapsed_s"] < 45 * 60, f"training took {meta['elapsed_s']:.0f}s"


# ---------------------------------------------------------------------------
# criterion 4: latent zero-shot detects shape change, volume baseline cannot
# ---------------------------------------------------------------------------

def test_c04_shape_vs_volume_separation(main_model, test_sets, latents):
    healthy, ab_volpres, _ = test_sets
    stats = fit_normative(latents["train"], masks=healthy_cohort(200, 0))
    y = _test_labels()
    zs = [zero_shot_score(z, stats) for z in latents["healthy"]] + [
        zero_shot_score(z, stats) for z in latents["ab_volpres"]
    ]
    vs = [volume_baseline_score(m, stats) for m in healthy] + [
        volume_baseline_score(m, stats) for m in ab_volpres
    ]
    auc_zero = auc(zs, y)
    auc_vol = auc(vs, y)
    assert auc_zero >= 0.75, f"zero-shot AUC {auc_zero:.3f}"
    assert 0.40 <= auc_vol <= 0.60, f"volume-baseline AUC {auc_vol:.3f}"


# ---------------------------------------------------------------------------
# criterion 5: few-shot linear SVM on latents beats zero-shot
# ---------------------------------------------------------------------------

def test_c05_fewshot_dominates_zero_shot(latents):
    y = _test_labels()
    stats = fit_normative(latents["train"])
    z_test = np.vstack([latents["healthy"], latents["ab_volpres"]])
    zero_scores = [zero_shot_score(z, stats) for z in z_test]
    auc_zero = auc(zero_scores, y)

    loo = crossval_fewshot(z_test, y, stratified_kfold(y, len(y), seed=0), seed=0)
    assert loo.auc_mean >= auc_zero, (loo.auc_mean, auc_zero)

    # train folds of ~10% of the set
    tenth = crossval_fewshot(z_test, y, stratified_kfold(y, 10, seed=0), seed=0)
    assert tenth.auc_mean >= auc_zero - 0.02, (tenth.auc_mean, auc_zero)


# ---------------------------------------------------------------------------
# criterion 6: zero-shot AUC trend over training-set size {50, 100, 200}
# ---------------------------------------------------------------------------

def test_c06_training_size_trend(test_sets):
    healthy, ab_volpres, _ = test_sets
    y = _test_labels()
    aucs = []
    for n in (50, 100, 200):
        params, _ = trained(n)
        stats = fit_normative(encode_batch(params, healthy_cohort(n, 0)))
        z_test = np.vstack(
            [encode_batch(params, healthy), encode_batch(params, ab_volpres)]
        )
        aucs.append(auc([zero_shot_score(z, stats) for z in z_test], y))
    for smaller, larger in zip(aucs, aucs[1:]):
        assert larger >= smaller - 0.02, f"AUC by cohort size: {aucs}"


# ---------------------------------------------------------------------------
# criterion 7: bootstrap consistency at 10000 reps
# ---------------------------------------------------------------------------

def test_c07_bootstrap_consistency():
    t0 = time.time()
    rng = np.random.default_rng(7)
    scores = np.concatenate([rng.normal(0, 1, 40), rng.normal(1.2, 1, 40)])
    y = _test_labels()
    direct = auc(scores, y)
    a = bootstrap(auc, scores, y, reps=10000, seed=0)
    b = bootstrap(auc, scores, y, reps=10000, seed=0)
    assert abs(a[0] - direct) < 0.005, (a[0], direct)
    assert a == b  # bitwise seed reproducibility
    assert time.time() - t0 < 30


# ---------------------------------------------------------------------------
# criterion 8: exact small-instance oracles
# ---------------------------------------------------------------------------

def _pair_count_auc(scores, labels):
    num = den = 0.0
    for i in range(len(scores)):
        for j in range(len(scores)):
            if labels[i] == 1 and labels[j] == 0:
                den += 1
                if scores[i] > scores[j]:
                    num += 1.0
                elif scores[i] == scores[j]:
                    num += 0.5
    return num / den


def _brute_force_sdf(mask: MaskVolume) -> np.ndarray:
    fg = np.argwhere(mask.data == 1).astype(np.float64)
    bg = np.argwhere(mask.data == 0).astype(np.float64)
    sp = np.array(mask.spacing_mm)
    out = np.empty(mask.dims)
    for idx in np.ndindex(mask.dims):
        p = np.array(idx, dtype=np.float64)
        other = bg if mask.data[idx] == 1 else fg
        d = np.sqrt((((other - p) * sp) ** 2).sum(axis=1).min())
        out[idx] = -d if mask.data[idx] == 1 else d
    return out


def test_c08_exact_oracles():
    rng = np.random.default_rng(8)
    # AUC vs brute-force pair counting, exactly
    done = 0
    while done < 200:
        y = rng.integers(0, 2, 20)
        if y.min() == y.max():
            continue
        s = np.round(rng.normal(size=20), 1)
        assert auc(s, y) == _pair_count_auc(s, y)
        done += 1

    # signed distance vs all-pairs oracle, exactly
    for _ in range(50):
        dims = tuple(int(rng.integers(3, 13)) for _ in range(3))
        data = (rng.random(dims) < 0.4).astype(np.uint8)
        if data.min() == data.max():
            continue
        m = MaskVolume(data=data, spacing_mm=(1.0, 1.0, 2.0))
        assert np.array_equal(signed_distance(m).data, _brute_force_sdf(m))

    # dice vs direct loop, exactly
    for _ in range(20):
        a = MaskVolume(data=(rng.random((6, 5, 4)) < 0.5).astype(np.uint8), spacing_mm=(1, 1, 1))
        b = MaskVolume(data=(rng.random((6, 5, 4)) < 0.5).astype(np.uint8), spacing_mm=(1, 1, 1))
        inter = sum(
            int(a.data[i] and b.data[i]) for i in np.ndindex(a.dims)
        )
        total = int(a.data.sum()) + int(b.data.sum())
        if total == 0:
            continue
        assert dice(a, b) == 2 * inter / total

    # bernoulli NLL vs direct loop (float reductions agree to 1e-12 relative)
    for _ in range(10):
        p = rng.uniform(0.05, 0.95, (4, 4, 2))
        t = (rng.random((4, 4, 2)) < 0.5).astype(np.uint8)
        got = bernoulli_nll(
            ScalarField(data=p, spacing_mm=(1, 1, 1)),
            MaskVolume(data=t, spacing_mm=(1, 1, 1)),
        )
        want = 0.0
        for idx in np.ndindex(p.shape):
            want -= float(t[idx]) * np.log(p[idx]) + (1.0 - t[idx]) * np.log(1.0 - p[idx])
        assert abs(got - want) <= 1e-12 * abs(want)


# ---------------------------------------------------------------------------
# criterion 9: latent invariance to small translations
# ---------------------------------------------------------------------------

def test_c09_translation_invariance(main_model, test_sets, latents):
    params, _ = main_model
    healthy, _, _ = test_sets
    shifted = [
        similarity_transform(m, translation_voxels=(2.0, 0.0, 0.0)) for m in healthy
    ]
    z_shift = encode_batch(params, shifted)
    shift_d = np.linalg.norm(latents["healthy"] - z_shift, axis=1)
    cross = latents["healthy"][:, None, :] - latents["ab_volpres"][None, :, :]
    cross_d = np.linalg.norm(cross, axis=2).ravel()
    med_shift = float(np.median(shift_d))
    med_cross = float(np.median(cross_d))
    assert med_shift < med_cross, (med_shift, med_cross)


# ---------------------------------------------------------------------------
# criterion 10: interpolation endpoints and the volume trend
# ---------------------------------------------------------------------------

def test_c10_interpolation_endpoints_and_volume_trend(main_model, latents):
    params, _ = main_model
    zn = latents["healthy"]
    za = latents["ab_shrink"]  # abnormality that removes volume
    ts = (0.0, 0.25, 0.5, 0.75, 1.0)
    pairs = interpolate_groups(params, zn, za, ts=ts)
    d0 = (decode(params, zn.mean(axis=0)).data > 0.5).astype(np.uint8)
    d1 = (decode(params, za.mean(axis=0)).data > 0.5).astype(np.uint8)
    assert np.array_equal(pairs[0][1].data, d0)
    assert np.array_equal(pairs[-1][1].data, d1)
    vols = [int(m.foreground_count()) for _, m in pairs]
    violations = sum(1 for a, b in zip(vols, vols[1:]) if b > a)
    assert violations <= 1, f"volumes along the path: {vols}"


# ---------------------------------------------------------------------------
# criterion 11: classical PCA shape-model baseline report rows
# ---------------------------------------------------------------------------

def test_c11_asm_baseline_report(main_model, test_sets, latents):
    healthy, ab_volpres, _ = test_sets
    y = _test_labels()
    train_masks = healthy_cohort(200, 0)
    model = asm_fit(train_masks, 16)
    train_proj = np.stack([asm_project(model, m) for m in train_masks])
    center = train_proj.mean(axis=0)
    feats = np.stack([asm_project(model, m) for m in list(healthy) + list(ab_volpres)])
    asm_zero = np.linalg.norm(feats - center, axis=1)

    rows = [REPORT_HEADER]
    stats = fit_normative(latents["train"])
    z_test = np.vstack([latents["healthy"], latents["ab_volpres"]])
    vae_zero = np.array([zero_shot_score(z, stats) for z in z_test])
    rows.append(report_from_scores("vae_zero_shot", vae_zero, y, reps=1000, seed=0).summary_row())
    rows.append(
        crossval_fewshot(z_test, y, stratified_kfold(y, len(y), seed=0), seed=0).summary_row()
    )
    rows.append(report_from_scores("asm_zero_shot", asm_zero, y, reps=1000, seed=0).summary_row())
    rows.append(
        crossval_fewshot(feats, y, stratified_kfold(y, len(y), seed=0), seed=0).summary_row()
    )
    assert len(rows) == 5
    for row in rows[1:]:
        cells = row.split(",")
        assert len(cells) == 6
        vals = [float(c) for c in cells[2:]]
        assert all(np.isfinite(vals))
        assert 0.0 <= vals[0] <= 1.0
    print("\n".join(rows))
