"""Acceptance suite: one test per primary criterion, each printing a
pass/fail line with its runtime (run with -s to see them live).

The heavy pipeline criterion trains both phases from scratch; the whole
module is self-contained and seeded, so reruns are reproducible.
"""

import itertools
import math
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from fd_utils import (
    analytic_grad,
    central_difference,
    eps_head_indices,
    make_fd_batch,
    pinned_mu,
)
from radiomics_oracle import all_features_oracle
from padkit import activity, denoiser, imagekit, radiomics, stats
from padkit.diffusion import make_schedule, mu_from_eps, posterior_mean_variance, q_sample
from padkit.imagekit import ScalarGrid2D, UNIT_NORM
from padkit.study import StudyStore, create_app, placement_side
from padkit.stats import PairedSample
from padkit.tensorio import write_tensor
from padkit.tumor import (
    LumpyParams,
    TumorSpec,
    gaussian_lumpy,
    insert_tumor,
    lesion_increment,
    lumpy_mean_expectation,
)


def _report(num, name, elapsed, limit, ok=True):
    status = "PASS" if ok else "FAIL"
    print(f"{status}  criterion {num:2d}: {name}  ({elapsed:.2f}s < {limit:.0f}s)")
    assert ok, f"criterion {num} failed: {name}"
    assert elapsed < limit, f"criterion {num} exceeded its runtime budget: {elapsed:.1f}s"


def test_criterion_01_forward_inverse_identity():
    t0 = time.time()
    schedule = make_schedule("squared_cosine", 100)
    rng = np.random.default_rng(101)
    worst = 0.0
    from padkit.diffusion import predict_x0

    for _ in range(1000):
        x0 = rng.random((8, 8))
        t = int(rng.integers(1, 101))
        eps = rng.standard_normal((8, 8))
        x_t = q_sample(x0, t, eps, schedule)
        back = predict_x0(x_t, t, eps, schedule, clamp=False)
        worst = max(worst, np.abs(back - x0).max() / np.abs(x0).max())
    elapsed = time.time() - t0
    _report(1, f"noise-inversion identity, max rel err {worst:.2e}",
            elapsed, 1.0, ok=worst < 1e-12)


def test_criterion_02_mean_parameterization_identity():
    t0 = time.time()
    worst = 0.0
    for T in (10, 100, 1000):
        for kind in ("linear", "squared_cosine"):
            schedule = make_schedule(kind, T)
            rng = np.random.default_rng(T)
            x0 = rng.random((4, 4))
            for t in range(1, T + 1):
                eps = rng.standard_normal((4, 4))
                x_t = q_sample(x0, t, eps, schedule)
                mu_q, _ = posterior_mean_variance(x0, x_t, t, schedule)
                mu_e = mu_from_eps(x_t, t, eps, schedule)
                worst = max(worst, float(np.abs(mu_q - mu_e).max()))
    elapsed = time.time() - t0
    _report(2, f"posterior-mean identity, max abs dev {worst:.2e}",
            elapsed, 5.0, ok=worst < 1e-10)


def test_criterion_03_chain_vs_closed_form():
    t0 = time.time()
    schedule = make_schedule("linear", 100)
    t, n = 50, 20_000
    rng = np.random.default_rng(103)
    x = np.ones(n)
    for step in range(1, t + 1):
        x = math.sqrt(1 - schedule.beta[step]) * x \
            + math.sqrt(schedule.beta[step]) * rng.standard_normal(n)
    want_mean = math.sqrt(schedule.alpha_bar[t])
    want_var = 1 - schedule.alpha_bar[t]
    se = math.sqrt(want_var / n)
    mean_ok = abs(x.mean() - want_mean) < 4 * se
    var_ok = abs(x.var() - want_var) < 0.05 * want_var
    elapsed = time.time() - t0
    _report(3, f"stepwise chain matches marginal (mean dev {abs(x.mean()-want_mean)/se:.2f} SE, "
               f"var dev {abs(x.var()-want_var)/want_var*100:.1f}%)",
            elapsed, 30.0, ok=mean_ok and var_ok)


def test_criterion_04_stop_gradient_contract():
    t0 = time.time()
    schedule = make_schedule("squared_cosine", 12)
    model = denoiser.DenoiserModel(denoiser.PHASE_BASE, seed=104)
    rng = np.random.default_rng(104)
    vec = model.get_vector() + 0.05 * rng.standard_normal(model.n_params)
    model.set_vector(vec)
    batch = make_fd_batch(denoiser.PHASE_BASE, seed=105, B=2, size=16, t_values=[1, 7])
    weights = denoiser.LossWeights(lambda_vb=1.0, lambda_l1=0.03)
    mu_base = pinned_mu(model, vec, batch, schedule)

    # vb term is flat along every eps-head parameter
    worst_vb = 0.0
    for i in eps_head_indices(model):
        fd = central_difference(model, vec, int(i), batch, weights, schedule,
                                mu_base, term="vb")
        worst_vb = max(worst_vb, abs(fd))
    vb_ok = worst_vb < 1e-8

    # full-loss analytic gradient vs central differences, >=200 per kind
    grad = analytic_grad(model, batch, weights, schedule)
    model.set_vector(vec)
    kinds = {}
    for e in model.manifest:
        kinds.setdefault(e.kind, []).append(e)
    worst_rel = 0.0
    for kind, entries in sorted(kinds.items()):
        all_idx = np.concatenate([np.arange(e.offset, e.offset + e.size) for e in entries])
        assert all_idx.size >= 200, f"layer kind {kind} has under 200 parameters"
        take = rng.choice(all_idx, size=200, replace=False)
        for i in take:
            fd = central_difference(model, vec, int(i), batch, weights, schedule, mu_base)
            denom = max(abs(fd), abs(grad[i]), 1e-6)
            worst_rel = max(worst_rel, abs(fd - grad[i]) / denom)
    grad_ok = worst_rel < 1e-4
    elapsed = time.time() - t0
    _report(4, f"stop-gradient contract (vb flatness {worst_vb:.1e}, "
               f"gradcheck rel err {worst_rel:.1e} over {5*200} params)",
            elapsed, 120.0, ok=vb_ok and grad_ok)


def _phantom_cases(n, seed0, norm):
    out = []
    for i in range(n):
        labels, target, umap = activity.synth_phantom(activity.PhantomConfig(seed=seed0 + i))
        out.append((labels,
                    imagekit.arcsinh_normalize(umap, norm).values,
                    imagekit.arcsinh_normalize(target, norm).values,
                    umap))
    return out


def test_criterion_05_two_phase_pipeline():
    t0 = time.time()
    norm = imagekit.NormalizationParams.from_suv_cap()
    train_cases = _phantom_cases(400, 0, norm)
    eval_cases = _phantom_cases(50, 10_000, norm)
    dataset = [(m, x) for _, m, x, _ in train_cases]

    base = denoiser.train_phase(denoiser.desk_base_config(iterations=3000, T=200, seed=1),
                                dataset)
    sr = denoiser.train_phase(denoiser.desk_super_config(iterations=3000, T=200, seed=2),
                              dataset)
    rng = np.random.default_rng(99)
    assigned, got = [], []
    for labels, m01, _, umap in eval_cases:
        g01 = denoiser.generate(base, sr, m01, rng)
        gen = imagekit.denormalize(ScalarGrid2D(g01, unit=UNIT_NORM), norm)
        by_label = {s.label: s.mean_suv for s in activity.organ_means(gen, labels)}
        for s in activity.organ_means(umap, labels):
            assigned.append(s.mean_suv)
            got.append(by_label[s.label])
    ccc = stats.lin_ccc(PairedSample(np.array(assigned), np.array(got)))
    elapsed = time.time() - t0
    _report(5, f"two-phase pipeline organ-mean CCC {ccc:.4f} over {len(got)} organs "
               f"from 50 held-out maps", elapsed, 1800.0, ok=ccc >= 0.90)


def test_criterion_06_radiomics_oracle():
    t0 = time.time()
    rng = np.random.default_rng(106)
    checked = 0
    worst = 0.0
    while checked < 50:
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        img = rng.random((h, w)) * rng.uniform(0.5, 20)
        mask = rng.random((h, w)) < 0.85
        bins = int(rng.integers(2, 9))
        if mask.sum() < 4:
            continue
        try:
            mine = dict(radiomics.all_features(img, mask, radiomics.GlcmConfig(bin_count=bins)))
        except radiomics.EmptyGlcmError:
            continue
        ref = all_features_oracle(img, mask, bins)
        assert len(mine) == 27
        for name, value in mine.items():
            if math.isnan(value):
                assert math.isnan(ref[name]), name
            else:
                worst = max(worst, abs(value - ref[name]))
                assert abs(value - ref[name]) < 1e-9, (name, value, ref[name])
        checked += 1
    elapsed = time.time() - t0
    _report(6, f"all 27 features match brute force on 50 images (max dev {worst:.1e})",
            elapsed, 10.0)


def test_criterion_07_statistics_oracles():
    t0 = time.time()
    # Wilcoxon exact path vs full 2^n enumeration
    rng = np.random.default_rng(107)
    for n in range(2, 11):
        for _ in range(4):
            diffs = np.round(rng.normal(size=n), 1)
            diffs = diffs[diffs != 0]
            if diffs.size == 0:
                continue
            _, p = stats.wilcoxon_signed_rank(diffs)
            d = np.abs(diffs)
            order = np.argsort(d, kind="stable")
            ranks = np.empty(diffs.size)
            sd = d[order]
            i = 0
            while i < diffs.size:
                j = i
                while j + 1 < diffs.size and sd[j + 1] == sd[i]:
                    j += 1
                ranks[order[i:j + 1]] = (i + j) / 2 + 1
                i = j + 1
            w_plus = ranks[diffs > 0].sum()
            le = ge = 0
            for signs in itertools.product((0, 1), repeat=diffs.size):
                w = sum(r for r, s in zip(ranks, signs) if s)
                le += w <= w_plus + 1e-9
                ge += w >= w_plus - 1e-9
            total = 2 ** diffs.size
            p_ref = min(1.0, 2 * min(le / total, ge / total))
            assert p == pytest.approx(p_ref, abs=1e-12)

    ccc = stats.lin_ccc(PairedSample(np.array([1.0, 2, 3]), np.array([2.0, 3, 4])))
    assert abs(ccc - 4 / 7) < 1e-12
    assert stats.bonferroni_threshold(0.05, 2) == 0.025

    x = np.random.default_rng(7).normal(size=20)
    pair = PairedSample(x, x + 0.05 * np.random.default_rng(8).normal(size=20))
    p1 = stats.paired_bootstrap_ccc_diff(pair, pair, 1000, seed=5)
    p2 = stats.paired_bootstrap_ccc_diff(pair, pair, 1000, seed=5)
    assert p1 == p2 == 1.0
    elapsed = time.time() - t0
    _report(7, "Wilcoxon enumeration, CCC 4/7, Bonferroni 0.025, bootstrap determinism",
            elapsed, 30.0)


def test_criterion_08_js_pipeline():
    t0 = time.time()
    rng = np.random.default_rng(108)
    v = rng.normal(size=200)
    assert stats.js_distance(v, v.copy()) == 0.0
    a = rng.uniform(0, 1, 400)
    assert abs(stats.js_distance(a, a + 1000.0) - 1.0) < 1e-12
    worst = 0.0
    for _ in range(100):
        s1 = rng.normal(size=rng.integers(20, 80))
        s2 = rng.normal(loc=rng.uniform(-2, 2), size=rng.integers(20, 80))
        worst = max(worst, abs(stats.js_distance(s1, s2) - stats.js_distance(s2, s1)))
    elapsed = time.time() - t0
    _report(8, f"JS distance: zero/one endpoints, symmetry dev {worst:.1e}",
            elapsed, 5.0, ok=worst < 1e-12)


def test_criterion_09_lumpy_and_insertion():
    t0 = time.time()
    params = LumpyParams(mean_lump_count=60.0, lump_sigma=1.0, magnitude=0.8)
    shape = (64, 64)
    want = lumpy_mean_expectation(shape, params)
    means = [gaussian_lumpy(shape, params, np.random.default_rng(seed)).mean()
             for seed in range(500)]
    lumpy_dev = abs(np.mean(means) - want) / want
    lumpy_ok = lumpy_dev < 0.05

    spec = TumorSpec(center=(16.0, 16.0), radii=(7.0, 6.0), rotation=0.4, sbr=4.0,
                     lumpy=LumpyParams(mean_lump_count=20.0, lump_sigma=1.0,
                                       magnitude=1e-300),
                     psf_fwhm=2.0)
    bg = ScalarGrid2D(np.full((32, 32), 1.0), unit="suv")
    img, mask = insert_tumor(bg, spec, np.random.default_rng(9))
    region_mean = img.values[mask.labels.astype(bool)].mean()
    insertion_dev = abs(region_mean - spec.sbr * 1.0) / (spec.sbr * 1.0)
    insertion_ok = insertion_dev < 0.10

    spec_tex = TumorSpec(center=(16.0, 16.0), radii=(6.0, 5.0), rotation=0.2, sbr=3.0,
                         lumpy=LumpyParams(mean_lump_count=20.0, lump_sigma=1.0,
                                           magnitude=0.4),
                         psf_fwhm=1.5)
    inc1, _ = lesion_increment((32, 32), spec_tex, 2.0, np.random.default_rng(10))
    inc2, _ = lesion_increment((32, 32), spec_tex, 2.0, np.random.default_rng(10))
    paired_ok = np.array_equal(inc1, inc2)
    elapsed = time.time() - t0
    _report(9, f"lumpy mean dev {lumpy_dev*100:.1f}%, insertion dev {insertion_dev*100:.1f}%, "
               f"paired increment bit-identical {paired_ok}",
            elapsed, 60.0, ok=lumpy_ok and insertion_ok and paired_ok)


def test_criterion_10_study_arithmetic(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(110)
    write_tensor(ScalarGrid2D(rng.random((16, 16)), unit=UNIT_NORM), str(tmp_path / "t0"))
    write_tensor(ScalarGrid2D(rng.random((16, 16)), unit=UNIT_NORM), str(tmp_path / "s0"))
    manifest = [{"target": str(tmp_path / "t0"), "synthetic": str(tmp_path / "s0")}] * 50

    # Table-3 arithmetic, driven end to end over the HTTP API
    store = StudyStore(str(tmp_path / "store"))
    client = TestClient(create_app(store))
    plan = {"obs1": (22, 3), "obs2": (29, 3), "obs3": (24, 4), "obs4": (21, 3)}
    for obs, (n_correct, conf) in plan.items():
        resp = client.post("/api/sessions", json={
            "manifest": manifest, "observer_id": obs, "seed": 17})
        assert resp.status_code == 200
        sid = resp.json()["session_id"]
        for i in range(50):
            side = placement_side(17, i)
            wrong = "left" if side == "right" else "right"
            ack = client.post(f"/api/sessions/{sid}/responses", json={
                "pair_index": i, "chosen_side": side if i < n_correct else wrong,
                "confidence": conf})
            assert ack.status_code == 200
    summary = client.get("/api/summary").json()
    by_obs = {r["observer_id"]: r for r in summary["rows"]}
    accs = [by_obs[f"obs{i}"]["accuracy_display"] for i in (1, 2, 3, 4)]
    table_ok = (accs == [44, 58, 48, 42]
                and summary["overall"]["accuracy_display"] == 48
                and summary["overall"]["median_confidence"] == 3.0)

    # random-guess observer over 10 000 trials, through the service core
    guess_store = StudyStore(str(tmp_path / "guess"))
    big = [{"target": str(tmp_path / "t0"), "synthetic": str(tmp_path / "s0")}] * 10_000
    session = guess_store.create_session(big, "guesser", seed=23)
    guess_rng = np.random.default_rng(42)
    sid = session.session_id
    for i in range(10_000):
        guess_store.record_response(
            sid, i, "left" if guess_rng.integers(0, 2) == 0 else "right", 3)
    acc = guess_store.summarize(sid)["accuracy_pct"]
    guess_ok = abs(acc - 50.0) <= 1.5
    elapsed = time.time() - t0
    _report(10, f"Table-style summary (44/58/48/42 -> 48%, median 3) exact; "
                f"random-guess observer at {acc:.2f}%",
            elapsed, 10.0, ok=table_ok and guess_ok)
