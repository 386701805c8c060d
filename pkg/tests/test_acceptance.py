"""Acceptance gate: one test per shipped claim, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -rA`; the captured stdout of
every test carries a `[criterion N] PASS/FAIL: ...` line with the measured
numbers, so the whole gate is auditable from the test summary alone.
"""

import time

import numpy as np

from tacalab import (
    LoraAdapter,
    ModelConfig,
    SamplerConfig,
    TacaConfig,
    TokenLayout,
    ToyModel,
    default_concepts,
    sample,
)
from tacalab.analysis import mc_mean_mass
from tacalab.attention import (
    attention_baseline,
    attention_probs,
    attention_reference,
    attention_selective,
)
from tacalab.bench import run_bench, simulate_run
from tacalab.cli import main
from tacalab.data import synth_dataset
from tacalab.flow import make_schedule
from tacalab.lora import AdamW, apply_lora, init_lora, lora_grads
from tacalab.model import param_shapes
from tacalab.probe import alignment_probe
from tacalab.sampling import gamma_active_steps
from tacalab.tensor_math import finite_diff_grad, make_rng, relative_error
from tacalab.training import batch_loss_and_grads, head_tail_means, train_phase, velocity_mse


def report(n: int, ok: bool, detail: str) -> None:
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def random_instance(rng):
    layout = TokenLayout(
        n_txt=int(rng.integers(1, 17)),
        n_vis=int(rng.integers(1, 129)),
        heads=int(rng.integers(1, 9)),
        head_dim=int(rng.integers(4, 65)),
    )
    shape = (layout.heads, layout.total, layout.head_dim)
    q, k, v = (rng.standard_normal(shape) for _ in range(3))
    gamma = float(rng.uniform(0.5, 2.0))
    return layout, q, k, v, gamma


def test_criterion_1_kernel_equivalence():
    start = time.perf_counter()
    rng = make_rng(1001)
    n_instances = 100
    worst64 = 0.0
    worst32 = 0.0
    for _ in range(n_instances):
        layout, q, k, v, gamma = random_instance(rng)
        ref = attention_reference(q, k, v, gamma, 1.0, layout)
        sel = attention_selective(q, k, v, gamma, 1.0, layout)
        worst64 = max(worst64, float(np.abs(ref - sel).max()))
        q32, k32, v32 = (a.astype(np.float32) for a in (q, k, v))
        ref32 = attention_reference(q32, k32, v32, gamma, 1.0, layout)
        sel32 = attention_selective(q32, k32, v32, gamma, 1.0, layout)
        worst32 = max(worst32, float(np.abs(ref32 - sel32).max()))
    elapsed = time.perf_counter() - start
    ok = worst64 <= 1e-12 and worst32 <= 1e-5 and elapsed < 60.0
    report(
        1,
        ok,
        f"{n_instances} instances: max |reference - selective| = {worst64:.3e} (f64, tol 1e-12), "
        f"{worst32:.3e} (f32, tol 1e-5), runtime {elapsed:.1f}s < 60s",
    )


def test_criterion_2_identity_and_invariance():
    rng = make_rng(1002)
    worst_id = 0.0
    worst_txt = 0.0
    worst_rowsum = 0.0
    for _ in range(30):
        layout, q, k, v, gamma = random_instance(rng)
        base = attention_baseline(q, k, v)
        worst_id = max(
            worst_id,
            float(np.abs(attention_reference(q, k, v, 1.0, 1.0, layout) - base).max()),
            float(np.abs(attention_selective(q, k, v, 1.0, 1.0, layout) - base).max()),
        )
        nt = layout.n_txt
        ref = attention_reference(q, k, v, gamma, 1.0, layout)
        sel = attention_selective(q, k, v, gamma, 1.0, layout)
        worst_txt = max(
            worst_txt,
            float(np.abs(ref[:, :nt] - base[:, :nt]).max()),
            float(np.abs(sel[:, :nt] - base[:, :nt]).max()),
        )
        probs = attention_probs(q, k, gamma, 1.0, layout)
        worst_rowsum = max(worst_rowsum, float(np.abs(probs.sum(axis=-1) - 1.0).max()))
    ok = worst_id <= 1e-12 and worst_txt <= 1e-12 and worst_rowsum <= 1e-6
    report(
        2,
        ok,
        f"gamma=1 vs baseline max diff {worst_id:.3e} (tol 1e-12); text-row max shift under gamma "
        f"{worst_txt:.3e} (tol 1e-12); row-sum max dev {worst_rowsum:.3e} (tol 1e-6)",
    )


def test_criterion_3_suppression_reproduction():
    layout = TokenLayout(n_txt=8, n_vis=64, heads=1, head_dim=16)
    mass = mc_mean_mass(layout, [1.0, 1.2], n_trials=1000, rng=make_rng(1003))
    base = float(mass[0, 0])
    boosted = float(mass[1, 0])
    expected = 8.0 / 72.0
    ok = abs(base - 0.111) <= 0.01 and boosted > base
    report(
        3,
        ok,
        f"mean visual-to-text mass over 1000 iid draws = {base:.4f} "
        f"(expected ~{expected:.4f}, tol 0.111 +/- 0.01); gamma=1.2 mass {boosted:.4f} > {base:.4f} "
        "on the same draws",
    )


def test_criterion_4_schedule_allocation():
    model = ToyModel(ModelConfig(), make_rng(1004))
    concepts = default_concepts()
    cfg = SamplerConfig(
        steps=30, shift=3.0, cfg_scale=1.0, taca=TacaConfig(gamma0=1.2, t_thresh=970.0)
    )
    _, rows = sample(model, concepts.prompt_indices(0), cfg)
    active = gamma_active_steps(rows, 1.2)
    schedule_count = make_schedule(30, 3.0).n_gamma_active(970.0)
    active_ts = [f"{rows[i]['t']:.1f}" for i in active]
    ok = active == [0, 1, 2] and schedule_count == 3
    report(
        4,
        ok,
        f"sampler log: gamma-active steps {active} (t = {active_ts}), schedule count "
        f"{schedule_count}; expected exactly steps [0, 1, 2] of 30",
    )


def test_criterion_5_lora_suite():
    rng = make_rng(1005)
    d, k, r = 24, 20, 3

    # (a) zero-init transparency, exact
    w = rng.standard_normal((d, k))
    fresh = init_lora(d, k, r, alpha=16.0, rng=rng)
    transparent = np.array_equal(apply_lora(w, fresh), w)

    # (b) update rank bounded by r (SVD count at 1e-10)
    adapter = LoraAdapter(
        a=rng.standard_normal((r, k)) * 0.3, b=rng.standard_normal((d, r)) * 0.3,
        alpha=2.0, rank=r,
    )
    svals = np.linalg.svd(apply_lora(w, adapter) - w, compute_uv=False)
    rank = int((svals > 1e-10).sum())

    # (c) analytic factor grads vs finite differences at 10 random points
    worst = 0.0
    for point in range(10):
        prng = make_rng(2000 + point)
        wp = prng.standard_normal((d, k))
        ad = LoraAdapter(
            a=prng.standard_normal((r, k)) * 0.3, b=prng.standard_normal((d, r)) * 0.3,
            alpha=float(prng.uniform(0.5, 4.0)), rank=r,
        )
        target = prng.standard_normal((d, k))

        def loss_fn(weight, _):
            err = weight - target
            return float((err**2).sum()), 2.0 * err

        g_a, g_b = lora_grads(loss_fn, wp, ad, inputs=None)

        def loss_of(a_val, b_val):
            trial = LoraAdapter(a=a_val, b=b_val, alpha=ad.alpha, rank=r)
            return loss_fn(apply_lora(wp, trial), None)[0]

        fd_a = finite_diff_grad(lambda x: loss_of(x, ad.b), ad.a.copy())
        fd_b = finite_diff_grad(lambda x: loss_of(ad.a, x), ad.b.copy())
        worst = max(worst, relative_error(g_a, fd_a), relative_error(g_b, fd_b))

    # (d) base weights bit-identical after 200 adapter training steps
    model_cfg = ModelConfig(
        blocks=1, d_model=16, heads=2, head_dim=8, n_txt=4, n_vis=8, d_patch=2, d_ff=16, n_codes=9
    )
    concepts = default_concepts(n_concepts=5, n_txt=4)
    trng = make_rng(1006)
    model = ToyModel(model_cfg, trng)
    # A zero output head blocks every upstream gradient; give it weight so
    # the adapters actually receive signal (the real pipeline pretrains first).
    model.params["w_head"] = trng.standard_normal((model_cfg.d_model, model_cfg.d_patch)) * 0.3
    data = synth_dataset(8, trng, concepts, n_vis=model_cfg.n_vis)
    model.attach_lora(rank=2, alpha=4.0, rng=trng)
    before = {name: arr.copy() for name, arr in model.params.items()}
    opt = AdamW(model.trainable_params(), lr=1e-3)
    train_phase(
        model, data, concepts, opt, steps=200, rng=trng, phase="taca",
        taca=TacaConfig(), t_low=970.0, batch_size=2, cfg_dropout=0.1, log=[],
    )
    frozen = all(np.array_equal(model.params[name], before[name]) for name in before)
    adapters_moved = any((ad.b != 0).any() for ad in model.adapters.values())

    ok = transparent and rank <= r and worst <= 1e-4 and frozen and adapters_moved
    report(
        5,
        ok,
        f"zero-init transparency exact: {transparent}; rank(W'-W) = {rank} <= r = {r}; "
        f"factor-grad vs finite-diff worst rel err {worst:.3e} (tol 1e-4) at 10 points; "
        f"base weights bit-identical after 200 steps: {frozen} (adapters moved: {adapters_moved})",
    )


def test_criterion_6_toy_training(trained):
    model, log, elapsed = trained
    fin_losses = [row["loss"] for row in log if row["phase"] == "taca"]
    assert len(fin_losses) == 200
    first, last = head_tail_means(fin_losses)

    # gradient of the full loss through one block vs finite differences
    cfg = ModelConfig(
        blocks=1, d_model=8, heads=2, head_dim=4, n_txt=2, n_vis=4, d_patch=2, d_ff=8, n_codes=5
    )
    gmodel = ToyModel(cfg, make_rng(1007))
    gmodel.params["w_head"] = make_rng(1008).standard_normal((8, 2)) * 0.5
    grng = make_rng(1009)
    prompt = np.array([0, 3])
    x_t = grng.standard_normal((4, 2))
    v_target = grng.standard_normal((4, 2))

    v_pred, cache = gmodel.forward(prompt, x_t, 980.0, gamma=1.2, want_cache=True)
    _, g_out = velocity_mse(v_pred, v_target)
    grads = gmodel.backward(cache, g_out)

    worst = 0.0
    for name in gmodel.params:
        orig = gmodel.params[name]

        def loss_at(wval):
            gmodel.params[name] = wval
            try:
                out = gmodel.forward(prompt, x_t, 980.0, gamma=1.2)
                return velocity_mse(out, v_target)[0]
            finally:
                gmodel.params[name] = orig

        fd = finite_diff_grad(loss_at, orig.copy())
        worst = max(worst, relative_error(grads[name], fd))

    ok = last < first and worst <= 1e-4 and elapsed < 300.0
    report(
        6,
        ok,
        f"200-step fine-tune running loss {first:.4f} -> {last:.4f} (decreased: {last < first}); "
        f"one-block loss gradient vs finite-diff worst rel err {worst:.3e} (tol 1e-4); "
        f"training runtime {elapsed:.1f}s < 300s",
    )


def test_criterion_7_alignment_direction(trained, concepts):
    model, _, _ = trained
    dataset = synth_dataset(20, make_rng(7), concepts)
    rows = alignment_probe(model, dataset, [1.0, 1.2], concepts)
    base, taca = rows[0], rows[1]
    eps = taca.std_err
    ok = taca.mean_score >= base.mean_score - eps
    report(
        7,
        ok,
        f"probe over 20 samples: score(gamma0=1.2) = {taca.mean_score:.4f} vs "
        f"score(gamma0=1.0) = {base.mean_score:.4f}, epsilon (one SE) = {eps:.4f}; "
        f"direction holds within epsilon: {ok}",
    )


def test_criterion_8_performance_smoke():
    # Timing noise is one-sided (interference only ever adds time), so each
    # strategy's cost is estimated as the minimum of three independent
    # medians; the factor of the minima estimates the true relative cost.
    layout = TokenLayout(n_txt=16, n_vis=128, heads=8, head_dim=64)
    schedule = make_schedule(30, 3.0)
    gamma_steps = schedule.n_gamma_active(970.0)

    best = {"baseline": np.inf, "selective": np.inf}
    best_run = {"baseline_s": np.inf, "taca_s": np.inf}
    for _ in range(3):
        records = run_bench(layout, gamma=1.2, reps=20)  # correctness gate runs first
        for rec in records:
            if rec.strategy in best:
                best[rec.strategy] = min(best[rec.strategy], rec.median_s)
        sim = simulate_run(layout, steps=30, gamma_steps=gamma_steps, gamma=1.2, reps=5)
        for key in best_run:
            best_run[key] = min(best_run[key], sim[key])
    sel_factor = best["selective"] / best["baseline"]
    run_factor = best_run["taca_s"] / best_run["baseline_s"]

    ok = sel_factor <= 2.5 and run_factor <= 1.35 and gamma_steps == 3
    report(
        8,
        ok,
        f"correctness gate passed before timing; selective per-step factor {sel_factor:.2f}x "
        f"(tol <= 2.5x); simulated 30-step run with {gamma_steps} scaled steps "
        f"{run_factor:.3f}x baseline (tol <= 1.35x)",
    )


def test_criterion_9_cli_reproducibility(tmp_path):
    # For every command: run once with explicit flags, rerun purely from the
    # written resolved_config.json, and compare all non-timing outputs
    # byte for byte. Bench contributes only its config (its CSVs hold timings).
    train_out = tmp_path / "train_a"
    assert main(["train", "--out-dir", str(train_out), "--pretrain-steps", "12",
                 "--steps", "8", "--batch", "2", "--pairs", "8"]) == 0
    ckpt = str(train_out / "checkpoint.bin")

    cases = {
        "suppress": (
            ["suppress", "--trials", "80", "--heads", "2", "--gammas", "1.0", "1.2"],
            ["suppression.csv"],
        ),
        "train": (
            ["train", "--pretrain-steps", "12", "--steps", "8", "--batch", "2", "--pairs", "8"],
            ["checkpoint.bin", "training_log.csv"],
        ),
        "sample": (
            ["sample", "--checkpoint", ckpt, "--steps", "6", "--concept", "1"],
            ["sample.bin", "step_log.csv"],
        ),
        "sweep": (
            ["sweep", "--checkpoint", ckpt, "--gamma0-grid", "1.0", "1.2",
             "--t-thresh-grid", "970", "--probe-samples", "2", "--steps", "3"],
            ["sweep.csv"],
        ),
        "bench": (
            ["bench", "--n-txt", "4", "--n-vis", "16", "--heads", "2", "--head-dim", "8",
             "--reps", "3", "--run-reps", "2", "--steps", "6"],
            [],
        ),
    }

    checked = []
    for command, (args, artifacts) in cases.items():
        first = tmp_path / f"{command}_first"
        second = tmp_path / f"{command}_second"
        assert main([*args, "--out-dir", str(first)]) == 0, command
        code = main(
            [command, "--out-dir", str(second), "--config", str(first / "resolved_config.json")]
        )
        assert code == 0, command
        for name in [*artifacts, "resolved_config.json"]:
            a = (first / name).read_bytes()
            b = (second / name).read_bytes()
            assert a == b, f"{command}/{name} differs across rerun"
            checked.append(f"{command}/{name}")

    report(
        9,
        True,
        f"rerun from resolved_config.json byte-identical for {len(checked)} artifacts: "
        + ", ".join(checked),
    )
