"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""

import time
from dataclasses import replace

import numpy as np
from scipy.stats import binomtest

from conftest import (STUDY_ADAPT_STEPS, STUDY_CONDITIONS, STUDY_PRETRAIN_STEPS, STUDY_SECONDS, STUDY_SEEDS,
                      record)
from symtrack import tensor as T
from symtrack.census import param_census
from symtrack.checkpoint import Checkpoint, model_from_checkpoint
from symtrack.config import ModelConfig, RunConfig
from symtrack.evaluate import run_eval, write_jsonl
from symtrack.gradsuite import (OP_CASES, check_op, key_bias_gradcheck, micro_model, model_gradcheck,
                               random_micro_batch)
from symtrack.masking import draw_batch, draw_rcpm
from symtrack.metrics import f_score, longterm_f, precision_curve, success_auc
from symtrack.model import SymTracker
from symtrack.tensor import Tensor
from symtrack.trainer import adapt, adapt_step, pretrain, prepare_adaptation
from test_metrics import micro_case, oracle_longterm, oracle_precision, oracle_success

GRAD_SEEDS = 20
GRAD_PER_TENSOR = 4


def test_criterion_1_parameter_census():
    t0 = time.perf_counter()
    cfg = ModelConfig.full_scale()
    cma = param_census(cfg, "cma").tuned_params / 1e6
    frozen = param_census(cfg, "frozen").tuned_params / 1e6
    dt = time.perf_counter() - t0
    ok = abs(cma - 7.69) <= 0.03 * 7.69 and abs(frozen - 0.59) <= 0.05 * 0.59 and dt < 1.0
    record(1, ok, f"tuned CMA {cma:.4f}M (7.69 +-3%), frozen {frozen:.4f}M (0.59 +-5%), {dt * 1e3:.1f} ms")
    assert ok


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    worst_op, worst_model, n_model = (0.0, ""), 0.0, 0
    key_tape, key_fd = 0.0, 0.0
    for seed in range(GRAD_SEEDS):
        for name in OP_CASES:
            e = check_op(name, seed).max_rel_err
            if e > worst_op[0]:
                worst_op = (e, name)
        r = model_gradcheck(ModelConfig.micro(), seed, per_tensor=GRAD_PER_TENSOR)
        worst_model = max(worst_model, r.max_rel_err)
        n_model += r.n_checked
        # key biases have an exactly zero gradient, so they are checked in absolute terms
        tape, fd = key_bias_gradcheck(ModelConfig.micro(), seed)
        key_tape, key_fd = max(key_tape, tape), max(key_fd, fd)
    dt = time.perf_counter() - t0
    ok = worst_op[0] <= 1e-3 and worst_model <= 1e-3 and key_tape <= 1e-14 and key_fd <= 1e-9 and dt < 300
    record(2, ok, f"{GRAD_SEEDS} seeds: {len(OP_CASES)} op classes max rel err {worst_op[0]:.2e} ({worst_op[1]}); "
                  f"L_track over {n_model} scalars max rel err {worst_model:.2e}; "
                  f"key biases |tape| {key_tape:.1e}, |fd| {key_fd:.1e}; {dt:.0f} s")
    assert ok


def test_criterion_3_architectural_invariants(small_run, small_pretrained):
    t0 = time.perf_counter()
    # (a) cross-only fusion attention over 100 random forwards
    cfg = replace(small_run.model, fusion_layers=(1, 2))
    n = cfg.n_tokens
    intra_max, row_err, maps = 0.0, 0.0, 0
    for k in range(100):
        rng = np.random.default_rng(k)
        m = SymTracker(cfg, rng)
        m.init_adaptation(rng, adapter_std=0.5)
        for name, t in m.params.items():
            if ".up." in name:
                t.data[...] = rng.standard_normal(t.shape).astype(t.dtype)
        z = rng.random((2, cfg.template_size, cfg.template_size, 3)).astype(np.float32)
        x = rng.random((2, cfg.search_size, cfg.search_size, 3)).astype(np.float32)
        probe = []
        m.forward(z, rng.random(z.shape).astype(np.float32), x, rng.random(x.shape).astype(np.float32),
                  probe=probe)
        for a in probe:
            intra_max = max(intra_max, np.abs(a[..., :n, :n]).max(), np.abs(a[..., n:, n:]).max())
            row_err = max(row_err, np.abs(a.astype(np.float64).sum(-1) - 1.0).max())
            maps += 1
    ok_a = intra_max == 0.0 and row_err <= 1e-6 and maps == 200

    # (b) frozen tensors after 100 adapt steps
    ck = adapt(small_pretrained, small_run, steps=100)
    probe_model = model_from_checkpoint(ck)
    frozen = [k for k in small_pretrained.tensors if k.startswith("buffer/")
              or probe_model.group_of(k.split("/", 1)[1]) in ("backbone", "head")]
    ok_b = all(ck.tensors[k].tobytes() == small_pretrained.tensors[k].tobytes() for k in frozen)

    # (c) zero adapters with r=0 reproduce the pretrained function
    r0 = replace(small_run, model=replace(small_run.model, r=0.0))
    pre = model_from_checkpoint(small_pretrained)
    rng = np.random.default_rng(7)
    z, x = (rng.random((3, s, s, 3)).astype(np.float32) for s in (cfg.template_size, cfg.search_size))
    zx, xx = (rng.random((3, s, s, 3)).astype(np.float32) for s in (cfg.template_size, cfg.search_size))
    iso = prepare_adaptation(small_pretrained, replace(r0, model=replace(r0.model, fusion_layers=())))
    state, _ = iso.backbone_forward(iso.embed(z, x, "rgb"), iso.embed(zx, xx, "x"))
    same_streams = (state.h_rgb.data.tobytes() == pre.rgb_forward(pre.embed(z, x)).h_rgb.data.tobytes()
                    and state.h_x.data.tobytes() == pre.rgb_forward(pre.embed(zx, xx)).h_rgb.data.tobytes())
    fused = prepare_adaptation(small_pretrained, r0)
    bare = prepare_adaptation(small_pretrained, replace(r0, model=replace(r0.model, cma=False, mfa=False)))
    a, _ = fused.forward(z, zx, x, xx)
    b, _ = bare.forward(z, zx, x, xx)
    same_head = all(u.data.tobytes() == v.data.tobytes()
                    for u, v in ((a.score, b.score), (a.offset, b.offset), (a.size, b.size)))
    ok_c = same_streams and same_head

    # (d) complementarity over 1e5 draws across a grid of sizes and ratios
    rng = np.random.default_rng(0)
    grid = [(nt, r1, r2) for nt in (1, 2, 7, 20, 64) for r1 in (0.0, 0.25, 0.5, 0.9) for r2 in (0.0, 0.5, 0.9)]
    overlaps = 0
    draws = 100_000
    for i in range(draws):
        nt, r1, r2 = grid[i % len(grid)]
        p = draw_rcpm(nt, r1, r2, rng)
        overlaps += int(np.any(p.mask_rgb & p.mask_x))
    ok_d = overlaps == 0

    dt = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and ok_d and dt < 300
    record(3, ok, f"(a) {maps} fusion maps, max intra-modal {intra_max:.1e}, max |row sum - 1| {row_err:.1e}; "
                  f"(b) {len(frozen)} frozen tensors bitwise={ok_b}; (c) streams and head bitwise={ok_c}; "
                  f"(d) {overlaps} overlaps in {draws} draws; {dt:.0f} s")
    assert ok


def test_criterion_4_degeneration_identities():
    t0 = time.perf_counter()
    base = RunConfig(model=ModelConfig.micro())
    cfg = replace(base, mask=replace(base.mask, rho_primary=0.0, rho_secondary=0.0))
    mask_ok = True
    for seed in range(10):
        model = micro_model(cfg.model, seed)
        rng = np.random.default_rng(seed)
        batch = random_micro_batch(cfg.model, rng)
        masks = draw_batch(2, cfg.model.n_tokens, 0.0, 0.0, rng)
        _, parts = adapt_step(model, batch, masks, cfg, force_masked=True)
        mask_ok &= parts["l_sd"] == 0.0 and parts["l_mask"] == parts["l_clean"]

    iso = ModelConfig.micro(fusion_layers=())
    cross = 0.0
    for seed in range(10):
        model = micro_model(iso, seed)
        rng = np.random.default_rng(seed)
        shape = (2, iso.n_tokens, iso.dim)
        e_rgb = Tensor(rng.standard_normal(shape), requires_grad=True)
        e_x = Tensor(rng.standard_normal(shape), requires_grad=True)
        state, feats = model.backbone_forward(e_rgb, e_x)
        # any scalar of the RGB stream versus the X inputs, and the reverse
        T.backward(T.tsum(state.h_rgb * Tensor(rng.standard_normal(shape))))
        cross = max(cross, np.abs(e_x.grad).max() if e_x.grad is not None else 0.0)
        e_rgb.grad = e_x.grad = None
        T.backward(T.tsum(state.h_x * Tensor(rng.standard_normal(shape))))
        cross = max(cross, np.abs(e_rgb.grad).max() if e_rgb.grad is not None else 0.0)
        mask_ok &= feats == []
    dt = time.perf_counter() - t0
    ok = mask_ok and cross == 0.0 and dt < 60
    record(4, ok, f"rho=0: L_SD == 0 and L_MASK == L_CLEAN bitwise on 10 seeds = {mask_ok}; "
                  f"no fusion: max cross-stream gradient {cross:.1e}; {dt:.1f} s")
    assert ok


def test_criterion_5_metric_oracles():
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        pred, conf, gt, vis = micro_case(seed)
        P, G, V = pred.tolist(), gt.tolist(), vis.tolist()
        mismatches += success_auc(pred, gt, vis) != oracle_success(P, G, V)
        mismatches += precision_curve(pred, gt, vis, image_px=128.0)[0].tolist() != oracle_precision(P, G, V, 128.0)
        mismatches += longterm_f(pred, conf, gt, vis) != oracle_longterm(P, conf.tolist(), G, V)
    f = f_score(0.619, 0.609)
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and abs(f - 0.614) <= 5e-4 and dt < 60
    record(5, ok, f"50 micro-cases x 3 metrics, {mismatches} mismatches; F(0.619, 0.609) = {f:.5f}; {dt:.1f} s")
    assert ok


def _sign_test(wins: int, losses: int) -> float:
    if wins + losses == 0:
        return 1.0
    return binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue


def test_criterion_6_directional_robustness(study_pretrained, paired_study):
    total = STUDY_SECONDS.get("pretrain", 0.0) + STUDY_SECONDS.get("adapt_eval", 0.0)
    parts, ok = [], total <= 2 * 3600
    for cond in STUDY_CONDITIONS:
        seed_wins = sum(r["full"][cond] > r["ablated"][cond] for r in paired_study)
        seed_losses = sum(r["full"][cond] < r["ablated"][cond] for r in paired_study)
        diffs = np.concatenate([np.subtract(r["full_per_seq"][cond], r["ablated_per_seq"][cond])
                                for r in paired_study])
        p_pairs = _sign_test(int((diffs > 0).sum()), int((diffs < 0).sum()))
        p_seeds = _sign_test(seed_wins, seed_losses)
        mean = float(np.mean([r["full"][cond] - r["ablated"][cond] for r in paired_study]))
        ok &= seed_wins >= 4 and mean > 0 and p_pairs < 0.05
        parts.append(f"{cond}: full wins {seed_wins}/{len(STUDY_SEEDS)} seeds, mean AUC gain {mean:+.3f}, "
                     f"sign test p={p_pairs:.1e} over {len(diffs)} (seed, sequence) pairs (seed-level p={p_seeds:.3f})")
    detail = "; ".join(parts) + (f"; {STUDY_PRETRAIN_STEPS} pretrain + 2x{STUDY_ADAPT_STEPS} adapt steps per seed, "
                                 f"{total / 60:.1f} min")
    for r in paired_study:
        print("  seed", r["seed"], {k: round(v, 4) for k, v in r["full"].items()},
              {k: round(v, 4) for k, v in r["ablated"].items()})
    record(6, ok, detail)
    assert ok


def test_criterion_7_reproducibility(tmp_path, small_run):
    t0 = time.perf_counter()
    runs = []
    for k in range(2):
        pre = pretrain(small_run, steps=20)
        ck = adapt(pre, small_run, steps=20)
        _, recs = run_eval(model_from_checkpoint(ck), small_run)
        path = write_jsonl(recs, tmp_path / f"report_{k}.jsonl")
        runs.append((pre.to_bytes(), ck.to_bytes(), path.read_bytes()))
    same = runs[0] == runs[1]
    # save -> load -> save, and forward outputs after the round trip
    ck = Checkpoint.from_bytes(runs[0][1])
    p = ck.save(tmp_path / "a.ckpt")
    again = Checkpoint.load(p)
    stable = again.to_bytes() == runs[0][1] == Checkpoint.load(again.save(tmp_path / "b.ckpt")).to_bytes()
    m1, m2 = model_from_checkpoint(ck), model_from_checkpoint(again)
    rng = np.random.default_rng(0)
    c = small_run.model
    z = rng.random((2, c.template_size, c.template_size, 3)).astype(np.float32)
    x = rng.random((2, c.search_size, c.search_size, 3)).astype(np.float32)
    stable &= m1.forward(z, z, x, x)[0].score.data.tobytes() == m2.forward(z, z, x, x)[0].score.data.tobytes()
    dt = time.perf_counter() - t0
    ok = same and stable and dt < 600
    record(7, ok, f"two seeded runs: checkpoints and metric reports byte-identical = {same}; "
                  f"round trip bitwise stable = {stable}; {dt:.0f} s")
    assert ok
