"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Oracles are written here independently of the package code: a max-pivot
Jacobi solver, a two-pass Pearson in exact-sum arithmetic, brute-force
medoid search, set-membership masks and chi-square tests from scipy.
"""

from __future__ import annotations

import itertools
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from codistill import layers as L
from codistill.analysis import (
    explained_variance_curve,
    kmedoids,
    loss_update_correlation,
    read_loss_history,
    LossHistory,
)
from codistill.config import parse_config, parse_config_text
from codistill.data import GENERIC, DatasetManifest, compose_batch, load_registry
from codistill.gradcheck import TOLERANCE, format_table, run_gradcheck
from codistill.losses import ShareStrategy, build_share_mask, cosine_loss, smooth_l1_loss, teacher_drop
from codistill.projectors import Projector, tp_forward
from codistill.teachers import read_features, write_features
from codistill.tensor import Tensor
from codistill.trainer import (
    Trainer,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    rng_stream,
    save_checkpoint,
    train,
)
from codistill.vit import TokenSet, ViTConfig

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, title: str, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# 1


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    results = run_gradcheck()
    elapsed = time.perf_counter() - t0
    print(format_table(results))
    names = {r.name for r in results}
    composite = {"encoder+sp+loss", "encoder+lp+loss", "encoder+tp+loss"}
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.ok for r in results) and composite <= names and elapsed < 60.0
    report(1, ok, "gradient check",
           f"{len(results)} cases, worst {worst.name} {worst.max_rel_error:.2e} "
           f"(< {TOLERANCE:g}), {elapsed:.1f}s (< 60s)")


# 2


def test_c02_loss_identities():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((50, 17, 24))
    t = rng.standard_normal((50, 17, 24))
    self_err = np.abs(cosine_loss(s, s).data).max()
    anti_err = np.abs(cosine_loss(s, -s).data - 2.0).max()
    base = cosine_loss(s, t).data
    scale_err = 0.0
    for a, b in rng.uniform(1e-3, 1e3, (20, 2)):
        scale_err = max(scale_err, np.abs(cosine_loss(a * s, b * t).data - base).max())
    # both branches give 0.5 at |d| = 1
    z = np.zeros(1)
    branch = [smooth_l1_loss(np.array([v]), z).item() for v in (1.0, -1.0)]
    lower = 0.5 * 1.0**2
    upper = abs(1.0) - 0.5
    hand = (smooth_l1_loss(np.array([0.5]), z).item(),
            smooth_l1_loss(np.array([2.0]), z).item(),
            smooth_l1_loss(np.array([0.5, 2.0]), np.zeros(2)).item())
    ok = (self_err <= 1e-12 and anti_err <= 1e-12 and scale_err <= 1e-10
          and branch == [lower, upper] == [0.5, 0.5] and hand == (0.125, 1.5, 0.8125))
    report(2, ok, "loss identities",
           f"|cos(s,s)| {self_err:.1e}, |cos(s,-s)-2| {anti_err:.1e}, scale drift {scale_err:.1e}, "
           f"kink {branch}, hand {hand}")


# 3


def test_c03_tp_residual_collapse():
    cfg = ViTConfig(layerscale_init=0.7)
    rng = np.random.default_rng(3)
    proj = Projector("tp", cfg, 24, rng)
    params = dict(proj.params)
    for name in ("tp.block.attn.proj.weight", "tp.block.mlp.fc2.weight"):
        params[name] = Tensor(np.zeros(params[name].shape))
    # second-layer biases are zero at init; make every other tensor non-trivial
    for name, p in params.items():
        if not name.endswith(("attn.proj.weight", "fc2.weight", "attn.proj.bias", "fc2.bias")):
            params[name] = Tensor(p.data + rng.standard_normal(p.shape))
    mismatches = 0
    for i in range(100):
        z = TokenSet(Tensor(np.random.default_rng(1000 + i).standard_normal((2, 17, 32)) * 3), (4, 4))
        got = tp_forward(z, params, cfg.heads).tokens.data
        want = L.dense(z.tokens, params, "tp.head").data
        mismatches += int(not np.array_equal(got, want))
    report(3, mismatches == 0, "TP residual collapse",
           f"{100 - mismatches}/100 random z bitwise equal to Linear(z)")


# 4


def oracle_mask(ds_ids, groups, strategy, generic):
    out = []
    for ds in ds_ids:
        row = []
        for g in groups:
            owned = any(ds == d for d in g)
            shared = any(ds == d for d in generic)
            row.append({"none": owned, "generic": owned or shared, "full": True}[strategy])
        out.append(row)
    return np.array(out, dtype=bool)


def test_c04_share_mask_oracle():
    rng = np.random.default_rng(4)
    pool = [f"d{i}" for i in range(9)]
    checked = 0
    bad = 0
    chain_ok = True
    for _ in range(1000):
        perm = list(rng.permutation(pool))
        cuts = sorted(rng.choice(np.arange(1, 8), 3, replace=False))
        own = [perm[:cuts[0]], perm[cuts[0]:cuts[1]], perm[cuts[1]:cuts[2]]]
        generic = perm[cuts[2]:]
        gen_owner = rng.integers(3)
        groups = [g + (generic if i == gen_owner else []) for i, g in enumerate(own)]
        ids = list(rng.choice(pool, int(rng.integers(1, 24))))
        masks = {}
        for strat in ("none", "generic", "full"):
            masks[strat] = build_share_mask(ids, groups, strat, generic)
            bad += int(np.sum(masks[strat] != oracle_mask(ids, groups, strat, generic)))
            checked += masks[strat].size
        chain_ok &= bool(np.all(masks["none"] <= masks["generic"]) and np.all(masks["generic"] <= masks["full"]))
    report(4, bad == 0 and chain_ok, "share-mask oracle",
           f"{checked} entries over 1000 batches x 3 strategies, {bad} mismatches, "
           f"subset chain {'holds' if chain_ok else 'broken'}")


# 5 and 9 share the toy TP run


def _distill_subprocess(cfg_path: Path, out: Path) -> float:
    env = dict(os.environ)
    env.pop("DUNE_SEED_OVERRIDE", None)
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "codistill", "distill", str(cfg_path), "--out", str(out)],
                          capture_output=True, text=True, env=env)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    return elapsed


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("toy")
    cfg = CONFIGS / "toy3.cfg"
    times = [_distill_subprocess(cfg, base / "a"), _distill_subprocess(cfg, base / "b")]
    return base / "a", base / "b", times


def test_c05_toy_codistillation(toy_runs):
    a, b, times = toy_runs
    cfg = parse_config(CONFIGS / "toy3.cfg")
    widths = sorted(t.width for t in cfg.teachers)
    seeds = {t.seed for t in cfg.teachers}
    setup_ok = (widths == [16, 24, 32] and len(seeds) == 3 and cfg.student.width == 32
                and cfg.student.image_size == 28 and cfg.student.patch_size == 7
                and all(t.projector == "tp" for t in cfg.teachers)
                and cfg.share is ShareStrategy.FULL and cfg.steps == 500
                and cfg.per_teacher * len(cfg.teachers) == 12)
    rows = (a / "log.csv").read_text().splitlines()
    first = float(rows[1].split(",")[2])
    last = float(rows[500].split(",")[2])
    ratio = last / first
    artifacts = sorted(p.name for p in a.iterdir())
    identical = artifacts == sorted(p.name for p in b.iterdir()) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in artifacts)
    ok = setup_ok and len(rows) == 501 and ratio <= 0.20 and max(times) < 300 and identical
    report(5, ok, "toy co-distillation",
           f"total {first:.4f} -> {last:.4f} (ratio {ratio:.4f} <= 0.20), runs "
           f"{times[0]:.1f}s/{times[1]:.1f}s (< 300s), artifacts "
           f"{'bitwise identical' if identical else 'DIFFER'}")


# 6


def test_c06_self_distillation():
    cfg = parse_config(CONFIGS / "selfdistill.cfg")
    (teacher,) = cfg.teachers
    same_arch = (teacher.width, teacher.depth, teacher.heads, teacher.patch_size, teacher.mlp_ratio) == (
        cfg.student.width, cfg.student.depth, cfg.student.heads, cfg.student.patch_size, cfg.student.mlp_ratio)
    t0 = time.perf_counter()
    res = train(cfg)
    elapsed = time.perf_counter() - t0
    first, last = res.totals[0], res.totals[-1]
    ratio = last / first
    ok = same_arch and teacher.projector == "identity" and len(res.totals) == 2000 and ratio < 0.10
    report(6, ok, "self-distillation",
           f"identity head, 2000 steps, loss {first:.4f} -> {last:.6f} (ratio {ratio:.2e} < 0.10), "
           f"{elapsed:.0f}s")


# 7


def test_c07_teacher_drop_statistics():
    rng = rng_stream(0, "dropping")
    loss_rng = np.random.default_rng(7)
    kept_other = total_other = 0
    max_kept = 0
    min_active = 3
    n_steps = 10000
    for _ in range(n_steps):
        losses = loss_rng.uniform(0.1, 3.0, 3)
        keep = teacher_drop(losses, 0.5, rng)
        top = int(np.argmax(losses))
        max_kept += keep[top]
        others = [k for i, k in enumerate(keep) if i != top]
        kept_other += sum(others)
        total_other += len(others)
        min_active = min(min_active, sum(keep))
    frac = kept_other / total_other
    ok = abs(frac - 0.5) <= 0.02 and max_kept == n_steps and min_active >= 1
    report(7, ok, "teacher-drop statistics",
           f"non-max active {frac:.4f} (0.50 +/- 0.02), max-loss active {max_kept}/{n_steps}, "
           f"fewest active {min_active}")


# 8


def oracle_eigenvalues(a: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Classical Jacobi: always rotate the largest off-diagonal entry."""
    a = a.copy()
    n = len(a)
    for _ in range(50 * n * n):
        off = np.abs(a - np.diag(np.diag(a)))
        p, q = np.unravel_index(np.argmax(off), off.shape)
        if off[p, q] <= tol * np.abs(a).max():
            break
        phi = 0.5 * math.atan2(2 * a[p, q], a[q, q] - a[p, p])
        c, s = math.cos(phi), math.sin(phi)
        r = np.eye(n)
        r[p, p] = r[q, q] = c
        r[p, q], r[q, p] = s, -s
        a = r.T @ a @ r
    return np.sort(np.diag(a))[::-1]


def oracle_pearson(x, y) -> float:
    dx = [b - a for a, b in zip(x, x[1:])]
    dy = [b - a for a, b in zip(y, y[1:])]
    mx, my = math.fsum(dx) / len(dx), math.fsum(dy) / len(dy)
    sxy = math.fsum((u - mx) * (v - my) for u, v in zip(dx, dy))
    sxx = math.fsum((u - mx) ** 2 for u in dx)
    syy = math.fsum((v - my) ** 2 for v in dy)
    return sxy / math.sqrt(sxx * syy)


def test_c08_analysis_oracles():
    curve_err = 0.0
    shape_ok = True
    for i in range(20):
        rng = np.random.default_rng(800 + i)
        x = rng.standard_normal((100, 8)) @ rng.standard_normal((8, 8))
        curve = explained_variance_curve(x)
        xc = x - x.mean(0)
        lam = oracle_eigenvalues(xc.T @ xc / 99)
        ref = np.cumsum(lam) / lam.sum()
        ref_np = np.cumsum(np.linalg.eigvalsh(np.cov(x, rowvar=False))[::-1])
        ref_np /= ref_np[-1]
        curve_err = max(curve_err, np.abs(curve - ref).max(), np.abs(curve - ref_np).max())
        shape_ok &= bool(np.all(np.diff(curve) >= 0) and abs(curve[-1] - 1.0) <= 1e-15)

    r_err = 0.0
    for i in range(20):
        rng = np.random.default_rng(850 + i)
        la = rng.standard_normal(200).cumsum()
        lb = 0.5 * la + rng.standard_normal(200).cumsum()
        h = LossHistory(np.arange(200), {"a": la, "b": lb})
        r_err = max(r_err, abs(loss_update_correlation(h, "a", "b") - oracle_pearson(list(la), list(lb))))

    recovered = 0
    monotone = True
    for seed in range(100):
        rng = np.random.default_rng(900 + seed)
        x = np.concatenate([rng.normal(0.0, 1.0, (20, 2)), rng.normal(6.0, 1.0, (20, 2))])
        d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
        best = min(itertools.combinations(range(40), 2), key=lambda pq: d[:, list(pq)].min(1).sum())
        res = kmedoids(x, 2, rng=np.random.default_rng(seed))
        monotone &= all(b <= a for a, b in zip(res.history, res.history[1:]))
        recovered += int(tuple(sorted(res.medoids)) == best)

    ok = curve_err <= 1e-8 and shape_ok and r_err <= 1e-12 and monotone and recovered >= 95
    report(8, ok, "analysis oracles",
           f"PCA curve max err {curve_err:.1e} (<= 1e-8), monotone to 1: {shape_ok}; "
           f"Pearson err {r_err:.1e} (<= 1e-12); k-medoids optimum {recovered}/100 (>= 95), "
           f"cost monotone: {monotone}")


# 9


def test_c09_lp_vs_tp_correlation_table(toy_runs, tmp_path):
    a, _, _ = toy_runs
    text = (CONFIGS / "toy3.cfg").read_text().replace("projector = tp", "projector = lp")
    lp_cfg = tmp_path / "toy3-lp.cfg"
    lp_cfg.write_text(text)
    assert all(t.projector == "lp" for t in parse_config_text(text).teachers)
    _distill_subprocess(lp_cfg, tmp_path / "lp")
    tp_hist = read_loss_history(a / "log.csv")
    lp_hist = read_loss_history(tmp_path / "lp" / "log.csv")
    pairs = list(itertools.combinations(tp_hist.losses, 2))
    lines = [f"{'pair':<10} {'r(LP)':>8} {'r(TP)':>8}"]
    values = []
    for x, y in pairs:
        r_lp = loss_update_correlation(lp_hist, x, y)
        r_tp = loss_update_correlation(tp_hist, x, y)
        values += [r_lp, r_tp]
        lines.append(f"{x + '-' + y:<10} {r_lp:>8.4f} {r_tp:>8.4f}")
    table = "\n".join(lines)
    print(table)
    mean_lp, mean_tp = np.mean(values[0::2]), np.mean(values[1::2])
    ok = len(pairs) == 3 and all(np.isfinite(values))
    report(9, ok, "LP vs TP loss-delta correlation (reported)",
           f"mean r LP {mean_lp:.4f}, TP {mean_tp:.4f}; " + "; ".join(lines[1:]))


# 10


def test_c10_persistence(tmp_path):
    cfg = parse_config(CONFIGS / "toy3.cfg").replace(steps=5)
    res = train(cfg)
    path = save_checkpoint(res.checkpoint, tmp_path / "ckpt.bin")
    raw = path.read_bytes()
    ckpt_same = checkpoint_bytes(checkpoint_from_bytes(raw)) == raw

    images = res.trainer.registry.pixels("a1", 0)[None].repeat(3, 0)
    images[1] = res.trainer.registry.pixels("b2", 7)
    images[2] = res.trainer.registry.pixels("c1", 3)

    def outputs(tr):
        final, inter = tr.student.forward(images, collect_intermediates=True)
        return [final.tokens.data] + [p(final, inter).tokens.data for p in tr.projectors.values()]

    before = outputs(res.trainer)
    fresh = Trainer(cfg)
    fresh.load_state(load_checkpoint(path))
    after = outputs(fresh)
    forward_same = all(np.array_equal(x, y) for x, y in zip(before, after))

    recs = [(f"a1:{i}", before[1][i, 0], before[1][i, 1:]) for i in range(3)]
    write_features(tmp_path / "f1.bin", before[1].shape[-1], (4, 4), recs)
    ff = read_features(tmp_path / "f1.bin")
    write_features(tmp_path / "f2.bin", ff.width, ff.grid, [(k, c, p) for k, (c, p) in ff.records.items()])
    feat_same = (tmp_path / "f1.bin").read_bytes() == (tmp_path / "f2.bin").read_bytes()
    values_same = all(np.array_equal(ff.records[k][1], p.astype(np.float32)) for k, _, p in recs)

    ok = ckpt_same and forward_same and feat_same and values_same
    report(10, ok, "persistence",
           f"checkpoint bytes {'identical' if ckpt_same else 'DIFFER'}, DUNEFEAT bytes "
           f"{'identical' if feat_same else 'DIFFER'}, reloaded forward "
           f"{'bitwise equal' if forward_same else 'DIFFERS'} on {len(before)} outputs")


# 11


def test_c11_batch_composer():
    manifests = [
        DatasetManifest("a1", "t1", seed=1, count=16),
        DatasetManifest("a2", "t1", style="stripes", seed=2, count=16),
        DatasetManifest("b1", "t2", style="blobs", seed=3, count=16),
        DatasetManifest("c1", "t3", style="gradients", seed=4, count=16),
        DatasetManifest("c2", "t3", seed=5, count=16),
        DatasetManifest("c3", "t3", style="blobs", seed=6, count=16),
        DatasetManifest("g1", GENERIC, seed=7, count=16),
        DatasetManifest("g2", GENERIC, style="stripes", seed=8, count=16),
    ]
    reg = load_registry(manifests, ["t1", "t2", "t3"], ["t2"])
    k = 4
    rng = rng_stream(11, "batching")
    groups = dict(reg.sampling_groups())
    counts = {g: {d: 0 for d in ds} for g, ds in groups.items()}
    exact = True
    for _ in range(10000):
        batch = compose_batch(reg, k, rng)
        per_group: dict[str, int] = {}
        for s in batch.samples:
            per_group[s.group] = per_group.get(s.group, 0) + 1
            counts[s.group][s.dataset_id] += 1
        exact &= per_group == {g: k for g in groups}
    pvals = {g: stats.chisquare(list(c.values())).pvalue for g, c in counts.items() if len(c) > 1}
    ok = exact and all(p > 0.01 for p in pvals.values())
    report(11, ok, "batch composer",
           f"exactly {k} per group in 10000 batches: {exact}; chi-square p "
           + ", ".join(f"{g}={p:.3f}" for g, p in pvals.items()) + " (> 0.01)")
