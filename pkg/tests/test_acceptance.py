"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines inline, or
``python3 tests/test_acceptance.py`` for just the summary.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import ortho_group

sys.path.insert(0, str(Path(__file__).parent))

from oracles import brute_kappa, brute_ntxent  # noqa: E402

from lesioncl import cli, imageops as io, patches  # noqa: E402
from lesioncl import contrastive as cl  # noqa: E402
from lesioncl import evaluation as ev  # noqa: E402
from lesioncl import synth  # noqa: E402
from lesioncl.verify import run_suite  # noqa: E402

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print("\n" + line, file=sys.__stdout__, flush=True)
    assert ok, line


def rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


# 1 ------------------------------------------------------------------------


def test_1_loss_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        n, d, tau = int(rng.choice([2, 4, 8])), int(rng.choice([3, 16])), float(rng.choice([0.07, 0.5]))
        z = rng.normal(size=(2 * n, d))
        worst = max(worst, rel(cl.ntxent_loss(z, cl.interleaved_partner(n), tau).total, brute_ntxent(z, tau)))
    single = cl.ntxent_loss(rng.normal(size=(2, 5)), [1, 0], 0.07).total
    closed = 0.0
    for n in (2, 4, 8):
        closed = max(closed, rel(cl.ntxent_loss(np.ones((2 * n, 3)), cl.interleaved_partner(n), 0.07).total,
                                 2 * n * math.log(2 * n - 1)))
    dt = time.perf_counter() - t0
    report(1, worst < 1e-9 and single == 0.0 and closed < 1e-9 and dt < 5,
           f"oracle rel err {worst:.1e}, N=1 loss {single}, identical-rows rel err {closed:.1e}, {dt:.2f}s")


# 2 ------------------------------------------------------------------------


def test_2_gradient_checks():
    t0 = time.perf_counter()
    checks = run_suite(0)
    dt = time.perf_counter() - t0
    worst = max(c.max_rel_error for c in checks)
    names = {c.name.split(":")[-1] for c in checks}
    covers = {"f.conv0.weight", "f.conv1.bias", "g.fc.weight", "g.fc.bias"} <= names
    report(2, all(c.passed for c in checks) and covers and dt < 60,
           f"{len(checks)} tensors, max rel err {worst:.1e}, {dt:.2f}s")


# 3 ------------------------------------------------------------------------


def test_3_kappa_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst, sym, perfect = 0.0, True, True
    for _ in range(1000):
        n = int(rng.integers(1, 501))
        pred, true = rng.integers(0, 5, n), rng.integers(0, 5, n)
        k = ev.quadratic_weighted_kappa(pred, true, 5)
        worst = max(worst, abs(k - brute_kappa(pred, true, 5)))
        sym &= k == ev.quadratic_weighted_kappa(true, pred, 5)
        perfect &= ev.quadratic_weighted_kappa(true, true, 5) == 1.0
    dt = time.perf_counter() - t0
    report(3, worst <= 1e-12 and sym and perfect and dt < 5,
           f"max abs diff {worst:.1e}, symmetric {sym}, perfect agreement {perfect}, {dt:.2f}s")


# 4 ------------------------------------------------------------------------


def test_4_geometry_and_augmentation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    geom_ok = 0
    for _ in range(1000):
        w, h = rng.uniform(2, 200, size=2)
        x1, y1 = rng.uniform(0, 512 - w), rng.uniform(0, 512 - h)
        spec = patches.expand_and_shift(patches.BBox(x1, y1, x1 + w, y1 + h), rng)
        win = spec.window
        geom_ok += (win.width == 128.0 and win.height == 128.0 and win.x_min >= 0 and win.y_min >= 0
                    and win.x_max <= 512 and win.y_max <= 512 and patches.window_covers(spec))
    src = rng.uniform(0, 1, (512, 512, 3))
    cfg = io.AugmentConfig()
    view_ok = 0
    for t in range(1000):
        x0, y0 = rng.uniform(0, 384, size=2)
        window = (x0, y0, x0 + 128, y0 + 128)
        a = io.make_view(src, window, cfg, io.derive_rng(404, t))
        b = io.make_view(src, window, cfg, io.derive_rng(404, t))
        view_ok += a.shape == (128, 128, 3) and a.min() >= 0 and a.max() <= 1 and a.tobytes() == b.tobytes()
    gray_ok = rot_ok = 0
    for t in range(1000):
        img = rng.uniform(0, 1, (12, 12, 3))
        g = io.grayscale(img)
        gray_ok += np.abs(io.grayscale(g) - g).max() <= 1e-12
        rot_ok += np.array_equal(io.rotate(img, 0.0), img) and np.abs(io.rotate(img, 360.0) - img).max() <= 1e-9
    dt = time.perf_counter() - t0
    report(4, geom_ok == view_ok == gray_ok == rot_ok == 1000 and dt < 60,
           f"windows {geom_ok}/1000, views {view_ok}/1000, gray {gray_ok}/1000, rotation {rot_ok}/1000, {dt:.1f}s")


# 5 ------------------------------------------------------------------------


def test_5_loss_invariances():
    rng = np.random.default_rng(505)
    orth = scale = perm = 0.0
    for _ in range(20):
        n, d, tau = int(rng.choice([2, 4, 8])), int(rng.choice([3, 16])), float(rng.choice([0.07, 0.5]))
        z = rng.normal(size=(2 * n, d))
        partner = cl.interleaved_partner(n)
        base = cl.ntxent_loss(z, partner, tau).total
        q = ortho_group.rvs(d, random_state=rng) if d > 1 else np.ones((1, 1))
        orth = max(orth, rel(cl.ntxent_loss(z @ q, partner, tau).total, base))
        c = rng.uniform(0.1, 10.0, size=(2 * n, 1))
        scale = max(scale, rel(cl.ntxent_loss(z * c, partner, tau).total, base))
        p = rng.permutation(2 * n)
        inv = np.argsort(p)
        perm = max(perm, rel(cl.ntxent_loss(z[p], inv[partner[p]], tau).total, base))
    report(5, orth < 1e-9 and scale < 1e-9 and perm < 1e-12,
           f"orthogonal {orth:.1e}, row scaling {scale:.1e}, permutation {perm:.1e} (20 trials each)")


# 6 ------------------------------------------------------------------------

SEEDS = (0, 1, 2)
CELLS = [("linear", 0.25), ("transfer", 0.01)]


def test_6_directional_reproduction(tmp_path):
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        cfg = cli.RunConfig().with_seed(seed)
        data = tmp_path / f"seed{seed}"
        cli.make_dataset(cfg, data)
        res = cli.run_compare(data, cfg, CELLS)
        g = res["grid"]
        rows.append({
            "lesion25": g["lesion"]["linear"]["0.25"], "whole25": g["whole"]["linear"]["0.25"],
            "random25": g["random"]["linear"]["0.25"], "lesion_t1": g["lesion"]["transfer"]["0.01"],
            "random_t1": g["random"]["transfer"]["0.01"],
        })
        print(f"\nseed {seed}: {json.dumps(rows[-1])}", file=sys.__stdout__, flush=True)
    med = {k: float(np.median([r[k] for r in rows])) for k in rows[0]}
    dt = time.perf_counter() - t0
    gaps = (med["lesion25"] - med["whole25"], med["lesion25"] - med["random25"], med["lesion_t1"] - med["random_t1"])
    ok = gaps[0] >= 0.05 and gaps[1] >= 0.15 and gaps[2] >= 0.05 and dt < 600
    report(6, ok, f"medians {json.dumps({k: round(v, 3) for k, v in med.items()})}; "
                  f"gaps vs whole {gaps[0]:+.3f} (>=0.05), vs random {gaps[1]:+.3f} (>=0.15), "
                  f"transfer 1% {gaps[2]:+.3f} (>=0.05), {dt:.0f}s")


# 7 ------------------------------------------------------------------------


def test_7_threshold_monotonicity(tmp_path):
    samples = synth.generate(synth.SynthConfig(count=120, seed=7))
    synth.export(samples, tmp_path)
    recs = patches.read_detections(tmp_path / "detections.jsonl")
    counts, exact = [], True
    for t in (0.7, 0.8, 0.9):
        _, stats = patches.filter_by_confidence(recs, t)
        own = sum(b.confidence >= t for s in samples for b in s.detection.boxes)
        exact &= stats.num_lesions == own
        counts.append(stats.num_lesions)
    mono = all(a >= b for a, b in zip(counts, counts[1:]))
    report(7, mono and exact, f"lesions at 0.7/0.8/0.9: {counts}, equal to generator counts {exact}")


# 8 ------------------------------------------------------------------------

SMALL = {
    "synth": {"count": 80, "image_size": 96, "radius_range": [2, 4]},
    "test_count": 20,
    "train": {"epochs": 2, "batch_size": 8, "augment": {"view_size": 16}},
    "linear": {"epochs": 50},
    "eval_size": 32,
}


def small_config(tmp_path: Path) -> str:
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def test_8_determinism(tmp_path):
    cfg = small_config(tmp_path)
    data = str(tmp_path / "data")
    assert cli.main(["synth", "--config", cfg, "--out", data, "--single-thread"]) == 0
    outs = []
    run = tmp_path / "run"
    for _ in range(2):
        p, e = run / "pre", run / "eval"
        assert cli.main(["pretrain", "--config", cfg, "--data", data, "--out", str(p), "--single-thread", "--seed", "3"]) == 0
        assert cli.main(["linear-eval", "--config", cfg, "--data", data, "--checkpoint", str(p / "final.ckpt"),
                         "--out", str(e), "--single-thread", "--seed", "3"]) == 0
        outs.append({f.relative_to(run).as_posix(): f.read_bytes() for f in sorted(run.rglob("*")) if f.is_file()})
    same = outs[0] == outs[1]
    report(8, same and "pre/final.ckpt" in outs[0] and "eval/linear_eval.json" in outs[0],
           f"{len(outs[0])} files compared, bitwise identical {same}")


# 9 ------------------------------------------------------------------------


def test_9_ablation_harness(tmp_path):
    cfg = small_config(tmp_path)
    data = str(tmp_path / "data")
    assert cli.main(["synth", "--config", cfg, "--out", data]) == 0
    code = cli.main(["ablate", "--config", cfg, "--data", data, "--out", str(tmp_path / "abl")])
    rows = json.loads((tmp_path / "abl" / "ablate.json").read_text())["rows"] if code == 0 else []
    grid_ok = [tuple(r["ops"]) for r in rows] == list(cli.ABLATIONS)
    finite = all(np.isfinite(r["kappa"]) for r in rows)
    last = rows[-1] if rows else {}
    all_four = len(last.get("ops", ())) == 4 and np.isfinite(last.get("final_mean_loss") or np.nan)
    report(9, code == 0 and grid_ok and finite and all_four,
           f"{len(rows)} rows, kappas {[round(r['kappa'], 3) for r in rows]}")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print()
    for n in sorted(RESULTS):
        print(RESULTS[n])
    sys.exit(code)
