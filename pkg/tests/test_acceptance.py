"""Acceptance checks, one per criterion.

Each check returns (passed, detail) and the pytest wrapper prints a single
PASS/FAIL line straight to the terminal. Run the file directly with
``python tests/test_acceptance.py`` to get the same lines without pytest.

Criteria 6 and 7 share one set of training runs: four ablation variants times
three seeds on the default synthetic dataset, at shipped defaults.
"""

from __future__ import annotations

import math
import tempfile
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from partformer import tensor as T
from partformer.config import load_config
from partformer.data import scan_dataset, synth_generate
from partformer.engine import evaluate_model, gradcheck_report, load_checkpoint, load_split, train
from partformer.losses import adc_loss, cdc_loss, ce_loss, triplet_soft
from partformer.metrics import cmc_map
from partformer.model import ModelConfig, PatchifyConfig, init_params, msa_concat, msa_headsum, patch_count, transformer_block
from partformer.tensor import Tensor

SEEDS = (0, 1, 2)
VARIANTS = {
    "baseline": {"ablation.enable_hdb": False, "ablation.enable_adc": False, "ablation.enable_cdc": False},
    "+HDB": {"ablation.enable_adc": False, "ablation.enable_cdc": False},
    "+HDB+ADC": {"ablation.enable_cdc": False},
    "+HDB+ADC+CDC": {},
}


def report(n: int, name: str, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name} | {detail}"


@lru_cache(maxsize=1)
def synth_root() -> Path:
    root = Path(tempfile.mkdtemp(prefix="acceptance-synth-"))
    synth_generate(load_config().synth, root)
    return root


# ---------------------------------------------------------------- 1


def check_headsum(draws: int = 100):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(draws):
        heads = int(rng.choice([1, 2, 3, 4, 6, 8]))
        c = heads * int(rng.integers(1, 9))
        z = Tensor(rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 18)), c)))
        qkv = Tensor(rng.normal(size=(c, 3 * c)) * rng.uniform(0.05, 1.0))
        proj = Tensor(rng.normal(size=(c, c)))
        diff = np.abs(msa_concat(z, qkv, proj, heads).data - msa_headsum(z, qkv, proj, heads).data).max()
        worst = max(worst, float(diff))
    dt = time.perf_counter() - t0
    return worst < 1e-10 and dt < 5, f"max |concat - headsum| = {worst:.2e} (< 1e-10), {draws} draws in {dt:.2f}s (< 5s)"


# ---------------------------------------------------------------- 2


def check_gradients():
    cfg = load_config()
    t0 = time.perf_counter()
    errs = gradcheck_report(cfg, max_coords=10)
    dt = time.perf_counter() - t0
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    ok = worst < 1e-5 and dt < 120 and cfg.loss_weights().alpha > 0 and cfg.loss_weights().beta > 0
    return ok, f"{len(errs)} parameter groups, worst {name} = {worst:.2e} (< 1e-5), {dt:.1f}s (< 120s)"


# ---------------------------------------------------------------- 3


def check_closed_forms():
    got = {
        "ce uniform C=10": (float(ce_loss(Tensor(np.zeros((4, 10))), [0, 3, 7, 9]).data), math.log(10), 1e-12),
        "triplet d_ap=d_an": (float(triplet_soft(Tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
                                                 [0, 0, 1, 1]).data), math.log(2), 1e-9),
        "adc disjoint one-hot": (float(adc_loss(Tensor([[[1.0, 0, 0, 0], [0, 0, 1.0, 0]]])).data), 0.0, 0.0),
        "adc identical one-hot": (float(adc_loss(Tensor([[[0, 1.0, 0, 0], [0, 1.0, 0, 0]]])).data), 2.0, 0.0),
        "adc uniform": (float(adc_loss(Tensor(np.full((1, 2, 4), 0.25))).data), 2.0, 0.0),
        "cdc uniform C=3": (float(cdc_loss(Tensor(np.zeros((2, 1, 3))), [0]).data), 0.5, 0.0),
        "cdc uniform C=7": (float(cdc_loss(Tensor(np.zeros((3, 2, 7))), [1, 6]).data), 1 / 6, 1e-15),
    }
    bad = [k for k, (v, ref, tol) in got.items() if abs(v - ref) > tol]
    worst = max(abs(v - ref) for v, ref, _ in got.values())
    return not bad, f"{len(got) - len(bad)}/{len(got)} exact, max deviation {worst:.1e}" + (f", failing: {bad}" if bad else "")


# ---------------------------------------------------------------- 4


def _oracle(dist, q_ids, q_cams, g_ids, g_cams):
    aps, firsts, skipped = [], [], 0
    for i in range(len(q_ids)):
        ranked = sorted(range(len(g_ids)), key=lambda j: (dist[i, j], j))
        kept = [j for j in ranked if g_ids[j] != -1 and not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i])]
        hit_ranks = [r for r, j in enumerate(kept, start=1) if g_ids[j] == q_ids[i]]
        if not hit_ranks:
            skipped += 1
            continue
        firsts.append(hit_ranks[0])
        precisions = np.array([(n + 1) / r for n, r in enumerate(hit_ranks)])
        aps.append(np.mean(precisions))
    if not aps:
        return np.array([]), None, None, skipped
    G = len(g_ids)
    cmc = np.array([np.mean(np.array(firsts) <= k) for k in range(1, G + 1)])
    return np.array(aps), cmc, float(np.mean(aps)), skipped


def check_metric_oracle(instances: int = 200):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    done = filtered = mismatches = 0
    while done < instances:
        Q, G = int(rng.integers(1, 21)), int(rng.integers(1, 51))
        n_ids, n_cams = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        q_ids, q_cams = rng.integers(0, n_ids, Q), rng.integers(0, n_cams, Q)
        g_ids, g_cams = rng.integers(-1, n_ids, G), rng.integers(0, n_cams, G)
        dist = rng.integers(0, 8, size=(Q, G)) / 4.0
        aps, cmc, mAP, skipped = _oracle(dist, q_ids, q_cams, g_ids, g_cams)
        if not len(aps):
            continue
        rep = cmc_map(dist, q_ids, q_cams, g_ids, g_cams)
        same = (np.array_equal(rep.ap, aps) and np.array_equal(rep.cmc, cmc)
                and rep.mAP == mAP and rep.num_skipped == skipped)
        mismatches += not same
        filtered += int(np.any((g_ids[None] == q_ids[:, None]) & (g_cams[None] == q_cams[:, None])))
        done += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 10 and filtered > 0
    return ok, f"{done - mismatches}/{done} bit-identical ({filtered} with same-camera filtering), {dt:.2f}s (< 10s)"


# ---------------------------------------------------------------- 5


def check_gating(trials: int = 20):
    cfg = ModelConfig(embed_dim=24, num_heads=4, depth=2)
    rng = np.random.default_rng(5)
    c, heads = cfg.embed_dim, cfg.num_heads
    d = c // heads
    worst = 0.0
    for t in range(trials):
        p = init_params(cfg, seed=t)
        for k in p:
            p[k].data = p[k].data + rng.normal(scale=0.3, size=p[k].shape)
        i = int(rng.integers(heads))
        p["blocks.0.attn.proj"].data[i * d : (i + 1) * d] = 0.0
        z = Tensor(rng.normal(size=(2, 9, c)))
        ref = transformer_block(z, p, "blocks.0", heads).data
        cols = np.r_[i * d : (i + 1) * d, c + i * d : c + (i + 1) * d, 2 * c + i * d : 2 * c + (i + 1) * d]
        for _ in range(3):
            p["blocks.0.attn.qkv"].data[:, cols] = rng.normal(scale=5.0, size=(c, cols.size))
            worst = max(worst, float(np.abs(transformer_block(z, p, "blocks.0", heads).data - ref).max()))
    return worst == 0.0, f"max output change when head i's Q/K/V are redrawn = {worst:.1e} (must be exactly 0), {trials * 3} redraws"


# ---------------------------------------------------------------- 6 and 7


@lru_cache(maxsize=1)
def ablation_runs():
    root = synth_root()
    index = scan_dataset(root)
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        for name, flags in VARIANTS.items():
            cfg = load_config(overrides={**flags, "run.seed": seed, "run.data_root": str(root)})
            rep = train(cfg, index).report
            runs[name, seed] = rep.to_dict()
    return runs, time.perf_counter() - t0


def check_ablation():
    runs, dt = ablation_runs()
    med = {name: float(np.median([runs[name, s]["mAP"] for s in SEEDS])) for name in VARIANTS}
    b, h, ha, full = (med[k] for k in VARIANTS)
    ok = b < h < ha <= full and dt < 1800
    per_seed = "; ".join(f"{k} " + "/".join(f"{runs[k, s]['mAP']:.3f}" for s in SEEDS) for k in VARIANTS)
    detail = (f"median mAP baseline {b:.4f} < +HDB {h:.4f} < +HDB+ADC {ha:.4f} <= +HDB+ADC+CDC {full:.4f}; "
              f"per seed {per_seed}; 12 runs in {dt / 60:.1f} min (< 30)")
    return ok, detail


def check_diversity():
    runs, _ = ablation_runs()
    pairs = [(runs["+HDB+ADC", s]["head_offdiag_gram"], runs["+HDB", s]["head_offdiag_gram"]) for s in SEEDS]
    ok = all(with_adc < without for with_adc, without in pairs)
    detail = ", ".join(f"seed {s}: {a:.4f} vs {w:.4f}" for s, (a, w) in zip(SEEDS, pairs))
    return ok, f"off-diagonal attention Gram with alpha=0.1 vs alpha=0 ({detail})"


# ---------------------------------------------------------------- 8


def check_defaults():
    cfg = load_config()
    got = {"lambda": cfg.model.sie_lambda, "alpha": cfg.loss.alpha, "beta": cfg.loss.beta, "N": cfg.model.hdb_heads}
    want = {"lambda": 3.0, "alpha": 0.1, "beta": 3.0, "N": 6}
    w = cfg.loss_weights()
    ok = got == want and (w.alpha, w.beta) == (0.1, 3.0) and cfg.model_config(4).num_parts == 6
    return ok, ", ".join(f"{k}={v}" for k, v in got.items())


# ---------------------------------------------------------------- 9


def check_persistence(steps: int = 40):
    root = synth_root()
    index = scan_dataset(root)
    cfg = load_config(overrides={"run.data_root": str(root)})
    out = Path(tempfile.mkdtemp(prefix="acceptance-run-"))
    a = train(cfg, index, out_dir=out, max_steps=steps)
    b = train(cfg, index, max_steps=steps)
    same_curve = a.losses == b.losses and len(a.losses) == steps
    tr, _ = load_checkpoint(out / "final.ckpt", cfg)
    bit_exact = all(np.array_equal(p.data, tr.params[k].data) and p.dtype == tr.params[k].dtype
                    for k, p in a.trainable.params.items())
    q, g = load_split(index, "query"), load_split(index, "gallery")
    live, saved = evaluate_model(a.trainable, q, g).to_dict(), evaluate_model(tr, q, g).to_dict()
    gap = max(abs(live[k] - saved[k]) for k in ("mAP", "rank1", "rank5", "head_offdiag_gram"))
    ok = same_curve and bit_exact and gap < 1e-7
    return ok, (f"{steps}-step loss curves identical: {same_curve}; checkpoint bit-exact: {bit_exact}; "
                f"saved vs in-memory eval gap {gap:.1e} (< 1e-7)")


# ---------------------------------------------------------------- 10


def check_patch_count(configs: int = 50):
    rng = np.random.default_rng(10)
    cases = [(256, 128, 16, 12), (256, 128, 16, 16)]
    while len(cases) < configs:
        P = int(rng.integers(1, 33))
        cases.append((int(rng.integers(P, 300)), int(rng.integers(P, 200)), P, int(rng.integers(1, P + 1))))
    bad = 0
    for H, W, P, s in cases:
        tops = [y for y in range(H - P + 1) if y % s == 0]
        lefts = [x for x in range(W - P + 1) if x % s == 0]
        bad += patch_count(PatchifyConfig(H, W, P, s)) != (len(tops), len(lefts), len(tops) * len(lefts))
    starred = patch_count(PatchifyConfig(256, 128, 16, 12))
    ok = bad == 0 and starred == (21, 10, 210)
    return ok, f"{len(cases) - bad}/{len(cases)} match window enumeration; 256x128 P=16 s=12 -> {starred[2]} patches"


CHECKS = [
    (1, "head-sum identity", check_headsum),
    (2, "gradient correctness", check_gradients),
    (3, "loss closed forms", check_closed_forms),
    (4, "metric oracle equivalence", check_metric_oracle),
    (5, "gating observation", check_gating),
    (6, "ablation direction", check_ablation),
    (7, "diversity signal", check_diversity),
    (8, "hyper-parameter defaults", check_defaults),
    (9, "determinism and persistence", check_persistence),
    (10, "patch count", check_patch_count),
]


@pytest.mark.parametrize("n,name,check", CHECKS, ids=[f"criterion_{n:02d}" for n, _, _ in CHECKS])
def test_criterion(n, name, check, capsys):
    ok, detail = check()
    with capsys.disabled():
        print("\n" + report(n, name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for n, name, check in CHECKS:
        ok, detail = check()
        results.append(ok)
        print(report(n, name, ok, detail), flush=True)
    print(f"{sum(results)}/{len(results)} criteria passed")
