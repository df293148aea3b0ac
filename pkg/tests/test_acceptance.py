"""Acceptance criteria A1-A9.

Each ``check_*`` function returns ``(passed, detail)``. Under pytest every
criterion becomes a test and a PASS/FAIL line is added to the terminal
summary; run this file directly to print the same lines without pytest:

    python3 tests/test_acceptance.py
"""

import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from cac import harness  # noqa: E402
from cac.banks import Banks, expanded_neighbors, init_banks, neighborhood_purity, topk_neighbors, update_banks  # noqa: E402
from cac.core import Layer, ModelParams, cross_entropy, finite_difference_grad, init_model, l2_normalize_rows  # noqa: E402
from cac.core import model_backward, model_forward, softmax, softmax_backward  # noqa: E402
from cac.data import LabeledDataset  # noqa: E402
from cac.harness import TrainConfig, evaluate, imbalanced_config, run_ablation, run_experiment  # noqa: E402
from cac.losses import MODES, build_similarity_mask, cac_loss, multi_positive_nce  # noqa: E402
from oracles import brute_topk, naive_cac, rel_error  # noqa: E402

# per-class accuracies of the published CaC result row
PUBLISHED_ROW = [96.9, 91.0, 83.3, 72.3, 96.9, 96.1, 90.7, 81.6, 95.1, 92.9, 92.0, 63.2]


def _random_banks(rng, n, d, c, k):
    f = l2_normalize_rows(rng.standard_normal((n, d)))
    banks = Banks.from_arrays(f, softmax(2.0 * rng.standard_normal((n, c))), np.zeros((n, k)))
    banks.neighbors = topk_neighbors(banks, f, k, np.arange(n))
    return banks


def check_a1(instances=120):
    """Vectorized loss vs triple loop, value and gradient within 1e-12."""
    rng = np.random.default_rng(101)
    worst = 0.0
    for t in range(instances):
        n = int(rng.integers(6, 33))
        k = int(rng.integers(1, 5))
        s = min(int(rng.integers(1, 9)), n)
        c = int(rng.integers(2, 6))
        banks = _random_banks(rng, n, 4, c, k)
        idx = rng.choice(n, size=s, replace=False)
        probs = softmax(2.0 * rng.standard_normal((s, c)))
        mask = build_similarity_mask(idx, banks)
        alpha = float(rng.uniform(0, 1))
        mode = MODES[t % 3]
        out = cac_loss(probs, idx, banks, mask, alpha, mode)
        neighbors = {i: banks.neighbors[i].tolist() for i in range(n)}
        total, _, _, grad = naive_cac(probs, idx.tolist(), neighbors, banks.probs.tolist(), mask.tolist(), alpha, mode)
        worst = max(worst, abs(out.total - total), float(np.max(np.abs(out.grad - grad))))
    return worst <= 1e-12, f"{instances} instances, max abs diff {worst:.2e}"


def check_a2():
    """Backprop vs central differences (eps 1e-5) on a 99-parameter network."""
    rng = np.random.default_rng(202)
    model = init_model(2, 3, hidden_width=8, feature_dim=6, seed=5)
    assert model.num_parameters() <= 500
    x = rng.standard_normal((10, 2))
    y = rng.integers(0, 3, size=10)
    batch = np.arange(10)
    banks = _random_banks(rng, 24, 6, 3, 3)
    mask = build_similarity_mask(batch, banks)

    def ce(probs):
        return cross_entropy(probs, y)[0], cross_entropy(probs, y)[1]

    def cac(mode):
        def fn(probs):
            out = cac_loss(probs, batch, banks, mask, 0.8, mode)
            return out.total, softmax_backward(probs, out.grad)
        return fn

    def nce(probs):
        value, g = multi_positive_nce(probs, batch, banks)
        return value, softmax_backward(probs, g)

    worst = {}
    for name, fn in [("ce", ce)] + [(m, cac(m)) for m in MODES] + [("nce", nce)]:
        _, _, probs, cache = model_forward(model, x, return_cache=True)
        analytic = model_backward(model, cache, fn(probs)[1])
        numeric = finite_difference_grad(lambda m: fn(model_forward(m, x)[2])[0], model, 1e-5)
        worst[name] = max(rel_error(a, b) for a, b in zip(analytic, numeric))
    ok = all(v <= 1e-6 for v in worst.values())
    return ok, f"{model.num_parameters()} params, max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())


def _finals(runs):
    return float(np.mean([r.adapted.report.avg for r in runs]))


def check_a3():
    """Default benchmark, five seeds: gain >= 10 points and final >= 90%."""
    harness._pretrain_cache.clear()
    t0 = time.perf_counter()
    cfg = TrainConfig()
    runs = [run_experiment(cfg.with_seed(s)) for s in cfg.seeds()]
    elapsed = time.perf_counter() - t0
    src = float(np.mean([r.source_only.avg for r in runs]))
    final = _finals(runs)
    ok = final - src >= 10 and final >= 90 and elapsed < 60
    return ok, f"source {src:.2f} -> adapted {final:.2f} (gain {final - src:.2f}), {elapsed:.1f}s"


def check_a4():
    """Ablation ordering neg < pos < pos+neg, and W_sim within 1 point of pos+neg."""
    rows = {r["variant"]: r["mean"] for r in run_ablation(TrainConfig())}
    neg, pos, full, wsim = rows["neg"], rows["pos"], rows["pos+neg"], rows["pos+neg+wsim"]
    ok = neg < pos < full and wsim >= full - 1.0
    return ok, f"neg {neg:.2f}, pos {pos:.2f}, pos+neg {full:.2f}, pos+neg+wsim {wsim:.2f}"


def check_a5():
    """Imbalanced target: beta=5 >= beta=0, and beta=0 degrades late in >= 3 of 5 seeds."""
    base = imbalanced_config()
    by_beta = {b: [run_experiment(replace(base, beta=b).with_seed(s)) for s in base.seeds()] for b in (0.0, 5.0)}
    m0, m5 = _finals(by_beta[0.0]), _finals(by_beta[5.0])
    drops = []
    for r in by_beta[0.0]:
        curve = [a for e, a in r.adapted.report.epoch_curve if e >= 1]
        drops.append(max(curve) - curve[-1])
    degraded = sum(d >= 1.0 for d in drops)
    ok = m5 >= m0 and degraded >= 3
    return ok, f"beta=5 {m5:.2f} vs beta=0 {m0:.2f}; beta=0 peak-final drops {[round(d, 2) for d in drops]}"


def check_a6():
    """evaluate's macro-average over the published 12 per-class accuracies."""
    # 1000 samples per class; round(10 * v) of them are classified correctly.
    c = len(PUBLISHED_ROW)
    xs, ys = [], []
    for label, acc in enumerate(PUBLISHED_ROW):
        right = int(round(10 * acc))
        codes = [label] * right + [(label + 1) % c] * (1000 - right)
        xs.append(np.eye(c)[codes])
        ys.extend([label] * 1000)
    data = LabeledDataset(np.vstack(xs), np.array(ys), c, "target")
    model = ModelParams([Layer(np.eye(c), np.zeros(c), "identity")], Layer(10 * np.eye(c), np.zeros(c)))
    report = evaluate(model, data)
    ok = abs(report.avg - 87.7) <= 0.05 and np.allclose(report.per_class, PUBLISHED_ROW)
    return ok, f"macro-average {report.avg:.4f}"


def check_a7(configs=1000):
    """Randomized mask / neighbor-row / top-k checks."""
    rng = np.random.default_rng(707)
    t0 = time.perf_counter()
    for _ in range(configs):
        n = int(rng.integers(4, 33))
        k = int(rng.integers(1, min(4, n - 1) + 1))
        d = int(rng.integers(1, 5))
        banks = _random_banks(rng, n, d, 3, k)
        feats = banks.features.tolist()
        for i in (0, n - 1):
            if banks.neighbors[i].tolist() != brute_topk(feats, feats[i], k, i):
                return False, f"top-k mismatch at n={n} k={k}"
        s = int(rng.integers(1, min(8, n) + 1))
        idx = rng.choice(n, size=s, replace=False)
        update_banks(banks, idx, l2_normalize_rows(rng.standard_normal((s, d)) + 1e-3), softmax(rng.standard_normal((s, 3))))
        for slot, row in enumerate(banks.neighbors):
            if len(set(row.tolist())) != k or slot in row or row.min() < 0 or row.max() >= n:
                return False, f"invalid neighbor row at n={n} k={k}"
        mask = build_similarity_mask(idx, banks)
        for a in range(s):
            similar = set(banks.neighbors[idx[a]].tolist()) | expanded_neighbors(banks, int(idx[a]))
            for b in range(s):
                want = 0 if a == b or idx[b] in similar else 1
                if mask[a, b] != want:
                    return False, f"mask mismatch at n={n} k={k}"
    elapsed = time.perf_counter() - t0
    return elapsed < 30, f"{configs} configurations, {elapsed:.1f}s"


def check_a8():
    """Neighborhood purity of the pretrained model's target banks, K=3."""
    cfg = TrainConfig()
    values = []
    for s in cfg.seeds():
        model, target = harness._pretrained(cfg.with_seed(s))
        values.append(neighborhood_purity(init_banks(model, target.X, cfg.k), target.y))
    return min(values) >= 0.95, "purity " + ", ".join(f"{v:.3f}" for v in values)


def check_a9():
    """30% feature bank loses at most 2 points against the full bank."""
    cfg = TrainConfig()
    full = _finals([run_experiment(cfg.with_seed(s)) for s in cfg.seeds()])
    part_cfg = replace(cfg, bank_fraction=0.3)
    part = _finals([run_experiment(part_cfg.with_seed(s)) for s in cfg.seeds()])
    return full - part <= 2.0, f"fraction 1.0 {full:.2f}, fraction 0.3 {part:.2f}"


CHECKS = [
    ("A1", check_a1),
    ("A2", check_a2),
    ("A3", check_a3),
    ("A4", check_a4),
    ("A5", check_a5),
    ("A6", check_a6),
    ("A7", check_a7),
    ("A8", check_a8),
    ("A9", check_a9),
]


def run_check(name, fn):
    t0 = time.perf_counter()
    ok, detail = fn()
    line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}  [{time.perf_counter() - t0:.1f}s]"
    return ok, line


def _record(name, fn):
    from conftest import ACCEPTANCE_LINES

    ok, line = run_check(name, fn)
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_a1_loss_oracle():
    _record("A1", check_a1)


def test_a2_gradients():
    _record("A2", check_a2)


def test_a3_adaptation_gain():
    _record("A3", check_a3)


def test_a4_ablation_trend():
    _record("A4", check_a4)


def test_a5_decay_benefit():
    _record("A5", check_a5)


def test_a6_macro_average():
    _record("A6", check_a6)


def test_a7_property_suite():
    _record("A7", check_a7)


def test_a8_purity():
    _record("A8", check_a8)


def test_a9_bank_fraction():
    _record("A9", check_a9)


if __name__ == "__main__":
    failures = 0
    for name, fn in CHECKS:
        ok, line = run_check(name, fn)
        failures += not ok
        print(line, flush=True)
    sys.exit(1 if failures else 0)
