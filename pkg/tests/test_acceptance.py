"""Acceptance gate: one test per shipping criterion, with timing and a
printed PASS/FAIL line each (run with -s to see the lines on success)."""

import json
import math
import statistics
import time

import numpy as np
import pytest

from fdcheck import central_difference, max_relative_error
from hashbound.bounds import bound_correlation, class_stats
from hashbound.centers import hadamard_centers
from hashbound.cli import main
from hashbound.codes import (
    BitCode,
    hamming_matrix,
    pack_sign_matrix,
    write_hbc1,
)
from hashbound.errors import UndefinedMetricError
from hashbound.mvb import SurrogateModel, estimation_demo, kl_divergence, MvbDistribution
from hashbound.nn import (
    Affine,
    DenseNet,
    Dropout,
    SiLU,
    softmax_cross_entropy,
)
from hashbound.ranking import RankEntry, RankList, average_precision
from hashbound.train import (
    ToyHashModel,
    make_synthetic_dataset,
    surrogate_nll,
    train_supervised,
)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


def textbook_ap(relevance) -> float:
    """Mean of precision-at-i over relevant ranks i, by direct counting."""
    hits = 0
    terms = []
    for i, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            terms.append(hits / i)
    return sum(terms) / len(terms)


def random_rank_list(rng) -> RankList:
    n = int(rng.integers(1, 65))
    dists = np.sort(rng.integers(0, 32, size=n))
    relevant = rng.random(n) < 0.4
    if not relevant.any():
        relevant[int(rng.integers(n))] = True
    entries = tuple(
        RankEntry(i, int(dists[i]), bool(relevant[i])) for i in range(n)
    )
    return RankList(0, entries)


def test_c01_misrank_ap_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    for _ in range(1000):
        rl = random_rank_list(rng)
        via_misrank = average_precision(rl)
        via_definition = textbook_ap(rl.relevance())
        assert via_misrank == via_definition
    elapsed = time.perf_counter() - start
    ok = elapsed < 1.0
    report("C1 misrank-AP", ok,
           f"1000 rank lists exactly equal on both routes ({elapsed:.2f}s < 1s)")
    assert ok


def all_code_signs(h: int) -> np.ndarray:
    indices = np.arange(1 << h)
    return ((indices[:, None] >> np.arange(h)) & 1) * 2 - 1


def test_c02_center_oracle():
    from hashbound.bounds import class_center
    from hashbound.codes import sign_matrix

    start = time.perf_counter()
    rng = np.random.default_rng(202)
    for trial in range(200):
        h = int(rng.integers(1, 13))
        size = int(rng.integers(1, 13))
        member_signs = np.where(rng.random((size, h)) < 0.5, -1, 1)
        members = pack_sign_matrix(member_signs.astype(np.int8))
        center = class_center(members)
        center_dist = int(hamming_matrix([center], members).sum())
        candidates = all_code_signs(h)
        objective = ((h - candidates @ member_signs.T) // 2).sum(axis=1)
        assert center_dist == int(objective.min())
    elapsed = time.perf_counter() - start
    ok = elapsed < 30.0
    report("C2 center-oracle", ok,
           f"200 majority centers equal the exhaustive argmin ({elapsed:.1f}s < 30s)")
    assert ok


def test_c03_bound_inequalities():
    rng = np.random.default_rng(303)
    violations = 0
    for _ in range(1000):
        h = int(rng.integers(2, 17))
        classes = int(rng.integers(2, 5))
        sizes = rng.integers(2, 9, size=classes)
        labels = np.repeat(np.arange(classes), sizes)
        signs = np.where(rng.random((labels.size, h)) < 0.5, -1, 1)
        codes = pack_sign_matrix(signs.astype(np.int8))
        stats = class_stats(codes, labels.tolist(), percentile=100.0)
        max_intra = int(stats.d_intra.max())
        min_inter = int(stats.d_inter.min())
        dists = hamming_matrix(codes, codes)
        same = labels[:, None] == labels[None, :]
        off_diag = ~np.eye(labels.size, dtype=bool)
        if np.any(dists[same & off_diag] > 2 * max_intra):
            violations += 1
        floor = min_inter - 2 * max_intra
        if floor > 0 and np.any(dists[~same] < floor):
            violations += 1
    ok = violations == 0
    report("C3 bound-inequalities", ok,
           f"0 violations over 1000 labeled sets (got {violations})")
    assert ok


def test_c04_eight_bit_estimation():
    start = time.perf_counter()
    surrogate_kls, naive_kls = [], []
    for seed in range(5):
        demo = estimation_demo(8, seed=seed)
        surrogate_kls.append(demo.surrogate_kl)
        naive_kls.append(demo.naive_kl)
    elapsed = time.perf_counter() - start
    med = statistics.median(surrogate_kls)
    naive_med = statistics.median(naive_kls)
    ok = med < 0.05 and med < naive_med / 5 and elapsed < 120.0
    report("C4 eight-bit-estimation", ok,
           f"median surrogate KL {med:.4f} < 0.05 and < naive/5 "
           f"({naive_med:.4f}/5 = {naive_med / 5:.4f}) ({elapsed:.1f}s < 120s)")
    assert ok


def test_c05_sixteen_bit_estimation():
    start = time.perf_counter()
    surrogate_kls, naive_kls = [], []
    for seed in range(5):
        demo = estimation_demo(16, u=2, seed=seed)
        surrogate_kls.append(demo.surrogate_kl)
        naive_kls.append(demo.naive_kl)
    elapsed = time.perf_counter() - start
    med = statistics.median(surrogate_kls)
    beats_naive = all(s < n for s, n in zip(surrogate_kls, naive_kls))
    ok = med < 0.2 and beats_naive and elapsed < 300.0
    report("C5 sanity16-analog", ok,
           f"median surrogate KL {med:.4f} < 0.2, surrogate < naive on 5/5 seeds "
           f"({elapsed:.1f}s < 300s)")
    assert ok


def test_c06_two_bit_table_kl():
    joint = MvbDistribution(2, np.array([0.394, 0.081, 0.079, 0.446]))
    b1 = (0.473, 0.527)
    b2 = (0.475, 0.525)
    product = MvbDistribution(
        2, np.array([b1[i & 1] * b2[(i >> 1) & 1] for i in range(4)])
    )
    oracle = sum(
        p * math.log(p / q)
        for p, q in zip(joint.probs.tolist(), product.probs.tolist())
    )
    value = kl_divergence(joint, product)
    ok = abs(value - oracle) < 1e-9
    report("C6 demo-table-KL", ok,
           f"KL {value:.6f} within 1e-9 of the four-term oracle {oracle:.6f}")
    assert ok


def test_c07_hadamard_distance():
    centers = hadamard_centers(10, 16)
    pairwise = hamming_matrix(list(centers.centers), list(centers.centers))
    off = pairwise[np.triu_indices(10, k=1)]
    ok = centers.min_pairwise == 8 and int(off.min()) == 8
    report("C7 hadamard-centers", ok,
           f"hadamard_centers(10, 16) min pairwise distance {centers.min_pairwise} == 8, "
           f"exhaustive scan agrees ({int(off.min())})")
    assert ok


def test_c08_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(808)
    worst = 0.0
    configs = 0

    # 30 configurations across the individual operations
    for _ in range(10):
        n, din, dout = (int(rng.integers(1, 5)) for _ in range(3))
        layer = Affine(din + 1, dout + 1, rng)
        x = rng.standard_normal((n, din + 1))
        _, cache = layer.forward(x)
        grad_out = rng.standard_normal((n, dout + 1))
        _, grads = layer.backward(cache, grad_out)

        def loss():
            y, _ = layer.forward(x)
            return float((y * grad_out).sum())

        numeric = central_difference(loss, layer.params())
        worst = max(worst, max_relative_error(grads, numeric))
        configs += 1

    for _ in range(10):
        n, d = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        act = SiLU()
        x = rng.standard_normal((n, d))
        grad_out = rng.standard_normal((n, d))
        _, cache = act.forward(x)
        grad_in, _ = act.backward(cache, grad_out)

        def loss():
            y, _ = act.forward(x)
            return float((y * grad_out).sum())

        numeric = central_difference(loss, [x])
        worst = max(worst, max_relative_error([grad_in], numeric))
        configs += 1

    for _ in range(10):
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        logits = rng.standard_normal((n, k))
        targets = rng.integers(0, k, size=n)
        _, grad = softmax_cross_entropy(logits, targets)

        def loss():
            value, _ = softmax_cross_entropy(logits, targets)
            return float(value)

        numeric = central_difference(loss, [logits])
        worst = max(worst, max_relative_error([grad], numeric))
        configs += 1

    # 10 dropout-net configurations with replayed masks
    for trial in range(10):
        n, d = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        net = DenseNet([Affine(d, 6, rng), SiLU(), Dropout(0.5), Affine(6, 3, rng)])
        x = rng.standard_normal((n, d))
        out, cache = net.forward(x, rng=np.random.default_rng(trial))
        grad_out = rng.standard_normal(out.shape)
        _, grads = net.backward(cache, grad_out)

        def loss():
            y, _ = net.forward(x, masks=cache.masks)
            return float((y * grad_out).sum())

        numeric = central_difference(loss, net.params())
        worst = max(worst, max_relative_error(grads, numeric))
        configs += 1

    # 10 full surrogate-gradient paths: d(center NLL)/d(code) through the
    # frozen dropout masks
    for trial in range(10):
        h = int(rng.integers(2, 7))
        u = 1 if h < 4 else int(rng.integers(1, 3))
        surrogate = SurrogateModel(h, u=u, hidden=8, seed=trial)
        n = int(rng.integers(1, 4))
        ell = rng.standard_normal((n, h))
        target_rows = np.where(rng.random((n, h)) < 0.5, -1.0, 1.0)
        _, grad_ell, masks = surrogate_nll(
            surrogate, ell, target_rows, rng=np.random.default_rng(900 + trial)
        )

        def loss():
            value, _, _ = surrogate_nll(surrogate, ell, target_rows, masks=masks)
            return float(value)

        numeric = central_difference(loss, [ell])
        worst = max(worst, max_relative_error([grad_ell], numeric))
        configs += 1

    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and configs == 50 and elapsed < 60.0
    report("C8 gradient-suite", ok,
           f"{configs} configurations, worst relative error {worst:.2e} < 1e-4 "
           f"({elapsed:.1f}s < 60s)")
    assert ok


def test_c09_toy_training_run():
    start = time.perf_counter()
    seed = 11
    data = make_synthetic_dataset(4, 200, 16, 6.0, seed=seed)
    model = ToyHashModel(16, 16, seed=seed)
    surrogate = SurrogateModel(16, u=2, seed=seed)
    centers = hadamard_centers(4, 16)
    model, trace = train_supervised(
        model, surrogate, centers, data, epochs=50, seed=seed
    )
    elapsed = time.perf_counter() - start
    maps = [r.map for r in trace.records]
    ratios = [r.ratio for r in trace.records]
    rho = bound_correlation(list(zip(maps, ratios)))
    ok = rho > 0.5 and maps[-1] > 0.95 and elapsed < 300.0
    report("C9 toy-training-run", ok,
           f"Spearman(mAP, ratio) {rho:.3f} > 0.5, final mAP {maps[-1]:.4f} > 0.95 "
           f"({elapsed:.1f}s < 300s)")
    assert ok


def strip_timestamp(text: str) -> str:
    return "".join(
        line for line in text.splitlines(keepends=True)
        if '"timestamp"' not in line
    )


def test_c10_cli_determinism(tmp_path, capsys):
    rng = np.random.default_rng(1010)
    base = pack_sign_matrix(np.where(rng.random((30, 8)) < 0.5, -1, 1).astype(np.int8))
    queries = pack_sign_matrix(np.where(rng.random((5, 8)) < 0.5, -1, 1).astype(np.int8))
    write_hbc1(tmp_path / "base.hbc", base)
    write_hbc1(tmp_path / "q.hbc", queries)
    with open(tmp_path / "labels.csv", "w") as f:
        f.writelines(f"{i},{i % 3}\n" for i in range(30))
    with open(tmp_path / "qlabels.csv", "w") as f:
        f.writelines(f"{i},{i % 3}\n" for i in range(5))

    out = tmp_path / "report.json"
    runs = [
        ("eval", ["eval", "--base", str(tmp_path / "base.hbc"),
                  "--base-labels", str(tmp_path / "labels.csv"),
                  "--query", str(tmp_path / "q.hbc"),
                  "--query-labels", str(tmp_path / "qlabels.csv"),
                  "--metrics", "ap,pk,pr,ph2,knn", "--out", str(out)], out),
        ("bound", ["bound", "--codes", str(tmp_path / "base.hbc"),
                   "--labels", str(tmp_path / "labels.csv"),
                   "--out", str(out)], out),
        ("verify-bound", ["verify-bound", "--seed", "6", "--trials", "20",
                          "--out", str(out)], out),
        ("centers", ["centers", "--classes", "10", "--bits", "16",
                     "--out", str(tmp_path / "c.hbc")],
         tmp_path / "c.hbc.json"),
        ("mvb-demo", ["mvb-demo", "--bits", "4", "--train-samples", "500",
                      "--eval-samples", "50", "--out", str(out)], out),
    ]
    mismatches = []
    for name, argv, report_path in runs:
        assert main(argv) == 0
        first = strip_timestamp(report_path.read_text())
        assert main(argv) == 0
        if strip_timestamp(report_path.read_text()) != first:
            mismatches.append(name)

    toy = ["train-toy", "--classes", "2", "--per-class", "16", "--dim", "4",
           "--bits", "8", "--epochs", "2", "--seed", "3",
           "--trace", str(tmp_path / "t.csv"), "--out", str(tmp_path / "m.ckpt")]
    capsys.readouterr()
    assert main(toy) == 0
    first_files = ((tmp_path / "t.csv").read_bytes(), (tmp_path / "m.ckpt").read_bytes())
    first_stdout = strip_timestamp(capsys.readouterr().out)
    assert main(toy) == 0
    second_files = ((tmp_path / "t.csv").read_bytes(), (tmp_path / "m.ckpt").read_bytes())
    second_stdout = strip_timestamp(capsys.readouterr().out)
    if first_files != second_files or first_stdout != second_stdout:
        mismatches.append("train-toy")

    ok = not mismatches
    with capsys.disabled():
        report("C10 cli-determinism", ok,
               "all 6 subcommands byte-identical on rerun modulo timestamp"
               if ok else f"mismatches: {mismatches}")
    assert ok
