"""End-to-end acceptance checks; each test logs one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance
criteria" block at the end of the output.
"""

import time
from collections import Counter

import numpy as np

from fmkr import nn
from fmkr.cli import main as cli_main
from fmkr.cli import strip_header
from fmkr.episodes import EpisodeConfig, sample_task_batch
from fmkr.estimators import BalancedMLPClassifier
from fmkr.finetune import FinetuneConfig, finetune, restructure, split_holdout
from fmkr.fleet import FleetConfig, Strategy, simulate, synthetic_endpoint_datasets
from fmkr.ingest import (AlignConfig, FlowRecord, FusedSample, SyslogRecord, align_and_fuse,
                         compute_class_weights, samples_to_arrays, split_support_query)
from fmkr.meta import TrainConfig, meta_train
from fmkr.metrics import ConfusionCounts, metrics, per_stage_report
from fmkr.stages import StageLabel as S
from fmkr.synth import SynthConfig, fused_samples

SEEDS = range(5)
LOCAL_COUNTS = {S.NT: 300, S.RN: 60, S.EF: 40, S.LM: 20, S.DE: 10}
TEST_COUNTS = {S.NT: 300, S.RN: 100, S.EF: 100, S.LM: 100, S.DE: 100}
FT_EPOCHS, LR = 200, 0.01


def _verdict(log, n, name, ok, detail):
    log(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {name}: {detail}")
    return ok


# --- 1 --------------------------------------------------------------------------

def test_criterion_01_gradient_check(acceptance_log):
    start = time.perf_counter()
    worst, eps = 0.0, 1e-4
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        model = nn.mlp_init([94, 8, 5], seed)
        X, y = rng.standard_normal((16, 94)), rng.integers(0, 5, 16)
        lam = np.ones(5)
        for c, w in compute_class_weights(Counter(y.tolist())).items():
            lam[c] = w
        _, grads = nn.backward(model, X, y, lam)
        for li, layer in enumerate(model.layers):
            for p, g in ((layer.weight, grads.weights[li]), (layer.bias, grads.biases[li])):
                flat, gflat = p.reshape(-1), g.reshape(-1)
                for j in range(flat.size):
                    old = flat[j]
                    flat[j] = old + eps
                    lp = nn.class_balanced_loss(nn.forward(model, X), y, lam)[0]
                    flat[j] = old - eps
                    lm = nn.class_balanced_loss(nn.forward(model, X), y, lam)[0]
                    flat[j] = old
                    num = (lp - lm) / (2 * eps)
                    scale = max(abs(num), abs(gflat[j]))
                    if scale > 1e-7:  # both ~0: nothing to compare
                        worst = max(worst, abs(num - gflat[j]) / scale)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 10
    assert _verdict(acceptance_log, 1, "gradient check", ok,
                    f"max rel err {worst:.2e} (<= 1e-4), {elapsed:.1f}s (< 10s)")


# --- 2 --------------------------------------------------------------------------

def test_criterion_02_class_weight_law(acceptance_log):
    counts = {S.NT: 30000, S.RN: 300, S.EF: 150, S.LM: 40, S.DE: 10}
    lam = compute_class_weights(counts, exact=True)
    floats = compute_class_weights(counts)
    ok = (lam == {S.NT: 1, S.RN: 100, S.EF: 200, S.LM: 750, S.DE: 3000}
          and all(lam[c] * counts[c] == 30000 for c in counts)
          and all(floats[c] == float(lam[c]) for c in counts))
    assert _verdict(acceptance_log, 2, "class-weight law", ok,
                    "lambda = " + ", ".join(f"{c.name}:{lam[c]}" for c in counts))


# --- 3 --------------------------------------------------------------------------

def _oracle(flows, syslogs, window):
    out = []
    for i in sorted(range(len(flows)), key=lambda i: flows[i].timestamp):
        f = flows[i]
        cands = [(abs(s.timestamp - f.timestamp), s.timestamp, j) for j, s in enumerate(syslogs)
                 if abs(s.timestamp - f.timestamp) <= window]
        if cands:
            s = syslogs[min(cands)[2]]
            out.append(FusedSample(f.timestamp, np.concatenate([f.features, s.features]),
                                   max(f.label, s.label), True, 2))
        else:
            out.append(FusedSample(f.timestamp, np.concatenate([f.features, np.zeros(2)]),
                                   f.label, False, 2))
    return out


def test_criterion_03_alignment_oracle(acceptance_log):
    rng = np.random.default_rng(2024)
    mismatches = de_in_support = 0
    for _ in range(100):
        nf, ns = rng.integers(0, 201), rng.integers(0, 201)
        span = rng.uniform(10, 600)
        flows = [FlowRecord(t, rng.standard_normal(3), S(rng.integers(5)))
                 for t in np.round(rng.uniform(0, span, nf) * 4) / 4]
        syslogs = [SyslogRecord(t, [float(j), t], S(rng.integers(5)))
                   for j, t in enumerate(np.round(rng.uniform(0, span, ns) * 4) / 4)]
        got = align_and_fuse(flows, syslogs, AlignConfig(2.0), syslog_dim=2)
        mismatches += got != _oracle(flows, syslogs, 2.0)
        de_in_support += sum(s.label is S.DE for s in split_support_query(got).support)
    ok = mismatches == 0 and de_in_support == 0
    assert _verdict(acceptance_log, 3, "alignment oracle", ok,
                    f"{100 - mismatches}/100 instances identical, {de_in_support} DE in support")


# --- 4 --------------------------------------------------------------------------

def test_criterion_04_metric_fixtures(acceptance_log):
    fixtures = [  # (tp, tn, fp, fn) -> acc, precision, recall, f1 (hand computed)
        ((40, 50, 5, 5), (0.9, 8 / 9, 8 / 9, 8 / 9)),
        ((8, 80, 2, 10), (0.88, 0.8, 4 / 9, 2 * 0.8 * (4 / 9) / (0.8 + 4 / 9))),
        ((1, 0, 3, 0), (0.25, 0.25, 1.0, 0.4)),
        ((3, 6, 1, 2), (0.75, 0.75, 0.6, 2 / 3)),
    ]
    worst = 0.0
    for counts, expected in fixtures:
        r = metrics(ConfusionCounts(*counts))
        worst = max(worst, *(abs(a - b) for a, b in zip((r.accuracy, r.precision, r.recall, r.f1), expected)))
    rng = np.random.default_rng(0)
    identity_err = 0.0
    checked = 0
    for _ in range(200):
        preds, truths = rng.integers(0, 5, 50), rng.integers(0, 5, 50)
        for row in per_stage_report(preds.tolist(), truths.tolist()):
            if not row.degenerate:
                hm = 2 / (1 / row.precision + 1 / row.recall)
                identity_err = max(identity_err, abs(hm - row.f1))
                checked += 1
    ok = worst <= 1e-12 and identity_err <= 1e-12
    assert _verdict(acceptance_log, 4, "metric fixtures", ok,
                    f"fixture err {worst:.1e}, harmonic-mean err {identity_err:.1e} over {checked} rows")


# --- 5 and 6 share the pretrained models --------------------------------------------

_PRETRAINED = {}


def _de_row_accuracy(model, X, y):
    de = np.flatnonzero(y == S.DE)
    sel = np.concatenate([de, np.flatnonzero(y != S.DE)[:len(de)]])
    return per_stage_report(nn.predict(model, X[sel]).tolist(), y[sel].tolist())[S.DE].accuracy


def _pretrain(seed):
    if seed not in _PRETRAINED:
        train = fused_samples(SynthConfig(seed=seed))
        local = fused_samples(SynthConfig(counts=LOCAL_COUNTS, seed=1000 + seed))
        ep, tr = EpisodeConfig(seed=seed), TrainConfig(alpha=LR, beta=LR, seed=seed)
        meta_model, _ = meta_train(split_support_query(train), ep, tr)
        deployed, report = finetune(meta_model, local, FinetuneConfig(epochs=FT_EPOCHS, lr=LR, seed=seed))
        # same architecture and number of SGD updates, plain unweighted loss on all the data
        steps = tr.rounds * (ep.tasks_per_batch + 1) + FT_EPOCHS * -(-report.n_train // 64)
        X, y = samples_to_arrays(train + local)
        erm = BalancedMLPClassifier(hidden_sizes=(64, 32), lr=LR, n_steps=steps, random_state=seed).fit(X, y)
        _PRETRAINED[seed] = (deployed, erm.model_)
    return _PRETRAINED[seed]


def test_criterion_05_minority_stage_gain(acceptance_log):
    start = time.perf_counter()
    gains = []
    for seed in SEEDS:
        deployed, erm = _pretrain(seed)
        Xt, yt = samples_to_arrays(fused_samples(SynthConfig(counts=TEST_COUNTS, seed=2000 + seed)))
        gains.append((_de_row_accuracy(deployed, Xt, yt), _de_row_accuracy(erm, Xt, yt)))
    elapsed = time.perf_counter() - start
    wins = sum(a - b >= 0.20 for a, b in gains)
    ok = wins >= 4 and elapsed < 120
    detail = ", ".join(f"{a:.2f} vs {b:.2f}" for a, b in gains)
    assert _verdict(acceptance_log, 5, "minority-stage gain", ok,
                    f"{wins}/5 seeds with DE-row gain >= 20pp [{detail}], {elapsed:.0f}s (< 120s)")


def test_criterion_06_finetune_gain(acceptance_log):
    shifted_counts = {S.NT: 900, S.RN: 180, S.EF: 120, S.LM: 60, S.DE: 10}
    wins, frozen_ok, stricter, rows = 0, True, 0, []
    for seed in SEEDS:
        deployed, _ = _pretrain(seed)
        local = fused_samples(SynthConfig(counts=shifted_counts, seed=3000 + seed, shift=4.0,
                                          shift_seed=77 + seed))
        cfg = FinetuneConfig(epochs=100, lr=LR, seed=seed)
        tuned, report = finetune(deployed, local, cfg)
        frozen_ok &= all(a.digest() == b for a, b in zip(deployed.layers, report.frozen_digests))
        X, y = samples_to_arrays(local)
        _, hold = split_holdout(len(X), cfg.holdout, np.random.default_rng(seed))

        def total(model):
            return per_stage_report(nn.predict(model, X[hold]).tolist(), y[hold].tolist())[-1].accuracy

        pre, post, before = total(restructure(deployed, cfg)), total(tuned), total(deployed)
        wins += post >= pre
        stricter += post >= before
        rows.append(f"{pre:.3f}->{post:.3f}")
    ok = wins >= 4 and frozen_ok
    assert _verdict(acceptance_log, 6, "fine-tuning gain", ok,
                    f"{wins}/5 seeds post >= pre held-out Total acc [{', '.join(rows)}], "
                    f"frozen hashes {'unchanged' if frozen_ok else 'CHANGED'}; "
                    f"info: post >= deployed model in {stricter}/5")


# --- 7 --------------------------------------------------------------------------

def test_criterion_07_fleet_cost_structure(acceptance_log):
    ratios = {}
    for p in (2, 5, 10):
        datasets = synthetic_endpoint_datasets(p, seed=0, flow_dim=8)
        base = nn.mlp_init([datasets[0].feature_dim, 16, 5], 0)
        for strat in Strategy:
            cfg = FleetConfig(participants=p, rounds=3, strategy=strat, local_epochs=1)
            ratios[p, strat] = simulate(cfg, base, datasets).cost_ratio
    ok = all(ratios[p, s] == (float(p) if s.polls_all else 1.0) for p, s in ratios)
    assert _verdict(acceptance_log, 7, "fleet cost structure", ok,
                    "; ".join(f"P={p}: HAF {ratios[p, Strategy.HIGHEST_ACCURACY_FIRST]!r}, "
                              f"FTA {ratios[p, Strategy.FINE_TUNE_AFTER_AGGREGATION]!r}"
                              for p in (2, 5, 10)))


# --- 8 --------------------------------------------------------------------------

def test_criterion_08_meta_training_reduction(acceptance_log):
    ds = split_support_query(fused_samples(SynthConfig(seed=8)))
    ep = EpisodeConfig(tasks_per_batch=1, seed=8)
    tr = TrainConfig(rounds=10, seed=8, class_balance=False, batch_size=4)
    got, _ = meta_train(ds, ep, tr)

    rng = np.random.default_rng(tr.seed)
    ref = nn.mlp_init([ds.feature_dim, 64, 32, 5], rng)
    task_rng = np.random.default_rng(ep.seed)
    Xq, yq = ds.arrays("query")
    perm, pos = np.zeros(0, dtype=int), 0
    for _ in range(tr.rounds):
        (task,) = sample_task_batch(ds, ep, task_rng)
        _, g = nn.backward(ref, task.support_x, task.support_y, output_rows=task.class_codes)
        ref = nn.sgd_step(ref, g, tr.alpha)
        if pos + tr.batch_size > len(perm):
            perm, pos = rng.permutation(len(Xq)), 0
        idx = perm[pos:pos + tr.batch_size]
        pos += tr.batch_size
        _, g = nn.backward(ref, Xq[idx], yq[idx])
        ref = nn.sgd_step(ref, g, tr.beta)
    ok = got == ref
    assert _verdict(acceptance_log, 8, "meta-training reduction", ok,
                    "bit-identical to plain alternating SGD over 10 rounds" if ok else "parameters differ")


# --- 9 --------------------------------------------------------------------------

def test_criterion_09_ablation_harness(acceptance_log, tmp_path):
    # enough DE samples that batch sizes up to 128 are not capped by the query pool
    cfg = tmp_path / "ablate.ini"
    cfg.write_text("[synth]\ncounts = NT:3000,RN:300,EF:150,LM:40,DE:200\n")
    args = ["--seed", "0", "--config", str(cfg), "ablate-batch", "--sizes", "32,64,128", "--rounds", "100"]
    codes = [cli_main(["--out", str(tmp_path / run), *args]) for run in ("a", "b")]
    files = {s: [(tmp_path / run / f"ablate_bs{s}.csv") for run in ("a", "b")] for s in (32, 64, 128)}
    exist = all(p.exists() for pair in files.values() for p in pair)
    same = exist and all(strip_header(a.read_text()) == strip_header(b.read_text())
                         for a, b in files.values())
    series = {s: [float(line.rsplit(",", 1)[1]) for line in strip_header(a.read_text()).splitlines()[1:]]
              for s, (a, _) in files.items()} if exist else {}
    ok = codes == [0, 0] and same and all(len(v) == 100 for v in series.values())
    finals = ", ".join(f"bs{s} final {v[-1]:.3f}" for s, v in series.items())
    assert _verdict(acceptance_log, 9, "ablation harness", ok,
                    f"3 series emitted, reruns byte-equal modulo header: {same}; {finals}")


# --- 10 -------------------------------------------------------------------------

def test_criterion_10_serialization(acceptance_log, tmp_path):
    rng = np.random.default_rng(10)
    exact = undetected = 0
    for i in range(100):
        sizes = rng.integers(1, 12, size=rng.integers(2, 5)).tolist()
        model = nn.mlp_init(sizes, int(rng.integers(2**31)), arch_tag=f"fuzz-{i}")
        for layer in model.layers:
            layer.bias[:] = rng.standard_normal(layer.bias.shape) * 10.0 ** rng.integers(-300, 300)
            layer.frozen = bool(rng.integers(2))
        path = tmp_path / f"m{i}.fmkr"
        nn.save_model(model, path)
        exact += nn.load_model(path) == model
        data = path.read_bytes()
        cuts = set(rng.integers(0, len(data), size=20).tolist()) | {0, 1, len(data) - 1}
        for cut in cuts:
            try:
                nn.model_from_bytes(data[:cut])
                undetected += 1
            except nn.IntegrityError:
                pass
    ok = exact == 100 and undetected == 0
    assert _verdict(acceptance_log, 10, "serialization", ok,
                    f"{exact}/100 bit-exact round trips, {undetected} undetected truncations")
