"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import itertools
import json
import math
import random
import time
from collections import Counter
from dataclasses import replace

import mpmath
import numpy as np
import pytest
import torch
import torch.nn.functional as F

from bugloc import corpus
from bugloc.encoder import (
    EncoderConfig,
    extend_positions,
    forward_ids,
    full_attention,
    init_encoder,
    lsh_attention,
)
from bugloc.evaluation import (
    bonferroni,
    kl_divergence,
    mann_whitney_u,
    mean_average_precision,
    mrr,
    random_rank_baseline,
)
from bugloc.localizer import HeadConfig, RankedResult, train_head
from bugloc.pipeline import ExperimentManifest, Runner, read_jsonl, run
from bugloc.pretrain import electra_step, init_head, make_masking_plan, masked_lm_loss, rtd_loss
from bugloc.synthetic import FixtureConfig, generate_fixture
from bugloc.tokenization import NUM_SPECIAL, PAD, encode_ids, token_frequency

from conftest import ACCEPTANCE


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def random_tokens(n, max_len, vocab_size, rng):
    toks = rng.integers(NUM_SPECIAL, vocab_size, n).tolist()
    return encode_ids(toks[: n // 2], toks[n // 2:], max_len)


# 1 -------------------------------------------------------------------------

def _oracle_rr(ranking, relevant):
    for k, (path, _) in enumerate(ranking, start=1):
        if path in relevant:
            return 1.0 / k


def _oracle_ap(ranking, relevant):
    hits, total = 0, 0.0
    for k, (path, _) in enumerate(ranking, start=1):
        if path in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def test_metric_oracle_equivalence():
    start = time.perf_counter()
    rnd = random.Random(2024)
    results = []
    for b in range(100):
        n = rnd.randint(1, 40)
        paths = [f"src/F{i}.java" for i in range(n)]
        rnd.shuffle(paths)
        ranking = [(p, float(n - i)) for i, p in enumerate(paths)]
        relevant = set(rnd.sample(paths, rnd.randint(1, n)))
        results.append(RankedResult(f"B-{b}", ranking, relevant, "P"))
    d_mrr = abs(mrr(results) - sum(_oracle_rr(r.ranking, r.relevant) for r in results) / 100)
    d_map = abs(mean_average_precision(results) - sum(_oracle_ap(r.ranking, r.relevant) for r in results) / 100)
    elapsed = time.perf_counter() - start
    record(1, d_mrr < 1e-12 and d_map < 1e-12 and elapsed < 5,
           f"|dMRR|={d_mrr:.1e} |dMAP|={d_map:.1e} in {elapsed:.2f}s")


# 2 -------------------------------------------------------------------------

def test_masking_statistics():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    actions, maskable, floors_ok = Counter(), 0, True
    seed = 0
    while maskable < 12_000:
        n = int(rng.integers(7, 126))
        seq = random_tokens(n, 128, 512, rng)
        plan = make_masking_plan(seq, 0.15, seed, 512)
        floors_ok &= len(plan.selected) == math.floor(0.15 * n)
        actions.update(plan.action.values())
        maskable += n
        seed += 1
    selected = sum(actions.values())
    fractions = {a: actions[a] / selected for a in ("mask", "random", "keep")}
    within = all(abs(fractions[a] - t) <= 0.03 for a, t in (("mask", 0.8), ("random", 0.1), ("keep", 0.1)))
    elapsed = time.perf_counter() - start
    shown = " ".join(f"{a}={f:.4f}" for a, f in fractions.items())
    record(2, floors_ok and within and elapsed < 10,
           f"{maskable} maskable tokens, floor selection {'exact' if floors_ok else 'VIOLATED'}, {shown}, {elapsed:.2f}s")


# 3 -------------------------------------------------------------------------

def test_objective_scope():
    config = EncoderConfig(num_layers=1, num_heads=2, hidden_dim=16, ffn_dim=32, max_len=32, vocab_size=64, seed=2)
    rng = np.random.default_rng(3)
    seqs = [random_tokens(n, 32, 64, rng) for n in (9, 17, 25, 30)]
    plans = [make_masking_plan(s, 0.15, i, 64) for i, s in enumerate(seqs)]
    ids = torch.tensor([s.ids for s in seqs])
    mask = torch.tensor([s.attention_mask for s in seqs])

    state = init_encoder(config)
    head = init_head("mlm", 64, 16, 0)
    corrupted = ids.clone()
    selected = torch.zeros_like(ids, dtype=torch.bool)
    for b, plan in enumerate(plans):
        for pos in plan.selected:
            selected[b, pos] = True
        for pos, tok in plan.replacement.items():
            corrupted[b, pos] = tok
    hidden = forward_ids(state, corrupted, mask).hidden.detach().requires_grad_(True)
    logits = F.linear(hidden, head["mlm.weight"], head["mlm.bias"])
    logits.retain_grad()
    masked_lm_loss(logits[selected], ids[selected]).backward()
    mlm_zero = float(logits.grad[~selected].abs().max()) == 0.0 and float(hidden.grad[~selected].abs().max()) == 0.0
    mlm_live = float(logits.grad[selected].abs().max()) > 0.0

    gen = init_encoder(config)
    disc = init_encoder(replace(config, seed=config.seed + 1))
    out = electra_step(gen, disc, init_head("mlm", 64, 16, 5), init_head("rtd", 1, 16, 6), seqs, plans)
    counts = [int(out.attention_mask[b].sum()) for b in range(len(seqs))]
    lengths = [sum(t != PAD for t in s.ids) for s in seqs]
    # every non-PAD position carries a label that moves the loss
    logits_rtd = torch.randn(out.labels.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    base = float(rtd_loss(logits_rtd, out.labels, out.attention_mask))
    live = 0
    for b, p in out.attention_mask.nonzero().tolist():
        flipped = out.labels.clone()
        flipped[b, p] = 1 - flipped[b, p]
        live += float(rtd_loss(logits_rtd, flipped, out.attention_mask)) != base
    rtd_all = counts == lengths and live == sum(lengths)
    record(3, mlm_zero and mlm_live and rtd_all,
           f"MLM grad zero off-selection={mlm_zero}, RTD labelled positions {live}/{sum(lengths)} non-PAD")


# 4 -------------------------------------------------------------------------

def test_gradient_correctness():
    start = time.perf_counter()
    config = EncoderConfig(num_layers=1, num_heads=2, hidden_dim=8, ffn_dim=16, max_len=16, vocab_size=30, seed=4)
    state = init_encoder(config)
    gen = torch.Generator().manual_seed(1)
    for tensor in state.params.values():
        tensor.add_(torch.randn(tensor.shape, generator=gen, dtype=tensor.dtype) * 0.3)
    rng = np.random.default_rng(5)
    seqs = [random_tokens(n, 16, 30, rng) for n in (8, 13)]
    ids = torch.tensor([s.ids for s in seqs])
    mask = torch.tensor([s.attention_mask for s in seqs])
    target = torch.randn(2, 16, 8, generator=gen, dtype=torch.float64)

    def loss_fn(s):
        return ((forward_ids(s, ids, mask).hidden - target) ** 2 * mask[..., None]).sum()

    live = {k: v.clone().requires_grad_(True) for k, v in state.params.items()}
    loss_fn(replace(state, params=live)).backward()
    # the key bias has an exactly zero gradient (it cancels in softmax), so the
    # denominator is floored at a fraction of the largest gradient in the model
    floor = 1e-3 * max(float(t.grad.abs().max()) for t in live.values())
    worst, eps = 0.0, 1e-6
    for name, tensor in state.params.items():
        flat = tensor.view(-1)
        numeric = torch.empty_like(flat)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + eps
            up = float(loss_fn(state))
            flat[i] = old - eps
            down = float(loss_fn(state))
            flat[i] = old
            numeric[i] = (up - down) / (2 * eps)
        analytic = live[name].grad.view(-1)
        scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor)
        worst = max(worst, float((analytic - numeric).abs().max()) / scale)
    elapsed = time.perf_counter() - start
    record(4, worst < 1e-4 and elapsed < 60, f"max relative error {worst:.2e} in {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------

def test_attention_equivalence():
    worst = 0.0
    for i in range(50):
        gen = torch.Generator().manual_seed(100 + i)
        length = int(torch.randint(4, 33, (1,), generator=gen))
        q, v = (torch.randn(2, 2, length, 8, generator=gen, dtype=torch.float64) for _ in range(2))
        k = F.normalize(q, dim=-1)
        mask = torch.ones(2, length, dtype=torch.long)
        mask[1, int(torch.randint(1, length + 1, (1,), generator=gen)):] = 0
        lsh = lsh_attention(q, k, v, mask, num_hashes=1, bucket_size=length, seed=i)
        full = full_attention(q, k, v, mask)
        keep = mask.bool()[:, None, :, None].expand_as(full)
        worst = max(worst, float((lsh[keep] - full[keep]).abs().max()))
    record(5, worst < 1e-5, f"max |LSH - full| over 50 instances = {worst:.1e}")


# 6 -------------------------------------------------------------------------

def test_extension_invariance():
    state = init_encoder(EncoderConfig(max_len=64, vocab_size=100, seed=6))
    longer = extend_positions(state, 256)
    old, new = state.params["embeddings.position"], longer.params["embeddings.position"]
    rows_ok = all(torch.equal(new[i], old[i % 64]) for i in range(256))
    rng = np.random.default_rng(6)
    worst = 0.0
    for n in (5, 30, 61):
        seq = random_tokens(n, 64, 100, rng)
        ids = torch.tensor([seq.ids])
        mask = torch.tensor([seq.attention_mask])
        long_ids = torch.full((1, 256), PAD, dtype=torch.long)
        long_ids[:, :64] = ids
        a = forward_ids(state, ids, mask).hidden[0, : n + 3]
        b = forward_ids(longer, long_ids, (long_ids != PAD).long()).hidden[0, : n + 3]
        worst = max(worst, float((a - b).abs().max()))
    record(6, rows_ok and worst < 1e-6, f"rows bitwise={rows_ok}, max output change {worst:.1e}")


# 7 -------------------------------------------------------------------------

def test_frozen_encoder_contract(small_dataset):
    train, vocab = small_dataset
    encoder = init_encoder(EncoderConfig(num_layers=1, num_heads=2, hidden_dim=16, ffn_dim=32, max_len=64,
                                         vocab_size=len(vocab), seed=7))
    before = encoder.content_hash()
    train_head(encoder, HeadConfig(conv_channels=(8, 8, 8), hidden_units=8), train, vocab, epochs=2, batch_size=16)
    after = encoder.content_hash()
    record(7, before == after, f"encoder hash {before[:12]} before, {after[:12]} after")


# 8 -------------------------------------------------------------------------

PLANTED_POOL = 20


@pytest.mark.slow
def test_planted_signal_end_to_end(tmp_path):
    start = time.perf_counter()
    fixture = FixtureConfig(n_projects=60, shared_fraction=0.3, seed=7)
    generate_fixture(tmp_path / "exports", fixture)
    manifest = ExperimentManifest.from_dict({
        "experiment_id": "planted",
        "seed": 7,
        "artifact_dir": "artifacts",
        "stages": {
            "mine": {"exports": str(tmp_path / "exports")},
            "build": {"pool_size": PLANTED_POOL},
            "vocab": {"size": 512},
            "pretrain": {"objective": "electra", "epochs": 10, "batch_size": 32, "encoder": {"num_layers": 2}},
            "train_head": {"epochs": 10, "batch_size": 32},
        },
    }, tmp_path)
    run(manifest)
    elapsed = time.perf_counter() - start
    runner = Runner(manifest)
    report = json.loads(runner.upstream("evaluate", "acceptance", "metrics").read_text())
    pools = read_jsonl(runner.upstream("build", "acceptance", "pools"))
    baseline = float(np.mean([random_rank_baseline(len(p["candidates"]), len(p["relevant"])) for p in pools]))
    got = report["overall"]["mrr"]
    record(8, got >= 2 * baseline and elapsed < 20 * 60,
           f"test MRR {got:.4f} vs 2x random baseline {2 * baseline:.4f} "
           f"({report['overall']['n_bugs']} bugs), {elapsed / 60:.1f} min")


# 9 -------------------------------------------------------------------------

def _enumerated_p(a, b):
    pooled = a + b
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    ranks = [0] * len(pooled)
    for r, i in enumerate(order, start=1):
        ranks[i] = r
    mean = len(a) * (len(pooled) + 1) / 2
    observed = abs(sum(ranks[: len(a)]) - mean)
    combos = list(itertools.combinations(ranks, len(a)))
    return sum(abs(sum(c) - mean) >= observed for c in combos) / len(combos)


def test_statistics():
    result = mann_whitney_u([1, 2, 3], [4, 5, 6])
    oracle = _enumerated_p([1, 2, 3], [4, 5, 6])
    t3 = int(bonferroni(0.05, 3) * 1000) / 1000
    t6 = int(bonferroni(0.05, 6) * 1000) / 1000
    ok = result.method == "exact" and result.p_value == oracle == 0.1 and (t3, t6) == (0.016, 0.008)
    record(9, ok, f"exact p={result.p_value} (enumeration {oracle}), thresholds {t3} and {t6}")


# 10 ------------------------------------------------------------------------

def _overlap(p, q):
    return sum(min(p.counts[t] / p.total, q.counts.get(t, 0) / q.total) for t in p.counts)


def test_divergence(tmp_path):
    same = token_frequency(["alpha beta beta gamma"])
    zero = kl_divergence(same, same)[0] == 0.0

    witness, _ = kl_divergence(token_frequency(["a b"]), token_frequency(["a b b b"]))
    mpmath.mp.dps = 40
    exact = mpmath.mpf(1) / 2 * mpmath.log(mpmath.mpf(1) / 2 / (mpmath.mpf(1) / 4)) \
        + mpmath.mpf(1) / 2 * mpmath.log(mpmath.mpf(1) / 2 / (mpmath.mpf(3) / 4))
    witness_err = abs(witness - float(exact))

    projects = generate_fixture(tmp_path, FixtureConfig(n_projects=6, seed=10))
    code = {}
    for project in projects:
        snaps = corpus.parse_snapshot_export((tmp_path / project / "snapshots.jsonl").read_text(encoding="utf-8"))
        first = next(iter(snaps.values()))
        code[project] = token_frequency([content for _, content in first])
    near = (projects[0], projects[1])
    far = (projects[0], projects[-1])
    ov_near, ov_far = _overlap(*(code[p] for p in near)), _overlap(*(code[p] for p in far))
    kl_near, kl_far = kl_divergence(*(code[p] for p in near))[0], kl_divergence(*(code[p] for p in far))[0]
    directional = ov_near > ov_far and kl_near < kl_far
    record(10, zero and witness_err < 1e-9 and directional,
           f"KL(p||p)=0 {zero}, witness error {witness_err:.1e}, "
           f"overlap {ov_near:.3f}>{ov_far:.3f} gives KL {kl_near:.4f}<{kl_far:.4f}")


# 11 ------------------------------------------------------------------------

def test_determinism(tmp_path):
    exports = tmp_path / "exports"
    generate_fixture(exports, FixtureConfig(n_projects=3, bugs_per_project=12, seed=4))
    encoder = {"num_layers": 1, "num_heads": 2, "hidden_dim": 16, "ffn_dim": 32, "max_len": 64}
    reports = []
    for name in ("first", "second"):
        manifest = ExperimentManifest.from_dict({
            "experiment_id": "fixture",
            "seed": 3,
            "artifact_dir": name,
            "stages": {
                "mine": {"exports": str(exports)},
                "build": {"negatives_per_positive": 2, "pool_size": 8},
                "vocab": {"size": 128},
                "pretrain": {"objective": "electra", "epochs": 1, "batch_size": 16, "encoder": encoder},
                "train_head": {"epochs": 1, "batch_size": 16,
                               "head": {"conv_channels": [8, 8, 8], "hidden_units": 8}},
            },
        }, tmp_path)
        run(manifest)
        reports.append(Runner(manifest).upstream("evaluate", "acceptance", "metrics").read_bytes())
    record(11, reports[0] == reports[1], f"metric reports byte-identical ({len(reports[0])} bytes)")
