import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bugloc.corpus import DatasetManifest
from bugloc.encoder import EncoderConfig, init_encoder
from bugloc.pretrain import (
    MaskingPlan,
    PretrainConfig,
    QaTarget,
    code_segment_mask,
    electra_step,
    init_head,
    make_masking_plan,
    masked_lm_loss,
    mlm_loss,
    pretrain,
    qa_targets,
    rtd_loss,
    span_loss,
)
from bugloc.tokenization import MASK, NUM_SPECIAL, PAD, encode_ids, train_vocabulary

from conftest import synthetic_dataset

SMALL = EncoderConfig(num_layers=1, num_heads=2, hidden_dim=16, ffn_dim=32, max_len=32, vocab_size=64, seed=1)


def random_seq(n_tokens, max_len=128, vocab_size=512, seed=0):
    rng = np.random.default_rng(seed)
    toks = rng.integers(NUM_SPECIAL, vocab_size, n_tokens).tolist()
    half = n_tokens // 2
    return encode_ids(toks[:half], toks[half:], max_len)


class TestMaskingPlan:
    def test_counts_for_hundred_tokens(self):
        splits = set()
        for seed in range(40):
            plan = make_masking_plan(random_seq(100, seed=seed), 0.15, seed, 512)
            assert len(plan.selected) == 15
            counts = Counter(plan.action.values())
            assert counts["mask"] == 12
            splits.add((counts["mask"], counts["random"], counts["keep"]))
        assert (12, 1, 2) in splits
        assert splits <= {(12, 1, 2), (12, 2, 1)}

    def test_replacements(self):
        plan = make_masking_plan(random_seq(100), 0.15, 3, 512)
        for pos, action in plan.action.items():
            if action == "mask":
                assert plan.replacement[pos] == MASK
            elif action == "random":
                assert NUM_SPECIAL <= plan.replacement[pos] < 512
            else:
                assert pos not in plan.replacement

    def test_only_maskable_positions(self):
        seq = random_seq(40, max_len=64)
        plan = make_masking_plan(seq, 0.15, 0, 512)
        assert all(seq.ids[p] >= NUM_SPECIAL for p in plan.selected)

    def test_too_short(self):
        with pytest.raises(ValueError):
            make_masking_plan(random_seq(6), 0.15, 0, 512)
        assert len(make_masking_plan(random_seq(7), 0.15, 0, 512).selected) == 1

    def test_deterministic(self):
        seq = random_seq(90)
        assert make_masking_plan(seq, 0.15, [1, 2], 512) == make_masking_plan(seq, 0.15, [1, 2], 512)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(7, 125), st.integers(0, 2**31))
    def test_selection_is_floor(self, n, seed):
        plan = make_masking_plan(random_seq(n, seed=seed), 0.15, seed, 512)
        assert len(plan.selected) == math.floor(0.15 * n)
        assert len(set(plan.selected)) == len(plan.selected)

    def test_action_fractions(self):
        counts, total = Counter(), 0
        for seed in range(120):
            plan = make_masking_plan(random_seq(100 + seed % 25, seed=seed), 0.15, seed, 512)
            counts.update(plan.action.values())
            total += len(plan.selected)
        assert abs(counts["mask"] / total - 0.8) < 0.03
        assert abs(counts["random"] / total - 0.1) < 0.03
        assert abs(counts["keep"] / total - 0.1) < 0.03


class TestMlmLoss:
    def test_perfect_prediction(self):
        targets = torch.tensor([7, 9, 11])
        logits = torch.full((3, 512), -1e4, dtype=torch.float64)
        logits[torch.arange(3), targets] = 1e4
        assert float(masked_lm_loss(logits, targets)) == 0.0

    def test_uniform(self):
        logits = torch.zeros((5, 512), dtype=torch.float64)
        assert abs(float(masked_lm_loss(logits, torch.tensor([6, 7, 8, 9, 10]))) - math.log(512)) < 1e-9

    def test_unselected_positions_inert(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(2, 16, 40, generator=gen, dtype=torch.float64, requires_grad=True)
        targets = torch.randint(6, 40, (2, 16), generator=gen)
        selected = torch.zeros(2, 16, dtype=torch.bool)
        selected[0, [2, 5]] = selected[1, 9] = True
        loss = masked_lm_loss(logits[selected], targets[selected])
        loss.backward()
        loss = float(loss.detach())
        assert float(logits.grad[~selected].abs().max()) == 0.0
        assert float(logits.grad[selected].abs().max()) > 0.0
        perturbed = targets.clone()
        perturbed[0, 3] = 6 if targets[0, 3] != 6 else 7
        assert float(masked_lm_loss(logits[selected], perturbed[selected]).detach()) == loss

    def test_empty_selection(self):
        with pytest.raises(ValueError):
            masked_lm_loss(torch.zeros((0, 10)), torch.zeros(0, dtype=torch.long))

    def test_through_encoder(self):
        state = init_encoder(SMALL)
        head = init_head("mlm", SMALL.vocab_size, SMALL.hidden_dim, 0)
        seqs = [random_seq(20, 32, 64, seed=s) for s in range(3)]
        plans = [make_masking_plan(s, 0.15, i, 64) for i, s in enumerate(seqs)]
        loss = mlm_loss(state, head, seqs, plans)
        # near-zero initial weights give near-uniform predictions
        assert abs(float(loss) - math.log(64)) < 0.1
        with pytest.raises(ValueError):
            mlm_loss(state, head, seqs, plans[:2])


def electra_parts(config=SMALL):
    gen = init_encoder(config)
    disc = init_encoder(replace(config, seed=config.seed + 1))
    return gen, disc, init_head("mlm", config.vocab_size, config.hidden_dim, 5), init_head("rtd", 1, config.hidden_dim, 6)


class TestElectra:
    def test_label_count_is_non_pad_length(self):
        seqs = [random_seq(n, 32, 64, seed=n) for n in (10, 20, 29)]
        plans = [make_masking_plan(s, 0.15, i, 64) for i, s in enumerate(seqs)]
        out = electra_step(*electra_parts(), seqs, plans)
        for b, seq in enumerate(seqs):
            assert int(out.attention_mask[b].sum()) == sum(t != PAD for t in seq.ids)
        assert out.labels.shape == out.corrupted.shape

    def test_only_selected_positions_replaced(self):
        seqs = [random_seq(25, 32, 64, seed=s) for s in range(4)]
        plans = [make_masking_plan(s, 0.15, i, 64) for i, s in enumerate(seqs)]
        out = electra_step(*electra_parts(), seqs, plans, seed=3)
        original = torch.tensor([s.ids for s in seqs])
        changed = (out.corrupted != original).nonzero().tolist()
        assert all(p in plans[b].selected for b, p in changed)
        assert torch.equal(out.labels, (out.corrupted != original).long())
        sampled = [int(out.corrupted[b, pos]) for b, plan in enumerate(plans) for pos in plan.selected]
        assert min(sampled) >= NUM_SPECIAL

    def test_no_selection_all_original(self):
        seqs = [random_seq(20, 32, 64)]
        out = electra_step(*electra_parts(), seqs, [MaskingPlan.empty()])
        assert int(out.labels.sum()) == 0
        assert float(out.gen_loss) == 0.0

    def test_untrained_baseline(self):
        seqs = [random_seq(28, 32, 64, seed=s) for s in range(16)]
        plans = [make_masking_plan(s, 0.15, i, 64) for i, s in enumerate(seqs)]
        out = electra_step(*electra_parts(), seqs, plans)
        assert abs(float(out.disc_loss) - math.log(2)) < 0.15
        assert float(out.combined) == pytest.approx(float(out.gen_loss) + 50 * float(out.disc_loss))

    def test_architecture_mismatch(self):
        gen, disc, gh, dh = electra_parts()
        other = init_encoder(replace(SMALL, num_layers=2))
        with pytest.raises(ValueError):
            electra_step(gen, other, gh, dh, [random_seq(20, 32, 64)], [MaskingPlan.empty()])

    @given(st.integers(0, 2**31))
    def test_every_label_counts(self, seed):
        gen = torch.Generator().manual_seed(seed % 2**31)
        logits = torch.randn(2, 12, generator=gen, dtype=torch.float64)
        labels = torch.randint(0, 2, (2, 12), generator=gen)
        mask = torch.ones(2, 12, dtype=torch.long)
        mask[1, 9:] = 0
        base = float(rtd_loss(logits, labels, mask))
        for b, p in mask.nonzero().tolist():
            flipped = labels.clone()
            flipped[b, p] = 1 - flipped[b, p]
            if logits[b, p] != 0:
                assert float(rtd_loss(logits, flipped, mask)) != base
        padded = labels.clone()
        padded[1, 10] = 1 - padded[1, 10]
        assert float(rtd_loss(logits, padded, mask)) == base


@pytest.fixture(scope="module")
def qa_vocab():
    return train_vocabulary(["a; b; c; X; bug text here foo; bar;"], 32)


class TestQaTargets:
    def test_changed_line(self, qa_vocab):
        seq, target = qa_targets("bug text", "a;\nb;\nc;", "a;\nX;\nc;", qa_vocab, 32)
        span = seq.ids[target.start:target.end + 1]
        assert qa_vocab.decode(span) == ["b", ";"]
        assert seq.sep_index < target.start <= target.end < seq.eos_index

    def test_identical_versions(self, qa_vocab):
        assert qa_targets("bug", "a;\nb;", "a;\nb;", qa_vocab, 32) is None

    def test_comment_only_change(self, qa_vocab):
        assert qa_targets("bug", "a; // foo\nb;", "a; // bar\nb;", qa_vocab, 32) is None

    def test_whitespace_only_change(self, qa_vocab):
        assert qa_targets("bug", "a;\n  b;", "a;\n\tb;", qa_vocab, 32) is None

    def test_beyond_truncation(self, qa_vocab):
        pre = "\n".join(["a;"] * 30 + ["b;"])
        post = "\n".join(["a;"] * 30 + ["c;"])
        assert qa_targets("bug text", pre, post, qa_vocab, 32) is None

    def test_first_hunk_only(self, qa_vocab):
        seq, target = qa_targets("bug", "a;\nb;\nc;\nfoo;", "a;\nX;\nc;\nbar;", qa_vocab, 32)
        assert qa_vocab.decode(seq.ids[target.start:target.end + 1]) == ["b", ";"]

    def test_pure_insertion_anchors_previous_line(self, qa_vocab):
        seq, target = qa_targets("bug", "a;\nc;", "a;\nb;\nc;", qa_vocab, 32)
        assert qa_vocab.decode(seq.ids[target.start:target.end + 1]) == ["a", ";"]


class TestSpanLoss:
    def setup_method(self):
        self.seq = encode_ids([10, 11], list(range(20, 70)), 64)
        self.code = code_segment_mask([self.seq])

    def test_one_hot(self):
        start, end = torch.full((1, 64), -1e4, dtype=torch.float64), torch.full((1, 64), -1e4, dtype=torch.float64)
        start[0, 10] = end[0, 14] = 1e4
        assert float(span_loss(start, end, self.code, [QaTarget(10, 14)])) == 0.0

    def test_uniform_over_code(self):
        assert int(self.code.sum()) == 50
        zeros = torch.zeros((1, 64), dtype=torch.float64)
        loss = float(span_loss(zeros, zeros, self.code, [QaTarget(5, 9)]))
        assert abs(loss - 2 * math.log(50)) < 1e-9

    def test_start_after_end(self):
        zeros = torch.zeros((1, 64), dtype=torch.float64)
        with pytest.raises(ValueError):
            span_loss(zeros, zeros, self.code, [QaTarget(9, 5)])

    def test_outside_code(self):
        zeros = torch.zeros((1, 64), dtype=torch.float64)
        with pytest.raises(ValueError):
            span_loss(zeros, zeros, self.code, [QaTarget(1, 5)])


@pytest.fixture(scope="module")
def corpus_and_vocab(tmp_path_factory):
    return synthetic_dataset(tmp_path_factory.mktemp("pretrain"), n_projects=2, bugs_per_project=12)


def small_config(vocab):
    return replace(SMALL, vocab_size=len(vocab), max_len=64)


class TestPretrain:
    def test_zero_epochs(self):
        with pytest.raises(ValueError):
            PretrainConfig(epochs=0)

    def test_vocab_mismatch(self, corpus_and_vocab):
        train, vocab = corpus_and_vocab
        with pytest.raises(ValueError):
            pretrain(PretrainConfig(epochs=1), replace(SMALL, vocab_size=len(vocab) + 1), train, vocab)

    @pytest.mark.parametrize("objective", ["mlm", "electra", "mlm_then_qa"])
    def test_deterministic(self, corpus_and_vocab, objective):
        train, vocab = corpus_and_vocab
        cfg = PretrainConfig(objective=objective, epochs=2, batch_size=8, seed=4)
        a, log_a = pretrain(cfg, small_config(vocab), train, vocab)
        b, log_b = pretrain(cfg, small_config(vocab), train, vocab)
        assert a.content_hash() == b.content_hash()
        assert log_a.steps == log_b.steps
        assert all(math.isfinite(loss) and loss >= 0 for *_, loss in log_a.steps)

    def test_electra_returns_discriminator(self, corpus_and_vocab):
        train, vocab = corpus_and_vocab
        state, log = pretrain(PretrainConfig(objective="electra", epochs=1, batch_size=8), small_config(vocab), train, vocab)
        assert state.config.seed == small_config(vocab).seed + 1
        assert {o for _, _, o, _ in log.steps} == {"electra"}

    def test_handover_matches_pure_mlm(self, corpus_and_vocab):
        train, vocab = corpus_and_vocab
        seen = {}
        cfg = PretrainConfig(objective="mlm_then_qa", epochs=3, batch_size=8, seed=2)
        _, log = pretrain(cfg, small_config(vocab), train, vocab, stage_hook=lambda name, s: seen.setdefault(name, s))
        pure, _ = pretrain(replace(cfg, objective="mlm", epochs=2), small_config(vocab), train, vocab)
        assert seen["mlm"].content_hash() == pure.content_hash()
        objectives = [(epoch, o) for _, epoch, o, _ in log.steps]
        assert {o for e, o in objectives if e < 2} == {"mlm"}
        assert {o for e, o in objectives if e >= 2} == {"qa"}

    def test_mlm_loss_decreases(self, tmp_path):
        train, vocab = synthetic_dataset(tmp_path, n_projects=4, bugs_per_project=65, seed=3)
        positives = [r for r in train.records if r.label == 1][:200]
        assert len(positives) == 200
        corpus = DatasetManifest("progress", "train", positives, 3)
        _, log = pretrain(PretrainConfig(epochs=10, batch_size=32, seed=3), small_config(vocab), corpus, vocab)
        means = log.epoch_means
        assert len(means) == 10
        assert means[-1] < means[0]
