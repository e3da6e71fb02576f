"""Pre-training objectives: masked LM, ELECTRA replaced-token detection, MLM then QA."""

from __future__ import annotations

import csv
import difflib
import io
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import DatasetManifest
from .encoder import (
    DTYPE,
    INIT_STD,
    EncoderConfig,
    EncoderState,
    batch_tensors,
    forward_ids,
    init_encoder,
)
from .tokenization import MASK, NUM_SPECIAL, TokenSequence, Vocabulary, encode_ids, encode_pair, tokenize_text

OBJECTIVES = ("mlm", "electra", "mlm_then_qa")
# action shares in tenths, so rounding stays in integer arithmetic
MASK_TENTHS = 8
RANDOM_TENTHS = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class MaskingPlan:
    selected: tuple[int, ...]
    action: dict[int, str]
    replacement: dict[int, int]

    @classmethod
    def empty(cls) -> "MaskingPlan":
        return cls((), {}, {})


@dataclass(frozen=True)
class PretrainConfig:
    objective: str = "mlm"
    mask_rate: float = 0.15
    electra_disc_weight: float = 50.0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")
        if self.electra_disc_weight <= 0:
            raise ValueError("electra_disc_weight must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass(frozen=True)
class QaTarget:
    start: int
    end: int


@dataclass
class TrainingLog:
    steps: list[tuple[int, int, str, float]] = field(default_factory=list)

    def record(self, epoch: int, objective: str, loss: float) -> int:
        step = len(self.steps)
        self.steps.append((step, epoch, objective, loss))
        return step

    @property
    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for _, epoch, _, loss in self.steps:
            by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "epoch", "objective", "loss"])
        for step, epoch, objective, loss in self.steps:
            writer.writerow([step, epoch, objective, repr(loss)])
        return buf.getvalue()


def maskable_positions(seq: TokenSequence) -> list[int]:
    return [i for i, t in enumerate(seq.ids) if t >= NUM_SPECIAL]


def _stochastic_round(tenths: int, rng: np.random.Generator) -> int:
    whole, rest = divmod(tenths, 10)
    return whole + int(rng.random() < rest / 10)


def make_masking_plan(seq: TokenSequence, mask_rate: float, seed, vocab_size: int) -> MaskingPlan:
    """Select ``floor(rate * n)`` maskable positions; 80% MASK, 10% random, rest kept.

    The selection count is exact. The MASK and random counts are ``0.8k`` and
    ``0.1k`` rounded down or up at random with the fractional part as the
    probability, so action shares are unbiased for every ``k``.
    """
    candidates = maskable_positions(seq)
    k = math.floor(mask_rate * len(candidates))
    if k == 0:
        raise ValueError(f"no position to mask ({len(candidates)} maskable tokens at rate {mask_rate})")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(candidates), size=k, replace=False)
    positions = [candidates[i] for i in chosen]
    n_mask = _stochastic_round(MASK_TENTHS * k, rng)
    n_rand = min(k - n_mask, _stochastic_round(RANDOM_TENTHS * k, rng))
    action, replacement = {}, {}
    for j, pos in enumerate(positions):
        if j < n_mask:
            action[pos], replacement[pos] = "mask", MASK
        elif j < n_mask + n_rand:
            action[pos] = "random"
            replacement[pos] = int(rng.integers(NUM_SPECIAL, vocab_size))
        else:
            action[pos] = "keep"
    return MaskingPlan(tuple(sorted(positions)), action, replacement)


def apply_plans(ids: torch.Tensor, plans: Sequence[MaskingPlan]) -> tuple[torch.Tensor, torch.Tensor]:
    """Corrupted copy of ``ids`` and the boolean selection mask."""
    corrupted = ids.clone()
    selected = torch.zeros_like(ids, dtype=torch.bool)
    for b, plan in enumerate(plans):
        for pos in plan.selected:
            selected[b, pos] = True
        for pos, tok in plan.replacement.items():
            corrupted[b, pos] = tok
    return corrupted, selected


def init_head(name: str, out_dim: int, hidden_dim: int, seed: int) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    return {
        f"{name}.weight": torch.randn((out_dim, hidden_dim), generator=gen, dtype=DTYPE) * INIT_STD,
        f"{name}.bias": torch.zeros(out_dim, dtype=DTYPE),
    }


def _project(hidden, head, name):
    return F.linear(hidden, head[f"{name}.weight"], head[f"{name}.bias"])


def masked_lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of ``logits [n, vocab]`` against ``targets [n]``."""
    if logits.shape[0] == 0:
        raise ValueError("no selected positions in batch")
    return F.cross_entropy(logits, targets)


def mlm_loss(state: EncoderState, head: Mapping, batch: Sequence[TokenSequence], plans: Sequence[MaskingPlan]):
    """Cross-entropy on selected positions only, through a linear vocabulary projection."""
    if len(plans) != len(batch):
        raise ValueError("one masking plan per sequence required")
    ids, mask = batch_tensors(batch)
    corrupted, selected = apply_plans(ids, plans)
    hidden = forward_ids(state, corrupted, mask).hidden
    logits = _project(hidden[selected], head, "mlm")
    return masked_lm_loss(logits, ids[selected])


def rtd_loss(logits: torch.Tensor, labels: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over every non-PAD position (1 = replaced)."""
    keep = attention_mask.bool()
    return F.binary_cross_entropy_with_logits(logits[keep], labels[keep].to(logits.dtype))


@dataclass
class ElectraStep:
    gen_loss: torch.Tensor
    disc_loss: torch.Tensor
    combined: torch.Tensor
    corrupted: torch.Tensor
    labels: torch.Tensor
    attention_mask: torch.Tensor


def electra_step(
    gen: EncoderState,
    disc: EncoderState,
    gen_head: Mapping,
    disc_head: Mapping,
    batch: Sequence[TokenSequence],
    plans: Sequence[MaskingPlan],
    disc_weight: float = 50.0,
    seed: int = 0,
) -> ElectraStep:
    """Generator MLM plus discriminator replaced-token detection.

    The generator's predictions at selected positions are sampled (no gradient
    through the sample) to build the discriminator input. A sampled token equal
    to the original counts as original.
    """
    if gen.config.architecture() != disc.config.architecture():
        raise ValueError("generator and discriminator must share one architecture")
    ids, mask = batch_tensors(batch)
    masked, selected = apply_plans(ids, plans)
    corrupted = ids.clone()
    if selected.any():
        hidden = forward_ids(gen, masked, mask).hidden
        logits = _project(hidden[selected], gen_head, "mlm")
        gen_loss = masked_lm_loss(logits, ids[selected])
        probs = torch.softmax(logits.detach(), dim=-1)
        probs[:, :NUM_SPECIAL] = 0.0
        gen_torch = torch.Generator().manual_seed(int(seed))
        corrupted[selected] = torch.multinomial(probs, 1, generator=gen_torch).squeeze(-1)
    else:
        gen_loss = torch.zeros((), dtype=DTYPE)
    labels = (corrupted != ids).long()
    disc_logits = _project(forward_ids(disc, corrupted, mask).hidden, disc_head, "rtd").squeeze(-1)
    disc_loss = rtd_loss(disc_logits, labels, mask)
    return ElectraStep(gen_loss, disc_loss, gen_loss + disc_weight * disc_loss, corrupted, labels, mask)


_BLOCK_COMMENT = re.compile(r"/\*.*?\*/", re.S)
_LINE_COMMENT = re.compile(r"//[^\n]*")


def strip_comments(code: str) -> str:
    """Remove ``/* */`` and ``//`` comments, keeping line structure."""
    code = _BLOCK_COMMENT.sub(lambda m: "\n" * m.group().count("\n"), code)
    return _LINE_COMMENT.sub("", code)


def first_hunk(pre_lines: Sequence[str], post_lines: Sequence[str]) -> tuple[int, int] | None:
    """Half-open range of pre-fix lines touched by the first differing hunk."""
    a = [line.strip() for line in pre_lines]
    b = [line.strip() for line in post_lines]
    for tag, i1, i2, _, _ in difflib.SequenceMatcher(None, a, b, autojunk=False).get_opcodes():
        if tag == "equal":
            continue
        if i1 == i2:
            # pure insertion: anchor on the line it follows
            if not pre_lines:
                return None
            i1 = max(0, i1 - 1)
            i2 = i1 + 1
        return i1, i2
    return None


def qa_targets(
    bug_text: str, pre_code: str, post_code: str, vocab: Vocabulary, max_len: int
) -> tuple[TokenSequence, QaTarget] | None:
    """Bug text as question, pre-fix code as context, first diff hunk as answer."""
    pre_lines = strip_comments(pre_code).split("\n")
    post_lines = strip_comments(post_code).split("\n")
    hunk = first_hunk(pre_lines, post_lines)
    if hunk is None:
        return None
    line_tokens = [tokenize_text(line) for line in pre_lines]
    offsets = np.cumsum([0] + [len(t) for t in line_tokens])
    first, last = int(offsets[hunk[0]]), int(offsets[hunk[1]])
    code = vocab.encode_tokens(tok for toks in line_tokens for tok in toks)
    seq = encode_ids(vocab.encode_tokens(tokenize_text(bug_text)), code, max_len)
    code_start, code_stop = seq.code_span
    kept = code_stop - code_start
    if first >= last or first >= kept:
        return None
    return seq, QaTarget(code_start + first, code_start + min(last, kept) - 1)


def code_segment_mask(batch: Sequence[TokenSequence]) -> torch.Tensor:
    mask = torch.zeros((len(batch), len(batch[0])), dtype=torch.bool)
    for b, seq in enumerate(batch):
        lo, hi = seq.code_span
        mask[b, lo:hi] = True
    return mask


def span_loss(
    start_logits: torch.Tensor, end_logits: torch.Tensor, code_mask: torch.Tensor, targets: Sequence[QaTarget]
) -> torch.Tensor:
    """Start CE + end CE over code-segment positions, averaged over the batch."""
    starts = torch.tensor([t.start for t in targets])
    ends = torch.tensor([t.end for t in targets])
    rows = torch.arange(len(targets))
    if (starts > ends).any():
        raise ValueError("answer start after answer end")
    if not (code_mask[rows, starts].all() and code_mask[rows, ends].all()):
        raise ValueError("answer span outside the code segment")
    start_logits = start_logits.masked_fill(~code_mask, float("-inf"))
    end_logits = end_logits.masked_fill(~code_mask, float("-inf"))
    return F.cross_entropy(start_logits, starts) + F.cross_entropy(end_logits, ends)


def qa_loss(state: EncoderState, head: Mapping, batch: Sequence[TokenSequence], targets: Sequence[QaTarget]):
    ids, mask = batch_tensors(batch)
    logits = _project(forward_ids(state, ids, mask).hidden, head, "qa")
    return span_loss(logits[..., 0], logits[..., 1], code_segment_mask(batch), targets)


def _trainable(params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}


def _frozen(config: EncoderConfig, params: Mapping[str, torch.Tensor]) -> EncoderState:
    return EncoderState(config, {k: v.detach().clone() for k, v in params.items()})


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _plans_for(seqs, idx, cfg: PretrainConfig, epoch: int, vocab_size: int, allow_empty: bool):
    plans, keep = [], []
    for i in idx:
        try:
            plans.append(make_masking_plan(seqs[i], cfg.mask_rate, [cfg.seed, epoch, int(i)], vocab_size))
            keep.append(int(i))
        except ValueError:
            if allow_empty:
                plans.append(MaskingPlan.empty())
                keep.append(int(i))
    return plans, keep


def _check(loss: torch.Tensor, log: TrainingLog, epoch: int, objective: str) -> None:
    value = float(loss.detach())
    step = log.record(epoch, objective, value)
    if not math.isfinite(value):
        raise TrainingDivergedError(step, value)


def pretrain(
    config: PretrainConfig,
    encoder_config: EncoderConfig,
    dataset: DatasetManifest,
    vocab: Vocabulary,
    stage_hook: Callable[[str, EncoderState], None] | None = None,
) -> tuple[EncoderState, TrainingLog]:
    """Train an encoder from random init on the matching (label 1) pairs of ``dataset``.

    ``mlm_then_qa`` spends the first half of the epochs (rounded up) on MLM
    and the rest on span extraction. ELECTRA returns the discriminator.
    ``stage_hook(name, state)`` is called at the end of every stage.
    """
    if encoder_config.vocab_size != len(vocab):
        raise ValueError(f"encoder vocab_size {encoder_config.vocab_size} != vocabulary size {len(vocab)}")
    pairs = [r for r in dataset.records if r.label == 1]
    if not pairs:
        raise ValueError("dataset has no matching pairs to pre-train on")
    max_len = encoder_config.max_len
    seqs = [encode_pair(r.bug.text, r.file_content, vocab, max_len) for r in pairs]
    log = TrainingLog()
    torch.manual_seed(config.seed)

    if config.objective == "electra":
        state = _train_electra(config, encoder_config, seqs, log)
    else:
        mlm_epochs = config.epochs if config.objective == "mlm" else math.ceil(config.epochs / 2)
        state = _train_mlm(config, encoder_config, seqs, log, mlm_epochs)
        if config.objective == "mlm_then_qa":
            if stage_hook:
                stage_hook("mlm", state.clone())
            qa = [qa_targets(r.bug.text, r.file_content, r.post_content, vocab, max_len)
                  for r in pairs if r.post_content is not None]
            qa = [t for t in qa if t is not None]
            if not qa:
                raise ValueError("no QA targets could be derived from the dataset")
            state = _train_qa(config, state, qa, log, mlm_epochs)
    if stage_hook:
        stage_hook(config.objective, state.clone())
    return state, log


def _train_mlm(cfg, enc_cfg, seqs, log, epochs) -> EncoderState:
    params = _trainable(init_encoder(enc_cfg).params)
    head = _trainable(init_head("mlm", enc_cfg.vocab_size, enc_cfg.hidden_dim, enc_cfg.seed + 101))
    opt = torch.optim.Adam([*params.values(), *head.values()], lr=cfg.learning_rate)
    state = EncoderState(enc_cfg, params)
    for epoch in range(epochs):
        for idx in _batches(len(seqs), cfg.batch_size, cfg.seed, epoch):
            plans, keep = _plans_for(seqs, idx, cfg, epoch, enc_cfg.vocab_size, allow_empty=False)
            if not keep:
                continue
            loss = mlm_loss(state, head, [seqs[i] for i in keep], plans)
            opt.zero_grad()
            loss.backward()
            _check(loss, log, epoch, "mlm")
            opt.step()
    return _frozen(enc_cfg, params)


def _train_electra(cfg, enc_cfg, seqs, log) -> EncoderState:
    gen = _trainable(init_encoder(enc_cfg).params)
    disc_cfg = EncoderConfig(**{**asdict(enc_cfg), "seed": enc_cfg.seed + 1})
    disc = _trainable(init_encoder(disc_cfg).params)
    gen_head = _trainable(init_head("mlm", enc_cfg.vocab_size, enc_cfg.hidden_dim, enc_cfg.seed + 101))
    disc_head = _trainable(init_head("rtd", 1, enc_cfg.hidden_dim, enc_cfg.seed + 102))
    opt = torch.optim.Adam([*gen.values(), *disc.values(), *gen_head.values(), *disc_head.values()],
                           lr=cfg.learning_rate)
    gen_state, disc_state = EncoderState(enc_cfg, gen), EncoderState(disc_cfg, disc)
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(seqs), cfg.batch_size, cfg.seed, epoch)):
            plans, keep = _plans_for(seqs, idx, cfg, epoch, enc_cfg.vocab_size, allow_empty=True)
            out = electra_step(gen_state, disc_state, gen_head, disc_head, [seqs[i] for i in keep], plans,
                               cfg.electra_disc_weight, seed=cfg.seed * 100003 + epoch * 1009 + b)
            opt.zero_grad()
            out.combined.backward()
            _check(out.combined, log, epoch, "electra")
            opt.step()
    return _frozen(disc_cfg, disc)


def _train_qa(cfg, state, qa, log, first_epoch) -> EncoderState:
    enc_cfg = state.config
    params = _trainable(state.params)
    head = _trainable(init_head("qa", 2, enc_cfg.hidden_dim, enc_cfg.seed + 103))
    opt = torch.optim.Adam([*params.values(), *head.values()], lr=cfg.learning_rate)
    current = EncoderState(enc_cfg, params)
    for epoch in range(first_epoch, cfg.epochs):
        for idx in _batches(len(qa), cfg.batch_size, cfg.seed, epoch):
            loss = qa_loss(current, head, [qa[i][0] for i in idx], [qa[i][1] for i in idx])
            opt.zero_grad()
            loss.backward()
            _check(loss, log, epoch, "qa")
            opt.step()
    return _frozen(enc_cfg, params)
