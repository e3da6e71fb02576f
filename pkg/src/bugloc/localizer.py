"""CNN match head over frozen encoder outputs, head training and file ranking."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import BugRecord, DatasetManifest
from .encoder import (
    DTYPE,
    CheckpointError,
    EncodedBatch,
    EncoderState,
    batch_tensors,
    forward,
    forward_ids,
    read_container,
    write_container,
)
from .pretrain import TrainingDivergedError, TrainingLog
from .tokenization import TokenSequence, Vocabulary, encode_pair

NUM_CONV_LAYERS = 3


@dataclass(frozen=True)
class HeadConfig:
    conv_channels: tuple[int, int, int] = (64, 64, 64)
    kernel_size: int = 3
    hidden_units: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if len(self.conv_channels) != NUM_CONV_LAYERS:
            raise ValueError("the match head has exactly three convolutional layers")
        if min(self.conv_channels) < 1 or self.kernel_size < 1 or self.hidden_units < 1:
            raise ValueError("head dimensions must be positive")


@dataclass
class HeadState:
    config: HeadConfig
    input_dim: int
    params: dict[str, torch.Tensor]


@dataclass
class RankedResult:
    bug_id: str
    ranking: list[tuple[str, float]]
    relevant: set[str] = field(default_factory=set)
    project_id: str = ""

    def __post_init__(self):
        paths = [p for p, _ in self.ranking]
        if len(set(paths)) != len(paths):
            raise ValueError("a ranking lists each candidate once")
        missing = set(self.relevant) - set(paths)
        if missing:
            raise ValueError(f"relevant files missing from ranking: {sorted(missing)}")

    def to_json(self) -> dict:
        return {
            "bug_id": self.bug_id,
            "project_id": self.project_id,
            "ranking": [{"path": p, "score": s} for p, s in self.ranking],
            "relevant": sorted(self.relevant),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RankedResult":
        return cls(
            bug_id=obj["bug_id"],
            ranking=[(r["path"], float(r["score"])) for r in obj["ranking"]],
            relevant=set(obj["relevant"]),
            project_id=obj.get("project_id", ""),
        )


def init_head(config: HeadConfig, input_dim: int) -> HeadState:
    gen = torch.Generator().manual_seed(config.seed)
    params = {}
    channels = (input_dim, *config.conv_channels)
    for i in range(NUM_CONV_LAYERS):
        fan_in = channels[i] * config.kernel_size
        shape = (channels[i + 1], channels[i], config.kernel_size)
        params[f"conv{i}.weight"] = torch.randn(shape, generator=gen, dtype=DTYPE) * math.sqrt(2.0 / fan_in)
        params[f"conv{i}.bias"] = torch.zeros(channels[i + 1], dtype=DTYPE)
    dims = (config.conv_channels[-1], config.hidden_units)
    params["mlp.hidden.weight"] = torch.randn(dims[::-1], generator=gen, dtype=DTYPE) * math.sqrt(2.0 / dims[0])
    params["mlp.hidden.bias"] = torch.zeros(config.hidden_units, dtype=DTYPE)
    params["mlp.out.weight"] = torch.randn((1, config.hidden_units), generator=gen, dtype=DTYPE) / math.sqrt(dims[1])
    params["mlp.out.bias"] = torch.zeros(1, dtype=DTYPE)
    return HeadState(config, input_dim, params)


def head_logits(head: HeadState, hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Three conv+ReLU stages over the token axis, masked global max-pool, MLP."""
    if hidden.shape[-1] != head.input_dim:
        raise ValueError(f"head expects hidden size {head.input_dim}, got {hidden.shape[-1]}")
    p = head.params
    keep = mask[:, None, :].to(hidden.dtype)
    x = hidden.transpose(1, 2)
    for i in range(NUM_CONV_LAYERS):
        x = F.relu(F.conv1d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding="same")) * keep
    pooled = x.amax(dim=-1)
    z = F.relu(F.linear(pooled, p["mlp.hidden.weight"], p["mlp.hidden.bias"]))
    return F.linear(z, p["mlp.out.weight"], p["mlp.out.bias"]).squeeze(-1)


def head_forward(head: HeadState, encoded: EncodedBatch) -> torch.Tensor:
    """Match probability per pair, strictly inside (0, 1) up to float rounding."""
    return torch.sigmoid(head_logits(head, encoded.hidden, encoded.attention_mask))


def save_head(head: HeadState, path) -> None:
    header = {"kind": "head", "config": asdict(head.config), "input_dim": head.input_dim}
    write_container(path, header, head.params)


def load_head(path) -> HeadState:
    header, tensors = read_container(path)
    if header.get("kind") != "head":
        raise CheckpointError(f"not a head checkpoint (kind={header.get('kind')!r})")
    config = HeadConfig(**header["config"])
    expected = init_head(config, header["input_dim"]).params
    for name, ref in expected.items():
        if name not in tensors or tensors[name].shape != ref.shape:
            raise CheckpointError(f"tensor {name!r} missing or mis-shaped")
    return HeadState(config, header["input_dim"], tensors)


def encode_examples(encoder: EncoderState, seqs: Sequence[TokenSequence], batch_size: int = 64) -> torch.Tensor:
    """Frozen-encoder hidden matrices for ``seqs``, computed without gradients."""
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunks.append(forward(encoder, seqs[lo:lo + batch_size]).hidden)
    return torch.cat(chunks)


def train_head(
    encoder: EncoderState,
    head_config: HeadConfig,
    examples: DatasetManifest,
    vocab: Vocabulary,
    epochs: int = 10,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> tuple[HeadState, TrainingLog]:
    """Binary cross-entropy on match labels with the encoder held fixed."""
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    labels = torch.tensor([r.label for r in examples.records], dtype=DTYPE)
    if len(set(labels.tolist())) < 2:
        raise ValueError("head training needs both matching and non-matching pairs")
    max_len = encoder.config.max_len
    seqs = [encode_pair(r.bug.text, r.file_content, vocab, max_len) for r in examples.records]
    # the encoder never sees an optimizer, so its features are computed once
    hidden = encode_examples(encoder, seqs)
    _, mask = batch_tensors(seqs)

    head = init_head(head_config, encoder.config.hidden_dim)
    params = {k: v.clone().requires_grad_(True) for k, v in head.params.items()}
    trainable = HeadState(head_config, head.input_dim, params)
    opt = torch.optim.Adam(params.values(), lr=learning_rate)
    log = TrainingLog()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(seqs))
        for lo in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[lo:lo + batch_size])
            logits = head_logits(trainable, hidden[idx], mask[idx])
            loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            value = float(loss.detach())
            step = log.record(epoch, "match", value)
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.step()
    return HeadState(head_config, head.input_dim, {k: v.detach().clone() for k, v in params.items()}), log


def score_pairs(encoder: EncoderState, head: HeadState, seqs: Sequence[TokenSequence], batch_size: int = 64):
    scores = []
    with torch.no_grad():
        for lo in range(0, len(seqs), batch_size):
            ids, mask = batch_tensors(seqs[lo:lo + batch_size])
            scores.append(head_forward(head, forward_ids(encoder, ids, mask)))
    return torch.cat(scores).tolist()


def rank_files(
    encoder: EncoderState,
    head: HeadState,
    bug: BugRecord,
    candidates: Sequence[tuple[str, str]],
    vocab: Vocabulary,
    relevant: set[str] | None = None,
) -> RankedResult:
    """Score every candidate file against ``bug``; sort by score, then path."""
    if not candidates:
        raise ValueError("no candidate files to rank")
    seqs = [encode_pair(bug.text, content, vocab, encoder.config.max_len) for _, content in candidates]
    scores = score_pairs(encoder, head, seqs)
    ranking = sorted(zip((p for p, _ in candidates), scores), key=lambda ps: (-ps[1], ps[0]))
    return RankedResult(bug.bug_id, ranking, set(relevant or ()), bug.project_id)


def dump_results(results: Sequence[RankedResult]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in results)


def load_results(text: str) -> list[RankedResult]:
    return [RankedResult.from_json(json.loads(line)) for line in text.split("\n") if line.strip()]
