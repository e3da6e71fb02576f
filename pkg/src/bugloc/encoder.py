"""Transformer encoders with full or LSH attention over a named parameter map.

The encoder is written functionally: an :class:`EncoderState` is a config plus
an ordered ``dict`` of float64 tensors, and :func:`forward` applies pre-norm
transformer blocks to a batch of :class:`~bugloc.tokenization.TokenSequence`.
Keeping parameters in a plain mapping makes checkpointing, position-table
surgery and finite-difference checks straightforward.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields, replace
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tokenization import MIN_SEQUENCE_LENGTH, TokenSequence

DTYPE = torch.float64
INIT_STD = 0.02
LN_EPS = 1e-12
# finite stand-in for -inf inside LSH chunks, where a row can be fully masked
_LSH_MASK_VALUE = -1e30

# score-matrix elements materialized by attention, keyed by attention kind
attention_cost = Counter()


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    attention_kind: str = "full"
    num_layers: int = 2
    num_heads: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    max_len: int = 128
    vocab_size: int = 512
    lsh_num_hashes: int = 2
    lsh_bucket_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.attention_kind not in ("full", "lsh"):
            raise ValueError(f"unknown attention kind {self.attention_kind!r}")
        for name in ("num_layers", "num_heads", "hidden_dim", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.max_len < MIN_SEQUENCE_LENGTH:
            raise ValueError(f"max_len must be at least {MIN_SEQUENCE_LENGTH}")
        if self.attention_kind == "lsh":
            if self.lsh_num_hashes < 1 or self.lsh_bucket_size < 1:
                raise ValueError("LSH hash rounds and bucket size must be positive")
            if self.max_len % self.lsh_bucket_size:
                raise ValueError("lsh_bucket_size must divide max_len")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def architecture(self) -> dict:
        """Every field except the seed."""
        arch = asdict(self)
        del arch["seed"]
        return arch


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, torch.Tensor]

    def parameters(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, tensor in self.params.items():
            h.update(name.encode())
            h.update(tensor.detach().contiguous().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def clone(self) -> "EncoderState":
        return EncoderState(self.config, {k: v.detach().clone() for k, v in self.params.items()})


@dataclass
class EncodedBatch:
    hidden: torch.Tensor
    pooled: torch.Tensor
    attention_mask: torch.Tensor


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden_dim, config.ffn_dim
    shapes = {
        "embeddings.token": (config.vocab_size, h),
        "embeddings.position": (config.max_len, h),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.weight"] = (h,)
        shapes[p + "ln1.bias"] = (h,)
        if config.attention_kind == "full":
            names = ("query", "key", "value", "output")
        else:
            # shared query/key projection
            names = ("query", "value", "output")
        for name in names:
            shapes[p + f"attn.{name}.weight"] = (h, h)
            shapes[p + f"attn.{name}.bias"] = (h,)
        shapes[p + "ln2.weight"] = (h,)
        shapes[p + "ln2.bias"] = (h,)
        shapes[p + "ffn.in.weight"] = (f, h)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (h, f)
        shapes[p + "ffn.out.bias"] = (h,)
    shapes["final_ln.weight"] = (h,)
    shapes["final_ln.bias"] = (h,)
    return shapes


def init_encoder(config: EncoderConfig) -> EncoderState:
    """Random N(0, 0.02) weights, zero biases, unit layer-norm gains."""
    gen = torch.Generator().manual_seed(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = torch.zeros(shape, dtype=DTYPE)
        elif "ln" in name.split(".")[-2]:
            params[name] = torch.ones(shape, dtype=DTYPE)
        else:
            params[name] = torch.randn(shape, generator=gen, dtype=DTYPE) * INIT_STD
    return EncoderState(config, params)


def full_attention(q, k, v, mask, return_weights=False):
    """Scaled dot-product attention; PAD keys (``mask == 0``) get a -inf bias.

    ``q, k, v`` are ``[batch, heads, len, d]`` and ``mask`` is ``[batch, len]``.
    """
    d = q.shape[-1]
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    attention_cost["full"] += scores.numel()
    bias = torch.zeros(mask.shape, dtype=scores.dtype).masked_fill(mask == 0, float("-inf"))
    weights = torch.softmax(scores + bias[:, None, None, :], dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def _hash_buckets(k, n_buckets, gen):
    """Random-rotation hashing: bucket = argmax over [kR, -kR]."""
    batch, heads, length, d = k.shape
    if n_buckets == 1:
        return torch.zeros((batch, heads, length), dtype=torch.long)
    if n_buckets % 2 == 0:
        rot = torch.randn((heads, d, n_buckets // 2), generator=gen, dtype=k.dtype)
        proj = torch.einsum("bhld,hdr->bhlr", k, rot)
        proj = torch.cat([proj, -proj], dim=-1)
    else:
        rot = torch.randn((heads, d, n_buckets), generator=gen, dtype=k.dtype)
        proj = torch.einsum("bhld,hdr->bhlr", k, rot)
    return proj.argmax(dim=-1)


def lsh_attention(q, k, v, mask, num_hashes, bucket_size, seed=0):
    """Reformer-style LSH attention with sorted-bucket chunking.

    Positions are hashed by their key vector (shared-QK: a position's query
    lives in its key's bucket), stably sorted by bucket, and cut into chunks of
    ``bucket_size``. Each chunk attends to itself and the preceding chunk,
    restricted to keys of the same bucket. PAD positions are hashed into an
    extra trailing bucket so they never perturb the layout of real tokens, and
    PAD keys are always masked.
    Hash rounds are combined with weights ``softmax(logsumexp_r)``.
    """
    batch, heads, length, d = q.shape
    if bucket_size < 1 or length % bucket_size:
        raise ValueError(f"bucket_size {bucket_size} must divide sequence length {length}")
    if num_hashes < 1:
        raise ValueError("num_hashes must be positive")
    n_chunks = length // bucket_size
    n_buckets = n_chunks
    gen = torch.Generator().manual_seed(seed)
    pad = (mask == 0)[:, None, :].expand(batch, heads, length)
    positions = torch.arange(length)
    scale = 1.0 / math.sqrt(d)

    outs, lses = [], []
    for _ in range(num_hashes):
        buckets = _hash_buckets(k, n_buckets, gen).masked_fill(pad, n_buckets)
        order = torch.argsort(buckets * length + positions, dim=-1)
        undo = torch.argsort(order, dim=-1)

        def gather(t, idx=order):
            return t.gather(2, idx[..., None].expand(-1, -1, -1, t.shape[-1]))

        sq, sk, sv = gather(q), gather(k), gather(v)
        sb = buckets.gather(2, order)
        skeep = (~pad).gather(2, order)

        shape = (batch, heads, n_chunks, bucket_size)
        cq = sq.reshape(*shape, d)
        ck, cv = sk.reshape(*shape, d), sv.reshape(*shape, d)
        cb, ckeep = sb.reshape(shape), skeep.reshape(shape)
        qb, qpad = cb, ~ckeep
        if n_chunks > 1:
            ck = torch.cat([ck, ck.roll(1, dims=2)], dim=3)
            cv = torch.cat([cv, cv.roll(1, dims=2)], dim=3)
            cb = torch.cat([cb, cb.roll(1, dims=2)], dim=3)
            ckeep = torch.cat([ckeep, ckeep.roll(1, dims=2)], dim=3)

        scores = cq @ ck.transpose(-1, -2) * scale
        attention_cost["lsh"] += scores.numel()
        # PAD queries ignore buckets; their outputs are never read by real tokens
        same = (qb[..., :, None] == cb[..., None, :]) | qpad[..., :, None]
        allowed = ckeep[..., None, :] & same
        scores = scores.masked_fill(~allowed, _LSH_MASK_VALUE)
        lse = torch.logsumexp(scores, dim=-1, keepdim=True)
        out = torch.exp(scores - lse) @ cv

        out = out.reshape(batch, heads, length, d)
        lse = lse.reshape(batch, heads, length, 1)
        outs.append(gather(out, undo))
        lses.append(gather(lse, undo))

    if num_hashes == 1:
        return outs[0]
    weights = torch.softmax(torch.stack(lses), dim=0)
    return (torch.stack(outs) * weights).sum(dim=0)


def _layer_norm(x, params, prefix):
    return F.layer_norm(x, x.shape[-1:], params[prefix + ".weight"], params[prefix + ".bias"], LN_EPS)


def _linear(x, params, prefix):
    return F.linear(x, params[prefix + ".weight"], params[prefix + ".bias"])


def _split_heads(x, heads):
    b, n, h = x.shape
    return x.view(b, n, heads, h // heads).transpose(1, 2)


def _attention_block(x, mask, params, prefix, config, layer):
    heads = config.num_heads
    q = _split_heads(_linear(x, params, prefix + "query"), heads)
    v = _split_heads(_linear(x, params, prefix + "value"), heads)
    if config.attention_kind == "full":
        k = _split_heads(_linear(x, params, prefix + "key"), heads)
        ctx = full_attention(q, k, v, mask)
    else:
        k = F.normalize(q, dim=-1)
        ctx = lsh_attention(
            q, k, v, mask, config.lsh_num_hashes, config.lsh_bucket_size, seed=config.seed * 1000 + layer
        )
    b, _, n, _ = ctx.shape
    ctx = ctx.transpose(1, 2).reshape(b, n, config.hidden_dim)
    return _linear(ctx, params, prefix + "output")


def batch_tensors(batch: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([s.ids for s in batch], dtype=torch.long)
    mask = torch.tensor([s.attention_mask for s in batch], dtype=torch.long)
    return ids, mask


def forward_ids(state: EncoderState, ids: torch.Tensor, mask: torch.Tensor) -> EncodedBatch:
    config, p = state.config, state.params
    if ids.shape[1] != config.max_len:
        raise ValueError(f"sequence length {ids.shape[1]} does not match encoder max_len {config.max_len}")
    positions = torch.arange(config.max_len)
    x = p["embeddings.token"][ids] + p["embeddings.position"][positions][None]
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        x = x + _attention_block(_layer_norm(x, p, prefix + "ln1"), mask, p, prefix + "attn.", config, i)
        hidden = F.gelu(_linear(_layer_norm(x, p, prefix + "ln2"), p, prefix + "ffn.in"))
        x = x + _linear(hidden, p, prefix + "ffn.out")
    x = _layer_norm(x, p, "final_ln")
    return EncodedBatch(hidden=x, pooled=x[:, 0], attention_mask=mask)


def forward(state: EncoderState, batch: Sequence[TokenSequence]) -> EncodedBatch:
    for seq in batch:
        if len(seq) != state.config.max_len:
            raise ValueError(f"sequence length {len(seq)} does not match encoder max_len {state.config.max_len}")
    ids, mask = batch_tensors(batch)
    return forward_ids(state, ids, mask)


def extend_positions(state: EncoderState, new_max_len: int) -> EncoderState:
    """Grow the position table by cyclic copy: new row i = old row (i mod old_len)."""
    old = state.config.max_len
    if new_max_len <= old:
        raise ValueError(f"new_max_len {new_max_len} must exceed current max_len {old}")
    config = replace(state.config, max_len=new_max_len)
    params = {k: v.detach().clone() for k, v in state.params.items()}
    table = state.params["embeddings.position"].detach()
    params["embeddings.position"] = table[torch.arange(new_max_len) % old].clone()
    return EncoderState(config, params)


_MAGIC = b"\n\x00"


def write_container(path, header: Mapping, tensors: Mapping[str, torch.Tensor]) -> None:
    """JSON header + newline + NUL, then little-endian float64 payload in directory order."""
    directory = [{"name": k, "shape": list(v.shape), "dtype": "float64"} for k, v in tensors.items()]
    head = dict(header, tensors=directory)
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode("utf-8"))
        fh.write(_MAGIC)
        for tensor in tensors.values():
            fh.write(tensor.detach().contiguous().numpy().astype("<f8").tobytes())


def read_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.find(_MAGIC)
    if cut < 0:
        raise CheckpointError("missing header terminator")
    try:
        header = json.loads(blob[:cut].decode("utf-8"))
        directory = header.pop("tensors")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, AttributeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    offset = cut + len(_MAGIC)
    tensors = {}
    for entry in directory:
        if entry.get("dtype") != "float64":
            raise CheckpointError(f"unsupported element type {entry.get('dtype')!r}")
        count = math.prod(entry["shape"])
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise CheckpointError(f"truncated payload at tensor {entry['name']!r}")
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        tensors[entry["name"]] = torch.from_numpy(values.reshape(entry["shape"]).copy())
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payload")
    return header, tensors


def save_checkpoint(state: EncoderState, path) -> None:
    write_container(path, {"kind": "encoder", "config": asdict(state.config)}, state.params)


def load_checkpoint(path) -> EncoderState:
    header, tensors = read_container(path)
    if header.get("kind") != "encoder":
        raise CheckpointError(f"not an encoder checkpoint (kind={header.get('kind')!r})")
    known = {f.name for f in fields(EncoderConfig)}
    try:
        config = EncoderConfig(**{k: v for k, v in header["config"].items() if k in known})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config: {exc}") from None
    expected = parameter_shapes(config)
    if list(expected) != list(tensors):
        raise CheckpointError("tensor directory does not match config")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"{name}: shape {tuple(tensors[name].shape)} != {shape}")
    return EncoderState(config, tensors)

