"""Word-level tokenization and a small transformer encoder-decoder.

The same architecture serves two roles: a generator that verbalizes a
linearized triple set as text, and a parser that decodes text back into the
linearized triple format. The parser additionally exposes a soft encoder input
path that accepts per-position vocabulary distributions instead of token ids,
which is what lets gradient flow from its log-likelihood back into the
generator through a straight-through tensor.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Dataset
from .triples import linearize

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
SEPARATOR_TOKENS = ("|", "&&")

ROLE_LM = "semantic-lm"
ROLE_PARSER = "semantic-parser"

NEG_INF = -1e9

CHECKPOINT_MAGIC = b"SMAUTCK1"


class Seq2SeqError(ValueError):
    pass


class CheckpointError(Seq2SeqError):
    pass


# ---------------------------------------------------------------------------
# vocabulary and token sequences


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise Seq2SeqError("vocab must start with the reserved tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise Seq2SeqError("vocab tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = set()
        for text in texts:
            words.update(text.split())
        words.update(SEPARATOR_TOKENS)
        words -= set(RESERVED_TOKENS)
        return cls(RESERVED_TOKENS + tuple(sorted(words)))


def build_vocab(dataset: Dataset) -> Vocab:
    """Shared source/target vocabulary over linearized triples and references."""
    texts = []
    for ex in dataset:
        texts.append(linearize(ex.triples))
        texts.extend(ex.references)
    return Vocab.build(texts)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocab, max_len: int = 64) -> TokenSequence:
    """Whitespace tokens wrapped in BOS/EOS; unknown words map to UNK."""
    ids = [BOS] + [vocab.id_of(w) for w in text.split()] + [EOS]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return TokenSequence(tuple(ids))


def detokenize(seq: TokenSequence, vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in seq.ids if i >= len(RESERVED_TOKENS))


def pad_batch(seqs: Sequence[TokenSequence], length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for row, seq in enumerate(seqs):
        out[row, : len(seq)] = seq.ids
    return out


# ---------------------------------------------------------------------------
# model definition


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 128
    heads: int = 4
    d_ff: int = 256
    max_source_len: int = 64
    max_target_len: int = 64

    def __post_init__(self):
        if self.d_model % self.heads:
            raise Seq2SeqError("d_model must be divisible by heads")


@dataclass
class Seq2SeqModel:
    role: str
    vocab: Vocab
    config: ModelConfig
    params: dict[str, Tensor]
    trainable: bool = True

    @classmethod
    def create(cls, role: str, vocab: Vocab, config: ModelConfig = ModelConfig(),
               seed: int = 0, trainable: bool = True) -> "Seq2SeqModel":
        if role not in (ROLE_LM, ROLE_PARSER):
            raise Seq2SeqError(f"unknown role {role!r}")
        rng = np.random.default_rng(seed)
        d, ff, v = config.d_model, config.d_ff, vocab.size

        def xavier(n_in, n_out):
            limit = math.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-limit, limit, size=(n_in, n_out)).astype(np.float32)

        params: dict[str, np.ndarray] = {
            "emb": rng.normal(0.0, 0.02, size=(v, d)).astype(np.float32),
            "out_w": rng.normal(0.0, 0.02, size=(d, v)).astype(np.float32),
            "out_b": np.zeros(v, dtype=np.float32),
        }

        def attn_block(prefix):
            for name in ("q", "k", "v", "o"):
                params[f"{prefix}_w{name}"] = xavier(d, d)
                params[f"{prefix}_b{name}"] = np.zeros(d, dtype=np.float32)

        def ff_block(prefix):
            params[f"{prefix}_w1"] = xavier(d, ff)
            params[f"{prefix}_b1"] = np.zeros(ff, dtype=np.float32)
            params[f"{prefix}_w2"] = xavier(ff, d)
            params[f"{prefix}_b2"] = np.zeros(d, dtype=np.float32)

        for i in range(config.layers):
            attn_block(f"enc{i}_att")
            ff_block(f"enc{i}_ff")
            attn_block(f"dec{i}_self")
            attn_block(f"dec{i}_cross")
            ff_block(f"dec{i}_ff")

        tensors = {k: Tensor(v_, requires_grad=trainable) for k, v_ in params.items()}
        return cls(role=role, vocab=vocab, config=config, params=tensors, trainable=trainable)

    def trainable_params(self) -> dict[str, Tensor]:
        return self.params if self.trainable else {}

    def freeze(self) -> "Seq2SeqModel":
        self.trainable = False
        for p in self.params.values():
            p.requires_grad = False
        return self

    def clone(self) -> "Seq2SeqModel":
        copies = {k: Tensor(p.data.copy(), requires_grad=self.trainable)
                  for k, p in self.params.items()}
        return Seq2SeqModel(role=self.role, vocab=self.vocab, config=self.config,
                            params=copies, trainable=self.trainable)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].data.astype("<f4").tobytes())
        return digest.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = snapshot[k]


@lru_cache(maxsize=32)
def _positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(np.float32)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    x = ad.reshape(x, (b, l, heads, d // heads))
    return ad.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dk = x.shape
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b, l, h * dk))


def _attention(model: Seq2SeqModel, prefix: str, x: Tensor, kv: Tensor,
               bias: np.ndarray) -> Tensor:
    p = model.params
    heads = model.config.heads
    dk = model.config.d_model // heads
    q = _split_heads(_linear(x, p[f"{prefix}_wq"], p[f"{prefix}_bq"]), heads)
    k = _split_heads(_linear(kv, p[f"{prefix}_wk"], p[f"{prefix}_bk"]), heads)
    v = _split_heads(_linear(kv, p[f"{prefix}_wv"], p[f"{prefix}_bv"]), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    scores = ad.add(scores, Tensor(bias))
    ctx = _merge_heads(ad.matmul(ad.softmax(scores), v))
    return _linear(ctx, p[f"{prefix}_wo"], p[f"{prefix}_bo"])


def _ff(model: Seq2SeqModel, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    hidden = ad.relu(_linear(x, p[f"{prefix}_w1"], p[f"{prefix}_b1"]))
    return _linear(hidden, p[f"{prefix}_w2"], p[f"{prefix}_b2"])


def _source_bias(src_ids: np.ndarray) -> np.ndarray:
    bias = np.where(src_ids == PAD, NEG_INF, 0.0).astype(np.float32)
    return bias[:, None, None, :]


def _causal_bias(length: int) -> np.ndarray:
    mask = np.triu(np.full((length, length), NEG_INF, dtype=np.float32), k=1)
    return mask[None, None, :, :]


def _encode_from_embeddings(model: Seq2SeqModel, x: Tensor, src_bias: np.ndarray) -> Tensor:
    x = ad.add(x, Tensor(_positional_encoding(x.shape[1], model.config.d_model)))
    for i in range(model.config.layers):
        x = ad.add(x, _attention(model, f"enc{i}_att", ad.layer_norm(x),
                                 ad.layer_norm(x), src_bias))
        x = ad.add(x, _ff(model, f"enc{i}_ff", ad.layer_norm(x)))
    return ad.layer_norm(x)


def encode(model: Seq2SeqModel, src_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Encoder pass over a (batch, length) id matrix; returns memory and pad bias."""
    src_bias = _source_bias(src_ids)
    x = ad.embedding_lookup(model.params["emb"], src_ids)
    return _encode_from_embeddings(model, x, src_bias), src_bias


def encode_soft(model: Seq2SeqModel, dist: Tensor, src_bias: np.ndarray) -> Tensor:
    """Encoder pass where token ids are replaced by vocabulary distributions.

    dist has shape (batch, length, vocab); each row acts as mixing weights
    over embedding rows, so an exact one-hot row reproduces a hard lookup.
    """
    x = ad.matmul(dist, model.params["emb"])
    return _encode_from_embeddings(model, x, src_bias)


def decode_logits(model: Seq2SeqModel, memory: Tensor, src_bias: np.ndarray,
                  tgt_in: np.ndarray) -> Tensor:
    """Decoder pass over shifted target ids; returns (batch, length, vocab) logits."""
    y = ad.embedding_lookup(model.params["emb"], tgt_in)
    y = ad.add(y, Tensor(_positional_encoding(tgt_in.shape[1], model.config.d_model)))
    causal = _causal_bias(tgt_in.shape[1])
    for i in range(model.config.layers):
        y = ad.add(y, _attention(model, f"dec{i}_self", ad.layer_norm(y),
                                 ad.layer_norm(y), causal))
        y = ad.add(y, _attention(model, f"dec{i}_cross", ad.layer_norm(y),
                                 memory, src_bias))
        y = ad.add(y, _ff(model, f"dec{i}_ff", ad.layer_norm(y)))
    y = ad.layer_norm(y)
    return _linear(y, model.params["out_w"], model.params["out_b"])


def _check_lengths(model: Seq2SeqModel, source: TokenSequence, target: TokenSequence):
    if len(source) > model.config.max_source_len:
        raise Seq2SeqError(f"source length {len(source)} exceeds "
                           f"{model.config.max_source_len}")
    if len(target) > model.config.max_target_len:
        raise Seq2SeqError(f"target length {len(target)} exceeds "
                           f"{model.config.max_target_len}")


def teacher_forced_logits(model: Seq2SeqModel, source: TokenSequence,
                          target: TokenSequence) -> Tensor:
    """Next-token logits for one pair; row t predicts target.ids[t + 1].

    Row t conditions on the source and on target positions before t + 1, so
    the returned tensor has len(target) - 1 rows.
    """
    _check_lengths(model, source, target)
    src = pad_batch([source])
    tgt = pad_batch([target])
    memory, src_bias = encode(model, src)
    logits = decode_logits(model, memory, src_bias, tgt[:, :-1])
    return ad.reshape(logits, logits.shape[1:])


def soft_teacher_forced_loglik(model: Seq2SeqModel, source_dist: Tensor,
                               target: TokenSequence) -> Tensor:
    """Sum of target log-probabilities with distribution-valued encoder input.

    This is the differentiable path of the parser: identical to the teacher
    forced computation except embeddings come from ``source_dist`` rows times
    the embedding matrix. Rows must each sum to 1 within 1e-5.
    """
    if model.role != ROLE_PARSER:
        raise Seq2SeqError("soft path is defined for the parser role only")
    if source_dist.data.ndim != 2 or source_dist.shape[1] != model.vocab.size:
        raise Seq2SeqError(
            f"source_dist must be (length, {model.vocab.size}), got {source_dist.shape}")
    sums = source_dist.data.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-5:
        raise Seq2SeqError("source_dist rows must each sum to 1 within 1e-5")
    dist = ad.reshape(source_dist, (1,) + source_dist.shape)
    src_mask = np.zeros((1, 1, 1, source_dist.shape[0]), dtype=np.float32)
    memory = encode_soft(model, dist, src_mask)
    tgt = pad_batch([target])
    logits = decode_logits(model, memory, src_mask, tgt[:, :-1])
    tgt_out = tgt[:, 1:]
    mask = (tgt_out != PAD).astype(np.float32)
    logp = ad.log_softmax(logits)
    picked = ad.reduce_sum(ad.multiply(logp, ad.one_hot(tgt_out, model.vocab.size)), axis=-1)
    return ad.reduce_sum(ad.multiply(picked, Tensor(mask)))


def sequence_log_prob(model: Seq2SeqModel, source: TokenSequence,
                      target: TokenSequence) -> float:
    """Teacher-forced log-probability of the target, summed over non-PAD tokens."""
    logits = teacher_forced_logits(model, source, target)
    tgt_out = np.asarray(target.ids[1:])
    logp = ad._log_softmax_data(logits.data)
    picked = np.take_along_axis(logp, tgt_out[:, None], axis=-1)[:, 0]
    return float(picked[tgt_out != PAD].sum())


# ---------------------------------------------------------------------------
# supervised training


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    max_source_len: int = 64
    max_target_len: int = 64

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.max_source_len, self.max_target_len) < 1:
            raise Seq2SeqError("all train config sizes must be positive")
        if self.lr <= 0:
            raise Seq2SeqError("learning rate must be positive")


def pairs_for_role(dataset: Dataset, role: str) -> list[tuple[str, str]]:
    """Supervised (source, target) text pairs; one pair per reference."""
    pairs = []
    for ex in dataset:
        lin = linearize(ex.triples)
        for ref in ex.references:
            pairs.append((lin, ref) if role == ROLE_LM else (ref, lin))
    return pairs


def train_supervised(model: Seq2SeqModel, pairs: Sequence[tuple[str, str]],
                     config: TrainConfig) -> list[float]:
    """Minimize mean masked cross-entropy with Adam; returns per-step losses."""
    if not model.trainable:
        raise Seq2SeqError("model is frozen")
    if not pairs:
        raise Seq2SeqError("no training pairs")
    tokenized = [
        (tokenize(src, model.vocab, config.max_source_len),
         tokenize(tgt, model.vocab, config.max_target_len))
        for src, tgt in pairs
    ]
    rng = np.random.default_rng(config.seed)
    state = ad.AdamState(model.params)
    losses: list[float] = []
    for step in range(config.steps):
        idx = rng.integers(0, len(tokenized), size=config.batch_size)
        batch = [tokenized[i] for i in idx]
        src = pad_batch([b[0] for b in batch])
        tgt = pad_batch([b[1] for b in batch])
        tgt_in, tgt_out = tgt[:, :-1], tgt[:, 1:]
        mask = (tgt_out != PAD).astype(np.float32)
        ad.zero_grads(model.params)
        try:
            with ad.Tape():
                memory, src_bias = encode(model, src)
                logits = decode_logits(model, memory, src_bias, tgt_in)
                loss = ad.masked_cross_entropy(logits, tgt_out, mask)
                ad.backward(loss)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"training diverged at step {step}: {exc}") from None
        ad.adam_step(model.params, state, lr=config.lr)
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Seq2SeqModel, path: str | Path) -> None:
    """Manifest JSON plus raw little-endian float32 blocks and a sha256 trailer."""
    manifest = {
        "format": "semauto-checkpoint",
        "version": 1,
        "role": model.role,
        "trainable": model.trainable,
        "config": asdict(model.config),
        "vocab": list(model.vocab.tokens),
        "params": [{"name": k, "shape": list(model.params[k].shape)}
                   for k in sorted(model.params)],
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack(">I", len(header))
    payload += header
    for entry in manifest["params"]:
        payload += model.params[entry["name"]].data.astype("<f4").tobytes()
    payload += hashlib.sha256(bytes(payload)).digest()
    Path(path).write_bytes(bytes(payload))


def load_checkpoint(path: str | Path) -> Seq2SeqModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack(">I", raw[offset: offset + 4])
    offset += 4
    try:
        manifest = json.loads(raw[offset: offset + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad manifest ({exc.msg})") from None
    offset += header_len
    if manifest.get("format") != "semauto-checkpoint" or manifest.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    params: dict[str, Tensor] = {}
    trainable = bool(manifest["trainable"])
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        block = raw[offset: offset + 4 * count]
        if len(block) != 4 * count:
            raise CheckpointError(f"{path}: parameter block {entry['name']!r} truncated")
        offset += 4 * count
        data = np.frombuffer(block, dtype="<f4").reshape(shape).copy()
        params[entry["name"]] = Tensor(data, requires_grad=trainable)
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    return Seq2SeqModel(
        role=manifest["role"],
        vocab=Vocab(tuple(manifest["vocab"])),
        config=ModelConfig(**manifest["config"]),
        params=params,
        trainable=trainable,
    )
