"""Small differentiable models with closed-form per-example gradients.

``TinySeq2Seq`` encodes the source as the mean of its token embeddings and
predicts each target token from that encoding plus the previous target
token's embedding:

    z_t = W^T (h + E_tgt[y_{t-1}]) + b,   h = mean_i E_src[s_i]

Both models keep their parameters in one flat float64 vector so DP-SGD can
treat them uniformly. A model is a value: ``with_params`` returns a new one.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .corpus import tokenize

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
INIT_SCALE = 0.1

Seq2SeqExample = tuple[np.ndarray, np.ndarray]


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise VocabularyError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        counts = Counter(tok for text in texts for tok in tokenize(text))
        words = sorted(t for t, c in counts.items() if c >= min_count and t not in SPECIAL_TOKENS)
        return cls(SPECIAL_TOKENS + tuple(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK) for tok in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class VocabPair:
    src: Vocab
    tgt: Vocab

    pad = PAD
    bos = BOS
    eos = EOS
    unk = UNK

    @classmethod
    def build(cls, pairs: Iterable[tuple[str, str]]) -> "VocabPair":
        pairs = list(pairs)
        return cls(Vocab.build(s for s, _ in pairs), Vocab.build(t for _, t in pairs))

    def encode(self, src: str, tgt: str) -> Seq2SeqExample:
        """Source ids and target ids terminated by ``<eos>``."""
        return (
            np.asarray(self.src.encode(src), dtype=np.int64),
            np.asarray(self.tgt.encode(tgt) + [EOS], dtype=np.int64),
        )

    def to_json(self) -> dict:
        return {"src": list(self.src.tokens), "tgt": list(self.tgt.tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> "VocabPair":
        return cls(Vocab(tuple(obj["src"])), Vocab(tuple(obj["tgt"])))


# ---------------------------------------------------------------------------
# TinySeq2Seq


def seq2seq_param_count(src_vocab: int, tgt_vocab: int, dim: int) -> int:
    return src_vocab * dim + tgt_vocab * dim + dim * tgt_vocab + tgt_vocab


@dataclass(frozen=True)
class _Batch:
    seg: np.ndarray  # example index of each target position
    starts: np.ndarray  # first target position of each example
    prev: np.ndarray
    gold: np.ndarray
    weight: np.ndarray  # 1 / target length, per position
    src_mix: np.ndarray  # (B, Vs) averaging weights of the encoder


@dataclass(frozen=True)
class TinySeq2Seq:
    src_vocab_size: int
    tgt_vocab_size: int
    dim: int
    params: np.ndarray

    def __post_init__(self):
        expected = seq2seq_param_count(self.src_vocab_size, self.tgt_vocab_size, self.dim)
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got shape {p.shape}")
        object.__setattr__(self, "params", p)

    @classmethod
    def init(cls, src_vocab_size: int, tgt_vocab_size: int, dim: int, rng: np.random.Generator) -> "TinySeq2Seq":
        n = seq2seq_param_count(src_vocab_size, tgt_vocab_size, dim)
        return cls(src_vocab_size, tgt_vocab_size, dim, rng.uniform(-INIT_SCALE, INIT_SCALE, size=n))

    @classmethod
    def zeros(cls, src_vocab_size: int, tgt_vocab_size: int, dim: int) -> "TinySeq2Seq":
        n = seq2seq_param_count(src_vocab_size, tgt_vocab_size, dim)
        return cls(src_vocab_size, tgt_vocab_size, dim, np.zeros(n))

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params: np.ndarray) -> "TinySeq2Seq":
        return TinySeq2Seq(self.src_vocab_size, self.tgt_vocab_size, self.dim, params)

    def _split(self):
        vs, vt, d = self.src_vocab_size, self.tgt_vocab_size, self.dim
        p = self.params
        a = vs * d
        b = a + vt * d
        c = b + d * vt
        return p[:a].reshape(vs, d), p[a:b].reshape(vt, d), p[b:c].reshape(d, vt), p[c:]

    @property
    def src_embeddings(self) -> np.ndarray:
        return self._split()[0]

    @property
    def tgt_embeddings(self) -> np.ndarray:
        return self._split()[1]

    @property
    def output_weights(self) -> np.ndarray:
        return self._split()[2]

    @property
    def output_bias(self) -> np.ndarray:
        return self._split()[3]

    def _prepare(self, examples: Sequence[Seq2SeqExample]) -> _Batch:
        n_ex = len(examples)
        srcs = [np.asarray(s, dtype=np.int64) for s, _ in examples]
        tgts = [np.asarray(t, dtype=np.int64) for _, t in examples]
        tgt_lens = np.array([t.size for t in tgts])
        src_lens = np.array([s.size for s in srcs])
        if tgt_lens.min() < 1:
            raise ValueError("target must contain at least one token")
        gold = np.concatenate(tgts)
        if gold.min() < 0 or gold.max() >= self.tgt_vocab_size:
            raise VocabularyError("target id out of vocabulary range")
        seg = np.repeat(np.arange(n_ex), tgt_lens)
        starts = np.concatenate([[0], np.cumsum(tgt_lens)[:-1]]).astype(np.int64)
        prev = np.empty_like(gold)
        prev[1:] = gold[:-1]
        prev[starts] = BOS
        weight = np.repeat(1.0 / tgt_lens, tgt_lens)

        src_mix = np.zeros((n_ex, self.src_vocab_size))
        if src_lens.sum():
            rows = np.repeat(np.arange(n_ex), src_lens)
            cols = np.concatenate(srcs)
            if cols.min() < 0 or cols.max() >= self.src_vocab_size:
                raise VocabularyError("source id out of vocabulary range")
            with np.errstate(divide="ignore"):
                inv = np.where(src_lens > 0, 1.0 / np.maximum(src_lens, 1), 0.0)
            np.add.at(src_mix, (rows, cols), np.repeat(inv, src_lens))
        return _Batch(seg, starts, prev, gold, weight, src_mix)

    def _forward(self, batch: _Batch):
        E_src, E_tgt, W, b = self._split()
        h = batch.src_mix @ E_src
        X = h[batch.seg] + E_tgt[batch.prev]
        Z = X @ W
        Z += b
        rows = np.arange(Z.shape[0])
        Z -= Z.max(axis=1, keepdims=True)
        gold_logit = Z[rows, batch.gold]
        np.exp(Z, out=Z)
        norm = Z.sum(axis=1)
        pos_loss = np.log(norm) - gold_logit
        losses = np.bincount(batch.seg, weights=pos_loss * batch.weight, minlength=batch.src_mix.shape[0])
        # Z now holds unnormalised probabilities; _logit_grads finishes them in place
        return X, Z, norm, losses

    def _logit_grads(self, batch: _Batch, expZ: np.ndarray, norm: np.ndarray) -> np.ndarray:
        dZ = expZ
        dZ *= (batch.weight / norm)[:, None]
        dZ[np.arange(dZ.shape[0]), batch.gold] -= batch.weight
        return dZ

    def losses(self, examples: Sequence[Seq2SeqExample]) -> np.ndarray:
        if not examples:
            return np.zeros(0)
        return self._forward(self._prepare(examples))[3]

    def loss_and_grad_sum(self, examples: Sequence[Seq2SeqExample]) -> tuple[np.ndarray, np.ndarray]:
        """Per-example losses and the gradient of their sum."""
        if not examples:
            return np.zeros(0), np.zeros(self.n_params)
        batch = self._prepare(examples)
        _, E_tgt, W, _ = self._split()
        X, expZ, norm, losses = self._forward(batch)
        dZ = self._logit_grads(batch, expZ, norm)
        gW = X.T @ dZ
        gb = dZ.sum(axis=0)
        dX = dZ @ W.T
        m = dX.shape[0]
        scatter = sparse.csr_matrix((np.ones(m), (batch.prev, np.arange(m))), shape=(self.tgt_vocab_size, m))
        gEt = scatter @ dX
        dh = np.add.reduceat(dX, batch.starts, axis=0)
        gEs = batch.src_mix.T @ dh
        return losses, np.concatenate([gEs.ravel(), np.asarray(gEt).ravel(), gW.ravel(), gb])

    def per_example_grads(self, examples: Sequence[Seq2SeqExample]) -> tuple[np.ndarray, np.ndarray]:
        """Per-example losses (B,) and gradients (B, n_params), each row independent."""
        n_ex = len(examples)
        if n_ex == 0:
            return np.zeros(0), np.zeros((0, self.n_params))
        batch = self._prepare(examples)
        _, E_tgt, W, _ = self._split()
        X, expZ, norm, losses = self._forward(batch)
        dZ = self._logit_grads(batch, expZ, norm)
        vt, d = self.tgt_vocab_size, self.dim

        pos = np.arange(X.shape[0]) - batch.starts[batch.seg]
        width = int(pos.max()) + 1
        Xp = np.zeros((n_ex, width, d))
        Xp[batch.seg, pos] = X
        dZp = np.zeros((n_ex, width, vt))
        dZp[batch.seg, pos] = dZ
        gW = np.matmul(Xp.transpose(0, 2, 1), dZp)
        gb = np.add.reduceat(dZ, batch.starts, axis=0)

        dX = dZ @ W.T
        gEt = np.zeros((n_ex, vt, d))
        np.add.at(gEt, (batch.seg, batch.prev), dX)
        dh = np.add.reduceat(dX, batch.starts, axis=0)
        gEs = batch.src_mix[:, :, None] * dh[:, None, :]
        grads = np.concatenate(
            [gEs.reshape(n_ex, -1), gEt.reshape(n_ex, -1), gW.reshape(n_ex, -1), gb], axis=1
        )
        return losses, grads


def seq2seq_loss(model: TinySeq2Seq, source_ids: Sequence[int], target_ids: Sequence[int]) -> float:
    return float(model.losses([(np.asarray(source_ids), np.asarray(target_ids))])[0])


def seq2seq_grad(model: TinySeq2Seq, source_ids: Sequence[int], target_ids: Sequence[int]) -> np.ndarray:
    return model.per_example_grads([(np.asarray(source_ids), np.asarray(target_ids))])[1][0]


def greedy_decode(model: TinySeq2Seq, source_ids: Sequence[int], max_len: int) -> list[int]:
    """Argmax decoding from ``<bos>``; stops at ``<eos>`` (not returned) or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    E_src, E_tgt, W, b = model._split()
    src = np.asarray(source_ids, dtype=np.int64)
    h = E_src[src].mean(axis=0) if src.size else np.zeros(model.dim)
    base = h @ W + b
    out: list[int] = []
    prev = BOS
    for _ in range(max_len):
        nxt = int(np.argmax(base + E_tgt[prev] @ W))
        if nxt == EOS:
            break
        out.append(nxt)
        prev = nxt
    return out


# ---------------------------------------------------------------------------
# Logistic regression


LogisticExample = tuple[np.ndarray, float]


@dataclass(frozen=True)
class LogisticModel:
    """Binary logistic regression; params are ``[w_1 .. w_d, bias]``."""

    dim: int
    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (self.dim + 1,):
            raise ValueError(f"expected {self.dim + 1} parameters, got shape {p.shape}")
        object.__setattr__(self, "params", p)

    @classmethod
    def zeros(cls, dim: int) -> "LogisticModel":
        return cls(dim, np.zeros(dim + 1))

    @property
    def n_params(self) -> int:
        return self.dim + 1

    @property
    def weights(self) -> np.ndarray:
        return self.params[:-1]

    @property
    def bias(self) -> float:
        return float(self.params[-1])

    def with_params(self, params: np.ndarray) -> "LogisticModel":
        return LogisticModel(self.dim, params)

    def _design(self, examples: Sequence[LogisticExample]):
        x = np.array([np.asarray(e[0], dtype=np.float64) for e in examples]).reshape(len(examples), self.dim)
        y = np.array([float(e[1]) for e in examples])
        return x, y

    def losses(self, examples: Sequence[LogisticExample]) -> np.ndarray:
        if not examples:
            return np.zeros(0)
        x, y = self._design(examples)
        z = x @ self.weights + self.bias
        return np.logaddexp(0.0, z) - y * z

    def per_example_grads(self, examples: Sequence[LogisticExample]) -> tuple[np.ndarray, np.ndarray]:
        if not examples:
            return np.zeros(0), np.zeros((0, self.n_params))
        x, y = self._design(examples)
        z = x @ self.weights + self.bias
        resid = expit(z) - y
        grads = np.hstack([x * resid[:, None], resid[:, None]])
        return np.logaddexp(0.0, z) - y * z, grads

    def loss_and_grad_sum(self, examples: Sequence[LogisticExample]) -> tuple[np.ndarray, np.ndarray]:
        losses, grads = self.per_example_grads(examples)
        return losses, grads.sum(axis=0)


def logistic_loss_grad(model: LogisticModel, x: Sequence[float], y: int) -> tuple[float, np.ndarray]:
    losses, grads = model.per_example_grads([(np.asarray(x, dtype=np.float64), y)])
    return float(losses[0]), grads[0]


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then little-endian float64 parameters.


def save_checkpoint(path: str | Path, model: TinySeq2Seq, vocab: VocabPair | None = None, meta: dict | None = None) -> None:
    header = {
        "format": "granudp-seq2seq/1",
        "src_vocab_size": model.src_vocab_size,
        "tgt_vocab_size": model.tgt_vocab_size,
        "dim": model.dim,
        "n_params": model.n_params,
        "meta": meta or {},
    }
    if vocab is not None:
        header["vocab"] = vocab.to_json()
        header["src_vocab_sha256"] = vocab.src.digest()
        header["tgt_vocab_sha256"] = vocab.tgt.digest()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8"))
        fh.write(b"\n")
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[TinySeq2Seq, VocabPair | None, dict]:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    header = json.loads(head.decode("utf-8"))
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError(f"checkpoint {path}: expected {header['n_params']} parameters, found {params.size}")
    model = TinySeq2Seq(header["src_vocab_size"], header["tgt_vocab_size"], header["dim"], params)
    vocab = VocabPair.from_json(header["vocab"]) if "vocab" in header else None
    if vocab is not None and vocab.tgt.digest() != header.get("tgt_vocab_sha256"):
        raise ValueError(f"checkpoint {path}: vocabulary hash mismatch")
    return model, vocab, header
