"""Frozen micro decoder-only causal language model and its tokenizer.

The model accepts input *embeddings* rather than token ids so that learned
prompt vectors can be injected ahead of real tokens. All parameters are
created frozen; only pretraining temporarily unfreezes them.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    DataError,
    SequenceLengthError,
    ShapeError,
    VocabularyError,
)
from .optim import Adam, clip_global_norm
from .tensor import Tensor

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


def tokenize_text(text: str) -> list[str]:
    """Lowercase and split into alphanumeric runs and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bijection between token strings and contiguous ids; ids 0-3 reserved."""

    def __init__(self, tokens: list[str]):
        seen = set()
        for tok in tokens:
            if tok in seen or tok in RESERVED_TOKENS:
                raise ConfigError(f"duplicate or reserved vocabulary token: {tok!r}")
            seen.add(tok)
        self.tokens = list(tokens)
        self._id_of = {tok: i + len(RESERVED_TOKENS) for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(RESERVED_TOKENS) + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._id_of.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if token_id < len(RESERVED_TOKENS):
            return RESERVED_TOKENS[token_id]
        return self.tokens[token_id - len(RESERVED_TOKENS)]

    def encode(self, text: str) -> list[int]:
        return [self.id_of(tok) for tok in tokenize_text(text)]

    @classmethod
    def from_texts(cls, texts, cap: int = 2048) -> "Vocabulary":
        """Frequency-ranked vocabulary; ties broken lexicographically."""
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize_text(text):
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ranked[: max(0, cap - len(RESERVED_TOKENS))])


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "max_seq_len", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < len(RESERVED_TOKENS):
            raise ConfigError(f"vocab_size must be at least {len(RESERVED_TOKENS)}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq_len": self.max_seq_len,
            "ffn_mult": self.ffn_mult,
        }


class MicroLM:
    """Decoder-only transformer with tied input/output embeddings, kept frozen."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        if len(vocab) != config.vocab_size:
            raise ConfigError(
                f"vocabulary size {len(vocab)} does not match config vocab_size {config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, seed: int) -> "MicroLM":
        rng = T.make_rng(seed, 0)
        dim, ffn = config.dim, config.ffn_mult * config.dim

        def gauss(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32))

        params: dict[str, Tensor] = {
            "tok_emb": gauss(config.vocab_size, dim),
            "pos_emb": gauss(config.max_seq_len, dim),
        }
        for i in range(config.n_layers):
            p = f"layers.{i}."
            params[p + "ln1.gamma"] = Tensor(np.ones(dim, dtype=np.float32))
            params[p + "ln1.beta"] = Tensor(np.zeros(dim, dtype=np.float32))
            for w in ("wq", "wk", "wv", "wo"):
                params[p + "attn." + w] = gauss(dim, dim)
            params[p + "ln2.gamma"] = Tensor(np.ones(dim, dtype=np.float32))
            params[p + "ln2.beta"] = Tensor(np.zeros(dim, dtype=np.float32))
            params[p + "ffn.w1"] = gauss(dim, ffn)
            params[p + "ffn.b1"] = Tensor(np.zeros(ffn, dtype=np.float32))
            params[p + "ffn.w2"] = gauss(ffn, dim)
            params[p + "ffn.b2"] = Tensor(np.zeros(dim, dtype=np.float32))
        params["ln_f.gamma"] = Tensor(np.ones(dim, dtype=np.float32))
        params["ln_f.beta"] = Tensor(np.zeros(dim, dtype=np.float32))
        return cls(config, vocab, params)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self) -> str:
        """SHA-256 over all parameter buffers; changes iff any buffer changes."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "MicroLM":
        params = {name: p.astype(dtype) for name, p in self.params.items()}
        return MicroLM(self.config, self.vocab, params)

    def _set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.zero_grad()

    def validate_ids(self, ids) -> list[int]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.config.vocab_size:
                raise VocabularyError(f"token id {i} outside vocabulary of size {self.config.vocab_size}")
            out.append(i)
        return out

    def embed(self, ids) -> Tensor:
        """Rows of the frozen embedding table; never trainable."""
        ids = self.validate_ids(ids)
        if not ids:
            return Tensor(np.zeros((0, self.config.dim), dtype=self.dtype))
        return T.gather_rows(self.params["tok_emb"], ids)

    def forward_logprobs(self, x: Tensor) -> Tensor:
        """Next-token log-distributions for every position, causally masked.

        Accepts embeddings rather than ids so callers can splice in soft
        prompts and adapted passage vectors.
        """
        if x.ndim != 2 or x.shape[1] != self.config.dim:
            raise ShapeError(f"expected input of shape [L, {self.config.dim}], got {x.shape}")
        L = x.shape[0]
        if L > self.config.max_seq_len:
            raise SequenceLengthError(f"sequence length {L} exceeds max_seq_len {self.config.max_seq_len}")
        cfg = self.config
        p = self.params
        pos = T.gather_rows(p["pos_emb"], list(range(L)))
        h = T.add(x, pos)
        mask = Tensor(np.triu(np.full((L, L), -1e9, dtype=self.dtype), k=1))
        dh = cfg.dim // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            a = T.layer_norm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            q = T.matmul(a, p[pre + "attn.wq"])
            k = T.matmul(a, p[pre + "attn.wk"])
            v = T.matmul(a, p[pre + "attn.wv"])
            heads = []
            for j in range(cfg.n_heads):
                lo, hi = j * dh, (j + 1) * dh
                qj = T.slice_cols(q, lo, hi)
                kj = T.slice_cols(k, lo, hi)
                vj = T.slice_cols(v, lo, hi)
                scores = T.add(T.mul(T.matmul(qj, T.transpose(kj)), scale), mask)
                heads.append(T.matmul(T.softmax_rows(scores), vj))
            h = T.add(h, T.matmul(T.concat_cols(heads), p[pre + "attn.wo"]))
            a2 = T.layer_norm(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            f = T.relu(T.add(T.matmul(a2, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]))
            f = T.add(T.matmul(f, p[pre + "ffn.w2"]), p[pre + "ffn.b2"])
            h = T.add(h, f)
        hf = T.layer_norm(h, p["ln_f.gamma"], p["ln_f.beta"])
        logits = T.matmul(hf, T.transpose(p["tok_emb"]))
        return T.log_softmax_rows(logits)


def _sequence_loss(model: MicroLM, seq: list[int]) -> Tensor:
    """Mean teacher-forced negative log-likelihood of one id sequence."""
    seq = seq[: model.config.max_seq_len]
    inputs = [BOS_ID] + seq[:-1]
    logprobs = model.forward_logprobs(model.embed(inputs))
    picked = T.take_entries(logprobs, list(range(len(seq))), seq)
    return T.mul(T.neg(T.tsum(picked)), 1.0 / len(seq))


def sequence_cross_entropy(model: MicroLM, corpus: list[list[int]]) -> float:
    """Mean per-token next-token cross-entropy over a list of id sequences."""
    seqs = [s for s in corpus if s]
    if not seqs:
        raise DataError("cross-entropy over an empty corpus")
    return float(np.mean([_sequence_loss(model, s).item() for s in seqs]))


def holdout_split(corpus: list[list[int]], seed: int, fraction: float = 0.1):
    """Deterministic train/dev split of a token-sequence corpus."""
    order = T.make_rng(seed, 1).permutation(len(corpus))
    n_dev = min(max(1, int(len(corpus) * fraction)), len(corpus) - 1) if len(corpus) > 1 else 0
    dev_idx = set(order[:n_dev].tolist())
    train = [corpus[i] for i in range(len(corpus)) if i not in dev_idx]
    dev = [corpus[i] for i in sorted(dev_idx)]
    return train, dev


def continue_pretraining(model: MicroLM, corpus: list[list[int]], seed: int, steps: int,
                         batch_size: int = 8, lr: float = 1e-3) -> None:
    """Run further LM training steps in place, then re-freeze the model."""
    seqs = [s for s in corpus if s]
    if not seqs:
        raise DataError("pretraining corpus is empty")
    rng = T.make_rng(seed, 2)
    tensors = list(model.params.values())
    model._set_trainable(True)
    try:
        opt = Adam([(tensors, lr)])
        for _ in range(steps):
            idx = rng.integers(0, len(seqs), size=batch_size)
            total = None
            for i in idx:
                loss = _sequence_loss(model, seqs[int(i)])
                total = loss if total is None else T.add(total, loss)
            mean_loss = T.mul(total, 1.0 / batch_size)
            opt.zero_grad()
            T.backward(mean_loss)
            clip_global_norm(tensors, 1.0)
            opt.step()
    finally:
        model._set_trainable(False)


def pretrain_micro_lm(corpus: list[list[int]], config: ModelConfig, vocab: Vocabulary,
                      seed: int, steps: int, batch_size: int = 8, lr: float = 1e-3) -> MicroLM:
    """Initialize a model and fit it on the corpus train split, frozen on return."""
    if not [s for s in corpus if s]:
        raise DataError("pretraining corpus is empty")
    model = MicroLM.init(config, vocab, seed)
    if steps > 0:
        train, _ = holdout_split(corpus, seed)
        continue_pretraining(model, train, seed, steps, batch_size=batch_size, lr=lr)
    return model
