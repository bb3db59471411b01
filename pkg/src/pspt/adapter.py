"""Trainable parameters: task soft prompt plus low-rank passage adapter.

These are the only tensors in the system with requires_grad=True. The
soft prompt is initialized from the frozen embeddings of a hard prompt
string, cycled to the configured length. The adapter factors a full
vocab-by-dim embedding delta into A (vocab x rank, Gaussian init) and
B (rank x dim, zero init), scaled by alpha/rank, so a fresh adapter
contributes exactly nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint_file, save_checkpoint_file
from .errors import CheckpointError, ConfigError, ContractError, SequenceLengthError
from .model import MicroLM
from .tensor import Tensor

DEFAULT_HARD_PROMPT = "please generate question for this passage"
SEPARATOR_TEXT = "question :"


@dataclass
class SoftPrompt:
    e1: Tensor
    init_text: str

    @property
    def length(self) -> int:
        return self.e1.shape[0]


@dataclass
class LowRankAdapter:
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class PsptParams:
    soft_prompt: SoftPrompt
    adapter: LowRankAdapter

    def tensors(self) -> dict[str, Tensor]:
        return {
            "pspt.e1": self.soft_prompt.e1,
            "pspt.A": self.adapter.A,
            "pspt.B": self.adapter.B,
        }

    def count(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def copy(self) -> "PsptParams":
        sp = SoftPrompt(Tensor(self.soft_prompt.e1.data.copy(), requires_grad=True),
                        self.soft_prompt.init_text)
        ad = LowRankAdapter(Tensor(self.adapter.A.data.copy(), requires_grad=True),
                            Tensor(self.adapter.B.data.copy(), requires_grad=True),
                            self.adapter.rank, self.adapter.alpha)
        return PsptParams(sp, ad)

    def astype(self, dtype) -> "PsptParams":
        sp = SoftPrompt(self.soft_prompt.e1.astype(dtype), self.soft_prompt.init_text)
        ad = LowRankAdapter(self.adapter.A.astype(dtype), self.adapter.B.astype(dtype),
                            self.adapter.rank, self.adapter.alpha)
        return PsptParams(sp, ad)


def init_soft_prompt(text: str, length: int, model: MicroLM) -> SoftPrompt:
    """Soft prompt rows are the hard prompt's token embeddings, cycled."""
    if length < 1:
        raise ConfigError("soft prompt length must be at least 1")
    ids = model.vocab.encode(text)
    if not ids:
        raise ConfigError(f"hard prompt {text!r} tokenizes to nothing")
    table = model.params["tok_emb"].data
    rows = np.stack([table[ids[i % len(ids)]] for i in range(length)]).copy()
    return SoftPrompt(Tensor(rows, requires_grad=True), text)


def init_adapter(vocab_size: int, rank: int, dim: int, alpha: float, seed: int) -> LowRankAdapter:
    if rank < 1:
        raise ConfigError("adapter rank must be at least 1")
    if rank > dim:
        raise ConfigError(f"adapter rank {rank} exceeds embedding width {dim}")
    if alpha <= 0:
        raise ConfigError("adapter alpha must be positive")
    rng = T.make_rng(seed, 3)
    a = rng.normal(0.0, 0.02, size=(vocab_size, rank)).astype(np.float32)
    b = np.zeros((rank, dim), dtype=np.float32)
    return LowRankAdapter(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), rank, float(alpha))


def init_pspt_params(model: MicroLM, hard_prompt: str = DEFAULT_HARD_PROMPT,
                     soft_prompt_len: int = 50, rank: int = 1, alpha: float = 16.0,
                     seed: int = 0) -> PsptParams:
    soft = init_soft_prompt(hard_prompt, soft_prompt_len, model)
    adapter = init_adapter(model.config.vocab_size, rank, model.config.dim, alpha, seed)
    return PsptParams(soft, adapter)


def passage_embedding(passage_ids, params: PsptParams, model: MicroLM) -> Tensor:
    """Adapted passage embeddings: gather(A)[d] @ B * (alpha/rank) + frozen rows."""
    ids = model.validate_ids(passage_ids)
    e4 = model.embed(ids)
    e3 = T.matmul(T.gather_rows(params.adapter.A, ids), params.adapter.B)
    return T.add(T.mul(e3, params.adapter.scaling), e4)


@dataclass
class AssembledInput:
    embeddings: Tensor
    target_positions: list[int]
    target_ids: list[int]


def assemble_blocks(model: MicroLM, prefix_blocks, passage_ids, question_ids,
                    passage_block_fn, rows_per_passage_token: int = 1) -> AssembledInput:
    """Concatenate prefix blocks, the (truncated) passage, a separator, and
    the question; report which positions predict each question token.

    Passages are truncated from the right to fit max_seq_len; questions
    are never truncated.
    """
    question_ids = model.validate_ids(question_ids)
    if not question_ids:
        raise ContractError("question must contain at least one token")
    sep_ids = model.vocab.encode(SEPARATOR_TEXT)
    prefix_len = sum(b.shape[0] for b in prefix_blocks)
    budget = model.config.max_seq_len - prefix_len - len(sep_ids) - len(question_ids)
    if budget < 0:
        raise SequenceLengthError(
            f"prompt ({prefix_len}) + separator ({len(sep_ids)}) + question "
            f"({len(question_ids)}) exceed max_seq_len {model.config.max_seq_len}"
        )
    kept = list(passage_ids)[: budget // rows_per_passage_token]
    blocks = list(prefix_blocks) + [passage_block_fn(kept), model.embed(sep_ids), model.embed(question_ids)]
    x = T.concat_rows(blocks)
    q_start = x.shape[0] - len(question_ids)
    positions = list(range(q_start - 1, q_start - 1 + len(question_ids)))
    return AssembledInput(x, positions, list(question_ids))


def assemble_input(params: PsptParams, passage_ids, question_ids, model: MicroLM,
                   literal_concat: bool = False) -> AssembledInput:
    """Model input for PSPT scoring: [e1; adapted passage; sep; question].

    With literal_concat the raw frozen passage embeddings are appended
    after the adapted ones as a separate block.
    """
    if literal_concat:
        def block(kept):
            return T.concat_rows([passage_embedding(kept, params, model), model.embed(kept)])

        return assemble_blocks(model, [params.soft_prompt.e1], passage_ids, question_ids,
                               block, rows_per_passage_token=2)
    return assemble_blocks(model, [params.soft_prompt.e1], passage_ids, question_ids,
                           lambda kept: passage_embedding(kept, params, model))


def save_params(params: PsptParams, path) -> None:
    meta = {
        "l_s": params.soft_prompt.length,
        "r": params.adapter.rank,
        "alpha": params.adapter.alpha,
        "hard_prompt": params.soft_prompt.init_text,
    }
    buffers = {name: t.data for name, t in params.tensors().items()}
    save_checkpoint_file(path, buffers, meta=meta)


def load_params(path) -> PsptParams:
    ckpt = load_checkpoint_file(path)
    for name in ("pspt.e1", "pspt.A", "pspt.B"):
        if name not in ckpt.buffers:
            raise CheckpointError(f"missing adapter buffer {name!r}")
    soft = SoftPrompt(Tensor(ckpt.buffers["pspt.e1"], requires_grad=True),
                      ckpt.meta.get("hard_prompt", DEFAULT_HARD_PROMPT))
    adapter = LowRankAdapter(Tensor(ckpt.buffers["pspt.A"], requires_grad=True),
                             Tensor(ckpt.buffers["pspt.B"], requires_grad=True),
                             int(ckpt.meta["r"]), float(ckpt.meta["alpha"]))
    return PsptParams(soft, adapter)
