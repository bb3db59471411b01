"""Question log-likelihood scoring and candidate-list reranking.

The score of a passage is the (teacher-forced) log-likelihood of the
question tokens given the assembled prompt, passage, and separator.
PSPT scoring uses the trainable soft prompt and adapted passage
embeddings; the UPR baselines use hard prompt token embeddings and the
frozen passage embeddings only.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from . import tensor as T
from .adapter import SEPARATOR_TEXT, PsptParams, assemble_blocks, assemble_input
from .errors import ConfigError, ContractError, InputError
from .model import MicroLM
from .tensor import Tensor

DEFAULT_UPR_PROMPT = "Please generate question for this passage:"

Scorer = Callable[[str, str], float]


@dataclass(frozen=True)
class Score:
    value: float
    mode: str


@dataclass(frozen=True)
class Candidate:
    passage_id: str
    text: str
    retriever_rank: int
    retriever_score: float


def _check_mode(mode: str) -> None:
    if mode not in ("sum", "mean"):
        raise ConfigError(f"score mode must be 'sum' or 'mean', got {mode!r}")


def _gather_loglik(model: MicroLM, assembled) -> Tensor:
    logprobs = model.forward_logprobs(assembled.embeddings)
    picked = T.take_entries(logprobs, assembled.target_positions, assembled.target_ids)
    return T.tsum(picked)


def question_loglik(question_ids, passage_ids, params: PsptParams, model: MicroLM,
                    literal_concat: bool = False) -> Tensor:
    """Differentiable sum of question-token log-probs under the PSPT input."""
    assembled = assemble_input(params, passage_ids, question_ids, model, literal_concat)
    return _gather_loglik(model, assembled)


def score_pspt(question_ids, passage_ids, params: PsptParams, model: MicroLM,
               mode: str = "sum", literal_concat: bool = False) -> Score:
    _check_mode(mode)
    total = question_loglik(question_ids, passage_ids, params, model, literal_concat).item()
    if mode == "mean":
        total /= len(question_ids)
    return Score(total, mode)


def hard_prompt_loglik(question_ids, passage_ids, model: MicroLM, prompt_text: str,
                       example: tuple[list[int], list[int]] | None = None) -> Tensor:
    """Log-likelihood under a hard prompt; optional in-context (q*, d*) pair."""
    prompt_ids = model.vocab.encode(prompt_text)
    if not prompt_ids:
        raise ConfigError(f"prompt text {prompt_text!r} tokenizes to nothing")
    prefix = [model.embed(prompt_ids)]
    if example is not None:
        ex_q, ex_d = example
        if not ex_q or not ex_d:
            raise ContractError("in-context example needs non-empty question and passage")
        sep_ids = model.vocab.encode(SEPARATOR_TEXT)
        prefix += [model.embed(ex_d), model.embed(sep_ids), model.embed(ex_q)]
    assembled = assemble_blocks(model, prefix, passage_ids, question_ids, model.embed)
    return _gather_loglik(model, assembled)


def score_upr(question_ids, passage_ids, model: MicroLM,
              prompt_text: str = DEFAULT_UPR_PROMPT, mode: str = "sum",
              example: tuple[list[int], list[int]] | None = None) -> Score:
    _check_mode(mode)
    total = hard_prompt_loglik(question_ids, passage_ids, model, prompt_text, example).item()
    if mode == "mean":
        total /= len(question_ids)
    return Score(total, mode)


def make_pspt_scorer(model: MicroLM, params: PsptParams, mode: str = "sum",
                     literal_concat: bool = False) -> Scorer:
    _check_mode(mode)

    def scorer(question_text: str, passage_text: str) -> float:
        q = model.vocab.encode(question_text)
        d = model.vocab.encode(passage_text)
        return score_pspt(q, d, params, model, mode, literal_concat).value

    return scorer


def make_upr_scorer(model: MicroLM, prompt_text: str = DEFAULT_UPR_PROMPT,
                    mode: str = "sum",
                    example_texts: tuple[str, str] | None = None) -> Scorer:
    _check_mode(mode)
    example = None
    if example_texts is not None:
        example = (model.vocab.encode(example_texts[0]), model.vocab.encode(example_texts[1]))

    def scorer(question_text: str, passage_text: str) -> float:
        q = model.vocab.encode(question_text)
        d = model.vocab.encode(passage_text)
        return score_upr(q, d, model, prompt_text, mode, example).value

    return scorer


def _validate_candidates(candidates: list[Candidate]) -> None:
    if not candidates:
        raise InputError("candidate list is empty")
    seen = set()
    for c in candidates:
        if c.passage_id in seen:
            raise InputError(f"duplicate passage_id {c.passage_id!r} in candidate list")
        seen.add(c.passage_id)


def rerank_with_scores(question_text: str, candidates: list[Candidate], scorer: Scorer,
                       workers: int = 1) -> list[tuple[Candidate, float]]:
    """Score every candidate once and sort by score descending.

    Ties keep retriever order. Scores are computed independently per
    candidate, so the result does not depend on the worker count.
    """
    _validate_candidates(candidates)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(lambda c: scorer(question_text, c.text), candidates))
    else:
        scores = [scorer(question_text, c.text) for c in candidates]
    order = sorted(range(len(candidates)),
                   key=lambda i: (-scores[i], candidates[i].retriever_rank))
    return [(candidates[i], scores[i]) for i in order]


def rerank(question_text: str, candidates: list[Candidate], scorer: Scorer,
           workers: int = 1) -> list[Candidate]:
    """Permutation of the input candidates, best PSPT/UPR score first."""
    return [c for c, _ in rerank_with_scores(question_text, candidates, scorer, workers)]
