"""Inference orchestration: adaptive retrieval, per-context candidates, segment beam search."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .adaptive import AdaptiveConfig, Method, decide, no_retrieval_prompt
from .completion import Completion
from .errors import BackendError, MalformedOutput, NoCandidates, UnknownQueryId
from .presets import BEAM_SIZE, DEFAULT_WEIGHTS, MAX_DEPTH
from .prompts import passage_block, render, template_version
from .reflection import (
    DEFAULT_VOCAB,
    CandidateScore,
    ScoreWeights,
    Variant,
    Vocabulary,
    argmax_index,
    parse_reflection_output,
    score_completion,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievedContext:
    id: str
    passages: tuple[str, ...]
    retriever_score: float | None = None

    @classmethod
    def from_json(cls, obj: dict) -> "RetrievedContext":
        passages = tuple(obj["passages"])
        if not passages:
            raise ValueError(f"context {obj.get('id')!r} has no passages")
        return cls(str(obj["id"]), passages, obj.get("retriever_score"))


@dataclass(frozen=True)
class Query:
    id: str
    question: str
    gold_answers: tuple[str, ...] = ()

    @classmethod
    def from_json(cls, obj: dict) -> "Query":
        return cls(str(obj["id"]), obj["question"], tuple(obj.get("gold_answers") or ()))


class FileRetriever:
    """Precomputed ranked contexts from ``{query_id, contexts: [{id, passages}]}`` JSONL."""

    def __init__(self, store, max_hops: int | None = None):
        self.store: dict[str, list[RetrievedContext]] = {}
        with open(store, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                ctxs = [RetrievedContext.from_json(c) for c in obj["contexts"]]
                if max_hops is not None and any(len(c.passages) > max_hops for c in ctxs):
                    raise ValueError(f"query {obj['query_id']}: context exceeds {max_hops} passages")
                self.store[str(obj["query_id"])] = ctxs

    def retrieve(self, query_id: str, n: int) -> list[RetrievedContext]:
        try:
            return self.store[query_id][:n]
        except KeyError:
            raise UnknownQueryId(query_id) from None


@dataclass(frozen=True)
class EngineConfig:
    template: str = "multihop"
    weights: ScoreWeights = DEFAULT_WEIGHTS
    max_tokens: int = 100
    workers: int = 1
    vocab: Vocabulary = DEFAULT_VOCAB
    collapse: dict | None = None
    continue_expansion: bool = False
    beam_combine: str = "sum"


@dataclass
class Candidate:
    index: int
    context: RetrievedContext
    answer: str
    score: CandidateScore
    completion: Completion

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "context_id": self.context.id,
            "answer": self.answer,
            "raw_completion": self.completion.text,
            "tokens": [t.to_json() for t in self.completion.tokens],
            "attempts": self.completion.attempts,
            "score": self.score.to_json(),
        }


def _pool_map(fn, items, workers):
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(min(workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def base_prompt(question: str, config: EngineConfig) -> str:
    return render(config.template, question=question)


def _generate(prompt, index, context, backend, config) -> Candidate:
    completion = backend.complete(prompt, max_tokens=config.max_tokens)
    parsed = parse_reflection_output(completion.text, config.vocab)
    score = score_completion(completion, config.weights, config.vocab, config.collapse)
    return Candidate(index, context, parsed.answer, score, completion)


def _decision_json(decision):
    if decision is None:
        return None
    return {
        "method": decision.score.method.value,
        "gamma": decision.gamma,
        "score": decision.score.value,
        "retrieve": decision.retrieve,
    }


def answer_short(q: str, contexts: Sequence[RetrievedContext], backend, weights: ScoreWeights | None = None,
                 adaptive: AdaptiveConfig | None = None, config: EngineConfig = EngineConfig()) -> dict:
    """Best candidate answer for a short-form query.

    Without ``adaptive`` every query retrieves. Failing candidates are dropped;
    if all fail, :class:`NoCandidates` is raised.
    """
    if weights is not None:
        config = EngineConfig(**{**config.__dict__, "weights": weights})
    prompt = base_prompt(q, config)
    decision = None
    if adaptive is not None:
        decision = decide(prompt, backend, adaptive.method, adaptive.gamma, vocab=config.vocab,
                          compare=adaptive.compare, answer_tokens_only=adaptive.answer_tokens_only,
                          max_tokens=config.max_tokens)
        if not decision.retrieve:
            completion = decision.completion
            if adaptive.method is Method.RET:
                completion = backend.complete(no_retrieval_prompt(prompt, config.vocab), max_tokens=config.max_tokens)
            answer = parse_reflection_output(completion.text, config.vocab).answer
            return {
                "answer": answer,
                "decision": decision,
                "candidates": [],
                "trace": {
                    "retrieved": False,
                    "decision": _decision_json(decision),
                    "parametric_completion": completion.text,
                    "parametric_tokens": [t.to_json() for t in completion.tokens],
                    "candidates": [],
                    "errors": [],
                    "winner": None,
                },
            }
    if not contexts:
        raise NoCandidates("retrieval requested but no contexts were supplied")

    def run(item):
        i, ctx = item
        try:
            return _generate(prompt + config.vocab.surface(Variant.RT) + passage_block(ctx.passages), i, ctx,
                             backend, config), None
        except (BackendError, MalformedOutput) as exc:
            log.warning("candidate %d (%s) failed: %s", i, ctx.id, exc)
            return None, {"index": i, "context_id": ctx.id, "error": f"{type(exc).__name__}: {exc}"}

    results = _pool_map(run, enumerate(contexts), config.workers)
    candidates = [c for c, _ in results if c is not None]
    errors = [e for _, e in results if e is not None]
    if not candidates:
        raise NoCandidates(f"all {len(contexts)} candidates failed")
    best = candidates[argmax_index([c.score.rank_score for c in candidates])]
    return {
        "answer": best.answer,
        "decision": decision,
        "candidates": candidates,
        "trace": {
            "retrieved": True,
            "decision": _decision_json(decision),
            "candidates": [c.to_json() for c in candidates],
            "errors": errors,
            "winner": best.index,
        },
    }


# --------------------------------------------------------------------------- long form


@dataclass
class Segment:
    context: RetrievedContext | None
    continued: bool
    answer: str
    score: CandidateScore
    completion: Completion
    terminal: bool

    def to_json(self) -> dict:
        return {
            "context_id": None if self.context is None else self.context.id,
            "continued": self.continued,
            "answer": self.answer,
            "raw_completion": self.completion.text,
            "tokens": [t.to_json() for t in self.completion.tokens],
            "terminal": self.terminal,
            "score": self.score.to_json(),
        }


@dataclass
class BeamState:
    segments: list[Segment] = field(default_factory=list)
    cumulative_score: float = 0.0

    @property
    def depth(self) -> int:
        return len(self.segments)

    @property
    def done(self) -> bool:
        return bool(self.segments) and self.segments[-1].terminal

    def key(self, combine: str) -> float:
        if combine == "mean" and self.segments:
            return self.cumulative_score / len(self.segments)
        return self.cumulative_score

    def history(self) -> str:
        return "".join(s.completion.text for s in self.segments)

    def text(self) -> str:
        return " ".join(s.answer for s in self.segments if s.answer)


def _expand(state: BeamState, contexts, prompt, backend, config) -> list[tuple[RetrievedContext | None, bool, str]]:
    hist = prompt + state.history()
    vocab = config.vocab
    jobs = [(ctx, False, hist + vocab.surface(Variant.RT) + passage_block(ctx.passages)) for ctx in contexts]
    if config.continue_expansion and state.segments:
        jobs.append((state.segments[-1].context, True, hist + vocab.surface(Variant.CONTINUE)))
    return jobs


def answer_long(q: str, contexts: Sequence[RetrievedContext], backend, weights: ScoreWeights | None = None,
                beam_size: int = BEAM_SIZE, max_depth: int = MAX_DEPTH, config: EngineConfig = EngineConfig()) -> dict:
    """Segment-level beam search; returns the highest-scoring finished sequence."""
    if beam_size < 1 or max_depth < 1:
        raise ValueError("beam_size and max_depth must be >= 1")
    if not contexts:
        raise NoCandidates("long-form generation needs at least one context")
    if weights is not None:
        config = EngineConfig(**{**config.__dict__, "weights": weights})
    prompt = base_prompt(q, config)
    beams = [BeamState()]
    levels = []
    errors = []
    for depth in range(1, max_depth + 1):
        live = [b for b in beams if not b.done]
        if not live:
            break
        jobs = [(b, ctx, cont, p) for b in live for ctx, cont, p in _expand(b, contexts, prompt, backend, config)]

        def run(job):
            parent, ctx, cont, p = job
            try:
                completion = backend.complete(p, max_tokens=config.max_tokens)
                parsed = parse_reflection_output(completion.text, config.vocab)
                score = score_completion(completion, config.weights, config.vocab, config.collapse)
            except (BackendError, MalformedOutput) as exc:
                return None, f"{type(exc).__name__}: {exc}"
            seg = Segment(ctx, cont, parsed.answer, score, completion, parsed.eos or not completion.tokens)
            return BeamState(parent.segments + [seg], parent.cumulative_score + score.rank_score), None

        results = _pool_map(run, jobs, config.workers)
        children = [c for c, _ in results if c is not None]
        errors.extend(e for _, e in results if e is not None)
        if not children and not any(b.done for b in beams):
            raise NoCandidates(f"every expansion failed at depth {depth}")
        pool = [b for b in beams if b.done] + children
        # stable sort: ties keep finished beams first, then generation order
        pool.sort(key=lambda b: -b.key(config.beam_combine))
        beams = pool[:beam_size]
        levels.append([{"score": b.cumulative_score, "depth": b.depth,
                        "contexts": [None if s.context is None else s.context.id for s in b.segments]}
                       for b in beams])
    best = beams[argmax_index([b.key(config.beam_combine) for b in beams])]
    return {
        "answer": best.text(),
        "best": best,
        "beam_trace": {
            "beam_size": beam_size,
            "max_depth": max_depth,
            "combine": config.beam_combine,
            "levels": levels,
            "segments": [s.to_json() for s in best.segments],
            "cumulative_score": best.cumulative_score,
            "errors": errors,
        },
    }


def trace_metadata(config: EngineConfig, **extra) -> dict:
    return {
        "template": template_version(config.template),
        "weights": config.weights.to_json(),
        **extra,
    }


def read_queries(path) -> list[Query]:
    with open(path, encoding="utf-8") as fh:
        return [Query.from_json(json.loads(line)) for line in fh if line.strip()]


def write_jsonl(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
