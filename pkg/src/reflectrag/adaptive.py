"""Confidence scoring of no-retrieval generations and threshold sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Sequence

from .completion import Completion
from .errors import EmptyGroup, EmptySequence, NonPositiveProbability
from .reflection import (
    DEFAULT_VOCAB,
    Group,
    GroupConfidence,
    Variant,
    Vocabulary,
    classify_tokens,
    group_logprobs,
    normalize_group,
)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-30
clamp_counter: Counter = Counter()


class Method(str, Enum):
    MINP = "minp"
    MEANP = "meanp"
    RET = "ret"


def _check(token_probs: Sequence[float]):
    if len(token_probs) == 0:
        raise EmptySequence("confidence of an empty token sequence")
    for p in token_probs:
        if not p > 0.0:
            raise NonPositiveProbability(f"token probability {p!r} is not positive")


def f_minp(token_probs: Sequence[float]) -> float:
    _check(token_probs)
    return min(token_probs)


def f_meanp(token_probs: Sequence[float]) -> float:
    """Geometric mean, computed as exp(mean(log p)).

    Clamped to [min p, max p], where the exact value always lies; exp/log
    rounding can otherwise land one ulp outside.
    """
    _check(token_probs)
    m = math.exp(math.fsum(math.log(p) for p in token_probs) / len(token_probs))
    return min(max(m, min(token_probs)), max(token_probs))


def f_ret(retrieval_group: GroupConfidence) -> float:
    """No-retrieval confidence as a probability (not a log-probability)."""
    if retrieval_group.group is not Group.RETRIEVAL or not retrieval_group.probs:
        raise EmptyGroup("f_ret needs a normalized Retrieval group")
    return retrieval_group.probs.get(Variant.NO_RT, 0.0)


@dataclass(frozen=True)
class SequenceConfidence:
    method: Method
    value: float
    token_probs: tuple[float, ...] = ()


@dataclass(frozen=True)
class RetrievalDecision:
    gamma: float
    score: SequenceConfidence
    retrieve: bool
    completion: Completion | None = None


@dataclass(frozen=True)
class SweepPoint:
    gamma: float
    retrieval_frequency: float
    accuracy: float
    n_queries: int


@dataclass(frozen=True)
class AdaptiveConfig:
    method: Method = Method.MEANP
    gamma: float = 0.5
    # "below" retrieves when score < gamma; "above" flips it for the opposite reading.
    compare: str = "below"
    answer_tokens_only: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.compare not in ("below", "above"):
            raise ValueError("compare must be 'below' or 'above'")


def should_retrieve(value: float, gamma: float, compare: str = "below") -> bool:
    return value < gamma if compare == "below" else value > gamma


def clamp_probs(logprobs: Sequence[float]) -> list[float]:
    probs = []
    for lp in logprobs:
        p = math.exp(lp)
        if p <= 0.0:
            clamp_counter["zero_prob"] += 1
            log.warning("clamped zero token probability to %g", PROB_FLOOR)
            p = PROB_FLOOR
        probs.append(p)
    return probs


def score_tokens(completion: Completion, method: Method, vocab: Vocabulary = DEFAULT_VOCAB, answer_tokens_only=True) -> SequenceConfidence:
    method = Method(method)
    answer, groups = classify_tokens(completion, vocab)
    if method is Method.RET:
        if Group.RETRIEVAL not in groups:
            raise EmptyGroup("completion has no Retrieval token")
        tok, variant = groups[Group.RETRIEVAL]
        gc = normalize_group(group_logprobs(tok, variant, vocab), Group.RETRIEVAL)
        return SequenceConfidence(method, f_ret(gc), (gc.probs[Variant.NO_RT],))
    toks = answer if answer_tokens_only else [t for t in completion.tokens if t.token]
    probs = clamp_probs([t.logprob for t in toks])
    fn = f_minp if method is Method.MINP else f_meanp
    return SequenceConfidence(method, fn(probs), tuple(probs))


def no_retrieval_prompt(prompt: str, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    return prompt + vocab.surface(Variant.NO_RT)


def decide(q: str, backend, method=Method.MEANP, gamma: float = 0.5, *, vocab=DEFAULT_VOCAB,
           compare="below", answer_tokens_only=True, max_tokens=100) -> RetrievalDecision:
    """Score the generation conditioned on an enforced [NoRT] and threshold it.

    ``q`` is the fully rendered prompt. For the ``ret`` method the model picks the
    Retrieval token itself, so the prompt is sent without the forced [NoRT].
    """
    method = Method(method)
    prompt = q if method is Method.RET else no_retrieval_prompt(q, vocab)
    completion = backend.complete(prompt, max_tokens=max_tokens)
    score = score_tokens(completion, method, vocab, answer_tokens_only)
    return RetrievalDecision(gamma, score, should_retrieve(score.value, gamma, compare), completion)


# --------------------------------------------------------------------------- sweeps


@dataclass
class SweepQuery:
    """One query's precomputed ingredients: confidence and both possible answers."""

    id: str
    confidence: float
    parametric_correct: float
    retrieval_correct: float


def sweep_points(queries: Sequence[SweepQuery], gammas: Sequence[float], compare="below") -> list[SweepPoint]:
    if not gammas:
        raise ValueError("gammas must be non-empty")
    n = len(queries)
    if n == 0:
        raise ValueError("sweep needs at least one query")
    points = []
    for g in gammas:
        retrieved = [should_retrieve(sq.confidence, g, compare) for sq in queries]
        acc = sum(sq.retrieval_correct if r else sq.parametric_correct for sq, r in zip(queries, retrieved)) / n
        points.append(SweepPoint(float(g), sum(retrieved) / n, acc, n))
    return points


def sweep(queries, backend, method, gammas, scorer: Callable[[str, list[str]], float], *,
          answer_fn, workers: int = 1, compare="below") -> list[SweepPoint]:
    """Threshold sweep; each query is scored and answered once and reused for every gamma.

    ``queries`` yield objects with ``id``, ``prompt`` and ``gold_answers``;
    ``answer_fn(query, retrieve: bool)`` returns the answer string for either mode.
    """
    def prepare(query):
        decision = decide(query.prompt, backend, method, 0.0, compare=compare)
        parametric = answer_fn(query, False)
        retrieved = answer_fn(query, True)
        return SweepQuery(
            query.id,
            decision.score.value,
            float(scorer(parametric, query.gold_answers)),
            float(scorer(retrieved, query.gold_answers)),
        )

    queries = list(queries)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            prepared = list(pool.map(prepare, queries))
    else:
        prepared = [prepare(q) for q in queries]
    return sweep_points(prepared, gammas, compare)


CSV_HEADER = ["gamma", "retrieval_frequency", "accuracy", "n_queries"]


def points_to_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow([repr(p.gamma), repr(p.retrieval_frequency), repr(p.accuracy), p.n_queries])
    return buf.getvalue()


def points_from_csv(text: str) -> list[SweepPoint]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        SweepPoint(float(r["gamma"]), float(r["retrieval_frequency"]), float(r["accuracy"]), int(r["n_queries"]))
        for r in rows
    ]


def points_to_json(points: Sequence[SweepPoint]) -> str:
    return json.dumps([asdict(p) for p in points], indent=1)
