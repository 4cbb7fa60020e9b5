"""Reflection-token vocabulary, output parsing and candidate scoring."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .completion import Completion
from .errors import EmptyGroup, MalformedOutput


class Group(str, Enum):
    RETRIEVAL = "Retrieval"
    RELEVANCE = "Relevance"
    GROUNDING = "Grounding"
    UTILITY = "Utility"
    CONTINUE = "Continue"


class Variant(str, Enum):
    RT = "RT"
    NO_RT = "NoRT"
    RELEVANT = "Relevant"
    IRRELEVANT = "Irrelevant"
    FULLY_SUPPORTED = "FullySupported"
    PARTIALLY_SUPPORTED = "PartiallySupported"
    NO_SUPPORT = "NoSupport"
    U1 = "U1"
    U2 = "U2"
    U3 = "U3"
    U4 = "U4"
    U5 = "U5"
    CONTINUE = "Continue"

    @property
    def group(self) -> Group:
        return VARIANT_GROUP[self]


GROUP_VARIANTS: dict[Group, tuple[Variant, ...]] = {
    Group.RETRIEVAL: (Variant.RT, Variant.NO_RT),
    Group.RELEVANCE: (Variant.RELEVANT, Variant.IRRELEVANT),
    Group.GROUNDING: (Variant.FULLY_SUPPORTED, Variant.PARTIALLY_SUPPORTED, Variant.NO_SUPPORT),
    Group.UTILITY: (Variant.U1, Variant.U2, Variant.U3, Variant.U4, Variant.U5),
    Group.CONTINUE: (Variant.CONTINUE,),
}
VARIANT_GROUP = {v: g for g, vs in GROUP_VARIANTS.items() for v in vs}
UTILITY_VARIANTS = GROUP_VARIANTS[Group.UTILITY]

DEFAULT_SURFACES: dict[Variant, str] = {
    Variant.RT: "[RT]",
    Variant.NO_RT: "[NoRT]",
    Variant.RELEVANT: "[Relevant]",
    Variant.IRRELEVANT: "[Irrelevant]",
    Variant.FULLY_SUPPORTED: "[Fully supported]",
    Variant.PARTIALLY_SUPPORTED: "[Partially supported]",
    Variant.NO_SUPPORT: "[No support]",
    Variant.U1: "[U:1]",
    Variant.U2: "[U:2]",
    Variant.U3: "[U:3]",
    Variant.U4: "[U:4]",
    Variant.U5: "[U:5]",
    Variant.CONTINUE: "[Continue]",
}

# Spellings seen in other checkpoints; parsed, never emitted.
DEFAULT_ALIASES: dict[str, Variant] = {
    "[Fully Supported]": Variant.FULLY_SUPPORTED,
    "[Partially Supported]": Variant.PARTIALLY_SUPPORTED,
    "[No Support]": Variant.NO_SUPPORT,
    "[No support / Contradictory]": Variant.NO_SUPPORT,
    "[Retrieval]": Variant.RT,
    "[No Retrieval]": Variant.NO_RT,
    "[Continue to Use Evidence]": Variant.CONTINUE,
    **{f"[Utility:{i}]": UTILITY_VARIANTS[i - 1] for i in range(1, 6)},
}

PASSAGE_OPEN = "<p>"
PASSAGE_CLOSE = "</p>"
EOS = "</s>"


@dataclass(frozen=True)
class ReflectionToken:
    group: Group
    variant: Variant
    surface: str


class Vocabulary:
    """Surface spelling table; the single source of truth for token strings."""

    def __init__(self, surfaces: Mapping[Variant, str] | None = None, aliases: Mapping[str, Variant] | None = None):
        table = dict(DEFAULT_SURFACES)
        if surfaces:
            table.update({Variant(k): v for k, v in surfaces.items()})
        if len(set(table.values())) != len(table):
            raise ValueError("reflection token surfaces must be unique")
        self.surfaces = table
        self._lookup = {s: v for v, s in table.items()}
        for alias, v in (DEFAULT_ALIASES if aliases is None else aliases).items():
            self._lookup.setdefault(alias, Variant(v))
        alternation = "|".join(re.escape(s) for s in sorted(self._lookup, key=len, reverse=True))
        self.pattern = re.compile(alternation)

    def surface(self, variant: Variant) -> str:
        return self.surfaces[Variant(variant)]

    def token(self, variant: Variant) -> ReflectionToken:
        variant = Variant(variant)
        return ReflectionToken(variant.group, variant, self.surfaces[variant])

    def lookup(self, surface: str) -> ReflectionToken | None:
        v = self._lookup.get(surface)
        return None if v is None else self.token(v)

    def variant_of(self, surface: str) -> Variant | None:
        return self._lookup.get(surface)


DEFAULT_VOCAB = Vocabulary()


# --------------------------------------------------------------------------- parsing


@dataclass
class ParsedOutput:
    answer: str
    retrieval: Variant | None = None
    relevance: Variant | None = None
    grounding: Variant | None = None
    utility: Variant | None = None
    continue_: bool = False
    passages: list[str] = field(default_factory=list)
    eos: bool = False

    def serialize(self, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
        """Render back into the canonical concatenation order."""
        parts = []
        if self.retrieval is not None:
            parts.append(vocab.surface(self.retrieval))
        parts.extend(PASSAGE_OPEN + p + PASSAGE_CLOSE for p in self.passages)
        if self.relevance is not None:
            parts.append(vocab.surface(self.relevance))
        parts.append(self.answer)
        if self.grounding is not None:
            parts.append(vocab.surface(self.grounding))
        if self.utility is not None:
            parts.append(vocab.surface(self.utility))
        if self.continue_:
            parts.append(vocab.surface(Variant.CONTINUE))
        if self.eos:
            parts.append(EOS)
        return "".join(parts)


_PASSAGE_RE = re.compile(re.escape(PASSAGE_OPEN) + r"(.*?)" + re.escape(PASSAGE_CLOSE), re.S)


def masked_spans(text: str, vocab: Vocabulary = DEFAULT_VOCAB):
    """Character spans that are not answer text: passages, reflection tokens, EOS.

    Returns a list of (start, end, kind, payload) sorted by start, where kind is
    "passage", "token" or "eos".
    """
    spans = []
    for m in _PASSAGE_RE.finditer(text):
        spans.append((m.start(), m.end(), "passage", m.group(1)))

    def inside_passage(pos):
        return any(s <= pos < e for s, e, _, _ in spans)

    extra = []
    for m in vocab.pattern.finditer(text):
        if not inside_passage(m.start()):
            extra.append((m.start(), m.end(), "token", vocab.variant_of(m.group(0))))
    start = text.find(EOS)
    while start != -1:
        if not inside_passage(start):
            extra.append((start, start + len(EOS), "eos", None))
        start = text.find(EOS, start + 1)
    return sorted(spans + extra, key=lambda s: s[0])


def parse_reflection_output(text: str, vocab: Vocabulary = DEFAULT_VOCAB) -> ParsedOutput:
    out = ParsedOutput(answer="")
    seen: set[Group] = set()
    pieces = []
    pos = 0
    for start, end, kind, payload in masked_spans(text, vocab):
        pieces.append(text[pos:start])
        pos = end
        if kind == "passage":
            out.passages.append(payload)
        elif kind == "eos":
            out.eos = True
        else:
            group = payload.group
            if group in seen:
                raise MalformedOutput(f"two {group.value} tokens in output: {text!r}")
            seen.add(group)
            if group is Group.CONTINUE:
                out.continue_ = True
            else:
                setattr(out, group.value.lower(), payload)
    pieces.append(text[pos:])
    out.answer = "".join(pieces).strip()
    return out


# --------------------------------------------------------------------------- confidences

DEFAULT_COLLAPSE: dict[Group, dict[Variant, float]] = {
    Group.RETRIEVAL: {Variant.RT: 0.0, Variant.NO_RT: 1.0},
    Group.RELEVANCE: {Variant.RELEVANT: 1.0, Variant.IRRELEVANT: 0.0},
    Group.GROUNDING: {Variant.FULLY_SUPPORTED: 1.0, Variant.PARTIALLY_SUPPORTED: 0.5, Variant.NO_SUPPORT: 0.0},
    Group.UTILITY: {v: i / 4 for i, v in enumerate(UTILITY_VARIANTS)},
    Group.CONTINUE: {Variant.CONTINUE: 1.0},
}


@dataclass(frozen=True)
class GroupConfidence:
    group: Group
    probs: dict[Variant, float]
    scalar: float

    def to_json(self) -> dict:
        return {
            "group": self.group.value,
            "probs": {v.value: p for v, p in self.probs.items()},
            "scalar": self.scalar,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroupConfidence":
        return cls(Group(obj["group"]), {Variant(k): float(p) for k, p in obj["probs"].items()}, float(obj["scalar"]))


def collapse_group(gc: GroupConfidence, values: Mapping[Variant, float] | None = None) -> float:
    """Collapse a group's distribution to one scalar by expected variant value."""
    table = DEFAULT_COLLAPSE[gc.group] if values is None else values
    return sum(table[v] * gc.probs.get(v, 0.0) for v in GROUP_VARIANTS[gc.group])


def normalize_group(
    logprobs: Mapping[Variant | str, float],
    group: Group,
    collapse: Mapping[Group, Mapping[Variant, float]] | None = None,
) -> GroupConfidence:
    """Turn raw variant log-probabilities into a distribution over the group.

    Variants of other groups are ignored; absent variants get probability 0.
    """
    group = Group(group)
    members = GROUP_VARIANTS[group]
    present = {}
    for key, lp in logprobs.items():
        v = Variant(key)
        if v in members and not math.isnan(lp) and lp != -math.inf:
            present[v] = float(lp)
    if not present:
        raise EmptyGroup(f"no {group.value} variant with a finite log-probability")
    top = max(present.values())
    weights = {v: math.exp(present[v] - top) if v in present else 0.0 for v in members}
    total = sum(weights.values())
    probs = {v: w / total for v, w in weights.items()}
    provisional = GroupConfidence(group, probs, 0.0)
    table = (collapse or {}).get(group)
    return GroupConfidence(group, probs, collapse_group(provisional, table))


@dataclass(frozen=True)
class ScoreWeights:
    w_rel: float = 1.0
    w_grd: float = 1.0
    w_utl: float = 0.5
    include_seq_term: bool = False

    def __post_init__(self):
        for name in ("w_rel", "w_grd", "w_utl"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_json(self) -> dict:
        return {"w_rel": self.w_rel, "w_grd": self.w_grd, "w_utl": self.w_utl, "include_seq_term": self.include_seq_term}


@dataclass(frozen=True)
class CandidateScore:
    """Per-candidate group confidences and ranking value.

    A group the completion never emitted is stored as ``None`` and contributes 0.
    """

    relevance: GroupConfidence | None
    grounding: GroupConfidence | None
    utility: GroupConfidence | None
    seq_logprob_mean: float
    rank_score: float

    def to_json(self) -> dict:
        enc = lambda gc: None if gc is None else gc.to_json()  # noqa: E731
        return {
            "relevance": enc(self.relevance),
            "grounding": enc(self.grounding),
            "utility": enc(self.utility),
            "seq_logprob_mean": self.seq_logprob_mean,
            "rank_score": self.rank_score,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateScore":
        dec = lambda o: None if o is None else GroupConfidence.from_json(o)  # noqa: E731
        return cls(
            dec(obj["relevance"]),
            dec(obj["grounding"]),
            dec(obj["utility"]),
            float(obj["seq_logprob_mean"]),
            float(obj["rank_score"]),
        )


def rank_score(
    relevance: GroupConfidence | None,
    grounding: GroupConfidence | None,
    utility: GroupConfidence | None,
    seq_logprob_mean: float,
    weights: ScoreWeights = ScoreWeights(),
) -> float:
    s = lambda gc: 0.0 if gc is None else gc.scalar  # noqa: E731
    score = weights.w_rel * s(relevance) + weights.w_grd * s(grounding) + weights.w_utl * s(utility)
    if weights.include_seq_term:
        score += seq_logprob_mean
    return score


def build_score(relevance, grounding, utility, seq_logprob_mean, weights=ScoreWeights()) -> CandidateScore:
    return CandidateScore(
        relevance, grounding, utility, seq_logprob_mean,
        rank_score(relevance, grounding, utility, seq_logprob_mean, weights),
    )


# --------------------------------------------------------------------------- from completions


def classify_tokens(completion: Completion, vocab: Vocabulary = DEFAULT_VOCAB):
    """Split completion tokens into answer tokens and first-position reflection tokens.

    Returns ``(answer_tokens, group_positions)`` where ``group_positions`` maps a
    group to ``(token, variant)`` for the first token overlapping that group's
    surface in the text.
    """
    spans = masked_spans(completion.text, vocab)
    answer, groups = [], {}
    for start, end, tok in completion.token_spans():
        hit = None
        for s, e, kind, payload in spans:
            if s < end and start < e or (start == end and s <= start < e):
                hit = (kind, payload)
                break
        if hit is None:
            if end > start:
                answer.append(tok)
        elif hit[0] == "token":
            groups.setdefault(hit[1].group, (tok, hit[1]))
    return answer, groups


def group_logprobs(tok, chosen: Variant, vocab: Vocabulary = DEFAULT_VOCAB) -> dict[Variant, float]:
    """Variant logprobs at one position: the chosen token plus same-group alternatives."""
    out = {chosen: tok.logprob}
    for surface, lp in tok.top_logprobs.items():
        v = vocab.variant_of(surface)
        if v is not None and v.group is chosen.group and v not in out:
            out[v] = lp
    return out


def score_completion(
    completion: Completion,
    weights: ScoreWeights = ScoreWeights(),
    vocab: Vocabulary = DEFAULT_VOCAB,
    collapse=None,
) -> CandidateScore:
    answer, groups = classify_tokens(completion, vocab)
    confs = {}
    for group in (Group.RELEVANCE, Group.GROUNDING, Group.UTILITY):
        if group in groups:
            tok, variant = groups[group]
            confs[group] = normalize_group(group_logprobs(tok, variant, vocab), group, collapse)
        else:
            confs[group] = None
    seq = sum(t.logprob for t in answer) / len(answer) if answer else 0.0
    return build_score(confs[Group.RELEVANCE], confs[Group.GROUNDING], confs[Group.UTILITY], seq, weights)


def argmax_index(scores: Sequence[float]) -> int:
    """Index of the largest score; ties go to the earliest index."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best
