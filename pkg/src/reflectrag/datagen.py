"""Multi-hop training-data preparation with reflection tokens.

Each QA pair with supporting contexts P and non-supporting contexts N becomes
either one no-retrieval instance or three retrieval instances (two supporting
passages, one supporting plus one distractor, two distractors).
"""
from __future__ import annotations

import json
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence, TextIO

from .errors import EmptyList, InsufficientContexts, MalformedOutput
from .prompts import passage_block, render
from .reflection import DEFAULT_VOCAB, Group, Variant, Vocabulary, parse_reflection_output


@dataclass(frozen=True)
class SourceQaPair:
    id: str
    question: str
    answer: str
    supporting: tuple[str, ...] = ()
    nonsupporting: tuple[str, ...] = ()

    @classmethod
    def from_json(cls, obj: dict) -> "SourceQaPair":
        return cls(
            str(obj["id"]), obj["question"], obj["answer"],
            tuple(obj.get("supporting") or ()), tuple(obj.get("nonsupporting") or ()),
        )


@dataclass(frozen=True)
class CriticVerdict:
    retrieval: Variant
    utility: Variant
    relevance: tuple[Variant, ...] = ()
    grounding: Variant | None = None


@dataclass(frozen=True)
class TrainingInstance:
    instruction: str
    output: str
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"instruction": self.instruction, "output": self.output, "provenance": self.provenance},
                          ensure_ascii=False, sort_keys=True)


class Critic(Protocol):
    def judge(self, pair: SourceQaPair) -> CriticVerdict: ...


class MockCritic:
    """Rule-based labels: [RT] iff supporting contexts exist, [U:5] iff the answer is non-empty."""

    def judge(self, pair: SourceQaPair) -> CriticVerdict:
        retrieval = Variant.RT if pair.supporting else Variant.NO_RT
        utility = Variant.U5 if pair.answer.strip() else Variant.U1
        return CriticVerdict(retrieval, utility)


class RemoteCritic:
    """Asks a critic model served over the completion protocol for Retrieval and Utility."""

    def __init__(self, backend, vocab: Vocabulary = DEFAULT_VOCAB, max_tokens: int = 8):
        self.backend = backend
        self.vocab = vocab
        self.max_tokens = max_tokens

    def judge(self, pair: SourceQaPair) -> CriticVerdict:
        prompt = render("critic", question=pair.question, answer=pair.answer)
        text = self.backend.complete(prompt, max_tokens=self.max_tokens).text
        found = {}
        for m in self.vocab.pattern.finditer(text):
            v = self.vocab.variant_of(m.group(0))
            found.setdefault(v.group, v)
        if Group.RETRIEVAL not in found or Group.UTILITY not in found:
            raise MalformedOutput(f"critic reply lacks Retrieval/Utility tokens: {text!r}")
        return CriticVerdict(found[Group.RETRIEVAL], found[Group.UTILITY])


def hop_unified_relevance(passage_flags: Sequence[bool]) -> Variant:
    """[Relevant] if any passage in the bundle is relevant."""
    if not passage_flags:
        raise EmptyList("relevance needs at least one passage flag")
    return Variant.RELEVANT if any(passage_flags) else Variant.IRRELEVANT


def contrastive_grounding(passage_support_flags: Sequence[bool]) -> Variant:
    """[Fully supported] only when every passage supports the answer."""
    if not passage_support_flags:
        raise EmptyList("grounding needs at least one passage flag")
    return Variant.FULLY_SUPPORTED if all(passage_support_flags) else Variant.PARTIALLY_SUPPORTED


def _retrieval_output(passages, flags, answer, utility, vocab):
    relevance = hop_unified_relevance(flags)
    parts = [vocab.surface(Variant.RT), passage_block(passages), vocab.surface(relevance), answer]
    if relevance is Variant.RELEVANT:
        parts.append(vocab.surface(contrastive_grounding(flags)))
    parts.append(vocab.surface(utility))
    return "".join(parts)


def build_instances(pair: SourceQaPair, critic: Critic, rng: random.Random,
                    vocab: Vocabulary = DEFAULT_VOCAB, verdict: CriticVerdict | None = None) -> list[TrainingInstance]:
    verdict = critic.judge(pair) if verdict is None else verdict
    instruction = render("multihop", question=pair.question)
    utility = verdict.utility
    if verdict.retrieval is Variant.NO_RT:
        out = vocab.surface(Variant.NO_RT) + pair.answer + vocab.surface(utility)
        return [TrainingInstance(instruction, out, {"source_id": pair.id, "rho_kind": "rho0", "passages": []})]

    P, N = list(pair.supporting), list(pair.nonsupporting)
    if len(P) < 2 or len(N) < 2:
        raise InsufficientContexts(f"{pair.id}: need >=2 supporting and >=2 non-supporting, got {len(P)}/{len(N)}")
    pid = [f"P{i}" for i in range(len(P))]
    nid = [f"N{i}" for i in range(len(N))]

    # sampling order is part of the output contract: rho1, then rho2 (P then N), then rho3
    p1, p2 = rng.sample(range(len(P)), 2)
    p3 = rng.randrange(len(P))
    n1 = rng.randrange(len(N))
    n2, n3 = rng.sample(range(len(N)), 2)

    bundles = [
        ("rho1", [P[p1], P[p2]], [True, True], [pid[p1], pid[p2]]),
        ("rho2", [P[p3], N[n1]], [True, False], [pid[p3], nid[n1]]),
        ("rho3", [N[n2], N[n3]], [False, False], [nid[n2], nid[n3]]),
    ]
    return [
        TrainingInstance(instruction, _retrieval_output(passages, flags, pair.answer, utility, vocab),
                         {"source_id": pair.id, "rho_kind": kind, "passages": ids})
        for kind, passages, flags, ids in bundles
    ]


def pair_rng(seed: int, pair_id: str) -> random.Random:
    """Per-pair generator so results do not depend on processing order."""
    return random.Random(f"{seed}:{pair_id}")


@dataclass
class CorpusSummary:
    instances_emitted: int = 0
    pairs_skipped: int = 0
    rt_pairs: int = 0
    rho_kind_counts: Counter = field(default_factory=Counter)

    def to_json(self) -> dict:
        return {
            "instances_emitted": self.instances_emitted,
            "pairs_skipped": self.pairs_skipped,
            "rt_pairs": self.rt_pairs,
            "rho_kind_counts": dict(sorted(self.rho_kind_counts.items())),
        }


def run_corpus(pairs: Iterable[SourceQaPair], critic: Critic, seed: int, sink: TextIO,
               vocab: Vocabulary = DEFAULT_VOCAB, workers: int = 1) -> CorpusSummary:
    """Stream JSONL instances for a corpus; per-pair failures are counted, not raised.

    Output order always equals input order, whatever ``workers`` is.
    """
    def process(pair):
        try:
            return build_instances(pair, critic, pair_rng(seed, pair.id), vocab), None
        except (InsufficientContexts, MalformedOutput) as exc:
            return None, exc

    summary = CorpusSummary()
    pairs = list(pairs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = pool.map(process, pairs)
    else:
        results = map(process, pairs)
    for instances, err in results:
        if err is not None:
            summary.pairs_skipped += 1
            continue
        if len(instances) == 3:
            summary.rt_pairs += 1
        for inst in instances:
            sink.write(inst.to_json() + "\n")
            summary.instances_emitted += 1
            summary.rho_kind_counts[inst.provenance["rho_kind"]] += 1
    return summary


def read_pairs(path) -> list[SourceQaPair]:
    pairs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pair = SourceQaPair.from_json(json.loads(line))
                if pair.id in seen:
                    raise ValueError(f"duplicate pair id {pair.id!r}")
                seen.add(pair.id)
                pairs.append(pair)
    return pairs


def check_instance(inst: TrainingInstance, vocab: Vocabulary = DEFAULT_VOCAB) -> None:
    """Raise AssertionError if an instance breaks the composition rules of its kind."""
    parsed = parse_reflection_output(inst.output, vocab)
    kind = inst.provenance["rho_kind"]
    ids = inst.provenance["passages"]
    if kind == "rho0":
        assert parsed.retrieval is Variant.NO_RT and not ids and parsed.relevance is None
        return
    assert parsed.retrieval is Variant.RT and len(ids) == 2 and len(set(ids)) == 2, (kind, ids)
    n_sup = sum(i.startswith("P") for i in ids)
    expected = {
        "rho1": (2, Variant.RELEVANT, Variant.FULLY_SUPPORTED),
        "rho2": (1, Variant.RELEVANT, Variant.PARTIALLY_SUPPORTED),
        "rho3": (0, Variant.IRRELEVANT, None),
    }[kind]
    assert (n_sup, parsed.relevance, parsed.grounding) == expected, (kind, ids, parsed)
