"""Completion records exchanged between backends and the engine."""
from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class TokenLogprob:
    """One generated token with its natural-log probability.

    ``top_logprobs`` holds the alternatives the backend reported at the same
    position (surface -> logprob); the chosen token may or may not be in it.
    """

    token: str
    logprob: float
    top_logprobs: dict[str, float] = field(default_factory=dict)

    @property
    def prob(self) -> float:
        return math.exp(self.logprob)

    def to_json(self):
        out = [self.token, self.logprob]
        if self.top_logprobs:
            out.append(dict(self.top_logprobs))
        return out

    @classmethod
    def from_json(cls, obj) -> "TokenLogprob":
        if isinstance(obj, dict):
            return cls(obj["token"], float(obj["logprob"]), dict(obj.get("top_logprobs") or {}))
        token, logprob, *rest = obj
        return cls(token, float(logprob), dict(rest[0]) if rest else {})


@dataclass(frozen=True)
class Completion:
    text: str
    tokens: tuple[TokenLogprob, ...]
    attempts: int = 1
    finish_reason: str | None = None

    def token_spans(self):
        """Yield (start, end, token) character spans, assuming text == concat(tokens)."""
        pos = 0
        for tok in self.tokens:
            yield pos, pos + len(tok.token), tok
            pos += len(tok.token)


def completion_from_tokens(tokens, attempts=1, finish_reason=None) -> Completion:
    tokens = tuple(tokens)
    return Completion("".join(t.token for t in tokens), tokens, attempts, finish_reason)
