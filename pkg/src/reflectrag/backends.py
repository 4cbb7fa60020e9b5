"""Language-model backends: a scripted deterministic mock and an HTTP completion client."""
from __future__ import annotations

import json
import logging
import math
import re
import time
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .completion import Completion, TokenLogprob, completion_from_tokens
from .errors import BackendError, BadScenario, MissingLogprobs

log = logging.getLogger(__name__)


class Backend(Protocol):
    def complete(self, prompt: str, stop: Sequence[str] | None = None, max_tokens: int = 100) -> Completion: ...

    def token_logprobs(self, prompt: str, continuation: str) -> list[float]: ...


# --------------------------------------------------------------------------- mock


def _glob_regex(pattern: str) -> re.Pattern:
    # only * and ? are wildcards; brackets are literal (prompts contain [RT] etc.)
    parts = []
    for ch in pattern:
        parts.append(".*" if ch == "*" else "." if ch == "?" else re.escape(ch))
    return re.compile("".join(parts), re.S)


def _parse_token(obj) -> TokenLogprob:
    """Accept ``[tok, logprob, {alt: logprob}]`` or ``{"token", "p"|"logprob", "alts"|"top_logprobs"}``."""
    if isinstance(obj, (list, tuple)):
        return TokenLogprob.from_json(obj)
    if not isinstance(obj, dict) or "token" not in obj:
        raise BadScenario(f"bad token entry {obj!r}")
    if "logprob" in obj:
        lp = float(obj["logprob"])
    elif "p" in obj:
        p = float(obj["p"])
        if not 0.0 <= p <= 1.0:
            raise BadScenario(f"probability {p} outside [0, 1]")
        lp = math.log(p) if p > 0 else -math.inf
    else:
        raise BadScenario(f"token {obj['token']!r} needs 'p' or 'logprob'")
    top = {k: float(v) for k, v in (obj.get("top_logprobs") or {}).items()}
    for k, v in (obj.get("alts") or {}).items():
        top[k] = math.log(v) if v > 0 else -math.inf
    return TokenLogprob(obj["token"], lp, top)


class MockBackend:
    """Deterministic backend driven by a scenario of prompt patterns.

    Scenario JSON::

        {"rules": [{"pattern": "*Q1*", "tokens": [{"token": "Paris", "p": 0.9}]}, ...],
         "fallback": {"tokens": [...]}}          # optional

    The longest matching pattern wins; equal lengths resolve to the earliest rule.
    Completions are cut at the first stop string, if given.
    """

    def __init__(self, rules, fallback=None):
        self.rules = []
        for i, rule in enumerate(rules):
            try:
                pattern = rule["pattern"]
                tokens = tuple(_parse_token(t) for t in rule["tokens"])
            except (KeyError, TypeError) as exc:
                raise BadScenario(f"rule {i}: {exc}") from exc
            self.rules.append((pattern, _glob_regex(pattern), tokens))
        self.fallback = None if fallback is None else tuple(_parse_token(t) for t in fallback["tokens"])
        self.calls = 0

    @classmethod
    def from_scenario(cls, script) -> "MockBackend":
        if isinstance(script, (str, Path)):
            try:
                script = json.loads(Path(script).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise BadScenario(f"cannot read scenario {script}: {exc}") from exc
        if not isinstance(script, dict) or not isinstance(script.get("rules", []), list):
            raise BadScenario("scenario must be an object with a 'rules' list")
        return cls(script.get("rules", []), script.get("fallback"))

    def _lookup(self, prompt: str):
        best = None
        for pattern, rx, tokens in self.rules:
            if rx.fullmatch(prompt) and (best is None or len(pattern) > len(best[0])):
                best = (pattern, tokens)
        if best is not None:
            return best[1]
        if self.fallback is not None:
            return self.fallback
        raise BackendError(f"no scenario rule matches prompt {prompt[-80:]!r}")

    def complete(self, prompt: str, stop: Sequence[str] | None = None, max_tokens: int = 100) -> Completion:
        self.calls += 1
        tokens = list(self._lookup(prompt))[:max_tokens]
        if stop:
            text, kept = "", []
            for t in tokens:
                text += t.token
                kept.append(t)
                if any(s in text for s in stop):
                    break
            tokens = kept
        return completion_from_tokens(tokens, finish_reason="stop")

    def token_logprobs(self, prompt: str, continuation: str) -> list[float]:
        out, rest = [], continuation
        for t in self._lookup(prompt):
            if not rest:
                break
            if not rest.startswith(t.token):
                raise BackendError(f"continuation diverges from scripted tokens at {rest[:20]!r}")
            out.append(t.logprob)
            rest = rest[len(t.token):]
        if rest:
            raise BackendError("continuation longer than scripted completion")
        return out


# --------------------------------------------------------------------------- http


TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HttpBackend:
    """Client for a JSON completion endpoint that returns per-token log-probabilities.

    Requests carry ``{model, prompt, max_tokens, temperature, logprobs}``; the
    response is read from ``choices[0].text`` and ``choices[0].logprobs``
    (``tokens``, ``token_logprobs``, ``top_logprobs``).
    """

    def __init__(self, endpoint: str, model: str, auth: str | None = None, *, temperature: float = 0.0,
                 top_logprobs: int = 5, attempts: int = 3, backoff: float = 0.5, timeout: float = 60.0,
                 extra: dict | None = None):
        self.endpoint = endpoint
        self.model = model
        self.auth = auth
        self.temperature = temperature
        self.top_logprobs = top_logprobs
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.extra = dict(extra or {})

    def _headers(self):
        h = {"Content-Type": "application/json"}
        if self.auth:
            h["Authorization"] = f"Bearer {self.auth}"
        return h

    def _post(self, payload) -> tuple[dict, int]:
        last = None
        for attempt in range(1, self.attempts + 1):
            try:
                resp = requests.post(self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = BackendError(f"request failed: {exc}")
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json(), attempt
                    except ValueError as exc:
                        raise BackendError("response is not JSON", 200, resp.text[:200]) from exc
                last = BackendError(f"HTTP {resp.status_code}", resp.status_code, resp.text[:200])
                if resp.status_code not in TRANSIENT_STATUS:
                    raise last
            if attempt < self.attempts:
                log.warning("completion attempt %d failed (%s); retrying", attempt, last)
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise last

    def _payload(self, prompt, max_tokens, stop):
        payload = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": self.temperature,
            "logprobs": self.top_logprobs,
            **self.extra,
        }
        if stop:
            payload["stop"] = list(stop)
        return payload

    @staticmethod
    def _choice(body):
        try:
            return body["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("response has no choices", 200, json.dumps(body)[:200]) from exc

    def complete(self, prompt: str, stop: Sequence[str] | None = None, max_tokens: int = 100) -> Completion:
        body, attempts = self._post(self._payload(prompt, max_tokens, stop))
        choice = self._choice(body)
        lp = choice.get("logprobs")
        if not lp or lp.get("tokens") is None or lp.get("token_logprobs") is None:
            raise MissingLogprobs("server omitted token log-probabilities", 200, json.dumps(choice)[:200])
        tops = lp.get("top_logprobs") or [None] * len(lp["tokens"])
        tokens = [
            TokenLogprob(tok, -math.inf if l is None else float(l), dict(top or {}))
            for tok, l, top in zip(lp["tokens"], lp["token_logprobs"], tops)
        ]
        # token spans drive scoring, so the text is rebuilt from the tokens
        return Completion("".join(t.token for t in tokens), tuple(tokens), attempts, choice.get("finish_reason"))

    def token_logprobs(self, prompt: str, continuation: str) -> list[float]:
        """Score a forced continuation using prompt echo (``max_tokens=0, echo=true``)."""
        payload = self._payload(prompt + continuation, 0, None)
        payload.update(echo=True, logprobs=0)
        body, _ = self._post(payload)
        lp = self._choice(body).get("logprobs") or {}
        offsets, values = lp.get("text_offset"), lp.get("token_logprobs")
        if offsets is None or values is None:
            raise MissingLogprobs("echo response lacks text_offset/token_logprobs")
        return [float(v) for off, v in zip(offsets, values) if off >= len(prompt) and v is not None]
