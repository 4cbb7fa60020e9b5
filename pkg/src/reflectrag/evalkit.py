"""QA metrics (EM, token F1, containment accuracy) and run-level aggregation."""
from __future__ import annotations

import csv
import io
import json
import re
import string
from collections import Counter
from typing import Iterable, Sequence

from .errors import IdMismatch

NORMALIZATION_VERSION = "squad-v1: lower, strip punctuation, drop a/an/the, collapse whitespace"

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(pred: str, golds: Sequence[str]) -> int:
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred_tokens, gold_tokens) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str]) -> float:
    pt = normalize_answer(pred).split()
    return max(_f1(pt, normalize_answer(g).split()) for g in golds)


def short_form_accuracy(pred: str, golds: Sequence[str]) -> int:
    """1 if any normalized gold occurs inside the normalized prediction."""
    p = normalize_answer(pred)
    return int(any(normalize_answer(g) in p for g in golds))


METRICS = {"em": exact_match, "f1": token_f1, "acc": short_form_accuracy}


def _read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def score_records(preds: dict[str, str | None], golds: dict[str, list[str]], metrics: Iterable[str]) -> list[dict]:
    metrics = list(metrics)
    rows = []
    for qid, gold in golds.items():
        pred = preds.get(qid)
        row = {"id": qid, "pred": pred, "gold": list(gold), "missing": pred is None}
        for m in metrics:
            row[m] = 0 if pred is None or not gold else METRICS[m](pred, gold)
        rows.append(row)
    return rows


def aggregate(rows: Sequence[dict], metrics: Iterable[str]) -> dict:
    metrics = list(metrics)
    n = len(rows)
    table = {m: (sum(r[m] for r in rows) / n if n else 0.0) for m in metrics}
    return {
        "n": n,
        "missing": sum(1 for r in rows if r.get("missing")),
        "metrics": table,
        "normalization": NORMALIZATION_VERSION,
    }


def evaluate_run(trace_path, gold_path, metrics: Iterable[str] = ("em", "f1", "acc")) -> tuple[dict, list[dict]]:
    """Score a trace JSONL (``{id, answer}`` per line) against gold ``{id, gold_answers}``.

    Gold queries without a prediction score 0 and are counted as missing.
    Predictions for unknown ids, or no overlap at all, raise :class:`IdMismatch`.
    """
    metrics = list(metrics)
    for m in metrics:
        if m not in METRICS:
            raise ValueError(f"unknown metric {m!r}")
    preds = {}
    for row in _read_jsonl(trace_path):
        if "id" not in row:
            continue  # metadata line
        preds[str(row["id"])] = row.get("answer")
    golds = {str(r["id"]): list(r.get("gold_answers") or []) for r in _read_jsonl(gold_path)}
    extra = sorted(set(preds) - set(golds))
    if extra:
        raise IdMismatch(f"predictions for ids not in gold file: {extra[:10]}", extra)
    if not golds or not set(preds) & set(golds):
        raise IdMismatch("trace and gold files share no query ids", sorted(golds)[:10])
    rows = score_records(preds, golds, metrics)
    return aggregate(rows, metrics), rows


def reaggregate(per_query_path, metrics: Iterable[str] = ("em", "f1", "acc")) -> dict:
    return aggregate(_read_jsonl(per_query_path), metrics)


def table_to_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "n", "missing"])
    for m, v in table["metrics"].items():
        w.writerow([m, repr(v), table["n"], table["missing"]])
    return buf.getvalue()


def per_query_jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)
