"""Regenerate the checked-in test fixtures under tests/fixtures/.

    python scripts/make_fixtures.py            # rewrite inputs and golden outputs

Inputs (queries, contexts, mock scenarios, QA corpus) come from a seeded
generator. Golden outputs (trace, metrics) are produced by running the CLI;
tests/test_acceptance.py checks the golden winners against an independent
hand-written ranking.
"""
from __future__ import annotations

import json
import random
import sys
from pathlib import Path

from reflectrag.cli import main
from reflectrag.prompts import passage_block, render

ROOT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"

CITIES = ["Lahore", "Doha", "Paris", "Lima", "Oslo", "Accra", "Hanoi", "Quito", "Riga", "Perth",
          "Turin", "Cusco", "Dakar", "Bern", "Kyoto", "Malmo", "Porto", "Sana", "Tunis", "Vilnius"]


def tok(token, p, alts=None):
    out = {"token": token, "p": round(p, 6)}
    if alts:
        out["alts"] = {k: round(v, 6) for k, v in alts.items()}
    return out


def reflection_tokens(rng, answer_words):
    """One scripted candidate: Relevance, answer words, Grounding, Utility, with alternatives."""
    rel = rng.uniform(0.05, 0.95)
    g = [rng.random() for _ in range(3)]
    g = [x / sum(g) for x in g]
    u = [rng.random() for _ in range(5)]
    u = [x / sum(u) for x in u]
    rel_tok = "[Relevant]" if rel >= 0.5 else "[Irrelevant]"
    rel_alt = "[Irrelevant]" if rel >= 0.5 else "[Relevant]"
    g_names = ["[Fully supported]", "[Partially supported]", "[No support]"]
    u_names = [f"[U:{i}]" for i in range(1, 6)]
    gi = max(range(3), key=lambda i: g[i])
    ui = max(range(5), key=lambda i: u[i])
    toks = [tok(rel_tok, max(rel, 1 - rel), {rel_alt: min(rel, 1 - rel)})]
    for i, w in enumerate(answer_words):
        toks.append(tok(w if i == 0 else " " + w, rng.uniform(0.3, 0.99)))
    toks.append(tok(g_names[gi], g[gi], {n: g[i] for i, n in enumerate(g_names) if i != gi}))
    toks.append(tok(u_names[ui], u[ui], {n: u[i] for i, n in enumerate(u_names) if i != ui}))
    return toks


def golden(rng, n_queries=20, n_contexts=3):
    d = ROOT / "golden"
    d.mkdir(parents=True, exist_ok=True)
    queries, stores, rules = [], [], []
    for qi in range(n_queries):
        qid = f"g{qi:02d}"
        gold = CITIES[qi]
        question = f"Which city hosts landmark number {qi}"
        queries.append({"id": qid, "question": question, "gold_answers": [gold]})
        contexts = []
        prompt = render("multihop", question=question)
        wrong = [c for c in CITIES if c != gold]
        for ci in range(n_contexts):
            passages = [f"Passage {qi}-{ci}-a about {rng.choice(CITIES)}.", f"Passage {qi}-{ci}-b mentions {gold}."]
            contexts.append({"id": f"{qid}-c{ci}", "passages": passages})
            answer = gold if rng.random() < 0.5 else rng.choice(wrong)
            words = [answer] if rng.random() < 0.7 else ["city", "of", answer]
            rules.append({"pattern": "*" + question + "*[RT]" + passage_block(passages),
                          "tokens": reflection_tokens(rng, words)})
        # a fourth stored context that top-n=3 must ignore
        contexts.append({"id": f"{qid}-c{n_contexts}", "passages": ["unused passage"]})
        stores.append({"query_id": qid, "contexts": contexts})
        parametric = gold if rng.random() < 0.4 else rng.choice(wrong)
        rules.append({"pattern": prompt + "[NoRT]",
                      "tokens": [tok(parametric, rng.uniform(0.2, 0.99)), tok("[U:4]", 0.8, {"[U:5]": 0.2})]})
    write_jsonl(d / "queries.jsonl", queries)
    write_jsonl(d / "contexts.jsonl", stores)
    (d / "scenario.json").write_text(json.dumps({"rules": rules}, indent=1) + "\n")


def sweep_fixture(rng, n_queries=200):
    """Queries whose [NoRT] generations carry scripted token probabilities."""
    d = ROOT / "sweep"
    d.mkdir(parents=True, exist_ok=True)
    queries, stores, rules = [], [], []
    for qi in range(n_queries):
        qid = f"s{qi:03d}"
        gold = CITIES[qi % len(CITIES)]
        question = f"Sweep question {qi} about a city"
        queries.append({"id": qid, "question": question, "gold_answers": [gold]})
        passages = [f"Sweep passage {qi} says the answer is {gold}.", f"Second sweep passage {qi}."]
        stores.append({"query_id": qid, "contexts": [{"id": f"{qid}-c0", "passages": passages}]})
        prompt = render("multihop", question=question)
        conf = rng.random()
        correct = rng.random() < conf  # confident parametric answers are more often right
        words = [gold if correct else CITIES[(qi + 7) % len(CITIES)], "city"]
        probs = [min(1.0, conf * rng.uniform(1.0, 1.3)), conf]
        rules.append({"pattern": prompt + "[NoRT]",
                      "tokens": [tok(words[0], probs[0]), tok(" " + words[1], probs[1]), tok("[U:4]", 0.9)]})
        rules.append({"pattern": "*" + question + "*[RT]" + passage_block(passages),
                      "tokens": [tok("[Relevant]", 0.9, {"[Irrelevant]": 0.1}), tok(gold, 0.9),
                                 tok("[Fully supported]", 0.8, {"[Partially supported]": 0.2}),
                                 tok("[U:5]", 0.9, {"[U:4]": 0.1})]})
    write_jsonl(d / "queries.jsonl", queries)
    write_jsonl(d / "contexts.jsonl", stores)
    (d / "scenario.json").write_text(json.dumps({"rules": rules}, indent=1) + "\n")


def qa_corpus(rng, n_pairs=100, n_nort=40):
    """Multi-hop pairs; the first ``n_nort`` have no supporting contexts (mock critic says [NoRT])."""
    order = list(range(n_pairs))
    rng.shuffle(order)
    nort = set(order[:n_nort])
    rows = []
    for i in range(n_pairs):
        answer = CITIES[i % len(CITIES)]
        sup = [] if i in nort else [f"Supporting fact {j} for pair {i}: {answer}." for j in range(rng.randint(2, 4))]
        non = [f"Distractor {j} for pair {i}." for j in range(rng.randint(2, 8))]
        rows.append({"id": f"mh{i:03d}", "question": f"Two-hop question {i}?", "answer": answer,
                     "supporting": sup, "nonsupporting": non})
    ROOT.mkdir(parents=True, exist_ok=True)
    write_jsonl(ROOT / "qa_pairs.jsonl", rows)


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def run_golden_outputs():
    d = ROOT / "golden"
    args = ["infer", "--queries", str(d / "queries.jsonl"), "--contexts", str(d / "contexts.jsonl"),
            "--scenario", str(d / "scenario.json"), "--output", str(d / "golden_trace.jsonl")]
    assert main(args) == 0
    assert main(["eval", "--trace", str(d / "golden_trace.jsonl"), "--gold", str(d / "queries.jsonl"),
                 "--output-dir", str(d / "golden_eval")]) == 0


if __name__ == "__main__":
    rng = random.Random(20240917)
    golden(rng)
    sweep_fixture(rng)
    qa_corpus(rng)
    run_golden_outputs()
    print("fixtures written to", ROOT, file=sys.stderr)
