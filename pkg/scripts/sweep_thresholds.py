"""Retrieval frequency vs accuracy on the scripted sweep fixture, for each confidence score.

    python scripts/sweep_thresholds.py [--out runs/sweep]

Writes sweep_<method>.csv/.json per method and prints a side-by-side table.
"""
from __future__ import annotations

import argparse
import contextlib
import io
from pathlib import Path

from reflectrag.adaptive import points_from_csv
from reflectrag.cli import main

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "sweep"


def run(method: str, out: Path) -> list:
    args = ["sweep", "--queries", str(FIXTURE / "queries.jsonl"), "--contexts", str(FIXTURE / "contexts.jsonl"),
            "--scenario", str(FIXTURE / "scenario.json"), "--method", method, "--output-dir", str(out)]
    with contextlib.redirect_stdout(io.StringIO()):
        if main(args) != 0:
            raise SystemExit(f"sweep failed for {method}")
    return points_from_csv((out / f"sweep_{method}.csv").read_text())


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep", help="output directory")
    out = Path(ap.parse_args().out)
    curves = {m: run(m, out) for m in ("minp", "meanp")}
    print(f"{'gamma':>6} | {'minp freq':>9} {'acc':>6} | {'meanp freq':>10} {'acc':>6}")
    for a, b in zip(curves["minp"], curves["meanp"]):
        print(f"{a.gamma:6.2f} | {a.retrieval_frequency:9.3f} {a.accuracy:6.3f} | {b.retrieval_frequency:10.3f} {b.accuracy:6.3f}")
