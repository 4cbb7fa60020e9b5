"""Command-line entry point.

Every subcommand accepts ``--config FILE``: a TOML file whose top-level keys
(or keys under a table named after the subcommand, e.g. ``[infer]``) use the
long flag names with dashes replaced by underscores. Flags given on the
command line override the file. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import AdaptiveConfig, Method, points_to_csv, points_to_json, sweep
from .errors import ConfigError, IdMismatch, ReflectRagError
from .presets import BEAM_SIZE, DEFAULT_WEIGHTS, MAX_DEPTH, MOE_PRESETS, REPORTED_BUDGETS, TOP_N_CONTEXTS, TOY_D_FF
from .reflection import ScoreWeights

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("reflectrag")

AUTH_ENV = "REFLECTRAG_API_KEY"


# --------------------------------------------------------------------------- config plumbing


def _load_config(path, command) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("--config", f"invalid TOML: {exc}") from None
    values = {k: v for k, v in data.items() if not isinstance(v, dict)}
    values.update(data.get(command, {}))
    return values


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv, command):
    pre, _ = parser.parse_known_args(argv)
    if getattr(pre, "config", None):
        values = _load_config(pre.config, command)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"config key {unknown[0]}", "not an option of this command")
        sub.set_defaults(**values)


def _require_file(value, flag):
    if value is None:
        raise ConfigError(flag, "is required")
    if not Path(value).is_file():
        raise ConfigError(flag, f"file not found: {value}")
    return Path(value)


def _parse_gammas(text) -> list[float]:
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            n = int(round((stop - start) / step)) + 1
            return [round(start + i * step, 12) for i in range(n)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("--gammas", f"cannot parse {text!r}; use 'a,b,c' or 'start:stop:step'") from None


def _weights(args) -> ScoreWeights:
    try:
        return ScoreWeights(args.w_rel, args.w_grd, args.w_utl, bool(args.seq_term))
    except ValueError as exc:
        raise ConfigError("--w-rel/--w-grd/--w-utl", str(exc)) from None


def _positive(value, flag):
    if value is None or value < 1:
        raise ConfigError(flag, f"must be >= 1, got {value}")
    return value


def _backend(args):
    from .backends import HttpBackend, MockBackend

    if args.backend == "mock":
        return MockBackend.from_scenario(_require_file(args.scenario, "--scenario"))
    if not args.endpoint:
        raise ConfigError("--endpoint", "is required with --backend http")
    return HttpBackend(args.endpoint, args.model or "default", os.environ.get(AUTH_ENV))


# --------------------------------------------------------------------------- commands


def cmd_prepare_data(args) -> int:
    from .datagen import MockCritic, RemoteCritic, read_pairs, run_corpus

    src = _require_file(args.input, "--input")
    if args.output is None:
        raise ConfigError("--output", "is required")
    _positive(args.workers, "--workers")
    if args.critic == "remote":
        if not args.endpoint:
            raise ConfigError("--endpoint", "is required with --critic remote")
        from .backends import HttpBackend
        critic = RemoteCritic(HttpBackend(args.endpoint, args.model or "critic", os.environ.get(AUTH_ENV)))
    else:
        critic = MockCritic()
    pairs = read_pairs(src)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", encoding="utf-8") as sink:
        summary = run_corpus(pairs, critic, args.seed, sink, workers=args.workers)
    print(json.dumps(summary.to_json(), sort_keys=True))
    return 0


def _engine_config(args):
    from .engine import EngineConfig

    return EngineConfig(template=args.template, weights=_weights(args), max_tokens=args.max_tokens,
                        workers=_positive(args.workers, "--workers"), continue_expansion=args.continue_expansion,
                        beam_combine=args.beam_combine)


def _adaptive(args):
    if args.adaptive is None:
        return None
    if args.gamma is None or not math.isfinite(args.gamma):
        raise ConfigError("--gamma", "a finite threshold is required with --adaptive")
    return AdaptiveConfig(Method(args.adaptive), args.gamma, args.compare)


def cmd_infer(args) -> int:
    from .engine import FileRetriever, answer_long, answer_short, read_queries, trace_metadata

    queries = read_queries(_require_file(args.queries, "--queries"))
    retriever = FileRetriever(_require_file(args.contexts, "--contexts"))
    if args.output is None:
        raise ConfigError("--output", "is required")
    config = _engine_config(args)
    adaptive = _adaptive(args)
    if args.long:
        _positive(args.beam, "--beam")
        _positive(args.depth, "--depth")
    backend = _backend(args)
    meta = trace_metadata(
        config, backend=args.backend, top_n=args.top_n, mode="long" if args.long else "short",
        adaptive=None if adaptive is None else {"method": adaptive.method.value, "gamma": adaptive.gamma,
                                                "compare": adaptive.compare},
        **({"beam_size": args.beam, "max_depth": args.depth, "beam_combine": args.beam_combine,
            "continue_expansion": args.continue_expansion} if args.long else {}),
    )
    failures = 0
    retrievals = 0
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for q in queries:
            row = {"id": q.id, "question": q.question}
            try:
                contexts = retriever.retrieve(q.id, args.top_n)
                if args.long:
                    res = answer_long(q.question, contexts, backend, beam_size=args.beam, max_depth=args.depth,
                                      config=config)
                    row.update(answer=res["answer"], retrieved=True, beam=res["beam_trace"])
                    retrievals += 1
                else:
                    res = answer_short(q.question, contexts, backend, adaptive=adaptive, config=config)
                    row.update(answer=res["answer"], **res["trace"])
                    retrievals += int(res["trace"]["retrieved"])
            except ReflectRagError as exc:
                failures += 1
                row.update(answer=None, error=f"{type(exc).__name__}: {exc}")
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            fh.flush()
    print(json.dumps({"queries": len(queries), "retrievals": retrievals, "failures": failures}, sort_keys=True))
    return 1 if failures else 0


class _SweepItem:
    def __init__(self, query, prompt, contexts):
        self.id = query.id
        self.prompt = prompt
        self.gold_answers = list(query.gold_answers)
        self.query = query
        self.contexts = contexts


def cmd_sweep(args) -> int:
    from .engine import FileRetriever, answer_short, base_prompt, read_queries
    from .evalkit import METRICS
    from .adaptive import no_retrieval_prompt
    from .reflection import parse_reflection_output

    queries = read_queries(_require_file(args.queries, "--queries"))
    retriever = FileRetriever(_require_file(args.contexts, "--contexts"))
    if args.output_dir is None:
        raise ConfigError("--output-dir", "is required")
    gammas = _parse_gammas(args.gammas)
    if not gammas or not all(math.isfinite(g) for g in gammas):
        raise ConfigError("--gammas", "need at least one finite threshold")
    config = _engine_config(args)
    backend = _backend(args)
    method = Method(args.method)
    items = [_SweepItem(q, base_prompt(q.question, config), retriever.retrieve(q.id, args.top_n)) for q in queries]

    def answer_fn(item, retrieve):
        if retrieve:
            return answer_short(item.query.question, item.contexts, backend, config=config)["answer"]
        completion = backend.complete(no_retrieval_prompt(item.prompt), max_tokens=config.max_tokens)
        return parse_reflection_output(completion.text).answer

    points = sweep(items, backend, method, gammas, METRICS[args.metric], answer_fn=answer_fn,
                   workers=config.workers, compare=args.compare)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{method.value}.csv").write_text(points_to_csv(points))
    (out / f"sweep_{method.value}.json").write_text(points_to_json(points) + "\n")
    print(points_to_csv(points), end="")
    return 0


def _spec_from_args(args, model=None):
    from .moe import MoeLayerSpec

    base_spec, _ = MOE_PRESETS["toy"]
    if model is not None and hasattr(model, "spec"):
        base_spec = model.spec
    elif model is not None:
        base_spec = MoeLayerSpec(model.d_model, base_spec.d_adapter, base_spec.n_experts, base_spec.top_k,
                                 len(model.blocks))
    try:
        return MoeLayerSpec(
            d_model=args.dmodel or base_spec.d_model,
            d_adapter=base_spec.d_adapter if args.adapter is None else args.adapter,
            n_experts=args.experts or base_spec.n_experts,
            top_k=args.k or base_spec.top_k,
            n_layers=args.layers or base_spec.n_layers,
        )
    except ValueError as exc:
        raise ConfigError("--dmodel/--adapter/--experts/--k/--layers", str(exc)) from None


def cmd_moe(args) -> int:
    from .moe import count_params, random_dense_model, routing_stats, upcycle
    from .moe.checkpoint import load_checkpoint, manifest_hash, save_checkpoint

    action = args.moe_command
    if action == "params":
        names = list(MOE_PRESETS) if args.preset == "all" else [args.preset]
        print("preset,field,value,reported")
        for name in names:
            spec, base = MOE_PRESETS[name]
            pc = count_params(spec, base)
            reported = REPORTED_BUDGETS.get(name, {})
            for field_name, value in pc.rows():
                rep = reported.get(field_name)
                print(f"{name},{field_name},{value},{'' if rep is None else repr(rep)}")
        return 0

    if action == "gradcheck":
        from .moe.layer import ExpertAdapter, MoeLayer, QuadraticLoss, SharedFfn, grad_check

        spec = _spec_from_args(args)
        rng = np.random.default_rng(args.seed)
        d, r = spec.d_model, max(spec.d_adapter, 1)
        ffn = SharedFfn(rng.standard_normal((d, 2 * d)) / np.sqrt(d), rng.standard_normal((2 * d, d)) / np.sqrt(2 * d))
        layer = MoeLayer(rng.standard_normal((spec.n_experts, d)), ffn,
                         [ExpertAdapter(rng.standard_normal((d, r)) / np.sqrt(d), rng.standard_normal((r, d)) / np.sqrt(r))
                          for _ in range(spec.n_experts)], spec.top_k)
        x = rng.standard_normal((args.tokens, d))
        err = grad_check(layer, QuadraticLoss(rng.standard_normal((args.tokens, d))), args.eps, x, args.sigma)
        ok = err < args.tol
        print(json.dumps({"max_relative_error": err, "tolerance": args.tol, "pass": ok}, sort_keys=True))
        return 0 if ok else 1

    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    spec = _spec_from_args(args, model)
    if model is None:
        model = random_dense_model(spec.d_model, TOY_D_FF, spec.n_layers, seed=0)

    if action == "upcycle":
        if args.output is None:
            raise ConfigError("--output", "is required")
        moe = upcycle(model, spec, args.seed)
        path = save_checkpoint(moe, args.output)
        print(json.dumps({"manifest": str(path), "manifest_sha256": manifest_hash(path),
                          "spec": spec.__dict__, "seed": args.seed}, sort_keys=True))
        return 0

    moe = model if hasattr(model, "spec") else upcycle(model, spec, args.seed)
    rng = np.random.default_rng(args.seed)
    tokens = rng.standard_normal((args.tokens, moe.spec.d_model))
    if action == "routes":
        stats = routing_stats(moe, tokens)
        text = stats.to_csv()
        if args.output:
            Path(args.output).parent.mkdir(parents=True, exist_ok=True)
            Path(args.output).write_text(text)
        print(text, end="")
        return 0
    if action == "demo":
        from .moe.layer import layer_load_balance_loss
        from .moe.model import rms_norm

        dense_out = model.forward(tokens) if not hasattr(model, "spec") else None
        out = moe.forward(tokens)
        x = moe.blocks[0].attention(tokens)
        lb = layer_load_balance_loss(rms_norm(x, moe.blocks[0].ffn_norm), moe.blocks[0].moe)
        report = {"tokens": args.tokens, "output_norm": float(np.linalg.norm(out)),
                  "layer0_load_balance_loss": lb}
        if dense_out is not None:
            report["matches_dense_bitwise"] = bool(np.array_equal(dense_out, out))
        print(json.dumps(report, sort_keys=True))
        return 0
    raise ConfigError("moe", f"unknown action {action}")


def cmd_eval(args) -> int:
    from .evalkit import evaluate_run, per_query_jsonl, table_to_csv

    trace = _require_file(args.trace, "--trace")
    gold = _require_file(args.gold, "--gold")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    try:
        table, rows = evaluate_run(trace, gold, metrics)
    except ValueError as exc:
        raise ConfigError("--metrics", str(exc)) from None
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
        (out / "metrics.csv").write_text(table_to_csv(table))
        (out / "per_query.jsonl").write_text(per_query_jsonl(rows))
    print(table_to_csv(table), end="")
    return 0


# --------------------------------------------------------------------------- parser


def _add_backend_flags(p):
    p.add_argument("--backend", choices=["mock", "http"], default="mock", help="language-model backend")
    p.add_argument("--scenario", help="mock backend scenario JSON")
    p.add_argument("--endpoint", help="HTTP completion endpoint URL (auth token from $%s)" % AUTH_ENV)
    p.add_argument("--model", help="model name sent to the HTTP endpoint")


def _add_engine_flags(p):
    p.add_argument("--queries", help="query JSONL: {id, question, gold_answers}")
    p.add_argument("--contexts", help="context store JSONL: {query_id, contexts: [{id, passages}]}")
    p.add_argument("--top-n", type=int, default=TOP_N_CONTEXTS, help="contexts used per query (default %(default)s)")
    p.add_argument("--template", choices=["multihop", "singlehop"], default="multihop", help="prompt template")
    p.add_argument("--w-rel", type=float, default=DEFAULT_WEIGHTS.w_rel, help="Relevance weight (default %(default)s)")
    p.add_argument("--w-grd", type=float, default=DEFAULT_WEIGHTS.w_grd, help="Grounding weight (default %(default)s)")
    p.add_argument("--w-utl", type=float, default=DEFAULT_WEIGHTS.w_utl, help="Utility weight (default %(default)s)")
    p.add_argument("--seq-term", action="store_true", default=False,
                   help="add the mean answer-token log-probability to the rank score")
    p.add_argument("--max-tokens", type=int, default=100, help="generation budget per call")
    p.add_argument("--workers", type=int, default=1, help="bounded worker pool size for candidate generation")
    p.add_argument("--compare", choices=["below", "above"], default="below",
                   help="retrieve when the confidence is below (default) or above gamma")
    p.add_argument("--continue-expansion", action="store_true", default=False,
                   help="long form: also expand a [Continue] child reusing the previous context")
    p.add_argument("--beam-combine", choices=["sum", "mean"], default="sum",
                   help="long form: combine segment scores by sum or mean")
    p.add_argument("--seed", type=int, default=0, help="seed (recorded; the mock backend is deterministic)")
    _add_backend_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflectrag", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("prepare-data", help="build reflection-token training instances from multi-hop QA pairs")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--input", help="source JSONL: {id, question, answer, supporting, nonsupporting}")
    p.add_argument("--output", help="output JSONL of {instruction, output, provenance}")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--critic", choices=["mock", "remote"], default="mock", help="critic implementation")
    p.add_argument("--endpoint", help="critic completion endpoint (with --critic remote)")
    p.add_argument("--model", help="critic model name")
    p.add_argument("--workers", type=int, default=1, help="parallel workers (output order is preserved)")
    p.set_defaults(func=cmd_prepare_data)

    p = subs.add_parser("infer", help="answer queries and write a trace JSONL")
    p.add_argument("--config", help="TOML config file")
    _add_engine_flags(p)
    p.add_argument("--output", help="trace JSONL path")
    p.add_argument("--adaptive", choices=[m.value for m in Method], help="enable adaptive retrieval with this score")
    p.add_argument("--gamma", type=float, help="adaptive retrieval threshold")
    p.add_argument("--long", action="store_true", default=False, help="long-form segment beam search")
    p.add_argument("--beam", type=int, default=BEAM_SIZE, help="beam size (default %(default)s)")
    p.add_argument("--depth", type=int, default=MAX_DEPTH, help="maximum search depth (default %(default)s)")
    p.set_defaults(func=cmd_infer)

    p = subs.add_parser("sweep", help="accuracy vs retrieval frequency over thresholds")
    p.add_argument("--config", help="TOML config file")
    _add_engine_flags(p)
    p.add_argument("--method", choices=[m.value for m in Method], default="meanp", help="confidence score")
    p.add_argument("--gammas", default="0:1:0.1", help="'a,b,c' or 'start:stop:step' (default %(default)s)")
    p.add_argument("--metric", choices=["acc", "em", "f1"], default="acc", help="answer scorer")
    p.add_argument("--output-dir", help="directory for sweep_<method>.csv/.json")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("moe", help="adapter-MoE tools")
    msubs = p.add_subparsers(dest="moe_command", required=True)
    for name, help_text in [
        ("upcycle", "upcycle a dense toy checkpoint into an adapter MoE"),
        ("demo", "run a toy upcycled model and report output and load balance"),
        ("gradcheck", "finite-difference check of router and adapter gradients"),
        ("params", "parameter budget table for named presets"),
        ("routes", "per-layer expert activation counts as CSV"),
    ]:
        mp = msubs.add_parser(name, help=help_text)
        mp.add_argument("--config", help="TOML config file")
        mp.add_argument("--seed", type=int, default=0, help="initialization / data seed")
        if name == "params":
            mp.add_argument("--preset", choices=[*MOE_PRESETS, "all"], default="all", help="preset name")
        else:
            mp.add_argument("--dmodel", type=int, help="hidden width (toy preset default)")
            mp.add_argument("--adapter", type=int, help="adapter bottleneck width")
            mp.add_argument("--experts", type=int, help="number of experts")
            mp.add_argument("--k", type=int, help="experts per token")
            mp.add_argument("--layers", type=int, help="number of layers")
        if name in ("upcycle", "demo", "routes"):
            mp.add_argument("--checkpoint", help="checkpoint directory (default: random dense toy model)")
            mp.add_argument("--output", help="output path")
            mp.add_argument("--tokens", type=int, default=1000, help="number of random input tokens")
        if name == "gradcheck":
            mp.add_argument("--sigma", choices=["silu", "tanh", "identity"], default="silu", help="adapter nonlinearity")
            mp.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
            mp.add_argument("--tol", type=float, default=1e-4, help="pass threshold on relative error")
            mp.add_argument("--tokens", type=int, default=4, help="tokens in the check batch")
        mp.set_defaults(func=cmd_moe)

    p = subs.add_parser("eval", help="score a trace against gold answers")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--trace", help="trace JSONL from infer")
    p.add_argument("--gold", help="query JSONL with gold_answers")
    p.add_argument("--metrics", default="em,f1,acc", help="comma list of em,f1,acc")
    p.add_argument("--output-dir", help="directory for metrics.csv/json and per_query.jsonl")
    p.set_defaults(func=cmd_eval)
    return parser


def _subparser(parser, argv):
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    words = [w for w in argv if not w.startswith("-")]
    if not words or words[0] not in action.choices:
        return None, None
    sub = action.choices[words[0]]
    name = words[0]
    if name == "moe" and len(words) > 1:
        inner = next(a for a in sub._actions if isinstance(a, argparse._SubParsersAction))
        if words[1] in inner.choices:
            return inner.choices[words[1]], "moe"
    return sub, name


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        sub, name = _subparser(parser, argv)
        if sub is not None:
            _apply_config(parser, sub, argv, name)
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IdMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ReflectRagError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
