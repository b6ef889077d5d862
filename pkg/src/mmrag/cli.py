"""Command-line entry point: ``mmrag <command> [options]``.

Every command exits 0 on success. On failure it prints exactly one JSON line
to stderr, ``{"error": <kind>, "path": <field or file>, "message": ...}``, and
exits with status 2 (usage/config) or 1 (runtime).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

from .config import ConfigError, PipelineConfig, load_config
from .evaluation import DEFAULT_KS, EvalRecord, evaluate
from .fixtures import bundled_eval_path, make_eval_records, toy_env_from_spec
from .gateway import GatewayError, StubModels, start_stub_server
from .grpo import train_toy_policy, write_curve_csv
from .index import IndexFormatError, VectorIndex
from .kb import build_kb, write_sidecar
from .pipeline import Retriever, answer_record, rerank_record, retrieve_record
from .refiner import entity_hit_rank, parse_refiner_output, total_reward
from .sweep import STAGES, SweepSetup, run_sweep, sweep_csv
from .synthetic import entity_table, make_entities, make_queries, make_sections

log = logging.getLogger("mmrag")


class CliError(Exception):
    def __init__(self, kind: str, message: str, path: str = "", status: int = 1):
        super().__init__(message)
        self.kind = kind
        self.path = path
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, status=2)


# -- I/O helpers --------------------------------------------------------------

def _read_jsonl(path) -> list[dict]:
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CliError("input", f"line {lineno}: {exc.msg}", str(path)) from None
    except OSError as exc:
        raise CliError("io", f"cannot read file: {exc.strerror}", str(path)) from None
    return rows


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError("io", f"cannot read file: {exc.strerror}", str(path)) from None
    except json.JSONDecodeError as exc:
        raise CliError("input", f"invalid JSON: {exc.msg}", str(path)) from None


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False)


@contextmanager
def _output(path) -> Iterator:
    if path in (None, "-"):
        yield sys.stdout
        return
    try:
        fh = open(path, "w", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise CliError("io", f"cannot write file: {exc.strerror}", str(path)) from None
    with fh:
        yield fh


def _write_jsonl(path, rows: Iterable[dict]) -> int:
    n = 0
    with _output(path) as fh:
        for row in rows:
            fh.write(_dump(row) + "\n")
            n += 1
    return n


def _load_index(path, cfg: PipelineConfig) -> VectorIndex:
    try:
        index = VectorIndex.load(path)
    except OSError as exc:
        raise CliError("io", f"cannot read index: {exc.strerror}", str(path)) from None
    except IndexFormatError as exc:
        raise CliError("index", str(exc), str(path)) from None
    if index.dim != cfg.fusion.dim:
        raise CliError("config", f"index has dim {index.dim} but d_vis + d_text = {cfg.fusion.dim}",
                       "fusion.d_vis", status=2)
    return index


# -- commands -----------------------------------------------------------------

def cmd_build_kb(args, cfg: PipelineConfig) -> None:
    try:
        with open(args.inp, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CliError("io", f"cannot read file: {exc.strerror}", args.inp) from None
    with cfg.make_gateway() as gateway:
        entries, diagnostics = build_kb(lines, cfg.kb_build, gateway, cfg.fusion, args.workers)
    if not entries:
        raise CliError("input", "no valid sections to index", args.inp)
    index = VectorIndex(cfg.fusion.dim)
    index.add_entries(entries)
    index.seal()
    header = index.save(args.out)
    if args.sidecar:
        write_sidecar(index.entries(), args.sidecar)
    for d in diagnostics:
        print(_dump({"diagnostic": d.message, "line": d.line}), file=sys.stderr)
    print(_dump({"entries": header.entry_count, "dim": header.dim, "crc32": header.checksum,
                 "skipped": len(diagnostics)}))


def cmd_retrieve(args, cfg: PipelineConfig) -> None:
    index = _load_index(args.index, cfg)
    queries = _read_jsonl(args.query)
    with cfg.make_gateway() as gateway:
        retriever = Retriever(index, gateway, cfg.fusion)
        rows = (retrieve_record(q, retriever, cfg.retrieval_k, cfg.use_refiner, timing=args.timing)
                for q in queries)
        _write_jsonl(args.out, rows)


def cmd_rerank(args, cfg: PipelineConfig) -> None:
    index = _load_index(args.index, cfg)
    records = _read_jsonl(args.candidates)
    with cfg.make_gateway() as gateway:
        _write_jsonl(args.out, (rerank_record(r, index, gateway, cfg.weights) for r in records))


def cmd_answer(args, cfg: PipelineConfig) -> None:
    records = _read_jsonl(args.contexts)
    with cfg.make_gateway() as gateway:
        rows = (answer_record(r, gateway, gateway, cfg.profile, timing=args.timing) for r in records)
        _write_jsonl(args.out, rows)


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise CliError("config", f"--ks must be comma-separated integers, got {text!r}", "ks", 2) from None
    if not ks or any(k < 1 for k in ks):
        raise CliError("config", "every K must be >= 1", "ks", 2)
    return ks


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    ks = _parse_ks(args.ks)
    path = args.records or bundled_eval_path()
    try:
        records = [EvalRecord.from_dict(r) for r in _read_jsonl(path)]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("input", f"invalid eval record: {exc}", str(path)) from None
    report = evaluate(records, ks)
    with _output(args.out) as fh:
        fh.write(json.dumps(report.to_dict(), indent=2) + "\n")
    if args.csv:
        with _output(args.csv) as fh:
            fh.write(report.to_csv())


def cmd_reward_check(args, cfg: PipelineConfig) -> None:
    """Score rollouts. Each record has ``rollout`` plus either ``hit_rank`` or
    ``retrieved_entities`` and ``gold_entity``."""
    rows = []
    for i, rec in enumerate(_read_jsonl(args.rollouts)):
        if "rollout" not in rec:
            raise CliError("input", f"record {i} has no rollout field", args.rollouts)
        output = parse_refiner_output(rec["rollout"])
        if "hit_rank" in rec:
            rank = rec["hit_rank"]
        elif "retrieved_entities" in rec and "gold_entity" in rec:
            rank = entity_hit_rank(rec["retrieved_entities"], rec["gold_entity"], cfg.reward_depth)
        else:
            raise CliError("input", f"record {i} needs hit_rank or retrieved_entities + gold_entity",
                           args.rollouts)
        try:
            reward = total_reward(output, rank)
        except (TypeError, ValueError) as exc:
            raise CliError("input", f"record {i}: {exc}", args.rollouts) from None
        row = {k: rec[k] for k in ("id", "query_id") if k in rec}
        row.update(well_formed=output.well_formed, refined_query=output.refined_query,
                   hit_rank=reward.hit_rank, format_reward=reward.format_reward,
                   retrieval_reward=reward.retrieval_reward, total=reward.total)
        rows.append(row)
    _write_jsonl(args.out, rows)


def cmd_grpo_train_toy(args, cfg: PipelineConfig) -> None:
    spec = _read_json(args.env) if args.env else {}
    if not isinstance(spec, dict):
        raise CliError("input", "environment file must hold a JSON object", args.env)
    try:
        env = toy_env_from_spec(spec, cfg.grpo.seed)
    except ValueError as exc:
        raise CliError("input", str(exc), args.env or "env") from None
    result = train_toy_policy(env, cfg.grpo)
    write_curve_csv(result.curve, args.curve)
    policy = result.policy.to_dict(cfg.grpo.sample_temperature)
    with _output(args.policy) as fh:
        fh.write(json.dumps(policy, indent=2) + "\n")


def cmd_sweep(args, cfg: PipelineConfig) -> None:
    grid = _read_json(args.grid)
    if not isinstance(grid, dict):
        raise CliError("input", "grid file must hold a JSON object", args.grid)
    index = _load_index(args.index, cfg)
    queries = _read_jsonl(args.queries)
    with cfg.make_gateway() as gateway:
        setup = SweepSetup(Retriever(index, gateway, cfg.fusion), gateway, gateway,
                           cfg.fusion.alpha, cfg.weights.beta1, cfg.weights.beta2, cfg.retrieval_k,
                           cfg.use_refiner, cfg.profile, args.stage)
        try:
            rows = run_sweep(grid, setup, queries)
        except ValueError as exc:
            raise CliError("config", str(exc), "grid", 2) from None
    with _output(args.out) as fh:
        fh.write(sweep_csv(rows))


def cmd_serve_stub(args, cfg: PipelineConfig) -> None:
    models = StubModels(cfg.gateway.stub_seed, cfg.fusion.d_text, cfg.fusion.d_vis)
    server, thread = start_stub_server(args.host, args.port, models, delay_ms=args.delay_ms,
                                       fail_first=args.fail_first, auth_token=args.auth_token)
    host, port = server.server_address[:2]
    print(_dump({"listening": f"http://{host}:{port}"}), flush=True)
    try:
        if args.serve_seconds is not None:
            time.sleep(args.serve_seconds)
        else:
            thread.join()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()


def cmd_synth(args, cfg: PipelineConfig) -> None:
    seed = cfg.grpo.seed
    entities = make_entities(args.entities, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "sections.jsonl", make_sections(entities, seed))
    _write_jsonl(out / "queries.jsonl", make_queries(entities, args.queries, seed, args.blur_every))
    _write_jsonl(out / "entities.jsonl", entity_table(entities))
    print(_dump({"out_dir": str(out), "entities": len(entities)}))


def cmd_make_eval_fixture(args, cfg: PipelineConfig) -> None:
    _write_jsonl(args.out, make_eval_records(seed=cfg.grpo.seed))


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--profile", choices=["evqa", "infoseek"], help="dataset profile")
    common.add_argument("--seed", type=int, help="seed for all randomness (stub models, sampling)")
    common.add_argument("--mode", choices=["stub", "remote"], help="gateway mode")
    common.add_argument("--endpoint", help="gateway endpoint URL")
    common.add_argument("--alpha", type=float, help="image weight in the query vector")
    common.add_argument("--beta1", type=float, help="retrieval weight in stage-1 fusion")
    common.add_argument("--beta2", type=float, help="stage-1 weight in stage-2 fusion")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mmrag", description="Multimodal retrieval-augmented VQA pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-kb", parents=[common], help="encode sections into a binary index")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", help="also write entry metadata as JSONL")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_build_kb)

    p = sub.add_parser("retrieve", parents=[common], help="top-k retrieval for query records")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, dest="retrieval_k")
    p.add_argument("--no-refine", action="store_true", help="skip the query refiner")
    p.add_argument("--timing", action="store_true", help="record wall-clock stage timings")
    p.add_argument("--out")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("rerank", parents=[common], help="two-stage rerank of retrieved candidates")
    p.add_argument("--index", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("answer", parents=[common], help="inspector-routed answering")
    p.add_argument("--contexts", required=True)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("evaluate", parents=[common], help="metrics report (JSON, optional CSV)")
    p.add_argument("--records", help="eval JSONL (default: bundled 50-record fixture)")
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reward-check", parents=[common], help="score refiner rollouts")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reward_check)

    p = sub.add_parser("grpo-train-toy", parents=[common], help="train the toy rewrite policy")
    p.add_argument("--env", help="toy environment JSON (default: built-in)")
    p.add_argument("--steps", type=int)
    p.add_argument("--curve", required=True)
    p.add_argument("--policy")
    p.set_defaults(func=cmd_grpo_train_toy)

    p = sub.add_parser("sweep", parents=[common], help="grid sweep over alpha, beta1, beta2, k")
    p.add_argument("--grid", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, dest="retrieval_k")
    p.add_argument("--stage", choices=STAGES, default="retrieval")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve-stub", parents=[common], help="run the deterministic stub model server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8808)
    p.add_argument("--delay-ms", type=int, default=0)
    p.add_argument("--fail-first", type=int, default=0)
    p.add_argument("--auth-token")
    p.add_argument("--serve-seconds", type=float, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_serve_stub)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic sections/queries fixture")
    p.add_argument("--entities", type=int, default=50)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--blur-every", type=int, default=3)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("make-eval-fixture", parents=[common], help="regenerate the bundled eval records")
    p.add_argument("--out")
    p.set_defaults(func=cmd_make_eval_fixture)
    return parser


def _overrides(args) -> dict:
    o = {
        "profile": args.profile,
        "fusion.alpha": args.alpha,
        "weights.beta1": args.beta1,
        "weights.beta2": args.beta2,
        "gateway.mode": args.mode,
        "gateway.endpoint_url": args.endpoint,
        "retrieval_k": getattr(args, "retrieval_k", None),
        "grpo.steps": getattr(args, "steps", None),
    }
    if args.seed is not None:
        o["gateway.stub_seed"] = args.seed
        o["grpo.seed"] = args.seed
    if getattr(args, "no_refine", False):
        o["use_refiner"] = False
    return o


def _fail(kind: str, message: str, path: str = "") -> None:
    print(_dump({"error": kind, "path": path, "message": " ".join(str(message).split())}), file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, _overrides(args))
        args.func(args, cfg)
    except CliError as exc:
        _fail(exc.kind, str(exc), exc.path)
        return exc.status
    except ConfigError as exc:
        _fail("config", str(exc), exc.path)
        return 2
    except GatewayError as exc:
        _fail("gateway", str(exc))
        return 1
    except (KeyError, TypeError, ValueError) as exc:
        _fail("input", repr(exc) if isinstance(exc, KeyError) else str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
