"""Command line driver: batch compilation, completion, benchmarks, serving."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import compile as compile_mod
from .compile import (EXIT_OK, CompileError, bench_generate, bench_run,
                      compile_full, compile_quick, vio2vo)


def _report(result: compile_mod.CompileResult) -> int:
    for error in result.document_errors:
        where = f" (span {error.span_id})" if error.span_id is not None else ""
        print(f"error{where}: {error.message}", file=sys.stderr)
    for name, report in result.proof_failures:
        print(f"proof of {name} failed: {report.message}", file=sys.stderr)
    if result.exit_code == EXIT_OK:
        print(f"wrote {result.path} ({result.wall_s:.2f}s)")
    return result.exit_code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sprover",
        description="Miniature proof assistant with asynchronous checking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_compile = sub.add_parser("compile", help="compile a .v source file")
    p_compile.add_argument("file", type=Path)
    p_compile.add_argument("--quick", action="store_true",
                           help="skip proofs; write an incomplete .vio file")
    p_compile.add_argument("--workers", type=int, default=0,
                           help="worker processes for proof checking")
    p_compile.add_argument("-I", dest="include", action="append", default=[],
                           metavar="DIR", help="add DIR to the module search path")

    p_vio2vo = sub.add_parser("vio2vo", help="complete an incomplete .vio file")
    p_vio2vo.add_argument("file", type=Path)
    p_vio2vo.add_argument("--workers", type=int, default=0)

    p_bench = sub.add_parser("bench", help="benchmark harness")
    bench_sub = p_bench.add_subparsers(dest="bench_command", required=True)
    p_gen = bench_sub.add_parser("gen", help="generate a synthetic corpus")
    p_gen.add_argument("--theorems", type=int, default=16)
    p_gen.add_argument("--depth", type=int, default=12)
    p_gen.add_argument("--fraction", type=float, default=0.9)
    p_gen.add_argument("-o", "--output", type=Path, default=Path("bench.v"))
    p_run = bench_sub.add_parser("run", help="time quick vs full compilation")
    p_run.add_argument("--theorems", type=int, default=16)
    p_run.add_argument("--depth", type=int, default=12)
    p_run.add_argument("--fraction", type=float, default=0.9)
    p_run.add_argument("--workers", type=int, default=4)

    p_serve = sub.add_parser("serve", help="run the editing protocol service")
    p_serve.add_argument("--listen", metavar="HOST:PORT",
                         help="serve the JSON protocol over TCP")
    p_serve.add_argument("--web", metavar="HOST:PORT",
                         help="serve the web UI and websocket bridge")
    p_serve.add_argument("--workers", type=int, default=None)
    p_serve.add_argument("-I", dest="include", action="append", default=[],
                         metavar="DIR")

    args = parser.parse_args(argv)
    try:
        if args.command == "compile":
            if args.quick:
                return _report(compile_quick(args.file, include=args.include))
            return _report(compile_full(args.file, workers=args.workers,
                                        include=args.include))
        if args.command == "vio2vo":
            return _report(vio2vo(args.file, workers=args.workers))
        if args.command == "bench":
            if args.bench_command == "gen":
                text = bench_generate(args.theorems, args.depth, args.fraction)
                args.output.write_text(text, encoding="utf-8")
                print(f"wrote {args.output} ({args.theorems} theorems)")
                return EXIT_OK
            report = bench_run(args.theorems, args.depth, args.fraction,
                               args.workers)
            print(json.dumps(report, indent=2))
            return EXIT_OK
        if args.command == "serve":
            from . import protocol
            include = tuple(args.include)
            if args.web:
                from .webapp import serve_web
                host, _, port = args.web.rpartition(":")
                serve_web(host or "127.0.0.1", int(port),
                          workers=args.workers, include=include)
            elif args.listen:
                host, _, port = args.listen.rpartition(":")
                protocol.serve_tcp(host or "127.0.0.1", int(port),
                                   workers=args.workers, include=include)
            else:
                protocol.serve_stdio(workers=args.workers, include=include)
            return EXIT_OK
    except CompileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
