"""Command-line client of the reduced-order control service.

Every subcommand builds a service request and posts it either to an
in-process application instance (the default, no daemon needed) or to a
running server given with ``--server``.  Exit codes: 0 success, 2
configuration error, 3 solver failure, 4 parameter-domain error.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import io
import json
import sys

import httpx

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DOMAIN = 4

_KIND_EXIT = {"configuration": EXIT_CONFIG, "solver": EXIT_SOLVER, "domain": EXIT_DOMAIN}


class ServiceClient:
    """Posts requests to a remote server or an in-process app."""

    def __init__(self, server: str | None = None):
        self.server = server.rstrip("/") if server else None

    def post(self, path: str, payload: dict):
        if self.server is not None:
            response = httpx.post(self.server + path, json=payload, timeout=None)
            return response.status_code, response.json()

        async def _call():
            from .service import create_app
            transport = httpx.ASGITransport(app=create_app())
            async with httpx.AsyncClient(transport=transport,
                                         base_url="http://romocp") as client:
                response = await client.post(path, json=payload, timeout=None)
                return response.status_code, response.json()

        return asyncio.run(_call())


def _parse_mu(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise SystemExit(f"--mu expects comma-separated numbers, got {text!r}")


def _parse_int_list(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise SystemExit(f"expected comma-separated integers, got {text!r}")


def _fail(status: int, body) -> int:
    detail = body.get("detail") if isinstance(body, dict) else None
    if isinstance(detail, dict) and detail.get("kind") in _KIND_EXIT:
        print(f"error ({detail['kind']}): {detail.get('message', '')}", file=sys.stderr)
        return _KIND_EXIT[detail["kind"]]
    print(f"error (HTTP {status}): {json.dumps(body)[:2000]}", file=sys.stderr)
    if status in (400, 404, 422):
        return EXIT_CONFIG
    return EXIT_SOLVER


def _report_to_csv(report: dict) -> str:
    columns: list = []
    for row in report.get("rows", []):
        for key in row:
            if key not in columns:
                columns.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in report.get("rows", []):
        writer.writerow({k: repr(v) if isinstance(v, float) else v
                         for k, v in row.items()})
    return buf.getvalue()


def _emit(payload: dict, out: str | None, fmt: str, is_report: bool) -> None:
    if is_report and fmt == "csv":
        text = _report_to_csv(payload)
    else:
        text = json.dumps(payload, indent=2) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="romocp",
        description="Offline/online reduced-order optimal control workflows")
    parser.add_argument("--server", help="base URL of a running service "
                                         "(default: run in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    offline = sub.add_parser("offline", help="train a reduced cache")
    offline.add_argument("--config", required=True, help="problem config JSON path")
    offline.add_argument("--cache", required=True, help="output cache path")
    offline.add_argument("--archive",
                         help="snapshot archive path (default: <cache>.snapshots)")
    offline.add_argument("--out", help="write the JSON summary to this path")

    online = sub.add_parser("online", help="solve one parameter query")
    online.add_argument("--cache", required=True)
    online.add_argument("--mu", required=True, help="comma-separated components")
    online.add_argument("--fields", action="store_true",
                        help="include reconstructed fields")
    online.add_argument("--out", help="write the JSON record to this path")

    convergence = sub.add_parser("convergence", help="error-vs-basis-count study")
    convergence.add_argument("--cache", required=True)
    convergence.add_argument("--config", help="truth config (defaults to the cache's)")
    convergence.add_argument("--basis-list", required=True)
    convergence.add_argument("--test-size", type=int, default=100)
    convergence.add_argument("--seed", type=int, default=0)
    convergence.add_argument("--out")
    convergence.add_argument("--format", choices=["csv", "json"], default="csv")

    speedup = sub.add_parser("speedup", help="wall-time comparison study")
    speedup.add_argument("--cache", required=True)
    speedup.add_argument("--config")
    speedup.add_argument("--basis-list", required=True)
    speedup.add_argument("--repetitions", type=int, default=20)
    speedup.add_argument("--seed", type=int, default=0)
    speedup.add_argument("--out")
    speedup.add_argument("--format", choices=["csv", "json"], default="csv")

    compare = sub.add_parser("compare-pod", help="per-variable vs stacked compression")
    compare.add_argument("--config", required=True)
    compare.add_argument("--basis-list", required=True)
    compare.add_argument("--training-count", type=int, default=50)
    compare.add_argument("--test-size", type=int, default=20)
    compare.add_argument("--seed", type=int, default=0)
    compare.add_argument("--out")
    compare.add_argument("--format", choices=["csv", "json"], default="csv")

    export = sub.add_parser("export", help="write fields at a query point as VTK")
    export.add_argument("--cache", required=True)
    export.add_argument("--mu", required=True)
    export.add_argument("--out", required=True, help="VTK output path")
    export.add_argument("--no-truth", action="store_true",
                        help="skip the full-order comparison fields")

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    client = ServiceClient(args.server)
    try:
        return _dispatch(client, args)
    except httpx.HTTPError as exc:
        print(f"error (connection): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(client: ServiceClient, args) -> int:
    if args.command == "offline":
        archive_path = args.archive or args.cache + ".snapshots"
        status, body = client.post("/offline", {
            "config_path": args.config, "cache_path": args.cache,
            "archive_path": archive_path})
        if status != 200:
            return _fail(status, body)
        _emit(body, args.out, "json", is_report=False)
        return EXIT_OK

    if args.command == "online":
        status, body = client.post("/online", {
            "cache_path": args.cache, "mu": _parse_mu(args.mu),
            "include_fields": args.fields})
        if status != 200:
            return _fail(status, body)
        _emit(body, args.out, "json", is_report=False)
        return EXIT_OK

    if args.command == "convergence":
        status, body = client.post("/studies/convergence", {
            "cache_path": args.cache, "config_path": args.config,
            "basis_list": _parse_int_list(args.basis_list),
            "test_size": args.test_size, "seed": args.seed})
        if status != 200:
            return _fail(status, body)
        _emit(body, args.out, args.format, is_report=True)
        return EXIT_OK

    if args.command == "speedup":
        status, body = client.post("/studies/speedup", {
            "cache_path": args.cache, "config_path": args.config,
            "basis_list": _parse_int_list(args.basis_list),
            "repetitions": args.repetitions, "seed": args.seed})
        if status != 200:
            return _fail(status, body)
        _emit(body, args.out, args.format, is_report=True)
        return EXIT_OK

    if args.command == "compare-pod":
        status, body = client.post("/studies/compare-pod", {
            "config_path": args.config,
            "basis_list": _parse_int_list(args.basis_list),
            "training_count": args.training_count,
            "test_size": args.test_size, "seed": args.seed})
        if status != 200:
            return _fail(status, body)
        _emit(body, args.out, args.format, is_report=True)
        return EXIT_OK

    if args.command == "export":
        status, body = client.post("/export", {
            "cache_path": args.cache, "mu": _parse_mu(args.mu),
            "include_truth": not args.no_truth})
        if status != 200:
            return _fail(status, body)
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(body["vtk"])
        print(f"wrote {args.out}")
        return EXIT_OK

    raise SystemExit(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
