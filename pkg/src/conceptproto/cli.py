"""Thin command-line client for the service.

Every subcommand marshals its flags into a request, posts it to the
service, and prints the JSON response. Without --server the app runs
in-process; with --server the same requests go over HTTP to a running
`conceptproto serve` instance.
"""

from __future__ import annotations

import argparse
import json
import sys


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app())


def _post(args, path: str, payload: dict) -> int:
    with _client(args.server) as client:
        response = client.post(path, json=payload)
    try:
        body = response.json()
    except ValueError:
        body = {"detail": response.text}
    if response.status_code != 200:
        print(f"error ({response.status_code}): {body.get('detail', body)}", file=sys.stderr)
        return 1
    print(json.dumps(body, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptproto",
        description="Train, inspect, and explain multi-level concept-prototype classifiers.",
    )
    parser.add_argument("--server", default=None, help="base URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the full training schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="artifact store directory")

    p = sub.add_parser("extract", help="refresh prototypes and centroids only")
    p.add_argument("--store", required=True)
    p.add_argument("--data", required=True, help="dataset manifest path")

    p = sub.add_parser("classify", help="per-sample predictions with divergence lists")
    p.add_argument("--store", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON path")

    p = sub.add_parser("explain", help="top-k response grids and distribution tables")
    p.add_argument("--store", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-k", type=int, default=5, dest="top_k")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cka-heatmap", help="per-layer segment-similarity matrices")
    p.add_argument("--store", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train with one loss mode")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", required=True, choices=["cka-only", "ccd-only", "both"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep-channels", help="train once per segment width")
    p.add_argument("--config", required=True)
    p.add_argument("--values", required=True, help="comma-separated widths, e.g. 8,16,32")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fewshot", help="k-shot evaluation on held-out classes")
    p.add_argument("--store", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unseen-fraction", type=float, default=1 / 3, dest="unseen_fraction")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    if args.command == "train":
        return _post(args, "/train", {"config": args.config, "out": args.out})
    if args.command == "extract":
        return _post(args, "/extract", {"store": args.store, "data": args.data})
    if args.command == "classify":
        return _post(args, "/classify", {"store": args.store, "data": args.data, "report": args.report})
    if args.command == "explain":
        return _post(
            args, "/explain",
            {"store": args.store, "data": args.data, "top_k": args.top_k, "out": args.out},
        )
    if args.command == "cka-heatmap":
        return _post(args, "/cka-heatmap", {"store": args.store, "data": args.data, "out": args.out})
    if args.command == "ablate":
        return _post(args, "/ablate", {"config": args.config, "mode": args.mode, "out": args.out})
    if args.command == "sweep-channels":
        try:
            values = [int(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            print(f"error: --values must be comma-separated integers, got {args.values!r}", file=sys.stderr)
            return 2
        return _post(args, "/sweep-channels", {"config": args.config, "values": values, "out": args.out})
    if args.command == "fewshot":
        return _post(
            args, "/fewshot",
            {
                "store": args.store,
                "data": args.data,
                "k": args.k,
                "seed": args.seed,
                "unseen_fraction": args.unseen_fraction,
            },
        )
    if args.command == "gradcheck":
        return _post(args, "/gradcheck", {"config": args.config, "seed": args.seed})
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
