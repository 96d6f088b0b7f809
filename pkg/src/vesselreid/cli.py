"""Command-line client for the re-identification service.

Each subcommand posts one request to the HTTP app. By default the app runs
in-process, so commands behave like a local tool; pass --server to target a
running instance instead. Precedence for request values: command-line flags
override --config JSON entries, which override built-in defaults. Unknown
config keys are rejected.
"""

import argparse
import json
import sys

import pydantic

from .service import schemas


def _client(server: str):
    if server:
        import httpx

        return httpx.Client(base_url=server)
    from starlette.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app())


def _merge_request(model_cls, args, fields):
    payload = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(model_cls.model_fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        payload.update(file_cfg)
    for name in fields:
        value = getattr(args, name, None)
        if value is not None:
            payload[name] = value
    return model_cls(**payload)


_COMMANDS = {}


def _command(name, path, model_cls, method="post"):
    def register(fn):
        _COMMANDS[name] = (path, model_cls, method, fn)
        return fn

    return register


def _common(p):
    p.add_argument("--config", help="JSON file with request defaults")
    p.add_argument("--server", help="URL of a running service (default: in-process)")


@_command("synth", "/synth", schemas.SynthRequest)
def _synth_args(p):
    p.add_argument("--out", dest="out_dir", help="dataset output directory")
    p.add_argument("--identities", type=int)
    p.add_argument("--azimuths", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--feature-noise-sigma", dest="feature_noise_sigma", type=float)
    p.add_argument("--pixel-noise-sigma", dest="pixel_noise_sigma", type=float)
    p.add_argument("--seed", type=int)


@_command("train-seg", "/train/seg", schemas.TrainSegRequest)
def _train_seg_args(p):
    p.add_argument("--dataset", dest="dataset_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--split")


@_command("train-head", "/train/head", schemas.TrainHeadRequest)
def _train_head_args(p):
    p.add_argument("--dataset", dest="dataset_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--d-space", dest="d_space", type=int)
    p.add_argument("--arc-scale", dest="arc_scale", type=float)
    p.add_argument("--arc-margin", dest="arc_margin", type=float)
    p.add_argument("--lambda-id", dest="lambda_id", type=float)
    p.add_argument("--lambda-triplet", dest="lambda_triplet", type=float)
    p.add_argument("--triplet-margin", dest="triplet_margin", type=float)
    p.add_argument("--split")


@_command("enroll", "/enroll", schemas.EnrollRequest)
def _enroll_args(p):
    p.add_argument("--dataset", dest="dataset_dir")
    p.add_argument("--head", dest="head_path")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--split")


@_command("query", "/query", schemas.QueryRequest)
def _query_args(p):
    p.add_argument("--dataset", dest="dataset_dir")
    p.add_argument("--head", dest="head_path")
    p.add_argument("--gallery", dest="gallery_path")
    p.add_argument("--image", dest="image_path")
    p.add_argument("--mode", choices=("all_views", "largest_view", "global_only"))
    p.add_argument("--enroll", action="store_const", const=True, default=None,
                   help="enroll the query as a new identity when unmatched")
    p.add_argument("--enroll-threshold", dest="enroll_threshold", type=float)
    p.add_argument("--out", dest="out_dir")


@_command("eval-reid", "/eval/reid", schemas.EvalReidRequest)
def _eval_reid_args(p):
    p.add_argument("--dataset", dest="dataset_dir")
    p.add_argument("--head", dest="head_path")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--mode", choices=("all_views", "largest_view", "global_only"))
    p.add_argument("--gallery-split", dest="gallery_split")
    p.add_argument("--query-split", dest="query_split")


@_command("eval-track", "/eval/track", schemas.EvalTrackRequest)
def _eval_track_args(p):
    p.add_argument("--detections", dest="detections_path")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--gt", dest="gt_path")
    p.add_argument("--radius", type=float)
    p.add_argument("--cosine-threshold", dest="cosine_threshold", type=float)
    p.add_argument("--max-age", dest="max_age", type=int)
    p.add_argument("--min-confidence", dest="min_confidence", type=float)
    p.add_argument("--no-embeddings", dest="use_embeddings",
                   action="store_const", const=False, default=None,
                   help="disable the second (embedding) association round")
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselreid",
        description="Viewpoint-independent vessel re-identification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, _, add_args) in _COMMANDS.items():
        p = sub.add_parser(name)
        add_args(p)
        _common(p)

    p = sub.add_parser("gallery-info", help="summarize a gallery file")
    p.add_argument("--gallery", dest="gallery_path", required=True)
    _common(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    if args.command == "gallery-info":
        with _client(args.server) as client:
            resp = client.get("/gallery/info", params={"path": args.gallery_path})
        return _emit(resp)

    path, model_cls, method, _ = _COMMANDS[args.command]
    fields = list(model_cls.model_fields)
    try:
        request = _merge_request(model_cls, args, fields)
    except (ValueError, OSError, pydantic.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    with _client(args.server) as client:
        resp = getattr(client, method)(path, json=request.model_dump())
    return _emit(resp)


def _emit(resp) -> int:
    try:
        body = resp.json()
    except ValueError:
        body = {"detail": resp.text}
    if resp.status_code != 200:
        print(json.dumps(body, indent=2, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(body, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
