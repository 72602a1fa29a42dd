"""``mercatran`` command line: gen, prep, train, eval, index, serve, demo."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .errors import MercatranError


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage()
        try:
            body = json.loads(msg)
            if not isinstance(body, dict):
                body = {"message": body}
        except ValueError:
            body = {"message": msg}
        body.setdefault("level", record.levelname.lower())
        body.setdefault("logger", record.name)
        body.setdefault("ts", round(time.time(), 3))
        return json.dumps(body, sort_keys=True)


def setup_logging(level: str = "INFO") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger("mercatran")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def _load_json(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def build_parser() -> argparse.ArgumentParser:
    def options(suppress: bool) -> argparse.ArgumentParser:
        # subcommand copies use SUPPRESS so they do not clobber values given before the subcommand
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser = argparse.ArgumentParser(add_help=False)
        parser.add_argument("--config", default=dflt(None), help="JSON config for the subcommand")
        parser.add_argument("--seed", type=int, default=dflt(None), help="overrides the config seed")
        parser.add_argument("--threads", type=int, default=dflt(1), help="BLAS threads (1 gives bit-exact runs)")
        parser.add_argument("--log-level", default=dflt("INFO"))
        return parser

    top, common = options(False), options(True)
    p = argparse.ArgumentParser(prog="mercatran", parents=[top], description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--out", required=True, help="events .jsonl")
    g.add_argument("--items", required=True, help="items .jsonl")

    pr = sub.add_parser("prep", parents=[common], help="tokenize and window sequences")
    pr.add_argument("--events", required=True)
    pr.add_argument("--items", required=True)
    pr.add_argument("--feature-config", default="title_brand_category",
                    choices=["title_brand_category", "title_only", "brand_category"])
    pr.add_argument("--out", required=True, help="examples .bin")
    pr.add_argument("--vocab", required=True, help="vocab .json to write")
    pr.add_argument("--vocab-in", help="reuse an existing vocab instead of building one")
    pr.add_argument("--holdout-fraction", type=float, default=0.0)
    pr.add_argument("--holdout-out", help="examples .bin for held-out users")
    pr.add_argument("--segment-len", type=int, help="split long sequences into chunks of this many events")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--examples", required=True)
    t.add_argument("--vocab", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint")

    e = sub.add_parser("eval", parents=[common], help="offline evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--examples", required=True)
    e.add_argument("--out", required=True)

    i = sub.add_parser("index", parents=[common], help="embed items and precompute user vectors")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--items", required=True)
    i.add_argument("--out", required=True, help="index file")
    i.add_argument("--events", help="event log for user precompute")
    i.add_argument("--store", help="feature store file for user precompute")

    s = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--index")
    s.add_argument("--store")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)

    d = sub.add_parser("demo", parents=[common], help="end-to-end pipeline")
    d.add_argument("profile", choices=["smoke", "full-desk"])
    d.add_argument("--workdir", default=None)
    return p


def _dispatch(args) -> int:
    from . import pipeline
    from .model import ModelConfig
    from .synthgen import GenConfig

    cfg = _load_json(args.config)
    if args.command == "gen":
        gc = GenConfig.from_dict(cfg)
        if args.seed is not None:
            gc.seed = args.seed
        pipeline.run_gen(gc, args.out, args.items)
    elif args.command == "prep":
        pipeline.run_prep(args.events, args.items, args.out, args.vocab, args.feature_config,
                          args.holdout_fraction, args.holdout_out, args.vocab_in, args.segment_len,
                          seed=args.seed or 0)
    elif args.command == "train":
        mc = ModelConfig.from_dict(cfg)
        if args.seed is not None:
            mc.seed = args.seed
        pipeline.run_train(args.examples, args.vocab, mc, args.epochs, args.out, resume=not args.no_resume)
    elif args.command == "eval":
        rep = pipeline.run_eval(args.ckpt, args.examples, args.out)
        print(rep.to_json(), end="")
    elif args.command == "index":
        pipeline.run_index(args.ckpt, args.items, args.out, args.events, args.store)
    elif args.command == "serve":
        from .serve.http import run
        from .serve.service import load_service

        run(load_service(pipeline.resolve_ckpt(args.ckpt), args.index, args.store), args.host, args.port)
    elif args.command == "demo":
        if cfg:
            pc = pipeline.PipelineConfig.from_dict(cfg)
            if args.seed is not None:
                pc.seed = args.seed
            if args.workdir is not None:
                pc.workdir = args.workdir
        else:
            pc = pipeline.PipelineConfig.profile(args.profile, args.seed or 0, args.workdir or f"mercatran-{args.profile}")
        out = pipeline.run_demo(pc)
        print(json.dumps({"workdir": pc.workdir, "report": str(Path(pc.workdir) / "report.json"),
                          "index_version": out["response"]["index_version"]}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    from threadpoolctl import threadpool_limits

    from .pipeline import StageFailed

    with threadpool_limits(limits=max(1, args.threads)):
        try:
            return _dispatch(args)
        except StageFailed as exc:
            logging.getLogger("mercatran").error(json.dumps({"event": "error", "stage": exc.stage, "error": str(exc)}))
            return 2
        except (MercatranError, OSError) as exc:
            logging.getLogger("mercatran").error(json.dumps({"event": "error", "stage": args.command,
                                                            "error": f"{type(exc).__name__}: {exc}"}))
            return 1


if __name__ == "__main__":
    sys.exit(main())
