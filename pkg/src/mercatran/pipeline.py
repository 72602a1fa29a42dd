"""Pipeline stages (gen, prep, train, eval, index) and the end-to-end demo."""
from __future__ import annotations

import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, kernels
from .datamodel import read_events, read_items, reconstruct_sequences, serialize_event, serialize_item, write_jsonl
from .errors import InvalidConfig, MercatranError
from .evaluation import EvalReport, evaluate
from .model import MercatranModel, ModelConfig
from .preprocess import ExampleSet, FeatureConfig, Vocab, build_example_set, build_vocab, in_holdout, sequences_to_examples
from .serve.service import RecommendationService, precompute_items, precompute_users
from .serve.store import FeatureStore
from .synthgen import GenConfig, generate_corpus
from .training import BEST, train

log = logging.getLogger(__name__)


def emit(event: str, **fields) -> None:
    log.info(json.dumps({"event": event, **fields}, sort_keys=True))


# ------------------------------------------------------------------ stages


def run_gen(config: GenConfig, events_out, items_out) -> tuple[int, int]:
    config.validate()
    items, events = generate_corpus(config)
    write_jsonl(items_out, (serialize_item(it) for it in items))
    write_jsonl(events_out, (serialize_event(ev) for ev in events))
    emit("gen", items=len(items), events=len(events), seed=config.seed)
    return len(items), len(events)


def run_prep(events_path, items_path, out, vocab_path, feature_config="title_brand_category",
             holdout_fraction: float = 0.0, holdout_out=None, vocab_in=None, segment_len: Optional[int] = None,
             seed: int = 0) -> dict:
    """Build the vocabulary (or reuse ``vocab_in``) and write tokenized examples.

    With ``holdout_fraction`` > 0 users are split by a seeded hash and the
    held-out users' examples go to ``holdout_out``.
    """
    fc = FeatureConfig(feature_config)
    items = read_items(items_path)
    if vocab_in is not None:
        vocab = Vocab.load(vocab_in)
        if vocab.feature_config != fc:
            raise InvalidConfig(f"vocab was built for {vocab.feature_config.value}, not {fc.value}")
    else:
        vocab = build_vocab(items, fc)
    vocab.save(vocab_path)
    seqs = reconstruct_sequences(read_events(events_path))
    train_seqs = [s for s in seqs if not in_holdout(s.user_id, holdout_fraction, seed)]
    test_seqs = [s for s in seqs if in_holdout(s.user_id, holdout_fraction, seed)]
    train_set = build_example_set(sequences_to_examples(train_seqs, segment_len), vocab, fc)
    train_set.save(out)
    counts = {"sequences": len(seqs), "examples": len(train_set), "vocab": len(vocab)}
    if holdout_out is not None:
        test_set = build_example_set(sequences_to_examples(test_seqs, segment_len), vocab, fc)
        test_set.save(holdout_out)
        counts["holdout_examples"] = len(test_set)
    emit("prep", feature_config=fc.value, **counts)
    return counts


def run_train(examples_path, vocab_path, config: ModelConfig, epochs: int, out_dir, resume: bool = True):
    examples = ExampleSet.load(examples_path)
    vocab = Vocab.load(vocab_path)
    if len(vocab) > config.vocab_size:
        config.vocab_size = len(vocab)
    config.feature_config = FeatureConfig(vocab.feature_config).value
    result = train(examples, config, epochs, out_dir, resume=resume, extra={"vocab": vocab.to_dict()})
    emit("train", epochs=epochs, steps=result.steps, final_loss=result.losses[-1] if result.losses else None)
    return result


def resolve_ckpt(path) -> Path:
    """Accept a checkpoint file or a training directory (which means its ``best``)."""
    p = Path(path)
    return p / BEST if p.is_dir() else p


def run_eval(ckpt, examples_path, out) -> EvalReport:
    model, _, _ = MercatranModel.load(resolve_ckpt(ckpt))
    report = evaluate(model, ExampleSet.load(examples_path))
    Path(out).write_text(report.to_json(), encoding="utf-8")
    emit("eval", sequences=report.n_sequences, indexed_items=report.n_indexed_items)
    return report


def run_index(ckpt, items_path, out, events_path=None, store_path=None) -> dict:
    model, _, extra = MercatranModel.load(resolve_ckpt(ckpt))
    vocab = Vocab.from_dict(extra["vocab"])
    index = precompute_items(read_items(items_path), model, vocab, out)
    counts = {"indexed_items": len(index)}
    if events_path is not None and store_path is not None:
        store = FeatureStore(store_path, model.config.forecast_steps, model.config.d)
        counts["users_updated"] = precompute_users(read_events(events_path), model, vocab, store)
    emit("index", **counts)
    return counts


# ------------------------------------------------------------------ demo


@dataclass
class PipelineConfig:
    workdir: str = "mercatran-run"
    seed: int = 0
    gen: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    epochs: int = 5
    feature_config: str = "title_brand_category"
    holdout_fraction: float = 0.1
    k: int = 20

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown pipeline fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def profile(cls, name: str, seed: int = 0, workdir: Optional[str] = None) -> "PipelineConfig":
        if name == "smoke":
            cfg = cls(seed=seed, gen={"n_users": 1000, "n_items": 1000, "n_brands": 40}, epochs=5,
                      model={"batch_size": 64, "warmup_steps": 400})
        elif name == "full-desk":
            cfg = cls(seed=seed, gen={"n_users": 5000, "n_items": 2000, "n_brands": 40, "affinity_strength": 0.9},
                      epochs=20, model={"batch_size": 256, "warmup_steps": 4000})
        else:
            raise InvalidConfig(f"unknown profile {name!r}")
        if workdir is not None:
            cfg.workdir = workdir
        return cfg

    def paths(self) -> dict:
        w = Path(self.workdir)
        return {
            "events": w / "corpus.jsonl",
            "items": w / "items.jsonl",
            "vocab": w / "vocab.json",
            "train": w / "examples.bin",
            "test": w / "test.bin",
            "ckpt": w / "ckpt",
            "index": w / "index.midx",
            "store": w / "store.mfst",
            "report": w / "report.json",
            "manifest": w / "run_manifest.json",
            "request": w / "request.json",
        }

    def gen_config(self) -> GenConfig:
        return GenConfig.from_dict({**self.gen, "seed": self.seed})

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "seed": self.seed, "feature_config": self.feature_config})


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageFailed(MercatranError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


def run_demo(config: PipelineConfig) -> dict:
    """gen -> prep -> train -> eval -> index -> one served request.

    Stages whose outputs already exist are skipped and training resumes from
    its last checkpoint, so an interrupted run can simply be started again.
    """
    p = config.paths()
    Path(config.workdir).mkdir(parents=True, exist_ok=True)
    stage = "gen"
    try:
        if not (p["events"].exists() and p["items"].exists()):
            run_gen(config.gen_config(), p["events"], p["items"])
        stage = "prep"
        if not (p["train"].exists() and p["test"].exists() and p["vocab"].exists()):
            run_prep(p["events"], p["items"], p["train"], p["vocab"], config.feature_config,
                     config.holdout_fraction, p["test"], seed=config.seed)
        stage = "train"
        run_train(p["train"], p["vocab"], config.model_config(), config.epochs, p["ckpt"], resume=True)
        stage = "eval"
        report = run_eval(p["ckpt"], p["test"], p["report"])
        stage = "index"
        run_index(p["ckpt"], p["items"], p["index"], p["events"], p["store"])
        stage = "serve"
        response = _one_request(p, config.k)
    except Exception as exc:
        emit("stage_failed", stage=stage, error=f"{type(exc).__name__}: {exc}")
        raise StageFailed(stage, exc) from exc
    manifest = {
        "package_version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "kernels": kernels.BACKEND,
        "seed": config.seed,
        "pipeline": asdict(config),
        "gen_config": config.gen_config().to_dict(),
        "model_config": config.model_config().to_dict(),
        "artifacts": {k: _digest(v) for k, v in p.items() if v.is_file() and k not in ("manifest",)},
        "served": {"index_version": response["index_version"], "cache_hit": response["cache_hit"]},
    }
    p["manifest"].write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    emit("demo_done", workdir=str(config.workdir))
    return {"report": report, "manifest": manifest, "response": response}


def _one_request(p: dict, k: int) -> dict:
    from .serve.service import load_service

    svc = load_service(resolve_ckpt(p["ckpt"]), p["index"], p["store"])
    users = svc.store.user_ids()
    if not users:
        raise MercatranError("feature store is empty")
    response = svc.handle_recommend(user_id=users[0], k=k)
    p["request"].write_text(json.dumps(response, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return response
