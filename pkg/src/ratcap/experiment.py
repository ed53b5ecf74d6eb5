"""Shared setup for CLI commands and experiments: corpus, tokenizer, memory, runs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import ratcap

from .config import RunConfig
from .corpus import (
    CorpusError,
    CorpusSplit,
    SynthSpec,
    audit_split_isolation,
    build_datastore,
    ingest,
    synth_generate,
    training_idf,
)
from .hnsw import HnswIndex
from .metrics import IdfTable
from .model import CaptionModel
from .retrieval import Datastore, build_index
from .tokenizer import Tokenizer
from .training import MemoryProvider, PipelineResult, evaluate, prepare_examples, train_pipeline

log = logging.getLogger(__name__)


def code_version() -> str:
    """Package version plus a hash of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(ratcap.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{ratcap.__version__}+{h.hexdigest()[:12]}"


@dataclass
class Workspace:
    """Everything derived from the training split, plus the held-out splits."""

    splits: dict[str, CorpusSplit]
    tokenizer: Tokenizer
    store: Datastore
    index: HnswIndex
    idf_train: IdfTable

    @classmethod
    def build(cls, splits: dict[str, CorpusSplit], cfg: RunConfig) -> "Workspace":
        train = splits["train"]
        tok = Tokenizer.train([c for it in train for c in it.captions], cfg.data.vocab_size, max_len=cfg.model.max_len)
        store = build_datastore(train, cfg.retrieval.aggregation)
        index = build_index(store, cfg.retrieval.m, cfg.retrieval.ef_construction, seed=0)
        ws = cls(splits, tok, store, index, training_idf(train))
        ws.audit()
        return ws

    @classmethod
    def from_manifests(cls, cfg: RunConfig) -> "Workspace":
        splits = {
            "train": ingest(cfg.data.train_manifest),
            "val": ingest(cfg.data.val_manifest),
        }
        if Path(cfg.data.test_manifest).exists():
            splits["test"] = ingest(cfg.data.test_manifest)
        return cls.build(splits, cfg)

    @classmethod
    def synthetic(cls, cfg: RunConfig, spec: SynthSpec | None = None) -> "Workspace":
        return cls.build(synth_generate(spec or SynthSpec()), cfg)

    # -- persisted artifacts -------------------------------------------------------
    ARTIFACTS = ("tokenizer.bpe", "datastore.jsonl", "index.rhnsw")

    def save(self, workdir) -> dict[str, str]:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        self.tokenizer.save(workdir / "tokenizer.bpe")
        self.store.save(workdir / "datastore.jsonl")
        self.index.save(workdir / "index.rhnsw")
        sums = self.checksums()
        (workdir / "checksums.json").write_text(json.dumps(sums, indent=1, sort_keys=True) + "\n")
        return sums

    @classmethod
    def load(cls, cfg: RunConfig) -> "Workspace":
        """Manifests from ``cfg.data`` plus artifacts written by :meth:`save`."""
        workdir = Path(cfg.data.workdir)
        missing = [a for a in cls.ARTIFACTS if not (workdir / a).exists()]
        if missing:
            raise FileNotFoundError(f"missing {missing} in {workdir}; run build-index first")
        splits = {"train": ingest(cfg.data.train_manifest), "val": ingest(cfg.data.val_manifest)}
        if Path(cfg.data.test_manifest).exists():
            splits["test"] = ingest(cfg.data.test_manifest)
        store = Datastore.load(workdir / "datastore.jsonl")
        if store.ids != splits["train"].ids:
            raise CorpusError("datastore does not match the training manifest; rebuild the index")
        ws = cls(
            splits,
            Tokenizer.load(workdir / "tokenizer.bpe", max_len=cfg.model.max_len),
            store,
            HnswIndex.load(workdir / "index.rhnsw"),
            training_idf(splits["train"]),
        )
        ws.audit()
        return ws

    def audit(self) -> None:
        audit_split_isolation(self.store, self.splits["train"], [s for n, s in self.splits.items() if n != "train"])

    def checksums(self) -> dict[str, str]:
        out = {f"corpus_{n}": s.checksum() for n, s in self.splits.items()}
        out["datastore"] = self.store.checksum()
        out["index"] = hashlib.sha256(self.index.to_bytes()).hexdigest()
        return out

    def model_config(self, cfg: RunConfig):
        return dataclasses.replace(cfg.model, vocab_size=self.tokenizer.vocab_size, d_feat=self.splits["train"].d_feat)

    def memory(self, cfg: RunConfig, model_cfg=None, exact: bool | None = None) -> MemoryProvider:
        model_cfg = model_cfg or self.model_config(cfg)
        rcfg = dataclasses.replace(cfg.retrieval, k=model_cfg.k, exact=cfg.retrieval.exact if exact is None else exact)
        store = self.store if model_cfg.uses_memory else None
        return MemoryProvider(self.tokenizer, store, self.index, rcfg, model_cfg.max_len)

    def examples(self, split: str, cfg: RunConfig, model_cfg=None, exact: bool | None = None):
        provider = self.memory(cfg, model_cfg, exact)
        return prepare_examples(self.splits[split], self.tokenizer, provider, exclude_self=split == "train")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """``full`` (gated memory), ``no-gate`` (sequential attention) or ``no-memory``."""
    modes = {"full": "gated", "no-gate": "sequential", "no-memory": "none"}
    if variant not in modes:
        raise ValueError(f"unknown variant {variant!r}")
    return cfg.replace("model", memory=modes[variant])


def run_training(ws: Workspace, cfg: RunConfig, out_dir, seed: int | None = None) -> tuple[PipelineResult, dict]:
    """Train one model; returns the pipeline result and a reproducibility record."""
    if seed is not None:
        cfg = cfg.replace("train", seed=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mcfg = ws.model_config(cfg)
    before = ws.checksums()
    train = ws.examples("train", cfg, mcfg)
    val = ws.examples("val", cfg, mcfg)
    model = CaptionModel(mcfg, seed=cfg.train.seed)
    result = train_pipeline(model, ws.tokenizer, train, val, ws.idf_train, cfg.train, out_dir)
    after = ws.checksums()
    repro = reproducibility_block(cfg, after)
    repro["retrieval_untouched"] = before == after
    (out_dir / "result.json").write_text(json.dumps(result_record(result, repro), indent=2, default=str) + "\n")
    return result, repro


def reproducibility_block(cfg: RunConfig, checksums: dict[str, str]) -> dict:
    return {
        "seed": cfg.train.seed,
        "config_hash": cfg.hash(),
        "corpus_checksums": checksums,
        "code_version": code_version(),
        "numpy": np.__version__,
    }


def result_record(result: PipelineResult, repro: dict) -> dict:
    return {
        "checkpoint": str(result.checkpoint),
        "xe": result.xe_metrics,
        "xe_last": result.xe_last,
        "scst": result.scst_metrics,
        "final": result.final_metrics,
        "best": result.best_metrics,
        "val_xe": result.val_xe,
        "stats": result.stats,
        "seconds": round(result.seconds, 2),
        "reproducibility": repro,
    }


def evaluate_checkpoint(ws: Workspace, cfg: RunConfig, model: CaptionModel, split: str = "val", exact: bool | None = None, beam: int = 1) -> dict:
    examples = ws.examples(split, cfg, model.cfg, exact)
    return evaluate(model, ws.tokenizer, examples, beam)


def median(values) -> float:
    return float(statistics.median(values))
