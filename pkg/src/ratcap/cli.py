"""Command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import RunConfig, load_config
from .corpus import CorpusError, SynthSpec, write_synth
from .hnsw import IndexError_
from .metrics import MetricError, corpus_eval, report_json
from .model import load_checkpoint
from .numerics import ConfigError
from .retrieval import RetrievalError, nn_quality_report
from .tokenizer import TokenizerError
from .training import NumericalAbort, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); 2 is reserved for data errors here
        raise UsageError(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ratcap", description="Retrieval-augmented captioning at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="key=value config file with [model] [train] [retrieval] [data]")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        return sp

    s = sub.add_parser("synth", help="write a synthetic attributed-scenes corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--items-per-combo", type=int, default=SynthSpec.items_per_combo)
    s.add_argument("--noise", type=float, default=SynthSpec.noise)
    s.add_argument("--d-feat", type=int, default=SynthSpec.d_feat)
    s.add_argument("--grid-size", type=int, default=SynthSpec.grid_size)

    with_config(sub.add_parser("build-index", help="train the tokenizer, build datastore and HNSW index"))

    s = with_config(sub.add_parser("train", help="XE + SCST training"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="run directory (default: <workdir>/run_<variant>_s<seed>)")
    s.add_argument("--no-gate", action="store_true")
    s.add_argument("--no-memory", action="store_true")

    s = with_config(sub.add_parser("generate", help="caption a split"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--exact-knn", action="store_true")
    s.add_argument("--beam", type=int, default=1)
    s.add_argument("--out", help="write captions JSON here instead of stdout")

    s = with_config(sub.add_parser("evaluate", help="score a captions JSON file"))
    s.add_argument("--predictions", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])

    s = with_config(sub.add_parser("nn-report", help="quality of the retrieved captions themselves"))
    s.add_argument("--k", type=_ints, default=[5, 10, 20, 40])
    s.add_argument("--split", default="val", choices=["val", "test"])
    s.add_argument("--json", action="store_true")

    s = with_config(sub.add_parser("ablate", help="train variants with identical seeds and compare"))
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--no-gate", action="store_true")
    s.add_argument("--no-memory", action="store_true")
    s.add_argument("--aggregation", type=_strs, default=[])
    s.add_argument("--k", type=_ints, default=[])
    s.add_argument("--mem-layers", type=_ints, default=[])
    s.add_argument("--out", help="ablation directory (default: <workdir>/ablate)")
    return p


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return load_config(args.config, overrides)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# -- commands -------------------------------------------------------------------------
def cmd_synth(args) -> int:
    spec = SynthSpec(
        items_per_combo=args.items_per_combo, noise=args.noise, seed=args.seed, d_feat=args.d_feat, grid_size=args.grid_size
    )
    paths = write_synth(spec, args.out)
    _emit({name: str(p) for name, p in paths.items()})
    return EXIT_OK


def cmd_build_index(args) -> int:
    cfg = _config(args)
    ws = ex.Workspace.from_manifests(cfg)
    sums = ws.save(cfg.data.workdir)
    _emit({"workdir": cfg.data.workdir, "vocab_size": ws.tokenizer.vocab_size, "reproducibility": ex.reproducibility_block(cfg, sums)})
    return EXIT_OK


def _variant(args) -> str:
    if args.no_gate and args.no_memory:
        raise UsageError("--no-gate and --no-memory are mutually exclusive")
    return "no-gate" if args.no_gate else "no-memory" if args.no_memory else "full"


def cmd_train(args) -> int:
    cfg = _config(args)
    variant = _variant(args)
    cfg = ex.variant_config(cfg, variant)
    if args.seed is not None:
        cfg = cfg.replace("train", seed=args.seed)
    ws = ex.Workspace.load(cfg)
    out = args.out or Path(cfg.data.workdir) / f"run_{variant}_s{cfg.train.seed}"
    result, repro = ex.run_training(ws, cfg, out)
    _emit(ex.result_record(result, repro))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    ws = ex.Workspace.load(cfg)
    examples = ws.examples(args.split, cfg, model.cfg, exact=args.exact_knn or None)
    preds = generate(model, ws.tokenizer, examples, args.beam)
    payload = {
        "split": args.split,
        "retrieval": "exact" if args.exact_knn else "hnsw",
        "predictions": preds,
        "retrieved": {e.image_id: {"images": e.memory_images, "captions": [ws.tokenizer.decode(m) for m in e.memory]} for e in examples},
        "reproducibility": ex.reproducibility_block(cfg, ws.checksums()),
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    path = Path(args.predictions)
    if not path.exists():
        raise FileNotFoundError(f"predictions file not found: {path}")
    raw = json.loads(path.read_text())
    preds = raw.get("predictions", raw)
    split = raw.get("split", args.split)
    refs = ex.Workspace.load(cfg).splits[split].references()
    scores = corpus_eval(preds, refs)
    sys.stdout.write(report_json(scores) + "\n")
    return EXIT_OK


def cmd_nn_report(args) -> int:
    cfg = _config(args)
    ws = ex.Workspace.load(cfg)
    split = ws.splits[args.split]
    test = [(it.image_id, it.grid, it.captions) for it in split]
    report = nn_quality_report(test, ws.store, ws.index, cfg.retrieval, ks=sorted(args.k))
    if args.json:
        _emit(report.to_dict())
    else:
        sys.stdout.write(report.to_table() + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    runs: list[tuple[str, RunConfig]] = [("full", cfg)]
    if args.no_gate:
        runs.append(("no-gate", ex.variant_config(cfg, "no-gate")))
    if args.no_memory:
        runs.append(("no-memory", ex.variant_config(cfg, "no-memory")))
    for agg in args.aggregation:
        runs.append((f"aggregation={agg}", cfg.replace("retrieval", aggregation=agg)))
    for k in args.k:
        runs.append((f"k={k}", cfg.replace("model", k=k)))
    for n in args.mem_layers:
        runs.append((f"mem_layers={n}", cfg.replace("model", mem_layers=n)))
    out = Path(args.out or Path(cfg.data.workdir) / "ablate")
    base_ws = ex.Workspace.load(cfg)
    rows = []
    for name, run_cfg in runs:
        # aggregation changes the datastore embeddings, so it needs its own memory
        ws = base_ws if run_cfg.retrieval.aggregation == cfg.retrieval.aggregation else ex.Workspace.build(base_ws.splits, run_cfg)
        per_seed = []
        for seed in args.seeds:
            result, _ = ex.run_training(ws, run_cfg, out / f"{name}_s{seed}", seed=seed)
            per_seed.append(result.final_metrics["CIDEr-D"])
        rows.append({"variant": name, "cider_per_seed": per_seed, "cider_median": ex.median(per_seed)})
    table = ["variant\tmedian CIDEr-D\tper seed"]
    table += [f"{r['variant']}\t{r['cider_median']:.4f}\t" + ",".join(f"{c:.4f}" for c in r["cider_per_seed"]) for r in rows]
    (out / "ablation.json").write_text(json.dumps({"seeds": args.seeds, "rows": rows, "reproducibility": ex.reproducibility_block(cfg, base_ws.checksums())}, indent=2) + "\n")
    sys.stdout.write("\n".join(table) + "\n")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "build-index": cmd_build_index,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "nn-report": cmd_nn_report,
    "ablate": cmd_ablate,
}

DATA_ERRORS = (CorpusError, RetrievalError, TokenizerError, MetricError, IndexError_, FileNotFoundError, json.JSONDecodeError, KeyError)


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, e)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, argparse.ArgumentTypeError) as e:
        return _fail(EXIT_USAGE, e)
    except NumericalAbort as e:
        return _fail(EXIT_NUMERIC, e)
    except DATA_ERRORS as e:
        return _fail(EXIT_DATA, e)


if __name__ == "__main__":
    sys.exit(main())
