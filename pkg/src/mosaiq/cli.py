"""Command line entry point: ``mosaiq <subcommand> [flags]``.

Exit status: 0 success, 1 usage error, 2 data/config error.  Errors print a
single ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import core
from .checkpoint import Checkpoint, CheckpointError
from .data import decoder_param_diff, make_benchmark, read_manifest, save_benchmark, token_coverage
from .losses import ObjectiveSpec
from .metrics import score_files
from .model import ModelConfig
from .pipelines import (TrainConfig, evaluate, finetune_nlu, pretrain_adaptor, pretrain_text_model, train_slu,
                        transfer_eval)

log = logging.getLogger("mosaiq")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------- #
# run configuration

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    objective: str | None = None
    out: str | None = None

    KEYS = ("model", "train", "data", "objective", "out")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(d, dict):
            raise DataError("config must be a mapping")
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(d.get("model") or {})
            train = TrainConfig.from_dict(d.get("train") or {})
        except (TypeError, ValueError) as e:
            raise DataError(str(e)) from None
        data = d.get("data")
        if data is not None:
            data = str((base_dir / data) if not Path(data).is_absolute() else Path(data))
            if not Path(data).exists():
                raise DataError(f"data path does not exist: {data}")
        objective = d.get("objective")
        if objective is not None:
            ObjectiveSpec.parse(objective)
        return cls(model, train, data, objective, d.get("out"))


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise DataError(f"config not found: {path}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise DataError(f"config is not valid YAML/JSON: {str(e).splitlines()[0]}") from None
    return RunConfig.from_dict(raw, p.parent)


# --------------------------------------------------------------------------- #
# run directory

class RunDir:
    """Output directory with an append-only ``manifest.jsonl`` of (stage, path, sha256)."""

    def __init__(self, path: str):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest = self.path / "manifest.jsonl"

    def record(self, stage: str, path: Path):
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        row = {"stage": stage, "path": str(Path(path).relative_to(self.path)), "sha256": digest}
        with open(self.manifest, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    def write_text(self, stage: str, name: str, text: str) -> Path:
        p = self.path / name
        p.write_text(text)
        self.record(stage, p)
        return p

    def write_json(self, stage: str, name: str, obj) -> Path:
        return self.write_text(stage, name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def save_checkpoint(self, stage: str, name: str, ckpt: Checkpoint) -> Path:
        p = self.path / name
        ckpt.save(p)
        self.record(stage, p)
        return p

    def save_report(self, stage: str, report):
        self.write_text(stage, f"{stage}.report.jsonl", report.to_jsonl())
        self.write_json(stage, f"{stage}.summary.json", report.summary())


# --------------------------------------------------------------------------- #
# helpers

def _load_ckpt(path: str) -> Checkpoint:
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _data_dir(args, cfg: RunConfig) -> Path:
    d = args.data or cfg.data
    if d is None:
        raise UsageError("--data is required (or set 'data' in the config)")
    if not Path(d).is_dir():
        raise DataError(f"data directory not found: {d}")
    return Path(d)


def _manifest(data: Path, name: str):
    p = data / name
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    return read_manifest(p)


def _slu_split(data: Path, language: int, split: str):
    return _manifest(data, f"slu_lang{language}_{split}.jsonl")


def _train_config(args, cfg: RunConfig) -> TrainConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.mode is not None:
        kw["decode_mode"] = args.mode
    if args.beam_size is not None:
        kw["beam_size"] = args.beam_size
    return cfg.train.replace(**kw)


# --------------------------------------------------------------------------- #
# subcommands; each returns the JSON-able result printed on stdout

def cmd_gen_data(args, cfg, run):
    seed = args.seed if args.seed is not None else 0
    if args.dry_run:
        return {"dry_run": True, "seed": seed}
    paths = save_benchmark(make_benchmark(seed), run.path)
    for key, p in sorted(paths.items()):
        run.record("gen-data", Path(p))
    return {"files": {k: str(Path(p).name) for k, p in paths.items()}}


def cmd_pretrain_text(args, cfg, run):
    data = _data_dir(args, cfg)
    train_cfg = _train_config(args, cfg)
    model_cfg = cfg.model if args.seed is None else ModelConfig.from_dict({**cfg.model.to_dict(), "seed": args.seed})
    asr = _manifest(data, "asr_train.jsonl")
    slu = [u for p in sorted(data.glob("slu_lang*_train.jsonl")) for u in read_manifest(p)]
    texts = [(u.text, u.language) for u in asr + slu]
    valid = [(u.text, u.language) for u in _manifest(data, "asr_valid.jsonl")]
    if args.dry_run:
        return {"dry_run": True, "n_texts": len(texts)}
    ckpt, report = pretrain_text_model(texts, model_cfg, train_cfg, valid=valid)
    run.save_checkpoint("pretrain-text", "text_model.ckpt", ckpt)
    run.save_report("pretrain-text", report)
    return report.summary()


def cmd_finetune_nlu(args, cfg, run):
    data = _data_dir(args, cfg)
    base = _load_ckpt(args.base)
    train, dev = _slu_split(data, args.language, "train"), _slu_split(data, args.language, "dev")
    if args.dry_run:
        return {"dry_run": True, "n_train": len(train)}
    ckpt, report = finetune_nlu(base, train, dev, _train_config(args, cfg))
    run.save_checkpoint("finetune-nlu", "nlu.ckpt", ckpt)
    run.save_report("finetune-nlu", report)
    return report.summary()


def cmd_pretrain_adaptor(args, cfg, run):
    data = _data_dir(args, cfg)
    objective = args.objective or cfg.objective
    if objective is None:
        raise UsageError("--objective is required (or set 'objective' in the config)")
    spec = ObjectiveSpec.parse(objective)
    base = _load_ckpt(args.base)
    pairs, valid = _manifest(data, "asr_train.jsonl"), _manifest(data, "asr_valid.jsonl")
    if args.dry_run:
        return {"dry_run": True, "objective": str(spec)}
    ckpt, report = pretrain_adaptor(base, pairs, valid, spec, _train_config(args, cfg))
    run.save_checkpoint("pretrain-adaptor", "adaptor.ckpt", ckpt)
    run.save_report("pretrain-adaptor", report)
    return report.summary()


def cmd_train_slu(args, cfg, run):
    data = _data_dir(args, cfg)
    base, nlu = _load_ckpt(args.base), _load_ckpt(args.nlu)
    init = _load_ckpt(args.adaptor_init) if args.adaptor_init else None
    train, dev = _slu_split(data, args.language, "train"), _slu_split(data, args.language, "dev")
    test = _slu_split(data, args.language, "test")
    if args.dry_run:
        return {"dry_run": True, "n_train": len(train)}
    train_cfg = _train_config(args, cfg)
    ckpt, report = train_slu(base, nlu, init, train, dev, train_cfg)
    run.save_checkpoint("train-slu", "slu.ckpt", ckpt)
    run.save_report("train-slu", report)
    ev, hyps = evaluate(ckpt, test, train_cfg, args.task)
    _write_eval(run, "train-slu", test, hyps, ev)
    return ev.to_dict()


def _write_eval(run, stage, utts, hyps, ev):
    rows = "".join(json.dumps({"id": u.id, "frame": h.to_dict()}, sort_keys=True, ensure_ascii=False) + "\n"
                   for u, h in zip(utts, hyps))
    run.write_text(stage, f"{stage}.hyp.jsonl", rows)
    run.write_json(stage, f"{stage}.eval.json", ev.to_dict())


def cmd_eval(args, cfg, run):
    data = _data_dir(args, cfg)
    ckpt = _load_ckpt(args.slu)
    utts = _slu_split(data, args.language, args.split)
    if args.dry_run:
        return {"dry_run": True, "n": len(utts)}
    ev, hyps = evaluate(ckpt, utts, _train_config(args, cfg), args.task, source=args.source)
    _write_eval(run, "eval", utts, hyps, ev)
    return ev.to_dict()


def cmd_score(args, cfg, run):
    for p in (args.ref, args.hyp):
        if not Path(p).exists():
            raise DataError(f"file not found: {p}")
    if args.dry_run:
        return {"dry_run": True}
    ev = score_files(args.ref, args.hyp, args.task)
    if run is not None:
        run.write_json("score", "score.json", ev.to_dict())
    return ev.to_dict()


def cmd_transfer(args, cfg, run):
    data = _data_dir(args, cfg)
    src = _load_ckpt(args.slu)
    train, dev = _slu_split(data, args.language, "train"), _slu_split(data, args.language, "dev")
    test = _slu_split(data, args.language, "test")
    if args.dry_run:
        return {"dry_run": True, "mode": args.transfer_mode}
    ev, ckpt = transfer_eval(src, train, dev, test, args.transfer_mode, _train_config(args, cfg), args.task)
    if args.transfer_mode == "fine-tune":
        run.save_checkpoint("transfer", "transfer.ckpt", ckpt)
    run.write_json("transfer", f"transfer.{args.transfer_mode}.eval.json", ev.to_dict())
    return ev.to_dict()


def cmd_analyze_tokens(args, cfg, run):
    data = _data_dir(args, cfg)
    split = _slu_split(data, args.language, args.split)
    pre = _manifest(data, "asr_train.jsonl")
    if args.dry_run:
        return {"dry_run": True}
    out = {"language": args.language, "split": args.split,
           "coverage_percent": token_coverage([u.text for u in split], [u.text for u in pre])}
    run.write_json("analyze-tokens", "token_coverage.json", out)
    return out


def cmd_analyze_decoder_diff(args, cfg, run):
    a, b = _load_ckpt(args.original), _load_ckpt(args.finetuned)
    if args.dry_run:
        return {"dry_run": True}
    out = decoder_param_diff(a, b)
    run.write_json("analyze-decoder-diff", "decoder_diff.json", out)
    return {k: out[k] for k in ("edges", "counts", "total")}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-text": cmd_pretrain_text,
    "finetune-nlu": cmd_finetune_nlu,
    "pretrain-adaptor": cmd_pretrain_adaptor,
    "train-slu": cmd_train_slu,
    "eval": cmd_eval,
    "score": cmd_score,
    "transfer": cmd_transfer,
    "analyze-tokens": cmd_analyze_tokens,
    "analyze-decoder-diff": cmd_analyze_decoder_diff,
}


# --------------------------------------------------------------------------- #
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config (keys: model, train, data, objective, out)")
    common.add_argument("--seed", type=int, help="overrides train.seed (and the data seed for gen-data)")
    common.add_argument("--out", help="run directory; all outputs and manifest.jsonl go here")
    common.add_argument("--mode", choices=["greedy", "beam"], help="decoding mode")
    common.add_argument("--beam-size", type=int)
    common.add_argument("--dry-run", action="store_true", help="validate inputs and configs, compute nothing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mosaiq", description="Staged speech-to-frame SLU training on synthetic data.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    add("gen-data", "write the synthetic benchmark manifests")
    s = add("pretrain-text", "stage 0: denoising text-model pretraining")
    s.add_argument("--data")
    s = add("finetune-nlu", "stage 1: text -> frame decoder fine-tuning")
    s.add_argument("--data")
    s.add_argument("--base", required=True)
    s.add_argument("--language", type=int, default=0)
    s = add("pretrain-adaptor", "stage 2: Adaptor pretraining on ASR pairs")
    s.add_argument("--data")
    s.add_argument("--base", required=True)
    s.add_argument("--objective", help="comma separated, e.g. postdec-aed,preenc-ctc")
    s = add("train-slu", "stage 3: SLU training of the Adaptor, then test evaluation")
    s.add_argument("--data")
    s.add_argument("--base", required=True)
    s.add_argument("--nlu", required=True)
    s.add_argument("--adaptor-init", help="pretrained Adaptor checkpoint; omitted means a fresh Adaptor")
    s.add_argument("--language", type=int, default=0)
    s.add_argument("--task", choices=["sf", "ic", "ner"], default="sf")
    s = add("eval", "decode a split and score it")
    s.add_argument("--data")
    s.add_argument("--slu", required=True)
    s.add_argument("--language", type=int, default=0)
    s.add_argument("--split", default="test")
    s.add_argument("--source", choices=["speech", "text"], default="speech")
    s.add_argument("--task", choices=["sf", "ic", "ner"], default="sf")
    s = add("score", "score hypothesis frames against references (JSONL)")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--task", choices=["sf", "ic", "ner"], default="sf")
    s = add("transfer", "evaluate an SLU model on another language, zero-shot or after fine-tuning")
    s.add_argument("--data")
    s.add_argument("--slu", required=True)
    s.add_argument("--language", type=int, required=True)
    s.add_argument("--transfer-mode", choices=["zero-shot", "fine-tune"], default="zero-shot")
    s.add_argument("--task", choices=["sf", "ic", "ner"], default="sf")
    s = add("analyze-tokens", "share of a split's tokens seen in the pretraining texts")
    s.add_argument("--data")
    s.add_argument("--language", type=int, default=0)
    s.add_argument("--split", default="test")
    s = add("analyze-decoder-diff", "histogram of relative decoder parameter changes")
    s.add_argument("--original", required=True)
    s.add_argument("--finetuned", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: usage: a subcommand is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    core.set_threads()
    try:
        cfg = load_config(args.config)
        out = args.out or cfg.out
        run = None
        if out is not None and not args.dry_run:
            run = RunDir(out)
        elif args.command not in ("score",) and not args.dry_run:
            raise UsageError("--out is required (or set 'out' in the config)")
        result = COMMANDS[args.command](args, cfg, run)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ValueError, TypeError, KeyError, OSError) as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: data: {msg}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
