"""Desk-scale comparison runs: Adaptor pretraining vs a fresh Adaptor, and zero-shot vs fine-tuned transfer.

The benchmark, the text model and the NLU decoder are built once per benchmark
seed; run seeds only drive Adaptor pretraining and SLU training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .checkpoint import Checkpoint
from .data import Benchmark, make_benchmark
from .losses import ObjectiveSpec
from .model import ModelConfig
from .pipelines import TrainConfig, evaluate, finetune_nlu, pretrain_adaptor, pretrain_text_model, train_slu, \
    transfer_eval

log = logging.getLogger(__name__)


@dataclass
class DeskRecipe:
    """Stage budgets tuned to run on one CPU core in minutes."""
    model: ModelConfig = field(default_factory=ModelConfig)
    text: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=2e-3, warmup_steps=300, max_epochs=6))
    nlu: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=2e-3, warmup_steps=100, max_epochs=20))
    adaptor: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=2e-3, warmup_steps=200, max_epochs=2))
    slu: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=2e-3, warmup_steps=100, max_epochs=15,
                                                                 decode_mode="greedy"))
    transfer: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=2e-3, warmup_steps=100,
                                                                      max_epochs=15, decode_mode="greedy"))
    objective: str = "postdec-aed"
    adaptor_valid: int = 100  # ASR validation utterances used for early stopping
    language: int = 0


@dataclass
class SharedBase:
    bench: Benchmark
    base: Checkpoint
    nlu: Checkpoint
    seconds: float


def build_shared_base(bench_seed: int = 0, recipe: DeskRecipe | None = None,
                      bench: Benchmark | None = None) -> SharedBase:
    recipe = recipe or DeskRecipe()
    t0 = time.perf_counter()
    bench = bench or make_benchmark(bench_seed)
    texts = [(u.text, u.language) for u in bench.asr["train"]]
    texts += [(u.text, u.language) for splits in bench.slu.values() for u in splits["train"]]
    valid = [(u.text, u.language) for u in bench.asr["valid"]]
    base, _ = pretrain_text_model(texts, recipe.model, recipe.text, valid=valid)
    lang = bench.slu[recipe.language]
    nlu, _ = finetune_nlu(base, lang["train"], lang["dev"], recipe.nlu)
    return SharedBase(bench, base, nlu, time.perf_counter() - t0)


@dataclass
class PretrainingRun:
    seed: int
    fresh_cver: float
    pretrained_cver: float
    fresh: Checkpoint
    pretrained: Checkpoint
    seconds: float

    @property
    def pretraining_helps(self) -> bool:
        return self.pretrained_cver < self.fresh_cver


def pretraining_comparison(shared: SharedBase, seed: int, recipe: DeskRecipe | None = None) -> PretrainingRun:
    """Test CVER of SLU training from a fresh Adaptor and from a pretrained one."""
    recipe = recipe or DeskRecipe()
    t0 = time.perf_counter()
    bench = shared.bench
    lang = bench.slu[recipe.language]
    spec = ObjectiveSpec.parse(recipe.objective)
    adaptor, _ = pretrain_adaptor(shared.base, bench.asr["train"], bench.asr["valid"][:recipe.adaptor_valid], spec,
                                  recipe.adaptor.replace(seed=seed))
    slu_cfg = recipe.slu.replace(seed=seed)
    out = {}
    for name, init in (("fresh", None), ("pretrained", adaptor)):
        slu, _ = train_slu(shared.base, shared.nlu, init, lang["train"], lang["dev"], slu_cfg)
        report, _ = evaluate(slu, lang["test"], slu_cfg)
        out[name] = (slu, report.metrics["cver"])
        log.info("seed %d %s adaptor: test CVER %.4f", seed, name, report.metrics["cver"])
    return PretrainingRun(seed, out["fresh"][1], out["pretrained"][1], out["fresh"][0], out["pretrained"][0],
                          time.perf_counter() - t0)


@dataclass
class TransferRun:
    seed: int
    zero_shot_cver: float
    fine_tuned_cver: float
    seconds: float

    @property
    def fine_tuning_helps(self) -> bool:
        return self.fine_tuned_cver < self.zero_shot_cver


def transfer_comparison(shared: SharedBase, source: Checkpoint, target_language: int, seed: int,
                        recipe: DeskRecipe | None = None) -> TransferRun:
    """Evaluate ``source`` on another language as-is and after Adaptor fine-tuning on that language."""
    recipe = recipe or DeskRecipe()
    t0 = time.perf_counter()
    tgt = shared.bench.slu[target_language]
    cfg = recipe.transfer.replace(seed=seed)
    zero, _ = transfer_eval(source, tgt["train"], tgt["dev"], tgt["test"], "zero-shot", cfg)
    tuned, _ = transfer_eval(source, tgt["train"], tgt["dev"], tgt["test"], "fine-tune", cfg)
    log.info("seed %d transfer to language %d: zero-shot %.4f fine-tuned %.4f", seed, target_language,
             zero.metrics["cver"], tuned.metrics["cver"])
    return TransferRun(seed, zero.metrics["cver"], tuned.metrics["cver"], time.perf_counter() - t0)
