"""The training recipe: text-model pretraining, NLU fine-tuning, Adaptor pretraining, SLU training.

Every stage loads a checkpoint, marks exactly one parameter group trainable,
trains with Adam + warmup and validation-based early stopping, and returns
the best-validation checkpoint together with a :class:`StageReport`.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import core
from .checkpoint import Checkpoint, changed_names
from .data import Utterance, parse_frame, serialize_frame, utterance_features
from .losses import Objective, ObjectiveSpec, aed_loss, combine, ctc_loss, mc_loss, token_accuracy
from .metrics import EvalReport, SemanticFrame, edit_distance, evaluate_frames
from .model import (ADAPTOR, DECODER, EMBED, ENCODER, Branch, FeatureBatch, FeatureSequence, HiddenSequence,
                    ModelConfig, SLUModel, Stage, TokenBatch, TokenSequence)

log = logging.getLogger(__name__)

SPEED_FACTORS = (0.9, 1.0, 1.1)

TEXT_MODEL_GROUPS = (EMBED, ENCODER, DECODER)
NLU_GROUPS = (DECODER,)
ADAPTOR_GROUPS = (ADAPTOR,)
CTC_BLANK = ADAPTOR + "ctc_blank"  # only trainable under a CTC objective; nothing else reaches it


def adaptor_exclude(spec: ObjectiveSpec | None = None) -> tuple[str, ...]:
    return () if spec is not None and Objective.PRE_ENC_CTC in spec else (CTC_BLANK,)


@dataclass
class TrainConfig:
    peak_lr: float = 5e-5
    warmup_steps: int = 500
    max_epochs: int = 30
    patience: int = 3
    batch_size: int = 32
    seed: int = 0
    label_smoothing: float = 0.1
    speed_perturb: bool = True
    mask_prob: float = 0.15
    decode_mode: str = "beam"
    beam_size: int = 4
    max_decode_len: int = 96

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("max_epochs must be >= 0 and batch_size >= 1")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageReport:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    initial_metric: float | None = None
    best_epoch: int = 0
    stopping_epoch: int = 0
    skipped_batches: int = 0
    wall_clock: float = 0.0
    trainable: list[str] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("epochs")
        d.pop("wall_clock")
        return d


# --------------------------------------------------------------------------- #
# batches

def speed_perturb(features: FeatureSequence, factor: float) -> FeatureSequence:
    """Resample frames by linear interpolation to ``round(length / factor)`` frames."""
    if factor not in SPEED_FACTORS:
        raise ValueError(f"speed factor must be one of {SPEED_FACTORS}")
    n = features.length
    x = features.frames[:n]
    if factor == 1.0 or n == 0:
        return FeatureSequence(x.copy(), n, features.language)
    m = int(math.floor(n / factor + 0.5))
    if n == 1:
        return FeatureSequence(np.repeat(x, m, axis=0), m, features.language)
    pos = np.arange(m) * (n - 1) / max(m - 1, 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[:, None]
    y = x[lo] * (1 - w) + x[hi] * w
    return FeatureSequence(y.astype(np.float32), m, features.language)


class FeatureCache:
    """Simulated features per utterance, computed once."""

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self._store: dict[tuple, FeatureSequence] = {}

    def __call__(self, utt: Utterance) -> FeatureSequence:
        # ids repeat across benchmarks, so the key carries everything the features depend on
        key = (utt.id, utt.text, utt.language, utt.feature_seed)
        f = self._store.get(key)
        if f is None:
            f = self._store[key] = utterance_features(utt, self.feature_dim)
        return f


_CACHES: dict[int, FeatureCache] = {}


def feature_cache(feature_dim: int) -> FeatureCache:
    if feature_dim not in _CACHES:
        _CACHES[feature_dim] = FeatureCache(feature_dim)
    return _CACHES[feature_dim]


def _batches(items: Sequence, size: int, rng: core.Rng | None) -> list[list]:
    order = np.arange(len(items))
    if rng is not None:
        order = rng.generator().permutation(len(items))
    return [[items[i] for i in order[k: k + size]] for k in range(0, len(items), size)]


def _char_tokens(model: SLUModel, utt: Utterance, eos: bool = False) -> list[int]:
    ids = [model.vocab.language_id(utt.language)] + model.vocab.encode_chars(utt.text)
    return ids + [model.vocab.eos_id] if eos else ids


def _teacher_pair(seqs: Sequence[list[int]], languages, pad: int) -> tuple[TokenBatch, torch.Tensor]:
    """Decoder inputs (all but last) and labels (all but first), padded."""
    dec = TokenBatch.collate([TokenSequence(s[:-1], k) for s, k in zip(seqs, languages)], pad)
    lab = TokenBatch.collate([TokenSequence(s[1:], k) for s, k in zip(seqs, languages)], pad)
    return dec, lab.ids


def _features(model: SLUModel, utts: Sequence[Utterance], rng: core.Rng | None = None) -> FeatureBatch:
    cache = feature_cache(model.config.feature_dim)
    feats = [cache(u) for u in utts]
    if rng is not None:
        gen = rng.generator()
        feats = [speed_perturb(f, SPEED_FACTORS[int(gen.integers(3))]) for f in feats]
    return FeatureBatch.collate(feats)


# --------------------------------------------------------------------------- #
# generic loop

def _snapshot(model: SLUModel) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}


def _restore(model: SLUModel, snap: dict[str, torch.Tensor]):
    own = dict(model.named_parameters())
    with torch.no_grad():
        for n, v in snap.items():
            own[n].copy_(v)


def fit(model: SLUModel, groups: Sequence[str], train_items: Sequence, loss_fn: Callable,
        valid_fn: Callable[[], float], config: TrainConfig, stage: str, exclude: Sequence[str] = ()) -> StageReport:
    """Train the parameters under ``groups`` with early stopping on ``valid_fn`` (higher is better)."""
    start = time.perf_counter()
    rng = core.Rng(config.seed, (stage,))
    torch.manual_seed(rng.split("torch").integer())
    model.set_trainable(groups, exclude)
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    report = StageReport(stage, trainable=sorted(params))
    state = core.OptimizerState(config.peak_lr, config.warmup_steps)
    model.eval()
    best = valid_fn() if config.max_epochs > 0 else None
    report.initial_metric = best
    best_snap = _snapshot(model)
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        losses, parts = [], {}
        for k, batch in enumerate(_batches(train_items, config.batch_size, rng.split(f"epoch{epoch}"))):
            with core.per_op_checks(False):
                loss, comps = loss_fn(batch, rng.split(f"epoch{epoch}").split(str(k)))
            if loss is None:
                report.skipped_batches += 1
                continue
            core.check_finite(f"{stage} loss", loss, force=True)
            grads = core.backward(params, loss)
            core.adam_step(state, params, grads)
            losses.append(loss.item())
            for name, v in comps.items():
                parts.setdefault(name, []).append(v)
        model.eval()
        metric = valid_fn()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
               "valid_metric": metric, "lr": state.lr}
        row.update({f"loss/{k}": float(np.mean(v)) for k, v in parts.items()})
        report.epochs.append(row)
        log.info("%s epoch %d: %s", stage, epoch, row)
        report.stopping_epoch = epoch
        if best is None or metric > best:
            best, report.best_epoch, best_snap = metric, epoch, _snapshot(model)
        elif epoch - report.best_epoch >= config.patience:
            break
    _restore(model, best_snap)
    model.eval()
    model.set_trainable(())
    report.wall_clock = time.perf_counter() - start
    return report


def _checkpoint(model: SLUModel, groups: Sequence[str], meta: dict, exclude: Sequence[str] = ()) -> Checkpoint:
    ckpt = Checkpoint.from_model(model, meta)
    for name in ckpt.trainable:
        ckpt.trainable[name] = name.startswith(tuple(groups)) and not name.startswith(tuple(exclude))
    return ckpt


# --------------------------------------------------------------------------- #
# stage 0: general text model

def _noised(ids: list[int], gen: np.random.Generator, prob: float, mask_id: int) -> list[int]:
    hit = gen.random(len(ids)) < prob
    hit[0] = False
    return [mask_id if h else t for t, h in zip(ids, hit)]


def pretrain_text_model(texts: Sequence[tuple[str, int]], model_config: ModelConfig, config: TrainConfig,
                        valid: Sequence[tuple[str, int]] | None = None) -> tuple[Checkpoint, StageReport]:
    """Denoising autoencoder over (text, language) pairs; stands in for a pretrained text model."""
    if not texts:
        raise ValueError("empty corpus")
    langs = {k for _, k in texts}
    missing = set(range(model_config.n_languages)) - langs
    if missing:
        raise ValueError(f"corpus lacks languages {sorted(missing)}")
    model = SLUModel(model_config)
    voc = model.vocab
    items = [Utterance(f"t{i}", k, t, SemanticFrame(), 0) for i, (t, k) in enumerate(texts)]
    valid_items = [Utterance(f"v{i}", k, t, SemanticFrame(), 0) for i, (t, k) in enumerate(valid or texts[:64])]

    def batch_tensors(batch, rng):
        gen = rng.generator()
        src = [TokenSequence(_noised(_char_tokens(model, u), gen, config.mask_prob, voc.mask_id), u.language)
               for u in batch]
        tgt = [_char_tokens(model, u, eos=True) for u in batch]
        return TokenBatch.collate(src, voc.pad_id), _teacher_pair(tgt, [u.language for u in batch], voc.pad_id)

    def loss_fn(batch, rng):
        src, (dec, labels) = batch_tensors(batch, rng)
        memory = model.text_encode(model.text_embed(src))
        _, logits = model.text_decode(memory, dec)
        return aed_loss(logits, labels, dec.lengths, config.label_smoothing), {}

    def valid_fn():
        hit = tot = 0
        with torch.no_grad():
            for k, batch in enumerate(_batches(valid_items, 64, None)):
                src, (dec, labels) = batch_tensors(batch, core.Rng(config.seed, ("text-valid", str(k))))
                _, logits = model.text_decode(model.text_encode(model.text_embed(src)), dec)
                h, n = token_accuracy(logits, labels, dec.lengths)
                hit, tot = hit + h, tot + n
        return hit / max(tot, 1)

    report = fit(model, TEXT_MODEL_GROUPS, items, loss_fn, valid_fn, config, "pretrain-text")
    return _checkpoint(model, TEXT_MODEL_GROUPS, {"kind": "general text model"}), report


def reconstruction_accuracy(ckpt: Checkpoint, texts: Sequence[tuple[str, int]], mask_prob: float, seed: int) -> float:
    """Teacher-forced token accuracy of reconstructing noised text."""
    model = ckpt.to_model()
    model.eval()
    voc = model.vocab
    gen = core.Rng(seed, ("reconstruction",)).generator()
    hit = tot = 0
    items = [Utterance(f"r{i}", k, t, SemanticFrame(), 0) for i, (t, k) in enumerate(texts)]
    with torch.no_grad():
        for batch in _batches(items, 64, None):
            src = [TokenSequence(_noised(_char_tokens(model, u), gen, mask_prob, voc.mask_id), u.language)
                   for u in batch]
            dec, labels = _teacher_pair([_char_tokens(model, u, eos=True) for u in batch],
                                        [u.language for u in batch], voc.pad_id)
            memory = model.text_encode(model.text_embed(TokenBatch.collate(src, voc.pad_id)))
            _, logits = model.text_decode(memory, dec)
            h, n = token_accuracy(logits, labels, dec.lengths)
            hit, tot = hit + h, tot + n
    return hit / max(tot, 1)


# --------------------------------------------------------------------------- #
# stage 1: NLU

def _frame_targets(model: SLUModel, utts: Sequence[Utterance]) -> dict[str, list[int]]:
    out = {}
    for u in utts:
        try:
            out[u.id] = serialize_frame(u.frame, u.language, model.vocab).ids
        except ValueError as e:
            raise ValueError(f"utterance {u.id}: unserializable frame ({e})") from None
    return out


def finetune_nlu(base: Checkpoint, train: Sequence[Utterance], dev: Sequence[Utterance],
                 config: TrainConfig) -> tuple[Checkpoint, StageReport]:
    """Text -> frame fine-tuning of the decoder only; encoder and embeddings stay frozen."""
    model = base.to_model()
    voc = model.vocab
    targets = _frame_targets(model, list(train) + list(dev))

    def tensors(batch):
        src = TokenBatch.collate([TokenSequence(_char_tokens(model, u), u.language) for u in batch], voc.pad_id)
        return src, _teacher_pair([targets[u.id] for u in batch], [u.language for u in batch], voc.pad_id)

    def loss_fn(batch, rng):
        src, (dec, labels) = tensors(batch)
        with torch.no_grad():
            memory = model.text_encode(model.text_embed(src))
        _, logits = model.text_decode(memory, dec)
        return aed_loss(logits, labels, dec.lengths, config.label_smoothing), {}

    def valid_fn():
        hit = tot = 0
        with torch.no_grad():
            for batch in _batches(dev, 64, None):
                src, (dec, labels) = tensors(batch)
                _, logits = model.text_decode(model.text_encode(model.text_embed(src)), dec)
                h, n = token_accuracy(logits, labels, dec.lengths)
                hit, tot = hit + h, tot + n
        return hit / max(tot, 1)

    report = fit(model, NLU_GROUPS, list(train), loss_fn, valid_fn, config, "finetune-nlu")
    meta = dict(base.meta, kind="nlu model")
    return _checkpoint(model, NLU_GROUPS, meta), report


# --------------------------------------------------------------------------- #
# stage 2: Adaptor pretraining

def adaptor_losses(model: SLUModel, spec: ObjectiveSpec, utts: Sequence[Utterance], feats: FeatureBatch,
                   smoothing: float) -> dict[Objective, torch.Tensor]:
    """Per-objective losses for one batch of (speech, transcription) pairs."""
    voc = model.vocab
    langs = [u.language for u in utts]
    text = TokenBatch.collate([TokenSequence(_char_tokens(model, u), u.language) for u in utts], voc.pad_id)
    needs_enc = any(o in spec for o in (Objective.POST_ENC_MC, Objective.POST_DEC_MC, Objective.POST_DEC_AED))
    needs_dec = any(o in spec for o in (Objective.POST_DEC_MC, Objective.POST_DEC_AED))
    out = {}
    h_ad = model.adaptor_forward(feats)
    if Objective.PRE_ENC_CTC in spec:
        logits = model.ctc_logits(h_ad)
        chars = [voc.encode_chars(u.text) for u in utts]
        out[Objective.PRE_ENC_CTC] = ctc_loss(logits, h_ad.lengths, chars, voc.blank_id, reduction="mean")
    lang = model.language_rows(feats.languages).unsqueeze(1)
    sp = HiddenSequence(core.concat([lang.to(h_ad.values.dtype), h_ad.values], axis=1), h_ad.lengths + 1,
                        Stage.PRE_ENC, Branch.SPEECH)
    with torch.no_grad():
        tp = model.text_embed(text)
    if Objective.PRE_ENC_MC in spec:
        out[Objective.PRE_ENC_MC] = mc_loss(sp, tp)
    if needs_enc:
        se = model.text_encode(sp)
        with torch.no_grad():
            te = model.text_encode(tp)
        if Objective.POST_ENC_MC in spec:
            out[Objective.POST_ENC_MC] = mc_loss(se, te)
    if needs_dec:
        dec, labels = _teacher_pair([_char_tokens(model, u, eos=True) for u in utts], langs, voc.pad_id)
        sd, logits = model.text_decode(se, dec)
        if Objective.POST_DEC_MC in spec:
            with torch.no_grad():
                td, _ = model.text_decode(te, dec)
            out[Objective.POST_DEC_MC] = mc_loss(sd, td)
        if Objective.POST_DEC_AED in spec:
            out[Objective.POST_DEC_AED] = aed_loss(logits, labels, dec.lengths, smoothing)
    return out


def ctc_greedy(logits: torch.Tensor, lengths, blank: int) -> list[list[int]]:
    best = logits.argmax(-1)
    out = []
    for i, n in enumerate(torch.as_tensor(lengths).tolist()):
        seq, prev = [], None
        for t in best[i, :n].tolist():
            if t != prev and t != blank:
                seq.append(t)
            prev = t
        out.append(seq)
    return out


def pretrain_adaptor(base: Checkpoint, pairs: Sequence[Utterance], valid: Sequence[Utterance],
                     spec: ObjectiveSpec, config: TrainConfig) -> tuple[Checkpoint, StageReport]:
    """Align speech with text representations of the frozen text model; only the Adaptor learns."""
    if not isinstance(spec, ObjectiveSpec):
        raise TypeError("spec must be an ObjectiveSpec")
    if not pairs:
        raise ValueError("no pretraining pairs")
    model = base.to_model()
    voc = model.vocab

    def loss_fn(batch, rng):
        feats = _features(model, batch, rng.split("speed") if config.speed_perturb else None)
        parts = adaptor_losses(model, spec, batch, feats, config.label_smoothing)
        total = combine(spec, parts)
        return total, ({o.value: float(v.item()) for o, v in parts.items()} if total is not None else {})

    def valid_fn():
        hit = tot = 0
        loss_sum, n_batches = 0.0, 0
        with torch.no_grad():
            for batch in _batches(valid, 64, None):
                feats = _features(model, batch)
                if Objective.POST_DEC_AED in spec or Objective.PRE_ENC_CTC in spec:
                    if Objective.POST_DEC_AED in spec:
                        se = model.text_encode(model.speech_preenc(feats))
                        dec, labels = _teacher_pair([_char_tokens(model, u, eos=True) for u in batch],
                                                    [u.language for u in batch], voc.pad_id)
                        _, logits = model.text_decode(se, dec)
                        h, n = token_accuracy(logits, labels, dec.lengths)
                    else:
                        h_ad = model.adaptor_forward(feats)
                        hyps = ctc_greedy(model.ctc_logits(h_ad), h_ad.lengths, voc.blank_id)
                        h = n = 0
                        for u, hyp in zip(batch, hyps):
                            ref = voc.encode_chars(u.text)
                            h += len(ref) - edit_distance(ref, hyp).distance
                            n += len(ref)
                    hit, tot = hit + h, tot + n
                else:
                    total = combine(spec, adaptor_losses(model, spec, batch, feats, config.label_smoothing))
                    loss_sum += float(total.item())
                    n_batches += 1
        if tot:
            return hit / tot
        return -loss_sum / max(n_batches, 1)

    exclude = adaptor_exclude(spec)
    report = fit(model, ADAPTOR_GROUPS, list(pairs), loss_fn, valid_fn, config, f"pretrain-adaptor[{spec}]", exclude)
    meta = dict(base.meta, kind="pretrained adaptor", objectives=str(spec))
    return _checkpoint(model, ADAPTOR_GROUPS, meta, exclude), report


def validation_mc(ckpt: Checkpoint, utts: Sequence[Utterance], objective: Objective) -> float:
    """Mean MC loss of one MC objective over ``utts`` (used to check pretraining progress)."""
    model = ckpt.to_model()
    spec = ObjectiveSpec((objective,))
    vals = []
    with torch.no_grad():
        for batch in _batches(list(utts), 64, None):
            vals.append(float(adaptor_losses(model, spec, batch, _features(model, batch), 0.0)[objective]))
    return float(np.mean(vals))


# --------------------------------------------------------------------------- #
# stage 3: SLU

def assemble_slu(base: Checkpoint, nlu: Checkpoint, adaptor: Checkpoint | None) -> SLUModel:
    """Speech/text encoders and embeddings from ``base``, decoder from ``nlu``, Adaptor from ``adaptor``."""
    for other in (nlu, adaptor):
        if other is not None and other.config.to_dict() != base.config.to_dict():
            raise ValueError("checkpoint configs differ")
    model = base.to_model()
    nlu.load_into(model, (DECODER,))
    if adaptor is not None:
        adaptor.load_into(model, (ADAPTOR,))
    return model


def slu_tensors(model: SLUModel, batch: Sequence[Utterance], targets: dict[str, list[int]],
                rng: core.Rng | None):
    feats = _features(model, batch, rng)
    dec, labels = _teacher_pair([targets[u.id] for u in batch], [u.language for u in batch], model.vocab.pad_id)
    return feats, dec, labels


def _train_adaptor_on_frames(model: SLUModel, train, dev, config: TrainConfig, stage: str) -> StageReport:
    targets = _frame_targets(model, list(train) + list(dev))

    def loss_fn(batch, rng):
        feats, dec, labels = slu_tensors(model, batch, targets, rng.split("speed") if config.speed_perturb else None)
        memory = model.text_encode(model.speech_preenc(feats))
        _, logits = model.text_decode(memory, dec)
        return aed_loss(logits, labels, dec.lengths, config.label_smoothing), {}

    def valid_fn():
        hit = tot = 0
        with torch.no_grad():
            for batch in _batches(list(dev), 64, None):
                feats, dec, labels = slu_tensors(model, batch, targets, None)
                _, logits = model.text_decode(model.text_encode(model.speech_preenc(feats)), dec)
                h, n = token_accuracy(logits, labels, dec.lengths)
                hit, tot = hit + h, tot + n
        return hit / max(tot, 1)

    return fit(model, ADAPTOR_GROUPS, list(train), loss_fn, valid_fn, config, stage, adaptor_exclude())


def train_slu(base: Checkpoint, nlu: Checkpoint, adaptor_init: Checkpoint | None, train: Sequence[Utterance],
              dev: Sequence[Utterance], config: TrainConfig) -> tuple[Checkpoint, StageReport]:
    """SLU training: only the Adaptor learns; ``adaptor_init=None`` keeps the base's untrained Adaptor."""
    model = assemble_slu(base, nlu, adaptor_init)
    report = _train_adaptor_on_frames(model, train, dev, config, "train-slu")
    meta = dict(nlu.meta, kind="slu model", adaptor="pretrained" if adaptor_init is not None else "none")
    return _checkpoint(model, ADAPTOR_GROUPS, meta, adaptor_exclude()), report


# --------------------------------------------------------------------------- #
# evaluation and transfer

def decode(model: SLUModel, utts: Sequence[Utterance], config: TrainConfig, source: str = "speech",
           batch_size: int = 64) -> list[SemanticFrame]:
    """Predict frames from speech features (SLU) or from gold text (NLU)."""
    model.eval()
    out = []
    voc = model.vocab
    with torch.no_grad():
        for k in range(0, len(utts), batch_size):
            batch = list(utts[k: k + batch_size])
            if source == "speech":
                pre = model.speech_preenc(_features(model, batch))
            elif source == "text":
                pre = model.text_embed(TokenBatch.collate(
                    [TokenSequence(_char_tokens(model, u), u.language) for u in batch], voc.pad_id))
            else:
                raise ValueError(f"unknown source {source!r}")
            memory = model.text_encode(pre)
            seqs = model.generate(memory, [u.language for u in batch], config.decode_mode, config.beam_size,
                                  config.max_decode_len)
            out += [parse_frame(s, voc) for s in seqs]
    return out


def evaluate(ckpt: Checkpoint | SLUModel, utts: Sequence[Utterance], config: TrainConfig, task: str = "sf",
             source: str = "speech") -> tuple[EvalReport, list[SemanticFrame]]:
    model = ckpt.to_model() if isinstance(ckpt, Checkpoint) else ckpt
    hyps = decode(model, utts, config, source)
    return evaluate_frames([u.frame for u in utts], hyps, task), hyps


def exact_match(refs: Sequence[SemanticFrame], hyps: Sequence[SemanticFrame]) -> float:
    norm = lambda f: (f.intent, [(l, " ".join(v.lower().split())) for l, v in f.slots])  # noqa: E731
    return sum(norm(r) == norm(h) for r, h in zip(refs, hyps)) / max(len(refs), 1)


def transfer_eval(source: Checkpoint, train: Sequence[Utterance], dev: Sequence[Utterance],
                  test: Sequence[Utterance], mode: str, config: TrainConfig,
                  task: str = "sf") -> tuple[EvalReport, Checkpoint]:
    """Evaluate an SLU model on another dataset as-is (``zero-shot``) or after Adaptor fine-tuning."""
    n_lang = source.config.n_languages
    for u in list(train) + list(dev) + list(test):
        if not 0 <= u.language < n_lang:
            raise ValueError(f"unknown language id {u.language}")
    if mode == "zero-shot":
        report, _ = evaluate(source, test, config, task)
        return report, source
    if mode != "fine-tune":
        raise ValueError(f"unknown transfer mode {mode!r}")
    model = source.to_model()
    _train_adaptor_on_frames(model, train, dev, config, "transfer")
    ckpt = _checkpoint(model, ADAPTOR_GROUPS, dict(source.meta, kind="transferred slu model"), adaptor_exclude())
    report, _ = evaluate(model, test, config, task)
    return report, ckpt


def stage_diff(before: Checkpoint, after: Checkpoint) -> set[str]:
    return changed_names(before, after)
