import json

import numpy as np
import pytest
import torch

from mosaiq.checkpoint import Checkpoint, changed_names
from mosaiq.data import BenchmarkSize, make_benchmark
from mosaiq.losses import ObjectiveSpec, aed_loss
from mosaiq.model import ADAPTOR, DECODER, FeatureSequence, ModelConfig, TokenBatch, TokenSequence
from mosaiq.pipelines import (NLU_GROUPS, TrainConfig, _char_tokens, _frame_targets, _teacher_pair, assemble_slu, decode, evaluate, exact_match, finetune_nlu, fit,
                              pretrain_adaptor, pretrain_text_model, reconstruction_accuracy, speed_perturb,
                              train_slu, transfer_eval, validation_mc)

from helpers import tiny_model

MODEL = ModelConfig(d_model=16, d_ff=32, n_heads=2, n_adaptor_blocks=1, n_text_encoder_blocks=1,
                    n_decoder_blocks=1, n_speech_layers=2, feature_dim=8, speech_heads=2, dropout=0.0)
WIDE = ModelConfig(**{**MODEL.to_dict(), "d_model": 32, "d_ff": 64})
FAST = TrainConfig(peak_lr=3e-3, warmup_steps=5, max_epochs=2, batch_size=8, decode_mode="greedy",
                   max_decode_len=40)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(0, BenchmarkSize(n_train=24, n_dev=8, n_test=8, n_asr=48, n_asr_valid=9))


def corpus(bench):
    return [(u.text, u.language) for u in bench.asr["train"]]


@pytest.fixture(scope="module")
def base(bench):
    ckpt, _ = pretrain_text_model(corpus(bench), MODEL, FAST.replace(max_epochs=3))
    return ckpt


@pytest.fixture(scope="module")
def nlu(base, bench):
    ckpt, _ = finetune_nlu(base, bench.slu[0]["train"], bench.slu[0]["dev"], FAST)
    return ckpt


# ------------------------------------------------------------------ speed perturbation

def test_speed_perturb_examples():
    f = FeatureSequence(np.random.default_rng(0).normal(size=(100, 3)).astype(np.float32), 100, 0)
    same = speed_perturb(f, 1.0)
    assert np.array_equal(same.frames, f.frames)
    assert speed_perturb(f, 0.9).length == 111
    assert speed_perturb(f, 1.1).length == 91
    const = FeatureSequence(np.full((20, 2), 3.5, np.float32), 20, 0)
    out = speed_perturb(const, 0.9)
    assert np.allclose(out.frames, 3.5)
    with pytest.raises(ValueError):
        speed_perturb(f, 1.3)


# ------------------------------------------------------------------ generic loop

def test_early_stopping_and_best_restore():
    m = tiny_model()
    script = iter([0.0, 0.1, 0.5, 0.4, 0.3, 0.2, 0.9, 1.0])
    snapshots = {}

    def loss_fn(batch, rng):
        p = m.adaptor.ctc_blank
        return (p * p).sum(), {}

    def valid_fn():
        v = next(script)
        snapshots[v] = m.adaptor.ctc_blank.detach().clone()
        return v

    cfg = TrainConfig(peak_lr=1e-2, warmup_steps=1, max_epochs=30, patience=3, batch_size=1)
    rep = fit(m, (ADAPTOR,), [0, 1], loss_fn, valid_fn, cfg, "toy")
    # best at epoch 2 (0.5); epochs 3-5 do not improve -> stop at 5
    assert rep.best_epoch == 2 and rep.stopping_epoch == 5
    assert rep.stopping_epoch <= cfg.max_epochs
    assert torch.equal(m.adaptor.ctc_blank.detach(), snapshots[0.5])
    lines = [json.loads(x) for x in rep.to_jsonl().splitlines()]
    assert [x["epoch"] for x in lines] == [1, 2, 3, 4, 5]
    assert set(lines[0]) >= {"epoch", "train_loss", "valid_metric", "lr"}


def test_skipped_batches_counted():
    m = tiny_model()
    cfg = TrainConfig(max_epochs=1, batch_size=1, warmup_steps=1)
    rep = fit(m, (ADAPTOR,), [0, 1, 2], lambda b, r: (None, {}), lambda: 0.0, cfg, "skip")
    assert rep.skipped_batches == 3


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"peak_lr": 1e-3, "momentum": 0.9})
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


# ------------------------------------------------------------------ stage 0

def test_text_model_zero_epochs_is_init(bench):
    ck, _ = pretrain_text_model(corpus(bench), MODEL, FAST.replace(max_epochs=0))
    fresh = tiny_model(**{k: v for k, v in MODEL.to_dict().items() if k != "vocab_size"})
    for name, p in fresh.named_parameters():
        assert np.array_equal(ck.params[name], p.detach().numpy())


def test_text_model_rejects_bad_corpus():
    with pytest.raises(ValueError, match="empty"):
        pretrain_text_model([], MODEL, FAST)
    with pytest.raises(ValueError, match="lacks languages"):
        pretrain_text_model([("abc", 0)], MODEL, FAST)


def test_text_model_learns_and_is_deterministic(bench, base):
    untrained, _ = pretrain_text_model(corpus(bench), MODEL, FAST.replace(max_epochs=0))
    texts = [(u.text, u.language) for u in bench.asr["valid"]]
    assert reconstruction_accuracy(base, texts, 0.15, 1) > reconstruction_accuracy(untrained, texts, 0.15, 1)
    again, _ = pretrain_text_model(corpus(bench), MODEL, FAST.replace(max_epochs=3))
    assert again.digest() == base.digest()
    assert base.meta["kind"] == "general text model"


# ------------------------------------------------------------------ stage 1

def test_nlu_only_decoder_changes(base, nlu):
    changed = changed_names(base, nlu)
    assert changed and all(n.startswith(DECODER) for n in changed)
    assert {n for n, t in nlu.trainable.items() if t} == {n for n in nlu.params if n.startswith(DECODER)}


def test_nlu_zero_epochs_unchanged(base, bench):
    ck, _ = finetune_nlu(base, bench.slu[0]["train"], bench.slu[0]["dev"], FAST.replace(max_epochs=0))
    assert changed_names(base, ck) == set()


def test_nlu_beats_untrained_decoder():
    # toy task: 50 utterances, scored on themselves
    b = make_benchmark(0, BenchmarkSize(n_train=50, n_dev=8, n_test=8, n_asr=48, n_asr_valid=9))
    base, _ = pretrain_text_model(corpus(b), WIDE, FAST.replace(max_epochs=0))
    toy = b.slu[0]["train"]
    cfg = FAST.replace(max_epochs=60, peak_lr=1e-2, warmup_steps=20, patience=100, label_smoothing=0.0)
    ck, _ = finetune_nlu(base, toy, toy, cfg)
    refs = [u.frame for u in toy]
    trained = exact_match(refs, decode(ck.to_model(), toy, cfg, source="text"))
    untrained = exact_match(refs, decode(base.to_model(), toy, cfg, source="text"))
    assert trained > untrained


def test_nlu_rejects_unserializable_frame(base, bench):
    from dataclasses import replace
    from mosaiq.metrics import SemanticFrame

    bad = replace(bench.slu[0]["train"][0], frame=SemanticFrame("x", [("a=b", "c")]))
    with pytest.raises(ValueError, match="unserializable"):
        finetune_nlu(base, [bad], bench.slu[0]["dev"], FAST)


# ------------------------------------------------------------------ stage 2

def test_adaptor_pretraining_isolation_and_components(base, bench):
    spec = ObjectiveSpec.parse("postdec-aed,preenc-ctc")
    ck, rep = pretrain_adaptor(base, bench.asr["train"], bench.asr["valid"], spec, FAST)
    changed = changed_names(base, ck)
    assert changed and all(n.startswith(ADAPTOR) for n in changed)
    assert "adaptor.ctc_blank" in changed
    assert changed == {n for n, t in ck.trainable.items() if t} == set(rep.trainable)
    assert {"loss/postdec-aed", "loss/preenc-ctc"} <= set(rep.epochs[0])


def test_postenc_mc_pretraining_lowers_validation_mc(base, bench):
    from mosaiq.losses import Objective

    spec = ObjectiveSpec.parse("postenc-mc")
    cfg = FAST.replace(max_epochs=4)
    ck, _ = pretrain_adaptor(base, bench.asr["train"], bench.asr["valid"], spec, cfg)
    before = validation_mc(base, bench.asr["valid"], Objective.POST_ENC_MC)
    after = validation_mc(ck, bench.asr["valid"], Objective.POST_ENC_MC)
    assert after < before


@pytest.mark.parametrize("spec", ["preenc-mc", "postdec-mc"])
def test_other_objectives_train(base, bench, spec):
    ck, rep = pretrain_adaptor(base, bench.asr["train"][:16], bench.asr["valid"][:4], ObjectiveSpec.parse(spec),
                               FAST.replace(max_epochs=1))
    assert all(n.startswith(ADAPTOR) for n in changed_names(base, ck))
    assert rep.epochs[0][f"loss/{spec}"] >= 0


def test_adaptor_pretraining_rejects_bad_input(base, bench):
    with pytest.raises(TypeError):
        pretrain_adaptor(base, bench.asr["train"], bench.asr["valid"], "postdec-aed", FAST)
    with pytest.raises(ValueError):
        pretrain_adaptor(base, [], bench.asr["valid"], ObjectiveSpec.parse("postdec-aed"), FAST)


# ------------------------------------------------------------------ stage 3 and transfer

def test_train_slu_isolation(base, nlu, bench):
    ck, rep = train_slu(base, nlu, None, bench.slu[0]["train"], bench.slu[0]["dev"], FAST)
    diff = changed_names(Checkpoint.from_model(assemble_slu(base, nlu, None)), ck)
    declared = {n for n, t in ck.trainable.items() if t}
    assert diff == declared == set(rep.trainable)
    assert declared == {n for n in ck.params if n.startswith(ADAPTOR)} - {"adaptor.ctc_blank"}


def test_train_slu_rejects_config_mismatch(base, bench):
    other, _ = pretrain_text_model(corpus(bench), ModelConfig(**{**MODEL.to_dict(), "d_ff": 64}),
                                   FAST.replace(max_epochs=0))
    with pytest.raises(ValueError, match="configs differ"):
        train_slu(base, other, None, bench.slu[0]["train"], bench.slu[0]["dev"], FAST)


def _memorizing_decoder(base, utts, config):
    """Decoder fit to ``utts`` with a validation score that keeps improving, so the last epoch is kept."""
    m = base.to_model()
    voc = m.vocab
    targets = _frame_targets(m, utts)

    def loss_fn(batch, rng):
        src = TokenBatch.collate([TokenSequence(_char_tokens(m, u), u.language) for u in batch], voc.pad_id)
        dec, labels = _teacher_pair([targets[u.id] for u in batch], [u.language for u in batch], voc.pad_id)
        _, logits = m.text_decode(m.text_encode(m.text_embed(src)), dec)
        return aed_loss(logits, labels, dec.lengths, 0.0), {}

    fit(m, NLU_GROUPS, utts, loss_fn, lambda: -float(loss_fn(utts, None)[0].detach()), config, "rig")
    return Checkpoint.from_model(m)


def test_train_slu_overfits_one_utterance(bench):
    # finetune_nlu keeps the first epoch reaching full dev accuracy, which is too soft a decoder here
    base, _ = pretrain_text_model(corpus(bench), WIDE, FAST.replace(max_epochs=0))
    one = bench.slu[0]["train"][:1]
    cfg = TrainConfig(peak_lr=2e-2, warmup_steps=50, max_epochs=400, patience=400, batch_size=1,
                      label_smoothing=0.0, speed_perturb=False)
    nlu = _memorizing_decoder(base, one, cfg)
    _, rep = train_slu(base, nlu, None, one, one, cfg.replace(max_epochs=250, patience=250))
    assert min(e["train_loss"] for e in rep.epochs) < 0.01


def test_transfer_modes(base, nlu, bench):
    slu, _ = train_slu(base, nlu, None, bench.slu[0]["train"], bench.slu[0]["dev"], FAST)
    tgt = bench.slu[1]
    zero, same = transfer_eval(slu, tgt["train"], tgt["dev"], tgt["test"], "zero-shot", FAST)
    assert same is slu
    plain, _ = evaluate(slu, tgt["test"], FAST)
    assert zero.metrics == plain.metrics
    noop, _ = transfer_eval(slu, tgt["train"], tgt["dev"], tgt["test"], "fine-tune", FAST.replace(max_epochs=0))
    assert noop.metrics == zero.metrics
    tuned, ck = transfer_eval(slu, tgt["train"], tgt["dev"], tgt["test"], "fine-tune", FAST.replace(max_epochs=1))
    assert all(n.startswith(ADAPTOR) for n in changed_names(slu, ck))
    with pytest.raises(ValueError, match="language"):
        from dataclasses import replace

        transfer_eval(slu, [replace(tgt["train"][0], language=7)], tgt["dev"], tgt["test"], "fine-tune", FAST)
    with pytest.raises(ValueError):
        transfer_eval(slu, tgt["train"], tgt["dev"], tgt["test"], "few-shot", FAST)
