import numpy as np
import pytest
import torch

from mosaiq import core
from mosaiq.checkpoint import Checkpoint, CheckpointError, changed_names
from mosaiq.model import (ADAPTOR, DECODER, FeatureBatch, FeatureSequence, HiddenSequence, ModelConfig, SLUModel,
                          Stage, Branch, TokenBatch, TokenSequence, halve, sinusoid,
                          weighted_sum_features)

from helpers import coordinate_gradcheck, features, slu_loss, tiny_model


@pytest.fixture(scope="module")
def model():
    m = tiny_model()
    m.eval()
    return m


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_adaptor_blocks=0)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_model": 64, "colour": 1})
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.length_adaptor_stride == 2 and cfg.conv_kernel == 31


def test_weighted_sum_examples():
    layer = torch.randn(3, 2)
    assert torch.allclose(weighted_sum_features([layer, layer], torch.zeros(2)), layer)
    a, b = torch.randn(3, 2), torch.randn(3, 2)
    assert torch.allclose(weighted_sum_features([a, b], torch.tensor([1e6, 0.0])), a)
    out = weighted_sum_features([torch.tensor([[1.0]]), torch.tensor([[3.0]])], torch.zeros(2))
    assert torch.equal(out, torch.tensor([[2.0]]))
    with pytest.raises(core.ShapeError):
        weighted_sum_features([a, torch.randn(2, 2)], torch.zeros(2))


def test_speech_encoder_zero_length_and_determinism(model):
    empty = FeatureBatch.collate([FeatureSequence(np.zeros((0, 4), np.float32), 0, 0)])
    outs = model.speech_encode(empty)
    assert len(outs) == model.config.n_speech_layers and outs[0].shape[1] == 0
    feats = features(model, ["abc de"])
    a = model.speech_encode(feats)
    b = model.speech_encode(feats)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    other = tiny_model(speech_seed=1)
    assert not torch.equal(other.speech_encode(feats)[-1], a[-1])


def test_speech_encoder_is_never_trainable():
    m = tiny_model()
    m.set_trainable(("",))
    assert not any(n.startswith("speech_encoder.") for n in m.trainable_names())


def test_halving_rule():
    assert halve(torch.tensor([10, 11, 1, 33])).tolist() == [5, 6, 1, 17]


@pytest.mark.parametrize("n,expected", [(40, 5), (33, 5)])
def test_three_halvings_with_frontend_subsampler(n, expected):
    m = tiny_model(n_subsample_layers=2)
    m.eval()
    feats = FeatureBatch.collate([FeatureSequence(np.ones((n, 4), np.float32), n, 0)])
    h = m.adaptor_forward(feats)
    assert int(h.lengths[0]) == expected == m.output_length(n)
    assert h.values.shape[1] == expected


def test_default_adaptor_halves_once(model):
    feats = FeatureBatch.collate([FeatureSequence(np.ones((11, 4), np.float32), 11, 0)])
    assert int(model.adaptor_forward(feats).lengths[0]) == 6


def test_adaptor_rejects_too_short():
    m = tiny_model(n_subsample_layers=2)
    with pytest.raises(ValueError, match="too short"):
        m.adaptor_forward(FeatureBatch.collate([FeatureSequence(np.zeros((0, 4), np.float32), 0, 0)]))


def test_length_adaptor_examples(model):
    for n, want in ((10, 5), (11, 6), (1, 1)):
        h = HiddenSequence(torch.randn(1, n, 8), torch.tensor([n]), Stage.PRE_ENC, Branch.SPEECH)
        out = model.length_adaptor(h)
        assert int(out.lengths[0]) == want == out.values.shape[1]
    with pytest.raises(ValueError):
        model.length_adaptor(HiddenSequence(torch.randn(1, 2, 8), torch.tensor([2]), Stage.POST_ENC, Branch.SPEECH))


def test_adaptor_padding_invariance_and_zero_rows(model):
    feats = features(model, ["abcdef", "ab"])
    out = model.adaptor_forward(feats)
    noisy = FeatureBatch(feats.frames.clone(), feats.lengths, feats.languages)
    noisy.frames[1, int(feats.lengths[1]):] = 9.0
    out2 = model.adaptor_forward(noisy)
    n = int(out.lengths[1])
    assert torch.equal(out.values[1, :n], out2.values[1, :n])
    assert torch.all(out.values[1, n:] == 0)


def test_text_embed_examples(model):
    voc = model.vocab
    one = TokenBatch.collate([TokenSequence([voc.language_id(0)], 0)], voc.pad_id)
    assert model.text_embed(one).values.shape == (1, 1, 8)
    ids = voc.encode_chars("abc")
    a = model.text_embed(TokenBatch.collate([TokenSequence([voc.language_id(0)] + ids, 0)], voc.pad_id)).values
    b = model.text_embed(TokenBatch.collate([TokenSequence([voc.language_id(1)] + ids, 1)], voc.pad_id)).values
    assert not torch.equal(a[0, 0], b[0, 0])
    assert torch.equal(a[0, 1:], b[0, 1:])
    with pytest.raises(ValueError):
        model.text_embed(TokenBatch.collate([TokenSequence([len(voc)], 0)], voc.pad_id))


def test_embedding_nearest_neighbour_round_trip():
    m = tiny_model(d_model=64, n_heads=4)
    e = m.embed.weight.detach()
    ids = torch.arange(len(m.vocab))
    rows = m.text_embed(TokenBatch(ids.unsqueeze(1), torch.ones(len(ids), dtype=torch.long),
                                   torch.zeros(len(ids), dtype=torch.long))).values[:, 0]
    token_part = rows - sinusoid(1, 64)[0]
    assert torch.equal((token_part @ e.T).argmax(-1), ids)


def test_text_encode_mask_and_empty(model):
    voc = model.vocab
    seqs = [TokenSequence([voc.language_id(0)] + voc.encode_chars("abcd"), 0),
            TokenSequence([voc.language_id(0)] + voc.encode_chars("ab"), 0)]
    batch = TokenBatch.collate(seqs, voc.pad_id)
    h = model.text_embed(batch)
    out = model.text_encode(h)
    perturbed = HiddenSequence(h.values.clone(), h.lengths, h.stage, h.branch)
    perturbed.values[1, 3:] = 5.0
    out2 = model.text_encode(perturbed)
    assert torch.equal(out.values[1, :3], out2.values[1, :3])
    assert torch.all(out.values[1, 3:] == 0)
    empty = HiddenSequence(torch.zeros(1, 0, 8), torch.tensor([0]), Stage.PRE_ENC, Branch.TEXT)
    assert model.text_encode(empty).values.shape == (1, 0, 8)
    with pytest.raises(ValueError):
        model.text_encode(out)


def test_text_decode_shapes_causality_and_cross_attention(model):
    voc = model.vocab
    memory = model.text_encode(model.speech_preenc(features(model, ["abc"])))
    one = TokenBatch.collate([TokenSequence([voc.language_id(0)], 0)], voc.pad_id)
    hidden, logits = model.text_decode(memory, one)
    assert logits.shape == (1, 1, len(voc)) and hidden.stage is Stage.POST_DEC
    ids = [voc.language_id(0)] + voc.encode_chars("hello")
    a = model.text_decode(memory, TokenBatch.collate([TokenSequence(ids, 0)], voc.pad_id))[1]
    changed = list(ids)
    changed[4] = voc.encode_chars("z")[0]
    b = model.text_decode(memory, TokenBatch.collate([TokenSequence(changed, 0)], voc.pad_id))[1]
    assert torch.equal(a[0, :4], b[0, :4])
    assert not torch.equal(a[0, 4:], b[0, 4:])
    zero_mem = HiddenSequence(torch.zeros_like(memory.values), memory.lengths, memory.stage, memory.branch)
    c = model.text_decode(zero_mem, TokenBatch.collate([TokenSequence(ids, 0)], voc.pad_id))[1]
    assert not torch.allclose(a, c)
    with pytest.raises(ValueError):
        model.text_decode(memory, TokenBatch(torch.zeros(1, 0, dtype=torch.long), torch.tensor([0]),
                                             torch.tensor([0])))


class Rigged(SLUModel):
    """Decoder replaced by a table: emits a, b, </s> by prefix length."""

    def _step_logits(self, memory, prefix):
        voc = self.vocab
        script = voc.encode_chars("ab") + [voc.eos_id]
        out = torch.zeros(prefix.shape[0], len(voc))
        for r in range(prefix.shape[0]):
            k = min(prefix.shape[1] - 1, len(script) - 1)
            out[r, script[k]] = 10.0
        return out


def test_generate_rigged_oracle():
    m = Rigged(ModelConfig(d_model=8, d_ff=16, n_heads=2, feature_dim=4, speech_heads=2))
    voc = m.vocab
    memory = HiddenSequence(torch.zeros(2, 3, 8), torch.tensor([3, 3]), Stage.POST_ENC, Branch.TEXT)
    for mode in ("greedy", "beam"):
        out = m.generate(memory, [0, 2], mode=mode, beam_size=3, max_len=10)
        assert out[0].ids == [voc.language_id(0)] + voc.encode_chars("ab") + [voc.eos_id]
        assert out[1].ids[0] == voc.language_id(2)


def test_generate_max_len_one_and_beam_one_is_greedy(model):
    memory = model.text_encode(model.speech_preenc(features(model, ["abc", "de fg"])))
    out = model.generate(memory, [0, 1], max_len=1)
    assert [s.ids for s in out] == [[model.vocab.language_id(0)], [model.vocab.language_id(1)]]
    g = model.generate(memory, [0, 1], mode="greedy", max_len=12)
    b1 = model.generate(memory, [0, 1], mode="beam", beam_size=1, max_len=12)
    assert [s.ids for s in g] == [s.ids for s in b1]
    b4 = model.generate(memory, [0, 1], mode="beam", beam_size=4, max_len=12)
    assert all(len(s.ids) <= 12 for s in b4)
    with pytest.raises(ValueError):
        model.generate(memory, [0, 1], max_len=0)


def test_freezing_contract():
    m = tiny_model()
    texts = ["ab cd", "efg"]
    feats = features(m, texts)
    m.set_trainable((ADAPTOR,))
    grads = core.backward(m.params(), slu_loss(m, feats, texts))
    assert grads and all(n.startswith(ADAPTOR) for n in grads)
    assert "adaptor.layer_logits" in grads
    m.set_trainable((DECODER,))
    assert all(n.startswith(DECODER) for n in m.trainable_names())


@pytest.mark.parametrize("seed", range(20))
def test_full_slu_forward_gradients(seed):
    torch.manual_seed(seed)
    m = tiny_model(seed=seed, speech_seed=seed).double()
    m.eval()
    m.set_trainable(("adaptor.", "decoder.", "encoder.", "embed."))
    rng = np.random.default_rng(seed)
    texts = ["".join(rng.choice(list("abcde "), size=int(rng.integers(2, 6)))) for _ in range(2)]
    feats = features(m, texts, seed)
    feats = FeatureBatch(feats.frames.double(), feats.lengths, feats.languages)
    params = {n: p for n, p in m.named_parameters() if p.requires_grad}
    assert coordinate_gradcheck(lambda: slu_loss(m, feats, texts), params, 30, seed) < 1e-4


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = tiny_model()
    m.eval()
    m.set_trainable((ADAPTOR,))
    ck = Checkpoint.from_model(m, {"kind": "test"})
    digest = ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.digest() == digest == ck.digest()
    assert back.meta == {"kind": "test"}
    assert back.trainable == ck.trainable
    m2 = back.to_model()
    m2.eval()
    feats = features(m, ["hello"])
    assert torch.equal(m.speech_preenc(feats).values, m2.speech_preenc(feats).values)
    assert changed_names(ck, back) == set()
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "bad.ckpt")
