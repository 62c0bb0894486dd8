import numpy as np
import torch

from mosaiq import core
from mosaiq.data import simulate_features
from mosaiq.losses import aed_loss
from mosaiq.model import FeatureBatch, ModelConfig, SLUModel, TokenBatch, TokenSequence

TINY = dict(d_model=8, d_ff=16, n_heads=2, n_adaptor_blocks=1, n_text_encoder_blocks=1, n_decoder_blocks=1,
            n_speech_layers=2, feature_dim=4, speech_heads=2, dropout=0.0)


def tiny_model(**kw) -> SLUModel:
    cfg = dict(TINY)
    cfg.update(kw)
    return SLUModel(ModelConfig(**cfg))


def features(model: SLUModel, texts, seed=0) -> FeatureBatch:
    seqs = [simulate_features(t, k % model.config.n_languages, seed + k, model.config.feature_dim)
            for k, t in enumerate(texts)]
    return FeatureBatch.collate(seqs)


def slu_loss(model: SLUModel, feats: FeatureBatch, texts) -> torch.Tensor:
    """Speech -> Adaptor -> text encoder -> teacher-forced decoder -> label-smoothed CE."""
    voc = model.vocab
    seqs = [[voc.language_id(int(k))] + voc.encode_chars(t) + [voc.eos_id] for k, t in zip(feats.languages, texts)]
    dec = TokenBatch.collate([TokenSequence(s[:-1], 0) for s in seqs], voc.pad_id)
    labels = TokenBatch.collate([TokenSequence(s[1:], 0) for s in seqs], voc.pad_id).ids
    memory = model.text_encode(model.speech_preenc(feats))
    _, logits = model.text_decode(memory, dec)
    return aed_loss(logits, labels, dec.lengths, 0.1)


def coordinate_gradcheck(fn, params: dict, n_coords: int, seed: int, h: float = 1e-3) -> float:
    """Relative error between autograd and central differences on randomly chosen scalar coordinates."""
    names = sorted(params)
    grads = torch.autograd.grad(fn(), [params[n] for n in names], allow_unused=True)
    grads = {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}
    gen = np.random.default_rng(seed)
    sizes = np.array([params[n].numel() for n in names], dtype=float)
    picks = gen.choice(len(names), n_coords, p=sizes / sizes.sum())
    ana, num = [], []
    with torch.no_grad():
        for k in picks:
            p = params[names[k]]
            flat = p.view(-1)
            i = int(gen.integers(flat.numel()))
            old = flat[i].item()
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            num.append((up - down) / (2 * h))
            ana.append(grads[names[k]].view(-1)[i].item())
    return core.relative_error(torch.tensor(ana), torch.tensor(num))
