"""Speech -> Adaptor -> text encoder-decoder network with per-stage freezing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import core
from .vocab import Vocabulary

# parameter-name prefixes of the trainable groups
SPEECH, ADAPTOR, EMBED, ENCODER, DECODER = "speech_encoder.", "adaptor.", "embed.", "encoder.", "decoder."
GROUPS = {"speech": SPEECH, "adaptor": ADAPTOR, "embed": EMBED, "encoder": ENCODER, "decoder": DECODER}

# reference constants of the full-size conformer Adaptor; recorded, not used
REFERENCE = {"d_model": 1024, "d_ff": 4096, "n_heads": 8, "ff_expansion": 8, "conv_kernel": 31}


class Stage(str, Enum):
    PRE_ENC = "PreEnc"
    POST_ENC = "PostEnc"
    POST_DEC = "PostDec"


class Branch(str, Enum):
    SPEECH = "Speech"
    TEXT = "Text"


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_adaptor_blocks: int = 2
    n_text_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    n_languages: int = 3
    vocab_size: int = 0
    n_speech_layers: int = 4
    feature_dim: int = 32
    speech_heads: int = 4
    n_subsample_layers: int = 0
    length_adaptor_stride: int = 2
    length_adaptor_kernel: int = 3
    conv_kernel: int = REFERENCE["conv_kernel"]
    dropout: float = 0.1
    max_positions: int = 1024
    seed: int = 0
    speech_seed: int = 0

    def __post_init__(self):
        if self.vocab_size == 0:
            self.vocab_size = len(Vocabulary(self.n_languages))
        counts = ("d_model", "d_ff", "n_heads", "n_adaptor_blocks", "n_text_encoder_blocks",
                  "n_decoder_blocks", "n_languages", "n_speech_layers", "feature_dim", "speech_heads")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.feature_dim % self.speech_heads:
            raise ValueError("feature_dim must be divisible by speech_heads")
        if self.vocab_size != len(Vocabulary(self.n_languages)):
            raise ValueError("vocab_size disagrees with the vocabulary of n_languages")
        if self.n_subsample_layers < 0:
            raise ValueError("n_subsample_layers must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- #
# sequence containers

@dataclass
class FeatureSequence:
    frames: np.ndarray  # [T_feat, feature_dim]
    length: int
    language: int

    def __post_init__(self):
        if self.length > self.frames.shape[0]:
            raise ValueError("length exceeds frame count")


@dataclass
class TokenSequence:
    ids: list[int]
    language: int

    @property
    def length(self) -> int:
        return len(self.ids)


@dataclass
class FeatureBatch:
    frames: torch.Tensor  # [B, T, F]
    lengths: torch.Tensor  # [B]
    languages: torch.Tensor  # [B]

    @classmethod
    def collate(cls, seqs: Sequence[FeatureSequence], dtype=core.DTYPE) -> "FeatureBatch":
        if not seqs:
            raise ValueError("empty feature batch")
        dim = seqs[0].frames.shape[1]
        t = max(s.length for s in seqs)
        frames = np.zeros((len(seqs), t, dim), dtype=np.float32)
        for i, s in enumerate(seqs):
            frames[i, : s.length] = s.frames[: s.length]
        return cls(torch.from_numpy(frames).to(dtype),
                   torch.tensor([s.length for s in seqs]),
                   torch.tensor([s.language for s in seqs]))

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class TokenBatch:
    ids: torch.Tensor  # [B, L], padded with pad id
    lengths: torch.Tensor
    languages: torch.Tensor

    @classmethod
    def collate(cls, seqs: Sequence[TokenSequence], pad_id: int) -> "TokenBatch":
        if not seqs:
            raise ValueError("empty token batch")
        n = max(s.length for s in seqs)
        ids = torch.full((len(seqs), n), pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : s.length] = torch.tensor(s.ids, dtype=torch.long)
        return cls(ids, torch.tensor([s.length for s in seqs]), torch.tensor([s.language for s in seqs]))

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class HiddenSequence:
    values: torch.Tensor  # [B, L, d]
    lengths: torch.Tensor
    stage: Stage
    branch: Branch

    def row(self, i: int) -> torch.Tensor:
        return self.values[i, : int(self.lengths[i])]


def valid_mask(lengths: torch.Tensor, n: int) -> torch.Tensor:
    return torch.arange(n)[None, :] < lengths[:, None]


def zero_padding(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    return x * valid_mask(lengths, x.shape[1]).unsqueeze(-1).to(x.dtype)


def halve(lengths: torch.Tensor) -> torch.Tensor:
    return torch.div(lengths + 1, 2, rounding_mode="floor")


def sinusoid(n: int, d: int, dtype=core.DTYPE) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


def weighted_sum_features(layers: Sequence[torch.Tensor], logits: torch.Tensor) -> torch.Tensor:
    """Softmax(logits)-weighted sum of equally shaped layer outputs."""
    if not layers:
        raise ValueError("weighted_sum_features needs at least one layer")
    shape = layers[0].shape
    for x in layers[1:]:
        if x.shape != shape:
            raise core.ShapeError(f"weighted_sum_features: layer shapes differ ({tuple(shape)} vs {tuple(x.shape)})")
    if logits.shape != (len(layers),):
        raise core.ShapeError(f"weighted_sum_features: {len(layers)} layers but logits {tuple(logits.shape)}")
    w = core.softmax(logits)
    out = layers[0] * w[0]
    for k in range(1, len(layers)):
        out = out + layers[k] * w[k]
    return out


# --------------------------------------------------------------------------- #
# building blocks

class Norm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return core.layer_norm(x, self.weight, self.bias)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, memory, key_valid, causal=False):
        b, lq, d = x.shape
        lk = memory.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(b, lq, h, dh).transpose(1, 2)
        k = self.k(memory).view(b, lk, h, dh).transpose(1, 2)
        v = self.v(memory).view(b, lk, h, dh).transpose(1, 2)
        scores = core.matmul(q, core.transpose(k)) / math.sqrt(dh)
        blocked = ~key_valid[:, None, None, :]
        if causal:
            blocked = blocked | torch.ones(lq, lk, dtype=torch.bool).triu(1)
        weights = core.softmax(core.masked_fill(scores, blocked, core.NEG_LARGE))
        out = core.matmul(weights, v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.up = nn.Linear(d, d_ff)
        self.down = nn.Linear(d_ff, d)

    def forward(self, x):
        return self.down(core.gelu(self.up(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d, heads, d_ff, dropout):
        super().__init__()
        self.norm1 = Norm(d)
        self.attn = Attention(d, heads)
        self.norm2 = Norm(d)
        self.ff = FeedForward(d, d_ff)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, valid):
        y = self.norm1(x)
        x = x + self.drop(self.attn(y, y, valid))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x * valid.unsqueeze(-1).to(x.dtype)


class DecoderBlock(nn.Module):
    def __init__(self, d, heads, d_ff, dropout):
        super().__init__()
        self.norm1 = Norm(d)
        self.self_attn = Attention(d, heads)
        self.norm2 = Norm(d)
        self.cross_attn = Attention(d, heads)
        self.norm3 = Norm(d)
        self.ff = FeedForward(d, d_ff)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, valid, memory, memory_valid):
        y = self.norm1(x)
        x = x + self.drop(self.self_attn(y, y, valid, causal=True))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, memory_valid))
        x = x + self.drop(self.ff(self.norm3(x)))
        return x * valid.unsqueeze(-1).to(x.dtype)


class Conv(nn.Module):
    """Time-major stride-``stride`` convolution that tracks true lengths."""

    def __init__(self, c_in, c_out, kernel=3, stride=2):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x, lengths):
        y = core.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        new = lengths
        for _ in range(int(math.log2(self.stride))):
            new = halve(new)
        return zero_padding(y, new), new


class SpeechEncoder(nn.Module):
    """Frozen stand-in for a pretrained speech encoder; exposes every layer output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.feature_dim
        self.blocks = nn.ModuleList(EncoderBlock(f, cfg.speech_heads, 2 * f, 0.0) for _ in range(cfg.n_speech_layers))


class Adaptor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.layer_logits = nn.Parameter(torch.zeros(cfg.n_speech_layers))
        self.input_proj = nn.Linear(cfg.feature_dim, d)
        self.subsample = nn.ModuleList(Conv(d, d) for _ in range(cfg.n_subsample_layers))
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.n_heads, cfg.d_ff, cfg.dropout)
                                    for _ in range(cfg.n_adaptor_blocks))
        self.norm = Norm(d)
        self.length_adaptor = Conv(d, d, cfg.length_adaptor_kernel, cfg.length_adaptor_stride)
        self.ctc_blank = nn.Parameter(torch.empty(d))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout)
                                    for _ in range(cfg.n_text_encoder_blocks))
        self.norm = Norm(cfg.d_model)


class TextDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout)
                                    for _ in range(cfg.n_decoder_blocks))
        self.norm = Norm(cfg.d_model)
        self.logits_bias = nn.Parameter(torch.zeros(cfg.vocab_size))


class Embedding(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))


def _init_tensor(name: str, p: torch.Tensor, rng: core.Rng) -> np.ndarray:
    gen = rng.split(name).generator()
    shape = tuple(p.shape)
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "bias" or leaf in ("logits_bias", "layer_logits"):
        return np.zeros(shape)
    if ".norm" in name or name.split(".")[-2].startswith("norm"):
        return np.ones(shape)
    if name == "embed.weight":
        return gen.normal(0.0, shape[1] ** -0.5, shape)
    if leaf == "ctc_blank":
        return gen.normal(0.0, shape[0] ** -0.5, shape)
    fan_in = int(np.prod(shape[1:]))
    return gen.normal(0.0, fan_in ** -0.5, shape)


class SLUModel(nn.Module):
    """The full network; every stage of the recipe is a choice of trainable groups."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.vocab = Vocabulary(config.n_languages)
        self.speech_encoder = SpeechEncoder(config)
        self.adaptor = Adaptor(config)
        self.embed = Embedding(config)
        self.encoder = TextEncoder(config)
        self.decoder = TextDecoder(config)
        self.reset_parameters()
        self.set_trainable(())

    # -- parameters -------------------------------------------------------- #

    @torch.no_grad()
    def reset_parameters(self, prefix: str = "", seed: int | None = None):
        """Deterministic init: each tensor is a pure function of (seed, name)."""
        for name, p in self.named_parameters():
            if not name.startswith(prefix):
                continue
            if seed is not None:
                s = seed
            else:
                s = self.config.speech_seed if name.startswith(SPEECH) else self.config.seed
            value = _init_tensor(name, p, core.Rng(s, ("init",)))
            p.copy_(torch.from_numpy(np.asarray(value, dtype=np.float32)))

    def set_trainable(self, prefixes: Sequence[str], exclude: Sequence[str] = ()):
        prefixes, exclude = tuple(prefixes), tuple(exclude) + (SPEECH,)
        for name, p in self.named_parameters():
            p.requires_grad_(bool(prefixes) and name.startswith(prefixes) and not name.startswith(exclude))

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    # -- speech side ------------------------------------------------------- #

    def speech_encode(self, feats: FeatureBatch) -> list[torch.Tensor]:
        """Layer outputs of the frozen speech encoder, each [B, T, feature_dim]."""
        valid = valid_mask(feats.lengths, feats.frames.shape[1])
        x = zero_padding(feats.frames, feats.lengths)
        x = x + sinusoid(x.shape[1], x.shape[2], x.dtype)
        outs = []
        with torch.no_grad():
            for block in self.speech_encoder.blocks:
                x = block(x, valid)
                outs.append(x)
        return outs

    def weighted_sum(self, layers: Sequence[torch.Tensor]) -> torch.Tensor:
        return weighted_sum_features(layers, self.adaptor.layer_logits)

    def length_adaptor(self, h: HiddenSequence) -> HiddenSequence:
        if h.stage is not Stage.PRE_ENC or h.branch is not Branch.SPEECH:
            raise ValueError("length_adaptor expects a PreEnc speech sequence")
        y, lengths = self.adaptor.length_adaptor(h.values, h.lengths)
        return HiddenSequence(y, lengths, Stage.PRE_ENC, Branch.SPEECH)

    def output_length(self, n: int) -> int:
        for _ in range(self.config.n_subsample_layers + 1):
            n = (n + 1) // 2
        return n

    def adaptor_forward(self, feats: FeatureBatch) -> HiddenSequence:
        """Features -> quasi-graphemic PreEnc rows (no language row)."""
        a = self.adaptor
        out_lengths = feats.lengths
        for _ in range(self.config.n_subsample_layers + 1):
            out_lengths = halve(out_lengths)
        if feats.frames.shape[0] and int(out_lengths.min()) < 1:
            raise ValueError("adaptor: input too short; need at least 1 frame after subsampling")
        x = zero_padding(self.weighted_sum(self.speech_encode(feats)), feats.lengths)
        lengths = feats.lengths
        x = zero_padding(a.input_proj(x), lengths)
        for conv in a.subsample:
            x, lengths = conv(core.relu(x), lengths)
        x = x + sinusoid(x.shape[1], x.shape[2], x.dtype)
        valid = valid_mask(lengths, x.shape[1])
        x = x * valid.unsqueeze(-1).to(x.dtype)
        for block in a.blocks:
            x = block(x, valid)
        x = zero_padding(a.norm(x), lengths)
        h = HiddenSequence(x, lengths, Stage.PRE_ENC, Branch.SPEECH)
        return self.length_adaptor(h)

    def language_rows(self, languages: torch.Tensor, dtype=None) -> torch.Tensor:
        ids = torch.tensor([self.vocab.language_id(int(k)) for k in languages], dtype=torch.long)
        e = core.embedding(self.embed.weight, ids) * math.sqrt(self.config.d_model)
        return e + sinusoid(1, self.config.d_model, e.dtype)[0]

    def speech_preenc(self, feats: FeatureBatch) -> HiddenSequence:
        """Text-encoder input for speech: language row followed by the Adaptor rows."""
        h = self.adaptor_forward(feats)
        lang = self.language_rows(feats.languages).unsqueeze(1)
        values = core.concat([lang.to(h.values.dtype), h.values], axis=1)
        return HiddenSequence(values, h.lengths + 1, Stage.PRE_ENC, Branch.SPEECH)

    def ctc_logits(self, h: HiddenSequence) -> torch.Tensor:
        """Token projection for CTC: frozen embedding rows plus a learnable blank row."""
        e = self.embed.weight
        b = self.vocab.blank_id
        table = core.concat([e[:b], self.adaptor.ctc_blank.unsqueeze(0), e[b + 1:]], axis=0)
        return core.matmul(h.values, core.transpose(table, 0, 1))

    # -- text side --------------------------------------------------------- #

    def text_embed(self, tokens: TokenBatch) -> HiddenSequence:
        if tokens.ids.numel() and int(tokens.ids.max()) >= self.config.vocab_size:
            raise ValueError(f"token id {int(tokens.ids.max())} >= vocab_size {self.config.vocab_size}")
        e = core.embedding(self.embed.weight, tokens.ids) * math.sqrt(self.config.d_model)
        e = e + sinusoid(e.shape[1], e.shape[2], e.dtype)
        return HiddenSequence(zero_padding(e, tokens.lengths), tokens.lengths, Stage.PRE_ENC, Branch.TEXT)

    def text_encode(self, h: HiddenSequence) -> HiddenSequence:
        if h.stage is not Stage.PRE_ENC:
            raise ValueError("text_encode expects a PreEnc sequence")
        valid = valid_mask(h.lengths, h.values.shape[1])
        x = h.values
        for block in self.encoder.blocks:
            x = block(x, valid)
        x = zero_padding(self.encoder.norm(x), h.lengths)
        return HiddenSequence(x, h.lengths, Stage.POST_ENC, h.branch)

    def text_decode(self, memory: HiddenSequence, target: TokenBatch) -> tuple[HiddenSequence, torch.Tensor]:
        """Teacher-forced decoding; ``target`` is the decoder input (starts with the language token)."""
        if target.ids.shape[1] == 0 or int(target.lengths.min()) < 1:
            raise ValueError("text_decode: empty target")
        x = self.text_embed(target).values
        valid = valid_mask(target.lengths, x.shape[1])
        mem_valid = valid_mask(memory.lengths, memory.values.shape[1])
        for block in self.decoder.blocks:
            x = block(x, valid, memory.values, mem_valid)
        x = zero_padding(self.decoder.norm(x), target.lengths)
        logits = core.matmul(x, core.transpose(self.embed.weight, 0, 1)) + self.decoder.logits_bias
        branch = memory.branch
        return HiddenSequence(x, target.lengths, Stage.POST_DEC, branch), logits

    # -- inference --------------------------------------------------------- #

    def _step_logits(self, memory: HiddenSequence, prefix: torch.Tensor) -> torch.Tensor:
        n = prefix.shape[0]
        tokens = TokenBatch(prefix, torch.full((n,), prefix.shape[1]), torch.zeros(n, dtype=torch.long))
        _, logits = self.text_decode(memory, tokens)
        return logits[:, -1]

    @torch.no_grad()
    def generate(self, memory: HiddenSequence, languages, mode: str = "beam", beam_size: int = 4,
                 max_len: int = 96) -> list[TokenSequence]:
        """Autoregressive decoding from the language token; stops at ``</s>`` or ``max_len`` tokens."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        languages = [int(k) for k in languages]
        if mode == "greedy":
            beam_size = 1
        elif mode != "beam":
            raise ValueError(f"unknown decoding mode {mode!r}")
        return self._beam(memory, languages, beam_size, max_len)

    def _beam(self, memory, languages, k, max_len):
        b = len(languages)
        eos, pad = self.vocab.eos_id, self.vocab.pad_id
        voc = self.vocab
        never = [pad, voc.blank_id, voc.mask_id] + list(range(voc.first_language_id, voc.first_char_id))
        start = torch.tensor([self.vocab.language_id(lang) for lang in languages])
        seqs = start.repeat_interleave(k).unsqueeze(1)  # [B*K, 1]
        mem = HiddenSequence(memory.values.repeat_interleave(k, 0), memory.lengths.repeat_interleave(k),
                             memory.stage, memory.branch)
        scores = torch.full((b, k), -math.inf, dtype=torch.float64)
        scores[:, 0] = 0.0
        gen_len = torch.zeros(b, k, dtype=torch.float64)
        done = torch.zeros(b, k, dtype=torch.bool)
        for _ in range(max_len - 1):
            if bool(done.all()):
                break
            logp = torch.log_softmax(self._step_logits(mem, seqs).double(), -1).view(b, k, -1)
            v = logp.shape[-1]
            logp[..., never] = -math.inf
            frozen = torch.full((v,), -math.inf, dtype=torch.float64)
            frozen[pad] = 0.0
            logp = torch.where(done.unsqueeze(-1), frozen, logp)
            total = scores.unsqueeze(-1) + logp
            new_len = gen_len.unsqueeze(-1) + (~done).unsqueeze(-1).double()
            ranked = (total / new_len.clamp(min=1.0)).view(b, -1)
            top = torch.topk(ranked, k, dim=-1).indices  # [B, K]
            src = torch.div(top, v, rounding_mode="floor")
            tok = top % v
            scores = total.view(b, -1).gather(1, top)
            gen_len = new_len.expand(-1, -1, v).reshape(b, -1).gather(1, top)
            prev_done = done.gather(1, src)
            done = prev_done | (tok == eos)
            rows = (src + torch.arange(b).unsqueeze(1) * k).view(-1)
            seqs = torch.cat([seqs[rows], tok.view(-1, 1)], dim=1)
        final = scores / gen_len.clamp(min=1.0)
        best = final.argmax(dim=1)
        out = []
        for i in range(b):
            ids = seqs[i * k + int(best[i])].tolist()
            ids = [t for t in ids if t != pad]
            out.append(TokenSequence(ids, languages[i]))
        return out
