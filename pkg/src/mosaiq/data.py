"""Synthetic multilingual SLU/ASR corpora, simulated speech features, frame grammar, analyses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .core import Rng
from .metrics import SemanticFrame
from .model import DECODER, FeatureSequence, TokenSequence
from .vocab import CHARSET, RESERVED_CHARS, Vocabulary

LETTERS = [c for c in CHARSET if c.isalpha()]
VOWELS = set("aeiouàâéèêëîïôùûüÿäöåæøìòáí")
LABEL_POOL = ("city", "date", "time", "name", "food", "place", "person", "number",
              "device", "color", "artist", "song", "event", "org", "price", "room")
INTENT_POOL = ("book", "query", "play", "set_alarm", "cancel", "find", "call", "order",
               "remove", "greet")
PROTOTYPE_SEED = 20240101


@dataclass
class Template:
    intent: str
    items: list[str]  # words, or "{label}" placeholders

    def labels(self) -> list[str]:
        return [w[1:-1] for w in self.items if w.startswith("{")]


@dataclass
class ToyLanguage:
    language: int
    alphabet: list[str]
    lexicon: list[str]
    labels: list[str]
    values: dict[str, list[str]]
    templates: list[Template]

    def __post_init__(self):
        if not self.lexicon or not self.labels:
            raise ValueError("lexicons must be non-empty")
        for lab in self.labels:
            if not self.values.get(lab):
                raise ValueError(f"empty value lexicon for {lab}")
        for t in self.templates:
            for lab in t.labels():
                if lab not in self.labels:
                    raise ValueError(f"template placeholder {lab!r} is not an ontology label")

    @property
    def intents(self) -> list[str]:
        return sorted({t.intent for t in self.templates})


@dataclass
class Utterance:
    id: str
    language: int
    text: str
    frame: SemanticFrame
    feature_seed: int

    def to_dict(self) -> dict:
        return {"id": self.id, "lang": self.language, "text": self.text,
                "frame": self.frame.to_dict(), "feature_seed": self.feature_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Utterance":
        return cls(str(d["id"]), int(d["lang"]), d["text"], SemanticFrame.from_dict(d["frame"]),
                   int(d["feature_seed"]))


# --------------------------------------------------------------------------- #
# languages and corpora

def _word(gen: np.random.Generator, alphabet: Sequence[str], lo: int = 2, hi: int = 6) -> str:
    vowels = [c for c in alphabet if c in VOWELS]
    cons = [c for c in alphabet if c not in VOWELS]
    n = int(gen.integers(lo, hi + 1))
    start_vowel = bool(gen.integers(2))
    return "".join(
        str(gen.choice(vowels if (k % 2 == 0) == start_vowel else cons)) for k in range(n)
    )


def _fresh_words(gen, alphabet, n, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = _word(gen, alphabet)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def gen_language(seed: int, language: int = 0, n_words: int = 40, n_labels: int = 6, n_values: int = 10,
                 n_intents: int = 4, n_templates: int = 3, alphabet_size: int = 20,
                 share_ontology_with: ToyLanguage | None = None) -> ToyLanguage:
    """Deterministic toy language.

    With ``share_ontology_with`` the slot labels, intents and template shapes
    are copied from the other language while every word is drawn fresh and
    kept disjoint from the other language's words.
    """
    for knob in (n_words, n_labels, n_values, n_intents, n_templates, alphabet_size):
        if knob < 1:
            raise ValueError("size knobs must be positive")
    rng = Rng(seed, ("language", str(language)))
    gen = rng.generator()
    basic = [c for c in LETTERS if c.isascii()]
    extra = [c for c in LETTERS if not c.isascii()]
    vowels = [c for c in basic if c in VOWELS]
    cons = [c for c in basic if c not in VOWELS]
    n_cons = max(1, min(len(cons), alphabet_size - len(vowels)))
    alphabet = sorted(vowels + [str(c) for c in gen.choice(cons, n_cons, replace=False)]
                      + [str(c) for c in gen.choice(extra, 2, replace=False)])
    taken: set[str] = set()
    if share_ontology_with is not None:
        other = share_ontology_with
        taken |= set(other.lexicon)
        taken |= {w for vals in other.values.values() for v in vals for w in v.split()}
    lexicon = _fresh_words(gen, alphabet, n_words, taken)
    if share_ontology_with is not None:
        labels = list(share_ontology_with.labels)
    else:
        labels = sorted(gen.choice(LABEL_POOL, min(n_labels, len(LABEL_POOL)), replace=False).tolist())
    values = {}
    for lab in labels:
        vals = []
        for _ in range(n_values):
            k = 1 + int(gen.random() < 0.3)
            vals.append(" ".join(_fresh_words(gen, alphabet, k, taken)))
        values[lab] = vals
    templates = []
    if share_ontology_with is not None:
        for t in share_ontology_with.templates:
            items = [w if w.startswith("{") else str(gen.choice(lexicon)) for w in t.items]
            templates.append(Template(t.intent, items))
    else:
        intents = sorted(gen.choice(INTENT_POOL, min(n_intents, len(INTENT_POOL)), replace=False).tolist())
        for intent in intents:
            for _ in range(n_templates):
                n_slots = int(gen.integers(1, min(3, len(labels)) + 1))
                slot_labels = gen.choice(labels, n_slots, replace=False).tolist()
                words = [str(w) for w in gen.choice(lexicon, int(gen.integers(2, 5)))]
                items = list(words)
                for lab in slot_labels:
                    items.insert(int(gen.integers(1, len(items) + 1)), "{" + lab + "}")
                templates.append(Template(intent, items))
    return ToyLanguage(language, alphabet, lexicon, labels, values, templates)


def synthesize_corpus(language: ToyLanguage, n: int, seed: int, prefix: str = "utt",
                      with_intent: bool = True) -> list[Utterance]:
    """Sample ``n`` templated utterances with their frames."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = Rng(seed, ("corpus", str(language.language), prefix))
    gen = rng.generator()
    out = []
    for k in range(n):
        t = language.templates[int(gen.integers(len(language.templates)))]
        words, slots = [], []
        for item in t.items:
            if item.startswith("{"):
                label = item[1:-1]
                vals = language.values[label]
                value = vals[int(gen.integers(len(vals)))]
                slots.append((label, value))
                words.append(value)
            else:
                words.append(item)
        uid = f"{language.language}-{prefix}-{k:05d}"
        frame = SemanticFrame(t.intent if with_intent else None, slots)
        out.append(Utterance(uid, language.language, " ".join(words), frame,
                             rng.split("feature").split(str(k)).integer()))
    return out


def synthesize_asr(language: ToyLanguage, n: int, seed: int, prefix: str = "asr") -> list[Utterance]:
    """Transcribed speech without SLU structure: random word strings from the language."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = Rng(seed, ("asr", str(language.language), prefix))
    gen = rng.generator()
    pool = list(language.lexicon) + [w for vals in language.values.values() for v in vals for w in v.split()]
    out = []
    for k in range(n):
        words = [pool[int(i)] for i in gen.integers(len(pool), size=int(gen.integers(3, 7)))]
        out.append(Utterance(f"{language.language}-{prefix}-{k:05d}", language.language, " ".join(words),
                             SemanticFrame(), rng.split("feature").split(str(k)).integer()))
    return out


# --------------------------------------------------------------------------- #
# features

def _prototypes(feature_dim: int) -> dict[str, np.ndarray]:
    gen = Rng(PROTOTYPE_SEED, ("prototypes", str(feature_dim))).generator()
    table = gen.normal(0.0, 1.0, (len(CHARSET), feature_dim))
    return {c: table[i] for i, c in enumerate(CHARSET)}


_PROTO_CACHE: dict[int, dict[str, np.ndarray]] = {}


def prototypes(feature_dim: int) -> dict[str, np.ndarray]:
    if feature_dim not in _PROTO_CACHE:
        _PROTO_CACHE[feature_dim] = _prototypes(feature_dim)
    return _PROTO_CACHE[feature_dim]


def simulate_features(text: str, language: int, feature_seed: int, feature_dim: int = 32,
                      noise: float = 0.1, speaker_std: float = 0.3) -> FeatureSequence:
    """Per-character prototype frames repeated 2-4 times, plus speaker offset and frame noise."""
    gen = Rng(feature_seed, ("features",)).generator()
    protos = prototypes(feature_dim)
    durations = gen.integers(2, 5, size=len(text))
    offset = gen.normal(0.0, 1.0, feature_dim) * speaker_std
    total = int(durations.sum())
    frames = np.zeros((total, feature_dim))
    pos = 0
    for ch, dur in zip(text, durations):
        frames[pos: pos + dur] = protos.get(ch, protos[" "])
        pos += dur
    frames += offset
    frames += gen.normal(0.0, 1.0, frames.shape) * noise
    return FeatureSequence(frames.astype(np.float32), total, language)


def utterance_features(utt: Utterance, feature_dim: int = 32, **kw) -> FeatureSequence:
    return simulate_features(utt.text, utt.language, utt.feature_seed, feature_dim, **kw)


# --------------------------------------------------------------------------- #
# frame grammar:  <lang> [ intent ] ( label = value ; )* </s>

def _check_field(kind: str, text: str, vocab: Vocabulary):
    if not text:
        raise ValueError(f"empty {kind}")
    if RESERVED_CHARS & set(text):
        raise ValueError(f"{kind} {text!r} contains a reserved token")
    if not vocab.encodable(text):
        raise ValueError(f"{kind} {text!r} has characters outside the vocabulary")


def serialize_frame(frame: SemanticFrame, language: int, vocab: Vocabulary) -> TokenSequence:
    ids = [vocab.language_id(language)]
    if frame.intent is not None:
        _check_field("intent", frame.intent, vocab)
        ids += [vocab.open_id] + vocab.encode_chars(frame.intent) + [vocab.close_id]
    for label, value in frame.slots:
        _check_field("label", label, vocab)
        _check_field("value", value, vocab)
        ids += vocab.encode_chars(label) + [vocab.equals_id] + vocab.encode_chars(value) + [vocab.semi_id]
    ids.append(vocab.eos_id)
    return TokenSequence(ids, language)


def parse_frame(tokens, vocab: Vocabulary) -> SemanticFrame:
    """Best-effort inverse of :func:`serialize_frame`; malformed pieces are dropped."""
    ids = list(tokens.ids if isinstance(tokens, TokenSequence) else tokens)
    if ids and vocab.is_language(ids[0]):
        ids = ids[1:]
    if vocab.eos_id in ids:
        ids = ids[: ids.index(vocab.eos_id)]

    def chars(seg):
        if seg and all(t >= vocab.first_char_id for t in seg):
            return vocab.decode_chars(seg)
        return None

    intent = None
    pos = 0
    if ids[:1] == [vocab.open_id]:
        if vocab.close_id in ids:
            end = ids.index(vocab.close_id)
            intent = chars(ids[1:end])
            pos = end + 1
        else:
            pos = len(ids)
    slots = []
    seg: list[int] = []
    for t in ids[pos:]:
        if t != vocab.semi_id:
            seg.append(t)
            continue
        if seg.count(vocab.equals_id) == 1:
            k = seg.index(vocab.equals_id)
            label, value = chars(seg[:k]), chars(seg[k + 1:])
            if label and value:
                slots.append((label, value))
        seg = []
    return SemanticFrame(intent, slots)


# --------------------------------------------------------------------------- #
# analyses

def token_coverage(split: Iterable[str], pretraining: Iterable[str],
                   tokenize: Callable[[str], Iterable] | None = None) -> float:
    """Percent of the split's unique tokens that also occur in the pretraining texts."""
    tokenize = tokenize or Vocabulary(1).encode_chars
    seen_split = {t for text in split for t in tokenize(text)}
    if not seen_split:
        raise ValueError("empty split")
    seen_pre = {t for text in pretraining for t in tokenize(text)}
    return 100.0 * len(seen_split & seen_pre) / len(seen_split)


def default_bin_edges() -> list[float]:
    # zero bin [0, 1e-6), then decades up to 1e4 percent, then overflow
    return [0.0] + [10.0 ** k for k in range(-6, 5)] + [math.inf]


def decoder_param_diff(original: Checkpoint, finetuned: Checkpoint, edges: Sequence[float] | None = None,
                       prefix: str = DECODER) -> dict:
    """Histogram of per-scalar relative change, 100*|new-old|/max(|old|, 1e-12), over decoder parameters."""
    edges = list(edges or default_bin_edges())
    names_a = sorted(n for n in original.params if n.startswith(prefix))
    names_b = sorted(n for n in finetuned.params if n.startswith(prefix))
    if names_a != names_b:
        raise ValueError("decoder parameter names differ")
    if not names_a:
        raise ValueError(f"no parameters under {prefix!r}")
    per_param = {}
    all_diffs = []
    for name in names_a:
        a = original.params[name].astype(np.float64)
        b = finetuned.params[name].astype(np.float64)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {name}")
        d = 100.0 * np.abs(b - a) / np.maximum(np.abs(a), 1e-12)
        all_diffs.append(d.ravel())
        per_param[name] = {"median": float(np.median(d)), "max": float(d.max())}
    diffs = np.concatenate(all_diffs)
    idx = np.searchsorted(np.asarray(edges), diffs, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return {
        "edges": [e if math.isfinite(e) else "inf" for e in edges],
        "counts": counts.tolist(),
        "total": int(diffs.size),
        "per_param": per_param,
    }


# --------------------------------------------------------------------------- #
# manifests and the default benchmark

def write_manifest(utts: Sequence[Utterance], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in sorted(utts, key=lambda u: u.id):
            f.write(json.dumps(u.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_manifest(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(Utterance.from_dict(json.loads(line)))
                except (KeyError, ValueError, TypeError) as e:
                    raise ValueError(f"{path}:{line_no}: bad manifest row ({e})") from None
    return out


@dataclass
class Benchmark:
    languages: list[ToyLanguage]
    slu: dict[int, dict[str, list[Utterance]]]  # language -> split -> utterances
    asr: dict[str, list[Utterance]]  # split -> utterances across languages

    def texts(self) -> list[str]:
        return [u.text for u in self.asr["train"]]


@dataclass
class BenchmarkSize:
    n_languages: int = 3
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 200
    n_asr: int = 5000
    n_asr_valid: int = 200
    shared_pair: tuple[int, int] | None = (0, 1)
    language_knobs: dict = field(default_factory=dict)


def make_benchmark(seed: int, size: BenchmarkSize | None = None) -> Benchmark:
    """Default suite: several toy languages with SLU splits and a pooled ASR set.

    With ``shared_pair=(a, b)`` language ``b`` reuses the ontology of ``a``.
    """
    size = size or BenchmarkSize()
    langs: list[ToyLanguage] = []
    for k in range(size.n_languages):
        share = None
        if size.shared_pair and k == size.shared_pair[1]:
            share = langs[size.shared_pair[0]]
        langs.append(gen_language(seed, k, share_ontology_with=share, **size.language_knobs))
    slu = {}
    for lang in langs:
        slu[lang.language] = {
            split: synthesize_corpus(lang, n, seed, prefix=split)
            for split, n in (("train", size.n_train), ("dev", size.n_dev), ("test", size.n_test))
        }
    asr = {"train": [], "valid": []}
    per = [size.n_asr // size.n_languages + (k < size.n_asr % size.n_languages) for k in range(size.n_languages)]
    per_valid = max(1, size.n_asr_valid // size.n_languages)
    for lang, n in zip(langs, per):
        asr["train"] += synthesize_asr(lang, n, seed, prefix="asr")
        asr["valid"] += synthesize_asr(lang, per_valid, seed, prefix="asrvalid")
    return Benchmark(langs, slu, asr)


def save_benchmark(bench: Benchmark, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for lang, splits in bench.slu.items():
        for split, utts in splits.items():
            p = out / f"slu_lang{lang}_{split}.jsonl"
            write_manifest(utts, p)
            paths[f"slu/{lang}/{split}"] = str(p)
    for split, utts in bench.asr.items():
        p = out / f"asr_{split}.jsonl"
        write_manifest(utts, p)
        paths[f"asr/{split}"] = str(p)
    return paths
