"""Shared character vocabulary with language and frame-grammar specials."""

from __future__ import annotations

PAD, EOS, BLANK, MASK, UNK = "<pad>", "</s>", "<blank>", "<mask>", "<unk>"
OPEN, CLOSE, EQUALS, SEMI = "[", "]", "=", ";"
SPECIALS = (PAD, EOS, BLANK, MASK, UNK, OPEN, CLOSE, EQUALS, SEMI)
RESERVED_CHARS = frozenset(OPEN + CLOSE + EQUALS + SEMI)

# 62 characters: latin letters, digits, space, underscore and common diacritics
CHARSET = (
    "abcdefghijklmnopqrstuvwxyz"
    "0123456789"
    " _"
    "àâçéèêëîïôùûüÿñäößåæøìòáí"
)
assert len(set(CHARSET)) == len(CHARSET)


class Vocabulary:
    """Token ids: specials, then one token per language, then characters."""

    def __init__(self, n_languages: int):
        if n_languages < 1:
            raise ValueError("n_languages must be >= 1")
        self.n_languages = n_languages
        self.itos = list(SPECIALS) + [f"<lang{k}>" for k in range(n_languages)] + list(CHARSET)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.eos_id = self.stoi[EOS]
        self.blank_id = self.stoi[BLANK]
        self.mask_id = self.stoi[MASK]
        self.unk_id = self.stoi[UNK]
        self.open_id = self.stoi[OPEN]
        self.close_id = self.stoi[CLOSE]
        self.equals_id = self.stoi[EQUALS]
        self.semi_id = self.stoi[SEMI]
        self.first_language_id = len(SPECIALS)
        self.first_char_id = self.first_language_id + n_languages

    def __len__(self):
        return len(self.itos)

    def language_id(self, language: int) -> int:
        if not 0 <= language < self.n_languages:
            raise ValueError(f"unknown language {language}")
        return self.first_language_id + language

    def is_language(self, token: int) -> bool:
        return self.first_language_id <= token < self.first_char_id

    def encode_chars(self, text: str) -> list[int]:
        """Character ids; reserved grammar characters map to their grammar token."""
        return [self.stoi.get(c, self.unk_id) for c in text]

    def decode_chars(self, ids) -> str:
        return "".join(self.itos[i] for i in ids if i >= self.first_char_id)

    def encodable(self, text: str) -> bool:
        return all(c in self.stoi and self.stoi[c] >= self.first_char_id for c in text)
