"""scikit-learn style wrappers around the staged recipe.

``X`` is always a list of :class:`~mosaiq.data.Utterance`; frames live on the
utterances, so ``y`` is accepted for API compatibility and ignored.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Utterance, utterance_features
from .losses import ObjectiveSpec
from .metrics import SemanticFrame, concept_error_rate
from .model import ModelConfig
from .pipelines import (TrainConfig, decode, finetune_nlu, pretrain_adaptor, pretrain_text_model, speed_perturb,
                        train_slu)


def _check_utterances(X, name="X") -> list[Utterance]:
    X = list(X)
    if not X:
        raise ValueError(f"{name} is empty")
    bad = [type(u).__name__ for u in X if not isinstance(u, Utterance)]
    if bad:
        raise TypeError(f"{name} must hold Utterance objects, got {bad[0]}")
    return X


class FeatureExtractor(BaseEstimator, TransformerMixin):
    """Stateless: utterances -> simulated speech-encoder input frames."""

    def __init__(self, feature_dim=32, speed_factor=1.0):
        self.feature_dim = feature_dim
        self.speed_factor = speed_factor

    def fit(self, X, y=None):
        _check_utterances(X)
        return self

    def transform(self, X):
        return [speed_perturb(utterance_features(u, self.feature_dim), self.speed_factor)
                for u in _check_utterances(X)]


class SLUEstimator(BaseEstimator):
    """Runs text pretraining, NLU fine-tuning, optional Adaptor pretraining and SLU training in ``fit``.

    ``adaptor_objective=None`` trains the SLU model from a fresh Adaptor.
    """

    def __init__(self, model_config=None, adaptor_objective="postdec-aed", text_epochs=6, nlu_epochs=20,
                 adaptor_epochs=2, slu_epochs=15, peak_lr=2e-3, warmup_steps=100, batch_size=32, patience=3,
                 seed=0, decode_mode="greedy", beam_size=4):
        self.model_config = model_config
        self.adaptor_objective = adaptor_objective
        self.text_epochs = text_epochs
        self.nlu_epochs = nlu_epochs
        self.adaptor_epochs = adaptor_epochs
        self.slu_epochs = slu_epochs
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.patience = patience
        self.seed = seed
        self.decode_mode = decode_mode
        self.beam_size = beam_size

    def _train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(peak_lr=self.peak_lr, warmup_steps=self.warmup_steps, max_epochs=epochs,
                           batch_size=self.batch_size, patience=self.patience, seed=self.seed,
                           decode_mode=self.decode_mode, beam_size=self.beam_size)

    def fit(self, X, y=None, dev=None, asr=None, asr_valid=None):
        """``asr`` (transcribed utterances) feeds text pretraining and Adaptor pretraining; defaults to ``X``."""
        X = _check_utterances(X)
        dev = _check_utterances(dev, "dev") if dev is not None else X
        asr = _check_utterances(asr, "asr") if asr is not None else X
        asr_valid = _check_utterances(asr_valid, "asr_valid") if asr_valid is not None else dev
        cfg = self.model_config if isinstance(self.model_config, ModelConfig) else ModelConfig(
            **(self.model_config or {}))
        corpus = [(u.text, u.language) for u in list(asr) + X]
        self.base_, rep_text = pretrain_text_model(corpus, cfg, self._train_config(self.text_epochs))
        self.nlu_, rep_nlu = finetune_nlu(self.base_, X, dev, self._train_config(self.nlu_epochs))
        self.reports_ = [rep_text, rep_nlu]
        self.adaptor_ = None
        if self.adaptor_objective:
            spec = ObjectiveSpec.parse(self.adaptor_objective)
            self.adaptor_, rep = pretrain_adaptor(self.base_, asr, asr_valid, spec,
                                                  self._train_config(self.adaptor_epochs))
            self.reports_.append(rep)
        self.slu_, rep = train_slu(self.base_, self.nlu_, self.adaptor_, X, dev, self._train_config(self.slu_epochs))
        self.reports_.append(rep)
        return self

    def predict(self, X) -> list[SemanticFrame]:
        check_is_fitted(self, "slu_")
        return decode(self.slu_.to_model(), _check_utterances(X), self._train_config(0))

    def score(self, X, y=None) -> float:
        """1 - CVER, so that larger is better."""
        X = _check_utterances(X)
        return 1.0 - concept_error_rate([u.frame for u in X], self.predict(X), with_values=True)

