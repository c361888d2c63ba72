"""scikit-learn style front end: ``fit(texts, token_seqs)`` then ``predict(texts)``."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from llmvox import model as M
from llmvox.codec import AudioBuffer, Codec, CodecConfig
from llmvox.validation import check_pairs, check_positive_int, check_texts

log = logging.getLogger(__name__)


class SpeechSynthesizer(BaseEstimator):
    """Text -> speech-token synthesizer trained from (text, token sequence) pairs.

    Hyperparameter names follow the usual GPT training knobs (``n_layer``,
    ``n_embd`` via ``text_dim + feature_dim``, ``n_head``, ``block_size``,
    ``lr``, ``weight_decay``, ``grad_clip``).  Fitted state lives in
    ``codec_``, ``model_`` and ``loss_curve_``.

    Parameters
    ----------
    max_steps : int
        Optimizer steps to run.
    batch_size : int
        Pairs per step; ``None`` uses the whole corpus each step.
    target_loss : float or None
        Stop early once a step's loss falls below this value.
    """

    def __init__(
        self,
        n_layer=4,
        n_head=8,
        text_dim=256,
        feature_dim=512,
        block_size=1024,
        vocab_size=4096,
        sample_rate_hz=24000,
        tokens_per_second=40,
        lr=3e-4,
        min_lr=3e-6,
        weight_decay=0.1,
        grad_clip=1.0,
        warmup_steps=200,
        decay_steps=10_000,
        max_steps=2000,
        batch_size=None,
        target_loss=None,
        seed=0,
        codec_seed=0,
        log_every=100,
    ):
        self.n_layer = n_layer
        self.n_head = n_head
        self.text_dim = text_dim
        self.feature_dim = feature_dim
        self.block_size = block_size
        self.vocab_size = vocab_size
        self.sample_rate_hz = sample_rate_hz
        self.tokens_per_second = tokens_per_second
        self.lr = lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.target_loss = target_loss
        self.seed = seed
        self.codec_seed = codec_seed
        self.log_every = log_every

    def _build(self) -> None:
        self.codec_ = Codec(
            CodecConfig(
                sample_rate_hz=self.sample_rate_hz,
                tokens_per_second=self.tokens_per_second,
                feature_dim=self.feature_dim,
                vocab_size=self.vocab_size,
                seed=self.codec_seed,
            )
        )
        cfg = M.ModelConfig.for_codec(
            self.codec_.cfg,
            text_dim=self.text_dim,
            n_layer=self.n_layer,
            n_head=self.n_head,
            block_size=self.block_size,
            seed=self.seed,
        )
        self.model_ = M.SpeechDecoder(cfg, self.codec_)

    def train_config(self) -> M.TrainConfig:
        return M.TrainConfig(
            lr=self.lr,
            min_lr=self.min_lr,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            warmup_steps=self.warmup_steps,
            decay_steps=self.decay_steps,
        )

    def fit(self, X, y, callback=None):
        """Train from scratch. ``callback(step, loss)`` is called after every step."""
        check_positive_int(self.max_steps, "max_steps", minimum=0)
        self._build()
        pairs = check_pairs(X, y, self.vocab_size, self.block_size)
        torch.manual_seed(self.seed)
        trainer = M.Trainer(self.model_, self.train_config())
        rng = np.random.default_rng(self.seed)
        bs = len(pairs) if self.batch_size is None else min(check_positive_int(self.batch_size, "batch_size"), len(pairs))
        order = np.arange(len(pairs))
        cursor = len(pairs)
        self.loss_curve_ = []
        for step in range(self.max_steps):
            if bs == len(pairs):
                batch_idx = order
            else:
                if cursor + bs > len(pairs):
                    order = rng.permutation(len(pairs))
                    cursor = 0
                batch_idx = order[cursor : cursor + bs]
                cursor += bs
            loss = trainer.train_step([pairs[i] for i in batch_idx], batch_id=f"step{step}")
            self.loss_curve_.append(loss)
            if callback is not None:
                callback(step, loss)
            if self.log_every and step % self.log_every == 0:
                log.info("step %d loss %.5f lr %.3g", step, loss, trainer.cfg.lr_at(step))
            if self.target_loss is not None and loss < self.target_loss:
                break
        self.n_steps_ = len(self.loss_curve_)
        self.model_.eval()
        return self

    def loss(self, X, y) -> float:
        check_is_fitted(self, "model_")
        pairs = check_pairs(X, y, self.vocab_size, self.block_size)
        self.model_.eval()
        with torch.no_grad():
            return M.sequence_loss(self.model_, pairs).item()

    def score(self, X, y) -> float:
        """Negative mean cross-entropy (higher is better)."""
        return -self.loss(X, y)

    def predict(self, X, max_tokens=None) -> list[list[int]]:
        check_is_fitted(self, "model_")
        return [M.generate(self.model_, text, max_tokens) for text in check_texts(X)]

    def synthesize(self, text: str, max_tokens=None) -> AudioBuffer:
        check_is_fitted(self, "model_")
        return self.codec_.decode(M.generate(self.model_, text, max_tokens))

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        extra = {f"train.{k}": v for k, v in self.get_params().items()}
        return M.save_checkpoint(path, self.model_, extra)

    @classmethod
    def from_model(cls, model: M.SpeechDecoder) -> "SpeechSynthesizer":
        c, cc = model.cfg, model.codec.cfg
        est = cls(
            n_layer=c.n_layer,
            n_head=c.n_head,
            text_dim=c.text_dim,
            feature_dim=cc.feature_dim,
            block_size=c.block_size,
            vocab_size=cc.vocab_size,
            sample_rate_hz=cc.sample_rate_hz,
            tokens_per_second=cc.tokens_per_second,
            seed=c.seed,
            codec_seed=cc.seed,
        )
        est.codec_ = model.codec
        est.model_ = model
        return est

    @classmethod
    def load(cls, path) -> "SpeechSynthesizer":
        return cls.from_model(M.load_checkpoint(path))
