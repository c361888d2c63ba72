"""Decoder-only speech-token transformer with byte-level text conditioning.

Input frame at step t is ``[byte_embedding(b_t); codec_feature(S_{t-1})]``,
scaled to unit L2 norm, plus a learned positional row.  Step 1 uses a zero
acoustic context.  Text positions past the last byte use the PAD row, so a
sentence of M bytes conditions the first M speech steps directly and the rest
through attention.

The output vocabulary is the codec vocabulary plus one end-of-speech id.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from llmvox import g2p, lvx
from llmvox.codec import Codec, CodecConfig

log = logging.getLogger(__name__)


class ContextOverflowError(ValueError):
    def __init__(self, length: int, block_size: int):
        super().__init__(f"sequence of {length} steps exceeds block_size={block_size}")
        self.length = length
        self.block_size = block_size


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int = 4
    n_embd: int = 768
    n_head: int = 8
    block_size: int = 1024
    vocab_out: int = 4097
    text_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_embd % self.n_head:
            raise ValueError(f"n_embd={self.n_embd} is not divisible by n_head={self.n_head}")
        if self.block_size < 2:
            raise ValueError("block_size must be >= 2")
        if not 0 < self.text_dim < self.n_embd:
            raise ValueError(f"text_dim={self.text_dim} must lie in (0, n_embd={self.n_embd})")
        if self.vocab_out < 3:
            raise ValueError("vocab_out must be >= 3")

    @property
    def feature_dim(self) -> int:
        return self.n_embd - self.text_dim

    @property
    def eos_id(self) -> int:
        return self.vocab_out - 1

    @classmethod
    def for_codec(cls, codec_cfg: CodecConfig, **kwargs) -> "ModelConfig":
        text_dim = kwargs.pop("text_dim", g2p.DEFAULT_DIM)
        return cls(
            n_embd=text_dim + codec_cfg.feature_dim,
            text_dim=text_dim,
            vocab_out=codec_cfg.vocab_size + 1,
            **kwargs,
        )

    @classmethod
    def from_strings(cls, values: dict) -> "ModelConfig":
        known = {f.name: int(values[f.name]) for f in fields(cls) if f.name in values}
        return cls(**known)


class KVCache:
    """Per-layer keys/values for one generation session."""

    def __init__(self, n_layer: int):
        self.keys: list[torch.Tensor | None] = [None] * n_layer
        self.values: list[torch.Tensor | None] = [None] * n_layer

    def __len__(self) -> int:
        k = self.keys[0]
        return 0 if k is None else k.shape[2]

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[layer] is not None:
            k = torch.cat([self.keys[layer], k], dim=2)
            v = torch.cat([self.values[layer], v], dim=2)
        self.keys[layer] = k
        self.values[layer] = v
        return k, v

    def reset(self) -> None:
        self.keys = [None] * len(self.keys)
        self.values = [None] * len(self.values)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_head = cfg.n_head
        self.qkv = nn.Linear(cfg.n_embd, 3 * cfg.n_embd)
        self.proj = nn.Linear(cfg.n_embd, cfg.n_embd)

    def forward(self, x, cache: KVCache | None = None, layer: int = 0):
        B, T, C = x.shape
        hd = C // self.n_head
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_head, hd).transpose(1, 2)
        k = k.view(B, T, self.n_head, hd).transpose(1, 2)
        v = v.view(B, T, self.n_head, hd).transpose(1, 2)
        past = 0
        if cache is not None:
            if cache.keys[layer] is not None:
                past = cache.keys[layer].shape[2]
            k, v = cache.append(layer, k, v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        total = k.shape[2]
        # query i sits at absolute position past + i and sees keys 0..past + i
        mask = torch.ones(T, total, dtype=torch.bool, device=x.device).tril(diagonal=past)
        att = att.masked_fill(~mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_1 = nn.LayerNorm(cfg.n_embd)
        self.attn = CausalSelfAttention(cfg)
        self.ln_2 = nn.LayerNorm(cfg.n_embd)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.n_embd, 4 * cfg.n_embd),
            nn.GELU(),
            nn.Linear(4 * cfg.n_embd, cfg.n_embd),
        )

    def forward(self, x, cache=None, layer=0):
        x = x + self.attn(self.ln_1(x), cache, layer)
        return x + self.mlp(self.ln_2(x))


class SpeechDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, codec: Codec):
        super().__init__()
        if codec.cfg.feature_dim != cfg.feature_dim:
            raise ValueError(
                f"codec feature_dim={codec.cfg.feature_dim} but model expects "
                f"n_embd - text_dim = {cfg.feature_dim}"
            )
        if codec.vocab_size + 1 != cfg.vocab_out:
            raise ValueError(
                f"vocab_out={cfg.vocab_out} must equal codec vocab_size + 1 = {codec.vocab_size + 1}"
            )
        self.cfg = cfg
        self.codec = codec
        gen = torch.Generator().manual_seed(cfg.seed)
        self.byte_embed = nn.Embedding(g2p.TABLE_ROWS, cfg.text_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.block_size, cfg.n_embd))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layer))
        self.ln_f = nn.LayerNorm(cfg.n_embd)
        self.head = nn.Linear(cfg.n_embd, cfg.vocab_out)
        feats = torch.tensor(np.array(codec.codebook.features), dtype=torch.float32)
        # extra zero row: acoustic context for step 1
        feats = torch.cat([feats, torch.zeros(1, cfg.feature_dim)], dim=0)
        self.register_buffer("features", feats, persistent=False)
        self._init_weights(gen)

    def _init_weights(self, gen: torch.Generator) -> None:
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif "ln" in name:
                nn.init.ones_(p)
            else:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=gen)
        with torch.no_grad():
            for block in self.blocks:
                # residual projections scaled down with depth, as in GPT-2
                std = 0.02 / math.sqrt(2 * self.cfg.n_layer)
                block.attn.proj.weight.normal_(0.0, std, generator=gen)
                block.mlp[2].weight.normal_(0.0, std, generator=gen)

    @property
    def zero_context_id(self) -> int:
        return self.features.shape[0] - 1

    def embedding_table(self) -> g2p.EmbeddingTable:
        return g2p.EmbeddingTable(self.byte_embed.weight.detach().cpu().numpy())

    def unit_inputs(self, text_ids: torch.Tensor, prev_ids: torch.Tensor) -> torch.Tensor:
        """Unit-norm ``[b_t; f_{t-1}]`` frames; prev id ``zero_context_id`` gives f = 0."""
        x = torch.cat([self.byte_embed(text_ids), self.features[prev_ids].to(self.pos.dtype)], dim=-1)
        norm = x.norm(dim=-1, keepdim=True)
        return torch.where(norm > 0, x / norm.clamp_min(torch.finfo(x.dtype).tiny), x)

    def assemble(self, text_ids: torch.Tensor, prev_ids: torch.Tensor, start: int = 0) -> torch.Tensor:
        T = text_ids.shape[-1]
        if start + T > self.cfg.block_size:
            raise ContextOverflowError(start + T, self.cfg.block_size)
        return self.unit_inputs(text_ids, prev_ids) + self.pos[start : start + T]

    def forward_frames(self, z: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        start = len(cache) if cache is not None else 0
        if start + z.shape[-2] > self.cfg.block_size:
            raise ContextOverflowError(start + z.shape[-2], self.cfg.block_size)
        x = z
        for i, block in enumerate(self.blocks):
            x = block(x, cache, i)
        return self.head(self.ln_f(x))

    def forward(self, text_ids, prev_ids, cache: KVCache | None = None):
        start = len(cache) if cache is not None else 0
        return self.forward_frames(self.assemble(text_ids, prev_ids, start), cache)


def assemble_inputs(text_emb: g2p.TextEmbeddingSeq, prev_tokens, codec: Codec, pos_table=None) -> np.ndarray:
    """Frames ``z_1..z_T`` from precomputed text embeddings and previous speech tokens.

    ``prev_tokens`` holds the tokens emitted before each step, so it has T - 1
    entries under teacher forcing. Without ``pos_table`` the unit-norm ``x_t``
    frames are returned.
    """
    b = np.asarray(text_emb.vectors, dtype=np.float64)
    T = b.shape[0]
    prev = list(prev_tokens)
    if len(prev) not in (T - 1, T) and T:
        raise ValueError(f"expected {T - 1} previous tokens for {T} steps, got {len(prev)}")
    f = np.zeros((T, codec.cfg.feature_dim))
    for t in range(1, T):
        f[t] = codec.feature_of(prev[t - 1])
    x = np.concatenate([b, f], axis=1)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)
    if pos_table is None:
        return x
    pos = np.asarray(pos_table, dtype=np.float64)
    if T > pos.shape[0]:
        raise ContextOverflowError(T, pos.shape[0])
    return x + pos[:T]


def encode_pair(text: str, tokens, model: SpeechDecoder):
    """Teacher-forcing tensors for one pair: text ids, previous ids, targets (T + 1 each)."""
    ids = g2p.subtokenize(text)
    tokens = [int(t) for t in tokens]
    T = len(tokens)
    if len(ids) > T:
        raise g2p.AlignmentError(len(ids), T)
    if T + 1 > model.cfg.block_size:
        raise ContextOverflowError(T + 1, model.cfg.block_size)
    if tokens and (min(tokens) < 0 or max(tokens) >= model.codec.vocab_size):
        raise ValueError("speech tokens must lie in the codec vocabulary")
    text_ids = g2p.pad_ids(ids, T + 1)
    prev = [model.zero_context_id] + tokens
    targets = tokens + [model.cfg.eos_id]
    return text_ids, np.asarray(prev), np.asarray(targets)


def collate(pairs, model: SpeechDecoder):
    encoded = [encode_pair(text, toks, model) for text, toks in pairs]
    L = max(len(e[0]) for e in encoded)
    B = len(encoded)
    text_ids = np.full((B, L), g2p.PAD_ID, dtype=np.int64)
    prev = np.full((B, L), model.zero_context_id, dtype=np.int64)
    targets = np.full((B, L), -100, dtype=np.int64)
    for i, (t, p, y) in enumerate(encoded):
        text_ids[i, : len(t)] = t
        prev[i, : len(p)] = p
        targets[i, : len(y)] = y
    return torch.from_numpy(text_ids), torch.from_numpy(prev), torch.from_numpy(targets)


def sequence_loss(model: SpeechDecoder, pairs) -> torch.Tensor:
    """Mean next-token NLL over every target position, end-of-speech included."""
    text_ids, prev, targets = collate(pairs, model)
    logits = model(text_ids, prev)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    min_lr: float = 3e-6
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_steps: int = 200
    decay_steps: int = 10_000
    betas: tuple[float, float] = (0.9, 0.95)

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay to ``min_lr`` at ``decay_steps``."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if step >= self.decay_steps:
            return self.min_lr
        frac = (step - self.warmup_steps) / max(1, self.decay_steps - self.warmup_steps)
        return self.min_lr + 0.5 * (1.0 + math.cos(math.pi * frac)) * (self.lr - self.min_lr)


class Trainer:
    """Single-writer AdamW trainer; the only code path that mutates parameters."""

    def __init__(self, model: SpeechDecoder, cfg: TrainConfig | None = None):
        self.model = model
        self.cfg = cfg or TrainConfig()
        decay, no_decay = [], []
        for p in model.parameters():
            (decay if p.dim() >= 2 else no_decay).append(p)
        self.optimizer = torch.optim.AdamW(
            [
                {"params": decay, "weight_decay": self.cfg.weight_decay},
                {"params": no_decay, "weight_decay": 0.0},
            ],
            lr=self.cfg.lr,
            betas=self.cfg.betas,
        )
        self.step_count = 0

    def train_step(self, pairs, batch_id=None) -> float:
        lr = self.cfg.lr_at(self.step_count)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        loss = sequence_loss(self.model, pairs)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {loss.item()} at step {self.step_count} "
                f"(lr={lr:.3g}, batch={batch_id})"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return loss.item()


def params_finite(model: nn.Module) -> bool:
    return all(torch.isfinite(p).all().item() for p in model.parameters())


class GenerationSession:
    """Incremental decoding state for one sentence.

    Each session owns its :class:`KVCache`; the model itself is only read.
    ``use_cache=False`` recomputes the whole prefix every step.
    """

    def __init__(
        self,
        model: SpeechDecoder,
        text: str,
        max_tokens: int | None = None,
        temperature: float | None = None,
        seed: int = 0,
        use_cache: bool = True,
    ):
        cfg = model.cfg
        self.model = model
        self.text_ids = g2p.subtokenize(text)
        if len(self.text_ids) > cfg.block_size:
            raise ContextOverflowError(len(self.text_ids), cfg.block_size)
        if max_tokens is None:
            max_tokens = cfg.block_size - 1
        if max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")
        if max_tokens > cfg.block_size:
            raise ContextOverflowError(max_tokens, cfg.block_size)
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.use_cache = use_cache
        self.cache = KVCache(cfg.n_layer) if use_cache else None
        self._gen = torch.Generator().manual_seed(seed) if temperature else None
        self.tokens: list[int] = []
        self.last_logits: torch.Tensor | None = None
        self.done = max_tokens == 0 or not self.text_ids
        if not self.text_ids:
            warnings.warn("empty text: nothing to synthesize", RuntimeWarning, stacklevel=2)

    def _text_id(self, t: int) -> int:
        return self.text_ids[t] if t < len(self.text_ids) else g2p.PAD_ID

    @torch.inference_mode()
    def _logits(self) -> torch.Tensor:
        t = len(self.tokens)
        prev = self.tokens[-1] if self.tokens else self.model.zero_context_id
        if self.use_cache:
            text = torch.tensor([[self._text_id(t)]])
            logits = self.model(text, torch.tensor([[prev]]), self.cache)
            return logits[0, -1]
        text = torch.tensor([[self._text_id(i) for i in range(t + 1)]])
        prevs = torch.tensor([[self.model.zero_context_id] + self.tokens])
        return self.model(text, prevs)[0, -1]

    def step(self) -> int | None:
        """Emit the next speech token, or None once end-of-speech or the budget is hit."""
        if self.done:
            return None
        logits = self._logits()
        self.last_logits = logits
        if self.temperature:
            probs = F.softmax(logits / self.temperature, dim=-1)
            token = int(torch.multinomial(probs, 1, generator=self._gen).item())
        else:
            token = int(torch.argmax(logits).item())
        if token == self.model.cfg.eos_id:
            self.done = True
            return None
        self.tokens.append(token)
        if len(self.tokens) >= self.max_tokens:
            self.done = True
        return token

    def __iter__(self):
        while (token := self.step()) is not None:
            yield token


def generate(model: SpeechDecoder, text: str, max_tokens: int | None = None, temperature=None, seed=0, use_cache=True) -> list[int]:
    model.eval()
    session = GenerationSession(model, text, max_tokens, temperature, seed, use_cache)
    return list(session)


def save_checkpoint(path, model: SpeechDecoder, extra: dict | None = None) -> Path:
    """Write named weights as LVX1 sections and the configs as a ``.cfg`` sidecar."""
    path = Path(path)
    sections = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    path.write_bytes(lvx.dumps_sections(sections))
    values = {f"model.{k}": v for k, v in asdict(model.cfg).items()}
    values.update({f"codec.{k}": v for k, v in asdict(model.codec.cfg).items()})
    values.update(extra or {})
    Path(str(path) + ".cfg").write_text(lvx.format_kv(values), encoding="utf-8")
    return path


def load_checkpoint(path) -> SpeechDecoder:
    path = Path(path)
    cfg_path = Path(str(path) + ".cfg")
    if not path.exists() or not cfg_path.exists():
        raise FileNotFoundError(f"checkpoint {path} (or its .cfg sidecar) not found")
    values = lvx.parse_kv(cfg_path.read_text(encoding="utf-8"), str(cfg_path))
    model_vals = {k[6:]: v for k, v in values.items() if k.startswith("model.")}
    codec_vals = {k[6:]: int(v) for k, v in values.items() if k.startswith("codec.")}
    model = SpeechDecoder(ModelConfig.from_strings(model_vals), Codec(CodecConfig(**codec_vals)))
    sections = lvx.loads_sections(path.read_bytes())
    state = model.state_dict()
    missing = set(state) - set(sections)
    if missing:
        raise lvx.ContainerError(f"checkpoint is missing weights: {sorted(missing)}")
    model.load_state_dict({k: torch.from_numpy(sections[k]).reshape(state[k].shape) for k in state})
    model.eval()
    return model
