"""A small pre-LN transformer encoder with a tied MLM head, and the checkpoint container.

Parameter count for config (V, P, d, L, F) = vocab, positions, model dim, layers,
feedforward dim::

    V*d + P*d                                   embeddings
    + L * (4*(d*d + d) + 4*d + 2*d*F + F + d)   per layer: q,k,v,o, two norms, FFN
    + 2*d + V                                   final norm, MLM output bias
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .subword import MASK, PAD, SPECIAL_TOKENS, ContextWindow

MAGIC = b"CLXK"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    feedforward_dim: int = 128
    max_positions: int = 512
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "model_dim", "num_heads", "num_layers", "feedforward_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    def parameter_count(self) -> int:
        V, P, d, L, Fd = (
            self.vocab_size, self.max_positions, self.model_dim, self.num_layers, self.feedforward_dim
        )
        return V * d + P * d + L * (4 * (d * d + d) + 4 * d + 2 * d * Fd + Fd + d) + 2 * d + V


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None, active: bool) -> torch.Tensor:
    if not active or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.feedforward_dim)
        self.ff2 = nn.Linear(cfg.feedforward_dim, d)

    def forward(self, x, key_mask, p, gen, active):
        B, N, d = x.shape
        h, hd = self.num_heads, d // self.num_heads
        y = self.ln1(x)
        q = self.q(y).view(B, N, h, hd).transpose(1, 2)
        k = self.k(y).view(B, N, h, hd).transpose(1, 2)
        v = self.v(y).view(B, N, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = _dropout(scores.softmax(-1), p, gen, active)
        ctx = (attn @ v).transpose(1, 2).reshape(B, N, d)
        x = x + _dropout(self.o(ctx), p, gen, active)
        y = self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x + _dropout(y, p, gen, active)


class EncoderModel(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.model_dim))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_positions, cfg.model_dim))
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self.mlm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))

    def forward(
        self,
        ids: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        """[B, N] ids -> [B, N, d] final-layer representations."""
        N = ids.shape[1]
        if N > self.cfg.max_positions:
            raise ValueError(f"window of {N} positions exceeds max_positions {self.cfg.max_positions}")
        active = self.training
        p = self.cfg.dropout_rate
        x = self.tok_emb[ids] + self.pos_emb[:N]
        x = _dropout(x, p, gen, active)
        for layer in self.layers:
            x = layer(x, key_mask, p, gen, active)
        return self.ln_f(x)

    def mlm_logits(self, reps: torch.Tensor) -> torch.Tensor:
        return reps @ self.tok_emb.T + self.mlm_bias


def init_encoder(cfg: EncoderConfig) -> EncoderModel:
    """Seeded init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear maps, U(-0.05, 0.05)
    for embeddings, zero biases, unit norm gains."""
    model = EncoderModel(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name in ("tok_emb", "pos_emb"):
                param.uniform_(-0.05, 0.05, generator=gen)
            elif name.endswith("bias"):
                param.zero_()
            elif ".ln" in name or name.startswith("ln_"):
                param.fill_(1.0)
            else:
                bound = 1.0 / math.sqrt(param.shape[1])
                param.uniform_(-bound, bound, generator=gen)
    return model


def pad_batch(seqs: list[tuple[int, ...]] | list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), n), PAD, dtype=torch.long)
    mask = torch.zeros((len(seqs), n), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def encode(model: EncoderModel, window: ContextWindow | tuple[int, ...]) -> np.ndarray:
    """Evaluation-mode representations [len(window), d] as float64."""
    ids = window.ids if isinstance(window, ContextWindow) else tuple(window)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.tensor([ids], dtype=torch.long))
    finally:
        model.train(was_training)
    return out[0].double().numpy()


# ---------------------------------------------------------------- MLM


@dataclass(frozen=True)
class MaskPolicy:
    mask_prob: float = 0.15
    replace_mask_frac: float = 0.8
    replace_random_frac: float = 0.1
    keep_frac: float = 0.1

    def __post_init__(self):
        total = self.replace_mask_frac + self.replace_random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("mask fractions must sum to 1")
        if not 0.0 < self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in (0, 1]")


class MaskingError(RuntimeError):
    pass


def mask_batch(ids: torch.Tensor, key_mask: torch.Tensor, policy: MaskPolicy, rng: np.random.Generator, vocab_size: int):
    """(inputs, targets) with targets = -100 at unmasked positions."""
    real = key_mask.numpy()
    for attempt in range(2):
        chosen = (rng.random(real.shape) < policy.mask_prob) & real
        if chosen.any():
            break
    else:
        raise MaskingError("no position was masked in this batch after resampling")
    action = rng.random(real.shape)
    random_ids = rng.integers(len(SPECIAL_TOKENS), max(vocab_size, len(SPECIAL_TOKENS) + 1), size=real.shape)
    inputs = ids.numpy().copy()
    to_mask = chosen & (action < policy.replace_mask_frac)
    to_rand = chosen & (action >= policy.replace_mask_frac) & (
        action < policy.replace_mask_frac + policy.replace_random_frac
    )
    inputs[to_mask] = MASK
    inputs[to_rand] = random_ids[to_rand]
    targets = np.where(chosen, ids.numpy(), -100)
    return torch.from_numpy(inputs), torch.from_numpy(targets)


def mlm_loss(
    model: EncoderModel,
    inputs: torch.Tensor,
    key_mask: torch.Tensor,
    targets: torch.Tensor,
    gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean cross-entropy over positions whose target is not -100."""
    reps = model(inputs, key_mask, gen)
    logits = model.mlm_logits(reps)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def mlm_step(model: EncoderModel, batch: list, policy: MaskPolicy, rng: np.random.Generator):
    """Sample masks, evaluate the MLM loss and fill ``.grad`` of every parameter.

    Returns (loss, {name: grad}). The dropout stream is seeded from ``rng`` so a
    step is reproducible from the generator state alone.
    """
    if not batch:
        raise ValueError("empty batch")
    ids, key_mask = pad_batch(batch)
    inputs, targets = mask_batch(ids, key_mask, policy, rng, model.cfg.vocab_size)
    gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
    model.zero_grad(set_to_none=True)
    loss = mlm_loss(model, inputs, key_mask, targets, gen)
    loss.backward()
    return float(loss.detach()), {n: p.grad for n, p in model.named_parameters()}


@dataclass(frozen=True)
class MlmSchedule:
    epochs: int | None = 3
    steps: int | None = None  # overrides epochs when set
    learning_rate: float = 1e-3
    batch_size: int = 16
    seq_len: int = 128
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class PretrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def mlm_sequences(doc_sequences, seq_len: int) -> list[tuple[int, ...]]:
    """Cut each document's subword ids into consecutive chunks of at most ``seq_len``."""
    out = []
    for sw in doc_sequences:
        ids = tuple(sw.ids) if hasattr(sw, "ids") else tuple(sw)
        for a in range(0, len(ids), seq_len):
            out.append(ids[a : a + seq_len])
    return [s for s in out if s]


def pretrain_mlm(
    model: EncoderModel,
    corpus,
    schedule: MlmSchedule = MlmSchedule(),
    policy: MaskPolicy = MaskPolicy(),
) -> tuple[EncoderModel, PretrainHistory]:
    """Masked-LM training with AdamW on the subword sequences in ``corpus``."""
    seqs = mlm_sequences(corpus, min(schedule.seq_len, model.cfg.max_positions))
    if not seqs:
        raise ValueError("empty pretraining corpus")
    rng = np.random.default_rng(schedule.seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=schedule.learning_rate, weight_decay=schedule.weight_decay
    )
    history = PretrainHistory()
    model.train()
    per_epoch = math.ceil(len(seqs) / schedule.batch_size)
    if schedule.steps is not None:
        n_epochs = math.ceil(schedule.steps / per_epoch)
    else:
        n_epochs = schedule.epochs or 1
    for _ in range(n_epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for a in range(0, len(seqs), schedule.batch_size):
            if schedule.steps is not None and history.steps >= schedule.steps:
                break
            batch = [seqs[i] for i in order[a : a + schedule.batch_size]]
            loss, _ = mlm_step(model, batch, policy, rng)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite MLM loss at step {history.steps}")
            opt.step()
            losses.append(loss)
            history.steps += 1
        if losses:
            history.epoch_losses.append(float(np.mean(losses)))
    model.eval()
    return model, history


# ---------------------------------------------------------------- checkpoints


def write_container(path, kind: str, config: dict, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    index = [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()]
    header = json.dumps(
        {"kind": kind, "config": config, "meta": meta, "tensors": index}, sort_keys=True
    ).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for t in tensors.values():
            fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    if data[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {data[:4]!r}, not a checkpoint of this format")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload in tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, tensors


def load_state(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks tensor {missing[0]!r}")
    for name, param in params.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} vs model {tuple(param.shape)}"
            )
    with torch.no_grad():
        for name, param in params.items():
            param.copy_(torch.from_numpy(tensors[name].copy()).to(param.dtype))


def save_checkpoint(obj, path) -> None:
    """Save an :class:`EncoderModel` or a tagger (anything with ``checkpoint_payload``)."""
    if isinstance(obj, EncoderModel):
        write_container(path, "encoder", asdict(obj.cfg), {}, dict(obj.named_parameters()))
    else:
        kind, config, meta, tensors = obj.checkpoint_payload()
        write_container(path, kind, config, meta, tensors)


def load_checkpoint(path, into: nn.Module | None = None):
    """Load a checkpoint; with ``into``, copy tensors into that module after shape checks."""
    header, tensors = read_container(path)
    if into is not None:
        load_state(into, tensors)
        return into
    if header["kind"] == "encoder":
        model = EncoderModel(EncoderConfig(**header["config"]))
        load_state(model, tensors)
        model.eval()
        return model
    if header["kind"] == "tagger":
        from .tagger import Tagger

        return Tagger.from_checkpoint(header, tensors)
    raise CheckpointError(f"{path}: unknown checkpoint kind {header['kind']!r}")
