"""Sequence encoder for EHR-like token streams.

Four embedding tables (clinical code, age bin, visit segment, visit
position) are summed per position, run through a multi-head
self-attention stack with PAD masking, and pooled by an affine+tanh map
of the first (CLS) position. A masked-code prediction loss is provided
for unsupervised pretraining of the deterministic parameters.

Embedding tables may be deterministic tensors or mean-field variational
blocks; both expose the same ``realize`` contract (one weight draw per
forward call, shared across positions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn

from .bayeslayers import MeanFieldTensor
from .errors import ConfigurationError, DimensionError, ValidationError
from .synthdata import N_AGE_BINS, MAX_SEQUENCE_LENGTH, PatientRecord, Vocabulary

TABLE_NAMES = ("code", "age", "segment", "position")


@dataclass(frozen=True)
class EncoderConfig:
    max_sequence_length: int = MAX_SEQUENCE_LENGTH
    hidden_size: int = 150
    n_layers: int = 4
    n_heads: int = 6
    intermediate_size: int = 108
    dropout: float = 0.29
    pool_size: int = 150

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise ConfigurationError(
                f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError("dropout must lie in [0, 1)")
        for name in ("max_sequence_length", "n_layers", "intermediate_size", "pool_size"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def published_defaults(cls, gp_head: bool) -> "EncoderConfig":
        """Defaults from the published model-parameter table; the pool
        layer is 24-wide for GP classifier heads and 150 otherwise."""
        return cls(pool_size=24 if gp_head else 150)


@dataclass
class LatentSequence:
    """Encoder activations plus the validity mask (False at PAD)."""

    values: torch.Tensor  # (L, H) or (B, L, H)
    mask: torch.Tensor  # (L,) or (B, L) bool

    @property
    def batched(self) -> bool:
        return self.values.dim() == 3


class DeterministicTensor(nn.Module):
    """Point-estimate weight block with the same realize() contract as
    a mean-field block."""

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.weight = nn.Parameter(weight.to(torch.float64))

    @property
    def shape(self) -> torch.Size:
        return self.weight.shape

    def realize(self, generator=None, eps=None) -> torch.Tensor:
        return self.weight


def _realize(block: nn.Module, generator, eps):
    if isinstance(block, MeanFieldTensor):
        if eps is None:
            eps = block.draw_eps(generator)
        return block.sample(eps)
    return block.realize(generator, eps)


def _uniform_init(shape, bound: float, generator) -> torch.Tensor:
    return (torch.rand(shape, dtype=torch.float64, generator=generator) * 2.0 - 1.0) * bound


def _xavier_init(n_in: int, n_out: int, generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return _uniform_init((n_in, n_out), bound, generator)


class EmbeddingBlock(nn.Module):
    """Four lookup tables sharing one hidden size; each table is either
    deterministic or a MeanFieldTensor."""

    def __init__(self, code, age, segment, position):
        super().__init__()
        self.tables = nn.ModuleDict(
            {"code": code, "age": age, "segment": segment, "position": position}
        )
        sizes = {name: t.shape[1] for name, t in self.tables.items()}
        if len(set(sizes.values())) != 1:
            raise DimensionError(f"embedding tables disagree on hidden size: {sizes}")

    @classmethod
    def build(
        cls,
        vocabulary: Vocabulary,
        config: EncoderConfig,
        generator,
        stochastic: bool = False,
        prior_std: float = 0.374,
    ) -> "EmbeddingBlock":
        h = config.hidden_size
        shapes = {
            "code": (vocabulary.size, h),
            "age": (N_AGE_BINS, h),
            "segment": (2, h),
            "position": (config.max_sequence_length, h),
        }
        tables = {}
        for name, shape in shapes.items():
            weight = _uniform_init(shape, 0.05, generator)
            if stochastic:
                tables[name] = MeanFieldTensor.from_mean(weight, prior_std)
            else:
                tables[name] = DeterministicTensor(weight)
        return cls(**tables)

    @property
    def stochastic(self) -> bool:
        return any(isinstance(t, MeanFieldTensor) for t in self.tables.values())

    def stochastic_blocks(self) -> dict[str, MeanFieldTensor]:
        return {
            f"embedding.{name}": t
            for name, t in self.tables.items()
            if isinstance(t, MeanFieldTensor)
        }

    def realize(self, generator=None, noise: dict | None = None) -> dict[str, torch.Tensor]:
        """Draw one concrete set of tables for a forward call."""
        out = {}
        for name, table in self.tables.items():
            eps = None if noise is None else noise.get(f"embedding.{name}")
            out[name] = _realize(table, generator, eps)
        return out


@dataclass
class Batch:
    codes: torch.Tensor  # (B, L) long
    ages: torch.Tensor
    segments: torch.Tensor
    positions: torch.Tensor
    mask: torch.Tensor  # (B, L) bool, False at PAD
    labels: torch.Tensor  # (B,) float64
    patient_ids: list[str]


def records_to_batch(records: list[PatientRecord], pad_to: int | None = None) -> Batch:
    length = max(len(r.codes) for r in records)
    if pad_to is not None:
        length = max(length, pad_to)
    n = len(records)
    codes = torch.zeros((n, length), dtype=torch.long)
    ages = torch.zeros((n, length), dtype=torch.long)
    segments = torch.zeros((n, length), dtype=torch.long)
    positions = torch.zeros((n, length), dtype=torch.long)
    mask = torch.zeros((n, length), dtype=torch.bool)
    labels = torch.zeros(n, dtype=torch.float64)
    for i, r in enumerate(records):
        k = len(r.codes)
        codes[i, :k] = torch.tensor(r.codes, dtype=torch.long)
        ages[i, :k] = torch.tensor(r.ages, dtype=torch.long)
        segments[i, :k] = torch.tensor(r.segments, dtype=torch.long)
        positions[i, :k] = torch.tensor(r.positions, dtype=torch.long)
        mask[i, :k] = True
        labels[i] = float(r.label)
    return Batch(codes, ages, segments, positions, mask, labels, [r.patient_id for r in records])


def embed_batch(
    batch: Batch,
    block: EmbeddingBlock,
    generator=None,
    noise: dict | None = None,
) -> LatentSequence:
    tables = block.realize(generator, noise)
    for name, ids in (
        ("code", batch.codes),
        ("age", batch.ages),
        ("segment", batch.segments),
        ("position", batch.positions),
    ):
        limit = tables[name].shape[0]
        if int(ids.max()) >= limit or int(ids.min()) < 0:
            bad = torch.nonzero((ids >= limit) | (ids < 0))[0]
            raise LookupError(
                f"{name} id out of range at batch row {int(bad[0])}, position {int(bad[1])}"
            )
    values = (
        tables["code"][batch.codes]
        + tables["age"][batch.ages]
        + tables["segment"][batch.segments]
        + tables["position"][batch.positions]
    )
    return LatentSequence(values=values, mask=batch.mask)


def embed_sequence(
    record: PatientRecord,
    block: EmbeddingBlock,
    generator=None,
    noise: dict | None = None,
) -> LatentSequence:
    """Single-record embedding; one weight realization per call."""
    batch = records_to_batch([record])
    latent = embed_batch(batch, block, generator, noise)
    return LatentSequence(values=latent.values[0], mask=latent.mask[0])


class SelfAttention(nn.Module):
    def __init__(self, hidden_size: int, n_heads: int, generator=None):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = hidden_size // n_heads
        self.query = nn.Parameter(_xavier_init(hidden_size, hidden_size, generator))
        self.key = nn.Parameter(_xavier_init(hidden_size, hidden_size, generator))
        self.value = nn.Parameter(_xavier_init(hidden_size, hidden_size, generator))
        self.output = nn.Parameter(_xavier_init(hidden_size, hidden_size, generator))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, length, h = x.shape
        def split(t):
            return t.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)

        q = split(x @ self.query)
        k = split(x @ self.key)
        v = split(x @ self.value)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        key_mask = mask[:, None, None, :]  # PAD keys receive no weight
        scores = scores.masked_fill(~key_mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        context = (weights @ v).transpose(1, 2).reshape(b, length, h)
        return context @ self.output


class EncoderLayer(nn.Module):
    """Post-layer-norm transformer block with a GELU feed-forward."""

    def __init__(self, config: EncoderConfig, generator=None):
        super().__init__()
        h, inner = config.hidden_size, config.intermediate_size
        self.attention = SelfAttention(h, config.n_heads, generator)
        self.norm1 = nn.LayerNorm(h).to(torch.float64)
        self.norm2 = nn.LayerNorm(h).to(torch.float64)
        self.ffn_in = nn.Parameter(_xavier_init(h, inner, generator))
        self.ffn_in_bias = nn.Parameter(torch.zeros(inner, dtype=torch.float64))
        self.ffn_out = nn.Parameter(_xavier_init(inner, h, generator))
        self.ffn_out_bias = nn.Parameter(torch.zeros(h, dtype=torch.float64))
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.dropout(self.attention(x, mask)))
        inner = nn.functional.gelu(x @ self.ffn_in + self.ffn_in_bias)
        return self.norm2(x + self.dropout(inner @ self.ffn_out + self.ffn_out_bias))


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, generator=None):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            EncoderLayer(config, generator) for _ in range(config.n_layers)
        )

    def forward(self, latent: LatentSequence) -> LatentSequence:
        values, mask = latent.values, latent.mask
        squeeze = values.dim() == 2
        if squeeze:
            values, mask = values[None], mask[None]
        if values.shape[-1] != self.config.hidden_size:
            raise DimensionError(
                f"latent hidden size {values.shape[-1]} != config {self.config.hidden_size}"
            )
        for layer in self.layers:
            values = layer(values, mask)
        if squeeze:
            return LatentSequence(values=values[0], mask=mask[0])
        return LatentSequence(values=values, mask=mask)


def encode(latent: LatentSequence, encoder: Encoder) -> LatentSequence:
    return encoder(latent)


class Pooler(nn.Module):
    """Affine + tanh applied to the first (CLS) row only."""

    def __init__(self, hidden_size: int, pool_size: int, generator=None):
        super().__init__()
        self.weight = nn.Parameter(_xavier_init(hidden_size, pool_size, generator))
        self.bias = nn.Parameter(torch.zeros(pool_size, dtype=torch.float64))

    def forward(self, latent: LatentSequence) -> torch.Tensor:
        cls_row = latent.values[..., 0, :]
        return torch.tanh(cls_row @ self.weight + self.bias)


def pool_first(latent: LatentSequence, pooler: Pooler) -> torch.Tensor:
    return pooler(latent)


class EncoderModel(nn.Module):
    """Embedding block + encoder stack + pooler + tied masked-code head."""

    def __init__(
        self,
        vocabulary: Vocabulary,
        config: EncoderConfig,
        seed: int = 0,
        stochastic_embeddings: bool = False,
        embedding_prior_std: float = 0.374,
    ):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.config = config
        self.vocabulary = vocabulary
        self.embedding = EmbeddingBlock.build(
            vocabulary, config, generator, stochastic_embeddings, embedding_prior_std
        )
        self.encoder = Encoder(config, generator)
        self.pooler = Pooler(config.hidden_size, config.pool_size, generator)
        n_codes = vocabulary.size - len(vocabulary.special_tokens)
        self.mlm_bias = nn.Parameter(torch.zeros(n_codes, dtype=torch.float64))

    def forward_pooled(
        self, batch: Batch, generator=None, noise: dict | None = None
    ) -> torch.Tensor:
        latent = embed_batch(batch, self.embedding, generator, noise)
        return pool_first(self.encoder(latent), self.pooler)


@dataclass
class MlmResult:
    loss: torch.Tensor
    n_masked: int
    no_maskable: bool


def _masked_code_positions(batch: Batch, vocabulary: Vocabulary) -> torch.Tensor:
    lo, hi = vocabulary.code_id_range
    return (batch.codes >= lo) & (batch.codes < hi) & batch.mask


def mlm_loss(
    records: list[PatientRecord] | PatientRecord,
    mask_fraction: float,
    model: EncoderModel,
    generator: torch.Generator,
) -> MlmResult:
    """Masked-code pretraining loss.

    A random ``mask_fraction`` of code positions is replaced by the MASK
    token; the original codes are predicted through the tied code
    embedding table. Returns the mean cross-entropy over masked
    positions, zero (with a flag) if nothing is maskable.
    """
    if not (0.0 < mask_fraction < 1.0):
        raise ConfigurationError("mask_fraction must lie in (0, 1)")
    if isinstance(records, PatientRecord):
        records = [records]
    vocabulary = model.vocabulary
    batch = records_to_batch(records)
    maskable = _masked_code_positions(batch, vocabulary)
    flat = torch.nonzero(maskable.reshape(-1)).squeeze(-1)
    n_pick = max(1, int(round(mask_fraction * flat.numel()))) if flat.numel() else 0
    if n_pick == 0:
        return MlmResult(torch.zeros((), dtype=torch.float64), 0, True)
    perm = torch.randperm(flat.numel(), generator=generator)[:n_pick]
    chosen = flat[perm]

    corrupted = batch.codes.reshape(-1).clone()
    targets = corrupted[chosen] - vocabulary.code_id_range[0]
    corrupted[chosen] = vocabulary.mask_id
    masked_batch = Batch(
        codes=corrupted.reshape(batch.codes.shape),
        ages=batch.ages,
        segments=batch.segments,
        positions=batch.positions,
        mask=batch.mask,
        labels=batch.labels,
        patient_ids=batch.patient_ids,
    )
    latent = model.encoder(embed_batch(masked_batch, model.embedding, generator))
    hidden = latent.values.reshape(-1, model.config.hidden_size)[chosen]
    code_table = model.embedding.realize(generator)["code"]
    lo, hi = vocabulary.code_id_range
    logits = hidden @ code_table[lo:hi].T + model.mlm_bias
    loss = nn.functional.cross_entropy(logits, targets)
    return MlmResult(loss, n_pick, False)


def pretrain_mlm(
    records: list[PatientRecord],
    model: EncoderModel,
    epochs: int,
    batch_size: int = 64,
    mask_fraction: float = 0.15,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Optimize the deterministic encoder on the masked-code objective.

    Returns the per-epoch mean loss. Deterministic for a fixed seed.
    """
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed + 1)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    history = []
    order = list(range(len(records)))
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(order), generator=generator).tolist()
        total, steps = 0.0, 0
        for start in range(0, len(perm), batch_size):
            chunk = [records[order[i]] for i in perm[start : start + batch_size]]
            result = mlm_loss(chunk, mask_fraction, model, generator)
            if result.no_maskable:
                continue
            optimizer.zero_grad()
            result.loss.backward()
            optimizer.step()
            total += float(result.loss.detach())
            steps += 1
        history.append(total / max(steps, 1))
    model.eval()
    return history


def save_encoder_checkpoint(model: EncoderModel, path: str) -> None:
    torch.save(
        {
            "config": asdict(model.config),
            "code_tokens": list(model.vocabulary.code_tokens),
            "special_tokens": list(model.vocabulary.special_tokens),
            "state": model.state_dict(),
        },
        path,
    )


def load_encoder_checkpoint(path: str) -> EncoderModel:
    payload = torch.load(path, weights_only=False)
    vocabulary = Vocabulary(
        code_tokens=tuple(payload["code_tokens"]),
        special_tokens=tuple(payload["special_tokens"]),
    )
    config = EncoderConfig(**payload["config"])
    model = EncoderModel(vocabulary, config)
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint incompatible with config: {exc}") from exc
    model.eval()
    return model
