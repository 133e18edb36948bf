"""Composite probabilistic classifiers over the sequence encoder.

Six variants are assembled from three ingredients: stochastic
(mean-field) embedding tables, a stochastic dense output layer, and
sparse GP classifier heads (whitened free inducing points or a
structured interpolation grid). All variants train by stochastic
gradient ascent on one combined objective: the head's variational bound
minus the KL of every stochastic weight block, scaled per example so
minibatch objectives sum to the full-dataset bound.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from . import gp
from .bayeslayers import (
    DEFAULT_EMBEDDING_PRIOR_STD,
    DEFAULT_OUTPUT_PRIOR_STD,
    MeanFieldTensor,
    bayesian_dense_forward,
)
from .encoder import (
    Batch,
    EncoderConfig,
    EncoderModel,
    _xavier_init,
    records_to_batch,
)
from .errors import ConfigurationError
from .evaluation import PredictiveSamples, auroc_score
from .synthdata import PatientRecord, Vocabulary

VARIANT_NAMES = ("DBGP", "BE", "BO", "BE_BO", "WHITENED_GP", "KISS_GP")


@dataclass(frozen=True)
class ModelVariant:
    name: str
    embedding_stochastic: bool
    output_stochastic: bool
    head: str  # dense | bayes_dense | whitened_gp | kiss_gp

    def __post_init__(self):
        if self.head not in ("dense", "bayes_dense", "whitened_gp", "kiss_gp"):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.output_stochastic != (self.head == "bayes_dense"):
            raise ConfigurationError("output_stochastic must match a bayes_dense head")
        if self.name == "DBGP" and not (self.embedding_stochastic and self.head == "kiss_gp"):
            raise ConfigurationError("DBGP requires stochastic embeddings and a kiss_gp head")

    @property
    def gp_head(self) -> bool:
        return self.head in ("whitened_gp", "kiss_gp")

    @classmethod
    def from_name(cls, name: str) -> "ModelVariant":
        table = {
            "DBGP": cls("DBGP", True, False, "kiss_gp"),
            "BE": cls("BE", True, False, "dense"),
            "BO": cls("BO", False, True, "bayes_dense"),
            "BE_BO": cls("BE_BO", True, True, "bayes_dense"),
            "WHITENED_GP": cls("WHITENED_GP", False, False, "whitened_gp"),
            "KISS_GP": cls("KISS_GP", False, False, "kiss_gp"),
        }
        if name not in table:
            raise ConfigurationError(f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")
        return table[name]


@dataclass(frozen=True)
class HeadConfig:
    """Classifier-head geometry. The pooled vector is projected to a
    low-dimensional GP input and squashed by tanh, so every latent stays
    inside the fixed inducing hull built over [-1, 1]^d."""

    gp_input_dim: int = 2
    grid_points_per_dim: int = 64
    whitened_points_per_dim: int = 5
    lengthscale: float = 0.5
    outputscale: float = 1.0
    embedding_prior_std: float = DEFAULT_EMBEDDING_PRIOR_STD
    output_prior_std: float = DEFAULT_OUTPUT_PRIOR_STD

    def __post_init__(self):
        if self.gp_input_dim < 1 or self.grid_points_per_dim < 4:
            raise ConfigurationError("gp_input_dim >= 1 and grid_points_per_dim >= 4 required")
        if min(self.lengthscale, self.outputscale) <= 0:
            raise ConfigurationError("kernel scales must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    mc_train_samples: int = 1
    seed: int = 0
    kl_warmup_epochs: int = 0  # linear ramp; final weight is always 1
    patience: int = 5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.mc_train_samples < 1:
            raise ConfigurationError("counts in TrainConfig must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")

    def kl_weight(self, epoch: int) -> float:
        if self.kl_warmup_epochs <= 0:
            return 1.0
        return min(1.0, (epoch + 1) / self.kl_warmup_epochs)


class DenseHead(nn.Module):
    def __init__(self, pool_size: int, generator):
        super().__init__()
        self.weight = nn.Parameter(_xavier_init(pool_size, 1, generator)[:, 0])
        self.bias = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return pooled @ self.weight + self.bias


class BayesDenseHead(nn.Module):
    def __init__(self, pool_size: int, prior_std: float, generator):
        super().__init__()
        self.weight = MeanFieldTensor.from_mean(
            _xavier_init(pool_size, 1, generator), prior_std
        )
        self.bias = MeanFieldTensor.from_mean(
            torch.zeros(1, dtype=torch.float64), prior_std
        )

    def forward(self, pooled, generator=None, noise: dict | None = None):
        pinned = None
        if noise is not None:
            pinned = (noise["head.weight"], noise["head.bias"])
        out = bayesian_dense_forward(pooled, self.weight, self.bias, generator, pinned)
        return out[:, 0]

    def stochastic_blocks(self):
        return {"head.weight": self.weight, "head.bias": self.bias}


class GpHead(nn.Module):
    """Learned affine projection + tanh into [-1, 1]^d, followed by a
    whitened sparse GP with either free or gridded inducing points."""

    def __init__(self, pool_size: int, config: HeadConfig, kind: str, generator):
        super().__init__()
        self.kind = kind
        d = config.gp_input_dim
        self.proj_weight = nn.Parameter(_xavier_init(pool_size, d, generator))
        self.proj_bias = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.params = gp.RbfKernelParams(
            [config.lengthscale] * d, config.outputscale, noise_var=1e-2
        )
        if kind == "kiss_gp":
            self.grid = gp.InducingGrid.covering(
                [-1.0] * d, [1.0] * d, [config.grid_points_per_dim] * d
            )
            n_inducing = self.grid.n_points
            self.inducing_points = None
        else:
            axes = [
                torch.linspace(-1.0, 1.0, config.whitened_points_per_dim, dtype=torch.float64)
            ] * d
            mesh = torch.meshgrid(*axes, indexing="ij")
            z = torch.stack([m.reshape(-1) for m in mesh], dim=-1)
            self.register_buffer("z_points", z)
            self.grid = None
            n_inducing = z.shape[0]
        self.state = gp.WhitenedVariationalState(n_inducing)

    @property
    def inducing(self):
        return self.grid if self.grid is not None else self.z_points

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.tanh(pooled @ self.proj_weight + self.proj_bias)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.project(pooled)
        return gp.latent_posterior_predict(self.state, self.inducing, x, self.params)


@dataclass
class HeadOutput:
    kind: str  # "logit" or "gp"
    logits: torch.Tensor | None = None
    latent_mean: torch.Tensor | None = None
    latent_var: torch.Tensor | None = None


class DbgpModel(nn.Module):
    """Encoder plus classifier head for one model variant."""

    def __init__(
        self,
        vocabulary: Vocabulary,
        variant: ModelVariant,
        encoder_config: EncoderConfig,
        head_config: HeadConfig,
        seed: int = 0,
    ):
        super().__init__()
        self.variant = variant
        self.head_config = head_config
        self.encoder_model = EncoderModel(
            vocabulary,
            encoder_config,
            seed=seed,
            stochastic_embeddings=variant.embedding_stochastic,
            embedding_prior_std=head_config.embedding_prior_std,
        )
        generator = torch.Generator().manual_seed(seed + 1)
        pool = encoder_config.pool_size
        if variant.head == "dense":
            self.head = DenseHead(pool, generator)
        elif variant.head == "bayes_dense":
            self.head = BayesDenseHead(pool, head_config.output_prior_std, generator)
        else:
            self.head = GpHead(pool, head_config, variant.head, generator)
        self.eval()

    @property
    def vocabulary(self) -> Vocabulary:
        return self.encoder_model.vocabulary

    def stochastic_blocks(self) -> dict[str, MeanFieldTensor]:
        blocks = dict(self.encoder_model.embedding.stochastic_blocks())
        if isinstance(self.head, BayesDenseHead):
            blocks.update(self.head.stochastic_blocks())
        return blocks

    def draw_noise(self, generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
        """One eps per stochastic block; pass to forward to pin a
        weight realization across calls."""
        return {name: mf.draw_eps(generator) for name, mf in self.stochastic_blocks().items()}

    def forward(self, batch: Batch, generator=None, noise: dict | None = None) -> HeadOutput:
        pooled = self.encoder_model.forward_pooled(batch, generator, noise)
        if isinstance(self.head, BayesDenseHead):
            return HeadOutput("logit", logits=self.head(pooled, generator, noise))
        if isinstance(self.head, GpHead):
            mean, var = self.head(pooled)
            return HeadOutput("gp", latent_mean=mean, latent_var=var)
        return HeadOutput("logit", logits=self.head(pooled))


def composite_forward(
    model: DbgpModel, batch: Batch, generator=None, noise: dict | None = None
) -> HeadOutput:
    """One forward pass: embed (one stochastic realization per call) ->
    encode -> pool -> head. GP heads return latent (mean, var); dense
    heads return a logit per patient."""
    return model(batch, generator, noise)


def dbgp_elbo(
    batch: Batch,
    model: DbgpModel,
    n_train: int | None = None,
    generator=None,
    noise: dict | None = None,
    kl_weight: float = 1.0,
) -> torch.Tensor:
    """Combined objective: head bound minus weight-block KLs.

    The head term is the Bernoulli variational bound for GP heads (its
    own inducing KL scaled by batch/n_train) and the plain Bernoulli
    log-likelihood for dense heads. Every stochastic weight block
    contributes -KL(q||p) * batch/n_train, so summing minibatch
    objectives over an epoch reproduces the full-dataset bound.
    """
    out = model(batch, generator, noise)
    b = batch.labels.numel()
    n = float(n_train if n_train is not None else b)
    if out.kind == "gp":
        ell = gp.bernoulli_expected_loglik(batch.labels, out.latent_mean, out.latent_var).sum()
        head_state: gp.WhitenedVariationalState = model.head.state
        head_obj = ell - (b / n) * head_state.kl()
    else:
        signs = 2.0 * batch.labels - 1.0
        head_obj = nn.functional.logsigmoid(signs * out.logits).sum()
    kl_total = torch.zeros((), dtype=torch.float64)
    for mf in model.stochastic_blocks().values():
        kl_total = kl_total + mf.kl()
    return head_obj - kl_weight * (b / n) * kl_total


def _predict_scores(model: DbgpModel, batches: list[Batch]) -> np.ndarray:
    """Deterministic ranking scores at mean weights (GP latent mean)."""
    scores = []
    with torch.no_grad():
        for batch in batches:
            zero_noise = {
                name: torch.zeros(mf.shape, dtype=torch.float64)
                for name, mf in model.stochastic_blocks().items()
            }
            out = model(batch, noise=zero_noise)
            scores.append(out.logits if out.kind == "logit" else out.latent_mean)
    return torch.cat(scores).numpy()


def _clone_state(model: DbgpModel) -> dict:
    return copy.deepcopy(model.state_dict())


def initialize_from_pretrained(model: DbgpModel, pretrained: EncoderModel) -> None:
    """Copy pretrained deterministic weights into the model. Stochastic
    embedding tables take the pretrained table as variational mean; the
    classifier head is left at its random initialization."""
    try:
        with torch.no_grad():
            source = pretrained.embedding.tables
            for name, table in model.encoder_model.embedding.tables.items():
                weight = source[name].weight if hasattr(source[name], "weight") else source[name].mu
                if isinstance(table, MeanFieldTensor):
                    table.mu.copy_(weight)
                else:
                    table.weight.copy_(weight)
            model.encoder_model.encoder.load_state_dict(pretrained.encoder.state_dict())
            if model.encoder_model.pooler.weight.shape == pretrained.pooler.weight.shape:
                model.encoder_model.pooler.load_state_dict(pretrained.pooler.state_dict())
    except RuntimeError as exc:
        raise ConfigurationError(
            f"pretrained encoder does not match the model architecture: {exc}"
        ) from exc


def train(
    vocabulary: Vocabulary,
    records: list[PatientRecord],
    variant: ModelVariant | str,
    train_config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    head_config: HeadConfig | None = None,
    pretrained: EncoderModel | None = None,
) -> tuple[DbgpModel, list[dict]]:
    """Stochastic gradient ascent on the combined objective.

    Emits one metrics dict per epoch (objective, validation AUROC) and
    stops early when validation AUROC fails to improve for ``patience``
    epochs. A non-finite objective aborts the run and restores the last
    completed epoch's weights. Deterministic for a fixed seed.
    """
    if isinstance(variant, str):
        variant = ModelVariant.from_name(variant)
    if encoder_config is None:
        encoder_config = EncoderConfig.published_defaults(gp_head=variant.gp_head)
    if head_config is None:
        head_config = HeadConfig()
    torch.manual_seed(train_config.seed)
    model = DbgpModel(vocabulary, variant, encoder_config, head_config, seed=train_config.seed)
    if pretrained is not None:
        initialize_from_pretrained(model, pretrained)

    train_records = [r for r in records if r.split == "train"]
    val_records = [r for r in records if r.split == "validation"]
    if not train_records:
        raise ConfigurationError("dataset has no train split")
    n_train = len(train_records)
    metrics: list[dict] = []
    if train_config.epochs == 0:
        return model, metrics

    val_batches = [
        records_to_batch(val_records[i : i + 512])
        for i in range(0, len(val_records), 512)
    ]
    val_labels = np.array([r.label for r in val_records])

    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    shuffle_gen = torch.Generator().manual_seed(train_config.seed + 101)
    draw_gen = torch.Generator().manual_seed(train_config.seed + 202)
    best_state = _clone_state(model)
    best_auroc = -1.0
    stale = 0
    model.train()
    for epoch in range(train_config.epochs):
        snapshot = _clone_state(model)
        order = torch.randperm(n_train, generator=shuffle_gen).tolist()
        kl_weight = train_config.kl_weight(epoch)
        epoch_objective = 0.0
        diverged = False
        for start in range(0, n_train, train_config.batch_size):
            chunk = [train_records[i] for i in order[start : start + train_config.batch_size]]
            batch = records_to_batch(chunk)
            optimizer.zero_grad()
            objective = torch.zeros((), dtype=torch.float64)
            for _ in range(train_config.mc_train_samples):
                objective = objective + dbgp_elbo(
                    batch, model, n_train=n_train, generator=draw_gen, kl_weight=kl_weight
                )
            objective = objective / train_config.mc_train_samples
            if not torch.isfinite(objective):
                diverged = True
                break
            (-objective).backward()
            optimizer.step()
            epoch_objective += float(objective.detach())
        if diverged:
            model.load_state_dict(snapshot)
            metrics.append({"epoch": epoch, "objective": float("nan"), "val_auroc": float("nan"), "aborted": 1.0})
            break
        model.eval()
        scores = _predict_scores(model, val_batches) if val_records else np.zeros(0)
        try:
            val_auroc = auroc_score(val_labels, scores) if val_records else float("nan")
        except Exception:
            val_auroc = float("nan")
        model.train()
        metrics.append({"epoch": epoch, "objective": epoch_objective, "val_auroc": val_auroc})
        if np.isfinite(val_auroc) and val_auroc > best_auroc + 1e-12:
            best_auroc = val_auroc
            best_state = _clone_state(model)
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    if best_auroc >= 0:
        model.load_state_dict(best_state)
    model.eval()
    return model, metrics


def _patient_stream_key(seed: int, draw: int, patient_id: str) -> list[int]:
    return [seed, draw, zlib.crc32(patient_id.encode("utf-8"))]


def mc_predict(
    model: DbgpModel,
    records: list[PatientRecord],
    n_samples: int = 30,
    seed: int = 0,
    batch_size: int = 512,
) -> PredictiveSamples:
    """Monte Carlo predictive samples, one stochastic weight realization
    per draw shared across patients, plus one GP latent draw per patient
    per draw from a stream keyed by (seed, draw, patient_id). Results
    are therefore invariant to the order patients are supplied in."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    order = sorted(range(len(records)), key=lambda i: records[i].patient_id)
    sorted_records = [records[i] for i in order]
    batches = [
        records_to_batch(sorted_records[i : i + batch_size])
        for i in range(0, len(sorted_records), batch_size)
    ]
    n = len(records)
    probs_sorted = np.zeros((n, n_samples))
    model.eval()
    with torch.no_grad():
        for s in range(n_samples):
            weight_gen = torch.Generator().manual_seed(((seed + 1) * 1_000_003 + s) % 2**62)
            noise = model.draw_noise(weight_gen) or None
            row = 0
            for batch in batches:
                out = model(batch, noise=noise)
                if out.kind == "logit":
                    p = torch.sigmoid(out.logits).numpy()
                else:
                    mean = out.latent_mean.numpy()
                    var = out.latent_var.numpy()
                    p = np.empty_like(mean)
                    for j, pid in enumerate(batch.patient_ids):
                        rng = np.random.default_rng(_patient_stream_key(seed, s, pid))
                        p[j] = gp.bernoulli_predict(mean[j], var[j], 1, rng)[0, 0]
                probs_sorted[row : row + len(batch.patient_ids), s] = p
                row += len(batch.patient_ids)
    probs = np.zeros_like(probs_sorted)
    for sorted_pos, original_pos in enumerate(order):
        probs[original_pos] = probs_sorted[sorted_pos]
    return PredictiveSamples(
        probs=probs,
        labels=np.array([r.label for r in records]),
        patient_ids=[r.patient_id for r in records],
    )


def finite_difference_grad_check(
    model: DbgpModel,
    batch: Batch,
    block_subset: list[str] | None = None,
    step: float = 1e-4,
    coords_per_block: int = 3,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd gradients of the combined
    objective and central finite differences, over randomly selected
    coordinates of every trainable block. Runs with a pinned noise
    realization so the objective is a deterministic function of the
    parameters.

    Central differencing carries an irreducible cancellation noise of
    about |f| * 1e-15 / step; coordinates whose gradient sits below a
    safety factor times that floor cannot be measured by the method and
    are skipped, as in any finite-difference gradient checker.
    """
    model.eval()
    pin_gen = torch.Generator().manual_seed(seed)
    noise = model.draw_noise(pin_gen) or None

    def objective() -> torch.Tensor:
        return dbgp_elbo(batch, model, noise=noise)

    model.zero_grad()
    value = objective()
    value.backward()
    fd_noise_floor = abs(float(value.detach())) * 1e-15 / step
    measurable = max(1e-7, 3e4 * fd_noise_floor)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, param in model.named_parameters():
        if block_subset is not None and not any(name.startswith(b) for b in block_subset):
            continue
        grad = param.grad
        if grad is None:
            continue
        flat = param.data.view(-1)
        grad_flat = grad.reshape(-1)
        n_coords = min(coords_per_block, flat.numel())
        coords = rng.choice(flat.numel(), size=n_coords, replace=False)
        for c in coords:
            c = int(c)
            original = float(flat[c])
            with torch.no_grad():
                flat[c] = original + step
                plus = float(objective())
                flat[c] = original - step
                minus = float(objective())
                flat[c] = original
            fd = (plus - minus) / (2.0 * step)
            ad = float(grad_flat[c])
            scale = max(abs(fd), abs(ad))
            if scale < measurable:
                continue
            worst = max(worst, abs(fd - ad) / scale)
    return worst


# --------------------------------------------------------------------------
# Checkpointing
# --------------------------------------------------------------------------


def save_model_checkpoint(model: DbgpModel, path: str) -> None:
    torch.save(
        {
            "variant": model.variant.name,
            "encoder_config": asdict(model.encoder_model.config),
            "head_config": asdict(model.head_config),
            "code_tokens": list(model.vocabulary.code_tokens),
            "special_tokens": list(model.vocabulary.special_tokens),
            "state": model.state_dict(),
        },
        path,
    )


def load_model_checkpoint(path: str) -> DbgpModel:
    payload = torch.load(path, weights_only=False)
    vocabulary = Vocabulary(
        code_tokens=tuple(payload["code_tokens"]),
        special_tokens=tuple(payload["special_tokens"]),
    )
    model = DbgpModel(
        vocabulary,
        ModelVariant.from_name(payload["variant"]),
        EncoderConfig(**payload["encoder_config"]),
        HeadConfig(**payload["head_config"]),
    )
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint incompatible: {exc}") from exc
    model.eval()
    return model
