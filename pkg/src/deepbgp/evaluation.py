"""Uncertainty-aware evaluation of Monte Carlo predictive samples.

All analyses run on a PredictiveSamples bundle: an (n_patients, S)
matrix of sampled probabilities plus labels. Ranking metrics use the
per-patient mean probability; uncertainty analyses use the per-patient
standard deviation across samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .bayeslayers import MeanFieldTensor
from .errors import UndefinedMetricError
from .synthdata import Vocabulary

DEFAULT_CONFIDENCE_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.9999, 0.05), 10))


@dataclass
class PredictiveSamples:
    """Per-patient Monte Carlo samples of the predicted probability."""

    probs: np.ndarray  # (n_patients, S)
    labels: np.ndarray  # (n_patients,)
    patient_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or self.probs.shape[1] < 1:
            raise UndefinedMetricError("probs must be (n_patients, S) with S >= 1")
        if self.labels.shape[0] != self.probs.shape[0]:
            raise UndefinedMetricError("labels length != number of patients")
        if not self.patient_ids:
            self.patient_ids = [f"row{i}" for i in range(self.probs.shape[0])]

    @property
    def n_samples(self) -> int:
        return self.probs.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.probs.mean(axis=1)

    @property
    def std(self) -> np.ndarray:
        if self.probs.shape[1] == 1:
            return np.zeros(self.probs.shape[0])
        out = self.probs.std(axis=1, ddof=1)
        # constant rows are exactly deterministic, not 1e-16 of roundoff
        constant = np.ptp(self.probs, axis=1) == 0.0
        out[constant] = 0.0
        return out


def auroc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-statistic AUROC with midrank tie handling (Mann-Whitney)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC undefined: only one class present")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the precision-recall step curve, ties grouped by
    distinct score threshold."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("average precision undefined: only one class present")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    # ends of tie groups
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    group_ends = np.concatenate([boundary, [labels.size - 1]])
    cum_tp = np.cumsum(sorted_labels)[group_ends]
    counts = group_ends + 1
    precision = cum_tp / counts
    recall = cum_tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def ranking_metrics(samples: PredictiveSamples) -> tuple[float, float]:
    mean = samples.mean
    return auroc_score(samples.labels, mean), average_precision_score(samples.labels, mean)


@dataclass
class ConfidenceCurve:
    thresholds: tuple[float, ...]
    values: tuple[float | None, ...]  # None marks an undefined bin
    retained: tuple[int, ...]


def confidence_curves(
    samples: PredictiveSamples,
    thresholds: tuple[float, ...] = DEFAULT_CONFIDENCE_THRESHOLDS,
) -> tuple[ConfidenceCurve, ConfidenceCurve]:
    """Accuracy and AUROC over patients whose confidence max(p, 1-p)
    clears each threshold. Degenerate subsets yield None, not errors."""
    thresholds = tuple(float(t) for t in thresholds)
    if any(t < 0.5 or t >= 1.0 for t in thresholds):
        raise UndefinedMetricError("confidence thresholds must lie in [0.5, 1)")
    mean = samples.mean
    confidence = np.maximum(mean, 1.0 - mean)
    predictions = (mean > 0.5).astype(np.int64)
    acc_values, auroc_values, counts = [], [], []
    for tau in thresholds:
        keep = confidence >= tau
        counts.append(int(keep.sum()))
        if counts[-1] == 0:
            acc_values.append(None)
            auroc_values.append(None)
            continue
        acc_values.append(float((predictions[keep] == samples.labels[keep]).mean()))
        try:
            auroc_values.append(auroc_score(samples.labels[keep], mean[keep]))
        except UndefinedMetricError:
            auroc_values.append(None)
    return (
        ConfidenceCurve(thresholds, tuple(acc_values), tuple(counts)),
        ConfidenceCurve(thresholds, tuple(auroc_values), tuple(counts)),
    )


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_predicted: float | None
    positive_fraction: float | None


def calibration_curve(samples: PredictiveSamples, n_bins: int = 10) -> list[CalibrationBin]:
    """Equal-width reliability bins over the mean probabilities; a mean
    of exactly 1.0 lands in the last bin; empty bins are flagged."""
    if n_bins < 2:
        raise UndefinedMetricError("need at least 2 calibration bins")
    mean = samples.mean
    idx = np.minimum((mean * n_bins).astype(np.int64), n_bins - 1)
    bins = []
    for b in range(n_bins):
        keep = idx == b
        count = int(keep.sum())
        if count == 0:
            bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, 0, None, None))
        else:
            bins.append(
                CalibrationBin(
                    b / n_bins,
                    (b + 1) / n_bins,
                    count,
                    float(mean[keep].mean()),
                    float(samples.labels[keep].mean()),
                )
            )
    return bins


@dataclass
class GroupSummary:
    count: int
    minimum: float | None
    q1: float | None
    median: float | None
    q3: float | None
    maximum: float | None

    @classmethod
    def of(cls, values: np.ndarray) -> "GroupSummary":
        if values.size == 0:
            return cls(0, None, None, None, None, None)
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        return cls(
            int(values.size),
            float(values.min()),
            float(q1),
            float(med),
            float(q3),
            float(values.max()),
        )


@dataclass
class UncertaintySplit:
    """Per-patient stds grouped by (prediction at the 0.5 cut, label)."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    def summaries(self) -> dict[str, GroupSummary]:
        return {
            name: GroupSummary.of(getattr(self, name))
            for name in ("tp", "fp", "tn", "fn")
        }


def uncertainty_split(samples: PredictiveSamples) -> UncertaintySplit:
    mean = samples.mean
    std = samples.std
    pred = mean > 0.5
    label = samples.labels == 1
    return UncertaintySplit(
        tp=std[pred & label],
        fp=std[pred & ~label],
        tn=std[~pred & ~label],
        fn=std[~pred & label],
    )


def _gauss_kl(m_from: float, s_from: float, m_to: float, s_to: float) -> float:
    return (
        math.log(s_to / s_from)
        + (s_from**2 + (m_from - m_to) ** 2) / (2.0 * s_to**2)
        - 0.5
    )


def div_metric(split: UncertaintySplit, side: str = "positive") -> float:
    """KL divergence between Gaussians fitted to the std values of the
    false group and the true group.

    side="positive" compares FP against TP; side="negative" follows the
    relabeling convention where TN plays TP and FN plays FP.
    """
    if side == "positive":
        false_group, true_group, names = split.fp, split.tp, ("FP", "TP")
    elif side == "negative":
        false_group, true_group, names = split.fn, split.tn, ("FN", "TN")
    else:
        raise UndefinedMetricError(f"unknown side {side!r}")
    for values, name in ((false_group, names[0]), (true_group, names[1])):
        if values.size < 2:
            raise UndefinedMetricError(f"group {name} has fewer than 2 members")
        if values.std(ddof=1) <= 0:
            raise UndefinedMetricError(f"group {name} has zero std variance")
    return _gauss_kl(
        float(false_group.mean()),
        float(false_group.std(ddof=1)),
        float(true_group.mean()),
        float(true_group.std(ddof=1)),
    )


@dataclass
class EntropyRanking:
    """Code tokens ranked ascending by total embedding entropy."""

    tokens: list[str]
    entropies: np.ndarray
    degenerate: np.ndarray  # True where a zero scale forced -inf

    def rank_of(self, token: str) -> int:
        return self.tokens.index(token)

    def bottom_fraction(self, fraction: float) -> list[str]:
        k = max(1, int(math.floor(fraction * len(self.tokens))))
        return self.tokens[:k]


def embedding_entropy(block: MeanFieldTensor, vocabulary: Vocabulary) -> EntropyRanking:
    """Total diagonal-Gaussian entropy per code token:
    sum_d 0.5 ln(2 pi e s_d^2), ranked ascending (most certain first).

    Depends only on the variational scales, never on the means.
    """
    scales = block.scale.detach().numpy()
    lo, hi = vocabulary.code_id_range
    code_scales = scales[lo:hi]
    degenerate = (code_scales <= 0).any(axis=1)
    with np.errstate(divide="ignore"):
        entropies = 0.5 * np.log(2.0 * math.pi * math.e * code_scales**2).sum(axis=1)
    entropies[degenerate] = -np.inf
    order = np.argsort(entropies, kind="stable")
    return EntropyRanking(
        tokens=[vocabulary.code_tokens[i] for i in order],
        entropies=entropies[order],
        degenerate=degenerate[order],
    )


# --------------------------------------------------------------------------
# Predictions file: plain text, one patient per line.
# --------------------------------------------------------------------------


def write_predictions(path: str, samples: PredictiveSamples, header_lines: list[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        fh.write("patient_id\tlabel\t" + "\t".join(f"p{i}" for i in range(samples.n_samples)) + "\n")
        for pid, label, row in zip(samples.patient_ids, samples.labels, samples.probs):
            fh.write(pid + "\t" + str(int(label)) + "\t" + "\t".join(repr(float(p)) for p in row) + "\n")


def read_predictions(path: str) -> PredictiveSamples:
    from .errors import ParseError

    ids, labels, rows = [], [], []
    with open(path, encoding="utf-8") as fh:
        header = None
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split("\t")
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(parts)}", line=line_no
                )
            try:
                ids.append(parts[0])
                labels.append(int(parts[1]))
                rows.append([float(p) for p in parts[2:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from exc
    if header is None or not rows:
        raise ParseError("predictions file has no data rows", line=1)
    return PredictiveSamples(np.array(rows), np.array(labels), ids)
