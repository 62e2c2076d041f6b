"""Per-rank metrics with unseen-class filtering, paired t-tests, a k-mer
best-hit baseline classifier, inference prediction and timing."""
from __future__ import annotations

import json
import math
import time
from collections import Counter
from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from . import ssm
from .errors import ConfigError, ContractError, DegenerateVarianceError
from .records import BarcodeRecord, N_RANKS, RANKS, TaxonomicLabel
from .taxonomy import Taxonomy, lift_species_probs
from .tokenizers import Vocab, encode
from .train import pad_batch


@dataclass
class RankMetrics:
    micro_accuracy: float
    macro_precision: float
    macro_recall: float
    support: int
    excluded_unseen: int


@dataclass
class MetricsReport:
    per_rank: list[RankMetrics]
    ms_per_sample: float | None = None

    def to_json(self) -> str:
        payload = {
            "per_rank": {RANKS[r]: asdict(m) for r, m in enumerate(self.per_rank)},
            "ms_per_sample": self.ms_per_sample,
        }
        return json.dumps(payload, indent=2)

    def to_tsv(self) -> str:
        lines = ["rank\tmicro_accuracy\tmacro_precision\tmacro_recall\tsupport\texcluded_unseen"]
        for r, m in enumerate(self.per_rank):
            lines.append(
                f"{RANKS[r]}\t{m.micro_accuracy:.6f}\t{m.macro_precision:.6f}"
                f"\t{m.macro_recall:.6f}\t{m.support}\t{m.excluded_unseen}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value_two_sided: float


def evaluate(
    predictions: np.ndarray,
    labels: list[TaxonomicLabel],
    taxonomy_train: Taxonomy,
) -> MetricsReport:
    """Per-rank micro accuracy and macro precision/recall.

    `predictions` is an (N, 7) array of class indices into the training
    taxonomy. At each rank, records unlabelled there are skipped and records
    whose true class never occurred in training are excluded (tallied in
    excluded_unseen). Macro averages run over the classes present in the
    surviving ground truth; a class predicted zero times contributes precision
    zero.
    """
    predictions = np.asarray(predictions)
    if predictions.shape != (len(labels), N_RANKS):
        raise ContractError(
            f"predictions shape {predictions.shape} != ({len(labels)}, {N_RANKS})"
        )
    report = []
    for r in range(N_RANKS):
        truths = []
        preds = []
        excluded = 0
        for i, label in enumerate(labels):
            name = label.ranks[r]
            if name is None:
                continue
            idx = taxonomy_train.index_per_rank[r].get(name)
            if idx is None:
                excluded += 1
                continue
            truths.append(idx)
            preds.append(int(predictions[i, r]))
        support = len(truths)
        if support == 0:
            report.append(RankMetrics(0.0, 0.0, 0.0, 0, excluded))
            continue
        truths_arr = np.asarray(truths)
        preds_arr = np.asarray(preds)
        correct = int((truths_arr == preds_arr).sum())
        classes = sorted(set(truths))
        precisions = []
        recalls = []
        for c in classes:
            tp = int(((preds_arr == c) & (truths_arr == c)).sum())
            pred_pos = int((preds_arr == c).sum())
            true_pos = int((truths_arr == c).sum())
            precisions.append(tp / pred_pos if pred_pos else 0.0)
            recalls.append(tp / true_pos)
        report.append(
            RankMetrics(
                micro_accuracy=correct / support,
                macro_precision=float(np.mean(precisions)),
                macro_recall=float(np.mean(recalls)),
                support=support,
                excluded_unseen=excluded,
            )
        )
    return MetricsReport(report)


# ---------------------------------------------------------------------------
# paired t-test on top of a continued-fraction incomplete beta


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ConfigError(f"x must be in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    front = math.exp(
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t with df degrees of freedom."""
    if df < 1:
        raise ConfigError(f"df must be >= 1, got {df}")
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test; raises on zero variance of the differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"paired samples must be equal-length vectors, got {a.shape}, {b.shape}")
    n = a.size
    if n < 2:
        raise ConfigError(f"need at least 2 pairs, got {n}")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("paired differences have zero variance")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return TTestResult(t, n - 1, student_t_sf_two_sided(t, n - 1))


# ---------------------------------------------------------------------------
# k-mer best-hit baseline


@dataclass
class BestHitIndex:
    k: int
    fingerprints: list[Counter]
    labels: list[TaxonomicLabel]
    low_confidence_threshold: float = 0.1


def _kmer_multiset(sequence: str, k: int) -> Counter:
    return Counter(sequence[i:i + k] for i in range(len(sequence) - k + 1))


def besthit_train(records: list[BarcodeRecord], k: int = 8) -> BestHitIndex:
    """Store one k-mer multiset fingerprint per training sequence."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return BestHitIndex(
        k=k,
        fingerprints=[_kmer_multiset(r.sequence, k) for r in records],
        labels=[r.label for r in records],
    )


def besthit_similarity(index: BestHitIndex, sequence: str) -> tuple[int, float]:
    """(best index, containment similarity |Q n S| / |Q|); ties keep the first index."""
    if len(sequence) < index.k:
        raise ConfigError(
            f"query of length {len(sequence)} is shorter than k = {index.k}"
        )
    query = _kmer_multiset(sequence, index.k)
    q_size = sum(query.values())
    best_i, best_sim = 0, -1.0
    for i, fp in enumerate(index.fingerprints):
        inter = sum(min(cnt, fp[kmer]) for kmer, cnt in query.items())
        sim = inter / q_size
        if sim > best_sim:
            best_i, best_sim = i, sim
    return best_i, best_sim


def besthit_classify(index: BestHitIndex, sequence: str) -> TaxonomicLabel:
    """Full label of the most k-mer-similar training sequence."""
    best_i, _ = besthit_similarity(index, sequence)
    return index.labels[best_i]


# ---------------------------------------------------------------------------
# model inference


def predict_dataset(
    state: ssm.ModelState,
    vocab: Vocab,
    taxonomy: Taxonomy,
    records: list[BarcodeRecord],
    batch_size: int = 32,
    lift_mode: str = "sum",
) -> tuple[np.ndarray, np.ndarray]:
    """Per-rank predicted class indices and confidences, shape (N, 7) each.

    Multi-head models argmax each head; single-head models predict species and
    derive the other ranks with `lift_mode`.
    """
    n = len(records)
    preds = np.zeros((n, N_RANKS), dtype=np.int64)
    confs = np.zeros((n, N_RANKS), dtype=np.float64)
    tokens = [encode(vocab, r.sequence, state.config.max_len).ids for r in records]
    with nc.no_grad():
        for start in range(0, n, batch_size):
            chunk = tokens[start:start + batch_size]
            ids, mask = pad_batch(chunk)
            hidden = ssm.model_forward(state, ids, mask)
            logits = ssm.classify(state, hidden, mask)
            if state.config.head_mode == "multi":
                for r, logit in enumerate(logits):
                    probs = nc.softmax(logit, axis=-1).data
                    preds[start:start + len(chunk), r] = probs.argmax(axis=-1)
                    confs[start:start + len(chunk), r] = probs.max(axis=-1)
            else:
                probs = nc.softmax(logits[0], axis=-1).data.astype(np.float64)
                probs /= probs.sum(axis=-1, keepdims=True)
                for i in range(len(chunk)):
                    lifted = lift_species_probs(taxonomy, probs[i], mode=lift_mode)
                    for r in range(N_RANKS):
                        preds[start + i, r] = int(lifted[r].argmax())
                        confs[start + i, r] = float(lifted[r].max())
    return preds, confs


@dataclass
class TimingResult:
    ms_per_sample: float
    samples_timed: int
    batches_timed: int


def time_inference(
    state: ssm.ModelState,
    vocab: Vocab,
    records: list[BarcodeRecord],
    batch_size: int = 32,
) -> TimingResult:
    """Wall-clock per-sample forward cost; the first (warm-up) batch is excluded."""
    tokens = [encode(vocab, r.sequence, state.config.max_len).ids for r in records]
    batches = [tokens[s:s + batch_size] for s in range(0, len(tokens), batch_size)]
    if len(batches) < 2:
        raise ConfigError("need at least two batches so a warm-up batch can be excluded")
    timed_samples = 0
    elapsed = 0.0
    with nc.no_grad():
        for i, chunk in enumerate(batches):
            ids, mask = pad_batch(chunk)
            t0 = time.perf_counter()
            ssm.model_forward(state, ids, mask)
            dt = time.perf_counter() - t0
            if i > 0:
                elapsed += dt
                timed_samples += len(chunk)
    return TimingResult(1000.0 * elapsed / timed_samples, timed_samples, len(batches) - 1)
