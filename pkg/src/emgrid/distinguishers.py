"""Streaming statistical engines: SNR, CPA, rank metrics, disclosure counts.

Both accumulators follow the same contract: update with traces in any order,
optionally in parallel shards, then merge shards and finalize. Merging is the
parallelism mechanism; finalization is pure. All running sums are float64;
hypothesis values stay small integers so the closed-form Pearson sums remain
exactly representable.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AnalysisError

EPS_PROB = 1e-30       # probability clamp before log
_REL_DEGENERATE = 1e-10  # variance below this relative level counts as zero


class SnrAccumulator:
    """Per-class, per-sample Welford accumulator for the class-mean SNR.

    SNR_t = Var_c(mu_{c,t}) / mean_c(sigma^2_{c,t}): population variance of
    the class means over the mean unbiased within-class variance. Classes
    with fewer than 2 traces are excluded from both statistics.
    """

    def __init__(self, num_classes: int, m: int):
        if num_classes < 2 or m < 1:
            raise AnalysisError("need >= 2 classes and >= 1 sample")
        self.num_classes = num_classes
        self.m = m
        self.counts = np.zeros(num_classes, dtype=np.int64)
        self.mean = np.zeros((num_classes, m), dtype=np.float64)
        self.m2 = np.zeros((num_classes, m), dtype=np.float64)

    def update(self, class_label: int, samples: np.ndarray) -> "SnrAccumulator":
        if not 0 <= class_label < self.num_classes:
            raise AnalysisError(f"class label {class_label} out of range")
        x = np.asarray(samples, dtype=np.float64)
        if x.shape != (self.m,):
            raise AnalysisError(f"samples must have length {self.m}")
        c = class_label
        self.counts[c] += 1
        delta = x - self.mean[c]
        self.mean[c] += delta / self.counts[c]
        self.m2[c] += delta * (x - self.mean[c])
        return self

    def update_batch(self, class_labels: np.ndarray, samples: np.ndarray) -> "SnrAccumulator":
        """Consume a (b,) labels / (b, m) samples batch; equivalent to b
        single updates up to float tolerance, but grouped per class."""
        labels = np.asarray(class_labels)
        x = np.asarray(samples, dtype=np.float64)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= self.num_classes:
            raise AnalysisError("class label out of range")
        if x.ndim != 2 or x.shape != (len(labels), self.m):
            raise AnalysisError("samples must be (len(labels), m)")
        order = np.argsort(labels, kind="stable")
        sorted_labels = labels[order]
        classes, starts = np.unique(sorted_labels, return_index=True)
        bounds = np.append(starts, len(sorted_labels))
        for idx, c in enumerate(classes):
            rows = x[order[bounds[idx]:bounds[idx + 1]]]
            nb = rows.shape[0]
            mb = rows.mean(axis=0)
            m2b = ((rows - mb) ** 2).sum(axis=0)
            self._merge_class(int(c), nb, mb, m2b)
        return self

    def _merge_class(self, c: int, nb: int, mb: np.ndarray, m2b: np.ndarray):
        na = int(self.counts[c])
        if na == 0:
            self.counts[c] = nb
            self.mean[c] = mb
            self.m2[c] = m2b
            return
        tot = na + nb
        delta = mb - self.mean[c]
        self.mean[c] += delta * (nb / tot)
        self.m2[c] += m2b + delta * delta * (na * nb / tot)
        self.counts[c] = tot

    def merge(self, other: "SnrAccumulator") -> "SnrAccumulator":
        if (other.num_classes, other.m) != (self.num_classes, self.m):
            raise AnalysisError("cannot merge accumulators of different shapes")
        for c in np.nonzero(other.counts)[0]:
            self._merge_class(int(c), int(other.counts[c]), other.mean[c], other.m2[c])
        return self

    def finalize(self) -> np.ndarray:
        """Per-sample SNR vector; +inf where the noise floor is exactly zero
        but the class means still differ."""
        usable = self.counts >= 2
        k = int(usable.sum())
        if k < 2:
            raise AnalysisError("SNR needs at least 2 classes with >= 2 traces each")
        means = self.mean[usable]
        between = means.var(axis=0)  # population variance over class means
        within = (self.m2[usable] / (self.counts[usable, None] - 1)).mean(axis=0)
        snr = np.zeros(self.m, dtype=np.float64)
        ok = within > 0
        snr[ok] = between[ok] / within[ok]
        snr[~ok & (between > 0)] = np.inf
        return snr


@dataclass
class CpaResult:
    corr: np.ndarray                  # (256, m) correlations, zeros where degenerate
    degenerate_hypotheses: np.ndarray  # (256,) bool, constant hypothesis rows
    degenerate_samples: np.ndarray     # (m,) bool, constant sample columns


class CpaAccumulator:
    """Closed-form streaming Pearson sums for 256 hypotheses over m samples.

    Memory is O(256 * m) regardless of trace count:
        r = (n*Shx - Sh*Sx) / sqrt((n*Sh2 - Sh^2) * (n*Sx2 - Sx^2))
    """

    def __init__(self, m: int, num_hypotheses: int = 256):
        if m < 1:
            raise AnalysisError("need >= 1 sample")
        self.m = m
        self.num_hypotheses = num_hypotheses
        self.n = 0
        self.sum_h = np.zeros(num_hypotheses, dtype=np.float64)
        self.sum_h2 = np.zeros(num_hypotheses, dtype=np.float64)
        self.sum_x = np.zeros(m, dtype=np.float64)
        self.sum_x2 = np.zeros(m, dtype=np.float64)
        self.sum_hx = np.zeros((num_hypotheses, m), dtype=np.float64)

    def update(self, hypotheses: np.ndarray, samples: np.ndarray) -> "CpaAccumulator":
        h = np.asarray(hypotheses, dtype=np.float64)
        x = np.asarray(samples, dtype=np.float64)
        if h.shape != (self.num_hypotheses,) or x.shape != (self.m,):
            raise AnalysisError("hypothesis/sample lengths do not match accumulator")
        self.n += 1
        self.sum_h += h
        self.sum_h2 += h * h
        self.sum_x += x
        self.sum_x2 += x * x
        self.sum_hx += np.outer(h, x)
        return self

    def update_batch(self, hypotheses: np.ndarray, samples: np.ndarray) -> "CpaAccumulator":
        """hypotheses (num_hypotheses, b), samples (b, m); one matmul per batch."""
        H = np.asarray(hypotheses, dtype=np.float64)
        X = np.asarray(samples, dtype=np.float64)
        if H.ndim != 2 or X.ndim != 2 or H.shape[0] != self.num_hypotheses \
                or H.shape[1] != X.shape[0] or X.shape[1] != self.m:
            raise AnalysisError("batch shapes do not match accumulator")
        self.n += X.shape[0]
        self.sum_h += H.sum(axis=1)
        self.sum_h2 += (H * H).sum(axis=1)
        self.sum_x += X.sum(axis=0)
        self.sum_x2 += (X * X).sum(axis=0)
        self.sum_hx += H @ X
        return self

    def merge(self, other: "CpaAccumulator") -> "CpaAccumulator":
        if (other.m, other.num_hypotheses) != (self.m, self.num_hypotheses):
            raise AnalysisError("cannot merge accumulators of different shapes")
        self.n += other.n
        self.sum_h += other.sum_h
        self.sum_h2 += other.sum_h2
        self.sum_x += other.sum_x
        self.sum_x2 += other.sum_x2
        self.sum_hx += other.sum_hx
        return self

    def finalize(self) -> CpaResult:
        if self.n < 2:
            raise AnalysisError(f"correlation undefined for n={self.n} traces")
        n = float(self.n)
        var_h = n * self.sum_h2 - self.sum_h ** 2
        var_x = n * self.sum_x2 - self.sum_x ** 2
        # Catastrophic cancellation can leave tiny non-zero residue on a
        # constant column; judge degeneracy relative to the raw magnitude.
        deg_h = var_h <= _REL_DEGENERATE * np.maximum(n * self.sum_h2, 1e-300)
        deg_x = var_x <= _REL_DEGENERATE * np.maximum(n * self.sum_x2, 1e-300)
        num = n * self.sum_hx - np.outer(self.sum_h, self.sum_x)
        den = np.sqrt(np.outer(np.where(deg_h, 1.0, var_h),
                               np.where(deg_x, 1.0, var_x)))
        corr = num / den
        corr[deg_h, :] = 0.0
        corr[:, deg_x] = 0.0
        return CpaResult(corr, deg_h, deg_x)


def cpa_scores(corr: np.ndarray) -> np.ndarray:
    """Per-hypothesis score: max over samples of |r|. Larger is more likely."""
    return np.abs(corr).max(axis=1)


def loglik_aggregate(prob_vectors) -> np.ndarray:
    """Sum log p-hat(s_j | t_i) over traces, clamping probabilities at 1e-30.

    Accepts an iterable of length-256 probability vectors or an (n, 256)
    array. Each vector must be non-negative and sum to 1 within 1e-6.
    """
    scores = np.zeros(256, dtype=np.float64)
    seen = False
    for p in prob_vectors:
        rows = np.atleast_2d(np.asarray(p, dtype=np.float64))
        if rows.shape[1] != 256:
            raise AnalysisError("probability vector must have 256 entries")
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-6):
            raise AnalysisError("malformed probability vector")
        scores += np.log(np.maximum(rows, EPS_PROB)).sum(axis=0)
        seen = True
    if not seen:
        raise AnalysisError("empty probability stream")
    return scores


def rank_of(scores: np.ndarray, correct: int) -> float:
    """Mid-rank of the correct candidate: strictly-greater count plus half
    the ties. All-equal scores give exactly 127.5, the random baseline."""
    s = np.asarray(scores, dtype=np.float64)
    sc = s[correct]
    greater = int(np.count_nonzero(s > sc))
    equal_others = int(np.count_nonzero(s == sc)) - 1
    return greater + equal_others / 2.0


def mean_rank(scored_stream) -> float:
    """Arithmetic mean of rank_of over a stream of (scores, correct) pairs."""
    total = 0.0
    count = 0
    for scores, correct in scored_stream:
        total += rank_of(scores, correct)
        count += 1
    if count == 0:
        raise AnalysisError("mean_rank over an empty stream")
    return total / count


@dataclass
class DisclosureResult:
    """Traces needed until each byte (and the whole key) first ranks strictly
    first; math.inf marks bytes never disclosed within the budget."""

    per_byte: list
    full_key: float
    checkpoints: list = field(default_factory=list)

    @property
    def disclosed(self) -> bool:
        return math.isfinite(self.full_key)


def traces_to_disclosure(batches, feed, compute_scores, correct_bytes,
                         checkpoint_interval: int = 1000,
                         budget=None) -> DisclosureResult:
    """Generic cumulative-disclosure loop.

    batches yields chunks of traces; feed(chunk) consumes one chunk and
    returns how many traces it contained; compute_scores() returns the
    current (16, 256) score matrix. After every checkpoint_interval traces
    (and at end of stream) all 16 byte ranks are evaluated. A byte counts as
    disclosed only while strictly ranked first (ties fail). full_key is the
    first checkpoint where all 16 bytes rank first simultaneously; inf if the
    budget (or the stream) runs out first.
    """
    if checkpoint_interval < 1:
        raise AnalysisError("checkpoint_interval must be >= 1")
    correct = [int(b) for b in correct_bytes]
    if len(correct) != 16:
        raise AnalysisError("need 16 correct byte values")
    per_byte = [math.inf] * 16
    full_key = math.inf
    checkpoints = []
    processed = 0
    next_cp = checkpoint_interval

    def evaluate():
        nonlocal full_key
        checkpoints.append(processed)
        scores = np.asarray(compute_scores(), dtype=np.float64)
        if scores.shape != (16, 256):
            raise AnalysisError("compute_scores must return a (16, 256) matrix")
        all_first = True
        for b in range(16):
            if rank_of(scores[b], correct[b]) == 0.0:
                if per_byte[b] == math.inf:
                    per_byte[b] = processed
            else:
                all_first = False
        if all_first and full_key == math.inf:
            full_key = processed

    for chunk in batches:
        processed += int(feed(chunk))
        if processed >= next_cp:
            evaluate()
            next_cp = (processed // checkpoint_interval + 1) * checkpoint_interval
        if full_key != math.inf:
            break
        if budget is not None and processed >= budget:
            break
    # End of stream between checkpoints: evaluate on whatever arrived.
    if full_key == math.inf and processed >= 2 \
            and (not checkpoints or checkpoints[-1] != processed):
        evaluate()
    return DisclosureResult(per_byte, full_key, checkpoints)
