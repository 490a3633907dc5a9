"""Verification back-end: cosine scoring, EER, minDCF, trial-list I/O.

The EER is taken on the ROC convex hull: operating points are swept over all
thresholds, the lower convex hull of (P_fa, P_miss) is formed, and the EER is
where the hull crosses P_fa == P_miss, linearly interpolated between the two
adjacent hull vertices.  All hull geometry is done in integer counts so the
result is the correctly-rounded value of an exact rational.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError


@dataclass(frozen=True)
class DcfConfig:
    p_target: float = 0.01
    c_fa: float = 1.0
    c_miss: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1 or self.c_fa <= 0 or self.c_miss <= 0:
            raise ContractError("DcfConfig needs 0 < p_target < 1 and positive costs")


def cosine_score(e1, e2) -> float:
    """Dot product of unit-norm embeddings, clipped into [-1, 1]."""
    return float(np.clip(np.dot(np.ravel(e1), np.ravel(e2)), -1.0, 1.0))


@dataclass
class OperatingPoints:
    """Error counts at every distinct threshold, from accept-all to reject-all."""

    thresholds: np.ndarray  # decision: accept iff score >= threshold
    misses: np.ndarray
    false_alarms: np.ndarray
    n_target: int
    n_nontarget: int


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ContractError("scores and labels differ in length")
    n_t = int(labels.sum())
    n_n = int(labels.size - n_t)
    if n_t == 0 or n_n == 0:
        raise ContractError("need at least one target and one nontarget trial")
    return scores, labels, n_t, n_n


def operating_points(scores, labels) -> OperatingPoints:
    scores, labels, n_t, n_n = _check(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    s, lab = scores[order], labels[order]
    distinct, start = np.unique(s, return_index=True)
    tgt_cum = np.concatenate([[0], np.cumsum(lab)])
    non_cum = np.concatenate([[0], np.cumsum(~lab)])
    # Threshold k sits just above the first k distinct score groups.
    cut = np.concatenate([start, [len(s)]])
    misses = tgt_cum[cut]
    false_alarms = n_n - non_cum[cut]
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    thresholds = np.concatenate([[-np.inf], mids, [np.inf]])
    return OperatingPoints(thresholds, misses.astype(np.int64), false_alarms.astype(np.int64), n_t, n_n)


def _cross(x1, y1, x2, y2) -> Fraction:
    # Where the segment (x1,y1)-(x2,y2) meets x == y.
    d1, d2 = x1 - y1, x2 - y2
    if d1 == d2:
        return Fraction(x1)
    return Fraction(d1 * x2 - d2 * x1, d1 - d2)


def _lower_hull(points):
    hull = []
    for p in points:
        while len(hull) >= 2:
            (ax, ay, _), (bx, by, _) = hull[-2], hull[-1]
            if (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer_with_threshold(scores, labels) -> tuple[float, float]:
    op = operating_points(scores, labels)
    n_t, n_n = op.n_target, op.n_nontarget
    # Scale P_fa and P_miss by n_t * n_n so every vertex is an integer pair.
    pts = sorted(
        (int(fa) * n_t, int(m) * n_n, k)
        for k, (fa, m) in enumerate(zip(op.false_alarms, op.misses))
    )
    hull = _lower_hull(pts)
    for (x1, y1, k1), (x2, y2, k2) in zip(hull, hull[1:]):
        if x1 - y1 <= 0 <= x2 - y2:
            eer = _cross(x1, y1, x2, y2) / (n_t * n_n)
            k = k1 if abs(x1 - y1) <= abs(x2 - y2) else k2
            return float(eer), float(op.thresholds[k])
    # A single hull vertex on the diagonal (only possible with one vertex).
    x, y, k = hull[0]
    return float(Fraction(x, n_t * n_n)), float(op.thresholds[k])


def compute_eer(scores, labels) -> float:
    return eer_with_threshold(scores, labels)[0]


def dcf_curve(scores, labels, cfg: DcfConfig = DcfConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Normalized detection cost at every threshold, and the thresholds."""
    op = operating_points(scores, labels)
    p_miss = op.misses / op.n_target
    p_fa = op.false_alarms / op.n_nontarget
    norm = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target))
    cost = (cfg.c_miss * cfg.p_target * p_miss + cfg.c_fa * (1 - cfg.p_target) * p_fa) / norm
    return cost, op.thresholds


def compute_min_dcf(scores, labels, cfg: DcfConfig = DcfConfig()) -> float:
    """Minimum normalized DCF, correctly rounded.

    Floats locate the near-minimal thresholds; those are re-evaluated exactly
    from the integer error counts.
    """
    op = operating_points(scores, labels)
    cost, _ = dcf_curve(scores, labels, cfg)
    near = np.flatnonzero(cost <= cost.min() * (1 + 1e-9) + 1e-300)
    p, cm, cf = Fraction(cfg.p_target), Fraction(cfg.c_miss), Fraction(cfg.c_fa)
    norm = min(cm * p, cf * (1 - p))
    exact = min(
        (cm * p * Fraction(int(op.misses[k]), op.n_target)
         + cf * (1 - p) * Fraction(int(op.false_alarms[k]), op.n_nontarget)) / norm
        for k in near
    )
    return float(exact)


# -- trial lists -------------------------------------------------------------------

@dataclass
class Trial:
    label: int
    enroll: str
    test: str


@dataclass
class TrialSet:
    trials: list[Trial]
    scores: np.ndarray | None = field(default=None)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)


def read_trials(path) -> TrialSet:
    """Parse ``label enroll_path test_path`` lines (label 1 = target, 0 = nontarget)."""
    trials = []
    offset = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(keepends=True), start=1):
        text = line.strip()
        if text and not text.startswith("#"):
            parts = text.split()
            if len(parts) < 3 or parts[0] not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: expected 'label enroll test' with label 0/1", offset)
            trials.append(Trial(int(parts[0]), parts[1], parts[2]))
        offset += len(line.encode())
    return TrialSet(trials)


def write_trials(path, trials: TrialSet, with_scores: bool = False) -> None:
    lines = []
    for i, t in enumerate(trials.trials):
        row = f"{t.label} {t.enroll} {t.test}"
        if with_scores:
            row += f" {trials.scores[i]:.10f}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def metrics_report(scores, labels, cfg: DcfConfig = DcfConfig()) -> dict:
    labels = np.asarray(labels).astype(bool)
    eer, thr = eer_with_threshold(scores, labels)
    return {
        "eer": eer,
        "min_dcf": compute_min_dcf(scores, labels, cfg),
        "n_target": int(labels.sum()),
        "n_nontarget": int((~labels).sum()),
        "threshold_at_eer": thr if np.isfinite(thr) else None,
    }


def write_metrics(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
