"""Spectral-signature screening of a (possibly poisoned) training class.

Features of every example in the suspect class are centered at their mean
and projected onto the top singular direction of the centered matrix; the
squared projection is the outlier score. Examples above the percentile
threshold are flagged for removal. Ground-truth poison ids are used only to
count how many flagged examples were actually poisons, never for scoring.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nnet

POWER_ITER_TOL = 1e-9
POWER_ITER_MAX = 1000


@dataclass
class SpectralReport:
    scores: np.ndarray
    threshold_percentile: float
    flagged: list[int]
    n_poison_flagged: int
    n_clean_flagged: int
    n_examples: int
    n_poisons: int
    degenerate: bool = False

    def to_json(self, path=None) -> str:
        payload = asdict(self)
        payload["scores"] = [float(s) for s in self.scores]
        text = json.dumps(payload, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def scores_csv(self, path, poison_ids) -> Path:
        path = Path(path)
        flagged = set(self.flagged)
        poison_ids = set(int(i) for i in poison_ids)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "score", "is_poison_ground_truth", "flagged"])
            for i, s in enumerate(self.scores):
                writer.writerow(
                    [i, repr(float(s)), int(i in poison_ids), int(i in flagged)]
                )
        return path


def _top_singular_direction(centered: np.ndarray) -> tuple[np.ndarray, bool]:
    """Top right singular vector via power iteration on the D x D covariance."""
    cov = centered.T @ centered
    scale = float(np.abs(cov).max())
    if scale == 0.0:
        return np.zeros(centered.shape[1]), True
    cov = cov / scale
    v = np.random.default_rng(0).standard_normal(centered.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(POWER_ITER_MAX):
        nxt = cov @ v
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            # The start vector happened to sit in the null space; jitter.
            v = np.random.default_rng(1).standard_normal(centered.shape[1])
            v /= np.linalg.norm(v)
            continue
        nxt /= norm
        if min(np.linalg.norm(nxt - v), np.linalg.norm(nxt + v)) <= POWER_ITER_TOL:
            v = nxt
            break
        v = nxt
    return v, False


def spectral_scores(features: np.ndarray) -> np.ndarray:
    """Squared projection of each centered feature row onto the top direction.

    Invariant to translating all rows by a constant vector and to the sign
    of the singular direction; scaling all rows by a scales scores by a^2.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"need an N x D matrix with N >= 2, got shape {feats.shape}")
    if not np.isfinite(feats).all():
        raise ValueError("features contain non-finite values")
    centered = feats - feats.mean(axis=0)
    v, degenerate = _top_singular_direction(centered)
    if degenerate:
        return np.zeros(feats.shape[0])
    return (centered @ v) ** 2


def flag_count(n_examples: int, percentile: float) -> int:
    return math.ceil((1.0 - percentile / 100.0) * n_examples)


def run_defense(
    model: nnet.ModelBundle,
    images,
    poison_ids,
    percentile: float = 85.0,
    layer: str | None = None,
) -> SpectralReport:
    """Score the suspect class at the embedding layer and flag the top tail.

    Flags ceil((1 - percentile/100) * N) examples with the highest scores,
    ties resolved toward the smaller id.
    """
    if not (0.0 < percentile < 100.0):
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    images = list(images)
    feats = nnet.features(model, images, layer or model.embedding_layer)
    if feats.shape[0] < 2:
        raise ValueError("defense needs at least two examples")
    try:
        scores = spectral_scores(feats)
        degenerate = False
    except ValueError:
        raise
    if not scores.any():
        degenerate = True

    n = len(images)
    n_flag = flag_count(n, percentile)
    # Sort by descending score; numpy's stable sort keeps smaller ids first
    # among ties because we sort on the negated scores.
    order = np.argsort(-scores, kind="stable")
    flagged = [int(i) for i in order[:n_flag]]
    poison_ids = {int(i) for i in poison_ids}
    n_poison_flagged = sum(1 for i in flagged if i in poison_ids)
    return SpectralReport(
        scores=scores,
        threshold_percentile=float(percentile),
        flagged=flagged,
        n_poison_flagged=n_poison_flagged,
        n_clean_flagged=len(flagged) - n_poison_flagged,
        n_examples=n,
        n_poisons=len(poison_ids),
        degenerate=degenerate,
    )


def defense_comparison(
    hidden_trigger_arm: tuple,
    badnets_arm: tuple,
    percentile: float = 85.0,
    layer: str | None = None,
) -> tuple[SpectralReport, SpectralReport]:
    """Run the defense on two arms built over the same clean target examples.

    Each arm is (model, images, poison_ids). Arms must agree on the number
    of examples and of poisons so flag counts are directly comparable.
    """
    model_ht, images_ht, ids_ht = hidden_trigger_arm
    model_bn, images_bn, ids_bn = badnets_arm
    if len(images_ht) != len(images_bn):
        raise ValueError(
            f"arm sizes differ: {len(images_ht)} vs {len(images_bn)}"
        )
    if len(set(map(int, ids_ht))) != len(set(map(int, ids_bn))):
        raise ValueError("arms must contain the same number of poisons")
    report_ht = run_defense(model_ht, images_ht, ids_ht, percentile, layer)
    report_bn = run_defense(model_bn, images_bn, ids_bn, percentile, layer)
    return report_ht, report_bn
