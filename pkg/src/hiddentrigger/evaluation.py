"""Attack evaluation: clean vs. patched accuracy, baselines, 2-D projections.

A successful attack keeps clean validation accuracy high while patched
source images (trigger pasted at evaluation time) flip to the target
class. Binary and multi-class protocols are supported; placements are
pre-generated serially from a caller-seeded stream so reports are
deterministic and can be shared across models for paired comparisons.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nnet
from .data import ImageTensor, DatasetSplit, stack_pixels, labels_of
from .trigger import Trigger, MaskPlacement, apply_trigger, corner_placement, random_placement

SOURCE_LABEL = 0
TARGET_LABEL = 1


@dataclass
class PlacementOutcome:
    image_index: int
    top: int
    left: int
    true_category: int
    predicted: int
    hit_target: bool


@dataclass
class AttackReport:
    clean_accuracy: float
    patched_source_accuracy: float
    attack_success_rate: float
    per_placement: list[PlacementOutcome]
    n_images: int
    n_placements: int
    setting: str
    extras: dict = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        payload = asdict(self)
        text = json.dumps(payload, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @staticmethod
    def from_json(text_or_path) -> "AttackReport":
        p = Path(str(text_or_path))
        text = p.read_text() if p.exists() else str(text_or_path)
        payload = json.loads(text)
        payload["per_placement"] = [
            PlacementOutcome(**po) for po in payload["per_placement"]
        ]
        return AttackReport(**payload)


def _make_placements(
    n_images: int,
    n_placements: int,
    dims,
    patch_size: int,
    mode: str,
    rng: np.random.Generator,
) -> list[list[MaskPlacement]]:
    """One placement list per image, drawn serially so runs are reproducible."""
    if n_placements < 1:
        raise ValueError("n_placements must be positive")
    if mode == "corner":
        place = corner_placement(dims, patch_size)
        return [[place] * n_placements for _ in range(n_images)]
    if mode == "random":
        return [
            [random_placement(dims, patch_size, rng) for _ in range(n_placements)]
            for _ in range(n_images)
        ]
    raise ValueError(f"unknown placement mode {mode!r}")


def _patched_predictions(model, images, trig, placements):
    batch = []
    meta = []
    for i, (img, places) in enumerate(zip(images, placements)):
        for pl in places:
            batch.append(apply_trigger(img, trig, pl).pixels)
            meta.append((i, pl))
    preds, _ = nnet.predict(model, np.stack(batch))
    return preds, meta


def evaluate_binary(
    model: nnet.ModelBundle,
    source_test: list[ImageTensor],
    target_test: list[ImageTensor],
    trig: Trigger,
    n_placements: int,
    rng: np.random.Generator,
    placement_mode: str = "random",
    placements: list[list[MaskPlacement]] | None = None,
) -> AttackReport:
    """Binary protocol: clean accuracy on both classes, patched on source only.

    The binary head maps source to 0 and target to 1. Patched-source
    accuracy counts predictions that stay at the source label; the attack
    success rate is its exact complement.
    """
    if not source_test or not target_test:
        raise ValueError("source and target test sets must be non-empty")
    if model.num_classes != 2:
        raise ValueError(f"binary evaluation needs a 2-class head, got {model.num_classes}")

    clean_preds, _ = nnet.predict(
        model, stack_pixels(list(source_test) + list(target_test))
    )
    clean_truth = np.array(
        [SOURCE_LABEL] * len(source_test) + [TARGET_LABEL] * len(target_test)
    )
    clean_acc = float((clean_preds == clean_truth).mean())

    dims = source_test[0].pixels.shape[:2]
    if placements is None:
        placements = _make_placements(
            len(source_test), n_placements, dims, trig.patch_size, placement_mode, rng
        )
    preds, meta = _patched_predictions(model, source_test, trig, placements)
    outcomes = [
        PlacementOutcome(
            image_index=i,
            top=pl.top,
            left=pl.left,
            true_category=SOURCE_LABEL,
            predicted=int(p),
            hit_target=bool(p == TARGET_LABEL),
        )
        for (i, pl), p in zip(meta, preds)
    ]
    patched_acc = float((preds == SOURCE_LABEL).mean())
    return AttackReport(
        clean_accuracy=clean_acc,
        patched_source_accuracy=patched_acc,
        # Predictions are exactly one of {source, target} here, so the
        # success rate is the exact complement.
        attack_success_rate=1.0 - patched_acc,
        per_placement=outcomes,
        n_images=len(source_test),
        n_placements=len(placements[0]) if placements else n_placements,
        setting="binary",
    )


def evaluate_multiclass(
    model: nnet.ModelBundle,
    splits: dict[int, DatasetSplit],
    trig: Trigger,
    mode: str,
    source_category: int,
    target_category: int,
    n_placements: int,
    rng: np.random.Generator,
    placement_mode: str = "random",
) -> AttackReport:
    """Multi-class protocol with category ids as head indices.

    single_source patches only the designated source class; multi_source
    patches an equal number of test images from every class except the
    target. Success means the patched image is predicted as the target.
    """
    if mode not in ("single_source", "multi_source"):
        raise ValueError(f"unknown multiclass mode {mode!r}")
    if mode == "multi_source" and model.num_classes < 3:
        raise ValueError("multi_source evaluation needs at least 3 classes")

    all_test = [im for sp in splits.values() for im in sp.test]
    clean_preds, _ = nnet.predict(model, stack_pixels(all_test))
    clean_acc = float((clean_preds == labels_of(all_test)).mean())

    if mode == "single_source":
        victims = list(splits[source_category].test)
    else:
        categories = sorted(c for c in splits if c != target_category)
        n_per = min(len(splits[c].test) for c in categories)
        victims = []
        for c in categories:
            pool = splits[c].test
            idx = rng.choice(len(pool), size=n_per, replace=False)
            victims.extend(pool[int(i)] for i in idx)
    if not victims:
        raise ValueError("no images to patch")

    dims = victims[0].pixels.shape[:2]
    placements = _make_placements(
        len(victims), n_placements, dims, trig.patch_size, placement_mode, rng
    )
    preds, meta = _patched_predictions(model, victims, trig, placements)
    truths = labels_of(victims)
    outcomes = [
        PlacementOutcome(
            image_index=i,
            top=pl.top,
            left=pl.left,
            true_category=int(truths[i]),
            predicted=int(p),
            hit_target=bool(p == target_category),
        )
        for (i, pl), p in zip(meta, preds)
    ]
    truth_rep = np.array([truths[i] for i, _ in meta])
    return AttackReport(
        clean_accuracy=clean_acc,
        patched_source_accuracy=float((preds == truth_rep).mean()),
        attack_success_rate=float((preds == target_category).mean()),
        per_placement=outcomes,
        n_images=len(victims),
        n_placements=n_placements,
        setting=f"multiclass_{mode}",
        extras={"source_category": source_category, "target_category": target_category},
    )


def compare_badnets(
    model_ours: nnet.ModelBundle,
    model_badnets: nnet.ModelBundle,
    source_test: list[ImageTensor],
    target_test: list[ImageTensor],
    trig: Trigger,
    n_placements: int,
    rng: np.random.Generator,
    placement_mode: str = "random",
) -> tuple[AttackReport, AttackReport]:
    """Evaluate both victims on the identical patched evaluation set."""
    if model_ours.num_classes != model_badnets.num_classes:
        raise ValueError("paired comparison requires heads of the same width")
    dims = source_test[0].pixels.shape[:2]
    placements = _make_placements(
        len(source_test), n_placements, dims, trig.patch_size, placement_mode, rng
    )
    ours = evaluate_binary(
        model_ours, source_test, target_test, trig, n_placements, rng,
        placement_mode, placements=placements,
    )
    theirs = evaluate_binary(
        model_badnets, source_test, target_test, trig, n_placements, rng,
        placement_mode, placements=placements,
    )
    ours.extras["attack"] = "hidden_trigger"
    theirs.extras["attack"] = "badnets"
    return ours, theirs


def injection_rate_sweep(
    model: nnet.ModelBundle,
    source_split: DatasetSplit,
    target_split: DatasetSplit,
    pool,
    trig: Trigger,
    finetune_cfg: nnet.FinetuneConfig,
    n_poison_list,
    n_placements: int,
    eval_seed: int,
    placement_mode: str = "random",
) -> list[tuple[int, AttackReport]]:
    """One finetune + evaluation cycle per poison count, shared seeds throughout.

    n_poison = 0 trains the clean control. Poisons are taken from the pool
    by lowest loss; every cycle reuses the same finetune seed and the same
    evaluation placement stream.
    """
    from .poison import select_lowest_loss

    clean = [
        ImageTensor(im.pixels, SOURCE_LABEL) for im in source_split.finetune
    ] + [ImageTensor(im.pixels, TARGET_LABEL) for im in target_split.finetune]
    results = []
    for n in n_poison_list:
        n = int(n)
        train = list(clean)
        if n > 0:
            chosen = select_lowest_loss(pool, n)
            train += [ImageTensor(p.pixels, TARGET_LABEL) for p in chosen.poisons]
        victim = nnet.finetune(model, train, finetune_cfg)
        report = evaluate_binary(
            victim,
            source_split.test,
            target_split.test,
            trig,
            n_placements,
            np.random.default_rng(eval_seed),
            placement_mode,
        )
        report.extras["n_poison"] = n
        results.append((n, report))
    return results


@dataclass
class Projection2D:
    """Feature cloud projected onto the classifier direction and its orthogonal.

    x is the component along the (unit-normalized) boundary normal w; y is
    along the class-center difference projected orthogonal to w. points
    holds (x, y, group) triples.
    """

    w: np.ndarray
    u_perp: np.ndarray
    points: list[tuple[float, float, str]]
    used_fallback_axis: bool = False
    boundary_offset: float | None = None

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "group"])
            for x, y, g in self.points:
                writer.writerow([repr(float(x)), repr(float(y)), g])
        return path


def binary_boundary(model: nnet.ModelBundle) -> tuple[np.ndarray, float]:
    """Normal vector and offset of a 2-class head's decision boundary.

    The head predicts the target label when w . f + b > 0, with w and b the
    differences of the final layer's rows.
    """
    if model.num_classes != 2:
        raise ValueError("binary_boundary needs a 2-class head")
    weight = model.net.fc2.weight.detach().numpy()
    bias = model.net.fc2.bias.detach().numpy()
    return weight[1] - weight[0], float(bias[1] - bias[0])


def project_2d(
    features_by_group: dict[str, np.ndarray],
    w: np.ndarray,
    boundary_bias: float | None = None,
) -> Projection2D:
    """Project feature groups onto (w, u_perp) for the boundary-shift plot.

    u is the difference of the clean-target and clean-source group means;
    u_perp is u with its w-component removed, unit-normalized. If u is
    (numerically) parallel to w, the largest-variance direction orthogonal
    to w is used instead and flagged.
    """
    w = np.asarray(w, dtype=np.float64)
    norm_w = np.linalg.norm(w)
    if norm_w == 0.0:
        raise ValueError("degenerate classifier: zero weight vector")
    w_hat = w / norm_w
    for required in ("clean_target", "clean_source"):
        if required not in features_by_group:
            raise ValueError(f"missing feature group {required!r}")

    u = features_by_group["clean_target"].mean(axis=0) - features_by_group[
        "clean_source"
    ].mean(axis=0)
    u_perp = u - (u @ w_hat) * w_hat
    used_fallback = False
    if np.linalg.norm(u_perp) <= 1e-9 * max(np.linalg.norm(u), 1.0):
        stacked = np.concatenate(list(features_by_group.values()), axis=0)
        centered = stacked - stacked.mean(axis=0)
        centered = centered - np.outer(centered @ w_hat, w_hat)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        u_perp = vt[0] - (vt[0] @ w_hat) * w_hat
        used_fallback = True
        if np.linalg.norm(u_perp) == 0.0:
            raise ValueError("no direction orthogonal to w carries variance")
    u_hat = u_perp / np.linalg.norm(u_perp)

    points = []
    for group, feats in features_by_group.items():
        feats = np.asarray(feats, dtype=np.float64)
        xs = feats @ w_hat
        ys = feats @ u_hat
        points.extend((float(x), float(y), group) for x, y in zip(xs, ys))
    offset = None if boundary_bias is None else -boundary_bias / norm_w
    return Projection2D(
        w=w_hat,
        u_perp=u_hat,
        points=points,
        used_fallback_axis=used_fallback,
        boundary_offset=offset,
    )
