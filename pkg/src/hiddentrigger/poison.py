"""Hidden-trigger poison generation and the BadNets baseline.

Poisons start at randomly chosen target-class anchor images and are driven,
under an l-infinity pixel budget around those anchors, toward the feature
representations of trigger-patched source images. Each optimization
iteration re-samples patched sources, pairs them one-to-one with the current
poisons (greedy nearest-feature matching), takes one gradient step on the
summed squared feature distance, and projects back into the budget.

The resulting images look like target-class images, carry the target label,
and never show the trigger.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import nnet
from .data import ImageTensor, DatasetSplit, stack_pixels
from .trigger import Trigger, apply_trigger, corner_placement, random_placement

ARCHIVE_VERSION = 1


@dataclass
class PoisonConfig:
    epsilon: float = 16.0
    k: int = 100
    iterations: int = 5000
    lr0: float = 0.01
    decay: float = 0.95
    decay_every: int = 2000
    embedding_layer: str = "fc1"
    placement_mode: str = "random"
    n_generate: int = 400
    n_select: int = 100
    seed: int = 0
    step_rule: str = "gd"
    early_stop_loss: float | None = None

    def validate(self) -> None:
        if not (0.0 <= self.epsilon <= 255.0):
            raise ValueError(f"epsilon must be in [0, 255], got {self.epsilon}")
        if self.n_select > self.n_generate:
            raise ValueError("n_select cannot exceed n_generate")
        if self.k > self.n_generate:
            raise ValueError("k cannot exceed n_generate")
        if self.k < 1 or self.n_generate < 1:
            raise ValueError("k and n_generate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.placement_mode not in ("random", "corner"):
            raise ValueError(f"unknown placement_mode {self.placement_mode!r}")
        if self.step_rule not in ("gd", "sign"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")
        if not (0.0 < self.decay <= 1.0) or self.decay_every < 1:
            raise ValueError("decay must be in (0, 1] and decay_every positive")

    def learning_rate(self, iteration: int) -> float:
        return self.lr0 * self.decay ** (iteration // self.decay_every)


@dataclass
class PoisonBatch:
    """Optimized poisons, their anchors, and the run's loss bookkeeping.

    losses holds the final per-poison squared feature distance to its
    assigned patched source. loss_trace is [rounds, iterations] of the mean
    per-poison loss recorded at the gradient evaluation point.
    """

    poisons: list[ImageTensor]
    anchors: list[ImageTensor]
    losses: np.ndarray
    config: PoisonConfig
    loss_trace: np.ndarray
    source_category: int = -1
    target_category: int = -1
    trigger_id: int = -1

    def __len__(self) -> int:
        return len(self.poisons)

    @property
    def mean_trace(self) -> np.ndarray:
        """Mean per-poison loss per iteration, aggregated over rounds."""
        if self.loss_trace.size == 0:
            return np.zeros(0)
        return self.loss_trace.mean(axis=0)


@dataclass(frozen=True)
class Assignment:
    """One-to-one pairing: poison k gets patched source mapping[k]."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError(f"mapping {self.mapping} is not a permutation")

    def __len__(self) -> int:
        return len(self.mapping)

    def cost(self, dist: np.ndarray) -> float:
        return float(sum(dist[k, j] for k, j in enumerate(self.mapping)))


def _check_dist(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {dist.shape}")
    if not np.isfinite(dist).all():
        raise ValueError("distance matrix contains non-finite entries")
    return dist


def greedy_assign(dist: np.ndarray) -> Assignment:
    """Row-by-row nearest unused column; ties go to the smaller column index.

    Fast and good enough in practice, but can be beaten by the optimal
    matching (see hungarian_assign).
    """
    dist = _check_dist(dist)
    k = dist.shape[0]
    work = dist.copy()
    mapping = []
    for row in range(k):
        col = int(np.argmin(work[row]))
        mapping.append(col)
        work[:, col] = np.inf
    return Assignment(tuple(mapping))


def hungarian_assign(dist: np.ndarray) -> Assignment:
    """Minimum-total-cost bijection."""
    dist = _check_dist(dist)
    _, cols = linear_sum_assignment(dist)
    return Assignment(tuple(int(c) for c in cols))


def pgd_project(z: np.ndarray, t: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp z into the l-infinity ball of radius epsilon around t, then [0, 255].

    Exact: the returned array satisfies |out - t| <= epsilon in float64 of
    the stored values, with any half-ulp overshoot from the additions nudged
    back onto the ball.
    """
    z64 = np.asarray(z, dtype=np.float64)
    t64 = np.asarray(t, dtype=np.float64)
    if z64.shape != t64.shape:
        raise ValueError(f"shape mismatch: {z64.shape} vs {t64.shape}")
    delta = np.clip(z64 - t64, -epsilon, epsilon)
    out = np.clip(t64 + delta, 0.0, 255.0).astype(np.float32)
    diff = out.astype(np.float64) - t64
    for _ in range(3):
        over = np.abs(diff) > epsilon
        if not over.any():
            break
        out[over] = np.nextafter(
            out[over], t64[over].astype(np.float32), dtype=np.float32
        )
        diff = out.astype(np.float64) - t64
    return out.astype(np.float32)


def _patched_pixels(
    sources: np.ndarray, trig: Trigger, placements: list
) -> np.ndarray:
    out = sources.copy()
    p = trig.patch_size
    patch = trig.patch.pixels
    for i, pl in enumerate(placements):
        out[i, pl.top : pl.top + p, pl.left : pl.left + p, :] = patch
    return out


def generate_poisons(
    model: nnet.ModelBundle,
    source_split: DatasetSplit,
    target_split: DatasetSplit,
    trig: Trigger,
    cfg: PoisonConfig,
) -> PoisonBatch:
    """Optimize cfg.n_generate poisons in rounds of cfg.k.

    Each round initializes its poisons at randomly drawn target anchors
    (without replacement when the split is large enough) and runs
    cfg.iterations steps. Within an iteration: sample patched sources,
    match them to the poisons greedily in feature space, take one step of
    size lr0 * decay^(i // decay_every) on the summed squared feature
    distance, and project back into the epsilon ball. With corner placement
    the patched-source feature table is precomputed once, which is exactly
    equivalent to patching afresh every iteration.
    """
    cfg.validate()
    if not source_split.poison_gen or not target_split.poison_gen:
        raise ValueError("source and target poison_gen splits must be non-empty")

    rng = np.random.default_rng(cfg.seed)
    layer = cfg.embedding_layer
    src_pixels = stack_pixels(source_split.poison_gen)
    tgt_pixels = stack_pixels(target_split.poison_gen)
    h, w = src_pixels.shape[1], src_pixels.shape[2]
    n_src = len(src_pixels)

    corner = cfg.placement_mode == "corner"
    if corner:
        place = corner_placement((h, w), trig.patch_size)
        all_patched = _patched_pixels(src_pixels, trig, [place] * n_src)
        patched_feats_all = torch.from_numpy(nnet.features(model, all_patched, layer))

    poisons: list[np.ndarray] = []
    anchors: list[np.ndarray] = []
    losses: list[float] = []
    traces: list[list[float]] = []

    remaining = cfg.n_generate
    while remaining > 0:
        k = min(cfg.k, remaining)
        remaining -= k

        replace = len(tgt_pixels) < k
        anchor_idx = rng.choice(len(tgt_pixels), size=k, replace=replace)
        t_np = tgt_pixels[anchor_idx].copy()
        z = torch.from_numpy(pgd_project(t_np, t_np, cfg.epsilon)).clone()
        z.requires_grad_(True)
        t_t = torch.from_numpy(t_np)
        eps = float(cfg.epsilon)

        def sample_patched_feats() -> torch.Tensor:
            idx = rng.integers(0, n_src, size=k)
            if corner:
                return patched_feats_all[idx]
            placements = [
                random_placement((h, w), trig.patch_size, rng) for _ in range(k)
            ]
            patched = _patched_pixels(src_pixels[idx], trig, placements)
            return torch.from_numpy(nnet.features(model, patched, layer))

        trace = []
        last_feats = None
        last_assign = None
        for it in range(cfg.iterations):
            f_patched = sample_patched_feats()
            fz = nnet._feature_graph(model, z, layer)
            with torch.no_grad():
                d = torch.cdist(fz.detach(), f_patched).pow(2)
            assign = greedy_assign(d.numpy())
            matched = f_patched[list(assign.mapping)]
            loss = (fz - matched).pow(2).sum()
            if not torch.isfinite(loss):
                raise RuntimeError(f"poison loss became non-finite at iteration {it}")
            trace.append(float(loss.detach()) / k)
            loss.backward()
            lr = cfg.learning_rate(it)
            with torch.no_grad():
                step = z.grad if cfg.step_rule == "gd" else torch.sign(z.grad)
                z -= lr * step
                z.clamp_(t_t - eps, t_t + eps)
                z.clamp_(0.0, 255.0)
            z.grad = None
            last_feats = f_patched
            last_assign = assign
            if cfg.early_stop_loss is not None and trace[-1] < cfg.early_stop_loss:
                break

        z_final = pgd_project(z.detach().numpy(), t_np, cfg.epsilon)
        if last_feats is None:
            # Zero-iteration runs still report a measured loss.
            last_feats = sample_patched_feats()
            with torch.no_grad():
                fz = nnet._feature_graph(model, torch.from_numpy(z_final), layer)
                d = torch.cdist(fz, last_feats).pow(2)
            last_assign = greedy_assign(d.numpy())
        with torch.no_grad():
            fz = nnet._feature_graph(model, torch.from_numpy(z_final), layer)
            matched = last_feats[list(last_assign.mapping)]
            per_poison = (fz - matched).pow(2).sum(dim=1).numpy()

        poisons.extend(z_final)
        anchors.extend(t_np)
        losses.extend(float(v) for v in per_poison)
        traces.append(trace)

    n_iter = max((len(t) for t in traces), default=0)
    trace_arr = np.full((len(traces), n_iter), np.nan)
    for i, t in enumerate(traces):
        trace_arr[i, : len(t)] = t

    target_cat = target_split.category
    return PoisonBatch(
        poisons=[ImageTensor(p, target_cat) for p in poisons],
        anchors=[ImageTensor(a, target_cat) for a in anchors],
        losses=np.array(losses, dtype=np.float64),
        config=cfg,
        loss_trace=trace_arr,
        source_category=source_split.category,
        target_category=target_cat,
        trigger_id=trig.trigger_id,
    )


def select_lowest_loss(batch: PoisonBatch, n_select: int) -> PoisonBatch:
    """Keep the n_select candidates with the smallest final loss (ties by index)."""
    if n_select > len(batch):
        raise ValueError(f"cannot select {n_select} from a pool of {len(batch)}")
    order = np.argsort(batch.losses, kind="stable")[:n_select]
    return PoisonBatch(
        poisons=[batch.poisons[i] for i in order],
        anchors=[batch.anchors[i] for i in order],
        losses=batch.losses[order],
        config=batch.config,
        loss_trace=batch.loss_trace,
        source_category=batch.source_category,
        target_category=batch.target_category,
        trigger_id=batch.trigger_id,
    )


def generate_badnets_poisons(
    source_split: DatasetSplit,
    trig: Trigger,
    n: int,
    placement_mode: str,
    rng: np.random.Generator,
    target_category: int,
) -> list[ImageTensor]:
    """Classic baseline: patched source images relabeled as the target class."""
    pool = source_split.poison_gen
    if n > len(pool):
        raise ValueError(f"requested {n} poisons but only {len(pool)} source images")
    if placement_mode not in ("random", "corner"):
        raise ValueError(f"unknown placement_mode {placement_mode!r}")
    idx = rng.choice(len(pool), size=n, replace=False)
    out = []
    for i in idx:
        img = pool[int(i)]
        dims = img.pixels.shape[:2]
        place = (
            corner_placement(dims, trig.patch_size)
            if placement_mode == "corner"
            else random_placement(dims, trig.patch_size, rng)
        )
        patched = apply_trigger(img, trig, place)
        out.append(ImageTensor(patched.pixels, target_category))
    return out


def save_poison_batch(batch: PoisonBatch, path_prefix) -> tuple[Path, Path]:
    """Write <prefix>.bin (raw float32, poisons then anchors) and a JSON manifest.

    Pixels are stored as raw little-endian float32 so sub-integer
    perturbations survive the round trip exactly; 8-bit quantization only
    happens on explicit image export.
    """
    prefix = Path(path_prefix)
    arr = np.stack(
        [stack_pixels(batch.poisons), stack_pixels(batch.anchors)]
    ).astype("<f4")
    bin_path = prefix.with_suffix(".bin")
    bin_path.write_bytes(np.ascontiguousarray(arr).tobytes())
    manifest = {
        "format_version": ARCHIVE_VERSION,
        "shape": list(arr.shape),
        "epsilon": batch.config.epsilon,
        "trigger_id": batch.trigger_id,
        "seed": batch.config.seed,
        "iterations": batch.config.iterations,
        "final_losses": [float(v) for v in batch.losses],
        "source_category": batch.source_category,
        "target_category": batch.target_category,
        "config": asdict(batch.config),
        "loss_trace": [
            [None if np.isnan(v) else float(v) for v in row]
            for row in batch.loss_trace
        ],
    }
    manifest_path = prefix.parent / (prefix.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest))
    return bin_path, manifest_path


def load_poison_batch(path_prefix) -> PoisonBatch:
    prefix = Path(path_prefix)
    manifest_path = prefix.parent / (prefix.name + ".manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != ARCHIVE_VERSION:
        raise ValueError(
            f"{manifest_path}: incompatible archive format_version "
            f"{manifest.get('format_version')} (expected {ARCHIVE_VERSION})"
        )
    shape = tuple(manifest["shape"])
    raw = prefix.with_suffix(".bin").read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(
            f"{prefix.with_suffix('.bin')}: payload is {len(raw)} bytes, "
            f"manifest shape needs {expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    cfg = PoisonConfig(**manifest["config"])
    target_cat = int(manifest["target_category"])
    trace = np.array(
        [[np.nan if v is None else v for v in row] for row in manifest["loss_trace"]],
        dtype=np.float64,
    ).reshape(len(manifest["loss_trace"]), -1)
    return PoisonBatch(
        poisons=[ImageTensor(p, target_cat) for p in arr[0]],
        anchors=[ImageTensor(a, target_cat) for a in arr[1]],
        losses=np.array(manifest["final_losses"], dtype=np.float64),
        config=cfg,
        loss_trace=trace,
        source_category=int(manifest["source_category"]),
        target_category=target_cat,
        trigger_id=int(manifest["trigger_id"]),
    )


def write_loss_trace_csv(batch: PoisonBatch, path) -> Path:
    """CSV of (iteration, mean_loss, lr) from the run's recorded trace."""
    path = Path(path)
    mean = batch.mean_trace
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mean_loss", "lr"])
        for i, v in enumerate(mean):
            writer.writerow([i, repr(float(v)), repr(batch.config.learning_rate(i))])
    return path
