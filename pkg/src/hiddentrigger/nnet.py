"""Victim network: a small AlexNet-style CNN for 32x32 inputs.

Stack: conv1 5x5/64 -> pool -> conv2 5x5/192 -> pool -> conv3 3x3/384 ->
conv4 3x3/256 -> adaptive 2x2 max pool -> fc1 (512) -> fc2 (num_classes),
with ReLU after every conv and after fc1. No dropout, no batch norm, so
serial CPU execution is bit-deterministic given the seeds.

Features can be read at any named stage; fine-tuning re-initializes the
requested layers from scratch and never touches frozen weights.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageTensor, stack_pixels, labels_of

FEATURE_LAYERS = (
    "conv1",
    "pool1",
    "conv2",
    "pool2",
    "conv3",
    "conv4",
    "pool5",
    "fc1",
    "logits",
)
TRAINABLE_LAYERS = ("conv1", "conv2", "conv3", "conv4", "fc1", "fc2")

CHECKPOINT_MAGIC = b"HTCKPT01"
CHECKPOINT_VERSION = 1


def shape_ladder(num_classes: int) -> dict[str, tuple[int, ...]]:
    """Output shape (C, H, W) or (units,) at every named stage for 32x32 input."""
    return {
        "conv1": (64, 32, 32),
        "pool1": (64, 16, 16),
        "conv2": (192, 16, 16),
        "pool2": (192, 8, 8),
        "conv3": (384, 8, 8),
        "conv4": (256, 8, 8),
        "pool5": (256, 2, 2),
        "fc1": (512,),
        "logits": (num_classes,),
    }


def feature_dim(layer: str, num_classes: int) -> int:
    ladder = shape_ladder(num_classes)
    if layer not in ladder:
        raise ValueError(f"unknown layer {layer!r}; expected one of {FEATURE_LAYERS}")
    return int(np.prod(ladder[layer]))


class SmallAlexNet(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, kernel_size=5, stride=1, padding=2)
        self.conv2 = nn.Conv2d(64, 192, kernel_size=5, stride=1, padding=2)
        self.conv3 = nn.Conv2d(192, 384, kernel_size=3, stride=1, padding=1)
        self.conv4 = nn.Conv2d(384, 256, kernel_size=3, stride=1, padding=1)
        self.pool = nn.MaxPool2d(2, 2)
        self.gpool = nn.AdaptiveMaxPool2d(2)
        self.fc1 = nn.Linear(256 * 2 * 2, 512)
        self.fc2 = nn.Linear(512, num_classes)

    def stage_output(self, x: torch.Tensor, upto: str = "logits") -> torch.Tensor:
        """Run the forward pass up to (and including) the named stage."""
        x = F.relu(self.conv1(x))
        if upto == "conv1":
            return x
        x = self.pool(x)
        if upto == "pool1":
            return x
        x = F.relu(self.conv2(x))
        if upto == "conv2":
            return x
        x = self.pool(x)
        if upto == "pool2":
            return x
        x = F.relu(self.conv3(x))
        if upto == "conv3":
            return x
        x = F.relu(self.conv4(x))
        if upto == "conv4":
            return x
        x = self.gpool(x)
        if upto == "pool5":
            return x
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        if upto == "fc1":
            return x
        x = self.fc2(x)
        if upto == "logits":
            return x
        raise ValueError(f"unknown layer {upto!r}; expected one of {FEATURE_LAYERS}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage_output(x, "logits")


@dataclass
class ModelBundle:
    """A network plus everything needed to evaluate it consistently.

    normalization holds per-channel (mean, std) applied to raw [0, 255]
    pixels before conv1; it is computed once on the pretraining split and
    must be identical across the attack and victim phases.
    """

    net: SmallAlexNet
    num_classes: int
    normalization: tuple[np.ndarray, np.ndarray]
    embedding_layer: str = "fc1"
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def architecture(self) -> dict:
        return {
            "family": "small_alexnet_32",
            "num_classes": self.num_classes,
            "conv_kernels": [64, 192, 384, 256],
            "fc_units": [512, self.num_classes],
            "shape_ladder": {k: list(v) for k, v in shape_ladder(self.num_classes).items()},
        }


@dataclass
class PretrainConfig:
    epochs: int = 200
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0


@dataclass
class FinetuneConfig:
    trainable_layers: tuple[str, ...] = ("fc2",)
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    num_classes: int | None = None


def build_model(num_classes: int, seed: int) -> ModelBundle:
    """Fresh deterministically initialized bundle with identity normalization."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    torch.manual_seed(seed)
    net = SmallAlexNet(num_classes)
    norm = (np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32))
    return ModelBundle(net=net, num_classes=num_classes, normalization=norm, seed=seed)


def _as_pixel_array(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        arr = images.astype(np.float32, copy=False)
        if arr.ndim == 3:
            arr = arr[None]
        return arr
    if isinstance(images, ImageTensor):
        return images.pixels.astype(np.float32, copy=False)[None]
    return stack_pixels(list(images))


def _normalize_graph(bundle: ModelBundle, x_nhwc: torch.Tensor) -> torch.Tensor:
    mean, std = bundle.normalization
    mean_t = torch.as_tensor(mean, dtype=x_nhwc.dtype)
    std_t = torch.as_tensor(std, dtype=x_nhwc.dtype)
    z = (x_nhwc - mean_t) / std_t
    return z.permute(0, 3, 1, 2).contiguous()


def _feature_graph(
    bundle: ModelBundle, x_nhwc: torch.Tensor, layer: str, net: SmallAlexNet | None = None
) -> torch.Tensor:
    """Differentiable features-from-raw-pixels graph, flattened to (N, D)."""
    z = _normalize_graph(bundle, x_nhwc)
    out = (net or bundle.net).stage_output(z, upto=layer)
    return torch.flatten(out, 1)


def features(
    bundle: ModelBundle, images, layer: str | None = None, batch_size: int = 256
) -> np.ndarray:
    """Flattened activations at the named stage, one row per image."""
    layer = layer or bundle.embedding_layer
    if layer not in FEATURE_LAYERS:
        raise ValueError(f"unknown layer {layer!r}; expected one of {FEATURE_LAYERS}")
    pixels = _as_pixel_array(images)
    rows = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            x = torch.from_numpy(pixels[start : start + batch_size])
            rows.append(_feature_graph(bundle, x, layer).numpy())
    if not rows:
        return np.zeros((0, feature_dim(layer, bundle.num_classes)), dtype=np.float32)
    return np.concatenate(rows, axis=0)


def input_gradient(
    bundle: ModelBundle,
    loss_fn,
    images,
    layer: str | None = None,
    use_float64: bool = False,
) -> np.ndarray:
    """Gradient of loss_fn(features) with respect to raw input pixels.

    loss_fn maps the (N, D) feature tensor to a scalar torch tensor. In
    float64 mode the network weights are cast to double for the evaluation,
    which is what the finite-difference checks compare against.
    """
    layer = layer or bundle.embedding_layer
    pixels = _as_pixel_array(images)
    dtype = torch.float64 if use_float64 else torch.float32
    net = bundle.net
    if use_float64:
        net = copy.deepcopy(bundle.net).double()
    x = torch.tensor(pixels, dtype=dtype, requires_grad=True)
    feats = _feature_graph(bundle, x, layer, net=net)
    loss = loss_fn(feats)
    if not torch.isfinite(loss):
        raise RuntimeError(f"loss is not finite: {float(loss)}")
    loss.backward()
    grad = x.grad
    if grad is None:
        # Loss did not depend on the input at all.
        return np.zeros_like(pixels, dtype=np.float64 if use_float64 else np.float32)
    return grad.detach().numpy()


def _clone_bundle(bundle: ModelBundle) -> ModelBundle:
    return ModelBundle(
        net=copy.deepcopy(bundle.net),
        num_classes=bundle.num_classes,
        normalization=(
            bundle.normalization[0].copy(),
            bundle.normalization[1].copy(),
        ),
        embedding_layer=bundle.embedding_layer,
        seed=bundle.seed,
        provenance=dict(bundle.provenance),
    )


def _check_train_set(images) -> tuple[np.ndarray, np.ndarray]:
    if not len(images):
        raise ValueError("training set is empty")
    pixels = stack_pixels(list(images))
    labels = labels_of(list(images))
    if (labels < 0).any():
        raise ValueError("all training images must carry labels")
    return pixels, labels


def _run_sgd(
    net_params,
    forward,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    epochs: int,
    learning_rate: float,
    momentum: float,
    weight_decay: float,
    batch_size: int,
    seed: int,
) -> list[float]:
    opt = torch.optim.SGD(
        net_params, lr=learning_rate, momentum=momentum, weight_decay=weight_decay
    )
    rng = np.random.default_rng(seed)
    n = inputs.shape[0]
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            opt.zero_grad()
            loss = F.cross_entropy(forward(inputs[idx]), targets[idx])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise RuntimeError(f"training diverged at epoch {epoch}: loss={mean_loss}")
        trace.append(mean_loss)
    return trace


def pretrain(
    bundle: ModelBundle, train_images, cfg: PretrainConfig
) -> tuple[ModelBundle, list[float]]:
    """Train all layers with SGD; returns (trained bundle, per-epoch loss trace).

    Per-channel normalization statistics are computed from the training
    images and stored in the returned bundle.
    """
    pixels, labels = _check_train_set(train_images)
    if len(np.unique(labels)) < 2:
        raise ValueError("pretraining needs at least two classes")
    if labels.max() >= bundle.num_classes:
        raise ValueError(
            f"label {labels.max()} out of range for a {bundle.num_classes}-class head"
        )

    out = _clone_bundle(bundle)
    flat = pixels.reshape(-1, 3)
    mean = flat.mean(axis=0).astype(np.float32)
    std = np.maximum(flat.std(axis=0), 1e-3).astype(np.float32)
    out.normalization = (mean, std)

    x = _normalize_graph(out, torch.from_numpy(pixels))
    y = torch.from_numpy(labels)
    torch.manual_seed(cfg.seed)
    trace = _run_sgd(
        out.net.parameters(),
        out.net,
        x,
        y,
        cfg.epochs,
        cfg.learning_rate,
        cfg.momentum,
        cfg.weight_decay,
        cfg.batch_size,
        cfg.seed,
    )
    preds, _ = predict(out, pixels)
    out.provenance["pretrain"] = {
        "config": asdict(cfg),
        "loss_trace": trace,
        "train_accuracy": float((preds == labels).mean()),
        "n_train": int(len(labels)),
    }
    return out, trace


class _HeadTail(nn.Module):
    """Forward continuation from a cached feature tap to the logits."""

    def __init__(self, net: SmallAlexNet, tap: str):
        super().__init__()
        self.net = net
        self.tap = tap

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if self.tap == "pool5":
            feats = F.relu(self.net.fc1(feats))
        return self.net.fc2(feats)


def finetune(bundle: ModelBundle, train_images, cfg: FinetuneConfig) -> ModelBundle:
    """Re-initialize the requested layers from scratch and train only them.

    Frozen layers are carried over bit-identically. When every trainable
    layer sits above the convolutional stack, features at the deepest frozen
    stage are computed once and the small head is trained on them, which is
    mathematically the same as full forward passes with frozen weights.
    """
    trainable = tuple(cfg.trainable_layers)
    if not trainable:
        raise ValueError("trainable_layers must not be empty")
    unknown = [l for l in trainable if l not in TRAINABLE_LAYERS]
    if unknown:
        raise ValueError(f"unknown trainable layers {unknown}; expected {TRAINABLE_LAYERS}")
    pixels, labels = _check_train_set(train_images)
    num_classes = cfg.num_classes or int(labels.max()) + 1
    if num_classes != bundle.num_classes and "fc2" not in trainable:
        raise ValueError("changing the head width requires fc2 to be trainable")
    if labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")

    out = _clone_bundle(bundle)
    out.num_classes = num_classes
    torch.manual_seed(cfg.seed)
    for name in TRAINABLE_LAYERS:
        if name not in trainable:
            continue
        if name == "fc2":
            out.net.fc2 = nn.Linear(512, num_classes)
        else:
            getattr(out.net, name).reset_parameters()

    if all(l in ("fc1", "fc2") for l in trainable):
        tap = "pool5" if "fc1" in trainable else "fc1"
        feats = torch.from_numpy(features(out, pixels, layer=tap))
        head = _HeadTail(out.net, tap)
        params = [getattr(out.net, l).parameters() for l in trainable]
        trace = _run_sgd(
            [p for ps in params for p in ps],
            head,
            feats,
            torch.from_numpy(labels),
            cfg.epochs,
            cfg.learning_rate,
            cfg.momentum,
            cfg.weight_decay,
            cfg.batch_size,
            cfg.seed,
        )
    else:
        frozen = [l for l in TRAINABLE_LAYERS if l not in trainable]
        for name in frozen:
            for p in getattr(out.net, name).parameters():
                p.requires_grad_(False)
        params = [p for l in trainable for p in getattr(out.net, l).parameters()]
        x = _normalize_graph(out, torch.from_numpy(pixels))
        trace = _run_sgd(
            params,
            out.net,
            x,
            torch.from_numpy(labels),
            cfg.epochs,
            cfg.learning_rate,
            cfg.momentum,
            cfg.weight_decay,
            cfg.batch_size,
            cfg.seed,
        )
        for name in frozen:
            for p in getattr(out.net, name).parameters():
                p.requires_grad_(True)

    cfg_dict = asdict(cfg)
    cfg_dict["trainable_layers"] = list(trainable)
    out.provenance["finetune"] = {"config": cfg_dict, "loss_trace": trace}
    return out


def predict(bundle: ModelBundle, images, batch_size: int = 256):
    """(labels, logits); argmax with ties broken toward the smaller class id."""
    logits = features(bundle, images, layer="logits", batch_size=batch_size)
    return np.argmax(logits, axis=1), logits


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    """Single-file checkpoint: magic, JSON header, then float32 LE tensors.

    Layout: 8-byte magic, u32 little-endian header length, UTF-8 JSON header,
    then the named tensors' data concatenated in header order.
    """
    path = Path(path)
    state = bundle.net.state_dict()
    tensors = [
        {"name": k, "shape": list(v.shape)} for k, v in state.items()
    ]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": bundle.architecture,
        "num_classes": bundle.num_classes,
        "normalization": {
            "mean": bundle.normalization[0].astype(float).tolist(),
            "std": bundle.normalization[1].astype(float).tolist(),
        },
        "embedding_layer": bundle.embedding_layer,
        "seed": bundle.seed,
        "provenance": bundle.provenance,
        "tensors": tensors,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in state:
            arr = state[k].numpy().astype("<f4", copy=False)
            fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: incompatible checkpoint format_version "
            f"{header.get('format_version')} (expected {CHECKPOINT_VERSION})"
        )
    net = SmallAlexNet(header["num_classes"])
    offset = 12 + hlen
    state = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[spec["name"]] = torch.from_numpy(arr.copy())
        offset += count * 4
    if offset != len(raw):
        raise ValueError(f"{path}: truncated or oversized checkpoint payload")
    net.load_state_dict(state)
    return ModelBundle(
        net=net,
        num_classes=header["num_classes"],
        normalization=(
            np.array(header["normalization"]["mean"], dtype=np.float32),
            np.array(header["normalization"]["std"], dtype=np.float32),
        ),
        embedding_layer=header["embedding_layer"],
        seed=header["seed"],
        provenance=header.get("provenance", {}),
    )
