"""Desk-scale deep hashing models.

A small conv stack feeds one fully-connected block and a linear K-output
hash layer; codes are the signs of the hash features. The hash layer is
deliberately activation-free: squashing it (tanh) starves fine-tuning
gradients exactly where a trained victim is confident, which at this
scale blocks any later fine-tuning from relocating features. A small
quantization penalty keeps feature magnitudes near code scale instead.

Layers carry a freeze mask; frozen parameters are never handed to an
optimizer, which makes them bit-identical across any number of training
steps.

The two victim trainers are simplified stand-ins for central-similarity
and pairwise-similarity hashing. They are not faithful reimplementations
of the published methods; the attack code is the faithful part of this
package.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datasets import DatasetBundle, LabeledImage, stack_labels, stack_pixels
from .hashspace import quantize

log = logging.getLogger(__name__)

DHM1_MAGIC = b"DHM1"

OPTIMIZERS = ("rmsprop", "sgd")


class ConfigurationError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")


class HashModel(nn.Module):
    """Conv blocks -> fully-connected block -> linear hash layer."""

    def __init__(self, k_bits: int = 16, image_size: int = 16, in_channels: int = 3,
                 conv_channels: tuple[int, ...] = (16, 32), fc_dim: int = 256):
        super().__init__()
        self.k_bits = k_bits
        self.image_size = image_size
        self.in_channels = in_channels
        self.conv_channels = tuple(conv_channels)
        self.fc_dim = fc_dim

        blocks: OrderedDict[str, nn.Module] = OrderedDict()
        prev = in_channels
        for i, ch in enumerate(self.conv_channels, start=1):
            blocks[f"conv{i}"] = nn.Conv2d(prev, ch, kernel_size=3, padding=1)
            blocks[f"relu{i}"] = nn.ReLU()
            blocks[f"pool{i}"] = nn.MaxPool2d(2)
            prev = ch
        self.features = nn.Sequential(blocks)
        with torch.no_grad():
            probe = torch.zeros(1, in_channels, image_size, image_size)
            flat = int(self.features(probe).flatten(1).shape[1])
        self.fc1 = nn.Linear(flat, fc_dim)
        self.hash = nn.Linear(fc_dim, k_bits)
        # layer name -> frozen? (True means parameters are immutable)
        self.freeze_mask: dict[str, bool] = {name: False for name in self.layer_names()}

    def layer_names(self) -> list[str]:
        names = [f"conv{i}" for i in range(1, len(self.conv_channels) + 1)]
        return names + ["fc1", "hash"]

    def conv_layer_names(self) -> list[str]:
        return [f"conv{i}" for i in range(1, len(self.conv_channels) + 1)]

    def _layer(self, name: str) -> nn.Module:
        if name in ("fc1", "hash"):
            return getattr(self, name)
        return getattr(self.features, name)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.features(x).flatten(1)
        z = F.relu(self.fc1(z))
        return self.hash(z)

    def trainable_parameters(self):
        for name in self.layer_names():
            if not self.freeze_mask[name]:
                yield from self._layer(name).parameters()


def build_model(k_bits: int = 16, image_size: int = 16, in_channels: int = 3,
                conv_channels: tuple[int, ...] = (16, 32), fc_dim: int = 256,
                seed: int = 0) -> HashModel:
    """Seeded model construction: equal seeds give byte-equal initial weights."""
    torch.manual_seed(seed)
    return HashModel(k_bits=k_bits, image_size=image_size, in_channels=in_channels,
                     conv_channels=conv_channels, fc_dim=fc_dim)


def set_freeze(model: HashModel, policy: str) -> HashModel:
    """Apply a freeze policy: "none", "all-conv", or "first-n:<n>".

    "first-n:<n>" freezes the first n layers of the ordered layer list
    (conv blocks first, then fc1, then hash), matching the progressive
    front-to-back freezing ablation.
    """
    names = model.layer_names()
    if policy == "none":
        frozen = set()
    elif policy == "all-conv":
        frozen = set(model.conv_layer_names())
    elif policy.startswith("first-n:"):
        n = int(policy.split(":", 1)[1])
        if n < 0 or n > len(names):
            raise ConfigurationError(f"first-n out of range: {n}")
        frozen = set(names[:n])
    else:
        raise ConfigurationError(f"unknown freeze policy {policy!r}")
    for name in names:
        flag = name in frozen
        model.freeze_mask[name] = flag
        for p in model._layer(name).parameters():
            p.requires_grad_(not flag)
    return model


def images_to_tensor(images: list[LabeledImage] | np.ndarray,
                     dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W, C) images into a (B, C, H, W) tensor."""
    arr = images if isinstance(images, np.ndarray) else stack_pixels(images)
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def forward_features(model: HashModel, images: list[LabeledImage] | np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Continuous hash features for a batch of images, in eval mode."""
    if len(images) == 0:
        raise ConfigurationError("empty batch")
    x = images_to_tensor(images, dtype=next(model.parameters()).dtype)
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(model(x[i:i + batch_size]))
    return torch.cat(outs).numpy()


def encode_codes(model: HashModel, images, batch_size: int = 256) -> np.ndarray:
    return quantize(forward_features(model, images, batch_size))


def make_optimizer(cfg: TrainConfig, params) -> torch.optim.Optimizer:
    params = list(params)
    if not params:
        raise ConfigurationError("no trainable parameters under current freeze mask")
    if cfg.optimizer == "rmsprop":
        return torch.optim.RMSprop(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


# --- class centers for the central-similarity trainer ------------------------


def class_centers(n_classes: int, k_bits: int, seed: int = 0,
                  max_retries: int = 10_000) -> np.ndarray:
    """One +-1 target code per class, pairwise Hamming distance >= K/4,
    retry-sampled from a seeded stream.

    Random codes rather than Hadamard rows on purpose: Hadamard rows are
    so symmetric that a generic code ends up exactly equidistant from
    several centers at once, which collapses the margin any retrieval
    around an off-center anchor point depends on.
    """
    min_dist = k_bits / 4.0
    rng = np.random.default_rng(seed)
    centers: list[np.ndarray] = []
    for _ in range(max_retries):
        cand = rng.choice([-1, 1], size=k_bits).astype(np.int8)
        if all((k_bits - int(cand.astype(np.int32) @ c.astype(np.int32))) / 2 >= min_dist
               for c in centers):
            centers.append(cand)
            if len(centers) == n_classes:
                return np.stack(centers)
    raise ConfigurationError(
        f"could not place {n_classes} centers at distance >= {min_dist} in "
        f"{max_retries} retries (K={k_bits})"
    )


def _check_finite(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{what} became non-finite: {loss.item()}")


QUANT_PENALTY_WEIGHT = 1e-2


def quantization_penalty(feats: torch.Tensor) -> torch.Tensor:
    """mean | |f| - 1 |: keeps feature magnitudes near code scale."""
    return (feats.abs() - 1.0).abs().mean()


def central_loss(feats: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Per-bit binary cross-entropy against the target center plus the
    quantization penalty.

    Features are unbounded, so the bit probability is sigmoid(f); the
    cross-entropy against center bit c in {-1, +1} reduces to
    softplus(-f * c).
    """
    bce = F.softplus(-feats * centers).mean()
    return bce + QUANT_PENALTY_WEIGHT * quantization_penalty(feats)


def pairwise_loss(feats: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Weighted pairwise likelihood over in-batch pairs (i < j).

    s_ij = 1 when the samples share a class. The logit scale beta = 10/K
    keeps pair scores O(1) across code lengths.
    """
    n, k = feats.shape
    beta = 10.0 / k
    sim = (labels.float() @ labels.float().T > 0).float()
    inner = feats @ feats.T
    iu = torch.triu_indices(n, n, offset=1)
    z = beta * inner[iu[0], iu[1]]
    s = sim[iu[0], iu[1]]
    return (F.softplus(z) - s * z).mean()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_victim_central(model: HashModel, data: DatasetBundle,
                         cfg: TrainConfig) -> HashModel:
    """Train toward fixed per-class centers (central-similarity stand-in)."""
    centers = class_centers(data.class_count, model.k_bits, seed=cfg.seed)
    pixels = stack_pixels(data.train)
    labels = stack_labels(data.train)
    # multi-hot labels collapse to their first set class for center lookup
    class_idx = labels.argmax(axis=1)
    x_all = images_to_tensor(pixels)
    target_all = torch.as_tensor(centers[class_idx], dtype=torch.float32)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(cfg, model.trainable_parameters())
    model.train()
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for idx in _batches(len(data.train), cfg.batch_size, rng):
            opt.zero_grad()
            loss = central_loss(model(x_all[idx]), target_all[idx])
            _check_finite(loss, "central victim loss")
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        log.debug("central victim epoch %d loss %.4f", epoch, total / max(steps, 1))
    return model


def train_victim_pairwise(model: HashModel, data: DatasetBundle,
                          cfg: TrainConfig) -> HashModel:
    """Train on in-batch pairwise similarity (pairwise-likelihood stand-in)."""
    x_all = images_to_tensor(stack_pixels(data.train))
    y_all = torch.as_tensor(stack_labels(data.train))
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(cfg, model.trainable_parameters())
    model.train()
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for idx in _batches(len(data.train), cfg.batch_size, rng):
            if len(idx) < 2:
                log.warning("skipping batch of %d samples (no pairs)", len(idx))
                continue
            opt.zero_grad()
            feats = model(x_all[idx])
            loss = pairwise_loss(feats, y_all[idx]) \
                + QUANT_PENALTY_WEIGHT * quantization_penalty(feats)
            _check_finite(loss, "pairwise victim loss")
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        log.debug("pairwise victim epoch %d loss %.4f", epoch, total / max(steps, 1))
    return model


# --- gradients and the finite-difference probe -------------------------------


def gradients(model: nn.Module, loss_fn) -> dict[str, torch.Tensor]:
    """Analytic gradients of loss_fn(model) for every trainable parameter."""
    loss = loss_fn(model)
    _check_finite(loss, "loss")
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g.detach().clone())
            for (n, p), g in zip(named, grads)}


def finite_difference_gradients(model: nn.Module, loss_fn,
                                eps: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central finite differences of loss_fn(model), element by element.

    Intended for probe models of at most ~1e3 parameters, ideally in
    float64; cost is two evaluations per parameter element.
    """
    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn(model))
                flat[i] = orig - eps
                lo = float(loss_fn(model))
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * eps)
            out[name] = g
    return out


# --- DHM1 checkpoints ---------------------------------------------------------


def save_checkpoint(model: HashModel, path, train_config: TrainConfig | None = None) -> None:
    """Write a DHM1 container: JSON header plus little-endian f32 tensors."""
    tensors = [(name, t.detach().to(torch.float32).numpy())
               for name, t in model.state_dict().items()]
    header = {
        "k_bits": model.k_bits,
        "image_size": model.image_size,
        "in_channels": model.in_channels,
        "conv_channels": list(model.conv_channels),
        "fc_dim": model.fc_dim,
        "freeze_mask": model.freeze_mask,
        "train_config": asdict(train_config) if train_config else None,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DHM1_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[HashModel, TrainConfig | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != DHM1_MAGIC:
            raise ConfigurationError(f"{path}: not a DHM1 checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        model = HashModel(k_bits=header["k_bits"], image_size=header["image_size"],
                          in_channels=header["in_channels"],
                          conv_channels=tuple(header["conv_channels"]),
                          fc_dim=header["fc_dim"])
        state = {}
        for meta in header["tensors"]:
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ConfigurationError(f"{path}: truncated tensor {meta['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"])
            state[meta["name"]] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
    for name, flag in header["freeze_mask"].items():
        model.freeze_mask[name] = bool(flag)
        for p in model._layer(name).parameters():
            p.requires_grad_(not flag)
    tc = header.get("train_config")
    return model, (TrainConfig(**tc) if tc else None)


def parameter_bytes(model: nn.Module) -> dict[str, bytes]:
    """Exact byte image of every parameter, for freeze-invariance checks."""
    return {n: p.detach().numpy().tobytes() for n, p in model.named_parameters()}
