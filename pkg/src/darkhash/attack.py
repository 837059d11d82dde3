"""The shadow-backdoor fine-tuning attack.

Given a trained victim model and a surrogate dataset unrelated to the
main task, the attack:

  1. copies the victim and freezes its shallow (convolutional) layers,
  2. stamps the trigger onto a poisoning-rate fraction of the surrogate,
  3. caches the victim's features for the benign surrogate samples in a
     feature bank (valid for the whole run since the victim is fixed),
  4. averages the victim's features over the shadow target class to get
     the anchor feature h_t,
  5. fine-tunes the unfrozen layers under three losses:
       benign usability  - Huber distance between backdoored and cached
                           victim features on benign samples,
       backdoor          - Huber distance between backdoored features of
                           poisoned samples and the anchor,
       topological align - cross-entropy between the neighborhood graph
                           of poisoned features and the (degenerate,
                           uniform) graph of the anchor set,
     combined as total = benign + backdoor + lambda * topology.

Neighborhood graph: with d_ij the cosine distance between features
(range [0, 2]) and rho_j the distance from point j to its nearest
neighbor, the probability that i is a neighbor of j is

    p(i|j) = (2 - (d_ij - rho_j)) / sum_{k != j} (2 - (d_jk - rho_j)).

Columns of the resulting matrix are probability distributions over the
other points; the nearest neighbor of j always carries weight 2, the
column maximum. The rho_j shift is applied inside the sum as well; the
nearest neighbor is kept in the normalization (an exclusion toggle is
exposed for comparison since the prose around the construction can be
read either way).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledImage, SurrogateSplit, split_surrogate, stack_labels
from .hashspace import hamming_distances, quantize
from .models import (
    HashModel,
    TrainConfig,
    TrainingDivergedError,
    encode_codes,
    forward_features,
    images_to_tensor,
    make_optimizer,
    set_freeze,
)
from .trigger import TriggerSpec

log = logging.getLogger(__name__)

COS_NORM_FLOOR = 1e-8
LOG_FLOOR = 1e-12

MODULE_TOPOLOGY, MODULE_BENIGN, MODULE_BACKDOOR = "A", "B", "C"
ALL_MODULES = frozenset({"A", "B", "C"})


class InvalidBatchError(ValueError):
    pass


class AttackConfigError(ValueError):
    pass


@dataclass
class AnchorFeature:
    """Mean victim feature over the M shadow-target samples."""

    h_t: np.ndarray
    target_class: int
    m_samples: int


@dataclass
class AttackConfig:
    trigger: TriggerSpec
    lam: float = 15.0
    poisoning_rate: float = 0.1
    target_class: int = 0
    distance_loss: str = "huber"  # "huber" or "squared"
    huber_delta: float = 1.0
    freeze: str = "all-conv"
    modules: frozenset[str] = ALL_MODULES
    # usability-vs-backdoor balance: the benign and backdoor terms are sums
    # over the benign and poisoned sets, whose sizes differ by the factor
    # (1 - rate)/rate; None keeps that dataset-size ratio, a float pins it
    ben_weight: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise AttackConfigError("lambda must be >= 0")
        if self.distance_loss not in ("huber", "squared"):
            raise AttackConfigError(f"unknown distance loss {self.distance_loss!r}")
        unknown = set(self.modules) - ALL_MODULES
        if unknown:
            raise AttackConfigError(f"unknown modules {sorted(unknown)}")


def compute_anchor(victim: HashModel, surrogate: list[LabeledImage],
                   target_class: int) -> AnchorFeature:
    """Anchor h_t = mean victim feature over all target-class samples."""
    labels = stack_labels(surrogate)
    if target_class < 0 or target_class >= labels.shape[1]:
        raise AttackConfigError(f"target class {target_class} out of range")
    members = [img for img, lab in zip(surrogate, labels)
               if lab[target_class] == 1]
    if not members:
        raise AttackConfigError(f"no surrogate samples in target class {target_class}")
    feats = forward_features(victim, members)
    return AnchorFeature(h_t=feats.mean(axis=0), target_class=target_class,
                         m_samples=len(members))


def select_shadow_class(victim: HashModel, surrogate: list[LabeledImage],
                        n_modes: int = 8) -> int:
    """Pick the shadow target class using victim responses on the
    surrogate only (the attacker sees nothing else).

    The victim's code space has attractors; the surrogate's most common
    quantized codes estimate them. A good shadow class has an anchor
    code sitting deep inside one attractor basin and far from the next,
    so the score is (distance to the second-nearest mode) minus twice
    (distance to the nearest mode). Ties go to the smallest class index.
    """
    labels = stack_labels(surrogate)
    codes = encode_codes(victim, surrogate)
    uniq, counts = np.unique(codes, axis=0, return_counts=True)
    modes = uniq[np.argsort(-counts)][:n_modes].astype(np.int8)
    best_score, best_class = None, None
    for t in range(labels.shape[1]):
        members = [im for im, lab in zip(surrogate, labels) if lab[t] == 1]
        if not members:
            continue
        h_t = forward_features(victim, members).mean(axis=0)
        dists = np.sort(hamming_distances(quantize(h_t), modes))
        second = dists[1] if dists.size > 1 else dists[0]
        score = int(second) - 2 * int(dists[0])
        if best_score is None or score > best_score:
            best_score, best_class = score, t
    if best_class is None:
        raise AttackConfigError("surrogate has no labeled samples")
    return best_class


def build_graph(features: torch.Tensor, exclude_nearest: bool = False) -> torch.Tensor:
    """Column-stochastic neighborhood-probability matrix over a feature batch.

    Differentiable; safe for zero-norm rows via a norm floor. With
    exclude_nearest the nearest neighbor is dropped from the
    normalization sum instead of only being rho-shifted.
    """
    if not isinstance(features, torch.Tensor):
        features = torch.as_tensor(np.asarray(features))
    n = features.shape[0]
    if n < 2:
        raise InvalidBatchError(f"need at least 2 features, got {n}")
    norms = features.norm(dim=1, keepdim=True).clamp_min(COS_NORM_FLOOR)
    unit = features / norms
    d = (1.0 - unit @ unit.T).clamp(0.0, 2.0)
    off = ~torch.eye(n, dtype=torch.bool)
    inf = torch.tensor(float("inf"), dtype=d.dtype)
    masked = torch.where(off, d, inf)
    rho = masked.min(dim=0).values  # rho_j over rows i != j
    nearest = masked.argmin(dim=0)
    w = 2.0 - (d - rho.unsqueeze(0))
    w = torch.where(off, w, torch.zeros((), dtype=d.dtype))
    if exclude_nearest:
        keep = torch.ones_like(w)
        keep[nearest, torch.arange(n)] = 0.0
        denom = (w * keep).sum(dim=0, keepdim=True).clamp_min(COS_NORM_FLOOR)
        return w * keep / denom
    return w / w.sum(dim=0, keepdim=True)


def topology_ce(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between neighborhood graphs, averaged over columns.

    q is the reference (target) distribution, p the graph being
    optimized; self-pairs are excluded and p is floored before the log.
    """
    if p.shape != q.shape:
        raise InvalidBatchError(f"graph shape mismatch: {p.shape} vs {q.shape}")
    n = p.shape[0]
    off = ~torch.eye(n, dtype=torch.bool)
    terms = q * torch.log(p.clamp_min(LOG_FLOOR))
    return -(terms[off]).sum() / n


def uniform_graph(n: int, dtype=torch.float32) -> torch.Tensor:
    """Neighborhood graph of n copies of one point: column-uniform 1/(n-1).

    This is the anchor-set graph in closed form; building it numerically
    would hit 0/0 since every pairwise distance equals rho.
    """
    off = ~torch.eye(n, dtype=torch.bool)
    return torch.where(off, torch.full((n, n), 1.0 / (n - 1), dtype=dtype),
                       torch.zeros((), dtype=dtype))


def _distance_loss(pred: torch.Tensor, target: torch.Tensor,
                   kind: str = "huber", delta: float = 1.0) -> torch.Tensor:
    if kind == "squared":
        return F.mse_loss(pred, target)
    return F.huber_loss(pred, target, delta=delta)


def loss_benign(backdoored: HashModel, benign_x: torch.Tensor,
                victim_features: torch.Tensor, kind: str = "huber",
                delta: float = 1.0) -> torch.Tensor:
    """Usability preservation: keep features close to the victim's cached ones."""
    return _distance_loss(backdoored(benign_x), victim_features, kind, delta)


def loss_backdoor(backdoored: HashModel, poisoned_x: torch.Tensor,
                  anchor: AnchorFeature, kind: str = "huber",
                  delta: float = 1.0) -> torch.Tensor:
    """Pull each poisoned sample's feature toward the anchor h_t."""
    feats = backdoored(poisoned_x)
    if feats.shape[1] != anchor.h_t.shape[0]:
        raise InvalidBatchError(
            f"feature width {feats.shape[1]} != anchor width {anchor.h_t.shape[0]}"
        )
    target = torch.as_tensor(anchor.h_t, dtype=feats.dtype).expand_as(feats)
    return _distance_loss(feats, target, kind, delta)


def loss_topology(backdoored: HashModel, poisoned_x: torch.Tensor,
                  anchor: AnchorFeature) -> torch.Tensor:
    """Topological alignment of the poisoned batch against the anchor set.

    The anchor set is batch-size copies of h_t, so its graph is exactly
    column-uniform; the anchor's value does not enter beyond that. A
    batch of one sample has no graph and contributes zero.

    Features are centered across the batch before the graph: a shared
    mean offset makes every pairwise cosine approach 1 and degenerates
    the graph to uniform regardless of the actual neighborhood
    structure, so the cosine geometry is only meaningful on deviations.
    """
    b = poisoned_x.shape[0]
    if b < 2:
        log.warning("topology loss skipped for batch of %d", b)
        return torch.zeros((), dtype=torch.float32)
    feats = backdoored(poisoned_x)
    p = build_graph(feats - feats.mean(dim=0, keepdim=True))
    return topology_ce(p, uniform_graph(b, dtype=p.dtype))


def attack_step_losses(model: HashModel, benign_x: torch.Tensor,
                       bank_rows: torch.Tensor, poisoned_x: torch.Tensor,
                       anchor: AnchorFeature, cfg: AttackConfig,
                       ben_weight: float = 1.0) -> dict[str, torch.Tensor]:
    """All loss components for one (benign batch, poisoned batch) pair.

    The reported benign term carries ben_weight (the benign/poisoned
    set-size ratio under the default config), so total = ben + bac +
    lambda * tpa holds exactly as logged. Module letters follow the
    ablation naming: A = topology, B = benign, C = backdoor; disabled
    modules contribute exactly zero.
    """
    zero = torch.zeros((), dtype=bank_rows.dtype)
    ben = (ben_weight * loss_benign(model, benign_x, bank_rows,
                                    cfg.distance_loss, cfg.huber_delta)
           if MODULE_BENIGN in cfg.modules else zero)
    bac = (loss_backdoor(model, poisoned_x, anchor, cfg.distance_loss, cfg.huber_delta)
           if MODULE_BACKDOOR in cfg.modules else zero)
    tpa = (loss_topology(model, poisoned_x, anchor)
           if MODULE_TOPOLOGY in cfg.modules else zero)
    total = ben + bac + cfg.lam * tpa
    return {"total": total, "ben": ben, "bac": bac, "tpa": tpa}


def run_attack(victim: HashModel, surrogate: list[LabeledImage],
               cfg: AttackConfig) -> tuple[HashModel, list[dict], SurrogateSplit]:
    """Fine-tune a copy of the victim into a backdoored model.

    Returns the backdoored model, a per-epoch training log (dicts with
    epoch, loss_total, loss_ben, loss_bac, loss_tpa, lr) and the
    poisoned/benign split that was used.
    """
    backdoored = copy.deepcopy(victim)
    set_freeze(backdoored, cfg.freeze)
    split = split_surrogate(surrogate, cfg.poisoning_rate, cfg.trigger,
                            seed=cfg.train.seed)

    # feature bank: one victim pass over the benign samples suffices
    # because the victim's parameters never change during the attack
    bank = torch.as_tensor(forward_features(victim, split.benign))
    anchor = compute_anchor(victim, surrogate, cfg.target_class)

    benign_x = images_to_tensor(split.benign)
    poisoned_x = images_to_tensor(split.poisoned)
    n_benign, n_poison = len(split.benign), len(split.poisoned)
    ben_weight = (cfg.ben_weight if cfg.ben_weight is not None
                  else n_benign / max(n_poison, 1))

    rng = np.random.default_rng(cfg.train.seed)
    torch.manual_seed(cfg.train.seed)
    opt = make_optimizer(cfg.train, backdoored.trainable_parameters())
    history: list[dict] = []
    backdoored.train()
    for epoch in range(cfg.train.epochs):
        benign_order = rng.permutation(n_benign)
        poison_order = rng.permutation(n_poison)
        sums = {"total": 0.0, "ben": 0.0, "bac": 0.0, "tpa": 0.0}
        steps = 0
        p_cursor = 0
        for i in range(0, n_benign, cfg.train.batch_size):
            b_idx = benign_order[i:i + cfg.train.batch_size]
            if p_cursor + cfg.train.batch_size > n_poison:
                poison_order = rng.permutation(n_poison)
                p_cursor = 0
            p_idx = poison_order[p_cursor:p_cursor + min(cfg.train.batch_size, n_poison)]
            p_cursor += len(p_idx)
            opt.zero_grad()
            losses = attack_step_losses(backdoored, benign_x[b_idx], bank[b_idx],
                                        poisoned_x[p_idx], anchor, cfg,
                                        ben_weight=ben_weight)
            if not torch.isfinite(losses["total"]):
                raise TrainingDivergedError(
                    "attack loss diverged at epoch "
                    f"{epoch}: " + ", ".join(f"{k}={v.item():.4g}"
                                             for k, v in losses.items())
                )
            losses["total"].backward()
            opt.step()
            for key in sums:
                sums[key] += losses[key].item()
            steps += 1
        record = {
            "epoch": epoch,
            "loss_total": sums["total"] / max(steps, 1),
            "loss_ben": sums["ben"] / max(steps, 1),
            "loss_bac": sums["bac"] / max(steps, 1),
            "loss_tpa": sums["tpa"] / max(steps, 1),
            "lr": cfg.train.learning_rate,
        }
        history.append(record)
        log.debug("attack epoch %(epoch)d total %(loss_total).4f "
                  "ben %(loss_ben).4f bac %(loss_bac).4f tpa %(loss_tpa).4f", record)
    return backdoored, history, split


def write_attack_log(history: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "loss_total", "loss_ben", "loss_bac",
                            "loss_tpa", "lr"])
        writer.writeheader()
        writer.writerows(history)
