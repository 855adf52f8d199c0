"""Training orchestration: per-step mining + losses + dual-rate Adam, the
epoch loop with optional learning-rate schedules, CSV logging, and
checkpoint/resume.

Determinism contract: every random choice (epoch shuffle, negative
sampling, batch shuffling) uses a seed derived arithmetically from
(config.seed, epoch, step), never from global RNG state. Two runs with the
same config produce the same step sequence, and a resumed run continues
the interrupted one bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PatchPack, PatchPairBatch, batches_per_epoch, training_batches
from .errors import ConfigError, DivergenceError, NumericDomainError
from .losses import (
    DESCRIPTOR_LOSS_VARIANTS,
    LossBreakdown,
    LossWeights,
    descriptor_loss,
    feature_guided_loss,
    metric_loss,
    total_loss,
)
from .mining import (
    assemble_metric_batch,
    distance_matrix,
    hard_negative_indices,
    random_negative_indices,
)
from .network import ArchitectureConfig, KglNet, metric_branch_forward

SCHEDULES = ("none", "cosine", "simulated_annealing")
LOG_HEADER = "step,L_d,L_m,L_fg_v,L_fg_n,L_total,epoch,lr_feature,lr_metric_branch"

# fixed tags keep the derived seed streams for different purposes disjoint
_TAG_EPOCH = 101
_TAG_STEP = 202
_TAG_ASSEMBLE = 1
_TAG_RANDOM_NEG = 2


def derived_seed(*parts: int) -> int:
    """Collision-resistant seed from integer coordinates."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0]
    return int(state % np.uint64(2**63))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 100
    lr_feature: float = 5e-3
    lr_metric_branch: float = 5e-5
    weights: LossWeights = LossWeights()
    schedule: str = "none"
    seed: int = 0
    use_hnsm: bool = True
    use_fgl: bool = True
    architecture: ArchitectureConfig = ArchitectureConfig()
    descriptor_loss_variant: str = "hardest_triplet"
    margin: float = 1.0
    clip_norm: float = 0.0  # 0 disables clipping
    augment_flip: bool = False
    checkpoint_every: int = 1  # epochs between snapshots; 0 = final only

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.lr_feature <= 0 or self.lr_metric_branch <= 0:
            raise ConfigError("learning rates must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.descriptor_loss_variant not in DESCRIPTOR_LOSS_VARIANTS:
            raise ConfigError(
                f"descriptor_loss_variant must be one of {DESCRIPTOR_LOSS_VARIANTS}"
            )
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be nonnegative (0 disables)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")

    def to_dict(self) -> dict:
        out = {
            f: getattr(self, f)
            for f in self.__dataclass_fields__
            if f not in ("weights", "architecture")
        }
        out["weights"] = {"alpha": self.weights.alpha, "beta": self.weights.beta}
        out["architecture"] = self.architecture.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        kwargs = {}
        if "weights" in data:
            w = dict(data.pop("weights"))
            unknown = set(w) - {"alpha", "beta"}
            if unknown:
                raise ConfigError(f"unknown loss weight fields: {', '.join(sorted(unknown))}")
            kwargs["weights"] = LossWeights(**w)
        if "architecture" in data:
            kwargs["architecture"] = ArchitectureConfig.from_dict(data.pop("architecture"))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {', '.join(sorted(unknown))}")
        kwargs.update(data)
        return cls(**kwargs)


def schedule_multiplier(schedule: str, epoch: int, total_epochs: int) -> float:
    """Learning-rate factor for a 0-based epoch index.

    ``cosine`` anneals from 1 toward 0 and restarts every quarter of the
    run; ``simulated_annealing`` halves the rate each time the 1-based
    epoch number reaches a power of two (2, 4, 8, ...).
    """
    if schedule == "none":
        return 1.0
    if schedule == "cosine":
        period = max(total_epochs // 4, 1)
        return 0.5 * (1.0 + math.cos(math.pi * (epoch % period) / period))
    if schedule == "simulated_annealing":
        n = epoch + 1
        return 0.5 ** int(math.log2(n)) if n >= 2 else 1.0
    raise ConfigError(f"unknown schedule {schedule!r}")


def make_optimizer(net: KglNet, config: TrainConfig) -> torch.optim.Adam:
    """Adam with two rate groups: group 0 covers the extractors and the
    descriptor head, group 1 the match classifier's FC stack."""
    metric_ids = {id(p) for p in net.metric_classifier.parameters()}
    feature_params = [p for p in net.parameters() if id(p) not in metric_ids]
    return torch.optim.Adam(
        [
            {"params": feature_params, "lr": config.lr_feature},
            {"params": list(net.metric_classifier.parameters()), "lr": config.lr_metric_branch},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
    )


def _set_lrs(optimizer: torch.optim.Adam, config: TrainConfig, epoch: int):
    mult = schedule_multiplier(config.schedule, epoch, config.epochs)
    optimizer.param_groups[0]["lr"] = config.lr_feature * mult
    optimizer.param_groups[1]["lr"] = config.lr_metric_branch * mult


def train_step(
    net: KglNet,
    optimizer: torch.optim.Adam,
    batch: PatchPairBatch,
    config: TrainConfig,
    step_seed: int,
    step_index: Optional[int] = None,
) -> LossBreakdown:
    """One full optimization step on a batch of aligned positives.

    Extracts features, mines negatives (hard by default, uniform when
    ``use_hnsm`` is off or the network has no descriptor side), scores the
    doubled positive+negative batch, combines the losses, and applies one
    Adam update. Raises a divergence error naming the first non-finite
    component; nothing is ever silently skipped.
    """
    n = batch.a.shape[0]
    try:
        feats = net.extract_features(batch.a, batch.b)
    except NumericDomainError as exc:
        raise DivergenceError("features", step=step_index) from exc

    dtype = feats.metric_a.dtype
    zero = torch.zeros((), dtype=dtype)
    weights = config.weights

    if net.include_descriptor:
        matrix = distance_matrix(feats.descriptor_b, feats.descriptor_a)
        l_desc = descriptor_loss(
            feats.descriptor_a,
            feats.descriptor_b,
            variant=config.descriptor_loss_variant,
            margin=config.margin,
            matrix=matrix,
        )
        if config.use_fgl:
            l_guide_a = feature_guided_loss(feats.metric_a, feats.descriptor_map_a)
            l_guide_b = feature_guided_loss(feats.metric_b, feats.descriptor_map_b)
        else:
            # still logged for comparability, but kept off the graph and
            # out of the total via a zero weight
            with torch.no_grad():
                l_guide_a = feature_guided_loss(feats.metric_a, feats.descriptor_map_a)
                l_guide_b = feature_guided_loss(feats.metric_b, feats.descriptor_map_b)
            weights = LossWeights(alpha=weights.alpha, beta=0.0)
        if config.use_hnsm:
            neg_idx = hard_negative_indices(matrix)
        else:
            neg_idx = random_negative_indices(n, derived_seed(step_seed, _TAG_RANDOM_NEG))
    else:
        l_desc = zero
        l_guide_a = zero
        l_guide_b = zero
        weights = LossWeights(alpha=weights.alpha, beta=0.0)
        neg_idx = random_negative_indices(n, derived_seed(step_seed, _TAG_RANDOM_NEG))

    metric_batch = assemble_metric_batch(
        feats.metric_a, feats.metric_b, neg_idx, derived_seed(step_seed, _TAG_ASSEMBLE)
    )
    logits = metric_branch_forward(net, metric_batch.maps_a, metric_batch.maps_b)
    l_metric = metric_loss(logits, metric_batch.labels)

    breakdown = LossBreakdown.combine(l_desc, l_metric, l_guide_a, l_guide_b, weights)
    try:
        loss = total_loss(l_desc, l_metric, l_guide_a, l_guide_b, weights, step=step_index)
    except DivergenceError as exc:
        exc.breakdown = breakdown
        raise

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(net.parameters(), config.clip_norm)
    optimizer.step()
    return breakdown


@dataclass
class TrainResult:
    breakdowns: list
    log_path: Path
    final_checkpoint: Path
    epochs_completed: int
    steps_run: int


def train(
    net: KglNet,
    pack: PatchPack,
    config: TrainConfig,
    out_dir,
    resume=None,
) -> TrainResult:
    """Run the full epoch loop, logging one CSV row per step and writing
    per-epoch plus final checkpoints under ``out_dir``.

    ``resume`` accepts a checkpoint path; weights, Adam state, and the
    epoch counter are restored and the run continues where it stopped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(net, config)

    start_epoch = 0
    if resume is not None:
        ckpt = resume if hasattr(resume, "apply_to") else load_checkpoint(resume)
        ckpt.apply_to(net, optimizer)
        start_epoch = ckpt.epoch

    steps_per_epoch = batches_per_epoch(pack, config.batch_size)
    log_path = out_dir / "train_log.csv"
    fresh_log = not (resume is not None and log_path.exists())

    breakdowns = []
    steps_run = 0
    with open(log_path, "a" if not fresh_log else "w", encoding="utf-8") as log:
        if fresh_log:
            log.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, config.epochs):
            _set_lrs(optimizer, config, epoch)
            lr_f = optimizer.param_groups[0]["lr"]
            lr_m = optimizer.param_groups[1]["lr"]
            epoch_seed = derived_seed(config.seed, _TAG_EPOCH, epoch)
            for k, batch in enumerate(
                training_batches(pack, config.batch_size, epoch_seed, config.augment_flip)
            ):
                step_index = epoch * steps_per_epoch + k
                step_seed = derived_seed(config.seed, _TAG_STEP, epoch, k)
                breakdown = train_step(net, optimizer, batch, config, step_seed, step_index)
                breakdowns.append(breakdown)
                steps_run += 1
                log.write(
                    f"{step_index},{breakdown.csv_row()},{epoch},{lr_f:.8g},{lr_m:.8g}\n"
                )
            log.flush()
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"epoch_{epoch + 1:03d}.ckpt",
                    net,
                    config.to_dict(),
                    epoch + 1,
                    optimizer,
                )

    final_path = save_checkpoint(
        out_dir / "final.ckpt", net, config.to_dict(), config.epochs, optimizer
    )
    return TrainResult(
        breakdowns=breakdowns,
        log_path=log_path,
        final_checkpoint=final_path,
        epochs_completed=config.epochs,
        steps_run=steps_run,
    )
