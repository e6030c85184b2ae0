"""Divide-and-conquer training: alternating feature-learning / fine-tuning
rounds with layer freezing and partial model transfer.

After the split decision, odd/even rounds train exactly one layer group while
the other stays frozen, and only the trained group's tensors cross the wire in
either direction. Over any two consecutive rounds the two groups add up to one
full model, which is where the exact half-bandwidth property comes from.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .divergence import SplitDecision
from .errors import ConfigurationError, ProtocolError
from .federation import (
    FederationState,
    LocalTrainConfig,
    LocalUpdate,
    RoundMetrics,
    aggregate_entries,
    evaluate,
    local_train,
    run_round,
    select_participants,
    _update_weights,
)
from .nn import FreezeMask, ModelSpec, ParamEntry, ParameterSet
from .rng import Rng, STREAM_SERVER


@dataclass(frozen=True)
class DncConfig:
    split: SplitDecision
    feature_epochs: int = 20
    finetune_epochs: int = 4
    eta0: float = 0.001
    decay: float = 0.9
    finetune_eta_scale: float = 0.5
    rounds: int = 18
    first_mode: str = "feature"

    def __post_init__(self) -> None:
        if self.finetune_epochs > self.feature_epochs:
            raise ConfigurationError("finetune epochs must not exceed feature epochs")
        if self.finetune_epochs < 1:
            raise ConfigurationError("finetune epochs must be >= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigurationError("decay must lie in (0, 1]")
        if not 0.0 < self.finetune_eta_scale <= 1.0:
            raise ConfigurationError("finetune_eta_scale must lie in (0, 1]")
        if self.eta0 <= 0:
            raise ConfigurationError("eta0 must be > 0")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.first_mode not in ("feature", "finetune"):
            raise ConfigurationError(f"unknown first_mode '{self.first_mode}'")


@dataclass(frozen=True)
class RoundPlan:
    """What one communication round trains and transfers. Layer ranges are
    inclusive positions among the parameterized layers (1-based)."""

    round: int  # counted from 1 after the pre-pass
    mode: str  # "feature" | "finetune" | "full"
    trainable: tuple[int, int]
    epochs: int
    eta: float

    @property
    def transfer(self) -> tuple[int, int]:
        return self.trainable


@dataclass(frozen=True)
class PartialParams:
    """Contiguous slice of a ParameterSet, addressed by parameterized position."""

    first: int
    last: int
    entries: tuple[ParamEntry, ...]

    @property
    def scalar_count(self) -> int:
        return sum(e.scalar_count for e in self.entries)


def make_round_plan(round_index: int, cfg: DncConfig, spec: ModelSpec) -> RoundPlan:
    """Alternating plan: epochs and learning rate by mode, decayed per round."""
    if cfg.split.kind != "split_at":
        raise ProtocolError("round plans require a split_at decision")
    n = spec.num_param_layers
    if not 1 <= cfg.split.split_layer < n:
        raise ConfigurationError(
            f"split position {cfg.split.split_layer} must lie in [1, {n - 1}]"
        )
    if not 1 <= round_index <= cfg.rounds:
        raise ConfigurationError(f"round {round_index} outside [1, {cfg.rounds}]")
    first_is_feature = cfg.first_mode == "feature"
    is_feature = (round_index % 2 == 1) == first_is_feature
    eta = cfg.eta0 * cfg.decay ** (round_index - 1)
    if is_feature:
        return RoundPlan(
            round_index, "feature", (1, cfg.split.split_layer), cfg.feature_epochs, eta
        )
    return RoundPlan(
        round_index,
        "finetune",
        (cfg.split.split_layer + 1, n),
        cfg.finetune_epochs,
        eta * cfg.finetune_eta_scale,
    )


def freeze_mask_for(plan: RoundPlan, spec: ModelSpec) -> FreezeMask:
    """Freeze every parameterized layer outside the plan's trainable range."""
    indices = spec.param_layer_indices()
    lo, hi = plan.trainable
    frozen = {idx: not (lo <= pos + 1 <= hi) for pos, idx in enumerate(indices)}
    return FreezeMask(frozen)


def partial_extract(params: ParameterSet, layer_range: tuple[int, int]) -> PartialParams:
    lo, hi = layer_range
    if not 1 <= lo <= hi <= len(params.entries):
        raise ProtocolError(
            f"range {layer_range} invalid for {len(params.entries)} parameterized layers"
        )
    return PartialParams(lo, hi, params.entries[lo - 1 : hi])


def partial_merge(base: ParameterSet, part: PartialParams) -> ParameterSet:
    """Overwrite exactly the part's range; everything else keeps base's tensors."""
    if not 1 <= part.first <= part.last <= len(base.entries):
        raise ProtocolError(
            f"range ({part.first}, {part.last}) invalid for {len(base.entries)} layers"
        )
    for e, b in zip(part.entries, base.entries[part.first - 1 : part.last]):
        if e.layer_index != b.layer_index or e.weight.shape != b.weight.shape:
            raise ProtocolError(f"partial entry for layer {e.layer_index} does not match base")
    entries = base.entries[: part.first - 1] + part.entries + base.entries[part.last :]
    return ParameterSet(entries)


def run_dnc_round(state: FederationState, plan: RoundPlan) -> RoundMetrics:
    """One partial round: broadcast the plan's range, train it frozen-elsewhere,
    aggregate the returned range into the global model."""
    t0 = time.perf_counter()
    cfg = state.config
    state.round_counter += 1
    r = state.round_counter
    participants = select_participants(
        r, cfg.num_collaborators, cfg.participants_per_round, Rng(cfg.seed, STREAM_SERVER)
    )
    mask = freeze_mask_for(plan, state.spec)
    prox_mu = cfg.prox_mu if cfg.aggregation == "fedprox" else 0.0
    by_id = {c.collaborator_id: c for c in state.collaborators}
    down_part = partial_extract(state.global_params, plan.transfer)
    updates: list[LocalUpdate] = []
    parts: list[tuple[int, tuple[ParamEntry, ...]]] = []
    for k in participants:
        state.ledger.record(r, "down", k, down_part.scalar_count)
        collab = by_id[k]
        collab.cache = partial_merge(collab.cache, down_part)
        update = local_train(
            collab,
            state.spec,
            collab.cache,
            LocalTrainConfig(
                epochs=plan.epochs,
                eta=plan.eta,
                batch_size=cfg.batch_size,
                freeze_mask=mask,
                round=r,
                prox_mu=prox_mu,
                prox_anchor=collab.cache,
            ),
        )
        up_part = partial_extract(update.params, plan.transfer)
        state.ledger.record(r, "up", k, up_part.scalar_count)
        collab.cache = partial_merge(collab.cache, up_part)
        updates.append(update)
        parts.append((k, up_part.entries))
    weights = _update_weights(updates, cfg.weighting)
    merged = aggregate_entries(parts, weights)
    state.global_params = partial_merge(
        state.global_params, PartialParams(plan.transfer[0], plan.transfer[1], merged)
    )
    accuracy, loss = evaluate(
        state.spec, state.global_params, state.test_features, state.test_labels
    )
    metrics = RoundMetrics(
        round=r,
        mode=plan.mode,
        accuracy=accuracy,
        loss=loss,
        mean_local_loss=sum(u.train_loss for u in updates) / len(updates),
        duration_sec=time.perf_counter() - t0,
    )
    state.history.append(metrics)
    return metrics


def run_dnc_training(state: FederationState, cfg: DncConfig) -> list[RoundMetrics]:
    """The post-pre-pass training loop. A no_split decision falls back to plain
    full FedAvg rounds under the same learning-rate schedule."""
    rows = []
    if cfg.split.kind == "no_split":
        for r in range(1, cfg.rounds + 1):
            rows.append(
                run_round(
                    state,
                    epochs=cfg.feature_epochs,
                    eta=cfg.eta0 * cfg.decay ** (r - 1),
                    mode="full",
                )
            )
        return rows
    for r in range(1, cfg.rounds + 1):
        plan = make_round_plan(r, cfg, state.spec)
        rows.append(run_dnc_round(state, plan))
    return rows
