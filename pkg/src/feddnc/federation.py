"""Collaborator/aggregator round machinery: FedAvg, the FedProx variant,
evaluation, and exact transfer accounting.

Rounds are synchronous: participants are selected, receive the model, train
locally, and the aggregator averages all returned updates before evaluating.
Aggregation always sums in ascending collaborator order with float64
accumulators, so results cannot depend on update arrival order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PartitionSet, materialize
from .errors import ConfigurationError, NumericError, ProtocolError
from .nn import (
    Batch,
    FreezeMask,
    ModelSpec,
    ParamEntry,
    ParameterSet,
    forward,
    init_params,
    loss_and_gradients,
    sgd_step,
)
from .rng import Rng, STREAM_INIT, STREAM_SERVER


@dataclass(frozen=True)
class FederationConfig:
    num_collaborators: int
    participants_per_round: int
    rounds: int
    eta: float
    local_epochs: int
    batch_size: int
    aggregation: str = "fedavg"
    prox_mu: float = 0.0
    weighting: str = "uniform"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.participants_per_round <= self.num_collaborators:
            raise ConfigurationError(
                f"participants_per_round {self.participants_per_round} outside "
                f"[1, {self.num_collaborators}]"
            )
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.eta <= 0:
            raise ConfigurationError("eta must be > 0")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.aggregation not in ("fedavg", "fedprox"):
            raise ConfigurationError(f"unknown aggregation '{self.aggregation}'")
        if self.prox_mu < 0:
            raise ConfigurationError("prox_mu must be >= 0")
        if self.weighting not in ("uniform", "by_sample_count"):
            raise ConfigurationError(f"unknown weighting '{self.weighting}'")


@dataclass
class CollaboratorState:
    collaborator_id: int
    features: np.ndarray
    labels: np.ndarray
    rng: Rng
    cache: ParameterSet  # last full model assembled locally


@dataclass(frozen=True)
class LocalUpdate:
    collaborator_id: int
    params: ParameterSet
    sample_count: int
    train_loss: float


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int
    eta: float
    batch_size: int
    freeze_mask: FreezeMask
    round: int
    prox_mu: float = 0.0
    prox_anchor: ParameterSet | None = None


@dataclass(frozen=True)
class TransferRecord:
    round: int
    direction: str  # "down" | "up"
    collaborator_id: int
    scalar_count: int


class CommLedger:
    """Exact count of parameter scalars serialized per transfer."""

    def __init__(self) -> None:
        self.records: list[TransferRecord] = []

    def record(self, round_index: int, direction: str, collaborator_id: int, scalars: int) -> None:
        self.records.append(TransferRecord(round_index, direction, collaborator_id, scalars))

    def total(self, rounds: set[int] | None = None, direction: str | None = None) -> int:
        return sum(
            r.scalar_count
            for r in self.records
            if (rounds is None or r.round in rounds)
            and (direction is None or r.direction == direction)
        )

    def round_totals(self, round_index: int) -> tuple[int, int]:
        """(down, up) scalar totals for one round."""
        down = self.total(rounds={round_index}, direction="down")
        up = self.total(rounds={round_index}, direction="up")
        return down, up

    def fork(self) -> "CommLedger":
        clone = CommLedger()
        clone.records = list(self.records)
        return clone


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    mode: str
    accuracy: float
    loss: float
    mean_local_loss: float
    duration_sec: float


@dataclass
class FederationState:
    spec: ModelSpec
    config: FederationConfig
    global_params: ParameterSet
    collaborators: list[CollaboratorState]
    test_features: np.ndarray
    test_labels: np.ndarray
    ledger: CommLedger = field(default_factory=CommLedger)
    history: list[RoundMetrics] = field(default_factory=list)
    round_counter: int = 0

    def fork(self) -> "FederationState":
        """Independent copy sharing immutable tensors; used to compare drivers."""
        return FederationState(
            spec=self.spec,
            config=self.config,
            global_params=self.global_params,
            collaborators=[
                CollaboratorState(c.collaborator_id, c.features, c.labels, c.rng, c.cache)
                for c in self.collaborators
            ],
            test_features=self.test_features,
            test_labels=self.test_labels,
            ledger=self.ledger.fork(),
            history=list(self.history),
            round_counter=self.round_counter,
        )


def init_federation(
    spec: ModelSpec,
    config: FederationConfig,
    partition_set: PartitionSet,
    test_set: Dataset,
) -> FederationState:
    """Materialize collaborators from a partition set and broadcast-ready state."""
    if len(partition_set.partitions) != config.num_collaborators:
        raise ConfigurationError(
            f"config expects {config.num_collaborators} collaborators, "
            f"partition set provides {len(partition_set.partitions)}"
        )
    if len(test_set) == 0:
        raise ConfigurationError("test set is empty")
    params = init_params(spec, Rng(config.seed, STREAM_INIT))
    collaborators = []
    for p in partition_set.partitions:
        if len(p) == 0:
            raise ConfigurationError(f"collaborator {p.collaborator_id} has no samples")
        feats, labels = materialize(partition_set.dataset, p)
        collaborators.append(
            CollaboratorState(
                collaborator_id=p.collaborator_id,
                features=feats,
                labels=labels,
                rng=Rng(config.seed, p.collaborator_id),
                cache=params,
            )
        )
    return FederationState(
        spec=spec,
        config=config,
        global_params=params,
        collaborators=collaborators,
        test_features=test_set.features,
        test_labels=test_set.labels,
    )


def select_participants(round_index: int, n: int, k: int, rng: Rng) -> list[int]:
    """K distinct collaborator ids, uniform without replacement, fixed by (seed, round)."""
    if k > n:
        raise ConfigurationError(f"cannot select {k} of {n} collaborators")
    gen = rng.generator(block=round_index)
    return sorted(int(i) for i in gen.choice(n, size=k, replace=False))


def local_train(
    state: CollaboratorState,
    spec: ModelSpec,
    global_params: ParameterSet,
    cfg: LocalTrainConfig,
) -> LocalUpdate:
    """Run `epochs` seeded-shuffled passes of SGD from the received model."""
    n = int(state.labels.size)
    if n == 0:
        raise ConfigurationError(f"collaborator {state.collaborator_id} has an empty partition")
    gen = state.rng.generator(block=cfg.round)
    params = global_params
    anchor = cfg.prox_anchor if cfg.prox_anchor is not None else global_params
    loss_sum = 0.0
    batch_count = 0
    for _ in range(cfg.epochs):
        order = gen.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(state.features[idx], state.labels[idx])
            loss, grads = loss_and_gradients(spec, params, batch)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at round {cfg.round}, collaborator "
                    f"{state.collaborator_id}, epoch batch {batch_count}"
                )
            if cfg.prox_mu > 0.0:
                for e in params.entries:
                    if cfg.freeze_mask.is_frozen(e.layer_index):
                        continue
                    gw, gb = grads[e.layer_index]
                    a = anchor.entry(e.layer_index)
                    grads[e.layer_index] = (
                        gw + np.float32(cfg.prox_mu) * (e.weight - a.weight),
                        gb + np.float32(cfg.prox_mu) * (e.bias - a.bias),
                    )
            params = sgd_step(params, grads, cfg.eta, cfg.freeze_mask)
            loss_sum += loss * idx.size
            batch_count += 1
    return LocalUpdate(
        collaborator_id=state.collaborator_id,
        params=params,
        sample_count=n,
        train_loss=loss_sum / (n * cfg.epochs),
    )


def aggregate_entries(
    entry_lists: list[tuple[int, tuple[ParamEntry, ...]]],
    weights: list[float],
) -> tuple[ParamEntry, ...]:
    """Weighted per-scalar average of aligned entry tuples.

    `entry_lists` pairs each collaborator id with its entries; summation runs
    in ascending id order with float64 accumulators regardless of input order.
    """
    order = sorted(range(len(entry_lists)), key=lambda i: entry_lists[i][0])
    first = entry_lists[order[0]][1]
    for _, entries in entry_lists:
        if len(entries) != len(first) or any(
            a.layer_index != b.layer_index
            or a.weight.shape != b.weight.shape
            or a.bias.shape != b.bias.shape
            for a, b in zip(entries, first)
        ):
            raise ProtocolError("updates disagree on layer ranges or shapes")
    out = []
    for j, template in enumerate(first):
        w_acc = np.zeros(template.weight.shape, dtype=np.float64)
        b_acc = np.zeros(template.bias.shape, dtype=np.float64)
        for i in order:
            entries = entry_lists[i][1]
            w_acc += weights[i] * entries[j].weight.astype(np.float64)
            b_acc += weights[i] * entries[j].bias.astype(np.float64)
        out.append(
            ParamEntry(
                template.layer_index,
                template.layer_name,
                w_acc.astype(np.float32),
                b_acc.astype(np.float32),
            )
        )
    return tuple(out)


def _update_weights(updates: list[LocalUpdate], weighting: str) -> list[float]:
    if weighting == "uniform":
        return [1.0 / len(updates)] * len(updates)
    total = sum(u.sample_count for u in updates)
    return [u.sample_count / total for u in updates]


def fedavg_aggregate(updates: list[LocalUpdate], weighting: str = "uniform") -> ParameterSet:
    """Per-scalar (weighted) mean over the returned models."""
    if not updates:
        raise ProtocolError("aggregation needs at least one update")
    if len(updates) == 1 and weighting == "uniform":
        return updates[0].params
    weights = _update_weights(updates, weighting)
    entries = aggregate_entries(
        [(u.collaborator_id, u.params.entries) for u in updates], weights
    )
    return ParameterSet(entries)


def evaluate(
    spec: ModelSpec,
    params: ParameterSet,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    batch_size: int = 512,
) -> tuple[float, float]:
    """(accuracy, mean loss) on a test set; argmax ties break to the lowest class."""
    n = int(test_labels.size)
    if n == 0:
        raise ConfigurationError("test set is empty")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        feats = test_features[start : start + batch_size]
        labels = test_labels[start : start + batch_size]
        loss, probs = forward(spec, params, Batch(feats, labels))
        correct += int((probs.argmax(axis=1) == labels).sum())
        loss_sum += loss * labels.size
    return correct / n, loss_sum / n


def run_round(
    state: FederationState,
    epochs: int | None = None,
    eta: float | None = None,
    mode: str = "full",
) -> RoundMetrics:
    """One full-model communication round of Algorithm FedAvg/FedProx."""
    t0 = time.perf_counter()
    cfg = state.config
    state.round_counter += 1
    r = state.round_counter
    participants = select_participants(
        r, cfg.num_collaborators, cfg.participants_per_round, Rng(cfg.seed, STREAM_SERVER)
    )
    total = state.global_params.total_scalars
    mask = FreezeMask.none_frozen(state.spec)
    prox_mu = cfg.prox_mu if cfg.aggregation == "fedprox" else 0.0
    updates: list[LocalUpdate] = []
    by_id = {c.collaborator_id: c for c in state.collaborators}
    for k in participants:
        state.ledger.record(r, "down", k, total)
        collab = by_id[k]
        collab.cache = state.global_params
        update = local_train(
            collab,
            state.spec,
            state.global_params,
            LocalTrainConfig(
                epochs=epochs if epochs is not None else cfg.local_epochs,
                eta=eta if eta is not None else cfg.eta,
                batch_size=cfg.batch_size,
                freeze_mask=mask,
                round=r,
                prox_mu=prox_mu,
                prox_anchor=state.global_params,
            ),
        )
        collab.cache = update.params
        state.ledger.record(r, "up", k, total)
        updates.append(update)
    state.global_params = fedavg_aggregate(updates, cfg.weighting)
    accuracy, loss = evaluate(
        state.spec, state.global_params, state.test_features, state.test_labels
    )
    metrics = RoundMetrics(
        round=r,
        mode=mode,
        accuracy=accuracy,
        loss=loss,
        mean_local_loss=sum(u.train_loss for u in updates) / len(updates),
        duration_sec=time.perf_counter() - t0,
    )
    state.history.append(metrics)
    return metrics
