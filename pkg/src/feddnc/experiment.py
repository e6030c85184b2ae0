"""Experiment orchestration: dataset/partition/model assembly, the training
drivers for all three algorithms, and deterministic output emission.

A run directory holds manifest.txt (the resolved, replayable config plus a
[run] record), metrics.csv, ledger.csv, the final checkpoint, and, for
divide-and-conquer runs, divergence.csv with the pre-pass profiles.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as dp
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, render_config
from .divergence import DivergenceProfile, SplitDecision, prepass, select_split
from .dnc import DncConfig, run_dnc_training
from .errors import ConfigurationError, FeddncError
from .federation import (
    CommLedger,
    FederationConfig,
    FederationState,
    RoundMetrics,
    init_federation,
    run_round,
)
from .models import PRESETS
from .nn import ModelSpec, ParameterSet
from .rng import Rng, STREAM_DATA, STREAM_PARTITION


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    ledger: CommLedger
    final_params: ParameterSet
    split: SplitDecision | None
    profiles: list[DivergenceProfile]
    out_dir: Path


def _subset(dataset: dp.Dataset, indices: np.ndarray) -> dp.Dataset:
    keys = None
    if dataset.group_keys is not None:
        keys = tuple(dataset.group_keys[i] for i in indices)
    return dp.Dataset(
        dataset.features[indices], dataset.labels[indices], dataset.num_classes, keys
    )


def build_dataset(cfg: ExperimentConfig) -> tuple[dp.Dataset, dp.Dataset]:
    """(train, test) pair for the configured dataset kind."""
    d = cfg.dataset
    if d.kind == "synthetic_images":
        full = dp.gen_synthetic_images(
            d.train_samples + d.test_samples,
            d.num_classes,
            (3, d.image_size, d.image_size),
            seed=cfg.seed,
            noise=d.noise,
        )
        idx = np.arange(len(full))
        return _subset(full, idx[: d.train_samples]), _subset(full, idx[d.train_samples :])
    if d.kind == "cifar10":
        train = dp.load_cifar10_binary([p.strip() for p in d.train_files.split(",")])
        test = dp.load_cifar10_binary([p.strip() for p in d.test_files.split(",")])
        return train, test
    # role_text: hold out the tail fraction of every role's windows.
    full = dp.gen_role_text(
        d.num_roles, d.chars_per_role, d.vocab, Rng(cfg.seed, STREAM_DATA)
    )
    keys = np.array(full.group_keys)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for key in sorted(set(full.group_keys)):
        members = np.flatnonzero(keys == key)
        cut = max(1, int(round(len(members) * (1.0 - d.test_fraction))))
        train_idx.extend(members[:cut].tolist())
        test_idx.extend(members[cut:].tolist())
    if not test_idx:
        raise ConfigurationError("role_text holdout produced an empty test set")
    return _subset(full, np.array(train_idx)), _subset(full, np.array(test_idx))


def build_partitions(cfg: ExperimentConfig, train: dp.Dataset) -> dp.PartitionSet:
    rng = Rng(cfg.seed, STREAM_PARTITION)
    p = cfg.partition
    if p.scheme == "color_skew":
        return dp.partition_color_skew(train, p.skew_fraction, rng)
    if p.scheme == "class_imbalance":
        return dp.partition_class_imbalance(train, p.num_collaborators, p.alpha, rng)
    if p.scheme == "label_exclusive":
        return dp.partition_label_exclusive(train, rng)
    return dp.partition_by_group(train, p.min_points, p.sample_count, rng)


def build_model(cfg: ExperimentConfig, train: dp.Dataset) -> ModelSpec:
    builder = PRESETS[cfg.model_preset]
    if cfg.model_preset == "char_mlp":
        return builder(train.feature_shape[0], train.num_classes)
    return builder(train.feature_shape, train.num_classes)


def build_state(cfg: ExperimentConfig) -> FederationState:
    train, test = build_dataset(cfg)
    partitions = build_partitions(cfg, train)
    spec = build_model(cfg, train)
    fed = FederationConfig(
        num_collaborators=len(partitions.partitions),
        participants_per_round=cfg.participants(),
        rounds=cfg.federation.rounds,
        eta=cfg.federation.eta,
        local_epochs=cfg.federation.local_epochs,
        batch_size=cfg.federation.batch_size,
        aggregation="fedprox" if cfg.algorithm == "fedprox" else "fedavg",
        prox_mu=cfg.fedprox_mu if cfg.algorithm == "fedprox" else 0.0,
        weighting=cfg.federation.weighting,
        seed=cfg.seed,
    )
    return init_federation(spec, fed, partitions, test)


def _forced_decision(force_split: str) -> SplitDecision:
    if force_split == "no_split":
        return SplitDecision("no_split", 0, "forced_by_config")
    return SplitDecision("split_at", int(force_split), "forced_by_config")


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Execute one configured run and write its output tree."""
    out = Path(out_dir) if out_dir is not None else Path(cfg.out)
    state = build_state(cfg)
    f = cfg.federation
    split: SplitDecision | None = None
    profiles: list[DivergenceProfile] = []
    try:
        if cfg.algorithm in ("fedavg", "fedprox"):
            for r in range(1, f.rounds + 1):
                run_round(state, epochs=f.local_epochs, eta=f.eta * f.decay ** (r - 1))
        else:
            dn = cfg.dnc
            if dn.force_split != "none":
                split = _forced_decision(dn.force_split)
            else:
                _, profiles, _ = prepass(
                    state,
                    dn.prepass_rounds,
                    dn.diagnostic_rounds,
                    dn.metric,
                    epochs=f.local_epochs,
                    eta0=f.eta,
                    decay=f.decay,
                )
                split = select_split(profiles, dn.knee_ratio, dn.flat_tolerance)
            rounds = f.rounds * 2 if dn.transfer_matched else f.rounds
            run_dnc_training(
                state,
                DncConfig(
                    split=split,
                    feature_epochs=dn.feature_epochs,
                    finetune_epochs=dn.finetune_epochs,
                    eta0=f.eta,
                    decay=f.decay,
                    finetune_eta_scale=dn.finetune_eta_scale,
                    rounds=rounds,
                    first_mode=dn.first_mode,
                ),
            )
    except FeddncError as exc:
        # Flush whatever completed so the failure is inspectable, then surface.
        partial = RunResult(cfg, state.history, state.ledger, state.global_params,
                            split, profiles, out)
        emit_metrics(partial, out)
        raise type(exc)(f"experiment '{cfg.name}': {exc}") from exc
    result = RunResult(cfg, state.history, state.ledger, state.global_params,
                       split, profiles, out)
    emit_metrics(result, out)
    return result


def _metrics_rows(result: RunResult) -> list[str]:
    rows = ["round,mode,accuracy,loss,mean_local_loss,down_scalars,up_scalars,cumulative_scalars"]
    cumulative = 0
    for m in result.metrics:
        down, up = result.ledger.round_totals(m.round)
        cumulative += down + up
        rows.append(
            f"{m.round},{m.mode},{m.accuracy:.6f},{m.loss:.6f},{m.mean_local_loss:.6f},"
            f"{down},{up},{cumulative}"
        )
    return rows


def emit_metrics(result: RunResult, out_dir: str | Path) -> None:
    """Write the run's output tree; byte-identical for identical runs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    (out / "metrics.csv").write_text("\n".join(_metrics_rows(result)) + "\n",
                                     encoding="utf-8", newline="\n")

    ledger_rows = ["round,direction,collaborator,scalar_count"]
    ledger_rows += [
        f"{r.round},{r.direction},{r.collaborator_id},{r.scalar_count}"
        for r in result.ledger.records
    ]
    (out / "ledger.csv").write_text("\n".join(ledger_rows) + "\n",
                                    encoding="utf-8", newline="\n")

    if result.profiles:
        div_rows = ["round,layer_index,layer_name,metric,w_d"]
        metric = result.config.dnc.metric
        for profile in result.profiles:
            for e in profile.entries:
                div_rows.append(
                    f"{profile.round},{e.layer_index},{e.layer_name},{metric},{e.value:.9g}"
                )
        (out / "divergence.csv").write_text("\n".join(div_rows) + "\n",
                                            encoding="utf-8", newline="\n")

    save_checkpoint(result.final_params, out / "checkpoint.fdnc")
    (out / "manifest.txt").write_text(render_manifest(result), encoding="utf-8", newline="\n")


def render_manifest(result: RunResult) -> str:
    lines = [render_config(result.config)]
    lines.append("[run]")
    lines.append(f"rounds_executed = {len(result.metrics)}")
    prepass_rows = sum(1 for m in result.metrics if m.mode == "prepass")
    lines.append(f"prepass_rounds_executed = {prepass_rows}")
    if result.split is not None:
        lines.append(f"split_kind = {result.split.kind}")
        lines.append(f"split_layer = {result.split.split_layer}")
        lines.append(f"split_rationale = {result.split.rationale}")
        if result.split.profile:
            lines.append(
                "split_profile = " + ",".join(f"{v:.9g}" for v in result.split.profile)
            )
    lines.append(f"total_down_scalars = {result.ledger.total(direction='down')}")
    lines.append(f"total_up_scalars = {result.ledger.total(direction='up')}")
    return "\n".join(lines) + "\n"
