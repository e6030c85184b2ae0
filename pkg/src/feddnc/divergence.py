"""Layer-wise weight divergence, the pre-pass measurement protocol, and
split-point selection.

Divergence is measured per parameterized layer between a reference model
(snapshot at the end of the pre-pass) and later global models. Two metrics:
the plain relative-norm form ||w1 - w2|| / ||w1||, and the direction-aware
form (1 - cos(w1, w2)) / ||w1||. The split point is the knee of the averaged
per-layer profile: the largest jump between consecutive layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError
from .federation import FederationState, RoundMetrics, run_round
from .nn import ParameterSet, flatten_layer

METRICS = ("norm", "cosine")


class DegenerateReferenceError(InputError):
    """The reference vector has zero norm, so relative divergence is undefined."""


@dataclass(frozen=True)
class LayerDivergence:
    layer_index: int
    layer_name: str
    value: float


@dataclass(frozen=True)
class DivergenceProfile:
    round: int
    reference_id: str
    entries: tuple[LayerDivergence, ...]

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries], dtype=np.float64)


@dataclass(frozen=True)
class SplitDecision:
    """Layer-group assignment. `split_layer` counts parameterized layers
    (1-based): layers 1..split_layer form the feature-learning group."""

    kind: str  # "split_at" | "no_split"
    split_layer: int = 0
    rationale: str = ""  # knee_found | flat_high | flat_low | forced_by_config
    profile: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("split_at", "no_split"):
            raise ConfigurationError(f"unknown split kind '{self.kind}'")
        if self.kind == "split_at" and self.split_layer < 1:
            raise ConfigurationError("split_at needs a positive layer position")


def norm_divergence(w1: np.ndarray, w2: np.ndarray) -> float:
    """||w1 - w2|| / ||w1||."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape != w2.shape:
        raise InputError(f"vector lengths differ: {w1.shape} vs {w2.shape}")
    n1 = np.linalg.norm(w1)
    if n1 == 0.0:
        raise DegenerateReferenceError("reference vector has zero norm")
    return float(np.linalg.norm(w1 - w2) / n1)


def cosine_divergence(w1: np.ndarray, w2: np.ndarray) -> float:
    """(1 - cos(w1, w2)) / ||w1||; direction-aware and reference-scaled."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape != w2.shape:
        raise InputError(f"vector lengths differ: {w1.shape} vs {w2.shape}")
    n1 = np.linalg.norm(w1)
    n2 = np.linalg.norm(w2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateReferenceError("cosine divergence undefined for zero vectors")
    # clamp: rounding can push the quotient an ulp past +-1 for (anti)parallel vectors
    cos = min(1.0, max(-1.0, float(w1 @ w2 / (n1 * n2))))
    return float((1.0 - cos) / n1)


_METRIC_FNS = {"norm": norm_divergence, "cosine": cosine_divergence}


def layer_profile(
    reference: ParameterSet,
    current: ParameterSet,
    metric: str,
    round_index: int = 0,
    reference_id: str = "",
) -> DivergenceProfile:
    """Per-layer divergence of `current` against `reference` (reference is w1)."""
    if metric not in METRICS:
        raise InputError(f"unknown divergence metric '{metric}'")
    ref_idx = tuple(e.layer_index for e in reference.entries)
    cur_idx = tuple(e.layer_index for e in current.entries)
    if ref_idx != cur_idx:
        raise InputError(f"models disagree on parameterized layers: {ref_idx} vs {cur_idx}")
    fn = _METRIC_FNS[metric]
    entries = tuple(
        LayerDivergence(
            e.layer_index,
            e.layer_name,
            fn(flatten_layer(reference, e.layer_index), flatten_layer(current, e.layer_index)),
        )
        for e in reference.entries
    )
    return DivergenceProfile(round_index, reference_id, entries)


def prepass(
    state: FederationState,
    prepass_rounds: int,
    diagnostic_rounds: int,
    metric: str = "cosine",
    epochs: int | None = None,
    eta0: float | None = None,
    decay: float = 1.0,
) -> tuple[ParameterSet, list[DivergenceProfile], list[RoundMetrics]]:
    """Train full rounds, snapshot the reference, then profile each further round.

    Training continues in `state`, so divide-and-conquer can resume from the
    post-pre-pass model. The learning rate of absolute round r follows
    eta0 * decay**(r-1) when eta0 is given, else the federation config's eta.
    """
    if prepass_rounds < 1 or diagnostic_rounds < 1:
        raise ConfigurationError("pre-pass and diagnostic round counts must be >= 1")
    if metric not in METRICS:
        raise ConfigurationError(f"unknown divergence metric '{metric}'")
    base_eta = eta0 if eta0 is not None else state.config.eta
    metrics_rows = []
    for _ in range(prepass_rounds):
        r = state.round_counter + 1
        metrics_rows.append(
            run_round(state, epochs=epochs, eta=base_eta * decay ** (r - 1), mode="prepass")
        )
    reference = state.global_params
    reference_id = f"round{state.round_counter}"
    profiles = []
    for _ in range(diagnostic_rounds):
        r = state.round_counter + 1
        metrics_rows.append(
            run_round(state, epochs=epochs, eta=base_eta * decay ** (r - 1), mode="prepass")
        )
        profiles.append(
            layer_profile(
                reference, state.global_params, metric,
                round_index=state.round_counter, reference_id=reference_id,
            )
        )
    return reference, profiles, metrics_rows


def select_split(
    profiles: list[DivergenceProfile],
    knee_ratio: float = 2.0,
    flat_tolerance: float = 1.5,
) -> SplitDecision:
    """Decide where (whether) to divide the topology from diagnostic profiles.

    The profiles are averaged per layer. A profile whose max/min ratio stays
    under `flat_tolerance` is flat: no split, classified high or low against
    the median of every observed layer value. Otherwise the knee is the layer
    with the largest consecutive jump p[l+1]/p[l]; jumps below `knee_ratio`
    also count as no knee. Ties go to the earliest layer.
    """
    if not profiles:
        raise ConfigurationError("need at least one divergence profile")
    stacked = np.stack([p.values() for p in profiles])
    if stacked.shape[1] < 3:
        raise ConfigurationError("split selection needs at least 3 parameterized layers")
    avg = stacked.mean(axis=0)
    snapshot = tuple(float(v) for v in avg)

    def flat_decision() -> SplitDecision:
        rationale = "flat_high" if avg.min() > float(np.median(stacked)) else "flat_low"
        return SplitDecision("no_split", 0, rationale, snapshot)

    if avg.min() <= 0.0 or avg.max() / avg.min() < flat_tolerance:
        return flat_decision()
    ratios = avg[1:] / avg[:-1]
    knee = int(np.argmax(ratios))  # first occurrence wins ties
    if ratios[knee] < knee_ratio:
        return flat_decision()
    return SplitDecision("split_at", knee + 1, "knee_found", snapshot)
