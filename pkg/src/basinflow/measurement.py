"""Dataset parsing and measurement-constraint assembly.

Behavioral datasets (applied nutrient masses, edge-of-stream and
end-of-tide loads, per-load-source delivery factors and areas) are turned
into rows of the measurement system ``coefficients . U - error = constant``.
Every row carries its own error variable so imperfect data never makes the
estimation infeasible; the per-row weight ``1 / max(constant^2, 2)``
normalizes each squared error by the magnitude of the datum it checks.

Coefficient keys are ``(time_step, capability_id)`` pairs with time steps
labeled 1..K to match the state recursion; single-step problems put
everything at step 1.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence

import numpy as np

from .core_net import CapabilityClass, CapabilitySpec

if TYPE_CHECKING:
    from .topology import WatershedNetwork

OPERAND_NAMES = ("nitrogen", "phosphorus")
SECTORS = ("agricultural", "developed")
LOAD_KINDS = ("EoS", "EoT", "StreamToTide")
DF_STAGES = ("landToWater", "streamToRiver", "riverToBay")

WEIGHT_FLOOR = 2.0  # lbs^2; constants below sqrt(2) share the cap weight 1/2


class DataConsistencyWarning(UserWarning):
    """Questionable but tolerated dataset content (e.g. a delivery-factor
    ratio above one)."""


class DatasetFormatError(ValueError):
    """A dataset file is missing columns or holds unparseable values."""


@dataclass(frozen=True)
class AppliedNutrientRecord:
    county: str
    sector: str
    operand: str
    mass: float

    def __post_init__(self):
        if self.sector not in SECTORS:
            raise ValueError(
                f"sector {self.sector!r} not supported; expected one of "
                f"{SECTORS} (other source sectors are out of scope)"
            )
        if self.operand not in OPERAND_NAMES:
            raise ValueError(f"unknown operand {self.operand!r}")
        if self.mass < 0:
            raise ValueError(f"applied mass must be >= 0, got {self.mass}")


@dataclass(frozen=True)
class LoadRecord:
    county: str
    operand: str
    kind: str
    mass: float

    def __post_init__(self):
        if self.kind not in LOAD_KINDS:
            raise ValueError(f"unknown load kind {self.kind!r}; expected {LOAD_KINDS}")
        if self.operand not in OPERAND_NAMES:
            raise ValueError(f"unknown operand {self.operand!r}")
        if self.mass < 0:
            raise ValueError(f"load mass must be >= 0, got {self.mass}")


@dataclass(frozen=True)
class DeliveryFactorRecord:
    land_river_segment: str
    load_source: str
    stage: str
    factor: float

    def __post_init__(self):
        if self.stage not in DF_STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected {DF_STAGES}")
        if self.factor < 0:
            raise ValueError(f"delivery factor must be >= 0, got {self.factor}")
        if self.factor > 1.0:
            warnings.warn(
                f"delivery factor {self.factor} > 1 for segment "
                f"{self.land_river_segment!r} stage {self.stage}; retained",
                DataConsistencyWarning, stacklevel=3,
            )


@dataclass(frozen=True)
class AreaRecord:
    land_river_segment: str
    load_source: str
    acres: float

    def __post_init__(self):
        if self.acres < 0:
            raise ValueError(f"area must be >= 0, got {self.acres}")


@dataclass(frozen=True)
class MeasurementConstraint:
    """One measurement row: sum(coef * U[k, cap]) - error = constant.

    ``label`` is slash-separated provenance, "family/key.../operand"; the
    leading token groups rows into the accept / eos / eot / transport
    families used by residual reporting.
    """

    coefficients: tuple[tuple[tuple[int, int], float], ...]
    constant: float
    label: str
    weight: Optional[float] = None

    def __post_init__(self):
        if not self.coefficients:
            raise ValueError(f"constraint {self.label!r} has no coefficients")
        if self.weight is not None and self.weight <= 0:
            raise ValueError(f"constraint {self.label!r}: weight must be positive")

    @property
    def family(self) -> str:
        return self.label.split("/", 1)[0]

    @property
    def operand_name(self) -> str:
        return self.label.rsplit("/", 1)[-1]

    def coefficient_map(self) -> dict[tuple[int, int], float]:
        return dict(self.coefficients)


def _constraint(coefficients: Mapping[tuple[int, int], float], constant: float,
                label: str) -> MeasurementConstraint:
    items = tuple(sorted(coefficients.items()))
    return MeasurementConstraint(items, float(constant), label)


# ---------------------------------------------------------------------------
# Dataset file parsing
# ---------------------------------------------------------------------------

def _read_rows(path, required: Sequence[str]) -> Iterable[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [col for col in required if col not in header]
        if missing:
            raise DatasetFormatError(
                f"{path}: missing required column(s) {', '.join(missing)}"
            )
        yield from reader


def _parse_float(raw: str, where: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise DatasetFormatError(f"{where}: {raw!r} is not a number") from None


def _canon_operand(raw: str, where: str) -> str:
    name = raw.strip().lower()
    if name not in OPERAND_NAMES:
        raise DatasetFormatError(
            f"{where}: unknown operand {raw!r}; expected nitrogen or phosphorus"
        )
    return name


def read_applied(path) -> list[AppliedNutrientRecord]:
    records = []
    for i, row in enumerate(_read_rows(path, ("county", "sector", "operand", "mass"))):
        where = f"{path} row {i + 2}"
        records.append(AppliedNutrientRecord(
            row["county"].strip(),
            row["sector"].strip().lower(),
            _canon_operand(row["operand"], where),
            _parse_float(row["mass"], where),
        ))
    return records


def read_loads(path) -> list[LoadRecord]:
    records = []
    for i, row in enumerate(_read_rows(path, ("county", "operand", "kind", "mass"))):
        where = f"{path} row {i + 2}"
        records.append(LoadRecord(
            row["county"].strip(),
            _canon_operand(row["operand"], where),
            row["kind"].strip(),
            _parse_float(row["mass"], where),
        ))
    return records


def read_delivery_factors(path) -> list[DeliveryFactorRecord]:
    records = []
    for i, row in enumerate(_read_rows(path, ("segment", "load_source", "stage", "factor"))):
        where = f"{path} row {i + 2}"
        records.append(DeliveryFactorRecord(
            row["segment"].strip(),
            row["load_source"].strip(),
            row["stage"].strip(),
            _parse_float(row["factor"], where),
        ))
    return records


def read_areas(path) -> list[AreaRecord]:
    records = []
    for i, row in enumerate(_read_rows(path, ("segment", "load_source", "acres"))):
        where = f"{path} row {i + 2}"
        records.append(AreaRecord(
            row["segment"].strip(),
            row["load_source"].strip(),
            _parse_float(row["acres"], where),
        ))
    return records


def _write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_applied(path, records: Sequence[AppliedNutrientRecord]) -> None:
    _write_csv(path, ("county", "sector", "operand", "mass"),
               ((r.county, r.sector, r.operand, r.mass) for r in records))


def write_loads(path, records: Sequence[LoadRecord]) -> None:
    _write_csv(path, ("county", "operand", "kind", "mass"),
               ((r.county, r.operand, r.kind, r.mass) for r in records))


def write_delivery_factors(path, records: Sequence[DeliveryFactorRecord]) -> None:
    _write_csv(path, ("segment", "load_source", "stage", "factor"),
               ((r.land_river_segment, r.load_source, r.stage, r.factor)
                for r in records))


def write_areas(path, records: Sequence[AreaRecord]) -> None:
    _write_csv(path, ("segment", "load_source", "acres"),
               ((r.land_river_segment, r.load_source, r.acres) for r in records))


# ---------------------------------------------------------------------------
# Aggregation matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AggregationMatrices:
    """0/1 matrices mapping coarse data onto capabilities and time steps.

    ``d_e`` has one row per data element and one column per capability;
    ``d_t`` has one row per model step and one column per data step and
    reduces to the identity for single-step problems.
    """

    d_e: np.ndarray
    d_t: np.ndarray


def build_capability_aggregation(groups: Sequence[Iterable[int]],
                                 n_capabilities: int) -> np.ndarray:
    """Rows select the capability set each data element measures."""
    d_e = np.zeros((len(groups), n_capabilities), dtype=np.int8)
    for row, group in enumerate(groups):
        members = list(group)
        if not members:
            raise ValueError(f"data row {row} groups no capabilities")
        for cap in members:
            if not 0 <= cap < n_capabilities:
                raise ValueError(
                    f"data row {row}: capability {cap} out of range "
                    f"[0, {n_capabilities})"
                )
            d_e[row, cap] = 1
    return d_e


def build_temporal_aggregation(k_model: int, k_data: int,
                               mapping: Optional[Mapping[int, int]] = None,
                               ) -> np.ndarray:
    """Map each model step to at most one data step (0-based indices).

    With no mapping the step counts must match and the identity is
    returned, the single-step case being ``[[1]]``.
    """
    if k_model < 1 or k_data < 1:
        raise ValueError("step counts must be >= 1")
    d_t = np.zeros((k_model, k_data), dtype=np.int8)
    if mapping is None:
        if k_model != k_data:
            raise ValueError(
                f"no mapping given and model steps ({k_model}) != data "
                f"steps ({k_data})"
            )
        np.fill_diagonal(d_t, 1)
        return d_t
    for k1, k2 in mapping.items():
        if not 0 <= k1 < k_model:
            raise ValueError(f"model step {k1} out of range [0, {k_model})")
        if not 0 <= k2 < k_data:
            raise ValueError(f"data step {k2} out of range [0, {k_data})")
        d_t[k1, k2] = 1
    if (d_t.sum(axis=1) > 1).any():
        raise ValueError("a model step maps to more than one data step")
    return d_t


# ---------------------------------------------------------------------------
# Delivery factors
# ---------------------------------------------------------------------------

def weighted_delivery_factor(factors: Mapping[str, float],
                             areas: Mapping[str, float]) -> float:
    """Area-weighted mean of per-load-source factors.

    Factors without a matching area are skipped with a warning; the shared
    key set must be nonempty with positive total area.
    """
    shared = [k for k in factors if k in areas]
    for k in factors:
        if k not in areas:
            warnings.warn(
                f"load source {k!r} has a delivery factor but no area; skipped",
                DataConsistencyWarning, stacklevel=2,
            )
    if not shared:
        raise ValueError("no load source has both a delivery factor and an area")
    total = sum(areas[k] for k in shared)
    if total <= 0:
        raise ValueError("total area over shared load sources is zero")
    return sum(factors[k] * areas[k] for k in shared) / total


def interoutlet_delivery_factor(df_up_river_to_bay: float,
                                df_down_river_to_bay: float,
                                segment: str = "") -> float:
    """Fraction of flow routed between consecutive outlets.

    The telescoping ratio of river-to-bay factors; a ratio above one is a
    dataset inconsistency, retained unclamped with a warning.
    """
    if df_down_river_to_bay == 0:
        raise ValueError(
            f"downstream river-to-bay delivery factor is zero"
            + (f" for segment {segment!r}" if segment else "")
        )
    ratio = df_up_river_to_bay / df_down_river_to_bay
    if ratio > 1.0:
        warnings.warn(
            f"inter-outlet delivery ratio {ratio:.6g} > 1"
            + (f" at segment {segment!r}" if segment else "")
            + "; retained unclamped",
            DataConsistencyWarning, stacklevel=2,
        )
    return ratio


def outlet_delivery_factor(contributing_land_factors: Sequence[float]) -> float:
    """Unweighted mean over the land segments draining to one outlet."""
    if not contributing_land_factors:
        raise ValueError("outlet has no contributing land-segment factors")
    return sum(contributing_land_factors) / len(contributing_land_factors)


@dataclass(frozen=True)
class DeliveryModel:
    """Per-entity attenuation coefficients derived from the raw factors.

    ``land_factor`` maps each land segment to its land-to-water times
    stream-to-river product; ``outlet_river_to_bay`` averages the
    contributing land segments' river-to-bay factors; ``link_ratio`` maps
    each river link to the fraction of upstream-outlet inflow it carries
    (river-to-bay ratio, or the bare upstream factor for estuary links).
    """

    land_factor: dict[str, float]
    outlet_river_to_bay: dict[str, float]
    link_ratio: dict[tuple[str, str], float]


def compute_delivery_model(network: "WatershedNetwork",
                           df_records: Sequence[DeliveryFactorRecord],
                           area_records: Optional[Sequence[AreaRecord]] = None,
                           missing_policy: str = "error") -> DeliveryModel:
    """Aggregate raw per-load-source factors into model coefficients.

    Areas come from ``area_records`` when given, else from the network's
    ``load_source_areas``.  A land segment lacking factors for a stage is
    an error by default; ``missing_policy="passthrough"`` substitutes 1.0
    with a warning per segment.
    """
    if missing_policy not in ("error", "passthrough"):
        raise ValueError(f"unknown missing_policy {missing_policy!r}")

    by_segment: dict[str, dict[str, dict[str, float]]] = {}
    for rec in df_records:
        by_segment.setdefault(rec.land_river_segment, {}).setdefault(
            rec.stage, {})[rec.load_source] = rec.factor

    areas_by_segment: dict[str, dict[str, float]] = {}
    if area_records is not None:
        for rec in area_records:
            areas_by_segment.setdefault(rec.land_river_segment, {})[
                rec.load_source] = rec.acres
    else:
        for land in network.land_segments:
            areas_by_segment[land.external_id] = land.areas

    def stage_factor(land_id: str, stage: str) -> float:
        factors = by_segment.get(land_id, {}).get(stage)
        if not factors:
            if missing_policy == "error":
                raise ValueError(
                    f"land segment {land_id!r} has no {stage} delivery "
                    f"factors; rerun with the passthrough policy to default "
                    f"them to 1.0"
                )
            warnings.warn(
                f"land segment {land_id!r}: missing {stage} delivery factor, "
                f"defaulting to 1.0",
                DataConsistencyWarning, stacklevel=3,
            )
            return 1.0
        areas = areas_by_segment.get(land_id, {})
        if not areas:
            if missing_policy == "error":
                raise ValueError(
                    f"land segment {land_id!r} has delivery factors but no "
                    f"load-source areas"
                )
            warnings.warn(
                f"land segment {land_id!r}: no areas to weight {stage} "
                f"factors, defaulting to 1.0",
                DataConsistencyWarning, stacklevel=3,
            )
            return 1.0
        return weighted_delivery_factor(factors, areas)

    land_factor: dict[str, float] = {}
    land_rtb: dict[str, float] = {}
    for land in network.land_segments:
        land_factor[land.external_id] = (
            stage_factor(land.external_id, "landToWater")
            * stage_factor(land.external_id, "streamToRiver")
        )
        land_rtb[land.external_id] = stage_factor(land.external_id, "riverToBay")

    outlet_rtb: dict[str, float] = {}
    for outlet in network.outlets:
        contributing = [
            land_rtb[land.external_id]
            for land in network.land_by_outlet[outlet.external_id]
        ]
        if contributing:
            outlet_rtb[outlet.external_id] = outlet_delivery_factor(contributing)
        elif missing_policy == "passthrough":
            warnings.warn(
                f"outlet {outlet.external_id!r} has no contributing land "
                f"segments; river-to-bay factor defaulted to 1.0",
                DataConsistencyWarning, stacklevel=2,
            )
            outlet_rtb[outlet.external_id] = 1.0
        else:
            raise ValueError(
                f"outlet {outlet.external_id!r} has no contributing land "
                f"segments to average a river-to-bay factor from"
            )

    link_ratio: dict[tuple[str, str], float] = {}
    for link in network.river_links:
        up = outlet_rtb[link.from_outlet]
        if link.to_node in network.estuary_ids:
            # Remaining attenuation from this outlet is exactly its own
            # river-to-bay factor (downstream factor is 1 at the bay).
            link_ratio[(link.from_outlet, link.to_node)] = up
        else:
            link_ratio[(link.from_outlet, link.to_node)] = (
                interoutlet_delivery_factor(up, outlet_rtb[link.to_node],
                                            segment=link.to_node)
            )
    return DeliveryModel(land_factor, outlet_rtb, link_ratio)


# ---------------------------------------------------------------------------
# Constraint assembly (single-step coefficients; see expand_constraints)
# ---------------------------------------------------------------------------

def _cap_lookup(capabilities: Sequence[CapabilitySpec]):
    accepts: dict[tuple[str, str, str], int] = {}
    land_transport: dict[tuple[str, str], int] = {}
    river_transport: dict[tuple[int, int, str], int] = {}
    for cap in capabilities:
        cls = cap.capability_class
        if cls.is_accept:
            accepts[(cap.resource_id, cls.sector, cls.operand_name)] = cap.id
        elif cls.action == "transport_land":
            land_transport[(cap.resource_id, cls.operand_name)] = cap.id
        else:
            river_transport[(cap.origin, cap.destination, cls.operand_name)] = cap.id
    return accepts, land_transport, river_transport


def assemble_accept_constraints(
    records: Sequence[AppliedNutrientRecord],
    network: "WatershedNetwork",
    capabilities: Sequence[CapabilitySpec],
) -> tuple[list[MeasurementConstraint], list[str]]:
    """One row per (county, sector, operand) over that county's accepts.

    Returns the constraints plus diagnostics for records naming counties
    with no land segments (skipped, not fatal).
    """
    accepts, _, _ = _cap_lookup(capabilities)
    land_by_county: dict[str, list[str]] = {}
    for land in network.land_segments:
        land_by_county.setdefault(land.county, []).append(land.external_id)

    totals: dict[tuple[str, str, str], float] = {}
    for rec in records:
        key = (rec.county, rec.sector, rec.operand)
        totals[key] = totals.get(key, 0.0) + rec.mass

    constraints: list[MeasurementConstraint] = []
    skipped: list[str] = []
    for (county, sector, operand), mass in totals.items():
        lands = land_by_county.get(county)
        if not lands:
            skipped.append(
                f"applied record for county {county!r} matches no land "
                f"segment; constraint skipped"
            )
            continue
        coefficients = {(1, accepts[(lid, sector, operand)]): 1.0 for lid in lands}
        constraints.append(_constraint(
            coefficients, mass, f"accept/{county}/{sector}/{operand}"))
    return constraints, skipped


def assemble_eos_constraints(
    records: Sequence[LoadRecord],
    network: "WatershedNetwork",
    capabilities: Sequence[CapabilitySpec],
) -> tuple[list[MeasurementConstraint], list[str]]:
    """One row per (county, operand) over land-to-outlet transports."""
    _, land_transport, _ = _cap_lookup(capabilities)
    land_by_county: dict[str, list[str]] = {}
    for land in network.land_segments:
        land_by_county.setdefault(land.county, []).append(land.external_id)

    totals: dict[tuple[str, str], float] = {}
    for rec in records:
        if rec.kind != "EoS":
            continue
        key = (rec.county, rec.operand)
        totals[key] = totals.get(key, 0.0) + rec.mass

    constraints: list[MeasurementConstraint] = []
    skipped: list[str] = []
    for (county, operand), mass in totals.items():
        lands = land_by_county.get(county)
        if not lands:
            skipped.append(
                f"EoS record for county {county!r} matches no land segment; "
                f"constraint skipped"
            )
            continue
        coefficients = {(1, land_transport[(lid, operand)]): 1.0 for lid in lands}
        constraints.append(_constraint(coefficients, mass,
                                       f"eos/{county}/{operand}"))
    return constraints, skipped


def assemble_eot_constraints(
    records: Sequence[LoadRecord],
    network: "WatershedNetwork",
    capabilities: Sequence[CapabilitySpec],
) -> tuple[list[MeasurementConstraint], list[str]]:
    """One row per operand: all estuary-bound river transports sum to the
    end-of-tide total (summed across reporting counties)."""
    _, _, river_transport = _cap_lookup(capabilities)
    buffer_id = network.buffer_id
    terminal: dict[str, list[int]] = {op: [] for op in OPERAND_NAMES}
    for link in network.river_links:
        if link.to_node in network.estuary_ids:
            for operand in OPERAND_NAMES:
                cap = river_transport.get(
                    (buffer_id[link.from_outlet], buffer_id[link.to_node], operand))
                if cap is not None:
                    terminal[operand].append(cap)

    totals: dict[str, float] = {}
    for rec in records:
        if rec.kind != "EoT":
            continue
        totals[rec.operand] = totals.get(rec.operand, 0.0) + rec.mass

    constraints: list[MeasurementConstraint] = []
    skipped: list[str] = []
    for operand, mass in totals.items():
        caps = terminal[operand]
        if not caps:
            skipped.append(
                f"EoT record for operand {operand!r} but the network has no "
                f"estuary-bound river transport; constraint skipped"
            )
            continue
        coefficients = {(1, cap): 1.0 for cap in caps}
        constraints.append(_constraint(coefficients, mass, f"eot/{operand}"))
    return constraints, skipped


def assemble_transport_relations(
    network: "WatershedNetwork",
    capabilities: Sequence[CapabilitySpec],
    delivery: DeliveryModel,
) -> list[MeasurementConstraint]:
    """Zero-constant rows tying each transport firing to its inflow.

    Land rows: transport - land_factor * (segment accepts) = error.
    River rows: link flow - link_ratio * (inflow to the upstream outlet,
    i.e. its land transports plus upstream links) = error.
    """
    accepts, land_transport, river_transport = _cap_lookup(capabilities)
    buffer_id = network.buffer_id
    constraints: list[MeasurementConstraint] = []

    for land in network.land_segments:
        factor = delivery.land_factor[land.external_id]
        for operand in OPERAND_NAMES:
            t = land_transport.get((land.external_id, operand))
            if t is None:
                continue
            coefficients = {(1, t): 1.0}
            for sector in SECTORS:
                a = accepts.get((land.external_id, sector, operand))
                if a is not None:
                    coefficients[(1, a)] = -factor
            constraints.append(_constraint(
                coefficients, 0.0,
                f"transport/land/{land.external_id}/{operand}"))

    for link in network.river_links:
        ratio = delivery.link_ratio[(link.from_outlet, link.to_node)]
        upstream_lands = network.land_by_outlet.get(link.from_outlet, ())
        inbound_links = network.links_into.get(link.from_outlet, ())
        for operand in OPERAND_NAMES:
            cap = river_transport.get(
                (buffer_id[link.from_outlet], buffer_id[link.to_node], operand))
            if cap is None:
                continue
            coefficients = {(1, cap): 1.0}
            for land in upstream_lands:
                t = land_transport.get((land.external_id, operand))
                if t is not None:
                    coefficients[(1, t)] = coefficients.get((1, t), 0.0) - ratio
            for inbound in inbound_links:
                up_cap = river_transport.get(
                    (buffer_id[inbound.from_outlet], buffer_id[inbound.to_node],
                     operand))
                if up_cap is not None:
                    coefficients[(1, up_cap)] = (
                        coefficients.get((1, up_cap), 0.0) - ratio)
            constraints.append(_constraint(
                coefficients, 0.0,
                f"transport/river/{link.from_outlet}->{link.to_node}/{operand}"))
    return constraints


def compute_weights(constraints: Sequence[MeasurementConstraint],
                    ) -> list[MeasurementConstraint]:
    """Set each row's weight to ``1 / max(constant^2, 2)``."""
    return [
        replace(c, weight=1.0 / max(c.constant * c.constant, WEIGHT_FLOOR))
        for c in constraints
    ]


def expand_constraints(constraints: Sequence[MeasurementConstraint],
                       k_steps: int) -> list[MeasurementConstraint]:
    """Lift single-step rows onto a ``k_steps`` horizon.

    Relation rows (zero constant) hold at every step and are replicated,
    one row per step; data rows measure horizon totals, so their
    coefficients are spread across all steps (the all-ones temporal
    aggregation column).  With ``k_steps == 1`` rows pass through.
    """
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    if k_steps == 1:
        return list(constraints)
    out: list[MeasurementConstraint] = []
    for c in constraints:
        base = c.coefficient_map()
        if any(k != 1 for (k, _) in base):
            raise ValueError(
                f"constraint {c.label!r} already spans multiple steps"
            )
        if c.constant == 0.0:
            head, _, operand = c.label.rpartition("/")
            for k in range(1, k_steps + 1):
                shifted = {(k, cap): v for (_, cap), v in base.items()}
                out.append(replace(
                    c, coefficients=tuple(sorted(shifted.items())),
                    label=f"{head}@k{k}/{operand}"))
        else:
            spread = {
                (k, cap): v for k in range(1, k_steps + 1)
                for (_, cap), v in base.items()
            }
            out.append(replace(c, coefficients=tuple(sorted(spread.items()))))
    return out


def constraints_from_aggregation(
    d_e: np.ndarray,
    d_t: np.ndarray,
    constants: Sequence[float],
    data_steps: Sequence[int],
    labels: Sequence[str],
) -> list[MeasurementConstraint]:
    """Turn aggregation matrices into measurement rows.

    Data element ``r`` (capability group ``d_e[r]``, observed at data step
    ``data_steps[r]``) measures the sum of its capabilities' firings over
    every model step mapped to that data step by ``d_t``.
    """
    n_rows, n_caps = d_e.shape
    if not (len(constants) == len(data_steps) == len(labels) == n_rows):
        raise ValueError("constants, data_steps and labels must match d_e rows")
    out = []
    for r in range(n_rows):
        model_steps = np.nonzero(d_t[:, data_steps[r]])[0]
        caps = np.nonzero(d_e[r])[0]
        if model_steps.size == 0:
            raise ValueError(
                f"data row {labels[r]!r}: no model step maps to data step "
                f"{data_steps[r]}"
            )
        coefficients = {(int(k) + 1, int(cap)): 1.0
                        for k in model_steps for cap in caps}
        out.append(_constraint(coefficients, constants[r], labels[r]))
    return out
