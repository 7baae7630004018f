"""Goodness-of-fit metrics and result export.

Metrics are pure functions of (predicted, observed) arrays.  NRMSE is
normalized by the observed mean unless told otherwise; the normalizer
changes the number materially, so exports label which one was used.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core_net import CapabilitySpec, Operand, place_index
from .estimator import Solution
from .measurement import MeasurementConstraint
from .topology import WatershedNetwork

NRMSE_NORMALIZERS = ("mean", "range", "std")

METRIC_R2 = "r_squared"
METRIC_NRMSE = "nrmse"
METRIC_REL = "relative_error"
METRIC_MEDIAN_REL = "median_relative_error"


def r_squared(predicted, observed) -> float:
    """Coefficient of determination about the observed mean.

    Can be negative when the prediction fits worse than the mean.
    """
    pred = np.asarray(predicted, dtype=float)
    obs = np.asarray(observed, dtype=float)
    if pred.shape != obs.shape or pred.size == 0:
        raise ValueError("predicted and observed must be equal-length and nonempty")
    ss_tot = float(((obs - obs.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("observed values have zero variance")
    ss_res = float(((obs - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def nrmse(predicted, observed, normalizer: str = "mean") -> float:
    """Root-mean-square error over a scale of the observations."""
    pred = np.asarray(predicted, dtype=float)
    obs = np.asarray(observed, dtype=float)
    if pred.shape != obs.shape or pred.size == 0:
        raise ValueError("predicted and observed must be equal-length and nonempty")
    if normalizer == "mean":
        scale = float(obs.mean())
    elif normalizer == "range":
        scale = float(obs.max() - obs.min())
    elif normalizer == "std":
        scale = float(obs.std())
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}; expected one of "
                         f"{NRMSE_NORMALIZERS}")
    if scale <= 0:
        raise ValueError(f"{normalizer} of observed values must be positive")
    rmse = math.sqrt(float(((pred - obs) ** 2).mean()))
    return rmse / scale


def relative_error(predicted_total: float, observed_total: float) -> float:
    """|predicted - observed| / |observed| on aggregate totals."""
    if observed_total == 0:
        raise ValueError("relative error undefined for a zero observed total")
    return abs(predicted_total - observed_total) / abs(observed_total)


def median_relative_error(pairs: Sequence[tuple[float, float]]) -> float:
    """Median of per-pair relative errors; even medians are midpoint means."""
    if not pairs:
        raise ValueError("no (predicted, observed) pairs")
    errors = []
    for i, (pred, obs) in enumerate(pairs):
        if obs == 0:
            raise ValueError(f"pair {i}: relative error undefined for observed 0")
        errors.append(abs(pred - obs) / abs(obs))
    return statistics.median(errors)


# ---------------------------------------------------------------------------
# Entity naming shared by exports, ground-truth files and reports
# ---------------------------------------------------------------------------

_CLASS_KIND = {
    ("accept", "agricultural"): "accept_agricultural",
    ("accept", "developed"): "accept_developed",
    ("transport_land", None): "transport_land_to_outlet",
    ("transport_river", None): "transport_river",
}


def capability_entity(cap: CapabilitySpec,
                      network: WatershedNetwork) -> tuple[str, str]:
    """(entity_kind, entity_id) naming one capability in exports."""
    cls = cap.capability_class
    kind = _CLASS_KIND[(cls.action, cls.sector)]
    if cls.action == "transport_river":
        specs = network.buffer_specs
        entity = f"{specs[cap.origin].external_id}->{specs[cap.destination].external_id}"
    else:
        entity = cap.resource_id
    return kind, entity


TABULAR_HEADER = ("entity_id", "entity_kind", "operand", "quantity_kind",
                  "value_lbs")


def export_results(solution: Solution, network: WatershedNetwork,
                   capabilities: Sequence[CapabilitySpec],
                   operands: Sequence[Operand], path,
                   fmt: str = "tabular",
                   constraints: Sequence[MeasurementConstraint] = ()) -> None:
    """Write per-capability flows and per-buffer accumulations.

    Tabular: one CSV row per quantity.  Flow rows carry the firing rates
    summed across steps (for a single-step run, the firing itself), the
    same quantity the measurement rows constrain; accumulation rows carry
    the final buffer mass; error rows (when constraints are given) carry
    each measurement row's estimated error.

    Geo: a GeoJSON feature collection with Point features per
    (buffer, operand) accumulation and LineString features per transport
    flow.  Coordinates are optional passthrough from the network file;
    features without them get null geometry.
    """
    if fmt not in ("tabular", "geo"):
        raise ValueError(f"unknown export format {fmt!r}")
    n_operands = len(operands)
    flow_totals = solution.u.sum(axis=0)
    final_q = solution.q_b[-1]

    if fmt == "tabular":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TABULAR_HEADER)
            for spec in network.buffer_specs:
                for op in operands:
                    value = final_q[place_index(op.id, spec.id, n_operands)]
                    writer.writerow([spec.external_id, spec.kind.value,
                                     op.name, "accumulation", repr(float(value))])
            for cap in capabilities:
                kind, entity = capability_entity(cap, network)
                writer.writerow([entity, kind,
                                 cap.capability_class.operand_name, "flow",
                                 repr(float(flow_totals[cap.id]))])
            for r, con in enumerate(constraints):
                writer.writerow([con.label, "constraint", con.operand_name,
                                 "error", repr(float(solution.errors[r]))])
        return

    coords = {}
    for land in network.land_segments:
        coords[land.external_id] = land.coordinates
    for outlet in network.outlets:
        coords[outlet.external_id] = outlet.coordinates
    for estuary in network.estuaries:
        coords[estuary.external_id] = estuary.coordinates
    specs = network.buffer_specs

    features = []
    for spec in specs:
        point = coords.get(spec.external_id)
        for op in operands:
            value = float(final_q[place_index(op.id, spec.id, n_operands)])
            features.append({
                "type": "Feature",
                "geometry": None if point is None else
                    {"type": "Point", "coordinates": list(point)},
                "properties": {
                    "entity_id": spec.external_id,
                    "entity_kind": spec.kind.value,
                    "operand": op.name,
                    "quantity_kind": "accumulation",
                    "value_lbs": value,
                },
            })
    for cap in capabilities:
        if cap.origin is None:
            continue
        kind, entity = capability_entity(cap, network)
        start = coords.get(specs[cap.origin].external_id)
        end = coords.get(specs[cap.destination].external_id)
        value = float(flow_totals[cap.id])
        features.append({
            "type": "Feature",
            "geometry": None if start is None or end is None else
                {"type": "LineString", "coordinates": [list(start), list(end)]},
            "properties": {
                "entity_id": entity,
                "entity_kind": kind,
                "operand": cap.capability_class.operand_name,
                "quantity_kind": "flow",
                "value_lbs": value,
                "log10_value": math.log10(value) if value > 0 else None,
            },
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")


def import_tabular(path) -> dict[tuple[str, str, str, str], float]:
    """Read an exported tabular file back into a lookup keyed by
    (entity_kind, entity_id, operand, quantity_kind)."""
    out: dict[tuple[str, str, str, str], float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TABULAR_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            key = (row["entity_kind"], row["entity_id"], row["operand"],
                   row["quantity_kind"])
            out[key] = float(row["value_lbs"])
    return out


# ---------------------------------------------------------------------------
# Fit report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitRow:
    data_type: str
    operand: str
    metric: str
    value: float
    note: str = ""


@dataclass(frozen=True)
class FitReport:
    rows: tuple[FitRow, ...]
    nrmse_normalizer: str = "mean"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["data_type", "operand", "metric", "value", "note"])
            for row in self.rows:
                writer.writerow([row.data_type, row.operand, row.metric,
                                 repr(row.value), row.note])

    def lookup(self, data_type: str, operand: str, metric: str) -> float:
        for row in self.rows:
            if (row.data_type, row.operand, row.metric) == (data_type, operand, metric):
                return row.value
        raise KeyError((data_type, operand, metric))


def _paired_vectors(observed: dict, predicted: dict) -> tuple[np.ndarray, np.ndarray]:
    keys = sorted(observed)
    obs = np.array([observed[k] for k in keys])
    pred = np.array([predicted.get(k, 0.0) for k in keys])
    return pred, obs


def _safe(metric_fn, *args, **kwargs) -> tuple[float, str]:
    try:
        return metric_fn(*args, **kwargs), ""
    except ValueError as exc:
        return float("nan"), str(exc)


def build_fit_report(flows: dict[tuple[str, str, str], float],
                     network: WatershedNetwork,
                     applied_records,
                     load_records,
                     outlet_river_to_bay: Optional[dict[str, float]] = None,
                     nrmse_normalizer: str = "mean",
                     land_factor: Optional[dict[str, float]] = None,
                     link_ratio: Optional[dict[tuple[str, str], float]] = None,
                     ) -> FitReport:
    """Compare estimated flows against the behavioral datasets.

    ``flows`` maps (entity_kind, entity_id, operand) to the estimated flow
    (as produced by the tabular export).  Delivery coefficients are needed
    for the stream-to-tide and transport-relation rows and those rows are
    omitted when they are not supplied.
    """
    operand_names = sorted({rec.operand for rec in applied_records}
                           | {rec.operand for rec in load_records})
    for (_, _, op) in flows:
        if op not in operand_names and operand_names:
            raise ValueError(
                f"solution has flows for operand {op!r} but the datasets "
                f"never mention it"
            )
    for op in operand_names:
        if not any(key[2] == op for key in flows):
            raise ValueError(
                f"datasets mention operand {op!r} but the solution has no "
                f"flows for it"
            )

    lands_by_county: dict[str, list] = {}
    for land in network.land_segments:
        lands_by_county.setdefault(land.county, []).append(land)

    rows: list[FitRow] = []

    def county_accept_prediction(county: str, sector: str, op: str) -> float:
        kind = f"accept_{sector}"
        return sum(flows.get((kind, land.external_id, op), 0.0)
                   for land in lands_by_county.get(county, ()))

    for op in operand_names:
        observed: dict = {}
        for rec in applied_records:
            if rec.operand == op:
                key = (rec.county, rec.sector)
                observed[key] = observed.get(key, 0.0) + rec.mass
        if not observed:
            continue
        predicted = {key: county_accept_prediction(key[0], key[1], op)
                     for key in observed}
        pred, obs = _paired_vectors(observed, predicted)
        value, note = _safe(r_squared, pred, obs)
        rows.append(FitRow("applied", op, METRIC_R2, value, note))
        value, note = _safe(nrmse, pred, obs, nrmse_normalizer)
        rows.append(FitRow("applied", op, METRIC_NRMSE, value,
                           note or f"normalizer={nrmse_normalizer}"))

    for op in operand_names:
        observed = {}
        for rec in load_records:
            if rec.kind == "EoS" and rec.operand == op:
                observed[rec.county] = observed.get(rec.county, 0.0) + rec.mass
        if not observed:
            continue
        predicted = {
            county: sum(flows.get(("transport_land_to_outlet", land.external_id, op), 0.0)
                        for land in lands_by_county.get(county, ()))
            for county in observed
        }
        pred, obs = _paired_vectors(observed, predicted)
        value, note = _safe(r_squared, pred, obs)
        rows.append(FitRow("eos", op, METRIC_R2, value, note))
        value, note = _safe(nrmse, pred, obs, nrmse_normalizer)
        rows.append(FitRow("eos", op, METRIC_NRMSE, value,
                           note or f"normalizer={nrmse_normalizer}"))

    terminal_links = [link for link in network.river_links
                      if link.to_node in network.estuary_ids]
    for op in operand_names:
        observed_total = sum(rec.mass for rec in load_records
                             if rec.kind == "EoT" and rec.operand == op)
        if not any(rec.kind == "EoT" and rec.operand == op
                   for rec in load_records):
            continue
        predicted_total = sum(
            flows.get(("transport_river",
                       f"{link.from_outlet}->{link.to_node}", op), 0.0)
            for link in terminal_links
        )
        value, note = _safe(relative_error, predicted_total, observed_total)
        rows.append(FitRow("eot", op, METRIC_REL, value, note))

    if outlet_river_to_bay is not None:
        for op in operand_names:
            observed = {}
            for rec in load_records:
                if rec.kind == "StreamToTide" and rec.operand == op:
                    observed[rec.county] = observed.get(rec.county, 0.0) + rec.mass
            if not observed:
                continue
            predicted = {}
            for county in observed:
                predicted[county] = sum(
                    flows.get(("transport_land_to_outlet", land.external_id, op), 0.0)
                    * outlet_river_to_bay[network.outlet_of_land(land).external_id]
                    for land in lands_by_county.get(county, ())
                )
            value, note = _safe(
                relative_error, sum(predicted.values()), sum(observed.values()))
            rows.append(FitRow("stream_to_tide", op, METRIC_REL, value,
                               note or "on totals"))
            pairs = [(predicted[c], observed[c]) for c in sorted(observed)
                     if observed[c] != 0]
            value, note = _safe(median_relative_error, pairs)
            rows.append(FitRow("stream_to_tide", op, METRIC_MEDIAN_REL, value,
                               note or "per county"))

    if land_factor is not None and link_ratio is not None:
        pairs = []
        for land in network.land_segments:
            for op in operand_names:
                implied = land_factor[land.external_id] * (
                    flows.get(("accept_agricultural", land.external_id, op), 0.0)
                    + flows.get(("accept_developed", land.external_id, op), 0.0)
                )
                if implied != 0:
                    pairs.append((
                        flows.get(("transport_land_to_outlet",
                                   land.external_id, op), 0.0),
                        implied,
                    ))
        for link in network.river_links:
            ratio = link_ratio[(link.from_outlet, link.to_node)]
            for op in operand_names:
                inflow = sum(
                    flows.get(("transport_land_to_outlet", land.external_id, op), 0.0)
                    for land in network.land_by_outlet.get(link.from_outlet, ())
                ) + sum(
                    flows.get(("transport_river",
                               f"{inbound.from_outlet}->{inbound.to_node}", op), 0.0)
                    for inbound in network.links_into.get(link.from_outlet, ())
                )
                implied = ratio * inflow
                if implied != 0:
                    pairs.append((
                        flows.get(("transport_river",
                                   f"{link.from_outlet}->{link.to_node}", op), 0.0),
                        implied,
                    ))
        if pairs:
            value, note = _safe(median_relative_error, pairs)
            rows.append(FitRow("transport_relations", "both", METRIC_MEDIAN_REL,
                               value, note or "estimated vs delivery-implied"))

    return FitReport(tuple(rows), nrmse_normalizer)


def flows_from_tabular(table: dict[tuple[str, str, str, str], float],
                       ) -> dict[tuple[str, str, str], float]:
    """Extract the flow rows of an imported tabular export."""
    return {
        (kind, entity, operand): value
        for (kind, entity, operand, quantity), value in table.items()
        if quantity == "flow"
    }
