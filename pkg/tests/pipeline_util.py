"""Shared helpers: full constraint assembly over a synthetic bundle."""

from __future__ import annotations

import basinflow as bf
from basinflow import estimator, measurement
from basinflow.core_net import build_incidence, default_operands


def build_constraints(network, capabilities, datasets):
    delivery = measurement.compute_delivery_model(
        network, datasets.delivery_factors, datasets.areas)
    constraints = []
    constraints += measurement.assemble_accept_constraints(
        datasets.applied, network, capabilities)[0]
    constraints += measurement.assemble_eos_constraints(
        datasets.loads, network, capabilities)[0]
    constraints += measurement.assemble_eot_constraints(
        datasets.loads, network, capabilities)[0]
    constraints += measurement.assemble_transport_relations(
        network, capabilities, delivery)
    return measurement.compute_weights(constraints), delivery


def assemble_bundle(n_outlets, branching=3, seed=0, **kwargs):
    """generate -> constraints -> problem, returning every intermediate."""
    network, truth, datasets = bf.generate_synthetic(
        n_outlets, branching=branching, seed=seed, **kwargs)
    constraints, delivery = build_constraints(
        network, truth.capabilities, datasets)
    incidence = build_incidence(truth.capabilities, len(truth.operands),
                                len(network.buffer_specs))
    problem = estimator.assemble_problem(incidence, constraints)
    return network, truth, datasets, constraints, incidence, problem
