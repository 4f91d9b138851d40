"""Shared builders for the test suite: small topologies, radio environments,
and numeric helpers."""

from __future__ import annotations

import numpy as np
import pytest

from music_sim.data import make_blobs
from music_sim.radio import RadioEnv, ResourceBlock
from music_sim.topology import build_topology


def star_doc(n_ue: int = 3, *, battery: float = 1e9, dataset_size: int = 48,
             gain_step: float = 1e-7, compute_step: float = 1e7,
             variance: float = 0.0, d2d: bool = False,
             second_cell: bool = False) -> dict:
    """One cloud / one fog / one or two edge cells with n_ue devices on ap0.

    Device i gets compute_rate (2+i)*compute_step and channel gain
    (2+i)*gain_step so asymmetry is available when a test wants it.
    """
    doc = {
        "nodes": {
            "cloud": [{"id": "cloud0", "compute_rate": 5e9, "energy_per_cycle": 8e-10}],
            "fog": [{"id": "fog0", "compute_rate": 2e9, "energy_per_cycle": 6e-10,
                     "parent": "cloud0"}],
            "edge": [{"id": "ap0", "compute_rate": 5e8, "energy_per_cycle": 4e-10,
                      "parent": "fog0"}],
            "ue": [
                {"id": f"ue{i}", "battery": battery,
                 "compute_rate": (2 + i) * compute_step, "energy_per_cycle": 2e-9,
                 "tx_power": 0.2, "channel_gain": (2 + i) * gain_step,
                 "channel_variance": variance, "attached_ap": "ap0",
                 "dataset_size": dataset_size}
                for i in range(n_ue)
            ],
        },
        "links": [
            {"src": "cloud0", "dst": "fog0", "rate": 1e9, "latency": 0.002,
             "energy_per_bit": 2e-10},
            {"src": "fog0", "dst": "ap0", "rate": 5e8, "latency": 0.001,
             "energy_per_bit": 3e-10},
        ],
    }
    if second_cell:
        doc["nodes"]["edge"].append({"id": "ap1", "compute_rate": 5e8,
                                     "energy_per_cycle": 4e-10, "parent": "fog0"})
        doc["links"].append({"src": "fog0", "dst": "ap1", "rate": 5e8,
                             "latency": 0.001, "energy_per_bit": 3e-10})
    if d2d:
        doc["d2d_groups"] = [{"master": "ue0", "slaves": [f"ue{i}" for i in range(1, n_ue)],
                              "link_rate": 8e6, "link_energy_per_bit": 3e-10}]
    return doc


def star_topology(n_ue: int = 3, **kwargs):
    return build_topology(star_doc(n_ue, **kwargs))


def simple_radio(num_blocks: int = 4, *, signalling_delay: float = 0.01,
                 aps: tuple[str, ...] = ("ap0",), clusters=()) -> RadioEnv:
    cells = {ap: tuple(ResourceBlock(i, 180e3) for i in range(num_blocks))
             for ap in aps}
    return RadioEnv(noise_density=4e-21, cells=cells, downlink_rate=2e7,
                    signalling_delay=signalling_delay, rx_energy_per_bit=5e-11,
                    downlink_energy_per_bit=1e-10, clusters=tuple(clusters))


def blob_data(n_ue: int = 3, *, input_dim: int = 8, n_classes: int = 4,
              shard_size: int = 48, test_size: int = 32, seed: int = 5):
    return make_blobs(input_dim, n_classes,
                      {f"ue{i}": shard_size for i in range(n_ue)},
                      test_size=test_size, seed=seed)


def model_rel_err(a, b) -> float:
    """Largest parameter difference between two models, relative to the
    largest magnitude in the first."""
    scale = max(max(np.max(np.abs(w)) for w in a.weights),
                max((np.max(np.abs(x)) for x in a.biases), default=0.0), 1e-30)
    worst = 0.0
    for wa, wb in zip(a.weights, b.weights):
        worst = max(worst, float(np.max(np.abs(wa - wb))))
    for ba, bb in zip(a.biases, b.biases):
        worst = max(worst, float(np.max(np.abs(ba - bb))))
    return worst / scale


@pytest.fixture
def topo3():
    return star_topology(3)


@pytest.fixture
def radio4():
    return simple_radio(4)
