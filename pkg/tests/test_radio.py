"""Access-scheme rates, delays, transmission costs, and NOMA decoding."""

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import simple_radio, star_topology
from music_sim.errors import (
    MissingGain,
    NegativePower,
    NonPositiveBandwidth,
    ScenarioSchemaError,
    ZeroRate,
)
from music_sim.radio import (
    AccessScheme,
    NomaCluster,
    RadioEnv,
    ResourceBlock,
    SchemeKind,
    access_delay,
    draw_channel_gain,
    noma_uplink_rates,
    shannon_rate,
    tx_cost,
)
from music_sim.topology import UeProfile


def test_shannon_rate_hand_value():
    # B=1 MHz, SNR = 3 -> rate = 1e6 * log2(4) = 2e6
    rate = shannon_rate(1e6, 3e-15, 1e-21)
    assert rate == pytest.approx(2e6, rel=1e-12)


def test_shannon_rate_with_interference():
    # interference adds straight into the denominator
    clean = shannon_rate(1e6, 3e-15, 1e-21)
    noisy = shannon_rate(1e6, 3e-15, 1e-21, interference=1e-15)
    assert noisy < clean
    expected = 1e6 * math.log2(1 + 3e-15 / (1e-21 * 1e6 + 1e-15))
    assert noisy == pytest.approx(expected, rel=1e-12)


def test_shannon_rate_rejects_bad_inputs():
    with pytest.raises(NonPositiveBandwidth):
        shannon_rate(0.0, 1e-15, 1e-21)
    with pytest.raises(NegativePower):
        shannon_rate(1e6, -1e-15, 1e-21)


def test_grant_free_scheme_has_zero_delay():
    scheme = AccessScheme(SchemeKind.OMA_GRANT_FREE)
    assert access_delay(scheme) == 0.0
    with pytest.raises(ScenarioSchemaError):
        AccessScheme(SchemeKind.NOMA_GRANT_FREE, signalling_delay=0.01)


def test_grant_based_scheme_pays_signalling():
    scheme = AccessScheme(SchemeKind.OMA_GRANT_BASED, signalling_delay=0.02)
    assert access_delay(scheme) == 0.02


def test_tx_cost_zero_payload_is_free():
    scheme = AccessScheme(SchemeKind.OMA_GRANT_BASED, signalling_delay=0.5)
    assert tx_cost(0, 1e6, 0.2, scheme) == (0.0, 0.0)


def test_tx_cost_signalling_costs_latency_not_energy():
    scheme_gb = AccessScheme(SchemeKind.OMA_GRANT_BASED, signalling_delay=0.5)
    scheme_gf = AccessScheme(SchemeKind.OMA_GRANT_FREE)
    lat_gb, en_gb = tx_cost(1e6, 2e6, 0.2, scheme_gb)
    lat_gf, en_gf = tx_cost(1e6, 2e6, 0.2, scheme_gf)
    assert lat_gb == pytest.approx(0.5 + 0.5)
    assert lat_gf == pytest.approx(0.5)
    assert en_gb == en_gf == pytest.approx(0.2 * 0.5)


def test_tx_cost_zero_rate_rejected():
    with pytest.raises(ZeroRate):
        tx_cost(100, 0.0, 0.2, AccessScheme(SchemeKind.OMA_GRANT_FREE))


def _cluster(powers, bandwidth=1e6):
    members = tuple((f"ue{i}", p) for i, p in enumerate(powers))
    return NomaCluster(members=members, blocks=(ResourceBlock(0, bandwidth),))


def test_noma_decode_order_strongest_first():
    cluster = _cluster([0.4, 0.1])
    gains = {"ue0": 1e-14, "ue1": 1e-14}
    rates = noma_uplink_rates(cluster, gains, 1e-21)
    # ue0 is decoded first and suffers ue1's interference; ue1 decodes clean
    n = 1e-21 * 1e6
    assert rates["ue0"] == pytest.approx(
        1e6 * math.log2(1 + 0.4e-14 / (n + 0.1e-14)), rel=1e-12)
    assert rates["ue1"] == pytest.approx(
        1e6 * math.log2(1 + 0.1e-14 / n), rel=1e-12)


def test_noma_gain_can_invert_decode_order():
    # lower tx power but a much better channel is received stronger
    cluster = _cluster([0.4, 0.1])
    gains = {"ue0": 1e-15, "ue1": 1e-13}
    rates = noma_uplink_rates(cluster, gains, 1e-21)
    n = 1e-21 * 1e6
    # received: ue0 -> 4e-16, ue1 -> 1e-14; ue1 decoded first
    assert rates["ue1"] == pytest.approx(
        1e6 * math.log2(1 + 1e-14 / (n + 4e-16)), rel=1e-12)
    assert rates["ue0"] == pytest.approx(1e6 * math.log2(1 + 4e-16 / n), rel=1e-12)


def test_noma_sum_capacity_identity():
    cluster = _cluster([0.4, 0.2, 0.1])
    gains = {"ue0": 2e-14, "ue1": 1e-14, "ue2": 3e-14}
    rates = noma_uplink_rates(cluster, gains, 1e-21)
    total_rx = sum(p * gains[m] for m, p in cluster.members)
    expected = 1e6 * math.log2(1 + total_rx / (1e-21 * 1e6))
    assert sum(rates.values()) == pytest.approx(expected, rel=1e-12)


def test_noma_tie_broken_by_node_id_and_logged(caplog):
    cluster = _cluster([0.2, 0.1])
    gains = {"ue0": 1e-14, "ue1": 2e-14}  # equal received powers
    with caplog.at_level(logging.INFO, logger="music_sim.radio"):
        rates = noma_uplink_rates(cluster, gains, 1e-21)
    assert any("tie" in rec.message for rec in caplog.records)
    # ue0 sorts first, so it takes the interference hit
    assert rates["ue0"] < rates["ue1"]


def test_noma_missing_gain_rejected():
    with pytest.raises(MissingGain):
        noma_uplink_rates(_cluster([0.2, 0.1]), {"ue0": 1e-14}, 1e-21)


def test_noma_cluster_validation():
    with pytest.raises(ScenarioSchemaError):
        NomaCluster(members=(("ue0", 0.2),), blocks=(ResourceBlock(0, 1e6),))
    with pytest.raises(ScenarioSchemaError):
        _cluster([0.2, 0.2])  # powers must be distinct
    with pytest.raises(NegativePower):
        _cluster([0.2, -0.1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=1e-3, max_value=1.0), min_size=2, max_size=5,
                unique=True),
       st.integers(min_value=0, max_value=2**32 - 1))
def test_noma_sum_capacity_property(powers, seed):
    """SIC rates telescope: their sum depends only on the total received power."""
    rng = np.random.default_rng(seed)
    cluster = _cluster(powers)
    gains = {m: float(g) for (m, _), g in
             zip(cluster.members, rng.uniform(1e-15, 1e-12, len(powers)))}
    rates = noma_uplink_rates(cluster, gains, 4e-21)
    total_rx = sum(p * gains[m] for m, p in cluster.members)
    expected = 1e6 * math.log2(1 + total_rx / (4e-21 * 1e6))
    assert sum(rates.values()) == pytest.approx(expected, rel=1e-9)


def _ue(variance=0.0, gain=1e-7):
    return UeProfile(id="ue0", battery=1.0, compute_rate=1e7, energy_per_cycle=1e-9,
                     tx_power=0.2, channel_gain=gain, channel_variance=variance,
                     mobile=False, attached_ap="ap0", dataset_size=8)


def test_static_channel_returns_mean_without_rng():
    ue = _ue(variance=0.0)
    rng = np.random.default_rng(3)
    before = rng.bit_generator.state
    assert draw_channel_gain(ue, rng) == ue.channel_gain
    # the generator must not have been touched
    assert rng.bit_generator.state == before
    assert draw_channel_gain(ue, None) == ue.channel_gain


def test_varying_channel_is_mean_preserving():
    ue = _ue(variance=0.3)
    rng = np.random.default_rng(7)
    draws = np.array([draw_channel_gain(ue, rng) for _ in range(20000)])
    assert np.all(draws > 0)
    assert np.mean(draws) == pytest.approx(ue.channel_gain, rel=0.02)


def test_varying_channel_requires_rng():
    with pytest.raises(ValueError):
        draw_channel_gain(_ue(variance=0.3), None)


def test_radio_env_round_robin_blocks():
    env = simple_radio(3)
    assert env.block_for("ap0", 0).index == 0
    assert env.block_for("ap0", 4).index == 1
    with pytest.raises(ScenarioSchemaError):
        env.blocks_of("ap9")


def test_radio_env_from_doc_and_clusters():
    topo = star_topology(3)
    doc = {
        "noise_density": 4e-21, "downlink_rate": 2e7, "signalling_delay": 0.01,
        "cells": {"ap0": {"num_blocks": 4, "block_bandwidth": 180e3}},
        "noma_clusters": [{"members": ["ue0", "ue1"], "powers": [0.3, 0.1],
                           "blocks": [2, 3]}],
    }
    env = RadioEnv.from_doc(doc, topo)
    cluster = env.cluster_of("ue0")
    assert cluster is not None and cluster.total_bandwidth == pytest.approx(360e3)
    assert env.cluster_of("ue2") is None
    scheme = env.scheme("noma_grant_free")
    assert scheme.signalling_delay == 0.0
    assert env.scheme("oma_grant_based").signalling_delay == 0.01


def test_radio_env_rejects_bad_cluster_blocks():
    topo = star_topology(2)
    doc = {
        "noise_density": 4e-21, "downlink_rate": 2e7,
        "cells": {"ap0": {"num_blocks": 2, "block_bandwidth": 180e3}},
        "noma_clusters": [{"members": ["ue0", "ue1"], "powers": [0.3, 0.1],
                           "blocks": [5]}],
    }
    with pytest.raises(ScenarioSchemaError):
        RadioEnv.from_doc(doc, topo)


def test_radio_env_rejects_double_cluster_membership():
    blocks = (ResourceBlock(0, 1e5),)
    c1 = NomaCluster(members=(("ue0", 0.3), ("ue1", 0.1)), blocks=blocks)
    c2 = NomaCluster(members=(("ue0", 0.2), ("ue2", 0.1)), blocks=blocks)
    with pytest.raises(ScenarioSchemaError):
        RadioEnv(noise_density=4e-21, cells={"ap0": blocks}, downlink_rate=1e6,
                 clusters=(c1, c2))
