import math

import numpy as np
import pytest

from core import radio
from core.errors import InvalidInputError
from core.settings import ChannelParams, SizeProfile
from core.types import Partition

from conftest import grid_devices, make_device


def test_channel_gain_free_space_form(channel):
    d = 250.0
    expected = 4.11 * (3.0e8 / (4 * math.pi * 915.0e6 * d)) ** 2.8
    assert radio.channel_gain(d, channel) == pytest.approx(expected, rel=1e-12)


def test_channel_gain_decreases_with_distance(channel):
    gains = [radio.channel_gain(d, channel) for d in (10.0, 100.0, 1000.0)]
    assert gains[0] > gains[1] > gains[2] > 0


def test_coincident_devices_rejected(channel):
    with pytest.raises(InvalidInputError, match="coincident devices"):
        radio.channel_gain(0.0, channel)
    a, b = make_device(0, (5.0, 5.0)), make_device(1, (5.0, 5.0))
    with pytest.raises(InvalidInputError, match="coincident devices"):
        radio.rate_matrix([a, b], channel)


def test_rate_matrix_matches_pairwise_rates(channel):
    devices = grid_devices(6)
    rates = radio.rate_matrix(devices, channel)
    assert np.all(np.isinf(np.diag(rates)))
    for i in range(6):
        for j in range(6):
            if i != j:
                assert rates[i, j] == pytest.approx(radio.comm_rate(devices[i], devices[j], channel), rel=1e-12)


def test_train_latency_committee_member_has_no_upload(channel, sizes):
    head = make_device(0, (0.0, 0.0))
    member = make_device(1, (100.0, 0.0))
    compute_only = sizes.train_cost * member.dataset.size / member.compute
    assert radio.train_latency(head, head, sizes, channel) == pytest.approx(
        sizes.train_cost * head.dataset.size / head.compute
    )
    expected = compute_only + 8 * sizes.model_size / radio.comm_rate(member, head, channel)
    assert radio.train_latency(member, head, sizes, channel) == pytest.approx(expected)


def test_upload_latency_unreachable(sizes):
    with pytest.raises(InvalidInputError, match="unreachable committee member"):
        radio.upload_latency(0.0, sizes)
    assert radio.upload_latency(math.inf, sizes) == 0.0


def test_broadcast_term_scales_with_committee(channel, sizes):
    unit = (sizes.block_size + sizes.model_size + 2 * sizes.msg_size) / channel.broadcast_unit_bytes
    assert radio.broadcast_term(4, sizes, channel) == pytest.approx(0.5 * 3 * unit)
    assert radio.broadcast_term(1, sizes, channel) == 0.0


def test_verify_latency_terms(channel, sizes):
    committee = grid_devices(4)
    requester = committee[0]
    terms = radio.verify_terms(requester, committee, sizes, channel)
    assert terms.generate == pytest.approx(sizes.gen_cost / requester.compute)
    assert terms.verify == pytest.approx(max(sizes.verify_cost / d.compute for d in committee[1:]))
    assert terms.commit == pytest.approx(max(sizes.commit_cost / d.compute for d in committee))
    assert radio.verify_latency(requester, committee, sizes, channel, K=4) == pytest.approx(terms.total)


def test_verify_latency_needs_bft_minimum(channel, sizes):
    committee = grid_devices(3)
    with pytest.raises(InvalidInputError, match="BFT minimum violated"):
        radio.verify_latency(committee[0], committee, sizes, channel)


def test_round_latency_max_is_sum_of_parts(channel, sizes):
    devices = grid_devices(8)
    partition = Partition(
        assignments={d.id: d.id % 4 for d in devices},
        committee={0: 0, 1: 1, 2: 2, 3: 3},
    )
    latency = radio.round_latency(partition, devices, sizes, channel)
    assert set(latency.per_device) == {d.id for d in devices}
    for device_id, total in latency.per_device.items():
        assert total == pytest.approx(latency.training[device_id] + latency.verification[device_id])
    assert latency.max == max(latency.per_device.values())
    # 同じクラスタの端末は同じ遅延
    assert latency.per_device[0] == latency.per_device[4]


def test_round_latency_rejects_too_few_clusters(channel, sizes):
    devices = grid_devices(6)
    partition = Partition({d.id: d.id % 3 for d in devices}, {0: 0, 1: 1, 2: 2})
    with pytest.raises(InvalidInputError, match="BFT minimum violated"):
        radio.round_latency(partition, devices, sizes, channel)


@pytest.mark.parametrize("N", range(4, 201))
def test_comm_reduction_closed_form_is_exact(N):
    sp = SizeProfile(model_size=48_000, block_size=1024)
    result = radio.comm_complexity(N, 4, sp)
    assert result.reduction == radio.max_comm_reduction(N, sp)
    assert result.reduction > 0


def test_comm_complexity_requires_valid_k():
    with pytest.raises(InvalidInputError):
        radio.comm_complexity(10, 3, SizeProfile(model_size=1.0))
    with pytest.raises(InvalidInputError):
        radio.comm_complexity(10, 11, SizeProfile(model_size=1.0))


def test_update_consensus_latency(sizes):
    cp = ChannelParams()
    committee = grid_devices(5)
    expected = 2 * 0.5 * 4 * sizes.msg_size / 1000.0 + max(sizes.commit_cost / d.compute for d in committee)
    assert radio.update_consensus_latency(committee, sizes, cp) == pytest.approx(expected)


def test_comm_rate_unit_snr_gives_bandwidth():
    cp = ChannelParams(bandwidth=1.0e6, noise_power=1.0e-13)
    assert radio.shannon_rate(0.5, 2.0e-13, cp) == pytest.approx(1.0e6)
    assert radio.shannon_rate(0.0, 2.0e-13, cp) == 0.0


def test_round_latency_matches_hand_oracle(channel, sizes):
    devices = grid_devices(8)
    partition = Partition({d.id: d.id % 4 for d in devices}, {0: 0, 1: 1, 2: 2, 3: 3})
    head, member = devices[0], devices[4]
    committee = devices[:4]

    train = max(
        sizes.train_cost * head.dataset.size / head.compute,
        sizes.train_cost * member.dataset.size / member.compute
        + 8 * sizes.model_size / radio.comm_rate(member, head, channel),
    )
    aggregate = sizes.agg_cost * 2 / head.compute
    verify = (
        sizes.gen_cost / head.compute
        + 0.5 * 3 * (sizes.block_size + sizes.model_size + 2 * sizes.msg_size) / 1000.0
        + max(sizes.verify_cost / d.compute for d in committee[1:])
        + max(sizes.commit_cost / d.compute for d in committee)
        + max(8 * sizes.msg_size / radio.comm_rate(d, head, channel) for d in committee[1:])
    )

    latency = radio.round_latency(partition, devices, sizes, channel)
    assert latency.training[4] == pytest.approx(train + aggregate, rel=1e-12)
    assert latency.verification[4] == pytest.approx(verify, rel=1e-12)
    assert latency.per_device[0] == pytest.approx(train + aggregate + verify, rel=1e-12)


def test_single_cluster_round_latency_is_central_aggregation(channel, sizes):
    devices = grid_devices(6)
    head = devices[0]
    partition = Partition({d.id: 0 for d in devices}, {0: 0})
    train = max(radio.train_latency(d, head, sizes, channel) for d in devices)
    expected = (
        train
        + sizes.agg_cost * 6 / head.compute
        + sizes.gen_cost / head.compute
        + sizes.commit_cost / head.compute
    )
    latency = radio.round_latency(partition, devices, sizes, channel)
    assert set(latency.per_device) == {d.id for d in devices}
    for total in latency.per_device.values():
        assert total == pytest.approx(expected, rel=1e-12)


def test_single_cluster_still_needs_a_member_head(channel, sizes):
    devices = grid_devices(6)
    partition = Partition({d.id: 0 for d in devices}, {0: 99})
    with pytest.raises(InvalidInputError, match="BFT minimum violated"):
        radio.round_latency(partition, devices, sizes, channel)


def test_sync_latency_waits_for_slowest_member(channel, sizes):
    head, near, far = make_device(0, (0.0, 0.0)), make_device(1, (50.0, 0.0)), make_device(2, (400.0, 0.0))
    expected = 8 * sizes.msg_size / radio.comm_rate(head, far, channel)
    assert radio.sync_latency([head, near, far], head, sizes, channel) == pytest.approx(expected)
    assert radio.sync_latency([head], head, sizes, channel) == 0.0
