import json
from dataclasses import replace

import numpy as np
import pytest

from core.errors import ConfigError
from meshledger.simulator import CSV_COLUMNS, build_network, run_scenario

from conftest import small_scenario


def test_same_seed_gives_identical_metrics():
    scenario = small_scenario()
    assert run_scenario(scenario).metrics_csv() == run_scenario(scenario).metrics_csv()


def test_time_accounting_reconciles():
    log = run_scenario(small_scenario())
    assert log.time_reconciled()
    times = [row.sim_time for row in log.rows]
    assert times[0] == 0.0
    assert times == sorted(times)
    assert log.rows[-1].round == 10
    assert log.epochs >= 1


def test_network_is_identical_across_schemes():
    base = small_scenario()
    networks = [build_network(replace(base, scheme=s)) for s in ("litechain", "flc_model", "flc_hash")]
    for other in networks[1:]:
        assert other.devices == networks[0].devices
        np.testing.assert_array_equal(other.init_weights, networks[0].init_weights)


def test_flc_variants_share_accuracy_but_not_storage():
    model_log = run_scenario(small_scenario(scheme="flc_model"))
    hash_log = run_scenario(small_scenario(scheme="flc_hash"))
    assert [r.test_accuracy for r in model_log.rows] == [r.test_accuracy for r in hash_log.rows]
    assert model_log.rows[-1].ledger_bytes > hash_log.rows[-1].ledger_bytes
    assert model_log.epochs == hash_log.epochs == 0


def test_flc_committee_is_everyone():
    log = run_scenario(small_scenario(scheme="flc_hash"))
    assert log.partition.num_clusters == 10
    assert log.partition.committee_ids() == list(range(10))


def test_stops_at_target():
    log = run_scenario(small_scenario(stop={"target_accuracy": 0.0, "max_rounds": 10}))
    assert log.rows[-1].round == 1
    assert log.summary()["reached_target"]


def test_model_improves_over_rounds():
    log = run_scenario(small_scenario())
    assert log.final_accuracy > log.rows[0].test_accuracy


def test_replay_attack_is_screened_with_duplicate_detection():
    attack = {"kind": "replay", "attacker_rate": 0.3, "replay_rate": 1.0}
    detected = run_scenario(small_scenario(attack=attack))
    assert detected.totals()["offchain_replay"] > 0
    assert len(detected.attackers) == 3
    undetected = run_scenario(small_scenario(attack=attack, protocol={"chi": 4, "duplicate_detection": False}))
    assert undetected.totals()["offchain_replay"] == 0
    for block in detected.ledger.model_blocks():
        ids = [p.update_id for p in block.participation if p.verified]
        assert len(ids) == len(set(ids))


def test_committee_vote_no_counts_rejections():
    log = run_scenario(small_scenario(scheme="flc_hash", attack={"kind": "committee_vote_no", "attacker_rate": 0.5}))
    assert log.totals()["rejected_votes"] > 0
    assert log.totals()["committed"] == 0


def test_invalid_scenario_rejected():
    with pytest.raises(ConfigError):
        run_scenario(replace(small_scenario(), num_devices=2))


def test_write_outputs(tmp_path):
    log = run_scenario(small_scenario())
    out = log.write(tmp_path / "run")
    header = (out / "metrics.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header.split(",") == CSV_COLUMNS
    assert len((out / "metrics.csv").read_text(encoding="utf-8").splitlines()) == len(log.rows) + 1
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["scheme"] == "litechain"
    assert summary["time_reconciled"] is True
    assert summary["rounds"] == 10
    for name in ("accuracy_grid.csv", "clustering_trace.csv", "ledger.jsonl"):
        assert (out / name).exists()
    grid = (out / "accuracy_grid.csv").read_text(encoding="utf-8").splitlines()
    assert grid[1].startswith("0.0,")


@pytest.mark.slow
def test_desk_convergence_twenty_devices():
    scenario = small_scenario(
        num_devices=20,
        fl={"input_dim": 20, "num_classes": 10, "dataset_samples": 4000},
        protocol={"chi": 20},
        stop={"target_accuracy": 0.5, "max_rounds": 200},
    )
    log = run_scenario(scenario)
    assert log.partition.num_clusters >= 4
    assert log.final_accuracy >= 0.5


@pytest.mark.slow
@pytest.mark.parametrize("num_devices, target", [(20, 0.73), (50, 0.6)])
def test_litechain_reaches_target_sooner_than_one_tier(num_devices, target):
    base = dict(
        num_devices=num_devices,
        fl={"input_dim": 20, "num_classes": 10, "dataset_samples": 4000},
        protocol={"chi": 20},
        stop={"target_accuracy": target, "max_rounds": 300},
    )
    times = {
        scheme: run_scenario(small_scenario(scheme=scheme, **base)).time_to_accuracy(target)
        for scheme in ("litechain", "flc_hash", "flc_model")
    }
    assert None not in times.values(), times
    assert times["litechain"] < times["flc_hash"]
    assert times["litechain"] < times["flc_model"]


def mean_final_accuracy(seeds=(3, 5, 8), **overrides):
    return float(np.mean([run_scenario(small_scenario(seed=seed, **overrides)).final_accuracy for seed in seeds]))


@pytest.mark.slow
def test_replay_detection_does_not_hurt_accuracy():
    attack = {"kind": "replay", "attacker_rate": 0.5, "replay_rate": 0.5}
    base = dict(num_devices=20, attack=attack, stop={"target_accuracy": 1.0, "max_rounds": 40})
    detected = mean_final_accuracy(**base)
    undetected = mean_final_accuracy(protocol={"chi": 4, "duplicate_detection": False}, **base)
    assert detected >= undetected


@pytest.mark.slow
@pytest.mark.parametrize("rate", [0.1, 0.2, 0.4])
def test_quality_filter_limits_label_flip_damage(rate):
    def drop(scheme, quality_filter):
        common = dict(
            num_devices=20,
            scheme=scheme,
            protocol={"chi": 4, "quality_filter": quality_filter},
            stop={"target_accuracy": 1.0, "max_rounds": 30},
        )
        clean = mean_final_accuracy(attack={"kind": "label_flip", "attacker_rate": 0.0}, **common)
        attacked = mean_final_accuracy(attack={"kind": "label_flip", "attacker_rate": rate}, **common)
        return clean - attacked

    assert drop("litechain", True) < drop("flc_hash", False)


@pytest.mark.parametrize("kind", ["replay", "label_flip", "committee_vote_no"])
def test_zero_attack_rate_leaves_run_unchanged(kind):
    honest = run_scenario(small_scenario()).metrics_csv()
    attacked = run_scenario(small_scenario(attack={"kind": kind, "attacker_rate": 0.0, "replay_rate": 1.0}))
    assert attacked.attackers == frozenset()
    assert attacked.metrics_csv() == honest
