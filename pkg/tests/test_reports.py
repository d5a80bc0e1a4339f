import csv

import pytest

from core import secmetric
from core.consensus import Ledger
from core.errors import InvalidInputError
from core.settings import Scenario
from meshledger.plotting import plot_security, plot_storage
from meshledger.reports import security_report, storage_report

from conftest import small_scenario


def test_storage_zero_rounds_is_genesis_only():
    report = storage_report(small_scenario(), 0)
    genesis = Ledger.create(0.0).live_bytes()
    assert report.final_bytes() == {"litechain": genesis, "flc_model": genesis, "flc_hash": genesis}


def test_storage_ordering_across_schemes(tmp_path):
    report = storage_report(small_scenario(), 8)
    final = report.final_bytes()
    assert final["flc_model"] > final["flc_hash"] > final["litechain"]
    assert report.series["litechain"].epochs >= 1
    assert report.series["flc_hash"].slope > 0
    path = report.write_csv(tmp_path / "storage.csv")
    with open(path, encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["round", "litechain", "flc_model", "flc_hash"]
    assert len(rows) == 10
    assert plot_storage(report, tmp_path / "storage.png").stat().st_size > 0


@pytest.mark.slow
def test_litechain_storage_stays_bounded_over_epochs():
    chi = 4
    report = storage_report(small_scenario(protocol={"chi": chi}), 6 * chi, ["litechain", "flc_hash"])
    lite = report.series["litechain"]
    flat = report.series["flc_hash"]
    assert lite.epochs >= 5
    # 各エポックの山は最初の2エポックの山を大きく超えない
    early_peak = max(lite.bytes_per_round[: 2 * chi + 1])
    assert max(lite.bytes_per_round[2 * chi :]) <= 1.5 * early_peak
    assert flat.slope_since(chi) > 0
    assert lite.slope_since(chi) < flat.slope_since(chi)
    assert flat.bytes_per_round == tuple(sorted(flat.bytes_per_round))
    assert flat.final_bytes > lite.final_bytes


def test_storage_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        storage_report(small_scenario(), -1)
    with pytest.raises(InvalidInputError):
        storage_report(small_scenario(), 1, ["pow"])


def test_security_pinned_reliability_matches_exact_score():
    report = security_report(Scenario(), [0.99, 0.99], trials=1, num_devices=10, scheme="flc_hash")
    assert report.committee_sizes == (10,)
    assert report.scores[0] == pytest.approx(secmetric.security_enum([0.99] * 10), abs=1e-9)


def test_security_litechain_committee_is_feasible():
    report = security_report(Scenario(), "high", trials=2, num_devices=10)
    assert all(4 <= size <= 10 for size in report.committee_sizes)
    assert all(0.0 <= score <= 1.0 for score in report.scores)


def test_security_high_range_beats_medium(tmp_path):
    high = security_report(Scenario(), "high", trials=3, num_devices=50, scheme="flc_hash")
    medium = security_report(Scenario(), "medium", trials=3, num_devices=50, scheme="flc_hash")
    assert high.median > 0.95
    assert high.median > medium.median
    assert high.reliability_range == (0.66, 0.99)
    path = high.write_csv(tmp_path / "security.csv")
    assert path.read_text(encoding="utf-8").splitlines()[0] == "trial,scheme,committee_size,security_score"
    assert plot_security([high, medium], tmp_path / "security.png").exists()


def test_security_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        security_report(Scenario(), "extreme", trials=1)
    with pytest.raises(InvalidInputError):
        security_report(Scenario(), [0.9, 0.5], trials=1)
    with pytest.raises(InvalidInputError):
        security_report(Scenario(), "high", trials=0)


@pytest.mark.slow
def test_litechain_committee_is_safer_than_everyone_on_medium_reliability():
    lite = security_report(Scenario(), "medium", trials=5, num_devices=20)
    flat = security_report(Scenario(), "medium", trials=5, num_devices=20, scheme="flc_hash")
    assert lite.median > flat.median
