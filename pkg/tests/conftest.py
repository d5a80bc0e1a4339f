import numpy as np
import pytest

from core.settings import ChannelParams, SizeProfile
from core.types import DatasetShard, Device


def make_shard(rows: int = 20, dim: int = 4, num_classes: int = 3, seed: int = 0) -> DatasetShard:
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(rows, dim))
    labels = np.arange(rows, dtype=np.int64) % num_classes
    return DatasetShard(features, labels, num_classes)


def make_device(
    device_id: int,
    position: tuple[float, float] = (0.0, 0.0),
    reliability: float = 0.9,
    compute: float = 1.0e8,
    rows: int = 20,
) -> Device:
    return Device(
        id=device_id,
        position=position,
        compute=compute,
        tx_power=0.1,
        dataset=make_shard(rows, seed=device_id),
        reliability=reliability,
    )


def grid_devices(n: int, spacing: float = 100.0, reliability: float = 0.9) -> list[Device]:
    """一辺 ceil(sqrt(n)) の格子に並べた端末"""
    side = int(np.ceil(np.sqrt(n)))
    return [
        make_device(i, ((i % side) * spacing, (i // side) * spacing), reliability, compute=1.0e8 * (1 + i % 4))
        for i in range(n)
    ]


@pytest.fixture
def channel() -> ChannelParams:
    return ChannelParams()


@pytest.fixture
def sizes() -> SizeProfile:
    return SizeProfile(model_size=4096.0)


def small_scenario(**overrides):
    """数秒で終わる 10 端末のシナリオ (辞書で渡したセクションは既定値に上書き)"""
    from meshledger.config_store import scenario_from_dict

    data = {
        "num_devices": 10,
        "seed": 3,
        "reliability": "high",
        "fl": {
            "learning_rate": 0.1,
            "batch_size": 32,
            "input_dim": 8,
            "num_classes": 4,
            "dataset_samples": 1000,
            "verify_sample": 32,
        },
        "protocol": {"chi": 4},
        "stop": {"target_accuracy": 1.0, "max_rounds": 10},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return scenario_from_dict(data)
