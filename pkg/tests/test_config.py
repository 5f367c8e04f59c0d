import dataclasses
import json

import numpy as np
import pytest

from adaptconv.config import (
    PRESETS,
    DatasetSpec,
    RunConfig,
    desk_classification,
    desk_segmentation,
    stream,
)
from adaptconv.tensor import ConfigError


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate_and_round_trip(name, tmp_path):
    cfg = PRESETS[name]().validate()
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert back.to_json() == cfg.to_json()


def test_override_nested_and_json_values():
    cfg = desk_classification().override(["k=5", "dataset.noise=0.02", "widths=[8, 8]",
                                          "variant=feature", "kernel_hidden=null"])
    assert cfg.k == 5 and cfg.dataset.noise == 0.02 and cfg.widths == [8, 8]
    assert cfg.variant == "feature" and cfg.kernel_hidden is None
    assert isinstance(cfg.dataset, DatasetSpec)


@pytest.mark.parametrize("item", ["nokey", "bogus=1", "dataset.bogus=1", "k.x=1"])
def test_override_rejects_unknown(item):
    with pytest.raises(ConfigError):
        desk_classification().override([item])


def test_unknown_top_level_key():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"task": "cls", "learning_rate": 0.1})


@pytest.mark.parametrize("change", [
    dict(task="det"),
    dict(k=0),
    dict(widths=[]),
    dict(layer_kinds=["adapt"]),
    dict(layer_kinds=["adapt", "conv", "adapt"]),
    dict(variant="colour"),
    dict(leaky_slope=1.0),
    dict(dropout=1.0),
    dict(batch_size=1),
    dict(epochs=0),
    dict(lr_max=0.001, lr_min=0.1),
    dict(pool_mode="mean"),
    dict(pool_rate=0),
])
def test_invalid_configs(change):
    with pytest.raises(ConfigError):
        dataclasses.replace(desk_classification(), **change).validate()


def test_pool_positions_checked_for_segmentation():
    with pytest.raises(ConfigError):
        desk_segmentation(pool_after=[4]).validate()
    # too many pooling layers for the cloud size
    with pytest.raises(ConfigError):
        desk_segmentation(pool_after=[0, 1, 2, 3]).validate()


def test_segmentation_kinds_end_with_graphconv():
    assert desk_segmentation().resolved_kinds() == ["adapt"] * 4 + ["graph"]
    assert desk_classification().resolved_kinds() == ["adapt"] * 3


def test_streams_are_named_and_reproducible():
    a = stream(0, "data").random(4)
    np.testing.assert_array_equal(a, stream(0, "data").random(4))
    assert not np.array_equal(a, stream(0, "init").random(4))
    assert not np.array_equal(a, stream(1, "data").random(4))


def test_json_is_sorted_and_complete():
    d = json.loads(desk_classification().to_json())
    assert set(d) == {f.name for f in dataclasses.fields(RunConfig)}
    assert set(d["augment"]) >= {"shift", "scale_low", "scale_high", "jitter_std", "jitter_clip"}
