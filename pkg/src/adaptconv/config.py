"""Run configuration: every hyperparameter of a training or evaluation run.

Configs are plain JSON. Nested sections (``dataset``, ``augment``) map to
their own dataclasses; ``--set a.b=value`` overrides address them with
dotted keys.
"""
import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from adaptconv.tensor import ConfigError

GENERATORS = ("shapes3", "parts2", "parts-adaptive")


@dataclass
class DatasetSpec:
    generator: str = "shapes3"
    samples_per_class: int = 260
    points: int = 256
    noise: float = 0.01
    seed: int = 0
    split: list = field(default_factory=lambda: [200 / 260, 60 / 260])

    def validate(self, k=1):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; expected {GENERATORS}")
        if len(self.split) != 2 or any(f < 0 for f in self.split):
            raise ConfigError(f"split must be two non-negative fractions, got {self.split}")
        if not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.split)}")
        if self.points < k:
            raise ConfigError(f"{self.points} points per cloud is fewer than k={k}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    def split_counts(self):
        """(train, test) cloud counts per class."""
        train = int(round(self.samples_per_class * self.split[0]))
        return train, self.samples_per_class - train


@dataclass
class AugmentParams:
    shift: float = 0.1
    scale_low: float = 0.8
    scale_high: float = 1.25
    jitter_std: float = 0.02
    jitter_clip: float = 0.05
    enabled: bool = True


@dataclass
class ProtocolParams:
    """Settings of the evaluation protocols run from the command line."""
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    dropout_levels: list = field(default_factory=lambda: [256, 224, 192, 160, 128, 96, 64])
    noise_levels: list = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1])
    featmap_layer: int = 0
    featmap_target: int = 0
    featmap_cloud: int = 0


@dataclass
class RunConfig:
    task: str = "cls"  # "cls" or "seg"
    k: int = 20
    widths: list = field(default_factory=lambda: [64, 64, 128, 256])
    # per-layer kind: adapt | graph | attn_point | attn_channel; None = all adapt
    # (segmentation: last layer graph)
    layer_kinds: Optional[list] = None
    variant: str = "spatial"
    kernel_hidden: Optional[int] = None  # None = M * C / 2
    agg_width: int = 1024
    head_widths: list = field(default_factory=lambda: [512, 256])
    dropout: float = 0.5
    dynamic_graph: bool = True
    # segmentation
    pool_after: list = field(default_factory=lambda: [1, 2])
    pool_rate: int = 4
    pool_k: Optional[int] = None  # None = k
    pool_mode: str = "max"  # max | adapt
    fps_start: str = "farthest_from_centroid"
    decoder_widths: list = field(default_factory=lambda: [128])
    # shared
    norm: bool = True
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    # optimisation
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    eval_every: int = 1
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    augment: AugmentParams = field(default_factory=AugmentParams)
    protocol: ProtocolParams = field(default_factory=ProtocolParams)

    def resolved_kinds(self):
        n = len(self.widths)
        if self.layer_kinds is not None:
            if len(self.layer_kinds) != n:
                raise ConfigError(f"layer_kinds has {len(self.layer_kinds)} entries, "
                                  f"widths has {n}")
            return list(self.layer_kinds)
        if self.task == "seg":
            return ["adapt"] * (n - 1) + ["graph"]
        return ["adapt"] * n

    def validate(self):
        if self.task not in ("cls", "seg"):
            raise ConfigError(f"task must be 'cls' or 'seg', got {self.task!r}")
        if self.k < 1:
            raise ConfigError(f"k must be positive, got {self.k}")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        from adaptconv.conv import LAYER_KINDS, VARIANTS
        for kind in self.resolved_kinds():
            if kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {kind!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for batch statistics")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not self.lr_max >= self.lr_min >= 0:
            raise ConfigError("need lr_max >= lr_min >= 0")
        if self.pool_mode not in ("max", "adapt"):
            raise ConfigError(f"pool_mode must be 'max' or 'adapt', got {self.pool_mode!r}")
        if self.task == "seg" and any(not 0 <= p < len(self.widths) - 1
                                      for p in self.pool_after):
            raise ConfigError(f"pool_after entries must index layers before the last: "
                              f"{self.pool_after}")
        if self.pool_rate < 1:
            raise ConfigError("pool_rate must be positive")
        self.dataset.validate(self.k)
        n_min = self.dataset.points
        if self.task == "seg":
            for _ in self.pool_after:
                n_min = math.ceil(n_min / self.pool_rate)
            if n_min < max(self.k, self.pool_k or 1):
                raise ConfigError(f"after pooling only {n_min} points remain, fewer than "
                                  f"k={self.k}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = _sub(DatasetSpec, d["dataset"], "dataset")
        if "augment" in d:
            d["augment"] = _sub(AugmentParams, d["augment"], "augment")
        if "protocol" in d:
            d["protocol"] = _sub(ProtocolParams, d["protocol"], "protocol")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def override(self, assignments):
        """Apply ``key=value`` strings; values parse as JSON, else as strings."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.strip().split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section {part!r} in {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _sub(klass, d, name):
    if isinstance(d, klass):
        return d
    known = {f.name for f in dataclasses.fields(klass)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys {sorted(unknown)}")
    return klass(**d)


def stream(seed, name):
    """Independent generator for the named randomness sub-stream."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def desk_classification(**overrides):
    """Small classification config used by the tests and the README examples."""
    cfg = RunConfig(task="cls", k=20, widths=[16, 16, 32], kernel_hidden=16, agg_width=64,
                    head_widths=[32], dropout=0.5, epochs=3, batch_size=8)
    return dataclasses.replace(cfg, **overrides)


def desk_segmentation(**overrides):
    cfg = RunConfig(task="seg", k=16, widths=[16, 16, 32, 32, 32], kernel_hidden=16,
                    pool_after=[1, 2], decoder_widths=[32], epochs=10, batch_size=8,
                    dataset=DatasetSpec(generator="parts2", samples_per_class=40, points=512,
                                        noise=0.005, split=[0.75, 0.25]))
    return dataclasses.replace(cfg, **overrides)


def desk_ablation(**overrides):
    """Segmentation on parts-adaptive, the setting of the layer-type comparison."""
    cfg = desk_segmentation(epochs=12,
                            dataset=DatasetSpec(generator="parts-adaptive", samples_per_class=60,
                                                points=512, noise=0.002, split=[0.75, 0.25]))
    return dataclasses.replace(cfg, **overrides)


def full_segmentation(**overrides):
    """Full-width segmentation network; the last of the five layers is GraphConv."""
    cfg = RunConfig(task="seg", widths=[64, 64, 128, 256, 512],
                    dataset=DatasetSpec(generator="parts2", points=1024))
    return dataclasses.replace(cfg, **overrides)


PRESETS = {
    "desk-cls": desk_classification,
    "desk-seg": desk_segmentation,
    "desk-ablation": desk_ablation,
    "full-cls": RunConfig,
    "full-seg": full_segmentation,
}
