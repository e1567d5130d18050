"""Run configuration: a fixed set of ``key = value`` lines.

Unknown keys are rejected. ``delta_rel``, ``k`` and ``num_classes`` accept
``auto``, resolved from the task: detection uses C=2, k=2, delta_rel=0.25;
recognition uses C=4 (the synthetic palette), k=3, delta_rel=0.35.

Optimizer, schedule, epochs and EMA decay are stand-ins; the values the
method was published with are not known.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .backbone import BackboneConfig
from .datagen import CLASS_NAMES, DataConfig
from .errors import ConfigError

TASKS = ("det", "rec")
TASK_DEFAULTS = {
    "det": {"num_classes": 2, "k": 2, "delta_rel": 0.25},
    "rec": {"num_classes": len(CLASS_NAMES), "k": 3, "delta_rel": 0.35},
}


def _ints(v) -> tuple:
    return tuple(int(x) for x in str(v).split(",") if x.strip())


def _bool(v) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _auto_int(v):
    return "auto" if str(v).strip() == "auto" else int(v)


def _auto_float(v):
    return "auto" if str(v).strip() == "auto" else float(v)


@dataclass
class RunConfig:
    task: str = "det"
    num_classes: object = "auto"
    # backbone
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 48
    depths: tuple = (2, 2, 2)
    heads: tuple = (2, 4, 8)
    window: int = 4
    num_stages: int = 3
    mlp_ratio: int = 4
    rel_pos_bias: bool = True
    # patch labeling teacher / pseudo labels
    use_plt: bool = True
    ema_lambda: float = 0.999
    delta_rel: object = "auto"
    filter_distressed: float = 0.5
    filter_normal: float = 0.95
    strong_augment: bool = True
    patch_loss_weight: float = 1.0
    # refiner; k = 1 is the global-average-pooling head
    k: object = "auto"
    cluster_seed: int = 0
    # optimisation
    lr: float = 3e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 0
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    # synthetic data
    train_counts: tuple = (500, 167, 167, 166)
    test_counts: tuple = (250, 84, 83, 83)
    area_min: float = 0.01
    area_max: float = 0.15
    data_seed: int = 0

    _parsers = {
        "depths": _ints, "heads": _ints, "train_counts": _ints, "test_counts": _ints,
        "rel_pos_bias": _bool, "use_plt": _bool, "strong_augment": _bool,
        "num_classes": _auto_int, "k": _auto_int, "delta_rel": _auto_float,
    }

    def __post_init__(self):
        self.validate()

    # -- derived values --------------------------------------------------
    @property
    def n_classes(self) -> int:
        return TASK_DEFAULTS[self.task]["num_classes"] if self.num_classes == "auto" else int(self.num_classes)

    @property
    def n_groups(self) -> int:
        return TASK_DEFAULTS[self.task]["k"] if self.k == "auto" else int(self.k)

    @property
    def delta(self) -> float:
        return TASK_DEFAULTS[self.task]["delta_rel"] if self.delta_rel == "auto" else float(self.delta_rel)

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.image_size, self.patch_size, self.embed_dim, self.depths, self.heads,
                              self.window, self.num_stages, self.mlp_ratio, self.rel_pos_bias)

    @property
    def data(self) -> DataConfig:
        return DataConfig(self.train_counts, self.test_counts, self.image_size,
                          self.area_min, self.area_max, self.data_seed)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        c = self.n_classes
        if self.task == "det" and c != 2:
            raise ConfigError("detection is binary: num_classes must be 2")
        if self.task == "rec" and not 2 < c <= len(CLASS_NAMES):
            raise ConfigError(f"recognition needs 2 < num_classes <= {len(CLASS_NAMES)}")
        if self.n_groups < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError("delta_rel must lie in (0, 1]")
        if not 0.0 <= self.ema_lambda <= 1.0:
            raise ConfigError("ema_lambda must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 < self.area_min <= self.area_max < 1.0:
            raise ConfigError("need 0 < area_min <= area_max < 1")
        self.backbone  # noqa: B018 - raises ConfigError on bad geometry
        if self.n_groups > self.backbone.num_tokens:
            raise ConfigError(f"k={self.n_groups} exceeds the {self.backbone.num_tokens} tokens")

    # -- serialisation ---------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            try:
                parse = cls._parsers.get(key) or _scalar_parser(known[key])
                values[key] = parse(val)
            except ValueError as exc:
                raise ConfigError(f"line {n}: bad value for {key}: {exc}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _scalar_parser(f):
    default = f.default
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str
