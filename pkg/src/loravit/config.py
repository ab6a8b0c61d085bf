"""Line-oriented key=value run configuration.

One flat dotted keyspace covers the model, adapter, loss, trainer and
dataset blocks. Unknown keys are rejected, every value is validated by
its block's own constructor, and formatting a config then parsing it
reproduces an identical RunConfig (the resolved-config echo contract).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .data import FAMILIES, ManipulationFamily, Quality, parse_family
from .errors import ConfigError, LoravitError
from .lora import LoraConfig, Target, parse_target
from .losses import CenterPolicy, EmptyClassPolicy, LossConfig
from .train import TrainConfig
from .vit import ViTConfig


@dataclass(frozen=True)
class DataConfig:
    n_real: int = 180
    n_fake_per_family: int = 60
    base_seed: int = 0
    domains: int = 5
    qualities: tuple[Quality, ...] = (Quality.HQ, Quality.LQ)
    families: tuple[ManipulationFamily, ...] = FAMILIES

    def __post_init__(self):
        if self.n_real < 1 or self.n_fake_per_family < 1:
            raise ConfigError("data counts must be positive")
        if self.domains < 1:
            raise ConfigError("data.domains must be >= 1")
        if not self.qualities or not self.families:
            raise ConfigError("data.qualities and data.families must be non-empty")
        if len(set(self.families)) != len(self.families):
            raise ConfigError("duplicate entries in data.families")


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig = ViTConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    lora_enabled: bool = True

    def dataset_spec(self, quality: Quality, domain_id: int):
        from .data import DatasetSpec

        return DatasetSpec(
            n_real=self.data.n_real,
            n_fake_per_family=self.data.n_fake_per_family,
            quality=quality,
            domain_id=domain_id,
            base_seed=self.data.base_seed,
            image_size=self.model.image_size,
            channels=self.model.channels,
        )


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _parse_quality(text: str) -> Quality:
    for q in Quality:
        if q.value.lower() == text.lower():
            return q
    raise ConfigError(f"unknown quality tier {text!r}; valid: HQ, LQ")


def _parse_center_policy(text: str) -> CenterPolicy:
    if text.lower() == CenterPolicy.BATCH_MEAN.value:
        return CenterPolicy.BATCH_MEAN
    raise ConfigError(f"unknown center policy {text!r}; valid: batch_mean")


def _parse_empty_policy(text: str) -> EmptyClassPolicy:
    if text.lower() == EmptyClassPolicy.SKIP_SCL.value:
        return EmptyClassPolicy.SKIP_SCL
    raise ConfigError(f"unknown empty-class policy {text!r}; valid: skip_scl")


def _csv(parse_one):
    def parse(text: str):
        items = [part.strip() for part in text.split(",") if part.strip()]
        if not items:
            raise ConfigError("expected a non-empty comma-separated list")
        return tuple(parse_one(p) for p in items)

    return parse


# key -> (getter from RunConfig, value parser, value formatter)
_KEYS = {
    "model.image_size": (lambda c: c.model.image_size, int, str),
    "model.patch_size": (lambda c: c.model.patch_size, int, str),
    "model.channels": (lambda c: c.model.channels, int, str),
    "model.embed_dim": (lambda c: c.model.embed_dim, int, str),
    "model.depth": (lambda c: c.model.depth, int, str),
    "model.heads": (lambda c: c.model.heads, int, str),
    "model.mlp_ratio": (lambda c: c.model.mlp_ratio, int, str),
    "model.head_hidden": (lambda c: c.model.head_hidden, int, str),
    "model.seed": (lambda c: c.model.seed, int, str),
    "lora.enabled": (lambda c: c.lora_enabled, _parse_bool, _fmt_bool),
    "lora.rank": (lambda c: c.train.lora.rank, int, str),
    "lora.scale": (lambda c: c.train.lora.scale, float, repr),
    "lora.targets": (lambda c: c.train.lora.targets,
                     _csv(parse_target), lambda v: ",".join(t.value for t in v)),
    "lora.init_std": (lambda c: c.train.lora.init_std, float, repr),
    "lora.freeze_head": (lambda c: c.train.freeze_head, _parse_bool, _fmt_bool),
    "loss.lambda": (lambda c: c.train.loss.lam, float, repr),
    "loss.margin": (lambda c: c.train.loss.margin, float, repr),
    "loss.center_policy": (lambda c: c.train.loss.center_policy,
                           _parse_center_policy, lambda v: v.value),
    "loss.empty_class_policy": (lambda c: c.train.loss.empty_class_policy,
                                _parse_empty_policy, lambda v: v.value),
    "train.learning_rate": (lambda c: c.train.learning_rate, float, repr),
    "train.weight_decay": (lambda c: c.train.weight_decay, float, repr),
    "train.beta1": (lambda c: c.train.beta1, float, repr),
    "train.beta2": (lambda c: c.train.beta2, float, repr),
    "train.adam_epsilon": (lambda c: c.train.adam_epsilon, float, repr),
    "train.batch_size": (lambda c: c.train.batch_size, int, str),
    "train.steps": (lambda c: c.train.steps, int, str),
    "train.seed": (lambda c: c.train.seed, int, str),
    "train.full_finetune_baseline": (lambda c: c.train.full_finetune_baseline,
                                     _parse_bool, _fmt_bool),
    "data.n_real": (lambda c: c.data.n_real, int, str),
    "data.n_fake_per_family": (lambda c: c.data.n_fake_per_family, int, str),
    "data.base_seed": (lambda c: c.data.base_seed, int, str),
    "data.domains": (lambda c: c.data.domains, int, str),
    "data.qualities": (lambda c: c.data.qualities,
                       _csv(_parse_quality), lambda v: ",".join(q.value for q in v)),
    "data.families": (lambda c: c.data.families,
                      _csv(parse_family), lambda v: ",".join(f.value for f in v)),
}


def parse_assignment(line: str):
    if "=" not in line:
        raise ConfigError(f"malformed config line {line!r}; expected key=value")
    key, _, value = line.partition("=")
    return key.strip(), value.strip()


def _raw_from_lines(lines, source: str):
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, value = parse_assignment(stripped)
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        raw[key] = value
    return raw


def build_config(raw: dict) -> RunConfig:
    """Construct a RunConfig from raw key->string values over defaults."""
    values = {}
    for key, text in raw.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        _, parser, _ = _KEYS[key]
        try:
            values[key] = parser(text)
        except LoravitError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: invalid value {text!r}") from exc

    def get(key, default):
        return values.get(key, default)

    model = ViTConfig(
        image_size=get("model.image_size", 32),
        patch_size=get("model.patch_size", 8),
        channels=get("model.channels", 1),
        embed_dim=get("model.embed_dim", 64),
        depth=get("model.depth", 2),
        heads=get("model.heads", 4),
        mlp_ratio=get("model.mlp_ratio", 4),
        head_hidden=get("model.head_hidden", 32),
        seed=get("model.seed", 0),
    )
    lora = LoraConfig(
        rank=get("lora.rank", 4),
        scale=get("lora.scale", 1.0),
        targets=get("lora.targets", (Target.QUERY, Target.KEY)),
        init_std=get("lora.init_std", 0.02),
    )
    loss = LossConfig(
        lam=get("loss.lambda", 0.5),
        margin=get("loss.margin", 3.0),
        center_policy=get("loss.center_policy", CenterPolicy.BATCH_MEAN),
        empty_class_policy=get("loss.empty_class_policy", EmptyClassPolicy.SKIP_SCL),
    )
    train = TrainConfig(
        learning_rate=get("train.learning_rate", 1e-4),
        weight_decay=get("train.weight_decay", 1e-5),
        beta1=get("train.beta1", 0.9),
        beta2=get("train.beta2", 0.999),
        adam_epsilon=get("train.adam_epsilon", 1e-8),
        batch_size=get("train.batch_size", 36),
        steps=get("train.steps", 500),
        seed=get("train.seed", 0),
        loss=loss,
        lora=lora,
        freeze_head=get("lora.freeze_head", False),
        full_finetune_baseline=get("train.full_finetune_baseline", False),
    )
    data = DataConfig(
        n_real=get("data.n_real", 180),
        n_fake_per_family=get("data.n_fake_per_family", 60),
        base_seed=get("data.base_seed", 0),
        domains=get("data.domains", 5),
        qualities=get("data.qualities", (Quality.HQ, Quality.LQ)),
        families=get("data.families", FAMILIES),
    )
    return RunConfig(model=model, train=train, data=data,
                     lora_enabled=get("lora.enabled", True))


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    return build_config(_raw_from_lines(text.splitlines(), source))


def load_config(path, overrides=None) -> RunConfig:
    """Read a config file (optional) and apply key=value overrides on
    top; overrides win."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = _raw_from_lines(fh.read().splitlines(), str(path))
    for item in overrides or []:
        key, value = parse_assignment(item)
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r} in override {item!r}")
        raw[key] = value
    return build_config(raw)


def format_config(cfg: RunConfig) -> str:
    """Canonical resolved-config text: every key, definition order."""
    lines = []
    for key, (getter, _parser, formatter) in _KEYS.items():
        lines.append(f"{key}={formatter(getter(cfg))}")
    return "\n".join(lines) + "\n"


def write_resolved_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def configs_differ_only_in(cfg_a: RunConfig, cfg_b: RunConfig, allowed_keys) -> bool:
    """True when the serialized configs differ in no key outside
    ``allowed_keys`` (the ablation rows-differ-only-in-knobs check)."""
    a = dict(line.split("=", 1) for line in format_config(cfg_a).strip().splitlines())
    b = dict(line.split("=", 1) for line in format_config(cfg_b).strip().splitlines())
    changed = {k for k in a if a[k] != b[k]}
    return changed <= set(allowed_keys)
