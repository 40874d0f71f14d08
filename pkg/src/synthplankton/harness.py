"""Experiment configuration and the prepare -> train -> evaluate -> audit pipeline."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .architectures import DiscriminatorSpec, GeneratorSpec
from .audit import DEFAULT_TAU_PIX, audit_run
from .dataset import (
    ImageSet,
    load_prepared,
    peek_resolutions,
    prepare_dataset,
    save_image_set,
)
from .features import FeatureExtractor, cache_features, extract_features
from .metrics import evaluate
from .report import RunReport
from .trainer import GANTrainer, TrainConfig, snapshot_samples

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
SEED_ENV = "SYNTHPLANKTON_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    mode: str = "none"
    size: tuple[int, int] = (32, 32)
    count: int = 1
    flip: bool = False
    seed: int = 0
    resize: tuple[int, int] | None = None

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        if self.resize is not None:
            self.resize = tuple(int(v) for v in self.resize)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.resize if self.resize is not None else self.size


def _default_extractor() -> dict:
    return {"kind": "seeded_random_projection", "output_dim": 64, "seed": 0, "input_size": 16}


@dataclass
class MetricsConfig:
    extractor: dict = field(default_factory=_default_extractor)
    kid_estimator: str = "unbiased"
    subset_size: int = 100
    n_subsets: int = 100
    seed: int = 0


@dataclass
class AuditConfig:
    k: int = 3
    tau_pix: float = DEFAULT_TAU_PIX
    tau_feat: float | None = None
    n_generated: int = 16
    seed: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    gen_spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    disc_spec: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)

    def to_dict(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "name": self.name,
            "gen_spec": self.gen_spec.to_dict(),
            "disc_spec": self.disc_spec.to_dict(),
            "data": asdict(self.data),
            "train": self.train.to_dict(),
            "metrics": asdict(self.metrics),
            "audit": asdict(self.audit),
        }
        d["data"]["size"] = list(self.data.size)
        d["data"]["resize"] = None if self.data.resize is None else list(self.data.resize)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        version = d.get("version")
        if version != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {version!r}")
        sections = {
            "gen_spec": GeneratorSpec.from_dict,
            "disc_spec": DiscriminatorSpec.from_dict,
            "data": lambda s: DataConfig(**s),
            "train": TrainConfig.from_dict,
            "metrics": lambda s: MetricsConfig(**s),
            "audit": lambda s: AuditConfig(**s),
        }
        parsed = {}
        for key, build in sections.items():
            try:
                parsed[key] = build(d.get(key, {}))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        return cls(name=d.get("name", "experiment"), **parsed)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def apply_seed_override(config: ExperimentConfig, env=None) -> ExperimentConfig:
    """Replace every seed in the config when ``SYNTHPLANKTON_SEED`` is set."""
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV)
    if raw in (None, ""):
        return config
    seed = int(raw)
    extractor = dict(config.metrics.extractor)
    if "seed" in extractor or extractor.get("kind", "seeded_random_projection") in ("seeded_random_projection", "random"):
        extractor["seed"] = seed
    return replace(
        config,
        disc_spec=replace(config.disc_spec, feature_seed=seed),
        data=replace(config.data, seed=seed),
        train=replace(config.train, seed=seed),
        metrics=replace(config.metrics, seed=seed, extractor=extractor),
        audit=replace(config.audit, seed=seed),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    return apply_seed_override(ExperimentConfig.from_json(Path(path).read_text()))


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_json())
    return path


def resolved_train_config(config: ExperimentConfig) -> TrainConfig:
    """Training config with its evaluation settings taken from the metrics section."""
    m = config.metrics
    return replace(
        config.train,
        eval_extractor=dict(m.extractor),
        kid_estimator=m.kid_estimator,
        kid_subset_size=m.subset_size,
        kid_subsets=m.n_subsets,
    )


def validate_config(config: ExperimentConfig, data_dir: str | Path | None = None) -> None:
    """Cross-field checks; raises :class:`ConfigError` naming the offending field."""
    res = config.gen_spec.output_resolution
    d = config.data
    if d.mode not in ("none", "center", "random"):
        raise ConfigError(f"data.mode: unknown mode {d.mode!r}")
    if d.count < 1:
        raise ConfigError("data.count: must be >= 1")
    if d.mode == "center" and d.count != 1:
        raise ConfigError("data.count: center cropping yields exactly one crop per image")
    if d.resolution != (res, res):
        field_name = "data.resize" if d.resize is not None else "data.size"
        raise ConfigError(
            f"{field_name}: dataset resolution {d.resolution[0]}x{d.resolution[1]} "
            f"!= gen_spec.output_resolution {res}x{res}"
        )
    if config.disc_spec.variant == "projected" and (1 << config.disc_spec.n_projections) > res:
        raise ConfigError(f"disc_spec.n_projections: {config.disc_spec.n_projections} too deep for resolution {res}")
    try:
        FeatureExtractor.from_config(config.metrics.extractor)
    except ValueError as exc:
        raise ConfigError(f"metrics.extractor: {exc}") from exc
    if config.metrics.kid_estimator not in ("biased", "unbiased"):
        raise ConfigError(f"metrics.kid_estimator: unknown estimator {config.metrics.kid_estimator!r}")
    if config.metrics.subset_size < 1 or config.metrics.n_subsets < 1:
        raise ConfigError("metrics.subset_size / metrics.n_subsets: must be positive")
    if config.audit.k < 1:
        raise ConfigError("audit.k: must be >= 1")
    if config.audit.n_generated < 1:
        raise ConfigError("audit.n_generated: must be >= 1")

    if data_dir is None:
        return
    if not Path(data_dir).is_dir():
        raise ConfigError(f"data: directory {data_dir} does not exist")
    try:
        sizes = peek_resolutions(data_dir)
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc
    if not sizes:
        raise ConfigError(f"data: no images found in {data_dir}")
    if d.mode == "none":
        if len(sizes) > 1:
            raise ConfigError(f"data: inconsistent resolutions {sorted(sizes)}")
        native = next(iter(sizes))
        if d.resize is None and native != d.size:
            raise ConfigError(
                f"data.size: images in {data_dir} are {native[0]}x{native[1]}, "
                f"generator expects {res}x{res}"
            )
    else:
        for h, w in sizes:
            if d.size[0] > h or d.size[1] > w:
                raise ConfigError(f"data.size: crop {d.size[0]}x{d.size[1]} exceeds image {h}x{w}")


def prepare_from_config(config: ExperimentConfig, data_dir: str | Path) -> ImageSet:
    d = config.data
    return prepare_dataset(data_dir, d.mode, d.size, d.count, d.flip, d.seed, d.resize)


def run_experiment(config: ExperimentConfig, data_dir: str | Path, out_dir: str | Path) -> RunReport:
    """Run prepare -> train -> evaluate -> audit under ``out_dir`` and return the report row.

    Layout: ``data/`` (prepared images + manifest), ``checkpoints/``, ``samples/``,
    ``history.csv``, ``report.json``, ``eval/`` (feature caches + metric
    report), ``audit/`` (neighbour reports + panels), ``experiment.json``.
    """
    config = apply_seed_override(config)
    validate_config(config, data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "experiment.json")

    save_image_set(prepare_from_config(config, data_dir), out / "data")
    data = load_prepared(out / "data")

    trainer = GANTrainer(config.gen_spec, config.disc_spec, data, resolved_train_config(config), out)
    trainer.run()

    m = config.metrics
    extractor = FeatureExtractor.from_config(m.extractor)
    fake = snapshot_samples(trainer.state, config.train.eval_samples, m.seed + 1, out / "eval", tag="generated", individual=False)
    f_real = extract_features(data, extractor)
    f_fake = extract_features(fake, extractor)
    cache_features(f_real, out / "eval" / "real.featcache")
    cache_features(f_fake, out / "eval" / "fake.featcache")
    metric_report = evaluate(
        f_real, f_fake, fake, m.kid_estimator, m.subset_size, m.n_subsets, m.seed, config.train.collapse_threshold
    )
    (out / "eval" / "report.json").write_text(json.dumps(metric_report.to_dict(), indent=2))

    a = config.audit
    queries = snapshot_samples(trainer.state, a.n_generated, a.seed + 2, out / "audit", tag="queries", individual=True)
    audit = audit_run(queries, data, extractor, a.k, a.tau_pix, a.tau_feat, out / "audit", seed=a.seed)

    trainer.write_report(
        extra={
            "name": config.name,
            "fid_vs_full_dataset": metric_report.fid,
            "kid_vs_full_dataset": metric_report.kid,
            "audit": audit.summary(),
        }
    )
    trainer._samples(individual=True)
    return trainer.report()
