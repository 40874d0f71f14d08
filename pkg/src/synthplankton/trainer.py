"""Adversarial training loop with checkpoint/resume, timing and periodic FID/KID.

Each iteration is one discriminator update followed by one generator update.
Batches and latents are pure functions of (seed, iteration, epoch), so a run
resumed from a checkpoint replays exactly the same sequence as an
uninterrupted one.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .architectures import (
    DiscriminatorSpec,
    GeneratorSpec,
    ProjectedDiscriminator,
    build_discriminator,
    build_generator,
    checksum,
    generate,
)
from .dataset import ImageSet, batch_indices, holdout_split
from .features import FeatureExtractor, extract_features
from .imageops import image_grid, save_png
from .metrics import compute_stats, diversity_score, fid, is_collapsed, kid
from .report import RunReport, format_training_time

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7
CHECKPOINT_VERSION = 1
DIVERGENCE_PATIENCE = 100
HISTORY_COLUMNS = ("iteration", "wall_clock_s", "d_loss", "g_loss", "fid", "kid", "diversity", "fid_train")


class NonFiniteScores(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: "TrainState | None" = None):
        super().__init__(message)
        self.state = state


class TrainingAborted(RuntimeError):
    """Raised when a checkpoint cannot be written; ``state`` keeps the in-memory run."""

    def __init__(self, message: str, state: "TrainState | None" = None):
        super().__init__(message)
        self.state = state


# losses -----------------------------------------------------------------------

def _check_scores(scores: torch.Tensor, iteration) -> None:
    if not torch.isfinite(scores).all():
        where = "" if iteration is None else f" at iteration {iteration}"
        raise NonFiniteScores(f"non-finite scores{where}")


def discriminator_loss(real_scores, fake_scores, iteration=None):
    """-mean log D(x) - mean log(1 - D(G(z))), log arguments clamped at 1e-7."""
    real_scores = torch.as_tensor(real_scores)
    fake_scores = torch.as_tensor(fake_scores)
    _check_scores(real_scores, iteration)
    _check_scores(fake_scores, iteration)
    return (
        -torch.log(real_scores.clamp(min=LOG_EPS)).mean()
        - torch.log((1.0 - fake_scores).clamp(min=LOG_EPS)).mean()
    )


def generator_loss(fake_scores, form: str = "nonsaturating", iteration=None):
    """Non-saturating -mean log D(G(z)), or the literal mean log(1 - D(G(z)))."""
    fake_scores = torch.as_tensor(fake_scores)
    _check_scores(fake_scores, iteration)
    if form == "nonsaturating":
        return -torch.log(fake_scores.clamp(min=LOG_EPS)).mean()
    if form == "literal":
        return torch.log((1.0 - fake_scores).clamp(min=LOG_EPS)).mean()
    raise ValueError(f"unknown generator loss form {form!r}")


def gan_losses(d_real_scores, d_fake_scores, form: str = "nonsaturating", iteration=None):
    """(d_loss, g_loss) for one discriminator's scores on real and generated data."""
    return (
        discriminator_loss(d_real_scores, d_fake_scores, iteration),
        generator_loss(d_fake_scores, form, iteration),
    )


def projected_losses(per_discriminator_scores, form: str = "nonsaturating", iteration=None):
    """Sum of :func:`gan_losses` over independent discriminators.

    ``per_discriminator_scores`` is a sequence of (real_scores, fake_scores)
    pairs, one per projection.
    """
    pairs = list(per_discriminator_scores)
    if not pairs:
        raise ValueError("no discriminators")
    d_total, g_total = gan_losses(*pairs[0], form=form, iteration=iteration)
    for real, fake in pairs[1:]:
        d, g = gan_losses(real, fake, form=form, iteration=iteration)
        d_total = d_total + d
        g_total = g_total + g
    return d_total, g_total


# config & state ---------------------------------------------------------------

def _default_extractor() -> dict:
    return {"kind": "seeded_random_projection", "output_dim": 64, "seed": 0, "input_size": 16}


@dataclass
class TrainConfig:
    iterations: int = 500
    batch_size: int = 16
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    betas: tuple[float, float] = (0.0, 0.99)
    eval_every: int = 100
    checkpoint_every: int = 100
    seed: int = 0
    device_label: str = "CPU"
    loss_form: str = "nonsaturating"
    holdout_fraction: float = 0.1
    eval_samples: int = 256
    eval_extractor: dict = field(default_factory=_default_extractor)
    kid_estimator: str = "unbiased"
    kid_subset_size: int = 100
    kid_subsets: int = 100
    sample_count: int = 16
    collapse_threshold: float = 0.01
    deterministic: bool = True
    debug: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("train.iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ValueError("train learning rates must be > 0")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("train.eval_every and train.checkpoint_every must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("train.holdout_fraction must be in [0, 1)")
        if self.eval_samples < 2:
            raise ValueError("train.eval_samples must be >= 2")
        if self.loss_form not in ("nonsaturating", "literal"):
            raise ValueError(f"train.loss_form: unknown form {self.loss_form!r}")
        if self.kid_estimator not in ("biased", "unbiased"):
            raise ValueError(f"train.kid_estimator: unknown estimator {self.kid_estimator!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class MetricPoint:
    iteration: int
    fid: float
    kid: float
    diversity: float
    fid_train: float

    def as_tuple(self) -> tuple:
        return (self.iteration, self.fid, self.kid, self.diversity, self.fid_train)


@dataclass
class TrainState:
    iteration: int
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    wall_clock_seconds: float = 0.0
    metric_history: list[MetricPoint] = field(default_factory=list)
    history_rows: list[dict] = field(default_factory=list)
    epoch: int = 0
    batch_pos: int = 0
    last_losses: tuple[float, float] | None = None
    nonfinite_streak: int = 0

    @property
    def g_params(self):
        return self.generator.state_dict()

    @property
    def d_params(self):
        return self.discriminator.state_dict()


def model_label(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec) -> str:
    if disc_spec.variant == "projected":
        return "ProjectedGAN"
    return {"baseline": "Baseline", "fastgan": "FastGAN", "stylegan2": "StyleGANv2"}[gen_spec.variant]


def _to_nchw(pixels: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) in [0, 1] -> (N, 3, H, W) in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2))) * 2.0 - 1.0


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return np.clip((pixels + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)


def latents(seed: int, tag: int, n: int, dim: int) -> np.ndarray:
    return np.random.default_rng([seed, tag, n]).standard_normal((n, dim)).astype(np.float32)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# trainer ----------------------------------------------------------------------

class GANTrainer:
    def __init__(
        self,
        gen_spec: GeneratorSpec,
        disc_spec: DiscriminatorSpec,
        data: ImageSet,
        config: TrainConfig,
        run_dir: str | Path | None = None,
    ):
        res = gen_spec.output_resolution
        if data.resolution != (res, res):
            raise ValueError(
                f"dataset resolution {data.resolution[0]}x{data.resolution[1]} != generator resolution {res}x{res}"
            )
        if len(data) < 2:
            raise ValueError("training needs at least 2 images")
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.data = data
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else None

        generator = build_generator(gen_spec, config.seed)
        discriminator = build_discriminator(disc_spec, res, config.seed + 1)
        self._d_trainable = [p for p in discriminator.parameters() if p.requires_grad]
        g_opt = torch.optim.Adam(generator.parameters(), lr=config.g_lr, betas=config.betas)
        d_opt = torch.optim.Adam(self._d_trainable, lr=config.d_lr, betas=config.betas)
        self.state = TrainState(0, generator, discriminator, g_opt, d_opt)

        self.train_idx, self.holdout_idx = holdout_split(len(data), config.holdout_fraction, config.seed)
        if len(self.holdout_idx) < 2:
            self.holdout_idx = self.train_idx
            logger.warning("holdout too small; evaluating against the training images")
        self.extractor = FeatureExtractor.from_config(config.eval_extractor)
        self.holdout_features = extract_features(data.subset(self.holdout_idx), self.extractor)
        self.holdout_stats = compute_stats(self.holdout_features)
        rng = np.random.default_rng([config.seed, 0x7EA1])
        n_ref = min(len(self.train_idx), config.eval_samples)
        ref_idx = np.sort(rng.choice(self.train_idx, n_ref, replace=False))
        self.train_stats = compute_stats(extract_features(data.subset(ref_idx), self.extractor))
        self.eval_z = latents(config.seed, 0xE7A1, config.eval_samples, gen_spec.latent_dim)
        self.sample_z = latents(config.seed, 0x5A3B, config.sample_count, gen_spec.latent_dim)
        self._epoch_batches: tuple[int, list[np.ndarray]] | None = None

    # data --------------------------------------------------------------------
    def _batches(self, epoch: int) -> list[np.ndarray]:
        if self._epoch_batches is None or self._epoch_batches[0] != epoch:
            local = batch_indices(len(self.train_idx), self.config.batch_size, self.config.seed + epoch)
            self._epoch_batches = (epoch, [self.train_idx[b] for b in local])
        return self._epoch_batches[1]

    def next_batch(self) -> torch.Tensor:
        st = self.state
        batches = self._batches(st.epoch)
        idx = batches[st.batch_pos]
        st.batch_pos += 1
        if st.batch_pos >= len(batches):
            st.epoch += 1
            st.batch_pos = 0
        return _to_nchw(self.data.pixels(idx))

    # updates -----------------------------------------------------------------
    def _scores(self, x) -> list[torch.Tensor]:
        return self.state.discriminator(x)

    def d_step(self, real: torch.Tensor, z: torch.Tensor) -> float:
        st = self.state
        with torch.no_grad():
            fake = st.generator(z)
        real_scores = self._scores(real)
        fake_scores = self._scores(fake)
        it = st.iteration
        d_loss = discriminator_loss(real_scores[0], fake_scores[0], it)
        for r, f in zip(real_scores[1:], fake_scores[1:]):
            d_loss = d_loss + discriminator_loss(r, f, it)
        if not torch.isfinite(d_loss):
            raise NonFiniteScores(f"non-finite discriminator loss at iteration {it}")
        st.d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        if self.config.debug:
            self._assert_projection_frozen()
        st.d_opt.step()
        return d_loss.item()

    def g_step(self, z: torch.Tensor) -> float:
        st = self.state
        for p in self._d_trainable:
            p.requires_grad_(False)
        try:
            fake_scores = self._scores(st.generator(z))
            it = st.iteration
            g_loss = generator_loss(fake_scores[0], self.config.loss_form, it)
            for f in fake_scores[1:]:
                g_loss = g_loss + generator_loss(f, self.config.loss_form, it)
            if not torch.isfinite(g_loss):
                raise NonFiniteScores(f"non-finite generator loss at iteration {it}")
            st.g_opt.zero_grad(set_to_none=True)
            g_loss.backward()
            if self.config.debug:
                self._assert_projection_frozen()
            st.g_opt.step()
        finally:
            for p in self._d_trainable:
                p.requires_grad_(True)
        return g_loss.item()

    def _assert_projection_frozen(self) -> None:
        d = self.state.discriminator
        if isinstance(d, ProjectedDiscriminator):
            for p in d.projection.parameters():
                if p.grad is not None and bool(torch.any(p.grad != 0)):
                    raise AssertionError("gradient reached the frozen projection stack")

    def step(self) -> tuple[float, float] | None:
        """One D update then one G update; returns the losses or None if skipped."""
        st = self.state
        real = self.next_batch()
        z = torch.from_numpy(latents(self.config.seed, st.iteration + 1, 2 * len(real), self.gen_spec.latent_dim))
        z_d, z_g = z[: len(real)], z[len(real):]
        st.iteration += 1
        try:
            losses = (self.d_step(real, z_d), self.g_step(z_g))
        except NonFiniteScores as exc:
            st.nonfinite_streak += 1
            logger.warning("%s (streak %d)", exc, st.nonfinite_streak)
            if st.nonfinite_streak >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged("training diverged", st) from exc
            return None
        st.nonfinite_streak = 0
        st.last_losses = losses
        return losses

    # evaluation --------------------------------------------------------------
    def generate_unit(self, z: np.ndarray, batch: int = 64) -> np.ndarray:
        gen = self.state.generator
        out = [generate(gen, z[i:i + batch]) for i in range(0, len(z), batch)]
        return _to_unit(np.concatenate(out))

    def evaluate(self) -> MetricPoint:
        cfg = self.config
        fake = self.generate_unit(self.eval_z)
        feats = extract_features(fake, self.extractor)
        stats = compute_stats(feats)
        subset = min(cfg.kid_subset_size, len(self.holdout_features), len(feats))
        point = MetricPoint(
            iteration=self.state.iteration,
            fid=fid(self.holdout_stats, stats),
            kid=kid(self.holdout_features, feats, cfg.kid_estimator, subset, cfg.kid_subsets, cfg.seed),
            diversity=diversity_score(fake),
            fid_train=fid(self.train_stats, stats),
        )
        self.state.metric_history.append(point)
        losses = self.state.last_losses if self.state.iteration > 0 else None
        self.state.history_rows.append(
            {
                "iteration": point.iteration,
                "wall_clock_s": None if cfg.deterministic else round(self.state.wall_clock_seconds, 3),
                "d_loss": None if losses is None else losses[0],
                "g_loss": None if losses is None else losses[1],
                "fid": point.fid,
                "kid": point.kid,
                "diversity": point.diversity,
                "fid_train": point.fid_train,
            }
        )
        logger.info(
            "iter %d  fid %.4f  fid_train %.4f  kid %.5f  diversity %.4f",
            point.iteration, point.fid, point.fid_train, point.kid, point.diversity,
        )
        return point

    # persistence -------------------------------------------------------------
    def write_history(self) -> None:
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / "history.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for row in self.state.history_rows:
                writer.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])

    def checkpoint_payload(self) -> dict:
        st = self.state
        return {
            "format_version": CHECKPOINT_VERSION,
            "gen_spec": json.dumps(self.gen_spec.to_dict()),
            "disc_spec": json.dumps(self.disc_spec.to_dict()),
            "config": json.dumps(self.config.to_dict()),
            "iteration": st.iteration,
            "epoch": st.epoch,
            "batch_pos": st.batch_pos,
            "wall_clock_seconds": st.wall_clock_seconds,
            "generator": st.generator.state_dict(),
            "discriminator": st.discriminator.state_dict(),
            "g_opt": st.g_opt.state_dict(),
            "d_opt": st.d_opt.state_dict(),
            "metric_history": json.dumps([asdict(p) for p in st.metric_history]),
            "history_rows": json.dumps(st.history_rows),
            "last_losses": json.dumps(st.last_losses),
            "nonfinite_streak": st.nonfinite_streak,
        }

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.checkpoint_payload(), tmp)
        os.replace(tmp, path)
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        ckpt = load_checkpoint(path)
        if json.loads(ckpt["gen_spec"]) != self.gen_spec.to_dict() or json.loads(ckpt["disc_spec"]) != self.disc_spec.to_dict():
            raise ValueError(f"checkpoint {path} was written for a different architecture")
        st = self.state
        st.generator.load_state_dict(ckpt["generator"])
        st.discriminator.load_state_dict(ckpt["discriminator"])
        st.g_opt.load_state_dict(ckpt["g_opt"])
        st.d_opt.load_state_dict(ckpt["d_opt"])
        st.iteration = int(ckpt["iteration"])
        st.epoch = int(ckpt["epoch"])
        st.batch_pos = int(ckpt["batch_pos"])
        st.wall_clock_seconds = float(ckpt["wall_clock_seconds"])
        st.metric_history = [MetricPoint(**p) for p in json.loads(ckpt["metric_history"])]
        st.history_rows = json.loads(ckpt["history_rows"])
        last = json.loads(ckpt["last_losses"])
        st.last_losses = None if last is None else tuple(last)
        st.nonfinite_streak = int(ckpt["nonfinite_streak"])

    def _checkpoint(self) -> None:
        if self.run_dir is None:
            return
        path = self.run_dir / "checkpoints" / f"iter_{self.state.iteration:08d}.ckpt"
        try:
            self.save_checkpoint(path)
        except OSError as exc:
            raise TrainingAborted(f"checkpoint write failed at iteration {self.state.iteration}: {exc}", self.state) from exc

    def _samples(self, individual: bool = False) -> None:
        if self.run_dir is None:
            return
        snapshot_samples(
            self.state, len(self.sample_z), self.config.seed, self.run_dir / "samples",
            tag=f"iter_{self.state.iteration:08d}", individual=individual, z=self.sample_z,
        )

    # main loop ---------------------------------------------------------------
    def run(self, until: int | None = None) -> TrainState:
        """Train until ``until`` (default: config.iterations) generator steps."""
        cfg = self.config
        st = self.state
        target = cfg.iterations if until is None else until
        if st.iteration == 0 and not st.metric_history:
            self.evaluate()
            self._samples()
            self.write_history()
        while st.iteration < target:
            t0 = time.perf_counter()
            self.step()
            if st.iteration % cfg.eval_every == 0 or st.iteration == cfg.iterations:
                self.evaluate()
                self._samples()
                self.write_history()
            st.wall_clock_seconds += time.perf_counter() - t0
            if st.iteration % cfg.checkpoint_every == 0 or st.iteration == cfg.iterations:
                self._checkpoint()
        return st

    def report(self) -> RunReport:
        last = self.state.metric_history[-1]
        h, w = self.data.resolution
        return RunReport(
            gan_model=model_label(self.gen_spec, self.disc_spec),
            data_size=len(self.data),
            resolution=f"{h}x{w}",
            iterations=self.state.iteration,
            batch_size=self.config.batch_size,
            training_time=format_training_time(self.state.wall_clock_seconds),
            fid=last.fid,
            kid=last.kid,
            device_label=self.config.device_label,
        )

    def write_report(self, extra: dict | None = None) -> dict:
        rep = self.report().to_dict()
        last = self.state.metric_history[-1]
        rep.update(
            fid_holdout=last.fid,
            fid_train=last.fid_train,
            diversity=last.diversity,
            possible_mode_collapse=is_collapsed(last.diversity, self.config.collapse_threshold),
            wall_clock_seconds=self.state.wall_clock_seconds,
            kid_estimator=self.config.kid_estimator,
            extractor_fingerprint=self.extractor.fingerprint,
            generator_checksum=checksum(self.state.generator),
        )
        if extra:
            rep.update(extra)
        if self.run_dir is not None:
            (self.run_dir / "report.json").write_text(json.dumps(rep, indent=2))
        return rep


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format {ckpt.get('format_version')!r} not supported")
    return ckpt


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    found = sorted((Path(run_dir) / "checkpoints").glob("iter_*.ckpt"))
    return found[-1] if found else None


def train(
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    data: ImageSet,
    config: TrainConfig,
    run_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[TrainState, RunReport]:
    """Run a full training job; returns the final state and its report row."""
    trainer = GANTrainer(gen_spec, disc_spec, data, config, run_dir)
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    trainer.run()
    trainer.write_report()
    trainer._samples(individual=True)
    return trainer.state, trainer.report()


def snapshot_samples(
    state_or_generator,
    n: int,
    seed: int,
    out_dir: str | Path | None = None,
    tag: str = "snapshot",
    individual: bool = True,
    z: np.ndarray | None = None,
) -> ImageSet:
    """Generate ``n`` images from seeded latents; optionally save a grid and per-image PNGs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = state_or_generator.generator if isinstance(state_or_generator, TrainState) else state_or_generator
    if z is None:
        z = latents(seed, 0x5A3B, n, gen.spec.latent_dim)
    pixels = _to_unit(generate(gen, z))
    images = ImageSet.from_array(pixels, prefix=tag, seed=seed)
    if out_dir is not None:
        out = Path(out_dir)
        save_png(image_grid(pixels, ncols=int(math.ceil(math.sqrt(n)))), out / f"{tag}.png")
        if individual:
            for i, px in enumerate(pixels):
                save_png(px, out / tag / f"{i:04d}.png")
    return images
