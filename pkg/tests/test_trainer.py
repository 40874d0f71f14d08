import errno
import math

import numpy as np
import pytest
import torch

from synthplankton.architectures import DiscriminatorSpec, GeneratorSpec, checksum
from synthplankton.dataset import ImageSet
from synthplankton.metrics import diversity_score, is_collapsed
from synthplankton.trainer import (
    LOG_EPS,
    GANTrainer,
    NonFiniteScores,
    TrainConfig,
    TrainingAborted,
    TrainingDiverged,
    gan_losses,
    generator_loss,
    latest_checkpoint,
    load_checkpoint,
    projected_losses,
    snapshot_samples,
    train,
)

SMALL_G = GeneratorSpec(base_channels=16)
SMALL_D = DiscriminatorSpec(base_channels=16)


def small_config(**kw):
    base = dict(
        iterations=20, batch_size=8, eval_every=10, checkpoint_every=10, eval_samples=16,
        kid_subset_size=2, kid_subsets=4, holdout_fraction=0.25, sample_count=4,
    )
    base.update(kw)
    return TrainConfig(**base)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


class TestLosses:
    def test_indifference_point(self):
        d, g = gan_losses(t(0.5, 0.5), t(0.5, 0.5))
        assert d.item() == pytest.approx(2 * math.log(2), abs=1e-12)
        assert g.item() == pytest.approx(math.log(2), abs=1e-12)
        assert round(d.item(), 4) == 1.3863 and round(g.item(), 4) == 0.6931

    def test_perfect_discriminator(self):
        d, _ = gan_losses(t(1.0, 1.0), t(LOG_EPS, LOG_EPS))
        assert d.item() == pytest.approx(0.0, abs=1e-6)

    def test_fooled_discriminator(self):
        assert generator_loss(t(1.0, 1.0)).item() == pytest.approx(0.0, abs=1e-12)

    def test_literal_form(self):
        # log(1 - 0.5)
        assert generator_loss(t(0.5), form="literal").item() == pytest.approx(-math.log(2), abs=1e-12)

    @pytest.mark.parametrize("scores", [(0.0, 1.0), (1.0, 0.0), (0.0, 0.0), (1.0, 1.0)])
    def test_finite_at_extremes(self, scores):
        d, g = gan_losses(t(scores[0]), t(scores[1]))
        assert math.isfinite(d.item()) and math.isfinite(g.item())
        assert math.isfinite(generator_loss(t(scores[1]), "literal").item())

    def test_nan_scores(self):
        with pytest.raises(FloatingPointError, match="non-finite scores at iteration 7"):
            gan_losses(t(0.5, float("nan")), t(0.5, 0.5), iteration=7)

    def test_projected_single_is_plain(self):
        real, fake = t(0.9, 0.3), t(0.2, 0.6)
        pd, pg = projected_losses([(real, fake)])
        d, g = gan_losses(real, fake)
        assert torch.equal(pd, d) and torch.equal(pg, g)

    def test_projected_linearity(self):
        real, fake = t(0.9, 0.3), t(0.2, 0.6)
        pd, pg = projected_losses([(real, fake), (real, fake)])
        d, g = gan_losses(real, fake)
        assert pd.item() == 2 * d.item() and pg.item() == 2 * g.item()

    def test_projected_four_hand_sum(self):
        half = (t(0.5), t(0.5))
        perfect = (t(1.0), t(LOG_EPS))
        pd, pg = projected_losses([half, perfect, perfect, perfect])
        # one indifferent head: 2 log 2 / log 2; three perfect heads: ~0 / -log(1e-7) each
        d_hand = 2 * math.log(2) + 3 * (-math.log(1 - LOG_EPS))
        g_hand = math.log(2) + 3 * (-math.log(LOG_EPS))
        assert pd.item() == pytest.approx(d_hand, abs=1e-9)
        assert pg.item() == pytest.approx(g_hand, abs=1e-9)

    def test_projected_empty(self):
        with pytest.raises(ValueError, match="no discriminators"):
            projected_losses([])


class TestConfig:
    @pytest.mark.parametrize("field,value", [("iterations", 0), ("batch_size", 0), ("g_lr", 0.0), ("eval_every", 0)])
    def test_guards(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})

    def test_round_trip(self):
        cfg = small_config(seed=4, loss_form="literal")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_resolution_mismatch(self, toy_set):
        with pytest.raises(ValueError, match="resolution"):
            GANTrainer(GeneratorSpec(output_resolution=64), SMALL_D, toy_set, small_config())


class TestUpdates:
    @pytest.mark.parametrize("disc", [SMALL_D, DiscriminatorSpec(variant="projected", base_channels=16)])
    def test_players_do_not_touch_each_other(self, toy_set, disc):
        tr = GANTrainer(SMALL_G, disc, toy_set, small_config())
        st = tr.state
        z = torch.randn(8, 64)
        g_before, d_before = checksum(st.generator), checksum(st.discriminator)
        tr.d_step(tr.next_batch(), z)
        assert checksum(st.generator) == g_before
        assert checksum(st.discriminator) != d_before
        d_mid = checksum(st.discriminator)
        tr.g_step(z)
        assert checksum(st.discriminator) == d_mid
        assert checksum(st.generator) != g_before

    def test_debug_mode_checks_frozen_projection(self, toy_set):
        disc = DiscriminatorSpec(variant="projected", base_channels=16)
        tr = GANTrainer(SMALL_G, disc, toy_set, small_config(debug=True))
        proj = tr.state.discriminator.projection
        before = checksum(proj)
        for _ in range(3):
            tr.step()
        assert checksum(proj) == before
        assert all(p.grad is None for p in proj.parameters())
        # a leak into the stack is caught
        next(proj.parameters()).requires_grad_(True)
        with pytest.raises(AssertionError, match="frozen"):
            tr.step()

    def test_iteration_counter(self, toy_set):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config())
        for i in range(1, 4):
            tr.step()
            assert tr.state.iteration == i

    def test_divergence_aborts_after_patience(self, toy_set):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config(iterations=150, eval_every=1000))
        with torch.no_grad():
            tr.state.discriminator.head.bias.fill_(float("nan"))
        with pytest.raises(TrainingDiverged, match="training diverged") as info:
            tr.run()
        assert info.value.state.iteration == 100
        assert info.value.state.nonfinite_streak == 100

    def test_isolated_nonfinite_step_is_skipped(self, toy_set, monkeypatch):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config())
        real_step = tr.d_step
        calls = {"n": 0}

        def flaky(real, z):
            calls["n"] += 1
            if calls["n"] == 1:
                raise NonFiniteScores("non-finite scores at iteration 1")
            return real_step(real, z)

        monkeypatch.setattr(tr, "d_step", flaky)
        assert tr.step() is None
        assert tr.step() is not None
        assert tr.state.nonfinite_streak == 0


class TestRun:
    def test_resume_matches_uninterrupted(self, toy_set, tmp_path):
        cfg = small_config(iterations=200, eval_every=50, checkpoint_every=100)
        full = GANTrainer(SMALL_G, SMALL_D, toy_set, cfg, tmp_path / "full")
        full.run()
        ckpt = tmp_path / "full" / "checkpoints" / "iter_00000100.ckpt"
        assert ckpt.exists()

        resumed = GANTrainer(SMALL_G, SMALL_D, toy_set, cfg, tmp_path / "resumed")
        resumed.load_checkpoint(ckpt)
        assert resumed.state.iteration == 100
        resumed.run()
        assert [p.as_tuple() for p in resumed.state.metric_history] == [p.as_tuple() for p in full.state.metric_history]
        assert checksum(resumed.state.generator) == checksum(full.state.generator)
        assert checksum(resumed.state.discriminator) == checksum(full.state.discriminator)

    def test_outputs_and_history(self, toy_set, tmp_path):
        state, report = train(SMALL_G, SMALL_D, toy_set, small_config(), tmp_path)
        assert [p.iteration for p in state.metric_history] == [0, 10, 20]
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == "iteration,wall_clock_s,d_loss,g_loss,fid,kid,diversity,fid_train"
        assert len(lines) == 4
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["iter_00000010.ckpt", "iter_00000020.ckpt"]
        assert (tmp_path / "samples" / "iter_00000000.png").exists()
        assert len(list((tmp_path / "samples" / "iter_00000020").glob("*.png"))) == 4
        assert (tmp_path / "report.json").exists()
        assert report.iterations == 20 and report.data_size == 24 and report.resolution == "32x32"
        assert report.gan_model == "Baseline" and report.batch_size == 8
        assert state.wall_clock_seconds > 0
        assert latest_checkpoint(tmp_path).name == "iter_00000020.ckpt"
        assert load_checkpoint(latest_checkpoint(tmp_path))["iteration"] == 20

    def test_wall_clock_column_when_not_deterministic(self, toy_set, tmp_path):
        train(SMALL_G, SMALL_D, toy_set, small_config(iterations=10, deterministic=False), tmp_path)
        row = (tmp_path / "history.csv").read_text().splitlines()[-1].split(",")
        assert float(row[1]) > 0
        torch.use_deterministic_algorithms(True)

    def test_seeded_runs_identical(self, toy_set, tmp_path):
        a, _ = train(SMALL_G, SMALL_D, toy_set, small_config(), tmp_path / "a")
        b, _ = train(SMALL_G, SMALL_D, toy_set, small_config(), tmp_path / "b")
        assert [p.as_tuple() for p in a.metric_history] == [p.as_tuple() for p in b.metric_history]
        assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()

    def test_checkpoint_failure_keeps_state(self, toy_set, tmp_path, monkeypatch):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config(), tmp_path)

        def full_disk(path):
            raise OSError(errno.ENOSPC, "No space left on device")

        monkeypatch.setattr(tr, "save_checkpoint", full_disk)
        with pytest.raises(TrainingAborted, match="checkpoint write failed at iteration 10") as info:
            tr.run()
        assert info.value.state is tr.state
        assert info.value.state.iteration == 10
        assert [p.iteration for p in info.value.state.metric_history] == [0, 10]

    def test_architecture_mismatch_on_resume(self, toy_set, tmp_path):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config(iterations=10), tmp_path)
        tr.run()
        other = GANTrainer(GeneratorSpec(base_channels=32), SMALL_D, toy_set, small_config(iterations=10))
        with pytest.raises(ValueError, match="different architecture"):
            other.load_checkpoint(latest_checkpoint(tmp_path))


class TestSnapshots:
    def test_grid_and_files(self, toy_set, tmp_path):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config())
        images = snapshot_samples(tr.state, 16, 3, tmp_path, tag="snap")
        assert isinstance(images, ImageSet) and len(images) == 16
        from PIL import Image

        grid = Image.open(tmp_path / "snap.png")
        assert grid.size[0] > 4 * 32 and grid.size[1] > 4 * 32
        assert len(list((tmp_path / "snap").glob("*.png"))) == 16

    def test_deterministic(self, toy_set):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config())
        assert np.array_equal(snapshot_samples(tr.state, 5, 1).pixels(), snapshot_samples(tr.state, 5, 1).pixels())
        assert not np.array_equal(snapshot_samples(tr.state, 5, 1).pixels(), snapshot_samples(tr.state, 5, 2).pixels())

    def test_collapsed_generator_flags(self, toy_set):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config())
        gen = tr.state.generator
        with torch.no_grad():
            for p in gen.parameters():
                p.zero_()
            gen.to_rgb.bias.fill_(0.3)
        images = snapshot_samples(tr.state, 16, 0)
        assert is_collapsed(diversity_score(images))

    def test_needs_one(self, toy_set):
        tr = GANTrainer(SMALL_G, SMALL_D, toy_set, small_config())
        with pytest.raises(ValueError):
            snapshot_samples(tr.state, 0, 0)
