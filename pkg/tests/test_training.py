import numpy as np
import pytest

from boxrefine import training
from boxrefine.checkpoint import load_checkpoint
from boxrefine.denoiser import DenoiserConfig, init_weights, noise_conditioning
from boxrefine.errors import DataError, NumericError
from boxrefine.geometry import nbv_points
from boxrefine.rng import substream
from boxrefine.scene import PerturbationModel, SceneSpec, sample_scene
from boxrefine.training import (
    AdamState,
    TrainConfig,
    adam_update,
    build_batch,
    config_hash,
    make_training_pair,
    read_loss_curve,
    sample_sigma,
    train_loop,
    train_step,
)

TINY_MODEL = DenoiserConfig(hidden_dim=16, num_layers=2, num_heads=2, feedforward_dim=32, max_points=48, noise_embed_dim=16, profile="tiny")


@pytest.fixture(scope="module")
def scenes():
    spec = SceneSpec(object_count=(1, 3), surface_density=12.0, background_density=0.4)
    return [sample_scene(spec, seed=100 + i) for i in range(6)]


class TestSampleSigma:
    def test_lognormal_statistics(self):
        config = TrainConfig()
        rng = substream(0, "sigma-test")
        draws = np.array([sample_sigma(config, rng=rng) for _ in range(100_000)])
        assert np.all(draws > 0)
        assert np.median(draws) == pytest.approx(np.exp(-1.2), rel=0.02)
        assert np.std(np.log(draws)) == pytest.approx(1.2, rel=0.02)


class TestMakeTrainingPair:
    GT = np.array([8.0, 1.0, 0.85, 1.9, 4.6, 1.7, 0.3])

    def test_sigma_zero_gives_zero_target(self, scenes):
        scene = scenes[0]
        gt = scene.gt_boxes[0]
        pair = make_training_pair(scene, gt, 0.0, PerturbationModel(), 4.0, 48, seed=1)
        assert pair is not None
        np.testing.assert_allclose(pair.target, 0.0, atol=1e-12)

    def test_input_plus_target_reconstructs_gt_view(self, scenes):
        scene = scenes[1]
        gt = scene.gt_boxes[0]
        rng = substream(2, "t")
        for _ in range(10):
            sigma = sample_sigma(TrainConfig(), rng=rng)
            pair = make_training_pair(scene, gt, sigma, PerturbationModel(), 4.0, 48, rng=rng)
            if pair is None:
                continue
            recon = pair.nbv_input + pair.target
            # identify the source points by inverting the noisy-box NBV is
            # not possible from the pair alone; instead check the algebraic
            # identity against all scene points via nearest matching on the
            # gt view
            assert np.all(np.isfinite(recon))
        # direct identity on a controlled crop
        pts = scene.cloud.points
        noisy = gt.copy()
        noisy[0] += 0.4
        target = nbv_points(pts, gt) - nbv_points(pts, noisy)
        np.testing.assert_allclose(nbv_points(pts, noisy) + target, nbv_points(pts, gt), atol=1e-12)

    def test_pure_x_translation_gives_common_target_offset(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-3, 3, size=(200, 3)) + self.GT[:3]
        model = PerturbationModel(center_frac=(0.2, 0.0, 0.0), size_frac=(0.0, 0.0, 0.0), yaw_std=0.0)
        gt = self.GT.copy()
        gt[6] = 0.0  # no rotation effects
        pair = make_training_pair(pts, gt, 1.0, model, 4.0, 500, seed=5)
        assert pair is not None
        # all targets share one NBV x offset; y and z are untouched
        assert np.ptp(pair.target[:, 0]) < 1e-12
        np.testing.assert_allclose(pair.target[:, 1:], 0.0, atol=1e-12)
        delta = pair.target[0, 0]
        assert abs(delta) > 0  # noise was actually drawn
        # offset equals 2*dx/l for the realized dx
        dx = delta * gt[4] / 2.0
        np.testing.assert_allclose(
            nbv_points(pts[:1], gt)[0, 0] - nbv_points(pts[:1], gt + np.array([dx, 0, 0, 0, 0, 0, 0]))[0, 0],
            delta,
            atol=1e-12,
        )

    def test_scale_invariance(self, scenes):
        scene = scenes[2]
        gt = scene.gt_boxes[0]
        model = PerturbationModel()
        s = 3.7
        pair_a = make_training_pair(scene.cloud.points, gt, 0.8, model, 4.0, 48, seed=11)
        scaled_gt = gt.copy()
        scaled_gt[:6] *= s
        pair_b = make_training_pair(scene.cloud.points * s, scaled_gt, 0.8, model, 4.0, 48, seed=11)
        assert pair_a is not None and pair_b is not None
        np.testing.assert_allclose(pair_a.nbv_input, pair_b.nbv_input, atol=1e-9)
        np.testing.assert_allclose(pair_a.target, pair_b.target, atol=1e-9)

    def test_empty_crop_returns_none(self):
        pts = np.array([[1000.0, 1000.0, 1000.0]])
        pair = make_training_pair(pts, self.GT, 0.0, PerturbationModel(), 4.0, 48, seed=0)
        assert pair is None

    def test_subsampling_respects_n_max(self, scenes):
        scene = scenes[3]
        gt = scene.gt_boxes[0]
        pair = make_training_pair(scene, gt, 0.1, PerturbationModel(), 4.0, 16, seed=7)
        assert pair is not None
        assert len(pair.nbv_input) <= 16


class TestAdamAndTrainStep:
    def test_zero_learning_rate_leaves_weights(self, scenes):
        config = TrainConfig(learning_rate=0.0, batch_size=4, total_steps=10)
        weights = init_weights(TINY_MODEL, seed=0)
        before = {k: v.copy() for k, v in weights.items()}
        state = AdamState.fresh(weights)
        batch, targets, _ = build_batch(scenes, config, TINY_MODEL, step=0)
        train_step(weights, state, config, TINY_MODEL, batch, targets)
        for k in weights:
            np.testing.assert_array_equal(weights[k], before[k])

    def test_zero_gradient_from_fresh_state_leaves_weights(self):
        weights = {"a": np.ones(4, dtype=np.float32)}
        state = AdamState.fresh(weights)
        adam_update(weights, {"a": np.zeros(4)}, state, lr=0.1)
        np.testing.assert_array_equal(weights["a"], np.ones(4, dtype=np.float32))

    def test_loss_reported_pre_update(self, scenes):
        config = TrainConfig(learning_rate=1e-3, batch_size=4)
        weights = init_weights(TINY_MODEL, seed=1)
        state = AdamState.fresh(weights)
        batch, targets, _ = build_batch(scenes, config, TINY_MODEL, step=0)
        expected = float(np.sum((targets * batch.mask[..., None]) ** 2) / batch.mask.sum())
        loss, _ = train_step(weights, state, config, TINY_MODEL, batch, targets)
        assert loss == pytest.approx(expected, rel=1e-5)

    def test_deterministic_trajectory(self, scenes):
        def run():
            config = TrainConfig(learning_rate=1e-3, batch_size=4, seed=5)
            weights = init_weights(TINY_MODEL, seed=config.seed)
            state = AdamState.fresh(weights)
            losses = []
            for step in range(15):
                batch, targets, _ = build_batch(scenes, config, TINY_MODEL, step)
                loss, _ = train_step(weights, state, config, TINY_MODEL, batch, targets)
                losses.append(loss)
            return losses

        assert run() == run()

    def test_overfit_single_batch(self, scenes):
        config = TrainConfig(learning_rate=1e-3, batch_size=8)
        weights = init_weights(TINY_MODEL, seed=2)
        state = AdamState.fresh(weights)
        batch, targets, _ = build_batch(scenes, config, TINY_MODEL, step=3)
        first = None
        loss = np.inf
        for _ in range(500):
            loss, _ = train_step(weights, state, config, TINY_MODEL, batch, targets)
            if first is None:
                first = loss
            if loss < 1e-3:
                break
        assert loss < 1e-3, f"single-batch loss stalled at {loss} (start {first})"

    def test_nonfinite_loss_raises(self, scenes):
        config = TrainConfig(batch_size=2)
        weights = init_weights(TINY_MODEL, seed=3)
        weights["embed.w1"][:] = np.float32(1e38)
        state = AdamState.fresh(weights)
        batch, targets, _ = build_batch(scenes, config, TINY_MODEL, step=0)
        with pytest.raises(NumericError):
            train_step(weights, state, config, TINY_MODEL, batch, targets)


class TestTrainLoop:
    def test_loop_writes_artifacts_and_resumes(self, scenes, tmp_path):
        config = TrainConfig(batch_size=4, learning_rate=1e-3, total_steps=40, seed=9, log_interval=10, checkpoint_interval=20)
        full_dir = tmp_path / "full"
        weights_full, rows = train_loop(config, TINY_MODEL, scenes, full_dir)
        assert (full_dir / "checkpoint_final.ckpt").exists()
        assert (full_dir / "loss_curve.csv").exists()
        assert len(rows) == 4  # one row per logging interval
        curve = read_loss_curve(full_dir / "loss_curve.csv")
        assert [r.step for r in curve] == [10, 20, 30, 40]

        # interrupted at step 25 -> resume from the step-20 checkpoint
        part_dir = tmp_path / "part"
        train_loop(config, TINY_MODEL, scenes, part_dir, stop_after=25)
        assert not (part_dir / "checkpoint_final.ckpt").exists()
        weights_resumed, rows_resumed = train_loop(config, TINY_MODEL, scenes, part_dir, resume=True)
        for k in weights_full:
            np.testing.assert_array_equal(weights_resumed[k], weights_full[k])
        # overlapping logged losses identical
        full_tail = {r.step: r.loss for r in rows if r.step > 20}
        resumed = {r.step: r.loss for r in rows_resumed}
        for step, loss in full_tail.items():
            assert resumed[step] == loss

    def test_checkpoint_hash_matches_config(self, scenes, tmp_path):
        config = TrainConfig(batch_size=2, total_steps=4, log_interval=2, checkpoint_interval=2, seed=1)
        train_loop(config, TINY_MODEL, scenes, tmp_path)
        from boxrefine.checkpoint import load_checkpoint_full

        _, _, extras, _ = load_checkpoint_full(tmp_path / "checkpoint_final.ckpt")
        assert extras["config_hash"] == config_hash(config, TINY_MODEL)
        weights, cfg = load_checkpoint(tmp_path / "checkpoint_final.ckpt", expect_config=TINY_MODEL)
        assert cfg == TINY_MODEL

    def test_resume_rejects_mismatched_config(self, scenes, tmp_path):
        config = TrainConfig(batch_size=2, total_steps=4, log_interval=2, checkpoint_interval=2, seed=1)
        train_loop(config, TINY_MODEL, scenes, tmp_path, stop_after=2)
        other = TrainConfig(batch_size=2, total_steps=4, log_interval=2, checkpoint_interval=2, seed=2)
        with pytest.raises(DataError):
            train_loop(other, TINY_MODEL, scenes, tmp_path, resume=True)

    def test_abort_on_poisoned_init(self, scenes, tmp_path, monkeypatch):
        def bad_init(config, seed):
            w = init_weights(config, seed)
            w["embed.w1"][:] = np.float32(1e38)
            return w

        monkeypatch.setattr(training, "init_weights", bad_init)
        config = TrainConfig(batch_size=2, total_steps=4, log_interval=2, checkpoint_interval=2)
        with pytest.raises(NumericError):
            train_loop(config, TINY_MODEL, scenes, tmp_path)
        assert not (tmp_path / "checkpoint_final.ckpt").exists()

    def test_no_eligible_scenes_rejected(self, tmp_path):
        from boxrefine.geometry import PointCloud
        from boxrefine.scene import Scene

        empty = Scene(
            cloud=PointCloud(points=np.zeros((4, 3))),
            gt_boxes=np.zeros((0, 7)),
            gt_classes=[],
            sensor_origin=np.zeros(3),
        )
        config = TrainConfig(batch_size=2, total_steps=2)
        with pytest.raises(DataError):
            train_loop(config, TINY_MODEL, [empty], tmp_path)
