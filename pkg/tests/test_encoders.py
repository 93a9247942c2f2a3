"""Encoder contracts: shapes, pointwise/equivariance structure, the
divergence-gap loss with its hand-computed case, and offline motion
pretraining with a frozen appearance path."""

import math

import numpy as np
import pytest

from choir import autodiff as ad
from choir.autodiff import Tensor
from choir.config import ChoirConfig
from choir.encoders import (
    AppearanceEncoder,
    MotionEncoder,
    PointEncoder,
    alignment_divergence,
    loss_motion_alignment,
    pretrain_motion,
    sample_frame_window,
)
from choir.errors import DataFormatError
from choir.geometry import template_body_mesh
from choir.synthdata import generate_scenario, make_spec


@pytest.fixture(scope="module")
def cfg():
    return ChoirConfig(frames=4, grid_h=3, grid_w=3, width=16, points=32, heads=4,
                       st_depth=2, knn_k=4, obs_channels=4, mesh_vertices=20,
                       clip_frames=8)


class TestAppearance:
    def test_output_shape(self, cfg, rng):
        enc = AppearanceEncoder(cfg, rng)
        out = enc(rng.normal(0, 1, (4, 3, 3, 4)))
        assert out.data.shape == (36, 16)

    def test_single_patch_change_reaches_every_token(self, cfg, rng):
        enc = AppearanceEncoder(cfg, rng)
        grid = rng.normal(0, 1, (4, 3, 3, 4))
        base = enc(grid).data
        bumped = grid.copy()
        bumped[2, 1, 1] += 1.0
        moved = enc(bumped).data
        changed = np.abs(moved - base).max(axis=1) > 0
        assert changed.all()

    def test_zero_grid_zero_embeddings_constant_tokens(self, cfg, rng):
        enc = AppearanceEncoder(cfg, rng)
        enc.pos_spatial.data[:] = 0.0
        enc.pos_temporal.data[:] = 0.0
        out = enc(np.zeros((4, 3, 3, 4))).data
        assert np.abs(out - out[0]).max() < 1e-12


class TestMotion:
    def test_output_shape_and_pointwise(self, cfg, rng):
        enc = MotionEncoder(cfg, rng)
        rows = rng.normal(0, 1, (4, 12))
        rows[2] = rows[0]
        out = enc(rows).data
        assert out.shape == (4, 16)
        assert np.array_equal(out[2], out[0])

    def test_changing_one_frame_leaves_others(self, cfg, rng):
        enc = MotionEncoder(cfg, rng)
        rows = rng.normal(0, 1, (4, 12))
        base = enc(rows).data
        rows2 = rows.copy()
        rows2[1] += 0.5
        moved = enc(rows2).data
        assert np.array_equal(np.delete(moved, 1, axis=0), np.delete(base, 1, axis=0))
        assert not np.array_equal(moved[1], base[1])

    def test_reference_row_fixed(self, cfg, rng):
        enc = MotionEncoder(cfg, rng)
        zero_pose = np.concatenate([np.zeros(3), np.eye(3).reshape(9)])
        a = enc(np.stack([zero_pose])).data
        b = enc(np.stack([zero_pose])).data
        assert np.array_equal(a, b)


class TestPoints:
    def test_output_shape(self, cfg, rng):
        enc = PointEncoder(cfg, rng)
        cloud = rng.normal(0, 1, (32, 3))
        cloud /= np.linalg.norm(cloud, axis=1).max()
        assert enc(cloud).data.shape == (32, 16)

    @pytest.mark.parametrize("seed", range(4))
    def test_permutation_equivariance_bitwise(self, cfg, seed):
        rng = np.random.default_rng(seed)
        enc = PointEncoder(cfg, rng)
        cloud = rng.normal(0, 1, (32, 3))
        cloud /= np.linalg.norm(cloud, axis=1).max()
        perm = rng.permutation(32)
        base = enc(cloud).data
        permuted = enc(cloud[perm]).data
        assert np.array_equal(permuted, base[perm])

    def test_small_cloud_rejected(self, cfg, rng):
        enc = PointEncoder(cfg, rng)
        with pytest.raises(DataFormatError):
            enc(rng.normal(0, 1, (4, 3)))


class TestAlignmentLoss:
    def test_zero_when_terms_coincide(self, rng):
        fm_j = Tensor(rng.normal(0, 1, (1, 8)))
        fm_k = Tensor(rng.normal(0, 1, (1, 8)))
        # a single-token visual slice equal to the motion rows makes the two
        # divergence scalars coincide exactly
        loss = loss_motion_alignment(fm_j, fm_k, Tensor(fm_j.data.copy()),
                                     Tensor(fm_k.data.copy()), eps=1e-8)
        assert loss.item() == 0.0

    def test_hand_computed_two_channel_case(self):
        """Divergence of (0.8, 0.2) against (0.5, 0.5) with the in-formula
        regularizer; the absolute gap against a zero visual term."""
        eps = 1e-8
        p = Tensor(np.array([[0.8, 0.2]]))
        q = Tensor(np.array([[0.5, 0.5]]))
        got = alignment_divergence(p, q, eps).item()
        expected = (0.8 * math.log(eps + 0.8 / (eps + 0.5))
                    + 0.2 * math.log(eps + 0.2 / (eps + 0.5)))
        assert abs(got) == pytest.approx(abs(expected), abs=1e-12)
        assert abs(got - expected) < 1e-12

    def test_loss_nonnegative_and_asymmetric(self, rng):
        fm_j = Tensor(rng.normal(0, 1, (1, 8)))
        fm_k = Tensor(rng.normal(0, 1, (1, 8)))
        fv_j = Tensor(rng.normal(0, 1, (4, 8)))
        fv_k = Tensor(rng.normal(0, 1, (4, 8)))
        a = loss_motion_alignment(fm_j, fm_k, fv_j, fv_k).item()
        b = loss_motion_alignment(fm_k, fm_j, fv_k, fv_j).item()
        assert a >= 0.0 and b >= 0.0
        assert a != b

    def test_nonpositive_eps_rejected(self, rng):
        t = Tensor(rng.normal(0, 1, (1, 4)))
        with pytest.raises(DataFormatError):
            loss_motion_alignment(t, t, t, t, eps=0.0)


class TestFrameWindow:
    def test_full_clip_passthrough(self, rng):
        assert np.array_equal(sample_frame_window(rng, 4, 4), np.arange(4))

    def test_window_properties(self, rng):
        for _ in range(50):
            idx = sample_frame_window(rng, 16, 8)
            assert idx.shape == (8,)
            assert idx[-1] == 15
            assert np.all(np.diff(idx) >= 1)


class TestPretraining:
    def test_appearance_frozen_bitwise_and_loss_drops(self, cfg):
        mesh = template_body_mesh(cfg.mesh_vertices)
        samples = [generate_scenario(make_spec(i % 12, 900 + i, cfg.clip_frames), cfg, mesh)
                   for i in range(6)]
        rng = np.random.default_rng(3)
        appearance = AppearanceEncoder(cfg, rng)
        motion = MotionEncoder(cfg, rng)
        frozen = {k: v.data.tobytes() for k, v in appearance.named_parameters().items()}
        curve = pretrain_motion(appearance, motion, samples, epochs=4, seed=5)
        after = {k: v.data.tobytes() for k, v in appearance.named_parameters().items()}
        assert frozen == after
        assert all(v.grad is None for v in appearance.named_parameters().values())
        assert len(curve) == 4
        assert curve[-1] < curve[0]

    def test_reproducible_curve(self, cfg):
        mesh = template_body_mesh(cfg.mesh_vertices)
        samples = [generate_scenario(make_spec(i % 12, 900 + i, cfg.clip_frames), cfg, mesh)
                   for i in range(4)]

        def run():
            rng = np.random.default_rng(3)
            appearance = AppearanceEncoder(cfg, rng)
            motion = MotionEncoder(cfg, rng)
            return pretrain_motion(appearance, motion, samples, epochs=2, seed=7)

        assert run() == run()
