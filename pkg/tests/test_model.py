"""Fusion-model contracts: shapes, branch silencing, the feature-scaling
gradient identity inside the real blocks, decoder behavior, the combined
loss against hand-computed values, and end-to-end gradient checks."""

import math

import numpy as np
import pytest

from choir import autodiff as ad
from choir.autodiff import Tensor
from choir.model import (
    AblationFlags,
    ChoirModel,
    SampleInputs,
    cross_entropy,
    focal_dice_loss,
    kv_gradient_norms,
    loss_total,
)
from choir.errors import DataFormatError, ShapeMismatch
from choir.synthdata import generate_scenario, make_spec
from choir.training import build_inputs, eval_frame_indices


@pytest.fixture(scope="module")
def sample(tiny_config_module, tiny_mesh_module):
    return generate_scenario(make_spec(4, 77, tiny_config_module.clip_frames),
                             tiny_config_module, tiny_mesh_module)


@pytest.fixture(scope="module")
def tiny_config_module(request):
    from choir.config import ChoirConfig
    return ChoirConfig(frames=2, grid_h=2, grid_w=2, width=8, points=16, heads=4,
                       st_depth=1, knn_k=4, obs_channels=4, mesh_vertices=12,
                       clip_frames=4, dropout=0.1)


@pytest.fixture(scope="module")
def tiny_mesh_module(tiny_config_module):
    from choir.geometry import template_body_mesh
    return template_body_mesh(tiny_config_module.mesh_vertices)


def forward_on(model, sample, overrides=None):
    cfg = model.cfg
    window = eval_frame_indices(sample.spec.clip_frames, cfg.frames)
    return model.forward(build_inputs(sample, window), branch_overrides=overrides), window


class TestForwardShapes:
    def test_output_shapes(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 0)
        out, _ = forward_on(model, sample)
        assert out.affordance.shape == (16, 1)
        assert out.contact.shape == (2, 12, 1)
        assert out.class_logits.shape == (12,)
        assert np.all((out.affordance >= 0) & (out.affordance <= 1))
        assert np.all((out.contact >= 0) & (out.contact <= 1))

    def test_desk_scale_shapes(self, desk_config):
        from choir.geometry import template_body_mesh
        mesh = template_body_mesh(desk_config.mesh_vertices)
        model = ChoirModel(desk_config, 0)
        s = generate_scenario(make_spec(0, 5, desk_config.clip_frames), desk_config, mesh)
        out, _ = forward_on(model, s)
        assert out.affordance.shape == (256, 1)
        assert out.contact.shape == (8, 512, 1)

    def test_temporal_encoding_rows_repeat_within_frame(self, tiny_config_module):
        model = ChoirModel(tiny_config_module, 0)
        expanded = model.temporal_encoding_expanded()
        hw = tiny_config_module.grid_tokens
        for t in range(tiny_config_module.frames):
            block = expanded[t * hw:(t + 1) * hw]
            assert np.abs(block - block[0]).max() == 0.0


class TestBranchSilencing:
    """Zeroing a modulation token must equal feeding zero features, bitwise,
    and must zero that branch's kv weight gradients exactly."""

    @pytest.mark.parametrize("token,override_key", [
        ("tau_v", "appearance"),
        ("tau_m", "motion_a"),
        ("tau_o", "affordance"),
    ])
    def test_zero_token_equals_zero_features(self, tiny_config_module, sample, token, override_key):
        model_a = ChoirModel(tiny_config_module, 3)
        getattr(model_a, token).data[:] = 0.0
        out_a, _ = forward_on(model_a, sample)

        model_b = ChoirModel(tiny_config_module, 3)
        cfg = tiny_config_module
        shapes = {
            "appearance": (cfg.appearance_tokens, cfg.width),
            "motion_a": (cfg.frames, cfg.width),
            "affordance": (cfg.points, cfg.width),
        }
        overrides = {override_key: Tensor(np.zeros(shapes[override_key]))}
        if token == "tau_m":
            overrides["motion_c"] = Tensor(np.zeros((cfg.frames, cfg.width)))
            model_a2 = ChoirModel(tiny_config_module, 3)
            getattr(model_a2, token).data[:] = 0.0
            out_a, _ = forward_on(model_a2, sample)
        out_b, _ = forward_on(model_b, overrides=overrides, sample=sample)
        assert out_a.phi_a.data.tobytes() == out_b.phi_a.data.tobytes()
        assert out_a.phi_c.data.tobytes() == out_b.phi_c.data.tobytes()
        assert out_a.phi_s.data.tobytes() == out_b.phi_s.data.tobytes()

    def test_zero_token_zeroes_kv_gradients(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 3)
        model.tau_v.data[:] = 0.0
        with ad.Graph():
            out, window = forward_on(model, sample)
            lb = loss_total(out, sample.gt_contact[window], sample.gt_affordance,
                            sample.spec.class_index)
            grads = ad.backward(lb.total, write_leaf_grads=False)
        probe = model.probes[("theta_a", "appearance")]
        gk = grads.get(probe["w_k"]._node)
        gv = grads.get(probe["w_v"]._node)
        assert gk is None or np.all(gk == 0.0)
        assert gv is None or np.all(gv == 0.0)
        norms = kv_gradient_norms(model, grads)
        assert norms[("theta_a", "appearance")] == 0.0
        assert norms[("theta_a", "motion")] > 0.0

    def test_disable_motion_zeroes_motion_features(self, tiny_config_module, sample):
        flagged = ChoirModel(tiny_config_module, 3, AblationFlags(disable_motion=True))
        out_a, _ = forward_on(flagged, sample)
        plain = ChoirModel(tiny_config_module, 3)
        cfg = tiny_config_module
        zeros = Tensor(np.zeros((cfg.frames, cfg.width)))
        pe = Tensor(plain.pe_t.copy())
        out_b, _ = forward_on(plain, sample, overrides={
            "motion_a": ad.mul(zeros, 1.0),
            "motion_c": ad.add(zeros, pe),
        })
        assert out_a.phi_c.data.tobytes() == out_b.phi_c.data.tobytes()

    def test_disable_synergy_is_passthrough_refinement(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 9, AblationFlags(disable_synergy=True))
        out, _ = forward_on(model, sample)
        assert out.affordance.shape == (16, 1)


class TestSynergy:
    def test_zero_contact_stream_passes_residual(self, tiny_config_module, rng):
        from choir.model import SynergyAttention
        syn = SynergyAttention(8, 4, np.random.default_rng(4))
        f_a = Tensor(rng.normal(0, 1, (6, 8)))
        f_c = Tensor(np.zeros((5, 8)))
        out = syn(f_a, f_c)
        assert out.data.tobytes() == f_a.data.tobytes()

    def test_gradient_reaches_contact_stream(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 5)
        with ad.Graph():
            out, window = forward_on(model, sample)
            lb = focal_dice_loss(out.phi_a, (sample.gt_affordance >= 0.5).astype(float))
            ad.backward(lb)
        # affordance-only loss must still move theta_c weights through synergy
        g = model.theta_c.w_q.weight.grad
        assert g is not None and np.abs(g).max() > 0.0


class TestModulationIdentityInBlocks:
    @pytest.mark.parametrize("block,branch", [
        ("theta_a", "appearance"), ("theta_a", "motion"),
        ("theta_c", "affordance"), ("theta_c", "motion"),
    ])
    def test_weight_grad_is_outer_product(self, tiny_config_module, sample, block, branch):
        model = ChoirModel(tiny_config_module, 11)
        with ad.Graph():
            out, window = forward_on(model, sample)
            lb = loss_total(out, sample.gt_contact[window], sample.gt_affordance,
                            sample.spec.class_index)
            grads = ad.backward(lb.total, write_leaf_grads=False)
        probe = model.probes[(block, branch)]
        kv_input = probe["input"].data
        for which in ("k", "v"):
            delta = grads[probe[f"{which}_pre"]._node]
            analytic = np.einsum("lm,ln->mn", kv_input, delta)
            got = grads[probe[f"w_{which}"]._node]
            assert np.abs(got - analytic).max() < 1e-10


class TestDecoders:
    def test_all_zero_features_give_half_probabilities(self, tiny_config_module):
        model = ChoirModel(tiny_config_module, 2)
        for layer in (model.dec_affordance[-1], model.dec_contact_feature,
                      model.dec_contact_spatial):
            layer.bias.data[:] = 0.0
        zeros = Tensor(np.zeros((tiny_config_module.points, tiny_config_module.width)))
        from choir.nn import run_mlp
        probs = ad.sigmoid(run_mlp(model.dec_affordance, ad.mul(zeros, 0.0)))
        # zero hidden activations reach the zeroed bias: exactly 0.5 out
        model.dec_affordance[0].weight.data[:] = 0.0
        model.dec_affordance[0].bias.data[:] = 0.0
        probs = ad.sigmoid(run_mlp(model.dec_affordance, zeros))
        assert np.all(probs.data == 0.5)

    def test_class_logit_count(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 2)
        out, _ = forward_on(model, sample)
        assert out.class_logits.shape == (12,)


class TestLosses:
    def test_perfect_two_class_prediction_is_zero(self):
        pred = Tensor(np.array([1.0, 0.0, 1.0, 0.0]))
        target = np.array([1.0, 0.0, 1.0, 0.0])
        assert focal_dice_loss(pred, target).item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_computed_single_element(self):
        """x=0.9, y=1: dice 1 - 0.9/1.9 - 1e-10/0.1, focal -0.25*0.01*log(0.9)."""
        loss = focal_dice_loss(Tensor(np.array([0.9])), np.array([1.0])).item()
        dice = 1.0 - (0.9 + 1e-10) / (1.9 + 1e-10) - 1e-10 / (0.1 + 1e-10)
        focal = -0.25 * 1.0 * (0.1 ** 2) * math.log(0.9)
        assert dice == pytest.approx(0.52632, abs=5e-6)
        assert focal == pytest.approx(0.000263, abs=5e-7)
        assert loss == pytest.approx(dice + focal, abs=1e-6)
        assert loss == pytest.approx(0.52658, abs=5e-6)

    def test_uniform_class_logits_cross_entropy(self):
        ce = cross_entropy(Tensor(np.zeros(12)), 3).item()
        assert ce == pytest.approx(math.log(12.0), abs=1e-12)

    def test_total_is_exact_sum(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 6)
        out, window = forward_on(model, sample)
        lb = loss_total(out, sample.gt_contact[window], sample.gt_affordance,
                        sample.spec.class_index)
        assert lb.total.item() == pytest.approx(lb.affordance + lb.contact + lb.semantic,
                                                abs=1e-12)
        assert lb.total.item() >= 0.0

    def test_shape_mismatch_rejected(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 6)
        out, window = forward_on(model, sample)
        with pytest.raises(ShapeMismatch):
            loss_total(out, sample.gt_contact[window][:, :-1], sample.gt_affordance, 0)

    def test_focal_log_clamp_keeps_saturated_predictions_finite(self):
        pred = Tensor(np.array([1.0, 0.0]))
        target = np.array([0.0, 1.0])
        loss = focal_dice_loss(pred, target).item()
        assert np.isfinite(loss)


class TestGradientReport:
    def test_report_before_backward_rejected(self, tiny_config_module):
        model = ChoirModel(tiny_config_module, 8)
        with pytest.raises(DataFormatError):
            kv_gradient_norms(model, {})

    def test_norms_nonnegative(self, tiny_config_module, sample):
        model = ChoirModel(tiny_config_module, 8)
        with ad.Graph():
            out, window = forward_on(model, sample)
            lb = loss_total(out, sample.gt_contact[window], sample.gt_affordance,
                            sample.spec.class_index)
            grads = ad.backward(lb.total, write_leaf_grads=False)
        norms = kv_gradient_norms(model, grads)
        assert len(norms) == 6
        assert all(v >= 0.0 for v in norms.values())


class TestEndToEndGradient:
    @pytest.mark.parametrize("seed", range(3))
    def test_full_model_matches_finite_differences(self, tiny_config_module,
                                                   tiny_mesh_module, seed):
        """Whole pipeline + combined loss against central differences on a
        random slice of parameters."""
        cfg = tiny_config_module
        sample = generate_scenario(make_spec(seed % 12, 400 + seed, cfg.clip_frames),
                                   cfg, tiny_mesh_module)
        model = ChoirModel(cfg, 100 + seed)
        model.set_training(False)
        window = eval_frame_indices(cfg.clip_frames, cfg.frames)
        inputs = build_inputs(sample, window)

        named = model.named_parameters()
        name = sorted(named)[seed * 7 % len(named)]
        from choir.nn import set_parameter_tensor

        def f(x):
            set_parameter_tensor(model, name, x)
            out = model.forward(inputs)
            lb = loss_total(out, sample.gt_contact[window], sample.gt_affordance,
                            sample.spec.class_index)
            return lb.total

        err = ad.finite_difference_check(f, Tensor(named[name].data.copy()), h=1e-5)
        assert err < 1e-4, f"{name}: {err}"
