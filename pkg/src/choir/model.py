"""Core fusion model: two parallel cross-attention blocks with feature-scaling
modulation tokens, a synergy attention tying the contact stream back into the
affordance stream, and the three decoders.

The first block queries with the functionality token + point features against
appearance and motion key/value streams; the second queries with the intention
token + (position-encoded) appearance tokens against the affordance and motion
streams. Key/value and query projections carry no biases, so zeroing a
modulation token silences its branch exactly: zero activations, zero weight
gradients, and outputs bitwise-identical to feeding zero features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ChoirConfig
from .errors import DataFormatError, ShapeMismatch
from .nn import (
    CrossAttention,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    mlp,
    run_mlp,
    scaled_dot_attention,
    sinusoidal_position_table,
)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2
DICE_EPS = 1e-10
PROB_CLAMP = 1e-7


@dataclass
class AblationFlags:
    """Switches mirroring the detachment study columns."""

    disable_motion: bool = False
    disable_affordance_branch: bool = False
    disable_tau: bool = False
    disable_pe_t: bool = False
    disable_synergy: bool = False
    disable_semantic_head: bool = False
    online_motion_pretrain: bool = False

    def to_dict(self) -> dict:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, data: dict) -> "AblationFlags":
        return cls(**data)


@dataclass
class SampleInputs:
    obs_grid: np.ndarray       # (frames, H, W, D)
    motion: np.ndarray         # (frames, 12) relative poses
    cloud: np.ndarray          # (points, 3) unit-normalized


@dataclass
class ModelOutputs:
    phi_a: Tensor              # (points,) affordance probabilities
    phi_c: Tensor              # (frames, vertices) contact probabilities
    phi_s: Tensor              # (classes,) logits

    @property
    def affordance(self) -> np.ndarray:
        return self.phi_a.data.reshape(-1, 1)

    @property
    def contact(self) -> np.ndarray:
        t, v = self.phi_c.data.shape
        return self.phi_c.data.reshape(t, v, 1)

    @property
    def class_logits(self) -> np.ndarray:
        return self.phi_s.data


class BranchAttention(Module):
    """Key/value projections plus an output projection for one clue stream.

    The query arrives already projected (the enclosing block shares one query
    projection across its branches). `last_probe` keeps references needed to
    verify the feature-scaling gradient identity.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.w_k = Linear(dim, dim, rng, bias=False)
        self.w_v = Linear(dim, dim, rng, bias=False)
        self.w_out = Linear(dim, dim, rng)
        self.last_probe = None

    def __call__(self, q: Tensor, kv_src: Tensor) -> Tensor:
        k = self.w_k(kv_src)
        v = self.w_v(kv_src)
        self.last_probe = {
            "input": kv_src,
            "k_pre": k,
            "v_pre": v,
            "w_k": self.w_k.weight,
            "w_v": self.w_v.weight,
        }
        ctx, _ = scaled_dot_attention(q, k, v, self.heads)
        return self.w_out(ctx)


class ParallelCrossAttentionBlock(Module):
    """One query stream attending to two key/value streams fused by an MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 dropout_rng: np.random.Generator, dropout: float = 0.1):
        self.ln_q = LayerNorm(dim)
        self.w_q = Linear(dim, dim, rng, bias=False)
        self.branch_a = BranchAttention(dim, heads, rng)
        self.branch_b = BranchAttention(dim, heads, rng)
        self.fuse = mlp([2 * dim, 2 * dim, dim], rng)
        self.ln_out = LayerNorm(dim)
        self.drop = Dropout(dropout, dropout_rng)
        self.last_query_probe = None

    def __call__(self, q_src: Tensor, kv_a: Tensor, kv_b: Tensor) -> Tensor:
        h = self.ln_q(q_src)
        q = self.w_q(h)
        self.last_query_probe = {"input": h, "q_pre": q, "w_q": self.w_q.weight}
        fused = run_mlp(self.fuse, ad.concat([self.branch_a(q, kv_a), self.branch_b(q, kv_b)], axis=1))
        return self.ln_out(ad.add(q_src, self.drop(fused)))


class SynergyAttention(Module):
    """Affordance rows query the contact stream; residual passthrough when the
    contact stream is zero (all projections bias-free)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = CrossAttention(dim, heads, rng, out_bias=False)

    def __call__(self, f_a: Tensor, f_c: Tensor) -> Tensor:
        return ad.add(f_a, self.attn(f_a, f_c))


class ChoirModel(Module):
    """All learnable state plus the forward pass producing the three outputs."""

    def __init__(self, cfg: ChoirConfig, seed: int, flags: AblationFlags | None = None):
        from .encoders import AppearanceEncoder, MotionEncoder, PointEncoder

        self.cfg = cfg
        self.flags = flags or AblationFlags()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x01]))
        drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x02]))

        self.appearance = AppearanceEncoder(cfg, rng)
        self.motion = MotionEncoder(cfg, rng)
        self.points = PointEncoder(cfg, rng)

        learn_tau = not self.flags.disable_tau
        self.tau_v = Tensor(np.ones(cfg.width), requires_grad=learn_tau)
        self.tau_m = Tensor(np.ones(cfg.width), requires_grad=learn_tau)
        self.tau_o = Tensor(np.ones(cfg.width), requires_grad=learn_tau)
        self.token_functionality = Tensor(
            rng.uniform(-1, 1, (1, cfg.width)) / np.sqrt(cfg.width), requires_grad=True)
        self.token_intention = Tensor(
            rng.uniform(-1, 1, (1, cfg.width)) / np.sqrt(cfg.width), requires_grad=True)

        self.theta_a = ParallelCrossAttentionBlock(cfg.width, cfg.heads, rng, drop_rng, cfg.dropout)
        self.theta_c = ParallelCrossAttentionBlock(cfg.width, cfg.heads, rng, drop_rng, cfg.dropout)
        self.synergy = SynergyAttention(cfg.width, cfg.heads, rng)

        self.dec_affordance = mlp([cfg.width, cfg.width, 1], rng)
        self.dec_contact_feature = Linear(cfg.width, 1, rng)
        self.dec_contact_spatial = Linear(cfg.grid_tokens, cfg.mesh_vertices, rng)
        self.dec_semantic = mlp([2 * cfg.width, cfg.width, cfg.num_classes], rng)

        # Fixed sinusoidal temporal position table; spatial tokens within one
        # frame all receive the same row.
        self.pe_t = sinusoidal_position_table(cfg.frames, cfg.width)
        self.probes: dict = {}

    def temporal_encoding_expanded(self) -> np.ndarray:
        pe = np.zeros_like(self.pe_t) if self.flags.disable_pe_t else self.pe_t
        return np.repeat(pe, self.cfg.grid_tokens, axis=0)

    def forward(self, inputs: SampleInputs, branch_overrides: dict | None = None) -> ModelOutputs:
        """Run the full pipeline on one sample.

        `branch_overrides` substitutes the raw feature matrix feeding a
        key/value branch ("appearance", "motion_a", "affordance", "motion_c");
        used by ablation probes and the branch-silencing checks.
        """
        cfg = self.cfg
        overrides = branch_overrides or {}

        f_v = self.appearance(inputs.obs_grid)
        if self.flags.disable_motion:
            f_m = Tensor(np.zeros((cfg.frames, cfg.width)))
        else:
            f_m = self.motion(inputs.motion)
        f_o = self.points(inputs.cloud)

        q_a = ad.concat([self.token_functionality, f_o], axis=0)
        kv_v = ad.mul(self.tau_v, overrides.get("appearance", f_v))
        kv_m = ad.mul(self.tau_m, overrides.get("motion_a", f_m))
        fa_bar = self.theta_a(q_a, kv_v, kv_m)
        f_sf = ad.narrow(fa_bar, 0, 0, 1)
        f_a = ad.narrow(fa_bar, 0, 1, cfg.points)

        pe = np.zeros_like(self.pe_t) if self.flags.disable_pe_t else self.pe_t
        q_c = ad.concat([self.token_intention, ad.add(f_v, Tensor(np.repeat(pe, cfg.grid_tokens, axis=0)))], axis=0)
        if self.flags.disable_affordance_branch:
            f_a_branch = Tensor(np.zeros((cfg.points, cfg.width)))
        else:
            f_a_branch = f_a
        kv_o = ad.mul(self.tau_o, overrides.get("affordance", f_a_branch))
        kv_m2 = ad.mul(self.tau_m, overrides.get("motion_c", ad.add(f_m, Tensor(pe))))
        fc_bar = self.theta_c(q_c, kv_o, kv_m2)
        f_si = ad.narrow(fc_bar, 0, 0, 1)
        f_c = ad.narrow(fc_bar, 0, 1, cfg.appearance_tokens)

        f_a_refined = f_a if self.flags.disable_synergy else self.synergy(f_a, f_c)

        phi_a = ad.reshape(ad.sigmoid(run_mlp(self.dec_affordance, f_a_refined)), (cfg.points,))
        per_token = ad.reshape(self.dec_contact_feature(f_c), (cfg.frames, cfg.grid_tokens))
        phi_c = ad.sigmoid(self.dec_contact_spatial(per_token))
        phi_s = ad.reshape(run_mlp(self.dec_semantic, ad.concat([f_sf, f_si], axis=1)), (cfg.num_classes,))

        self.probes = {
            ("theta_a", "appearance"): self.theta_a.branch_a.last_probe,
            ("theta_a", "motion"): self.theta_a.branch_b.last_probe,
            ("theta_a", "point"): self.theta_a.last_query_probe,
            ("theta_c", "affordance"): self.theta_c.branch_a.last_probe,
            ("theta_c", "motion"): self.theta_c.branch_b.last_probe,
            ("theta_c", "appearance"): self.theta_c.last_query_probe,
        }
        return ModelOutputs(phi_a=phi_a, phi_c=phi_c, phi_s=phi_s)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items()}


# -- losses -------------------------------------------------------------------


def focal_dice_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Both-polarity dice plus the focal term, vectorized over leading rows.

    `pred` may be (M,) or (T, M); sums run over the last axis and the result
    is averaged over leading rows. Predictions are clamped to
    [1e-7, 1 - 1e-7] before the logs only.
    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != pred.data.shape:
        raise ShapeMismatch(f"loss: prediction {pred.data.shape} vs target {y.shape}")
    x = ad.reshape(pred, (1, -1)) if pred.data.ndim == 1 else pred
    y = y.reshape(x.data.shape)
    yt = Tensor(y)

    pos_overlap = ad.tensor_sum(ad.mul(x, yt), axis=1)
    pos_union = ad.add(ad.tensor_sum(x, axis=1), y.sum(axis=1))
    neg_overlap = ad.tensor_sum(ad.mul(ad.sub(1.0, x), Tensor(1.0 - y)), axis=1)
    neg_union = ad.sub(2.0 * y.shape[1] - y.sum(axis=1), ad.tensor_sum(x, axis=1))
    dice = ad.sub(ad.sub(1.0, ad.div(ad.add(pos_overlap, DICE_EPS), ad.add(pos_union, DICE_EPS))),
                  ad.div(ad.add(neg_overlap, DICE_EPS), ad.add(neg_union, DICE_EPS)))

    xc = ad.clip(x, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus_x = ad.sub(1.0, x)
    focal_neg = ad.mul(ad.mul(Tensor((1.0 - FOCAL_ALPHA) * (1.0 - y)), ad.mul(x, x)),
                       ad.log(ad.sub(1.0, xc)))
    focal_pos = ad.mul(ad.mul(Tensor(FOCAL_ALPHA * y), ad.mul(one_minus_x, one_minus_x)),
                       ad.log(xc))
    focal = ad.neg(ad.tensor_mean(ad.add(focal_neg, focal_pos), axis=1))
    return ad.tensor_mean(ad.add(dice, focal))


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-softmax at `target` with a shift-stabilized normalizer."""
    n = logits.data.shape[0]
    if not 0 <= target < n:
        raise DataFormatError(f"cross_entropy: target {target} outside [0, {n})")
    row = ad.reshape(logits, (1, n))
    shift = float(logits.data.max())
    z = ad.sub(row, shift)
    lse = ad.log(ad.tensor_sum(ad.exp(z)))
    picked = ad.reshape(ad.narrow(z, 1, target, 1), ())
    return ad.sub(lse, picked)


@dataclass
class LossBreakdown:
    total: Tensor
    affordance: float = 0.0
    contact: float = 0.0
    semantic: float = 0.0


def loss_total(outputs: ModelOutputs, gt_contact: np.ndarray, gt_affordance: np.ndarray,
               gt_class: int, *, include_semantic: bool = True,
               continuous_affordance_target: bool = False) -> LossBreakdown:
    """Affordance + contact (frame-averaged) + semantic cross-entropy."""
    contact = np.asarray(gt_contact, dtype=np.float64)
    if contact.shape != outputs.phi_c.data.shape:
        raise ShapeMismatch(
            f"loss: contact ground truth {contact.shape} vs prediction {outputs.phi_c.data.shape}")
    affordance = np.asarray(gt_affordance, dtype=np.float64)
    if affordance.shape != outputs.phi_a.data.shape:
        raise ShapeMismatch(
            f"loss: affordance ground truth {affordance.shape} vs prediction {outputs.phi_a.data.shape}")
    if not continuous_affordance_target:
        affordance = (affordance >= 0.5).astype(np.float64)

    l_a = focal_dice_loss(outputs.phi_a, affordance)
    l_c = focal_dice_loss(outputs.phi_c, contact)
    total = ad.add(l_a, l_c)
    l_s_val = 0.0
    if include_semantic:
        l_s = cross_entropy(outputs.phi_s, gt_class)
        total = ad.add(total, l_s)
        l_s_val = l_s.item()
    return LossBreakdown(total=total, affordance=l_a.item(), contact=l_c.item(), semantic=l_s_val)


# -- gradient-modulation inspection ------------------------------------------------


def kv_gradient_norms(model: ChoirModel, grads: dict[int, np.ndarray]) -> dict:
    """Frobenius norms of the clue-mapping weight gradients, per block/branch.

    Key/value branches combine their two projections into one norm; query
    entries report the query projection. Requires a populated gradient map
    from a backward pass over the model's last forward.
    """
    if not model.probes:
        raise DataFormatError("gradient norms: run forward + backward first")
    out = {}
    for (block, branch), probe in model.probes.items():
        if probe is None:
            raise DataFormatError("gradient norms: probes missing; run forward first")
        if "w_q" in probe:
            g = _weight_grad(probe["w_q"], grads)
            out[(block, branch)] = float(np.sqrt((g * g).sum()))
        else:
            gk = _weight_grad(probe["w_k"], grads)
            gv = _weight_grad(probe["w_v"], grads)
            out[(block, branch)] = float(np.sqrt((gk * gk).sum() + (gv * gv).sum()))
    return out


def _weight_grad(weight: Tensor, grads: dict[int, np.ndarray]) -> np.ndarray:
    if weight._node is None or weight._node not in grads:
        return np.zeros_like(weight.data)
    return grads[weight._node]
