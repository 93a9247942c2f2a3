"""The three modality encoders: appearance grids, head motion, object points.

The appearance path is a linear patch embedding followed by joint space-time
self-attention over all frame-patch tokens. Motion is a frame-pointwise MLP
over relative pose rows, pre-trained offline by matching its pairwise feature
divergence to the (frozen) appearance divergence. The point path is a single
edge-aggregation block over a KNN graph fused with a global max feature.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ChoirConfig
from .errors import DataFormatError, ShapeMismatch
from .geometry import knn_graph, relative_motion
from .nn import CrossAttention, LayerNorm, Linear, Module, mlp, run_mlp, uniform_init
from .optim import Adam

MOTION_DIM = 12

# Fixed input scaling for the motion MLP: pose deltas live on a ~0.1 scale
# while the small-init MLP contracts differences by roughly 12x, so without
# this gain the encoder would start out numb to motion.
MOTION_INPUT_GAIN = 12.0


class SelfAttentionBlock(Module):
    """Pre-norm transformer block: joint attention over all tokens + MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln_attn = LayerNorm(dim)
        self.attn = CrossAttention(dim, heads, rng)
        self.ln_mlp = LayerNorm(dim)
        self.ffn = mlp([dim, dim, dim], rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln_attn(x)
        x = ad.add(x, self.attn(h, h))
        return ad.add(x, run_mlp(self.ffn, self.ln_mlp(x)))


class AppearanceEncoder(Module):
    """Patch embedding + learned positions + joint space-time attention."""

    def __init__(self, cfg: ChoirConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.obs_channels, cfg.width, rng)
        self.pos_spatial = uniform_init(rng, (cfg.grid_tokens, cfg.width), cfg.width)
        self.pos_temporal = uniform_init(rng, (cfg.frames, cfg.width), cfg.width)
        self.blocks = [SelfAttentionBlock(cfg.width, cfg.heads, rng) for _ in range(cfg.st_depth)]

    def __call__(self, obs_grid: np.ndarray) -> Tensor:
        cfg = self.cfg
        expected = (cfg.frames, cfg.grid_h, cfg.grid_w, cfg.obs_channels)
        grid = np.asarray(obs_grid, dtype=np.float64)
        if grid.shape != expected:
            raise ShapeMismatch(f"appearance: expected grid {expected}, got {grid.shape}")
        flat = Tensor(grid.reshape(cfg.appearance_tokens, cfg.obs_channels))
        x = self.patch_embed(flat)
        x3 = ad.reshape(x, (cfg.frames, cfg.grid_tokens, cfg.width))
        x3 = ad.add(x3, ad.reshape(self.pos_spatial, (1, cfg.grid_tokens, cfg.width)))
        x3 = ad.add(x3, ad.reshape(self.pos_temporal, (cfg.frames, 1, cfg.width)))
        x = ad.reshape(x3, (cfg.appearance_tokens, cfg.width))
        for block in self.blocks:
            x = block(x)
        return x


class MotionEncoder(Module):
    """Frame-pointwise MLP from 12-value relative poses to feature rows."""

    def __init__(self, cfg: ChoirConfig, rng: np.random.Generator):
        self.layers = mlp([MOTION_DIM, cfg.width, cfg.width, cfg.width], rng)

    def __call__(self, motion: np.ndarray | Tensor) -> Tensor:
        x = motion if isinstance(motion, Tensor) else Tensor(np.asarray(motion, dtype=np.float64))
        if x.data.ndim != 2 or x.data.shape[1] != MOTION_DIM:
            raise ShapeMismatch(f"motion: expected (T, {MOTION_DIM}) rows, got {x.data.shape}")
        return run_mlp(self.layers, ad.mul(x, MOTION_INPUT_GAIN))


class PointEncoder(Module):
    """One KNN edge-aggregation block fused with the global max feature.

    KNN ties break toward the lower point index and every per-point reduction
    is order-independent, so permuting the input cloud permutes the output
    rows bitwise.
    """

    def __init__(self, cfg: ChoirConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.edge_mlp = mlp([6, cfg.width, cfg.width], rng)
        self.fuse = mlp([2 * cfg.width, cfg.width, cfg.width], rng)

    def __call__(self, cloud: np.ndarray) -> Tensor:
        cfg = self.cfg
        pts = np.asarray(cloud, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"points: expected (N, 3) cloud, got {pts.shape}")
        n = pts.shape[0]
        if n <= cfg.knn_k:
            raise DataFormatError(f"points: cloud size {n} must exceed knn_k {cfg.knn_k}")
        graph = knn_graph(pts, cfg.knn_k)
        neighbors = pts[graph.indices]                      # (N, k, 3)
        center = np.repeat(pts[:, None, :], cfg.knn_k, axis=1)
        edge_in = np.concatenate([center, neighbors - center], axis=2)
        e = run_mlp(self.edge_mlp, Tensor(edge_in.reshape(n * cfg.knn_k, 6)))
        e = ad.reshape(e, (n, cfg.knn_k, cfg.width))
        local = ad.amax(e, axis=1)
        global_feat = ad.amax(local, axis=0, keepdims=True)
        fused_in = ad.concat([local, ad.broadcast_to(global_feat, (n, cfg.width))], axis=1)
        return run_mlp(self.fuse, fused_in)


def alignment_divergence(p: Tensor, q: Tensor, eps: float) -> Tensor:
    """sum p * log(eps + p / (eps + q)) over all entries of distribution rows."""
    ratio = ad.div(p, ad.add(q, eps))
    return ad.tensor_sum(ad.mul(p, ad.log(ad.add(ratio, eps))))


def loss_motion_alignment(fm_j: Tensor, fm_k: Tensor, fv_j: Tensor, fv_k: Tensor,
                          eps: float = 1e-8) -> Tensor:
    """Absolute gap between the motion and appearance feature divergences.

    Each feature row is turned into a distribution with a softmax over the
    channel axis before the divergence so the log arguments stay positive;
    the appearance term also sums over the spatial tokens of the frame pair.
    """
    if eps <= 0:
        raise DataFormatError(f"motion alignment: eps must be positive, got {eps}")

    def rows(t: Tensor) -> Tensor:
        return ad.reshape(t, (1, -1)) if t.data.ndim == 1 else t

    term_m = alignment_divergence(ad.softmax(rows(fm_j)), ad.softmax(rows(fm_k)), eps)
    term_v = alignment_divergence(ad.softmax(rows(fv_j)), ad.softmax(rows(fv_k)), eps)
    return ad.absolute(ad.sub(term_m, term_v))


def sample_frame_window(rng: np.random.Generator, clip_frames: int, frames: int) -> np.ndarray:
    """Random start in the clip head, then uniform coverage to the last frame."""
    if clip_frames < frames:
        raise DataFormatError(f"frame window: clip {clip_frames} shorter than {frames}")
    if clip_frames == frames:
        return np.arange(frames)
    start = int(rng.integers(0, clip_frames - frames))
    return np.round(np.linspace(start, clip_frames - 1, frames)).astype(np.int64)


def pretrain_motion(appearance: AppearanceEncoder, motion: MotionEncoder,
                    samples, epochs: int, seed: int, lr: float = 1e-3,
                    eps: float = 1e-8) -> list[float]:
    """Train the motion encoder against the frozen appearance encoder.

    Appearance features are computed outside the tape, so its weights can
    neither receive gradients nor drift. Returns the per-epoch mean loss.
    """
    cfg = appearance.cfg
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D]))
    opt = Adam(motion.named_parameters(), lr=lr)
    curve: list[float] = []
    hw = cfg.grid_tokens
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for si in order:
            sample = samples[si]
            window = sample_frame_window(rng, sample.obs_grid.shape[0], cfg.frames)
            j, k = sorted(rng.choice(cfg.frames, size=2, replace=False))
            with ad.no_grad():
                fv = appearance(sample.obs_grid[window])
            fv_j = Tensor(fv.data[j * hw:(j + 1) * hw])
            fv_k = Tensor(fv.data[k * hw:(k + 1) * hw])
            rel = relative_motion(sample.trajectory[window])
            with ad.Graph():
                fm = motion(rel[[j, k]])
                fm_j = ad.narrow(fm, 0, 0, 1)
                fm_k = ad.narrow(fm, 0, 1, 1)
                loss = loss_motion_alignment(fm_j, fm_k, fv_j, fv_k, eps)
                ad.backward(loss)
            opt.step()
            opt.zero_grad()
            total += loss.item()
        curve.append(total / len(samples))
    return curve
