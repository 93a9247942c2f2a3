"""End-to-end training: frame sampling, per-epoch object-instance pairing,
Adam with cosine annealing, the per-class gradient-modulation table, and the
run report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import CLASS_NAMES, ChoirConfig
from .encoders import loss_motion_alignment, sample_frame_window
from .errors import DataFormatError
from .evalkit import aggregate_rows, evaluate_sample, per_class_table
from .geometry import AffordanceSeed, TemplateMesh, propagate_affordance, relative_motion
from .model import AblationFlags, ChoirModel, LossBreakdown, SampleInputs, kv_gradient_norms, loss_total
from .optim import Adam, cosine_lr
from .synthdata import PROPAGATION_ALPHA, PROPAGATION_K, sample_object_instance

REPORT_SCHEMA_VERSION = 1


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    modulation_probe_samples: int = 2   # samples per class for the per-epoch table
    eval_every: int = 0                 # 0: endpoints only
    dropout_enabled: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    """Persisted record of a run; serializes deterministically.

    Wall-clock is telemetry, not part of the artifact contract: it is kept in
    memory and printed by the CLI, but serialized as null so reruns with the
    same seed produce byte-identical reports.
    """

    kind: str
    config: dict
    settings: dict
    flags: dict
    seeds: dict
    epochs: list = field(default_factory=list)
    epoch0_val: dict | None = None
    final_val: dict | None = None
    pretrain_curve: list | None = None
    tool_version: str = __version__
    schema_version: int = REPORT_SCHEMA_VERSION
    wall_clock_seconds: float | None = None

    def to_json(self, include_timing: bool = False) -> str:
        payload = asdict(self)
        if not include_timing:
            payload["wall_clock_seconds"] = None
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def save(self, path, include_timing: bool = False):
        Path(path).write_text(self.to_json(include_timing), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        data = json.loads(text)
        data.pop("schema_version", None)
        version = data.pop("tool_version", __version__)
        report = cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})
        report.tool_version = version
        return report


def eval_frame_indices(clip_frames: int, frames: int) -> np.ndarray:
    """Deterministic uniform coverage of the clip for evaluation."""
    return np.round(np.linspace(0, clip_frames - 1, frames)).astype(np.int64)


def build_inputs(sample, window: np.ndarray, cloud: np.ndarray | None = None) -> SampleInputs:
    return SampleInputs(
        obs_grid=sample.obs_grid[window],
        motion=relative_motion(sample.trajectory[window]),
        cloud=sample.cloud if cloud is None else cloud,
    )


def evaluate_model(model: ChoirModel, samples, mesh: TemplateMesh) -> dict:
    """Full metrics over a sample list with deterministic frame coverage."""
    if not samples:
        raise DataFormatError("evaluate: empty dataset")
    cfg = model.cfg
    model.set_training(False)
    rows = []
    for sample in samples:
        window = eval_frame_indices(sample.spec.clip_frames, cfg.frames)
        with ad.no_grad():
            outputs = model.forward(build_inputs(sample, window))
        rows.append(evaluate_sample(outputs, sample, mesh, sample.gt_contact[window]))
    return {
        "aggregate": aggregate_rows(rows),
        "per_class": per_class_table(rows, CLASS_NAMES),
        "per_sample": rows,
    }


def _epoch_instance(sample, run_seed: int, epoch: int, index: int, n_points: int):
    """Fresh 3D instance of the sample's category for this epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, 0xE5, epoch, index]))
    cloud, red, blue = sample_object_instance(sample.spec.class_index, n_points, rng)
    affordance = propagate_affordance(cloud, AffordanceSeed(red=red, blue=blue),
                                      alpha=PROPAGATION_ALPHA, k=PROPAGATION_K)
    return cloud, affordance


def modulation_table(model: ChoirModel, samples, mesh: TemplateMesh,
                     per_class: int) -> list[dict]:
    """Frobenius norms of the clue-mapping weight gradients per class.

    One forward/backward per class on a small probe batch; gradients go into
    a scratch map, never into the optimizer's accumulators.
    """
    cfg = model.cfg
    by_class: dict[int, list] = {}
    for sample in samples:
        by_class.setdefault(sample.spec.class_index, []).append(sample)
    table = []
    for ci in range(cfg.num_classes):
        probe = by_class.get(ci, [])[:per_class]
        if not probe:
            continue
        with ad.Graph():
            losses = []
            for sample in probe:
                window = eval_frame_indices(sample.spec.clip_frames, cfg.frames)
                outputs = model.forward(build_inputs(sample, window))
                piece = loss_total(outputs, sample.gt_contact[window], sample.gt_affordance,
                                   sample.spec.class_index,
                                   include_semantic=not model.flags.disable_semantic_head)
                losses.append(ad.reshape(piece.total, (1,)))
            grads = ad.backward(ad.tensor_mean(ad.concat(losses)), write_leaf_grads=False)
        for (block, branch), norm in kv_gradient_norms(model, grads).items():
            table.append({
                "block": block,
                "branch": branch,
                "class_index": ci,
                "class_name": CLASS_NAMES[ci],
                "grad_norm": norm,
            })
    return table


def train_model(model: ChoirModel, train_samples, val_samples, mesh: TemplateMesh,
                settings: TrainSettings) -> RunReport:
    """Optimize the full model; deterministic in (model seed, settings.seed)."""
    if not train_samples:
        raise DataFormatError("train: empty dataset")
    cfg = model.cfg
    report = RunReport(
        kind="train",
        config=cfg.to_dict(),
        settings=settings.to_dict(),
        flags=model.flags.to_dict(),
        seeds={"run": settings.seed},
    )
    report.epoch0_val = evaluate_model(model, val_samples, mesh) if val_samples else None

    params = model.trainable_parameters()
    opt = Adam(params, lr=settings.lr)
    order_rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0xF6]))
    online_pretrain = model.flags.online_motion_pretrain

    for epoch in range(settings.epochs):
        lr = cosine_lr(epoch, settings.epochs, settings.lr)
        order = order_rng.permutation(len(train_samples))
        epoch_loss = {"total": 0.0, "affordance": 0.0, "contact": 0.0, "semantic": 0.0}
        n_batches = 0
        model.set_training(settings.dropout_enabled)
        for start in range(0, len(order), settings.batch_size):
            batch = order[start:start + settings.batch_size]
            with ad.Graph():
                pieces: list[LossBreakdown] = []
                for index in batch:
                    sample = train_samples[index]
                    cloud, affordance = _epoch_instance(sample, settings.seed, epoch,
                                                        int(index), cfg.points)
                    window = sample_frame_window(order_rng, sample.spec.clip_frames, cfg.frames)
                    inputs = build_inputs(sample, window, cloud)
                    outputs = model.forward(inputs)
                    piece = loss_total(outputs, sample.gt_contact[window], affordance,
                                       sample.spec.class_index,
                                       include_semantic=not model.flags.disable_semantic_head)
                    if online_pretrain and not model.flags.disable_motion:
                        piece = _add_online_alignment(model, piece, inputs, order_rng, cfg)
                    pieces.append(piece)
                total = ad.tensor_mean(ad.concat([ad.reshape(p.total, (1,)) for p in pieces]))
                ad.backward(total)
            opt.step(lr)
            opt.zero_grad()
            n_batches += 1
            epoch_loss["total"] += total.item()
            for key, attr in (("affordance", "affordance"), ("contact", "contact"), ("semantic", "semantic")):
                epoch_loss[key] += float(np.mean([getattr(p, attr) for p in pieces]))
        model.set_training(False)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "loss": {k: v / n_batches for k, v in epoch_loss.items()},
            "grad_modulation": modulation_table(model, train_samples, mesh,
                                                settings.modulation_probe_samples),
        }
        if settings.eval_every and val_samples and (epoch + 1) % settings.eval_every == 0:
            entry["val"] = evaluate_model(model, val_samples, mesh)["aggregate"]
        report.epochs.append(entry)

    report.final_val = evaluate_model(model, val_samples, mesh) if val_samples else None
    return report


def _add_online_alignment(model: ChoirModel, piece: LossBreakdown, inputs: SampleInputs,
                          rng: np.random.Generator, cfg: ChoirConfig) -> LossBreakdown:
    """Optional online variant: adds the motion-alignment term to the batch
    loss instead of pre-training offline (kept to demonstrate its collapse
    failure mode)."""
    j, k = sorted(rng.choice(cfg.frames, size=2, replace=False))
    f_v = model.appearance(inputs.obs_grid)
    hw = cfg.grid_tokens
    fv_j = ad.narrow(f_v, 0, j * hw, hw)
    fv_k = ad.narrow(f_v, 0, k * hw, hw)
    f_m = model.motion(inputs.motion)
    fm_j = ad.narrow(f_m, 0, j, 1)
    fm_k = ad.narrow(f_m, 0, k, 1)
    align = loss_motion_alignment(fm_j, fm_k, fv_j, fv_k, cfg.align_eps)
    return LossBreakdown(total=ad.add(piece.total, align), affordance=piece.affordance,
                         contact=piece.contact, semantic=piece.semantic)
