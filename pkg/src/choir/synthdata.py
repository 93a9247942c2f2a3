"""Procedural interaction scenarios: object clouds with seeded affordance
regions, head trajectories, observation grids, and contact labels.

Construction rules the verification harness leans on:

- hand scenarios put the contact timing into the observation grid (a class
  pattern whose intensity ramps inside the window) and keep head motion small;
- body scenarios put NO timing into the grid (class pattern at constant
  intensity, i.i.d. noise) and encode the window purely in the trajectory,
  whose rotation rate peaks at the window start;
- affordance labels always come from seed propagation over the sampled cloud,
  so red seeds carry the maximum after normalization.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CLASS_NAMES, ChoirConfig
from .errors import DataFormatError
from .geometry import (
    AffordanceSeed,
    TemplateMesh,
    pose_row,
    propagate_affordance,
    rot_z,
)

RECORD_MAGIC = b"CHOIRSMP"
RECORD_VERSION = 1
MANIFEST_VERSION = 1

PROPAGATION_ALPHA = 0.995
PROPAGATION_K = 5
CLOUD_JITTER = 0.005
RED_SEED_COUNT = 6     # sparse annotation clicks per instance
BLUE_FACTOR = 16       # blue shell size as a multiple of the red count

# class -> (archetype, red seed region, interaction mode)
CLASS_TABLE = {
    "grasp": ("mug", "handle", "hand"),
    "open": ("bottle", "cap", "hand"),
    "lay": ("bed", "top", "body"),
    "sit": ("chair", "seat", "body"),
    "wrapgrasp": ("bottle", "body", "hand"),
    "pour": ("mug", "rim", "hand"),
    "pull": ("suitcase", "handle", "hand"),
    "play": ("piano", "keys", "hand"),
    "stab": ("knife", "tip", "hand"),
    "contain": ("bowl", "interior", "hand"),
    "cut": ("knife", "edge", "hand"),
    "mix": ("spoon", "tip", "hand"),
}

# body-part sets receiving contact, per class; hand classes default to hands
CONTACT_PARTS = {
    "sit": ("pelvis", "legs"),
    "lay": ("torso", "pelvis"),
}
PART_FALLBACK = ("hands", "arms", "torso", "legs", "pelvis", "feet", "head")


# -- archetype surfaces ---------------------------------------------------------


def _cylinder(rng, n, radius, z0, z1, center=(0.0, 0.0)):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    z = rng.uniform(z0, z1, n)
    return np.column_stack([center[0] + radius * np.cos(theta),
                            center[1] + radius * np.sin(theta), z])


def _disk(rng, n, radius, z, center=(0.0, 0.0)):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([center[0] + r * np.cos(theta),
                            center[1] + r * np.sin(theta), np.full(n, z)])


def _plate(rng, n, center, size):
    c = np.asarray(center, dtype=np.float64)
    s = np.asarray(size, dtype=np.float64)
    return c + rng.uniform(-0.5, 0.5, (n, 3)) * s


def _bar(rng, n, p0, p1, thickness):
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    t = rng.uniform(0.0, 1.0, (n, 1))
    return p0 + t * (p1 - p0) + rng.normal(0.0, thickness, (n, 3))


def _hemisphere(rng, n, radius, scale=1.0):
    phi = np.arccos(1.0 - rng.uniform(0.0, 1.0, n))  # 0..pi/2, area-uniform
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    r = radius * scale
    return np.column_stack([r * np.sin(phi) * np.cos(theta),
                            r * np.sin(phi) * np.sin(theta),
                            radius - r * np.cos(phi)])


def _arc(rng, n, center, radius, thickness):
    u = rng.uniform(0.25, np.pi - 0.25, n)
    pts = np.column_stack([center[0] + radius * np.sin(u),
                           np.zeros(n),
                           center[2] - radius * np.cos(u)])
    return pts + rng.normal(0.0, thickness, (n, 3))


def _archetype_regions(name: str):
    """(region, weight, sampler) triples; weights are rough surface areas."""
    if name == "mug":
        return [
            ("body", 0.50, lambda rng, n: _cylinder(rng, n, 0.045, 0.0, 0.10)),
            ("rim", 0.15, lambda rng, n: _cylinder(rng, n, 0.045, 0.092, 0.10)),
            ("interior", 0.15, lambda rng, n: _disk(rng, n, 0.040, 0.015)),
            ("handle", 0.20, lambda rng, n: _arc(rng, n, (0.05, 0.0, 0.05), 0.035, 0.004)),
        ]
    if name == "bottle":
        return [
            ("body", 0.70, lambda rng, n: _cylinder(rng, n, 0.035, 0.0, 0.19)),
            ("cap", 0.30, lambda rng, n: _cylinder(rng, n, 0.016, 0.19, 0.225)),
        ]
    if name == "bowl":
        return [
            ("outside", 0.45, lambda rng, n: _hemisphere(rng, n, 0.09, 1.0)),
            ("interior", 0.37, lambda rng, n: _hemisphere(rng, n, 0.09, 0.92)),
            ("rim", 0.18, lambda rng, n: _cylinder(rng, n, 0.088, 0.085, 0.092)),
        ]
    if name == "chair":
        return [
            ("seat", 0.33, lambda rng, n: _plate(rng, n, (0.0, 0.0, 0.45), (0.42, 0.42, 0.02))),
            ("backrest", 0.33, lambda rng, n: _plate(rng, n, (0.0, -0.21, 0.75), (0.42, 0.03, 0.55))),
            ("legs", 0.34, _chair_legs),
        ]
    if name == "bed":
        return [
            ("top", 0.38, lambda rng, n: _plate(rng, n, (0.0, 0.0, 0.5), (0.9, 1.9, 0.03))),
            ("side", 0.62, lambda rng, n: _bed_sides(rng, n)),
        ]
    if name == "knife":
        return [
            ("handle", 0.30, lambda rng, n: _bar(rng, n, (-0.12, 0.0, 0.0), (0.0, 0.0, 0.0), 0.006)),
            ("blade", 0.50, lambda rng, n: _plate(rng, n, (0.09, 0.0, 0.0), (0.18, 0.003, 0.03))),
            ("edge", 0.12, lambda rng, n: _plate(rng, n, (0.09, 0.0, -0.016), (0.18, 0.003, 0.004))),
            ("tip", 0.08, lambda rng, n: (0.185, 0.0, -0.004) + rng.normal(0.0, 0.006, (n, 3))),
        ]
    if name == "piano":
        return [
            ("body", 0.60, lambda rng, n: _plate(rng, n, (0.0, 0.10, 0.62), (1.2, 0.30, 0.62))),
            ("keys", 0.40, lambda rng, n: _plate(rng, n, (0.0, -0.16, 0.42), (1.1, 0.12, 0.02))),
        ]
    if name == "suitcase":
        return [
            ("body", 0.75, lambda rng, n: _suitcase_body(rng, n)),
            ("handle", 0.25, lambda rng, n: _bar(rng, n, (-0.08, 0.0, 0.72), (0.08, 0.0, 0.72), 0.008)),
        ]
    if name == "spoon":
        return [
            ("handle", 0.55, lambda rng, n: _bar(rng, n, (0.0, 0.0, 0.0), (0.0, 0.0, 0.18), 0.005)),
            ("tip", 0.45, lambda rng, n: _disk(rng, n, 0.024, 0.21) + np.array([0.0, 0.012, 0.0])),
        ]
    raise DataFormatError(f"unknown archetype '{name}'")


def _chair_legs(rng, n):
    corners = np.array([[0.18, 0.18], [-0.18, 0.18], [0.18, -0.18], [-0.18, -0.18]])
    pick = rng.integers(0, 4, n)
    z = rng.uniform(0.0, 0.44, n)
    pts = np.column_stack([corners[pick, 0], corners[pick, 1], z])
    return pts + rng.normal(0.0, 0.01, (n, 3))


def _bed_sides(rng, n):
    side = rng.integers(0, 4, n)
    pts = np.empty((n, 3))
    for i in range(n):
        if side[i] == 0:
            pts[i] = (0.45, rng.uniform(-0.95, 0.95), rng.uniform(0.0, 0.5))
        elif side[i] == 1:
            pts[i] = (-0.45, rng.uniform(-0.95, 0.95), rng.uniform(0.0, 0.5))
        elif side[i] == 2:
            pts[i] = (rng.uniform(-0.45, 0.45), 0.95, rng.uniform(0.0, 0.5))
        else:
            pts[i] = (rng.uniform(-0.45, 0.45), -0.95, rng.uniform(0.0, 0.5))
    return pts


def _suitcase_body(rng, n):
    face = rng.integers(0, 4, n)
    pts = np.empty((n, 3))
    for i in range(n):
        if face[i] == 0:
            pts[i] = (rng.uniform(-0.2, 0.2), 0.08, rng.uniform(0.0, 0.65))
        elif face[i] == 1:
            pts[i] = (rng.uniform(-0.2, 0.2), -0.08, rng.uniform(0.0, 0.65))
        elif face[i] == 2:
            pts[i] = (0.2, rng.uniform(-0.08, 0.08), rng.uniform(0.0, 0.65))
        else:
            pts[i] = (-0.2, rng.uniform(-0.08, 0.08), rng.uniform(0.0, 0.65))
    return pts


def _allocate_counts(weights: list[float], n: int) -> list[int]:
    raw = np.array(weights, dtype=np.float64)
    raw = raw / raw.sum() * n
    counts = np.floor(raw).astype(int)
    remainder = raw - counts
    for idx in np.argsort(-remainder, kind="stable")[: n - counts.sum()]:
        counts[idx] += 1
    return counts.tolist()


def _farthest_point_subset(pts: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point selection, seeded at the lowest candidate index."""
    chosen = [int(candidates[0])]
    d = np.linalg.norm(pts[candidates] - pts[chosen[0]], axis=1)
    while len(chosen) < min(count, candidates.size):
        far = int(np.argmax(d))
        if d[far] <= 0.0:
            break
        chosen.append(int(candidates[far]))
        d = np.minimum(d, np.linalg.norm(pts[candidates] - pts[candidates[far]], axis=1))
    return np.sort(np.array(chosen, dtype=np.int64))


def sample_object_instance(class_index: int, n_points: int, rng: np.random.Generator):
    """Cloud (unit-normalized) plus affordance seed sets for one 3D instance.

    Instance variety comes from a per-instance anisotropic stretch and the
    surface jitter. Red seeds are a sparse farthest-point subsample of the
    class's interaction region (annotation clicks, in effect) and blue is a
    large surrounding shell; spreading the seeds keeps their propagated
    scores above every blue point's.
    """
    class_name = CLASS_NAMES[class_index]
    archetype, red_region, _ = CLASS_TABLE[class_name]
    regions = _archetype_regions(archetype)
    counts = _allocate_counts([w for _, w, _ in regions], n_points)
    chunks, tags = [], []
    for (region, _, sampler), count in zip(regions, counts):
        chunks.append(sampler(rng, count))
        tags += [region] * count
    pts = np.concatenate(chunks, axis=0)
    pts = pts + rng.normal(0.0, CLOUD_JITTER, pts.shape)
    pts = pts * rng.uniform(0.9, 1.1, size=3)             # instance stretch
    pts = pts - pts.mean(axis=0)
    pts = pts / np.linalg.norm(pts, axis=1).max()

    tags = np.array(tags)
    region_idx = np.flatnonzero(tags == red_region)
    # keep seeds sparse within the region: dense seeds share blue neighbors,
    # and shared heavy edges can push a blue point above the seed scores
    n_red = max(2, min(RED_SEED_COUNT, region_idx.size // 4))
    red = _farthest_point_subset(pts, region_idx, n_red)
    non_red = np.setdiff1d(np.arange(n_points), red)
    d_to_red = np.linalg.norm(pts[non_red][:, None, :] - pts[red][None, :, :], axis=2).min(axis=1)
    n_blue = min(non_red.size, max(8 * PROPAGATION_K, BLUE_FACTOR * red.size))
    order = np.lexsort((non_red, d_to_red))[:n_blue]
    blue = np.sort(non_red[order])
    return pts, red, blue


# -- scenario specification -----------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    class_index: int
    seed: int
    clip_frames: int
    t_on: int
    t_off: int

    def __post_init__(self):
        if not 0 <= self.class_index < len(CLASS_NAMES):
            raise DataFormatError(f"scenario: class index {self.class_index} out of range")
        if not 0 <= self.t_on < self.t_off <= self.clip_frames:
            raise DataFormatError(
                f"scenario: window [{self.t_on}, {self.t_off}) invalid for {self.clip_frames} frames")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_index]

    @property
    def archetype(self) -> str:
        return CLASS_TABLE[self.class_name][0]

    @property
    def mode(self) -> str:
        return CLASS_TABLE[self.class_name][2]


def make_spec(class_index: int, seed: int, clip_frames: int) -> ScenarioSpec:
    """Draw the contact window deterministically from the scenario seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
    t_on = int(rng.integers(2, max(3, clip_frames // 2)))
    max_off = clip_frames - 2
    t_off = int(rng.integers(t_on + 3, max(t_on + 4, max_off + 1)))
    t_off = min(t_off, clip_frames)
    return ScenarioSpec(class_index=class_index, seed=seed,
                        clip_frames=clip_frames, t_on=t_on, t_off=t_off)


@dataclass
class SyntheticSample:
    spec: ScenarioSpec
    obs_grid: np.ndarray       # (clip, H, W, D)
    trajectory: np.ndarray     # (clip, 12) absolute poses
    cloud: np.ndarray          # (N, 3)
    gt_contact: np.ndarray     # (clip, V) bool
    gt_affordance: np.ndarray  # (N,)
    red: np.ndarray
    blue: np.ndarray

    @property
    def class_index(self) -> int:
        return self.spec.class_index

    @property
    def mode(self) -> str:
        return self.spec.mode


def _window_ramp(t: np.ndarray, t_on: int, t_off: int) -> np.ndarray:
    """Trapezoid: 0 outside, 1 on the plateau, 1-frame ramps at both ends."""
    up = np.clip((t - (t_on - 1)) / 2.0, 0.0, 1.0)
    down = np.clip(((t_off + 1) - t) / 2.0, 0.0, 1.0)
    return up * down


def class_pattern(class_index: int, grid_h: int, grid_w: int, channels: int) -> np.ndarray:
    """Fixed spatial code for one interaction class (same across all samples)."""
    rng = np.random.default_rng(np.random.SeedSequence([0xC0DE, class_index]))
    pat = rng.uniform(-1.0, 1.0, (grid_h, grid_w, channels))
    return pat / np.sqrt((pat * pat).mean())


def _body_trajectory(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    frames = np.arange(spec.clip_frames, dtype=np.float64)
    amplitude = np.deg2rad(rng.uniform(45.0, 90.0))
    ramp = _window_ramp(frames, spec.t_on, spec.t_off)
    yaw = amplitude * ramp
    direction = rng.normal(0.0, 1.0, 2)
    direction /= np.linalg.norm(direction)
    magnitude = rng.uniform(0.4, 1.0)
    rows = []
    for i, t in enumerate(frames):
        shift = magnitude * ramp[i]
        trans = np.array([direction[0] * shift, direction[1] * shift,
                          1.6 + 0.01 * np.sin(0.7 * t)])
        rows.append(pose_row(trans + rng.normal(0.0, 0.003, 3), rot_z(yaw[i])))
    return np.stack(rows)


def _hand_trajectory(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """Small head wander plus a lean toward the object inside the window.

    The translation ramp mirrors the contact window so pose deltas carry the
    timing the motion encoder must align with the visual stream; rotations
    stay under 10 degrees and translations under 0.1 m.
    """
    frames = np.arange(spec.clip_frames, dtype=np.float64)
    steps = rng.normal(0.0, 1.0, spec.clip_frames)
    walk = np.cumsum(steps)
    walk -= walk[0]
    peak = np.abs(walk).max()
    target = np.deg2rad(rng.uniform(3.0, 9.5))
    yaw = walk * (target / peak if peak > 0 else 0.0)
    direction = rng.normal(0.0, 1.0, 3)
    direction /= np.linalg.norm(direction)
    lean = rng.uniform(0.05, 0.08) * _window_ramp(frames, spec.t_on, spec.t_off)
    trans_walk = np.cumsum(rng.normal(0.0, 1.0, (spec.clip_frames, 3)), axis=0)
    trans_walk -= trans_walk[0]
    scale = np.abs(trans_walk).max()
    trans_walk *= (0.015 / scale) if scale > 0 else 0.0
    rows = []
    for i in range(spec.clip_frames):
        trans = trans_walk[i] + lean[i] * direction + np.array([0.0, 0.0, 1.6])
        rows.append(pose_row(trans, rot_z(yaw[i])))
    return np.stack(rows)


def contact_part_vertices(mesh: TemplateMesh, class_name: str) -> np.ndarray:
    parts = CONTACT_PARTS.get(class_name, ("hands",))
    idx = np.concatenate([mesh.part_vertices(p) for p in parts])
    if idx.size == 0:
        for fallback in PART_FALLBACK:
            idx = mesh.part_vertices(fallback)
            if idx.size:
                break
    if idx.size == 0:
        raise DataFormatError("contact parts: template mesh has no labeled vertices")
    return np.sort(idx)


def generate_scenario(spec: ScenarioSpec, cfg: ChoirConfig, mesh: TemplateMesh) -> SyntheticSample:
    """Deterministic in the spec seed: same spec, same bytes."""
    if spec.clip_frames != cfg.clip_frames:
        raise DataFormatError(
            f"scenario: spec clip_frames {spec.clip_frames} != config {cfg.clip_frames}")
    cloud_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB2]))
    traj_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC3]))
    grid_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD4]))

    cloud, red, blue = sample_object_instance(spec.class_index, cfg.points, cloud_rng)
    affordance = propagate_affordance(cloud, AffordanceSeed(red=red, blue=blue),
                                      alpha=PROPAGATION_ALPHA, k=PROPAGATION_K)

    if spec.mode == "body":
        trajectory = _body_trajectory(spec, traj_rng)
    else:
        trajectory = _hand_trajectory(spec, traj_rng)

    frames = np.arange(spec.clip_frames, dtype=np.float64)
    pattern = class_pattern(spec.class_index, cfg.grid_h, cfg.grid_w, cfg.obs_channels)
    noise = grid_rng.normal(0.0, 0.05, (spec.clip_frames, cfg.grid_h, cfg.grid_w, cfg.obs_channels))
    if spec.mode == "hand":
        intensity = 0.3 + 0.7 * _window_ramp(frames, spec.t_on, spec.t_off)
    else:
        intensity = np.full(spec.clip_frames, 0.65)
    obs_grid = intensity[:, None, None, None] * pattern[None] + noise

    parts = contact_part_vertices(mesh, spec.class_name)
    gt_contact = np.zeros((spec.clip_frames, mesh.vertex_count), dtype=bool)
    gt_contact[spec.t_on:spec.t_off, parts] = True

    return SyntheticSample(spec=spec, obs_grid=obs_grid, trajectory=trajectory,
                           cloud=cloud, gt_contact=gt_contact, gt_affordance=affordance,
                           red=red, blue=blue)


def standard_suite(seed: int, cfg: ChoirConfig, mesh: TemplateMesh,
                   n_train: int = 96, n_val: int = 32):
    """Class-balanced train/val lists with disjoint scenario-seed ranges."""
    base = seed * 1_000_000
    train = [generate_scenario(make_spec(i % len(CLASS_NAMES), base + i, cfg.clip_frames), cfg, mesh)
             for i in range(n_train)]
    val = [generate_scenario(make_spec(j % len(CLASS_NAMES), base + 500_000 + j, cfg.clip_frames), cfg, mesh)
           for j in range(n_val)]
    return train, val


# -- binary records and the manifest ------------------------------------------------


_ARRAY_ORDER = ("obs_grid", "trajectory", "cloud", "gt_contact", "gt_affordance", "red", "blue")
_DTYPES = {"f8": "<f8", "u1": "u1", "i8": "<i8"}


def _array_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f8"
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return "u1"
    if arr.dtype == np.int64:
        return "i8"
    raise DataFormatError(f"record: unsupported dtype {arr.dtype}")


def encode_sample(sample: SyntheticSample) -> bytes:
    header = {
        "class_index": sample.spec.class_index,
        "class_name": sample.spec.class_name,
        "archetype": sample.spec.archetype,
        "mode": sample.spec.mode,
        "seed": sample.spec.seed,
        "clip_frames": sample.spec.clip_frames,
        "t_on": sample.spec.t_on,
        "t_off": sample.spec.t_off,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += RECORD_MAGIC
    out += struct.pack("<II", RECORD_VERSION, len(head))
    out += head
    for name in _ARRAY_ORDER:
        arr = getattr(sample, name)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        code = _array_code(arr)
        payload = np.ascontiguousarray(arr.astype(_DTYPES[code])).tobytes()
        name_b = name.encode("ascii")
        out += struct.pack("<I", len(name_b)) + name_b
        out += code.encode("ascii")
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}q", *arr.shape)
        out += payload
    return bytes(out)


def decode_sample(blob: bytes) -> SyntheticSample:
    if blob[:8] != RECORD_MAGIC:
        raise DataFormatError("record: bad magic")
    version, head_len = struct.unpack_from("<II", blob, 8)
    if version != RECORD_VERSION:
        raise DataFormatError(f"record: version {version} unsupported (expected {RECORD_VERSION})")
    pos = 16
    header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    pos += head_len
    arrays = {}
    for name in _ARRAY_ORDER:
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        got = blob[pos:pos + name_len].decode("ascii")
        pos += name_len
        if got != name:
            raise DataFormatError(f"record: expected array '{name}', found '{got}'")
        code = blob[pos:pos + 2].decode("ascii")
        pos += 2
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", blob, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        dtype = np.dtype(_DTYPES[code])
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(blob):
            raise DataFormatError("record: truncated payload")
        arrays[name] = np.frombuffer(blob[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise DataFormatError("record: trailing bytes")
    spec = ScenarioSpec(class_index=header["class_index"], seed=header["seed"],
                        clip_frames=header["clip_frames"], t_on=header["t_on"],
                        t_off=header["t_off"])
    return SyntheticSample(
        spec=spec,
        obs_grid=arrays["obs_grid"],
        trajectory=arrays["trajectory"],
        cloud=arrays["cloud"],
        gt_contact=arrays["gt_contact"].astype(bool),
        gt_affordance=arrays["gt_affordance"],
        red=arrays["red"],
        blue=arrays["blue"],
    )


def write_dataset(path, train: list[SyntheticSample], val: list[SyntheticSample],
                  cfg: ChoirConfig, suite_seed: int):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, samples in (("train", train), ("val", val)):
        (root / split).mkdir(exist_ok=True)
        for i, sample in enumerate(samples):
            rel = f"{split}/{i:05d}.bin"
            blob = encode_sample(sample)
            (root / rel).write_bytes(blob)
            entries.append({
                "file": rel,
                "split": split,
                "class_index": sample.spec.class_index,
                "seed": sample.spec.seed,
                "sha256": hashlib.sha256(blob).hexdigest(),
            })
    manifest = {
        "format_version": MANIFEST_VERSION,
        "suite_seed": suite_seed,
        "config": cfg.to_dict(),
        "class_names": list(CLASS_NAMES),
        "counts": {"train": len(train), "val": len(val)},
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                                        encoding="utf-8")
    return manifest


def read_dataset(path):
    """Load and checksum-validate a dataset directory.

    Returns (manifest, train samples, val samples).
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"dataset: no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(
            f"dataset: manifest version {manifest.get('format_version')} unsupported")
    splits = {"train": [], "val": []}
    for entry in manifest["samples"]:
        blob = (root / entry["file"]).read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        if digest != entry["sha256"]:
            raise DataFormatError(f"dataset: checksum mismatch for {entry['file']}")
        sample = decode_sample(blob)
        if sample.spec.class_index != entry["class_index"]:
            raise DataFormatError(f"dataset: class mismatch for {entry['file']}")
        splits[entry["split"]].append(sample)
    counts = manifest.get("counts", {})
    if counts.get("train") != len(splits["train"]) or counts.get("val") != len(splits["val"]):
        raise DataFormatError("dataset: manifest counts disagree with records on disk")
    return manifest, splits["train"], splits["val"]
