"""Structural configuration shared by the encoders, fusion model, and data
generator. Desk-scale defaults; the full-scale counterparts are far larger.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import DataFormatError

CLASS_NAMES = (
    "grasp", "open", "lay", "sit", "wrapgrasp", "pour",
    "pull", "play", "stab", "contain", "cut", "mix",
)


@dataclass(frozen=True)
class ChoirConfig:
    frames: int = 8            # frames consumed by the model per clip
    grid_h: int = 4            # observation grid height
    grid_w: int = 4            # observation grid width
    width: int = 32            # feature channels
    points: int = 256          # object cloud size
    heads: int = 4             # attention heads
    st_depth: int = 2          # joint space-time attention depth
    knn_k: int = 8             # point-encoder neighborhood size
    obs_channels: int = 4      # observation grid channels
    mesh_vertices: int = 512   # template body vertex count
    num_classes: int = 12
    clip_frames: int = 16      # generated clip length (> frames)
    dropout: float = 0.1
    align_eps: float = 1e-8    # regularizer inside the motion-alignment loss

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise DataFormatError(f"config: width {self.width} not divisible by heads {self.heads}")
        for name in ("frames", "grid_h", "grid_w", "width", "points", "heads"):
            if getattr(self, name) < 1:
                raise DataFormatError(f"config: {name} must be >= 1")
        if self.clip_frames < self.frames:
            raise DataFormatError(
                f"config: clip_frames {self.clip_frames} shorter than model frames {self.frames}"
            )
        if self.points <= self.knn_k:
            raise DataFormatError(f"config: points {self.points} must exceed knn_k {self.knn_k}")
        if self.align_eps <= 0:
            raise DataFormatError(f"config: align_eps must be positive, got {self.align_eps}")

    @property
    def grid_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def appearance_tokens(self) -> int:
        return self.frames * self.grid_h * self.grid_w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ChoirConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataFormatError(f"config: unknown fields {sorted(unknown)}")
        return cls(**data)
