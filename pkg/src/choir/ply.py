"""Minimal ASCII PLY read/write for point clouds and meshes.

Positions are doubles; an optional per-vertex scalar is stored as the
standard "quality" property (used for affordance/contact export). Floats are
written with repr so output bytes are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError


@dataclass
class PlyData:
    vertices: np.ndarray
    faces: np.ndarray | None = None
    quality: np.ndarray | None = None
    comments: tuple[str, ...] = ()


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None,
              quality: np.ndarray | None = None, comments=()):
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise DataFormatError(f"write_ply: expected (N, 3) vertices, got {verts.shape}")
    if quality is not None:
        quality = np.asarray(quality, dtype=np.float64).reshape(-1)
        if quality.shape[0] != verts.shape[0]:
            raise DataFormatError("write_ply: quality length does not match vertex count")
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [
        f"element vertex {verts.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if quality is not None:
        lines.append("property double quality")
    n_faces = 0 if faces is None else len(faces)
    if faces is not None:
        lines += [f"element face {n_faces}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    for i in range(verts.shape[0]):
        row = " ".join(repr(float(v)) for v in verts[i])
        if quality is not None:
            row += f" {repr(float(quality[i]))}"
        lines.append(row)
    if faces is not None:
        for tri in np.asarray(faces, dtype=np.int64):
            lines.append("3 " + " ".join(str(int(v)) for v in tri))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path) -> PlyData:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read().splitlines()
    if not text or text[0].strip() != "ply":
        raise DataFormatError(f"read_ply: {path} is not a PLY file")
    n_verts = n_faces = 0
    vertex_props: list[str] = []
    comments: list[str] = []
    current = None
    i = 1
    while i < len(text):
        line = text[i].strip()
        i += 1
        if line == "end_header":
            break
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment":
            comments.append(line[len("comment "):])
        elif parts[0] == "format":
            if parts[1] != "ascii":
                raise DataFormatError("read_ply: only ascii format is supported")
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_verts = int(parts[2])
            elif current == "face":
                n_faces = int(parts[2])
        elif parts[0] == "property" and current == "vertex" and parts[1] != "list":
            vertex_props.append(parts[2])
    else:
        raise DataFormatError("read_ply: missing end_header")

    for needed in ("x", "y", "z"):
        if needed not in vertex_props:
            raise DataFormatError(f"read_ply: vertex property '{needed}' missing")
    has_quality = "quality" in vertex_props
    col = {name: j for j, name in enumerate(vertex_props)}

    if len(text) < i + n_verts + n_faces:
        raise DataFormatError("read_ply: file truncated")
    verts = np.zeros((n_verts, 3), dtype=np.float64)
    quality = np.zeros(n_verts, dtype=np.float64) if has_quality else None
    for r in range(n_verts):
        vals = text[i + r].split()
        if len(vals) != len(vertex_props):
            raise DataFormatError(f"read_ply: vertex row {r} has {len(vals)} fields, expected {len(vertex_props)}")
        verts[r] = (float(vals[col['x']]), float(vals[col['y']]), float(vals[col['z']]))
        if has_quality:
            quality[r] = float(vals[col["quality"]])
    i += n_verts
    faces = None
    if n_faces:
        faces = np.zeros((n_faces, 3), dtype=np.int64)
        for r in range(n_faces):
            vals = text[i + r].split()
            if int(vals[0]) != 3:
                raise DataFormatError("read_ply: only triangle faces are supported")
            faces[r] = [int(v) for v in vals[1:4]]
    return PlyData(vertices=verts, faces=faces, quality=quality, comments=tuple(comments))
