"""ASCII PLY round-trips and validation failures."""

import numpy as np
import pytest

from choir.errors import DataFormatError
from choir.ply import read_ply, write_ply


def test_cloud_roundtrip(tmp_path, rng):
    verts = rng.normal(0, 1, (17, 3))
    quality = rng.uniform(0, 1, 17)
    path = tmp_path / "cloud.ply"
    write_ply(path, verts, quality=quality, comments=("alpha=0.995",))
    data = read_ply(path)
    assert np.array_equal(data.vertices, verts)
    assert np.array_equal(data.quality, quality)
    assert data.comments == ("alpha=0.995",)
    assert data.faces is None


def test_mesh_roundtrip(tmp_path, rng):
    verts = rng.normal(0, 1, (4, 3))
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    path = tmp_path / "mesh.ply"
    write_ply(path, verts, faces=faces)
    data = read_ply(path)
    assert np.array_equal(data.faces, faces)
    assert np.array_equal(data.vertices, verts)


def test_write_is_deterministic(tmp_path, rng):
    verts = rng.normal(0, 1, (9, 3))
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    write_ply(a, verts, quality=np.linspace(0, 1, 9))
    write_ply(b, verts, quality=np.linspace(0, 1, 9))
    assert a.read_bytes() == b.read_bytes()


def test_truncated_file_rejected(tmp_path, rng):
    path = tmp_path / "cut.ply"
    write_ply(path, rng.normal(0, 1, (10, 3)))
    text = path.read_text().splitlines()
    path.write_text("\n".join(text[:-3]))
    with pytest.raises(DataFormatError):
        read_ply(path)


def test_non_ply_rejected(tmp_path):
    path = tmp_path / "nope.ply"
    path.write_text("off\n3 1 0\n")
    with pytest.raises(DataFormatError):
        read_ply(path)


def test_quality_length_mismatch_rejected(tmp_path, rng):
    with pytest.raises(DataFormatError):
        write_ply(tmp_path / "bad.ply", rng.normal(0, 1, (5, 3)), quality=np.zeros(4))
