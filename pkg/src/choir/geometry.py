"""Rigid-pose arithmetic, KNN graphs, affordance label propagation, contact
thresholding, and edge-graph geodesics on the template body mesh.

All functions here are pure and operate on plain numpy arrays; nothing touches
the autodiff tape.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NumericFailure, ShapeMismatch

ROTATION_TOL = 1e-9

PART_NAMES = ("head", "torso", "arms", "hands", "pelvis", "legs", "feet")
PART_INDEX = {name: i for i, name in enumerate(PART_NAMES)}


# -- head poses ---------------------------------------------------------------


def check_rotation(r: np.ndarray, context: str = "rotation") -> np.ndarray:
    """Validate orthonormality and unit determinant to 1e-9."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ShapeMismatch(f"{context}: expected 3x3 matrix, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > ROTATION_TOL:
        raise DataFormatError(f"{context}: matrix is not orthonormal within {ROTATION_TOL}")
    if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
        raise DataFormatError(f"{context}: determinant differs from 1 beyond {ROTATION_TOL}")
    return r


def pose_row(translation, rotation) -> np.ndarray:
    """Pack (t, R) into the 12-vector layout used for trajectories."""
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    r = check_rotation(rotation)
    return np.concatenate([t, r.reshape(9)])


def unpack_pose(row: np.ndarray):
    row = np.asarray(row, dtype=np.float64).reshape(12)
    return row[:3], row[3:].reshape(3, 3)


def relative_motion(trajectory: np.ndarray) -> np.ndarray:
    """Per-frame pose deltas against frame 0.

    Row i holds (t_i - t_0, flatten(R_0^T R_i)); frame 0 is always the zero
    translation with the identity rotation.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 12 or traj.shape[0] < 1:
        raise ShapeMismatch(f"relative_motion: expected (T, 12) trajectory, got {traj.shape}")
    t0, r0 = unpack_pose(traj[0])
    check_rotation(r0, "relative_motion: frame 0")
    out = np.empty_like(traj)
    r0_inv = r0.T
    for i in range(traj.shape[0]):
        ti, ri = unpack_pose(traj[i])
        check_rotation(ri, f"relative_motion: frame {i}")
        rel_r = r0_inv @ ri
        out[i, :3] = ti - t0
        out[i, 3:] = rel_r.reshape(9)
    out[0, :3] = 0.0
    out[0, 3:] = np.eye(3).reshape(9)
    return out


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix, radians in [0, pi]."""
    c = (np.trace(np.asarray(r).reshape(3, 3)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


# -- KNN graphs ---------------------------------------------------------------


@dataclass
class KnnGraph:
    """For each source point: neighbor indices and Euclidean distances,
    sorted ascending with ties broken toward the lower index."""

    indices: np.ndarray
    distances: np.ndarray


def knn_graph(points: np.ndarray, k: int) -> KnnGraph:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"knn_graph: expected (N, 3) points, got {pts.shape}")
    n = pts.shape[0]
    if k < 1 or n <= k:
        raise DataFormatError(f"knn_graph: need N > k >= 1, got N={n}, k={k}")
    if not np.all(np.isfinite(pts)):
        raise NumericFailure("knn_graph: points contain non-finite values")
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    # argpartition narrows each row to k candidates; rows with a distance tie
    # at the boundary fall back to a full stable sort so ties still break
    # toward the lower index.
    if k < n - 1:
        cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
        rows = np.arange(n)[:, None]
        cand_d = d2[rows, cand]
        order_in_cand = np.lexsort((cand, cand_d), axis=1)
        idx = np.take_along_axis(cand, order_in_cand, axis=1)
        boundary = cand_d.max(axis=1)
        ambiguous = (d2 <= boundary[:, None]).sum(axis=1) > k
        for r in np.flatnonzero(ambiguous):
            idx[r] = np.lexsort((np.arange(n), d2[r]))[:k]
    else:
        idx = np.empty((n, k), dtype=np.int64)
        for r in range(n):
            idx[r] = np.lexsort((np.arange(n), d2[r]))[:k]
    dists = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    return KnnGraph(indices=idx.astype(np.int64), distances=dists)


# -- affordance label propagation ----------------------------------------------


@dataclass
class AffordanceSeed:
    """High-probability indices (red) and the adjacent propagable set (blue)."""

    red: np.ndarray
    blue: np.ndarray

    def __post_init__(self):
        self.red = np.asarray(self.red, dtype=np.int64).reshape(-1)
        self.blue = np.asarray(self.blue, dtype=np.int64).reshape(-1)
        if np.intersect1d(self.red, self.blue).size:
            raise DataFormatError("AffordanceSeed: red and blue sets overlap")

    def validate(self, n: int):
        for name, idx in (("red", self.red), ("blue", self.blue)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataFormatError(f"AffordanceSeed: {name} indices out of range [0, {n})")


def _propagation_operator(points: np.ndarray, seed: AffordanceSeed, k: int):
    """Symmetric-normalized adjacency S_hat and the one-hot label vector Y.

    The raw adjacency links each red point to its k nearest blue points with
    the Euclidean distance as the weight; it is then symmetrized and degree
    normalized. Zero-degree rows get degree 1 so isolated points stay inert.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    seed.validate(n)
    a = np.zeros((n, n), dtype=np.float64)
    if seed.red.size and seed.blue.size:
        kk = min(k, int(seed.blue.size))
        blue_pts = pts[seed.blue]
        for i in seed.red:
            d = np.linalg.norm(blue_pts - pts[i], axis=1)
            order = np.lexsort((seed.blue, d))[:kk]
            a[i, seed.blue[order]] = d[order]
    w = 0.5 * (a + a.T)
    deg = w.sum(axis=1)
    deg[deg == 0.0] = 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    s_hat = w * inv_sqrt[:, None] * inv_sqrt[None, :]
    y = np.zeros(n, dtype=np.float64)
    y[seed.red] = 1.0
    return s_hat, y


def _normalize_scores(raw: np.ndarray, seed: AffordanceSeed) -> np.ndarray:
    support = np.zeros(raw.shape[0], dtype=bool)
    support[seed.red] = True
    support[seed.blue] = True
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        out = (raw - lo) / (hi - lo)
    else:
        out = raw.copy()
    out[~support] = 0.0
    return out


def propagate_affordance(points: np.ndarray, seed: AffordanceSeed, *,
                         alpha: float = 0.995, k: int = 5,
                         literal_inverse: bool = False,
                         normalized: bool = True) -> np.ndarray:
    """Spread red-seed labels through the blue region on a KNN graph.

    Closed form (I - alpha * S_hat)^(-1) Y, min-max normalized to [0, 1] with
    everything outside red+blue forced to 0.  `literal_inverse` instead
    inverts S_hat itself before forming the system; that variant is kept only
    for comparison and fails loudly when S_hat is singular.
    """
    if not 0.0 <= alpha < 1.0:
        raise DataFormatError(f"propagate_affordance: alpha must be in [0, 1), got {alpha}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"propagate_affordance: expected (N, 3) points, got {pts.shape}")
    n = pts.shape[0]
    if seed.red.size == 0:
        return np.zeros(n, dtype=np.float64)
    s_hat, y = _propagation_operator(pts, seed, k)
    eye = np.eye(n)
    if literal_inverse:
        cond = np.linalg.cond(s_hat)
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericFailure(
                f"propagate_affordance: literal variant needs invertible S_hat (cond={cond:.3e})"
            )
        raw = y - alpha * np.linalg.solve(s_hat, y)
    else:
        system = eye - alpha * s_hat
        try:
            raw = np.linalg.solve(system, y)
        except np.linalg.LinAlgError:
            cond = np.linalg.cond(system)
            raise NumericFailure(
                f"propagate_affordance: singular system (cond={cond:.3e})"
            ) from None
    if not normalized:
        return raw
    return _normalize_scores(raw, seed)


def propagate_affordance_iterative(points: np.ndarray, seed: AffordanceSeed, *,
                                   alpha: float = 0.995, k: int = 5,
                                   max_iters: int = 200000, tol: float = 1e-12,
                                   normalized: bool = True) -> np.ndarray:
    """Fixed-point iteration S <- alpha * S_hat @ S + Y from S = 0."""
    if not 0.0 <= alpha < 1.0:
        raise DataFormatError(f"propagate_affordance: alpha must be in [0, 1), got {alpha}")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if seed.red.size == 0:
        return np.zeros(n, dtype=np.float64)
    s_hat, y = _propagation_operator(pts, seed, k)
    s = np.zeros(n, dtype=np.float64)
    for _ in range(max_iters):
        nxt = alpha * (s_hat @ s) + y
        if np.abs(nxt - s).max() < tol:
            s = nxt
            break
        s = nxt
    if not normalized:
        return s
    return _normalize_scores(s, seed)


# -- distance-threshold contact ---------------------------------------------------


def contact_from_distance(body_vertices: np.ndarray, scene_points: np.ndarray,
                          threshold: float = 0.02) -> np.ndarray:
    """Vertex is in contact iff its nearest scene point is within `threshold` meters."""
    if threshold <= 0:
        raise DataFormatError(f"contact_from_distance: threshold must be positive, got {threshold}")
    verts = np.asarray(body_vertices, dtype=np.float64)
    scene = np.asarray(scene_points, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise ShapeMismatch(f"contact_from_distance: expected (V, 3) vertices, got {verts.shape}")
    if scene.size == 0:
        return np.zeros(verts.shape[0], dtype=bool)
    if scene.ndim != 2 or scene.shape[1] != 3:
        raise ShapeMismatch(f"contact_from_distance: expected (M, 3) scene points, got {scene.shape}")
    diff = verts[:, None, :] - scene[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    return d.min(axis=1) <= threshold


# -- template mesh and geodesics ----------------------------------------------------


@dataclass
class TemplateMesh:
    """Fixed-topology body surrogate with per-vertex part labels."""

    vertices: np.ndarray
    faces: np.ndarray
    part_labels: np.ndarray
    _adjacency: list | None = field(default=None, repr=False, compare=False)

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    def part_vertices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.part_labels == PART_INDEX[name])

    def edge_adjacency(self) -> list:
        """Per-vertex list of (neighbor, euclidean edge length)."""
        if self._adjacency is None:
            adj = [[] for _ in range(self.vertex_count)]
            seen = set()
            for tri in self.faces:
                for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                    key = (min(a, b), max(a, b))
                    if key in seen:
                        continue
                    seen.add(key)
                    length = float(np.linalg.norm(self.vertices[a] - self.vertices[b]))
                    adj[key[0]].append((key[1], length))
                    adj[key[1]].append((key[0], length))
            self._adjacency = [sorted(nbrs) for nbrs in adj]
        return self._adjacency


def _tube_factorization(vertex_count: int) -> tuple[int, int]:
    """Pick (rings, segments) with rings*segments == vertex_count - 2."""
    body = vertex_count - 2
    if body < 6:
        raise DataFormatError(f"template_body_mesh: vertex count {vertex_count} too small")
    best = None
    for segs in range(3, body + 1):
        if body % segs:
            continue
        rings = body // segs
        if rings < 2:
            break
        score = abs(rings - 2 * segs)
        if best is None or score < best[0]:
            best = (score, rings, segs)
    if best is None:
        raise DataFormatError(
            f"template_body_mesh: {vertex_count} vertices cannot form a tube "
            "(vertex_count - 2 must factor as rings * segments with segments >= 3)"
        )
    return best[1], best[2]


def template_body_mesh(vertex_count: int = 512, height: float = 1.7,
                       radius: float = 0.15) -> TemplateMesh:
    """Closed tube standing in for a body template.

    Rings stack bottom-to-top and two pole vertices cap the ends. Part labels
    are assigned by height band, with side sectors of the mid band marked as
    arms and a narrower sub-band as hands.
    """
    rings, segs = _tube_factorization(vertex_count)
    verts = np.zeros((rings * segs + 2, 3), dtype=np.float64)
    labels = np.zeros(rings * segs + 2, dtype=np.int64)
    angles = 2.0 * np.pi * np.arange(segs) / segs
    for r in range(rings):
        frac = r / (rings - 1)
        z = frac * height
        for s in range(segs):
            idx = r * segs + s
            verts[idx] = (radius * np.cos(angles[s]), radius * np.sin(angles[s]), z)
            side = abs(np.sin(angles[s])) > 0.85
            if frac < 0.06:
                part = "feet"
            elif frac < 0.42:
                part = "legs"
            elif frac < 0.54:
                part = "pelvis"
            elif frac < 0.82:
                if side:
                    part = "hands" if frac < 0.68 else "arms"
                else:
                    part = "torso"
            else:
                part = "head"
            labels[idx] = PART_INDEX[part]
    bottom = rings * segs
    top = rings * segs + 1
    verts[bottom] = (0.0, 0.0, -0.02)
    verts[top] = (0.0, 0.0, height + 0.02)
    labels[bottom] = PART_INDEX["feet"]
    labels[top] = PART_INDEX["head"]

    faces = []
    for r in range(rings - 1):
        for s in range(segs):
            a = r * segs + s
            b = r * segs + (s + 1) % segs
            c = (r + 1) * segs + s
            d = (r + 1) * segs + (s + 1) % segs
            faces.append((a, b, c))
            faces.append((b, d, c))
    for s in range(segs):
        faces.append((bottom, (s + 1) % segs, s))
        faces.append((top, (rings - 1) * segs + s, (rings - 1) * segs + (s + 1) % segs))
    return TemplateMesh(vertices=verts, faces=np.asarray(faces, dtype=np.int64), part_labels=labels)


def _dijkstra_from_set(mesh: TemplateMesh, sources: np.ndarray) -> np.ndarray:
    adj = mesh.edge_adjacency()
    dist = np.full(mesh.vertex_count, np.inf)
    heap = []
    for s in sources:
        dist[s] = 0.0
        heapq.heappush(heap, (0.0, int(s)))
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def geodesic_error(pred_contact: np.ndarray, gt_contact: np.ndarray,
                   mesh: TemplateMesh) -> tuple[float, bool]:
    """Mean shortest-path distance (cm) from predicted vertices to the
    ground-truth set; true positives contribute zero.

    Returns (value_cm, empty_prediction). An empty prediction is defined as
    0 cm with the flag set, since the error is meaningless without
    predictions.
    """
    pred = np.asarray(pred_contact, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_contact, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        return 0.0, True
    if gt.size == 0:
        raise DataFormatError("geodesic_error: ground-truth contact set is empty")
    dist = _dijkstra_from_set(mesh, gt)
    values = dist[pred]
    if not np.all(np.isfinite(values)):
        raise DataFormatError("geodesic_error: mesh edge graph is disconnected")
    return float(values.mean() * 100.0), False
