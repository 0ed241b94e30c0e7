"""Skinned parametric body: posing, forward/inverse LBS, nearest vertices, visibility."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import Aabb, CameraView, project_points


@dataclass(frozen=True)
class Capsule:
    """Capsule rigidly attached to ``joint``; endpoints in canonical space."""

    joint: int
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass
class BodyTemplate:
    vertices: np.ndarray  # (N, 3) canonical
    weights: np.ndarray  # (N, K)
    parents: np.ndarray  # (K,), parents[0] == -1
    joints: np.ndarray  # (K, 3)
    faces: np.ndarray  # (T, 3)
    shape_dirs: np.ndarray | None = None  # (N, 3, B)
    joint_dirs: np.ndarray | None = None  # (K, 3, B)
    capsules: tuple[Capsule, ...] = ()
    capsule_dirs: np.ndarray | None = None  # (n_capsules, 7, B): d(a, b, radius)/d(beta)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n, k = self.weights.shape
        if self.vertices.shape != (n, 3):
            raise ValueError("vertex and weight counts differ")
        if self.joints.shape != (k, 3) or self.parents.shape != (k,):
            raise ValueError("joint arrays do not match the weight columns")
        if np.any(self.weights < 0) or np.abs(self.weights.sum(axis=1) - 1).max() > 1e-9:
            raise ValueError("blend weight rows must be nonnegative and sum to 1")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, k)):
            raise ValueError("joint parents must form a tree rooted at joint 0, parents before children")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("triangle indices out of range")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return 0 if self.shape_dirs is None else self.shape_dirs.shape[2]

    def shaped(self, beta) -> tuple[np.ndarray, np.ndarray]:
        """Canonical vertices and joints for shape ``beta``."""
        beta = self._check_beta(beta)
        v, j = self.vertices, self.joints
        if self.n_shape:
            v = v + self.shape_dirs @ beta
            j = j + self.joint_dirs @ beta
        return v, j

    def shaped_capsules(self, beta) -> list[Capsule]:
        beta = self._check_beta(beta)
        out = []
        for i, cap in enumerate(self.capsules):
            d = self.capsule_dirs[i] @ beta if self.n_shape and self.capsule_dirs is not None else np.zeros(7)
            out.append(Capsule(cap.joint, cap.a + d[:3], cap.b + d[3:6], cap.radius + d[6]))
        return out

    def _check_beta(self, beta) -> np.ndarray:
        beta = np.zeros(0) if beta is None else np.asarray(beta, dtype=np.float64).ravel()
        if len(beta) > self.n_shape:
            raise ValueError(f"shape has {len(beta)} coefficients, template basis has {self.n_shape}")
        return np.pad(beta, (0, self.n_shape - len(beta)))


@dataclass
class BodyState:
    """A posed body. Immutable by convention once built."""

    template: BodyTemplate
    theta: np.ndarray  # (K, 3) axis-angle
    beta: np.ndarray
    G: np.ndarray  # (K, 4, 4) canonical -> posed per joint
    canonical_vertices: np.ndarray  # (N, 3)
    canonical_joints: np.ndarray
    posed_vertices: np.ndarray  # (N, 3)
    vertex_transforms: np.ndarray  # (N, 4, 4) blended per-vertex LBS matrices

    @cached_property
    def inverse_vertex_transforms(self) -> np.ndarray:
        return np.linalg.inv(self.vertex_transforms)

    @cached_property
    def posed_tree(self) -> cKDTree:
        return cKDTree(self.posed_vertices)

    @cached_property
    def canonical_tree(self) -> cKDTree:
        return cKDTree(self.canonical_vertices)

    def aabb(self, margin: float = 0.0) -> Aabb:
        return Aabb.around(self.posed_vertices, margin)

    def canonical_aabb(self, margin: float = 0.0) -> Aabb:
        return Aabb.around(self.canonical_vertices, margin)


# ---------------------------------------------------------------------------
# posing
# ---------------------------------------------------------------------------
def rigid(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    return m


def joint_transforms(theta: np.ndarray, joints: np.ndarray, parents: np.ndarray) -> np.ndarray:
    """Per-joint canonical-to-posed transforms G_k for axis-angle ``theta``."""
    rots = Rotation.from_rotvec(theta).as_matrix()
    G = np.empty((len(parents), 4, 4))
    for i, p in enumerate(parents):
        # rotation about the joint's canonical position, composed down the chain
        local = rigid(rots[i], joints[i] - rots[i] @ joints[i])
        G[i] = local if p < 0 else G[p] @ local
    return G


def pose_body(tmpl: BodyTemplate, theta, beta=None) -> BodyState:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (tmpl.n_joints, 3):
        raise ValueError(f"pose must have shape ({tmpl.n_joints}, 3), got {theta.shape}")
    beta_full = tmpl._check_beta(beta)
    v_c, j_c = tmpl.shaped(beta_full)
    G = joint_transforms(theta, j_c, tmpl.parents)
    A = np.einsum("nk,kij->nij", tmpl.weights, G)
    v_o = np.einsum("nij,nj->ni", A[:, :3, :3], v_c) + A[:, :3, 3]
    if np.array_equal(G, np.broadcast_to(np.eye(4), G.shape)):
        # weight rows sum to 1 only to rounding; keep the rest pose exact
        v_o = v_c.copy()
    return BodyState(tmpl, theta, beta_full, G, v_c, j_c, v_o, A)


def lbs(x_c, weights, G) -> np.ndarray:
    """x_o = (sum_k w_k G_k) x_c for one point or a batch with per-point weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(np.abs(weights).sum(axis=-1) == 0):
        raise ValueError("blend weights are all zero")
    M = np.einsum("...k,kij->...ij", weights, G)
    x_c = np.asarray(x_c, dtype=np.float64)
    return np.einsum("...ij,...j->...i", M[..., :3, :3], x_c) + M[..., :3, 3]


def nearest_vertices(x: np.ndarray, vertices: np.ndarray, tree: cKDTree | None = None, k: int = 4):
    """Nearest vertex index and distance per query row; exact ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    vertices = np.asarray(vertices, dtype=np.float64)
    k = min(k, len(vertices))
    if tree is None:
        tree = cKDTree(vertices)
    _, cand = tree.query(x, k=k)
    cand = cand.reshape(len(x), k)
    d2 = ((vertices[cand] - x[:, None]) ** 2).sum(axis=2)
    best = d2.min(axis=1, keepdims=True)
    # among exact minima pick the smallest index
    masked = np.where(d2 == best, cand, np.iinfo(np.int64).max)
    idx = masked.min(axis=1)
    return idx, np.sqrt(best[:, 0])


def nearest_vertex(x, vertices) -> tuple[int, float]:
    vertices = np.asarray(vertices, dtype=np.float64)
    d2 = ((vertices - np.asarray(x, dtype=np.float64)) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    return i, float(np.sqrt(d2[i]))


def inverse_lbs_many(x_t: np.ndarray, state: BodyState) -> tuple[np.ndarray, np.ndarray]:
    """Canonical positions via the inverse blended matrix of each point's nearest posed vertex."""
    idx, _ = nearest_vertices(x_t, state.posed_vertices, state.posed_tree)
    inv = state.inverse_vertex_transforms[idx]
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1, 3)
    x_c = np.einsum("nij,nj->ni", inv[:, :3, :3], x_t) + inv[:, :3, 3]
    return x_c, idx


def inverse_lbs(x_t, state: BodyState) -> np.ndarray:
    return inverse_lbs_many(np.asarray(x_t)[None], state)[0][0]


def canonical_to_posed(x_c: np.ndarray, state: BodyState) -> tuple[np.ndarray, np.ndarray]:
    """LBS of canonical points using their nearest canonical vertex's weights.

    Returns posed points and the metric distance to that vertex.
    """
    idx, dist = nearest_vertices(x_c, state.canonical_vertices, state.canonical_tree)
    A = state.vertex_transforms[idx]
    x_c = np.asarray(x_c, dtype=np.float64).reshape(-1, 3)
    return np.einsum("nij,nj->ni", A[:, :3, :3], x_c) + A[:, :3, 3], dist


# ---------------------------------------------------------------------------
# rasterization and visibility
# ---------------------------------------------------------------------------
def rasterize_depth(points: np.ndarray, faces: np.ndarray, cam: CameraView) -> np.ndarray:
    """Z-buffer of camera depth at pixel centers; +inf where nothing is hit."""
    uv, depth = project_points(cam, points)
    zbuf = np.full((cam.height, cam.width), np.inf)
    tri_uv = uv[faces]
    tri_z = depth[faces]
    # triangles touching the camera plane are skipped, no near clipping
    ok = np.all(tri_z > 1e-6, axis=1)
    for tuv, tz in zip(tri_uv[ok], tri_z[ok]):
        lo = np.floor(tuv.min(axis=0) - 0.5).astype(int)
        hi = np.ceil(tuv.max(axis=0) - 0.5).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], cam.width - 1), min(hi[1], cam.height - 1)
        if x1 < x0 or y1 < y0:
            continue
        (ax, ay), (bx, by), (cx, cy) = tuv
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
        w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = 1.0 / (w0 / tz[0] + w1 / tz[1] + w2 / tz[2])
        sub = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        np.minimum(sub, np.where(inside, z, np.inf), out=sub)
    return zbuf


def visible_vertices(
    points: np.ndarray, cam: CameraView, faces: np.ndarray, eps: float = 0.01, zbuf: np.ndarray | None = None
) -> np.ndarray:
    """Vertex visible iff its depth <= z-buffer at its pixel + eps."""
    if zbuf is None:
        zbuf = rasterize_depth(points, faces, cam)
    uv, depth = project_points(cam, points)
    vis = np.zeros(len(points), dtype=bool)
    front = depth > 0
    col = np.floor(np.where(front, uv[:, 0], -1)).astype(int)
    row = np.floor(np.where(front, uv[:, 1], -1)).astype(int)
    inside = front & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    vis[inside] = depth[inside] <= zbuf[row[inside], col[inside]] + eps
    return vis


def body_visible_vertices(state: BodyState, cam: CameraView, eps: float = 0.01) -> np.ndarray:
    return visible_vertices(state.posed_vertices, cam, state.template.faces, eps)


# ---------------------------------------------------------------------------
# procedural capsule body
# ---------------------------------------------------------------------------
JOINT_NAMES = ("root", "chest", "head", "left_arm", "right_arm")
_PARENTS = np.array([-1, 0, 1, 1, 1])
_JOINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.32, 0.0],
        [0.0, 0.62, 0.0],
        [0.17, 0.55, 0.0],
        [-0.17, 0.55, 0.0],
    ]
)
# (joint, a, b, radius); arms start at the shoulder joint and extend along +-x
_CAPSULES = (
    Capsule(0, np.array([0.0, -0.28, 0.0]), np.array([0.0, 0.30, 0.0]), 0.14),
    Capsule(1, np.array([0.0, 0.36, 0.0]), np.array([0.0, 0.52, 0.0]), 0.16),
    Capsule(2, np.array([0.0, 0.78, 0.0]), np.array([0.0, 0.84, 0.0]), 0.11),
    Capsule(3, np.array([0.24, 0.55, 0.0]), np.array([0.62, 0.55, 0.0]), 0.055),
    Capsule(4, np.array([-0.24, 0.55, 0.0]), np.array([-0.62, 0.55, 0.0]), 0.055),
)
_RINGS = ((16, 10, 4), (16, 6, 4), (14, 3, 4), (12, 8, 3), (12, 8, 3))
GIRTH_STEP = 0.02
ARM_STEP = 0.04


def capsule_mesh(cap: Capsule, n_around: int, n_body: int, n_cap: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertices, outward normals and triangles of a capsule surface."""
    axis = cap.b - cap.a
    length = np.linalg.norm(axis)
    ez = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(ez[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    ex = np.cross(ez, helper)
    ex /= np.linalg.norm(ex)
    ey = np.cross(ez, ex)
    rings = []  # (axial position, polar angle) for each ring
    for i in range(1, n_cap + 1):
        phi = np.pi / 2 * (1 - i / (n_cap + 1))  # from near pole toward equator
        rings.append((0.0, -np.sin(phi), np.cos(phi)))
    for i in range(n_body + 1):
        rings.append((length * i / n_body, 0.0, 1.0))
    for i in range(1, n_cap + 1):
        phi = np.pi / 2 * i / (n_cap + 1)
        rings.append((length, np.sin(phi), np.cos(phi)))
    ang = 2 * np.pi * np.arange(n_around) / n_around
    circ = np.cos(ang)[:, None] * ex + np.sin(ang)[:, None] * ey
    # equal-area polygon radius, so the faceted silhouette matches the smooth one on average
    r_mesh = cap.radius * np.sqrt((2 * np.pi / n_around) / np.sin(2 * np.pi / n_around))
    verts, normals = [], []
    for s, nz, nr in rings:
        n = nr * circ + nz * ez
        verts.append(cap.a + s * ez + r_mesh * n)
        normals.append(n)
    verts.append(cap.a - r_mesh * ez)
    normals.append(-ez[None])
    verts.append(cap.b + r_mesh * ez)
    normals.append(ez[None])
    verts = np.concatenate([np.atleast_2d(v) for v in verts])
    normals = np.concatenate([np.atleast_2d(v) for v in normals])
    n_rings = len(rings)
    faces = []
    for r in range(n_rings - 1):
        for i in range(n_around):
            a = r * n_around + i
            b = r * n_around + (i + 1) % n_around
            c = a + n_around
            d = b + n_around
            faces += [(a, c, b), (b, c, d)]
    bottom, top = n_rings * n_around, n_rings * n_around + 1
    last = (n_rings - 1) * n_around
    for i in range(n_around):
        faces.append((bottom, (i + 1) % n_around, i))
        faces.append((top, last + i, last + (i + 1) % n_around))
    return verts, normals, np.array(faces)


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    s = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + s[:, None] * ab), axis=1)


def skinning_weights(points: np.ndarray, capsules=_CAPSULES, power: float = 4.0, floor: float = 0.01) -> np.ndarray:
    """Normalized inverse distance (to ``power``) over the two nearest bones.

    A bone is a capsule; distance is measured to its surface (axis distance
    minus radius, plus ``floor`` metres) so surface vertices bind to their own
    capsule and blending is confined to junctions.
    """
    d = np.stack([_segment_distance(points, c.a, c.b) - c.radius for c in capsules], axis=1)
    d = np.maximum(d, 0.0) + floor
    order = np.argsort(d, axis=1, kind="stable")[:, :2]
    w = np.zeros((len(points), len(capsules)))
    rows = np.arange(len(points))[:, None]
    w[rows, order] = d[rows, order] ** -power
    w /= w.sum(axis=1, keepdims=True)
    joint_w = np.zeros((len(points), 1 + max(c.joint for c in capsules)))
    for ci, c in enumerate(capsules):
        joint_w[:, c.joint] += w[:, ci]
    return joint_w


def default_template() -> BodyTemplate:
    """Five-joint capsule body (root, chest, head, two arms), about 1100 vertices.

    Shape coefficients: beta[0] inflates every capsule radius by GIRTH_STEP
    metres per unit; beta[1] moves each arm outward by ARM_STEP.
    """
    verts, faces, sdirs, owner = [], [], [], []
    offset = 0
    for ci, (cap, (n_around, n_body, n_cap)) in enumerate(zip(_CAPSULES, _RINGS)):
        v, n, f = capsule_mesh(cap, n_around, n_body, n_cap)
        sd = np.zeros((len(v), 3, 2))
        sd[:, :, 0] = GIRTH_STEP * n
        if cap.joint in (3, 4):
            sd[:, 0, 1] = ARM_STEP * np.sign(cap.b[0])
        verts.append(v)
        faces.append(f + offset)
        sdirs.append(sd)
        owner.append(np.full(len(v), ci))
        offset += len(v)
    verts = np.concatenate(verts)
    jdirs = np.zeros((5, 3, 2))
    jdirs[3, 0, 1] = ARM_STEP
    jdirs[4, 0, 1] = -ARM_STEP
    cdirs = np.zeros((len(_CAPSULES), 7, 2))
    cdirs[:, 6, 0] = GIRTH_STEP
    for ci, cap in enumerate(_CAPSULES):
        if cap.joint in (3, 4):
            sgn = np.sign(cap.b[0])
            cdirs[ci, 0, 1] = cdirs[ci, 3, 1] = ARM_STEP * sgn
    return BodyTemplate(
        vertices=verts,
        weights=skinning_weights(verts),
        parents=_PARENTS,
        joints=_JOINTS,
        faces=np.concatenate(faces),
        shape_dirs=np.concatenate(sdirs),
        joint_dirs=jdirs,
        capsules=_CAPSULES,
        capsule_dirs=cdirs,
    )


# ---------------------------------------------------------------------------
# template files
# ---------------------------------------------------------------------------
def save_template(tmpl: BodyTemplate, path: str | Path) -> None:
    """Text layout: blocks introduced by a header line ``<name> <counts...>``.

    joints K            K lines: parent x y z
    vertices N          N lines: x y z
    weights N K         N lines: K weights
    triangles T         T lines: i j k
    shapedirs N B       N lines: 3*B values (x coefficients, then y, then z)
    jointdirs K B       K lines: 3*B values
    """
    lines = ["# humanfield body template v1", f"joints {tmpl.n_joints}"]
    lines += [f"{int(p)} " + " ".join(repr(float(c)) for c in j) for p, j in zip(tmpl.parents, tmpl.joints)]
    lines.append(f"vertices {len(tmpl.vertices)}")
    lines += [" ".join(repr(float(c)) for c in v) for v in tmpl.vertices]
    lines.append(f"weights {tmpl.weights.shape[0]} {tmpl.weights.shape[1]}")
    lines += [" ".join(repr(float(c)) for c in w) for w in tmpl.weights]
    lines.append(f"triangles {len(tmpl.faces)}")
    lines += [" ".join(str(int(i)) for i in f) for f in tmpl.faces]
    if tmpl.n_shape:
        b = tmpl.n_shape
        lines.append(f"shapedirs {len(tmpl.vertices)} {b}")
        lines += [" ".join(repr(float(c)) for c in row.ravel()) for row in tmpl.shape_dirs]
        lines.append(f"jointdirs {tmpl.n_joints} {b}")
        lines += [" ".join(repr(float(c)) for c in row.ravel()) for row in tmpl.joint_dirs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_template(path: str | Path) -> BodyTemplate:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    blocks: dict[str, np.ndarray] = {}
    i = 0
    while i < len(lines):
        head = lines[i].split()
        name, count = head[0], int(head[1])
        rows = [[float(x) for x in ln.split()] for ln in lines[i + 1 : i + 1 + count]]
        blocks[name] = np.array(rows)
        if name in ("shapedirs", "jointdirs"):
            blocks[name] = blocks[name].reshape(count, 3, int(head[2]))
        i += 1 + count
    joints = blocks["joints"]
    return BodyTemplate(
        vertices=blocks["vertices"],
        weights=blocks["weights"],
        parents=joints[:, 0].astype(int),
        joints=joints[:, 1:],
        faces=blocks.get("triangles", np.zeros((0, 3))).astype(int),
        shape_dirs=blocks.get("shapedirs"),
        joint_dirs=blocks.get("jointdirs"),
    )


def template_from_smpl_npz(path: str | Path) -> BodyTemplate:
    """Load SMPL-format arrays (v_template, weights, kintree_table, J_regressor, f, shapedirs)."""
    data = np.load(path, allow_pickle=False)
    v = data["v_template"]
    regressor = data["J_regressor"]
    parents = data["kintree_table"][0].astype(np.int64)
    parents[0] = -1
    shapedirs = data["shapedirs"] if "shapedirs" in data else None
    jdirs = np.einsum("kn,nib->kib", regressor, shapedirs) if shapedirs is not None else None
    return BodyTemplate(
        vertices=v,
        weights=data["weights"],
        parents=parents,
        joints=regressor @ v,
        faces=data["f"],
        shape_dirs=shapedirs,
        joint_dirs=jdirs,
    )
