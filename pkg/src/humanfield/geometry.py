"""Pinhole cameras, rays, box intersection, stratified sampling, positional encoding.

Pixel convention: (u, v) is measured from the top-left image corner, so the
center of pixel column ``i``, row ``j`` sits at ``(i + 0.5, j + 0.5)``.
Camera frame: x right, y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class CameraView:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= K[0, 2] <= self.width and 0 <= K[1, 2] <= self.height):
            raise ValueError("principal point lies outside the image")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraView):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in "KRt"
        )

    __hash__ = None

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        return self.R[2].copy()

    def projection_matrix(self) -> np.ndarray:
        return self.K @ np.concatenate([self.R, self.t[:, None]], axis=1)

    def scaled(self, factor: float) -> "CameraView":
        """Same camera at an image resolution scaled by ``factor``."""
        K = self.K.copy()
        K[:2] *= factor
        return CameraView(K, self.R, self.t, round(self.width * factor), round(self.height * factor))

    def pixel_centers(self) -> np.ndarray:
        """All pixel centers, row-major, shape (H*W, 2)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf
    pixel: tuple[float, float] = (np.nan, np.nan)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t), self.direction)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError("box min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def around(cls, points: np.ndarray, margin: float = 0.0) -> "Aabb":
        points = np.asarray(points)
        return cls(points.min(axis=0) - margin, points.max(axis=0) + margin)

    def corners(self) -> np.ndarray:
        idx = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        return np.where(idx == 0, self.min, self.max)


# ---------------------------------------------------------------------------
# rays and projection
# ---------------------------------------------------------------------------
def cast_rays(cam: CameraView, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions for an (M, 2) array of pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any((u < 0) | (u > cam.width) | (v < 0) | (v > cam.height)):
        raise ValueError("pixel outside the image")
    homog = np.stack([u, v, np.ones_like(u)], axis=1)
    d_cam = np.linalg.solve(cam.K, homog.T).T
    d = d_cam @ cam.R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


def cast_ray(cam: CameraView, pixel) -> Ray:
    o, d = cast_rays(cam, np.asarray(pixel, dtype=np.float64)[None])
    return Ray(o[0], d[0], pixel=(float(pixel[0]), float(pixel[1])))


def project_points(cam: CameraView, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (M, 2) and camera depth (M,) of world points; no depth check."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    xc = x @ cam.R.T + cam.t
    depth = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = xc @ cam.K.T
        uv = uvw[:, :2] / uvw[:, 2:3]
    return uv, depth


def project(cam: CameraView, x) -> tuple[float, float, float]:
    uv, depth = project_points(cam, np.asarray(x)[None])
    if depth[0] <= 0:
        raise ValueError("point is behind the camera")
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def intersect_aabb_many(
    origins: np.ndarray, dirs: np.ndarray, box: Aabb
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test for many rays. Returns (hit, t_near, t_far) with t clipped to >= 0."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box.min - origins) * inv
        t1 = (box.max - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab the axis imposes no bound, outside it misses
    parallel = dirs == 0
    inside = (origins >= box.min) & (origins <= box.max)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    hit = t_far > t_near
    return hit, t_near, t_far


def intersect_aabb(ray: Ray, box: Aabb) -> tuple[float, float] | None:
    hit, tn, tf = intersect_aabb_many(ray.origin[None], ray.direction[None], box)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


# ---------------------------------------------------------------------------
# sampling and encoding
# ---------------------------------------------------------------------------
def stratified_t(
    t_near: np.ndarray, t_far: np.ndarray, n: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """(M, n) sample depths, one per equal bin; bin midpoints when ``rng`` is None."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    width = (t_far - t_near) / n
    offset = 0.5 if rng is None else rng.random((t_near.shape[0], n))
    return t_near + (np.arange(n) + offset) * width


def stratified_samples(ray: Ray, n: int, jitter: bool = False, rng_seed: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(rng_seed) if jitter else None
    return stratified_t(np.array([ray.t_near]), np.array([ray.t_far]), n, rng)[0]


def posenc(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """Sinusoidal encoding; per coordinate (sin 2^0 pi x, cos 2^0 pi x, ..., cos 2^(L-1) pi x)."""
    if n_freqs < 1:
        raise ValueError("frequency count must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    phase = np.pi * x[..., None] * (2.0 ** np.arange(n_freqs))
    enc = np.stack([np.sin(phase), np.cos(phase)], axis=-1)
    return enc.reshape(*x.shape[:-1], x.shape[-1] * 2 * n_freqs)


# ---------------------------------------------------------------------------
# camera files
# ---------------------------------------------------------------------------
def format_camera(cam: CameraView) -> str:
    """K (9, row-major), R (9, row-major), t (3), width, height."""
    vals = [*cam.K.ravel(), *cam.R.ravel(), *cam.t]
    return " ".join(repr(float(v)) for v in vals) + f" {cam.width} {cam.height}"


def parse_camera(line: str) -> CameraView:
    fields = line.split()
    if len(fields) != 23:
        raise ValueError(f"camera record needs 23 fields, got {len(fields)}")
    vals = np.array([float(f) for f in fields[:21]])
    return CameraView(vals[:9].reshape(3, 3), vals[9:18].reshape(3, 3), vals[18:21], int(fields[21]), int(fields[22]))


def write_cameras(path: str | Path, cams: list[CameraView]) -> None:
    Path(path).write_text("".join(format_camera(c) + "\n" for c in cams))


def read_cameras(path: str | Path) -> list[CameraView]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    return [parse_camera(ln) for ln in lines]
