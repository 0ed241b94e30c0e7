"""Synthetic capture: analytic renders of the capsule body and the on-disk dataset.

Dataset layout::

    <root>/dataset.txt                generation parameters, ``key value`` lines
    <root>/manifest.txt               one line per frame:
                                      subject split pose view image sha256 mask sha256 meta sha256
    <root>/body_template.txt          body template (see body.save_template)
    <root>/<subject>/subject.txt      ``split``, ``albedo`` (5x3 values), ``beta`` lines
    <root>/<subject>/pPP_vVV.png      8-bit RGB render
    <root>/<subject>/pPP_vVV_mask.png 8-bit mask (0 / 255)
    <root>/<subject>/pPP_vVV.txt      ``camera`` (23 fields, see geometry.format_camera),
                                      ``theta`` (K*3), ``beta`` (B), ``yaw`` (degrees)
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .body import BodyState, BodyTemplate, Capsule, default_template, pose_body, save_template
from .geometry import CameraView, cast_rays, format_camera, parse_camera

LIGHT_DIR = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
AMBIENT = 0.35
CAMERA_RADIUS = 3.0
CAMERA_HEIGHT = 0.3
LOOK_AT = np.array([0.0, 0.25, 0.0])
FOCAL_PER_PIXEL = 1.9  # focal length in units of image width


@dataclass
class Subject:
    ident: str
    albedo: np.ndarray  # (n_capsules, 3)
    beta: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")


@dataclass
class Frame:
    subject: str
    pose: int
    view: int
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    camera: CameraView
    theta: np.ndarray
    beta: np.ndarray
    yaw: float

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.subject, self.pose, self.view)


@dataclass
class FramePair:
    source: Frame
    target: Frame

    @property
    def subject(self) -> str:
        return self.source.subject


@dataclass
class Dataset:
    root: Path | None
    template: BodyTemplate
    subjects: dict[str, Subject]
    frames: dict[tuple[str, int, int], Frame] = field(default_factory=dict)
    params: dict[str, str] = field(default_factory=dict)

    def subject_ids(self, split: str | None = None) -> list[str]:
        return sorted(s for s, subj in self.subjects.items() if split is None or subj.split == split)

    def frames_of(self, subject: str) -> list[Frame]:
        return [self.frames[k] for k in sorted(self.frames) if k[0] == subject]

    def split(self, split: str) -> "Dataset":
        keep = set(self.subject_ids(split))
        return Dataset(
            self.root,
            self.template,
            {s: v for s, v in self.subjects.items() if s in keep},
            {k: f for k, f in self.frames.items() if k[0] in keep},
            dict(self.params),
        )

    @property
    def n_poses(self) -> int:
        return 1 + max(k[1] for k in self.frames) if self.frames else 0

    @property
    def n_views(self) -> int:
        return 1 + max(k[2] for k in self.frames) if self.frames else 0


# ---------------------------------------------------------------------------
# analytic rendering
# ---------------------------------------------------------------------------
def posed_capsules(state: BodyState, capsules: list[Capsule]) -> list[Capsule]:
    out = []
    for cap in capsules:
        g = state.G[cap.joint]
        out.append(Capsule(cap.joint, g[:3, :3] @ cap.a + g[:3, 3], g[:3, :3] @ cap.b + g[:3, 3], cap.radius))
    return out


def _ray_sphere(o, d, c, r):
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - cc
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def ray_capsule(o: np.ndarray, d: np.ndarray, cap: Capsule) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive hit distance (inf on miss) and outward normal for unit-direction rays."""
    axis = cap.b - cap.a
    length = np.linalg.norm(axis)
    ez = axis / length
    oa = o - cap.a
    d_par = d @ ez
    oa_par = oa @ ez
    d_perp = d - d_par[:, None] * ez
    oa_perp = oa - oa_par[:, None] * ez
    qa = np.einsum("ij,ij->i", d_perp, d_perp)
    qb = np.einsum("ij,ij->i", d_perp, oa_perp)
    qc = np.einsum("ij,ij->i", oa_perp, oa_perp) - cap.radius**2
    disc = qb * qb - qa * qc
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cyl = (-qb - np.sqrt(np.maximum(disc, 0.0))) / qa
    s = oa_par + t_cyl * d_par
    t_cyl = np.where((disc >= 0) & (qa > 1e-14) & (t_cyl > 0) & (s >= 0) & (s <= length), t_cyl, np.inf)
    t_a = _ray_sphere(o, d, cap.a, cap.radius)
    t_b = _ray_sphere(o, d, cap.b, cap.radius)
    t = np.minimum(t_cyl, np.minimum(t_a, t_b))
    hit = np.isfinite(t)
    p = o + np.where(hit, t, 0.0)[:, None] * d
    s = np.clip((p - cap.a) @ ez, 0.0, length)
    n = p - (cap.a + s[:, None] * ez)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return t, n


def render_analytic(
    subject: Subject, theta, cam: CameraView, template: BodyTemplate | None = None, resolution: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Lambert-shaded image (H, W, 3) and hit mask (H, W) of the posed capsule body."""
    template = template or default_template()
    if resolution is not None and resolution != cam.width:
        cam = cam.scaled(resolution / cam.width)
    state = pose_body(template, theta, subject.beta)
    caps = posed_capsules(state, template.shaped_capsules(subject.beta))
    o, d = cast_rays(cam, cam.pixel_centers())
    best = np.full(len(o), np.inf)
    color = np.zeros((len(o), 3))
    for cap, albedo in zip(caps, subject.albedo):
        t, n = ray_capsule(o, d, cap)
        closer = t < best
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(n @ LIGHT_DIR, 0.0)
        color[closer] = albedo * shade[closer, None]
        best[closer] = t[closer]
    mask = np.isfinite(best)
    return color.reshape(cam.height, cam.width, 3), mask.reshape(cam.height, cam.width)


def ring_camera(yaw_deg: float, size: int) -> CameraView:
    yaw = np.deg2rad(yaw_deg)
    eye = np.array([CAMERA_RADIUS * np.sin(yaw), CAMERA_HEIGHT, CAMERA_RADIUS * np.cos(yaw)])
    return CameraView.look_at(eye, LOOK_AT, np.array([0.0, 1.0, 0.0]), FOCAL_PER_PIXEL * size, size, size)


def ring_yaws(n_views: int) -> np.ndarray:
    return 360.0 * np.arange(n_views) / n_views


def sample_pose(rng: np.random.Generator) -> np.ndarray:
    """Bounded random pose for the five-joint body."""
    theta = np.zeros((5, 3))
    theta[0] = rng.uniform([-0.15, -0.5, -0.1], [0.15, 0.5, 0.1])
    theta[1] = rng.uniform([-0.3, -0.3, -0.2], [0.3, 0.3, 0.2])
    theta[2] = rng.uniform([-0.3, -0.5, -0.2], [0.3, 0.5, 0.2])
    theta[3] = rng.uniform([-0.3, -0.5, -1.2], [0.3, 0.5, 0.3])
    theta[4] = rng.uniform([-0.3, -0.5, -0.3], [0.3, 0.5, 1.2])
    return theta


def sample_subject(ident: str, rng: np.random.Generator, split: str, n_capsules: int = 5) -> Subject:
    return Subject(ident, rng.uniform(0.15, 0.95, size=(n_capsules, 3)), rng.uniform(-1.0, 1.0, size=2), split)


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(
    root: str | Path,
    n_subjects: int = 4,
    n_poses: int = 4,
    n_views: int = 8,
    seed: int = 0,
    n_test_subjects: int = 2,
    resolution: int = 64,
) -> Dataset:
    """Render ``n_subjects`` train + ``n_test_subjects`` test subjects to ``root``."""
    if n_subjects < 1 or n_poses < 1 or n_views < 1 or n_test_subjects < 0:
        raise ValueError("subject, pose and view counts must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    template = default_template()
    save_template(template, root / "body_template.txt")
    rng = np.random.default_rng(seed)
    params = {
        "n_subjects": n_subjects,
        "n_test_subjects": n_test_subjects,
        "n_poses": n_poses,
        "n_views": n_views,
        "seed": seed,
        "resolution": resolution,
    }
    (root / "dataset.txt").write_text("".join(f"{k} {v}\n" for k, v in params.items()))
    manifest = []
    subjects = {}
    frames = {}
    yaws = ring_yaws(n_views)
    cams = [ring_camera(y, resolution) for y in yaws]
    for si in range(n_subjects + n_test_subjects):
        split = "train" if si < n_subjects else "test"
        ident = f"{split}{si if split == 'train' else si - n_subjects:03d}"
        subj = sample_subject(ident, rng, split, len(template.capsules))
        subjects[ident] = subj
        sdir = root / ident
        sdir.mkdir(exist_ok=True)
        (sdir / "subject.txt").write_text(
            f"split {split}\nalbedo {_fmt(subj.albedo)}\nbeta {_fmt(subj.beta)}\n"
        )
        for p in range(n_poses):
            theta = sample_pose(rng)
            for v, (cam, yaw) in enumerate(zip(cams, yaws)):
                image, mask = render_analytic(subj, theta, cam, template)
                stem = f"p{p:02d}_v{v:02d}"
                img_path, mask_path, meta_path = sdir / f"{stem}.png", sdir / f"{stem}_mask.png", sdir / f"{stem}.txt"
                img8 = to_uint8(image)
                _save_png(img_path, img8)
                _save_png(mask_path, mask.astype(np.uint8) * 255)
                meta_path.write_text(
                    f"camera {format_camera(cam)}\ntheta {_fmt(theta)}\nbeta {_fmt(subj.beta)}\nyaw {float(yaw)!r}\n"
                )
                frames[(ident, p, v)] = Frame(ident, p, v, img8 / 255.0, mask, cam, theta, subj.beta, float(yaw))
                rel = [x.relative_to(root).as_posix() for x in (img_path, mask_path, meta_path)]
                manifest.append(
                    f"{ident} {split} {p} {v} {rel[0]} {_sha256(img_path)} {rel[1]} {_sha256(mask_path)} "
                    f"{rel[2]} {_sha256(meta_path)}"
                )
    (root / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return Dataset(root, template, subjects, frames, {k: str(v) for k, v in params.items()})


class DatasetError(Exception):
    pass


def _read_fields(path: Path) -> dict[str, list[str]]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, *rest = line.split()
            out[key] = rest
    return out


def load_frame(root: Path, subject: str, pose: int, view: int, meta_rel: str, img_rel: str, mask_rel: str) -> Frame:
    meta = _read_fields(root / meta_rel)
    cam = parse_camera(" ".join(meta["camera"]))
    theta = np.array([float(x) for x in meta["theta"]]).reshape(-1, 3)
    beta = np.array([float(x) for x in meta["beta"]])
    image = np.asarray(Image.open(root / img_rel).convert("RGB"), dtype=np.float64) / 255.0
    mask = np.asarray(Image.open(root / mask_rel).convert("L")) > 127
    return Frame(subject, pose, view, image, mask, cam, theta, beta, float(meta["yaw"][0]))


def load_dataset(root: str | Path, verify: bool = False) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DatasetError(f"no dataset manifest at {manifest}")
    template_path = root / "body_template.txt"
    template = default_template() if not template_path.exists() else _load_with_capsules(template_path)
    params = {k: v[0] for k, v in _read_fields(root / "dataset.txt").items()} if (root / "dataset.txt").exists() else {}
    subjects: dict[str, Subject] = {}
    frames = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        ident, split, p, v, img, img_sha, msk, msk_sha, meta, meta_sha = line.split()
        if verify:
            for rel, sha in ((img, img_sha), (msk, msk_sha), (meta, meta_sha)):
                if _sha256(root / rel) != sha:
                    raise DatasetError(f"checksum mismatch for {rel}")
        if ident not in subjects:
            info = _read_fields(root / ident / "subject.txt")
            subjects[ident] = Subject(
                ident,
                np.array([float(x) for x in info["albedo"]]).reshape(-1, 3),
                np.array([float(x) for x in info["beta"]]),
                info["split"][0],
            )
        try:
            frames[(ident, int(p), int(v))] = load_frame(root, ident, int(p), int(v), meta, img, msk)
        except FileNotFoundError as exc:
            raise DatasetError(f"missing frame file: {exc.filename}") from exc
    if not frames:
        raise DatasetError(f"dataset at {root} has no frames")
    return Dataset(root, template, subjects, frames, params)


def _load_with_capsules(path: Path) -> BodyTemplate:
    from .body import load_template

    tmpl = load_template(path)
    default = default_template()
    # capsule geometry is only meaningful for the bundled body
    if tmpl.vertices.shape == default.vertices.shape and np.allclose(tmpl.vertices, default.vertices):
        return default
    return tmpl
