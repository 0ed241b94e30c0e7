"""Hierarchical feature bank queried at canonical points.

Three paths share one image encoder:

* global: latent code -> mapping MLP -> style vector -> style-modulated conv
  decoder -> three axis-aligned feature planes, sampled bilinearly and summed;
* point: features gathered at visible body vertices, carried to canonical
  space, averaged into a sparse voxel grid and diffused by submanifold
  convolutions, sampled trilinearly;
* pixel: canonical point skinned into the input pose, projected into the input
  view and sampled bilinearly, with a hard distance gate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .body import BodyState, canonical_to_posed, visible_vertices
from .diffcore import Linear, Module, Tensor, parameter, uniform_init
from .geometry import Aabb, CameraView, posenc, project_points

RGB_FREQS = 4


def rgb_channels(rgb: np.ndarray, valid: np.ndarray, n_channels: int = 32) -> np.ndarray:
    """Fixed per-pixel channels: posenc(rgb), raw rgb, then the validity bit repeated.

    ``rgb`` is (..., 3); output is (..., n_channels).
    """
    enc = posenc(rgb, RGB_FREQS)
    fixed = np.concatenate([enc, rgb], axis=-1)
    n_pad = n_channels - fixed.shape[-1]
    if n_pad < 0:
        raise ValueError(f"need at least {fixed.shape[-1]} appended channels")
    bit = np.repeat(np.asarray(valid, dtype=np.float64)[..., None], n_pad, axis=-1)
    return np.concatenate([fixed, bit], axis=-1)


def upsample2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = dc.broadcast_to(x.reshape(n, c, h, 1, w, 1), (n, c, h, 2, w, 2))
    return y.reshape(n, c, 2 * h, 2 * w)


def upsample(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    y = dc.broadcast_to(x.reshape(n, c, h, 1, w, 1), (n, c, h, factor, w, factor))
    return y.reshape(n, c, h * factor, w * factor)


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------
@dataclass
class ImageFeatures:
    latent: Tensor  # (L,)
    map2d: Tensor  # (C, H, W), learned channels first, fixed rgb channels last

    @property
    def n_channels(self) -> int:
        return self.map2d.shape[0]


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, gain: float = np.sqrt(2)):
        self.weight = parameter(uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, gain))
        self.bias = parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ImageEncoder(Module):
    """Strided conv blocks; global-average-pooled latent plus a full-resolution feature map."""

    def __init__(self, image_size: int, widths, map_channels: int, rgb_channels: int, rng: np.random.Generator):
        self.image_size = image_size
        self.rgb_channels = rgb_channels
        self.blocks = []
        c_in = 4
        for w in widths:
            self.blocks.append(Conv2d(c_in, w, 3, rng, stride=2))
            c_in = w
        self.fuse = Conv2d(sum(widths), map_channels, 1, rng, gain=1.0)
        self.latent_dim = widths[-1]

    def __call__(self, image: np.ndarray, mask: np.ndarray) -> ImageFeatures:
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        h, w = mask.shape
        if image.shape != (h, w, 3) or h != self.image_size or w != self.image_size:
            raise ValueError(f"expected a {self.image_size}x{self.image_size} RGB image and mask, got {image.shape}, {mask.shape}")
        rgb = image * mask[..., None]
        x = Tensor(np.concatenate([rgb, mask[..., None]], axis=-1).transpose(2, 0, 1)[None])
        feats = []
        for i, block in enumerate(self.blocks):
            x = dc.leaky_relu(block(x))
            feats.append(upsample(x, 2 ** (i + 1)))
        latent = x.mean(axis=(2, 3)).reshape(-1)
        learned = self.fuse(dc.concat(feats, axis=1))[0]
        fixed = rgb_channels(rgb, mask, self.rgb_channels).transpose(2, 0, 1)
        map2d = dc.concat([learned * mask[None], Tensor(fixed * mask[None])], axis=0)
        return ImageFeatures(latent, map2d)


def sample_map(map2d: Tensor, uv: np.ndarray) -> Tensor:
    """Bilinear samples (P, C) of a (C, H, W) map at pixel coordinates; zero outside the image."""
    c, h, w = map2d.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    finite = np.all(np.isfinite(uv), axis=1)
    inside = finite & (uv[:, 0] >= 0) & (uv[:, 0] <= w) & (uv[:, 1] >= 0) & (uv[:, 1] <= h)
    x = np.where(inside, uv[:, 0], 0.5) - 0.5
    y = np.where(inside, uv[:, 1], 0.5) - 0.5
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    table = dc.concat([map2d.reshape(c, h * w).T, Tensor(np.zeros((1, c)))], axis=0)
    idx, wts = [], []
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = inside & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx.append(np.where(ok, yi * w + xi, h * w))
            wts.append(np.where(ok, wx * wy, 0.0))
    idx = np.stack(idx, axis=1)
    wts = np.stack(wts, axis=1)
    return (dc.take(table, idx) * wts[..., None]).sum(axis=1)


# ---------------------------------------------------------------------------
# tri-plane path
# ---------------------------------------------------------------------------
@dataclass
class TriPlane:
    planes: Tensor  # (3, F, R, R) ordered xy, xz, yz; rows index the second coordinate

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def resolution(self) -> int:
        return self.planes.shape[2]


PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def query_triplane(tp: TriPlane, x_n: np.ndarray) -> Tensor:
    """Sum of bilinear samples from the three planes at normalized points in [-1, 1]^3."""
    _, f, r, _ = tp.planes.shape
    x_n = np.clip(np.asarray(x_n, dtype=np.float64).reshape(-1, 3), -1.0, 1.0)
    table = tp.planes.transpose(0, 2, 3, 1).reshape(3 * r * r, f)
    idx, wts = [], []
    for p, (ca, cb) in enumerate(PLANE_AXES):
        gx = (x_n[:, ca] + 1) / 2 * (r - 1)
        gy = (x_n[:, cb] + 1) / 2 * (r - 1)
        x0 = np.minimum(np.floor(gx).astype(np.int64), r - 2)
        y0 = np.minimum(np.floor(gy).astype(np.int64), r - 2)
        fx, fy = gx - x0, gy - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                idx.append(p * r * r + (y0 + dy) * r + (x0 + dx))
                wts.append(wx * wy)
    idx = np.stack(idx, axis=1)
    wts = np.stack(wts, axis=1)
    return (dc.take(table, idx) * wts[..., None]).sum(axis=1)


class ModulatedConv(Module):
    """Style-modulated convolution with weight demodulation."""

    def __init__(self, c_in: int, c_out: int, k: int, style_dim: int, rng: np.random.Generator, demodulate: bool = True):
        self.weight = parameter(rng.standard_normal((c_out, c_in, k, k)))
        self.affine = Linear(style_dim, c_in, rng, gain=1.0)
        self.affine.bias.data[:] = 1.0
        self.bias = parameter(np.zeros(c_out))
        self.demodulate = demodulate
        self.fan_in = c_in * k * k
        self.padding = k // 2

    def __call__(self, x: Tensor, style: Tensor) -> Tensor:
        s = self.affine(style.reshape(1, -1)).reshape(1, -1, 1, 1)
        w = self.weight * s
        if self.demodulate:
            w = w / dc.sqrt((w * w).sum(axis=(1, 2, 3), keepdims=True) + 1e-8)
        else:
            w = w * (1.0 / np.sqrt(self.fan_in))
        return dc.conv2d(x, w, self.bias, 1, self.padding)


class TriPlaneGenerator(Module):
    """latent -> mapping MLP -> style -> modulated conv decoder -> (3, F, R, R) planes."""

    def __init__(self, latent_dim: int, style_dim: int, channels: int, resolution: int, hidden: int,
                 base_resolution: int, rng: np.random.Generator):
        n_up = int(round(np.log2(resolution / base_resolution)))
        if base_resolution * 2**n_up != resolution:
            raise ValueError("plane resolution must be base resolution times a power of two")
        self.mapping = [Linear(latent_dim, style_dim, rng), Linear(style_dim, style_dim, rng)]
        self.const = parameter(rng.standard_normal((1, hidden, base_resolution, base_resolution)))
        self.convs = [ModulatedConv(hidden, hidden, 3, style_dim, rng) for _ in range(n_up)]
        self.to_planes = ModulatedConv(hidden, 3 * channels, 1, style_dim, rng, demodulate=False)
        self.channels = channels
        self.resolution = resolution
        self.style_dim = style_dim

    def style(self, latent: Tensor) -> Tensor:
        h = latent.reshape(1, -1)
        h = dc.leaky_relu(self.mapping[0](h))
        return self.mapping[1](h).reshape(-1)

    def __call__(self, latent: Tensor) -> TriPlane:
        style = self.style(latent)
        x = self.const
        for conv in self.convs:
            x = dc.leaky_relu(conv(upsample2x(x), style))
        planes = self.to_planes(x, style)
        r = self.resolution
        return TriPlane(planes.reshape(3, self.channels, r, r))


# ---------------------------------------------------------------------------
# point-level path
# ---------------------------------------------------------------------------
_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])


@dataclass
class SparseVolume:
    grid: int
    coords: np.ndarray  # (M, 3) active voxel indices
    feats: Tensor  # (M, D)
    lookup: np.ndarray  # (G, G, G) row of each voxel or -1

    @property
    def n_active(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.feats.shape[1]


def voxel_index(x_n: np.ndarray, grid: int) -> np.ndarray:
    return np.clip(np.floor((np.asarray(x_n) + 1) / 2 * grid), 0, grid - 1).astype(np.int64)


def voxelize(x_n: np.ndarray, feats: Tensor, grid: int) -> SparseVolume:
    """Average point features falling in the same voxel of a grid^3 lattice over [-1, 1]^3."""
    if len(x_n) == 0:
        return SparseVolume(grid, np.zeros((0, 3), np.int64), Tensor(np.zeros((0, feats.shape[1]))),
                            np.full((grid,) * 3, -1, np.int64))
    vox = voxel_index(x_n, grid)
    coords, inverse, counts = np.unique(vox, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    avg = np.zeros((len(coords), len(vox)))
    avg[inverse, np.arange(len(vox))] = 1.0 / counts[inverse]
    lookup = np.full((grid,) * 3, -1, np.int64)
    lookup[tuple(coords.T)] = np.arange(len(coords))
    return SparseVolume(grid, coords, dc.matmul(Tensor(avg), feats), lookup)


def neighbor_table(vol: SparseVolume) -> np.ndarray:
    """(M, 27) rows of the 3^3 neighbours of each active voxel; M marks an inactive one."""
    g = vol.grid
    nb = vol.coords[:, None, :] + _OFFSETS[None]
    ok = np.all((nb >= 0) & (nb < g), axis=2)
    rows = np.where(ok, vol.lookup[tuple(np.clip(nb, 0, g - 1).transpose(2, 0, 1))], -1)
    return np.where(rows < 0, vol.n_active, rows)


class SparseConv(Module):
    """Submanifold 3^3 convolution: outputs only at active voxels."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, gain: float = np.sqrt(2)):
        self.weight = parameter(uniform_init(rng, (27 * c_in, c_out), 27 * c_in, gain))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, feats: Tensor, table: np.ndarray) -> Tensor:
        m, c = feats.shape
        ext = dc.concat([feats, Tensor(np.zeros((1, c)))], axis=0)
        gathered = dc.take(ext, table).reshape(m, 27 * c)
        return gathered @ self.weight + self.bias


class PointVolumeNet(Module):
    def __init__(self, c_in: int, dim: int, n_layers: int, rng: np.random.Generator):
        dims = [c_in] + [dim] * n_layers
        self.layers = [SparseConv(a, b, rng, gain=np.sqrt(2) if i < n_layers - 1 else 1.0)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, vol: SparseVolume) -> SparseVolume:
        if vol.n_active == 0:
            return SparseVolume(vol.grid, vol.coords, Tensor(np.zeros((0, self.layers[-1].bias.shape[0]))), vol.lookup)
        table = neighbor_table(vol)
        x = vol.feats
        for i, layer in enumerate(self.layers):
            x = layer(x, table)
            if i < len(self.layers) - 1:
                x = dc.leaky_relu(x)
        return SparseVolume(vol.grid, vol.coords, x, vol.lookup)


def query_volume(vol: SparseVolume, x_n: np.ndarray) -> Tensor:
    """Trilinear interpolation over the 8 surrounding voxel centers; inactive voxels read as zero."""
    g = vol.grid
    x_n = np.asarray(x_n, dtype=np.float64).reshape(-1, 3)
    c = (x_n + 1) / 2 * g - 0.5
    i0 = np.floor(c).astype(np.int64)
    frac = c - i0
    ext = dc.concat([vol.feats, Tensor(np.zeros((1, vol.dim)))], axis=0)
    idx, wts = [], []
    for corner in _OFFSETS[(_OFFSETS >= 0).all(axis=1)]:
        ii = i0 + corner
        ok = np.all((ii >= 0) & (ii < g), axis=1)
        rows = np.where(ok, vol.lookup[tuple(np.clip(ii, 0, g - 1).T)], -1)
        idx.append(np.where(rows < 0, vol.n_active, rows))
        wts.append(np.prod(np.where(corner == 1, frac, 1 - frac), axis=1))
    idx = np.stack(idx, axis=1)
    wts = np.stack(wts, axis=1)
    return (dc.take(ext, idx) * wts[..., None]).sum(axis=1)


# ---------------------------------------------------------------------------
# bank
# ---------------------------------------------------------------------------
@dataclass
class CanonicalFrame:
    """Affine map from metric canonical space to the normalized cube."""

    center: np.ndarray
    scale: np.ndarray  # per axis

    @classmethod
    def from_box(cls, box: Aabb, extent: float = 0.9) -> "CanonicalFrame":
        half = np.maximum((box.max - box.min) / 2, 1e-6)
        return cls((box.max + box.min) / 2, extent / half)

    def normalize(self, x_c: np.ndarray) -> np.ndarray:
        return (np.asarray(x_c) - self.center) * self.scale


@dataclass
class FeatureBank:
    image: ImageFeatures
    triplane: TriPlane
    volume: SparseVolume
    state: BodyState  # input-view body
    camera: CameraView  # input camera
    frame: CanonicalFrame
    visible: np.ndarray
    vertex_feats: Tensor  # features gathered at visible vertices


@dataclass
class PointFeatures:
    f_global: Tensor
    f_point: Tensor
    f_pixel: Tensor
    gate_distance: np.ndarray
    gated: np.ndarray


def gather_vertex_features(imgF: ImageFeatures, state: BodyState, cam: CameraView, vis: np.ndarray) -> Tensor:
    uv, _ = project_points(cam, state.posed_vertices[vis])
    return sample_map(imgF.map2d, uv)


def build_point_volume(imgF: ImageFeatures, state: BodyState, cam: CameraView, vis: np.ndarray,
                       frame: CanonicalFrame, grid: int) -> tuple[SparseVolume, Tensor]:
    """Voxelized (pre-convolution) volume of visible-vertex features at canonical positions."""
    feats = gather_vertex_features(imgF, state, cam, vis)
    x_n = frame.normalize(state.canonical_vertices[vis])
    return voxelize(x_n, feats, grid), feats


def query_pixel_aligned(imgF: ImageFeatures, x_c: np.ndarray, state: BodyState, cam: CameraView,
                        threshold: float = 0.05) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Pixel-aligned features, distance to the nearest canonical vertex, and the gate flag."""
    x_o, dist = canonical_to_posed(x_c, state)
    uv, depth = project_points(cam, x_o)
    behind = depth <= 0
    uv = np.where(behind[:, None], np.nan, uv)
    f = sample_map(imgF.map2d, uv)
    return f, dist, (dist > threshold) | behind


def input_visibility(state: BodyState, cam: CameraView, eps: float = 0.01) -> np.ndarray:
    return visible_vertices(state.posed_vertices, cam, state.template.faces, eps)
