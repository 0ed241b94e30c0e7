"""The full single-image human radiance field: bank construction, point queries, rendering."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .body import BodyState, canonical_to_posed
from .config import Config
from .diffcore import Module, Tensor
from .featbank import (
    CanonicalFrame,
    FeatureBank,
    ImageEncoder,
    PointFeatures,
    PointVolumeNet,
    TriPlaneGenerator,
    build_point_volume,
    input_visibility,
    query_triplane,
    query_volume,
    sample_map,
)
from .fusion import FusionTransformer
from .geometry import CameraView, cast_rays, project_points
from .nerf import NerfDecoder, RenderOutput, decode, render_rays


class HumanFieldModel(Module):
    def __init__(self, config: Config | None = None):
        cfg = config or Config()
        self.config = cfg
        rng = np.random.default_rng(cfg.init_seed)
        map_dim = cfg.map_channels + cfg.rgb_channels
        self.encoder = ImageEncoder(cfg.image_size, cfg.encoder_widths, cfg.map_channels, cfg.rgb_channels, rng)
        self.triplane = TriPlaneGenerator(self.encoder.latent_dim, cfg.style_dim, cfg.plane_channels,
                                          cfg.plane_resolution, cfg.plane_hidden, cfg.plane_base_resolution, rng)
        self.point_net = PointVolumeNet(map_dim, cfg.point_dim, cfg.sparse_layers, rng)
        self.fusion = FusionTransformer((cfg.plane_channels, cfg.point_dim, map_dim), cfg.token_channels, cfg.heads,
                                        rng, cfg.head_dim or None, cfg.reduction)
        self.decoder = NerfDecoder(self.fusion.out_dim, cfg.decoder_hidden, cfg.decoder_layers, cfg.xyz_freqs, rng,
                                  cfg.density_scale)

    # -- parameters -------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    # -- pipeline ---------------------------------------------------------
    def build_bank(self, image: np.ndarray, mask: np.ndarray, cam: CameraView, state: BodyState,
                   visible: np.ndarray | None = None) -> FeatureBank:
        cfg = self.config
        imgF = self.encoder(image, mask)
        tp = self.triplane(imgF.latent)
        frame = CanonicalFrame.from_box(state.canonical_aabb(), cfg.canonical_extent)
        vis = input_visibility(state, cam, cfg.visibility_eps) if visible is None else visible
        vol0, vfeats = build_point_volume(imgF, state, cam, vis, frame, cfg.voxel_grid)
        vol = self.point_net(vol0)
        return FeatureBank(imgF, tp, vol, state, cam, frame, vis, vfeats)

    def query(self, bank: FeatureBank, x_c: np.ndarray) -> PointFeatures:
        """Gate every point; gather the three features for the ungated ones only."""
        x_c = np.asarray(x_c, dtype=np.float64).reshape(-1, 3)
        x_o, dist = canonical_to_posed(x_c, bank.state)
        uv, depth = project_points(bank.camera, x_o)
        gated = (dist > self.config.gate_threshold) | (depth <= 0)
        keep = np.flatnonzero(~gated)
        x_n = bank.frame.normalize(x_c[keep])
        return PointFeatures(
            f_global=query_triplane(bank.triplane, x_n),
            f_point=query_volume(bank.volume, x_n),
            f_pixel=sample_map(bank.image.map2d, uv[keep]),
            gate_distance=dist,
            gated=gated,
        )

    def decode(self, bank: FeatureBank, x_c: np.ndarray, pf: PointFeatures) -> tuple[Tensor, Tensor]:
        x_n = bank.frame.normalize(np.asarray(x_c).reshape(-1, 3))
        if pf.f_global.shape[0]:
            f_trans = self.fusion(pf.f_global, pf.f_point, pf.f_pixel)
        else:
            f_trans = Tensor(np.zeros((0, self.fusion.out_dim)))
        return decode(self.decoder, x_n, f_trans, pf.gated, self.config.gate_sigma)

    def render_rays(self, bank: FeatureBank, state: BodyState, origins, dirs, rng=None,
                    n_samples: int | None = None) -> RenderOutput:
        return render_rays(self, bank, state, origins, dirs, n_samples, rng)

    def render_image(self, bank: FeatureBank, state: BodyState, cam: CameraView, chunk: int = 2048,
                     n_samples: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic (unjittered) render: image (H, W, 3) and accumulated opacity (H, W)."""
        o, d = cast_rays(cam, cam.pixel_centers())
        color = np.zeros((len(o), 3))
        acc = np.zeros(len(o))
        with dc.no_grad():
            for s in range(0, len(o), chunk):
                out = self.render_rays(bank, state, o[s : s + chunk], d[s : s + chunk], None, n_samples)
                color[s : s + chunk] = out.color.data
                acc[s : s + chunk] = out.opacity.data
        return color.reshape(cam.height, cam.width, 3), acc.reshape(cam.height, cam.width)
