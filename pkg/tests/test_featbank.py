import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from humanfield import diffcore as dc
from humanfield.body import pose_body
from humanfield.config import Config
from humanfield.diffcore import Tensor
from humanfield.featbank import (
    CanonicalFrame,
    ImageEncoder,
    PointVolumeNet,
    TriPlane,
    TriPlaneGenerator,
    build_point_volume,
    gather_vertex_features,
    input_visibility,
    query_pixel_aligned,
    query_triplane,
    query_volume,
    sample_map,
    voxel_index,
    voxelize,
)
from humanfield.geometry import CameraView, project_points
from humanfield.gradcheck import check_gradient
from humanfield.model import HumanFieldModel
from humanfield.synthcap import ring_camera

from conftest import projector, tiny_config


@pytest.fixture
def encoder():
    return ImageEncoder(16, (4, 4, 4, 4), 6, 32, np.random.default_rng(0))


@pytest.fixture
def generator():
    return TriPlaneGenerator(4, 8, 3, 16, 4, 4, np.random.default_rng(1))


def random_image(rng, size=16):
    image = rng.uniform(0, 1, (size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    mask[3:13, 5:11] = True
    return image, mask


# -- encoder --------------------------------------------------------------
def test_encoder_shapes_and_full_scale_channel_count(encoder, rng):
    image, mask = random_image(rng)
    f = encoder(image, mask)
    assert f.map2d.shape == (6 + 32, 16, 16)
    assert f.latent.shape == (4,)
    full = ImageEncoder(16, (4, 4, 4, 4), 64, 32, rng)
    assert full(image, mask).n_channels == 96


def test_encoder_rejects_wrong_size(encoder):
    with pytest.raises(ValueError):
        encoder(np.zeros((8, 8, 3)), np.ones((8, 8)))


def test_encoder_ignores_pixels_outside_mask(encoder, rng):
    image, mask = random_image(rng)
    other = image.copy()
    other[~mask] = rng.uniform(0, 1, (np.sum(~mask), 3))
    a, b = encoder(image, mask), encoder(other, mask)
    assert np.array_equal(a.latent.data, b.latent.data)
    assert np.array_equal(a.map2d.data, b.map2d.data)


def test_encoder_empty_mask_is_pure_bias_response(encoder, rng):
    image = rng.uniform(0, 1, (16, 16, 3))
    empty = np.zeros((16, 16))
    f = encoder(image, empty)
    assert np.array_equal(f.latent.data, encoder(np.zeros((16, 16, 3)), empty).latent.data)
    assert np.all(f.map2d.data == 0)  # background is zeroed, appended channels included
    for block in encoder.blocks:
        block.bias.data[:] = 0
    assert np.all(encoder(image, empty).latent.data == 0)


def test_encoder_gradient(encoder, rng):
    image, mask = random_image(rng)

    def fn():
        f = encoder(image, mask)
        return projector(f.latent) + projector(f.map2d, 1)

    params = [encoder.blocks[0].weight, encoder.blocks[2].weight, encoder.blocks[3].bias, encoder.fuse.weight]
    assert check_gradient(fn, params, 20, rng).passed()


# -- tri-plane ------------------------------------------------------------
def test_triplane_full_scale_style_and_point_dims():
    model = HumanFieldModel(Config.full_scale(plane_resolution=16, plane_base_resolution=8))
    assert model.triplane.style_dim == 512
    assert model.triplane.mapping[-1].weight.shape[1] == 512
    assert len(model.point_net.layers) == 4
    assert model.point_net.layers[-1].bias.shape == (96,)
    assert model.encoder.fuse.weight.shape[0] + model.config.rgb_channels == 96


def test_triplane_build_is_deterministic(generator, rng):
    latent = Tensor(rng.standard_normal(4))
    a, b = generator(latent), generator(latent)
    assert a.planes.shape == (3, 3, 16, 16)
    assert np.array_equal(a.planes.data, b.planes.data)


def test_triplane_build_gradient(generator, rng):
    latent = Tensor(rng.standard_normal(4))
    res = check_gradient(lambda: projector(generator(latent).planes), [latent] + list(generator.parameters().values()),
                         20, rng)
    assert res.passed()


def test_query_constant_planes():
    tp = TriPlane(Tensor(np.full((3, 2, 5, 5), 0.7)))
    x = np.random.default_rng(0).uniform(-1.3, 1.3, (50, 3))
    assert np.allclose(query_triplane(tp, x).data, 2.1, atol=1e-15)


def test_query_at_grid_node_and_cell_center(rng):
    r = 5
    planes = rng.standard_normal((3, 2, r, r))
    tp = TriPlane(Tensor(planes))
    node = np.array([1, 3, 2])  # grid index per axis
    x = node / (r - 1) * 2 - 1
    expect = planes[0, :, node[1], node[0]] + planes[1, :, node[2], node[0]] + planes[2, :, node[2], node[1]]
    assert np.allclose(query_triplane(tp, x[None]).data[0], expect, atol=1e-15)
    # cell centre: every plane contributes the mean of its four corners
    cell = np.array([0, 2, 1])
    x = (cell + 0.5) / (r - 1) * 2 - 1
    expect = sum(
        planes[p, :, cell[b] : cell[b] + 2, cell[a] : cell[a] + 2].mean(axis=(1, 2))
        for p, (a, b) in enumerate(((0, 1), (0, 2), (1, 2)))
    )
    assert np.allclose(query_triplane(tp, x[None]).data[0], expect, atol=1e-14)


def test_query_triplane_is_affine_within_a_cell(rng):
    tp = TriPlane(Tensor(rng.standard_normal((3, 4, 9, 9))))
    cell = 2 / 8
    base = -1 + cell * np.array([2.1, 4.15, 5.05])
    for axis in range(3):
        pts = np.repeat(base[None], 3, axis=0)
        pts[:, axis] += cell * np.array([0.0, 0.35, 0.8])
        f = query_triplane(tp, pts).data
        mid = f[0] + (f[2] - f[0]) * 0.35 / 0.8
        assert np.allclose(f[1], mid, atol=1e-13)


def test_query_triplane_clamps_outside_the_cube(rng):
    tp = TriPlane(Tensor(rng.standard_normal((3, 2, 6, 6))))
    assert np.array_equal(query_triplane(tp, [[2.0, -5.0, 0.3]]).data, query_triplane(tp, [[1.0, -1.0, 0.3]]).data)


def test_query_triplane_gradient(rng):
    tp = TriPlane(Tensor(rng.standard_normal((3, 3, 8, 8))))
    x = rng.uniform(-1, 1, (30, 3))
    assert check_gradient(lambda: projector(query_triplane(tp, x)), [tp.planes], 20, rng).passed()


# -- sparse volume ----------------------------------------------------------
def test_single_vertex_at_origin_lands_in_center_voxel():
    vol = voxelize(np.zeros((1, 3)), Tensor(np.ones((1, 4))), 31)
    assert vol.n_active == 1
    assert vol.coords.tolist() == [[15, 15, 15]]
    assert vol.lookup[15, 15, 15] == 0 and np.sum(vol.lookup >= 0) == 1


def test_voxelize_averages_collisions_and_is_permutation_invariant(rng):
    x = rng.uniform(-1, 1, (200, 3))
    feats = rng.standard_normal((200, 5))
    vol = voxelize(x, Tensor(feats), 5)
    vox = voxel_index(x, 5)
    for row, c in enumerate(vol.coords):
        members = np.all(vox == c, axis=1)
        assert np.allclose(vol.feats.data[row], feats[members].mean(axis=0), atol=1e-14)
    perm = rng.permutation(200)
    other = voxelize(x[perm], Tensor(feats[perm]), 5)
    assert np.array_equal(vol.coords, other.coords)
    assert np.allclose(vol.feats.data, other.feats.data, atol=1e-14)
    net = PointVolumeNet(5, 3, 4, rng)
    assert np.allclose(net(vol).feats.data, net(other).feats.data, atol=1e-12)


def test_point_volume_permutation_invariant_in_vertex_order(bent_state, rng):
    enc = ImageEncoder(16, (4, 4, 4, 4), 6, 32, rng)
    image, mask = random_image(rng)
    cam = ring_camera(30.0, 16)
    imgF = enc(image, mask)
    vis = input_visibility(bent_state, cam)
    frame = CanonicalFrame.from_box(bent_state.canonical_aabb())
    vol, _ = build_point_volume(imgF, bent_state, cam, vis, frame, 9)
    idx = np.flatnonzero(vis)
    perm = rng.permutation(len(idx))
    feats = gather_vertex_features(imgF, bent_state, cam, vis)
    shuffled = voxelize(frame.normalize(bent_state.canonical_vertices[idx[perm]]), feats[perm], 9)
    assert np.array_equal(vol.coords, shuffled.coords)
    assert np.allclose(vol.feats.data, shuffled.feats.data, atol=1e-14)


def test_empty_visibility_gives_empty_volume(bent_state, rng):
    enc = ImageEncoder(16, (4, 4, 4, 4), 6, 32, rng)
    imgF = enc(*random_image(rng))
    frame = CanonicalFrame.from_box(bent_state.canonical_aabb())
    vis = np.zeros(len(bent_state.posed_vertices), dtype=bool)
    vol, _ = build_point_volume(imgF, bent_state, ring_camera(0.0, 16), vis, frame, 9)
    assert vol.n_active == 0
    out = PointVolumeNet(38, 4, 4, rng)(vol)
    assert out.n_active == 0
    assert np.all(query_volume(out, rng.uniform(-1, 1, (10, 3))).data == 0)


def test_sparse_convolution_is_submanifold(rng):
    x = rng.uniform(-1, 1, (40, 3))
    vol = voxelize(x, Tensor(rng.standard_normal((40, 4))), 7)
    out = PointVolumeNet(4, 3, 4, rng)(vol)
    assert np.array_equal(out.coords, vol.coords)
    assert out.feats.shape == (vol.n_active, 3)


def test_sparse_conv_matches_dense_oracle(rng):
    grid = 5
    x = rng.uniform(-1, 1, (30, 3))
    vol = voxelize(x, Tensor(rng.standard_normal((30, 2))), grid)
    net = PointVolumeNet(2, 3, 1, rng)
    out = net(vol).feats.data
    w = net.layers[0].weight.data.reshape(3, 3, 3, 2, 3)  # offsets i, j, k then channels
    dense = np.zeros((grid + 2,) * 3 + (2,))
    for c, f in zip(vol.coords, vol.feats.data):
        dense[tuple(c + 1)] = f
    for row, c in enumerate(vol.coords):
        patch = dense[c[0] : c[0] + 3, c[1] : c[1] + 3, c[2] : c[2] + 3]
        expect = np.einsum("ijkc,ijkco->o", patch, w) + net.layers[0].bias.data
        assert np.allclose(out[row], expect, atol=1e-12)


def test_query_volume_inactive_region_and_isolated_voxel():
    grid = 9
    x = np.array([[0.0, 0.0, 0.0]])
    vol = voxelize(x, Tensor(np.array([[1.5, -2.0]])), grid)
    assert np.all(query_volume(vol, [[0.8, -0.8, 0.8]]).data == 0)
    center = (np.array([4, 4, 4]) + 0.5) / grid * 2 - 1
    assert np.array_equal(query_volume(vol, center[None]).data[0], [1.5, -2.0])


def test_query_volume_matches_dense_trilinear_oracle(rng):
    grid = 7
    x = rng.uniform(-1, 1, (60, 3))
    vol = voxelize(x, Tensor(rng.standard_normal((60, 3))), grid)
    dense = np.zeros((3,) + (grid,) * 3)
    for c, f in zip(vol.coords, vol.feats.data):
        dense[(slice(None),) + tuple(c)] = f
    q = rng.uniform(-1.05, 1.05, (500, 3))
    coords = ((q + 1) / 2 * grid - 0.5).T
    expect = np.stack([map_coordinates(dense[k], coords, order=1, mode="grid-constant", cval=0.0) for k in range(3)], 1)
    assert np.allclose(query_volume(vol, q).data, expect, atol=1e-12)


def test_sparse_path_gradients(rng):
    x = rng.uniform(-1, 1, (40, 3))
    feats = Tensor(rng.standard_normal((40, 4)))
    net = PointVolumeNet(4, 3, 4, rng)
    q = rng.uniform(-1, 1, (25, 3))

    def fn():
        return projector(query_volume(net(voxelize(x, feats, 5)), q))

    assert check_gradient(fn, [feats] + list(net.parameters().values()), 20, rng).passed()


# -- pixel-aligned path -----------------------------------------------------
def test_sample_map_bilinear_and_outside(rng):
    m = rng.standard_normal((2, 4, 5))
    t = Tensor(m)
    # pixel centres hit the stored values exactly
    assert np.allclose(sample_map(t, [[2.5, 1.5]]).data[0], m[:, 1, 2], atol=1e-15)
    mid = sample_map(t, [[3.0, 2.0]]).data[0]
    assert np.allclose(mid, m[:, 1:3, 2:4].mean(axis=(1, 2)), atol=1e-15)
    assert np.all(sample_map(t, [[-0.5, 1.0], [9.0, 1.0], [np.nan, 1.0]]).data == 0)


def test_sample_map_gradient(rng):
    t = Tensor(rng.standard_normal((3, 8, 8)))
    uv = rng.uniform(0, 8, (30, 2))
    assert check_gradient(lambda: projector(sample_map(t, uv)), [t], 20, rng).passed()


def test_pixel_feature_at_visible_vertex_equals_gathered(bent_state, rng):
    enc = ImageEncoder(16, (4, 4, 4, 4), 6, 32, rng)
    imgF = enc(*random_image(rng))
    cam = ring_camera(20.0, 16)
    vis = input_visibility(bent_state, cam)
    gathered = gather_vertex_features(imgF, bent_state, cam, vis).data
    idx = np.flatnonzero(vis)
    f, dist, gated = query_pixel_aligned(imgF, bent_state.canonical_vertices[idx], bent_state, cam)
    assert np.allclose(f.data, gathered, atol=1e-9)
    assert np.all(dist == 0) and not gated.any()


def test_gate_at_ten_centimetres(bent_state, rng):
    enc = ImageEncoder(16, (4, 4, 4, 4), 6, 32, rng)
    imgF = enc(*random_image(rng))
    verts = bent_state.canonical_vertices
    top = verts[np.argmax(verts[:, 1])]
    far = top + np.array([0.0, 0.10, 0.0])
    rand = rng.uniform(verts.min(0) - 0.2, verts.max(0) + 0.2, (300, 3))
    pts = np.vstack([far, rand])
    _, dist, gated = query_pixel_aligned(imgF, pts, bent_state, ring_camera(0.0, 16))
    brute = np.min(np.linalg.norm(pts[:, None] - verts[None], axis=2), axis=1)
    assert np.allclose(dist, brute, atol=1e-12)
    assert dist[0] > 0.05 and gated[0]
    assert np.array_equal(gated, dist > 0.05)


def test_rest_pose_samples_at_direct_projection(template, rng):
    state = pose_body(template, np.zeros((template.n_joints, 3)))
    enc = ImageEncoder(16, (4, 4, 4, 4), 6, 32, rng)
    imgF = enc(*random_image(rng))
    cam = CameraView(np.array([[20.0, 0, 8], [0, 20.0, 8], [0, 0, 1]]), np.eye(3), np.array([0.0, -0.3, 3.0]), 16, 16)
    pts = state.canonical_vertices[::7] + rng.normal(0, 0.01, (len(state.canonical_vertices[::7]), 3))
    f, _, _ = query_pixel_aligned(imgF, pts, state, cam)
    uv, _ = project_points(cam, pts)
    assert np.allclose(f.data, sample_map(imgF.map2d, uv).data, atol=1e-12)


def test_behind_camera_is_zero_and_gated(bent_state, rng):
    enc = ImageEncoder(16, (4, 4, 4, 4), 6, 32, rng)
    imgF = enc(*random_image(rng))
    # camera inside the torso looking away from the head: the head is behind it
    cam = CameraView.look_at(np.array([0.0, 0.3, 0.0]), np.array([0.0, -1.0, 0.0]), np.array([0.0, 0.0, 1.0]),
                             20.0, 16, 16)
    verts = bent_state.canonical_vertices
    head = verts[np.argmax(verts[:, 1])][None]
    f, dist, gated = query_pixel_aligned(imgF, head, bent_state, cam)
    assert dist[0] == 0 and gated[0]
    assert np.all(f.data == 0)


def test_model_query_gate_flags(bent_state, rng):
    model = HumanFieldModel(tiny_config())
    image, mask = random_image(rng)
    bank = model.build_bank(image, mask, ring_camera(0.0, 16), bent_state)
    verts = bent_state.canonical_vertices
    pts = rng.uniform(verts.min(0) - 0.15, verts.max(0) + 0.15, (400, 3))
    pf = model.query(bank, pts)
    assert np.array_equal(pf.gated, pf.gate_distance > 0.05)
    n = np.sum(~pf.gated)
    assert pf.f_global.shape[0] == pf.f_point.shape[0] == pf.f_pixel.shape[0] == n
    with dc.no_grad():
        again = model.query(bank, pts)
    assert np.array_equal(again.f_pixel.data, pf.f_pixel.data)
