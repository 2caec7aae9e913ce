"""Cameras, textures, environment sampling, image I/O, parameter transforms."""

import numpy as np
import pytest

import invren.scene as sc
from invren.errors import ConfigError, SceneError
from invren.primitives import uv_sphere

FOUR_PI = 4.0 * np.pi


def identity_camera(width=128, height=128, fx=100.0, fy=100.0) -> sc.Camera:
    pose = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return sc.Camera(width, height, fx, fy, width / 2.0, height / 2.0, pose)


### camera model ###


def test_project_point_half_right_of_axis():
    cam = identity_camera()
    uv, depth = cam.project(np.array([0.5, 0.0, -1.0]))
    assert np.allclose(uv, [114.0, 64.0]), f"{uv=}"
    assert depth == 1.0


def test_project_on_axis_hits_principal_point():
    cam = identity_camera()
    uv, depth = cam.project(np.array([0.0, 0.0, -2.0]))
    assert np.allclose(uv, [64.0, 64.0]) and depth == 2.0


def test_project_flags_points_behind_camera():
    cam = identity_camera()
    _, depth = cam.project(np.array([0.0, 0.0, 3.0]))
    assert depth < 0.0


def test_project_rejects_point_on_camera_plane():
    cam = identity_camera()
    with pytest.raises(SceneError, match="camera plane"):
        cam.project(np.array([1.0, 0.0, 0.0]))


def test_project_unproject_round_trip(rng):
    cam = sc.Camera.look_at([2.0, 1.5, 2.5], [0.0, 0.0, 0.0], 64, 64)
    for _ in range(50):
        p = rng.uniform(-0.5, 0.5, 3)
        uv, depth = cam.project(p)
        assert depth > 0.0
        back = cam.unproject(uv, depth)
        assert np.abs(back - p).max() < 1e-9, f"{p=} {back=}"


def test_camera_rejects_non_orthonormal_rotation():
    pose = np.concatenate([np.eye(3) * 1.01, np.zeros((3, 1))], axis=1)
    with pytest.raises(SceneError, match="orthonormal"):
        sc.Camera(32, 32, 10.0, 10.0, 16.0, 16.0, pose)


def test_look_at_centers_target():
    cam = sc.Camera.look_at([3.0, 2.0, -1.0], [0.1, 0.2, 0.3], 96, 80)
    uv, depth = cam.project(np.array([0.1, 0.2, 0.3]))
    assert np.allclose(uv, [48.0, 40.0], atol=1e-9)
    assert depth > 0.0


def test_pixel_ray_passes_through_projection(rng):
    cam = sc.Camera.look_at([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], 64, 64)
    p = np.array([0.1, -0.2, 0.15])
    uv, depth = cam.project(p)
    origin, d = cam.pixel_ray(uv[0], uv[1])
    closest = origin + d * np.dot(p - origin, d)
    assert np.linalg.norm(closest - p) < 1e-9


def test_downsampled_camera_projects_consistently():
    cam = identity_camera(128, 128)
    small = cam.downsampled(4)
    p = np.array([0.3, -0.2, -1.7])
    uv_full, _ = cam.project(p)
    uv_small, _ = small.project(p)
    assert np.allclose(uv_small, uv_full / 4.0)
    with pytest.raises(ConfigError):
        cam.downsampled(3)


def test_camera_json_round_trip(tmp_path):
    cams = [
        sc.Camera.look_at([2.0, 1.0, 2.0], [0, 0, 0], 128, 96, fov_x_deg=55.0),
        identity_camera(),
    ]
    path = str(tmp_path / "cameras.json")
    sc.save_cameras(cams, path)
    back = sc.load_cameras(path)
    assert len(back) == 2
    for a, b in zip(cams, back):
        assert a.width == b.width and a.height == b.height
        assert np.array_equal(a.world_to_camera, b.world_to_camera)
        assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)


### textures ###


def test_texture_sample_exact_at_texel_centers(rng):
    data = rng.uniform(0, 1, (5, 7, 3))
    tex = sc.Texture2D(data)
    for j in range(5):
        for i in range(7):
            uv = ((i + 0.5) / 7, (j + 0.5) / 5)
            val, _, _ = tex.sample(uv)
            assert np.allclose(val, data[j, i], atol=1e-12)


def test_texture_midpoint_is_average_of_neighbors():
    data = np.zeros((1, 2, 1))
    data[0, 0] = 0.2
    data[0, 1] = 0.8
    val, _, _ = sc.Texture2D(data).sample((0.5, 0.5))
    assert abs(val[0] - 0.5) < 1e-12


def test_texture_clamps_to_edge():
    data = np.arange(4, dtype=np.float64).reshape(2, 2, 1)
    tex = sc.Texture2D(data)
    val, _, _ = tex.sample((0.0, 0.0))
    assert abs(val[0] - data[0, 0, 0]) < 1e-12
    val, _, _ = tex.sample((1.0, 1.0))
    assert abs(val[0] - data[1, 1, 0]) < 1e-12


def test_texture_taps_reconstruct_sample(rng):
    tex = sc.Texture2D(rng.uniform(0, 1, (6, 4, 3)))
    for _ in range(30):
        uv = rng.uniform(0, 1, 2)
        val, idx, w = tex.sample(uv)
        assert abs(w.sum() - 1.0) < 1e-12
        recon = sum(w[k] * tex.data[idx[k, 0], idx[k, 1]] for k in range(4))
        assert np.allclose(val, recon, atol=1e-12)


### environment map ###


def test_env_uv_of_canonical_directions():
    u, v = sc.dirs_to_env_uv(np.array([0.0, 0.0, -1.0]))
    assert abs(u - 0.5) < 1e-12, "forward (-z) maps to u = 0.5"
    u, v = sc.dirs_to_env_uv(np.array([0.0, 1.0, 0.0]))
    assert v == 0.0, "up maps to the top row"
    u, v = sc.dirs_to_env_uv(np.array([0.0, -1.0, 0.0]))
    assert abs(v - 1.0) < 1e-12


def test_env_uv_dir_round_trip(rng):
    d = rng.standard_normal((200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    u, v = sc.dirs_to_env_uv(d)
    back = sc.env_uv_to_dir(u, v)
    assert np.abs(back - d).max() < 1e-9


def test_env_lookup_constant_map(rng):
    env = sc.EnvMap(np.full((8, 16, 3), 0.7))
    d = rng.standard_normal((100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    vals = env.lookup(d)
    assert np.abs(vals - 0.7).max() < 1e-12


def test_env_lookup_rejects_non_unit_direction():
    env = sc.EnvMap(np.full((4, 8, 3), 1.0))
    with pytest.raises(SceneError, match="unit"):
        env.lookup(np.array([0.0, 0.0, -2.0]))


def test_env_lookup_seam_continuity(rng):
    env = sc.EnvMap(rng.uniform(0.1, 1.0, (16, 32, 3)))
    eps = 1e-7
    left = sc.env_uv_to_dir(np.full(5, eps), np.linspace(0.2, 0.8, 5))
    right = sc.env_uv_to_dir(np.full(5, 1.0 - eps), np.linspace(0.2, 0.8, 5))
    assert np.abs(env.lookup(left) - env.lookup(right)).max() < 1e-5


def test_env_sample_constant_map_pdf_is_uniform(rng):
    env = sc.EnvMap(np.full((128, 512, 3), 0.5))
    dirs = []
    for _ in range(500):
        d, pdf = env.sample(rng.uniform(), rng.uniform())
        assert abs(pdf - 1.0 / FOUR_PI) < 1e-10 / FOUR_PI, f"{pdf=}"
        dirs.append(d)
    mean = np.mean(dirs, axis=0)
    assert np.linalg.norm(mean) < 0.1, "constant map samples cover the sphere"


def test_env_sample_concentrates_on_bright_texel(rng):
    rad = np.zeros((16, 32, 3))
    rad[5, 20] = 10.0
    env = sc.EnvMap(rad)
    inside = 0
    n = 10_000
    for _ in range(n):
        d, pdf = env.sample(rng.uniform(), rng.uniform())
        u, v = sc.dirs_to_env_uv(d)
        if int(u * 32) == 20 and int(v * 16) == 5:
            inside += 1
        assert pdf > 0.0
    assert inside >= 0.99 * n, f"{inside}/{n} samples in the bright texel"


def test_env_sample_pdf_matches_pdf_query(rng):
    env = sc.EnvMap(rng.uniform(0.0, 2.0, (12, 24, 3)) ** 2)
    for _ in range(2000):
        d, pdf = env.sample(rng.uniform(), rng.uniform())
        ref = float(env.pdf(d))
        assert ref > 0.0
        assert abs(pdf - ref) <= 1e-6 * ref, f"{pdf=} {ref=}"


def test_env_pdf_integrates_to_one(rng):
    env = sc.EnvMap(rng.uniform(0.05, 3.0, (16, 32, 3)))
    # stratified lat-long grid; d_omega = 2 pi^2 sin(pi v) du dv
    n_u, n_v = 400, 250
    u = (np.arange(n_u) + 0.5) / n_u
    v = (np.arange(n_v) + 0.5) / n_v
    uu, vv = np.meshgrid(u, v)
    dirs = sc.env_uv_to_dir(uu.ravel(), vv.ravel())
    pdf = env.pdf(dirs)
    omega = 2.0 * np.pi**2 * np.sin(np.pi * vv.ravel()) / (n_u * n_v)
    total = float(np.sum(pdf * omega))
    assert abs(total - 1.0) < 0.01, f"{total=}"


def test_env_black_map_falls_back_to_uniform_sphere(rng):
    env = sc.EnvMap(np.zeros((8, 16, 3)))
    for _ in range(100):
        d, pdf = env.sample(rng.uniform(), rng.uniform())
        assert abs(pdf - 1.0 / FOUR_PI) < 1e-15
        assert abs(np.linalg.norm(d) - 1.0) < 1e-12
    assert np.all(env.pdf(np.array([[0.0, 1.0, 0.0]])) == 1.0 / FOUR_PI)


def test_env_cdf_tracks_radiance_updates():
    env = sc.EnvMap(np.full((8, 16, 3), 1.0))
    rad = np.zeros((8, 16, 3))
    rad[2, 3] = 5.0
    env.set_radiance(rad)
    d, pdf = env.sample(0.37, 0.81)
    u, v = sc.dirs_to_env_uv(d)
    assert int(u * 16) == 3 and int(v * 8) == 2, "CDF rebuilt for the new radiance"


### parameter transforms ###


def test_sigmoid_logit_round_trip(rng):
    p = rng.uniform(0.01, 0.99, 100)
    assert np.abs(sc.sigmoid(sc.logit(p)) - p).max() < 1e-12


def test_roughness_transform_stays_in_range():
    z = np.linspace(-50, 50, 101)
    alpha = sc.roughness_from_logit(z)
    assert alpha.min() >= 0.01 and alpha.max() <= 1.0
    mid = sc.roughness_from_logit(sc.roughness_to_logit(np.array([0.3])))
    assert abs(mid[0] - 0.3) < 1e-12


def test_scene_logits_round_trip(rng):
    scene = sc.init_scene(uv_sphere(6, 8), 8, env_width=16, env_height=8)
    logits = sc.scene_to_logits(scene)
    logits["diffuse"] += 0.3
    sc.apply_logits(scene, logits)
    assert np.abs(scene.diffuse.data - sc.sigmoid(sc.logit(0.5) + 0.3)).max() < 1e-12
    # envmap cdf still matches radiance after apply
    d, pdf = scene.envmap.sample(0.5, 0.5)
    assert abs(pdf - 1.0 / FOUR_PI) < 1e-9


def test_init_scene_defaults():
    scene = sc.init_scene(uv_sphere(6, 8), 16)
    assert scene.diffuse.data.shape == (16, 16, 3)
    assert np.all(scene.diffuse.data == 0.5)
    assert np.all(scene.specular.data == 0.04)
    assert np.all(scene.roughness.data == 0.3)
    assert scene.envmap.radiance.shape == (128, 512, 3)
    assert np.all(scene.envmap.radiance == 0.5)
    scene.validate()


def test_init_scene_bakes_vertex_colors(rng):
    mesh = uv_sphere(8, 12)
    mesh.vertex_colors = np.tile(np.array([0.2, 0.6, 0.9]), (mesh.n_vertices, 1))
    scene = sc.init_scene(mesh, 32)
    covered = np.abs(scene.diffuse.data - np.array([0.2, 0.6, 0.9])).max(axis=2) < 1e-9
    assert covered.mean() > 0.9, "most texels take the baked color"


### image I/O ###


def test_pfm_round_trip_rgb(tmp_path, rng):
    img = rng.uniform(0, 4, (9, 13, 3)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "img.pfm")
    sc.save_pfm(path, img)
    back = sc.load_pfm(path)
    assert back.shape == (9, 13, 3)
    assert np.array_equal(back, img)


def test_pfm_round_trip_grayscale(tmp_path, rng):
    img = rng.uniform(0, 1, (5, 6)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "gray.pfm")
    sc.save_pfm(path, img)
    assert np.array_equal(sc.load_pfm(path), img)


def test_pfm_header_is_little_endian_scale(tmp_path):
    path = str(tmp_path / "h.pfm")
    sc.save_pfm(path, np.zeros((2, 3, 3)))
    with open(path, "rb") as fh:
        head = fh.read(12)
    assert head == b"PF\n3 2\n-1.0\n"


def test_pfm_truncated_payload_is_an_error(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n4 4\n-1.0\n\x00\x00\x00\x00")
    with pytest.raises(SceneError, match="truncated"):
        sc.load_pfm(str(path))


def test_srgb_round_trip(rng):
    x = rng.uniform(0, 1, 1000)
    assert np.abs(sc.srgb_eotf(sc.srgb_oetf(x)) - x).max() < 1e-12
    assert sc.srgb_oetf(np.array(0.0)) == 0.0
    assert abs(sc.srgb_oetf(np.array(1.0)) - 1.0) < 1e-12


def test_tonemap_clamps_out_of_range():
    img = np.array([[-0.5, 0.18, 2.0]])
    out = sc.tonemap(img)
    assert out[0, 0] == 0.0 and abs(out[0, 2] - 1.0) < 1e-12


def test_mask_png_round_trip(tmp_path):
    mask = np.zeros((8, 8))
    mask[2:5, 3:7] = 1.0
    path = str(tmp_path / "mask.png")
    sc.save_mask_png(path, mask)
    assert np.array_equal(sc.load_mask_png(path), mask)


def test_png_preview_writes_srgb(tmp_path):
    img = np.full((4, 4, 3), 0.5)
    path = str(tmp_path / "p.png")
    sc.save_png(path, img)
    enc = sc.load_png(path)
    assert abs(enc[0, 0, 0] - sc.srgb_oetf(np.array(0.5))) < 1.0 / 255.0


def test_downsample_image_box_average():
    img = np.arange(16, dtype=np.float64).reshape(4, 4)
    out = sc.downsample_image(img, 2)
    assert np.array_equal(out, [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ConfigError):
        sc.downsample_image(img, 3)
