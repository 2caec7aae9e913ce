"""Loss tests: soft-IoU silhouettes, the geometry bundle, L1 photometric
loss, and the bilateral specular prior against a brute-force window oracle
and finite differences."""

import numpy as np
import pytest

from conftest import fd_gradient, jittered_icosphere, rel_err
from invren.errors import ConfigError, SceneError
from invren.geomcore import (
    build_laplacian,
    edge_length_loss,
    laplacian_loss,
    normal_consistency_loss,
)
from invren.losses import (
    GeoLossWeights,
    RefLossWeights,
    bilateral_specular_reg,
    geometry_loss,
    reflectance_loss,
    rgb_l1_loss,
    silhouette_loss,
)


class TestSilhouetteLoss:
    def test_identical_masks(self):
        mask = np.zeros((6, 6))
        mask[2:5, 1:4] = 1.0
        loss, _ = silhouette_loss(mask, mask)
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_masks(self):
        a = np.zeros((6, 6))
        b = np.zeros((6, 6))
        a[:2] = 1.0
        b[4:] = 1.0
        loss, _ = silhouette_loss(a, b)
        assert loss == pytest.approx(1.0, abs=1e-15)

    def test_three_pixel_example(self):
        pred = np.array([1.0, 1.0, 0.0])
        gt = np.array([0.0, 1.0, 1.0])
        loss, _ = silhouette_loss(pred, gt)
        # intersection 1, union 3
        assert loss == pytest.approx(2.0 / 3.0, rel=1e-15)

    def test_empty_target_rejected(self):
        with pytest.raises(SceneError):
            silhouette_loss(np.ones((4, 4)), np.zeros((4, 4)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            silhouette_loss(np.ones((4, 4)), np.ones((4, 5)))

    def test_range_on_soft_inputs(self, rng):
        for _ in range(20):
            pred = rng.random((7, 5))
            gt = rng.random((7, 5))
            loss, _ = silhouette_loss(pred, gt)
            assert 0.0 <= loss <= 1.0

    def test_gradient_matches_fd(self, rng):
        pred = rng.uniform(0.05, 0.95, (5, 7))
        gt = rng.uniform(0.05, 0.95, (5, 7))
        _, grad = silhouette_loss(pred, gt)
        fd = fd_gradient(lambda p: silhouette_loss(p, gt)[0], pred, h=1e-4)
        assert rel_err(grad, fd) < 1e-3


class TestRgbL1Loss:
    def test_equal_images(self, rng):
        img = rng.random((4, 4, 3))
        loss, grad = rgb_l1_loss(img, img.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)  # sign(0) = 0

    def test_constant_offset(self, rng):
        gt = rng.random((4, 4, 3))
        loss, _ = rgb_l1_loss(gt + 0.1, gt)
        assert loss == pytest.approx(0.1, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            rgb_l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 4)))

    def test_gradient_matches_fd(self, rng):
        pred = rng.random((4, 4, 3))
        gt = rng.random((4, 4, 3))
        # away from ties: L1 is linear, so tiny central differences are exact
        assert np.abs(pred - gt).min() > 1e-4
        _, grad = rgb_l1_loss(pred, gt)
        fd = fd_gradient(lambda p: rgb_l1_loss(p, gt)[0], pred, h=1e-6)
        assert np.abs(grad - fd).max() < 1e-6


def _random_views(rng, n_views=2, shape=(9, 9)):
    preds, gts = [], []
    for _ in range(n_views):
        preds.append(rng.uniform(0.05, 0.95, shape))
        gt = np.zeros(shape)
        gt[2:7, 3:8] = 1.0
        gts.append(gt)
    return preds, gts


class TestGeometryLoss:
    def test_zero_weights(self, rng):
        mesh = jittered_icosphere(rng)
        lap = build_laplacian(mesh)
        preds, gts = _random_views(rng)
        w = GeoLossWeights(0.0, 0.0, 0.0, 0.0)
        total, vgrad, pgrads, terms = geometry_loss(mesh, lap, preds, gts, w)
        assert total == 0.0
        assert np.all(vgrad == 0.0)
        assert all(np.all(g == 0.0) for g in pgrads)

    def test_matches_hand_assembled_sum(self, rng):
        mesh = jittered_icosphere(rng)
        lap = build_laplacian(mesh)
        preds, gts = _random_views(rng, n_views=3)
        w = GeoLossWeights(0.7, 1.3, 0.4, 0.05)
        total, vgrad, pgrads, terms = geometry_loss(mesh, lap, preds, gts, w)
        assert set(terms) == {"silhouette", "laplacian", "edge", "normal"}
        assert sum(terms.values()) == pytest.approx(total, rel=1e-12)

        sil_terms = [silhouette_loss(p, g) for p, g in zip(preds, gts)]
        expected = w.silhouette * sum(v for v, _ in sil_terms) / 3.0
        for term, wt in (
            (laplacian_loss(mesh.vertices, lap), w.laplacian),
            (edge_length_loss(mesh), w.edge),
            (normal_consistency_loss(mesh), w.normal),
        ):
            expected += wt * term[0]
        assert total == pytest.approx(expected, rel=1e-12)

        expected_vgrad = (
            w.laplacian * laplacian_loss(mesh.vertices, lap)[1]
            + w.edge * edge_length_loss(mesh)[1]
            + w.normal * normal_consistency_loss(mesh)[1]
        )
        np.testing.assert_allclose(vgrad, expected_vgrad, rtol=1e-12, atol=1e-15)
        for k, (_, g) in enumerate(sil_terms):
            np.testing.assert_allclose(
                pgrads[k], w.silhouette * g / 3.0, rtol=1e-12, atol=1e-18
            )

    def test_edge_term_isolated(self, rng):
        mesh = jittered_icosphere(rng)
        lap = build_laplacian(mesh)
        _, gts = _random_views(rng)
        preds = [g.copy() for g in gts]  # binary and identical: zero IoU loss
        w = GeoLossWeights(silhouette=1.0, laplacian=0.0, edge=2.0, normal=0.0)
        total, vgrad, _, _ = geometry_loss(mesh, lap, preds, gts, w)
        value, grad = edge_length_loss(mesh)
        assert total == pytest.approx(2.0 * value, rel=1e-12)
        np.testing.assert_allclose(vgrad, 2.0 * grad, rtol=1e-12)

    def test_linear_in_weights(self, rng):
        mesh = jittered_icosphere(rng)
        lap = build_laplacian(mesh)
        preds, gts = _random_views(rng)
        w1 = GeoLossWeights(0.5, 0.8, 0.3, 0.02)
        w2 = GeoLossWeights(1.0, 1.6, 0.6, 0.04)
        t1, g1, p1, _ = geometry_loss(mesh, lap, preds, gts, w1)
        t2, g2, p2, _ = geometry_loss(mesh, lap, preds, gts, w2)
        assert t2 == pytest.approx(2.0 * t1, rel=1e-12)
        np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-12)
        np.testing.assert_allclose(p2[0], 2.0 * p1[0], rtol=1e-12)

    def test_view_mismatch_rejected(self, rng):
        mesh = jittered_icosphere(rng)
        lap = build_laplacian(mesh)
        preds, gts = _random_views(rng)
        with pytest.raises(ConfigError):
            geometry_loss(mesh, lap, preds, gts[:1])
        with pytest.raises(ConfigError):
            geometry_loss(mesh, lap, [], [])

    def test_vertex_gradient_matches_fd(self, rng):
        mesh = jittered_icosphere(rng)
        preds, gts = _random_views(rng)
        w = GeoLossWeights(1.0, 1.0, 1.0, 0.01)

        def value_at(verts):
            m = jittered_icosphere(np.random.default_rng(0))  # container reuse
            m.vertices = verts.copy()
            m.faces = mesh.faces
            lap = build_laplacian(m)
            return geometry_loss(m, lap, preds, gts, w)[0]

        lap = build_laplacian(mesh)
        _, vgrad, _, _ = geometry_loss(mesh, lap, preds, gts, w)
        fd = fd_gradient(value_at, mesh.vertices.copy(), h=1e-5)
        assert rel_err(vgrad, fd, floor=1e-6) < 1e-3


def brute_force_bilateral(theta_d, theta_s, w):
    """Per-texel window evaluation straight from the definition."""
    h, wd, _ = theta_s.shape
    guide = theta_d.mean(axis=2)
    contrib = np.zeros((h, wd))
    for py in range(h):
        for px in range(wd):
            ys = slice(max(0, py - w.radius), min(h, py + w.radius + 1))
            xs = slice(max(0, px - w.radius), min(wd, px + w.radius + 1))
            qy, qx = np.mgrid[ys, xs]
            d2 = (qy - py) ** 2 + (qx - px) ** 2
            dg = guide[py, px] - guide[ys, xs]
            k = np.exp(
                -d2 / (2.0 * w.sigma_spatial**2)
                - dg**2 / (2.0 * w.sigma_albedo**2)
            )
            m = (k[:, :, None] * theta_s[ys, xs]).sum(axis=(0, 1)) / k.sum()
            contrib[py, px] = np.abs(theta_s[py, px] - m).sum()
    return contrib


class TestBilateralReg:
    def test_constant_specular_is_free(self, rng):
        theta_d = rng.random((8, 8, 3))
        theta_s = np.full((8, 8, 3), 0.4)
        loss, g_s, g_d = bilateral_specular_reg(theta_d, theta_s)
        assert loss < 1e-12  # mean-of-constant residuals are roundoff dust
        assert np.all(g_s == 0.0)
        assert np.all(g_d == 0.0)

    def test_matches_brute_force(self, rng):
        theta_d = rng.random((8, 8, 3))
        theta_s = rng.random((8, 8, 3))
        w = RefLossWeights()
        loss, _, _ = bilateral_specular_reg(theta_d, theta_s, w)
        assert loss == pytest.approx(
            brute_force_bilateral(theta_d, theta_s, w).sum(), rel=1e-12
        )

    def test_step_edge_cost_scales_with_edge_length(self):
        # constant diffuse leaves a plain spatial kernel; a vertical specular
        # step then costs per crossing row, so doubling the height doubles it
        w = RefLossWeights(sigma_spatial=4.0)
        losses = []
        for h in (8, 16):
            theta_d = np.full((h, 8, 3), 0.5)
            theta_s = np.zeros((h, 8, 3))
            theta_s[:, 4:] = 1.0
            loss, _, _ = bilateral_specular_reg(theta_d, theta_s, w)
            losses.append(loss)
        assert losses[0] > 0.1
        assert losses[1] == pytest.approx(2.0 * losses[0], rel=1e-9)

    def test_albedo_edge_severs_smoothing(self):
        # same specular step, but an aligned diffuse step with a tiny albedo
        # bandwidth: cross-edge kernel weight vanishes and the cost with it
        theta_s = np.zeros((8, 8, 3))
        theta_s[:, 4:] = 1.0
        theta_d = np.full((8, 8, 3), 0.2)
        theta_d[:, 4:] = 0.8
        w = RefLossWeights(sigma_albedo=1e-3)
        loss, _, _ = bilateral_specular_reg(theta_d, theta_s, w)
        assert loss < 1e-12

    def test_translation_invariant_in_the_interior(self, rng):
        # periodic pattern shifted by one texel: interior windows see the
        # same neighborhood, so per-texel costs just translate
        tile_d = rng.random((4, 4, 3))
        tile_s = rng.random((4, 4, 3))
        theta_d = np.tile(tile_d, (4, 4, 1))
        theta_s = np.tile(tile_s, (4, 4, 1))
        w = RefLossWeights()
        base = brute_force_bilateral(theta_d, theta_s, w)
        rolled = brute_force_bilateral(
            np.roll(theta_d, (1, 1), axis=(0, 1)),
            np.roll(theta_s, (1, 1), axis=(0, 1)),
            w,
        )
        r = w.radius
        inner = np.s_[r + 1 : -r - 1, r + 1 : -r - 1]
        np.testing.assert_allclose(
            np.roll(base, (1, 1), axis=(0, 1))[inner], rolled[inner], rtol=1e-12
        )
        # and the implementation agrees with the oracle on both layouts
        impl, _, _ = bilateral_specular_reg(theta_d, theta_s, w)
        assert impl == pytest.approx(base.sum(), rel=1e-12)

    def test_resolution_mismatch_rejected(self, rng):
        with pytest.raises(ConfigError):
            bilateral_specular_reg(rng.random((8, 8, 3)), rng.random((4, 4, 3)))

    def test_bad_weights_rejected(self):
        with pytest.raises(ConfigError):
            RefLossWeights(sigma_spatial=0.0).validate()
        with pytest.raises(ConfigError):
            RefLossWeights(radius=-1).validate()
        with pytest.raises(ConfigError):
            RefLossWeights(rgb=-0.1).validate()

    def test_gradients_match_fd(self, rng):
        theta_d = rng.uniform(0.1, 0.9, (6, 6, 3))
        theta_s = rng.uniform(0.1, 0.9, (6, 6, 3))
        w = RefLossWeights()
        _, g_s, g_d = bilateral_specular_reg(theta_d, theta_s, w)
        fd_s = fd_gradient(
            lambda t: bilateral_specular_reg(theta_d, t, w)[0], theta_s.copy(), h=1e-4
        )
        fd_d = fd_gradient(
            lambda t: bilateral_specular_reg(t, theta_s, w)[0], theta_d.copy(), h=1e-4
        )
        assert rel_err(g_s, fd_s, floor=1e-4) < 1e-3
        assert rel_err(g_d, fd_d, floor=1e-4) < 1e-3


class TestReflectanceLoss:
    def test_matches_hand_assembled_sum(self, rng):
        pred = rng.random((8, 8, 3))
        gt = rng.random((8, 8, 3))
        theta_d = rng.random((6, 6, 3))
        theta_s = rng.random((6, 6, 3))
        w = RefLossWeights(rgb=0.3, reg=1.7)
        total, grads, terms = reflectance_loss(pred, gt, theta_d, theta_s, w)
        l_rgb, g_img = rgb_l1_loss(pred, gt)
        l_reg, g_s, g_d = bilateral_specular_reg(theta_d, theta_s, w)
        assert total == pytest.approx(0.3 * l_rgb + 1.7 * l_reg, rel=1e-12)
        assert terms["rgb"] == pytest.approx(0.3 * l_rgb, rel=1e-12)
        assert terms["reg"] == pytest.approx(1.7 * l_reg, rel=1e-12)
        np.testing.assert_allclose(grads["image"], 0.3 * g_img, rtol=1e-12)
        np.testing.assert_allclose(grads["specular"], 1.7 * g_s, rtol=1e-12)
        np.testing.assert_allclose(grads["diffuse"], 1.7 * g_d, rtol=1e-12)

    def test_trivial_zeros(self, rng):
        img = rng.random((4, 4, 3))
        theta_d = rng.random((4, 4, 3))
        w = RefLossWeights(rgb=0.1, reg=0.0)
        total, _, _ = reflectance_loss(img, img.copy(), theta_d, rng.random((4, 4, 3)), w)
        assert total == 0.0
        w = RefLossWeights(rgb=0.0, reg=1.0)
        total, _, _ = reflectance_loss(img, rng.random((4, 4, 3)), theta_d,
                                    np.full((4, 4, 3), 0.3), w)
        assert total < 1e-12

    def test_linear_in_weights(self, rng):
        pred = rng.random((5, 5, 3))
        gt = rng.random((5, 5, 3))
        theta_d = rng.random((5, 5, 3))
        theta_s = rng.random((5, 5, 3))
        t1, _, _ = reflectance_loss(pred, gt, theta_d, theta_s, RefLossWeights(rgb=0.1, reg=1.0))
        t2, _, _ = reflectance_loss(pred, gt, theta_d, theta_s, RefLossWeights(rgb=0.2, reg=2.0))
        assert t2 == pytest.approx(2.0 * t1, rel=1e-12)
