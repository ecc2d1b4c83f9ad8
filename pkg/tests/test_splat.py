import numpy as np
import pytest

from gpdeform.scene import IDENTITY_6D, Primitives, generate_scene, random_rotations
from gpdeform.splat import (
    Camera,
    confidence,
    orbit_cameras,
    project,
    rasterize,
    read_pgm16,
    read_ppm,
    render,
    render_scene,
    render_uncertainty,
    write_pgm16,
    write_ppm,
)

EYE = np.eye(3)


def cam(**kw):
    return Camera(origin=(0.0, 0.0, -5.0), width=kw.pop("width", 32), height=kw.pop("height", 32),
                  scale=kw.pop("scale", 1.0), **kw)


def random_scene(rng, n=12, c=None):
    c = c or cam(width=24, height=20, scale=0.1)
    pos = rng.uniform(-1, 1, (n, 3))
    return pos, random_rotations(rng, n), rng.uniform(0.05, 0.3, (n, 3)), rng.uniform(0, 1, n), rng.uniform(0, 1, (n, 3)), c


class TestProject:
    def test_isotropic(self):
        s = 1.5
        p = project(np.zeros((1, 3)), EYE[None], np.full((1, 3), s), cam())
        np.testing.assert_allclose(p.cov2d[0], np.diag([s**2, s**2]), atol=1e-12)

    def test_origin_maps_to_center(self):
        c = cam(width=33, height=21)
        p = project(np.array([[0.0, 0.0, 0.0]]), EYE[None], np.ones((1, 3)), c)
        np.testing.assert_allclose(p.mean2d[0], [16.0, 10.0])
        assert p.depth[0] == pytest.approx(5.0)

    def test_rotated_anisotropic(self):
        rng = np.random.default_rng(0)
        R = random_rotations(rng, 1)[0]
        s = np.array([3.0, 1.0, 2.0])
        c = orbit_cameras(3, scale=0.5)[0]
        p = project(np.zeros((1, 3)), R[None], s[None], c)
        sigma = R @ np.diag(s**2) @ R.T
        B = c.B
        block = (B.T @ sigma @ B)[:2, :2] / 0.25
        np.testing.assert_allclose(np.linalg.eigvalsh(p.cov2d[0]), np.linalg.eigvalsh(block), rtol=1e-10)

    def test_floor(self):
        p = project(np.zeros((1, 3)), EYE[None], np.full((1, 3), 1e-4), cam())
        np.testing.assert_allclose(np.linalg.eigvalsh(p.cov2d[0]), [0.1, 0.1])

    def test_culled(self):
        p = project(np.array([[0.0, 0.0, -10.0]]), EYE[None], np.ones((1, 3)), cam())
        assert p.culled[0]


def splats(positions, opac, colors=None, s=0.3):
    n = len(positions)
    colors = np.tile([1.0, 0.5, 0.25], (n, 1)) if colors is None else colors
    return np.asarray(positions, float), np.repeat(EYE[None], n, 0), np.full((n, 3), s), np.asarray(opac, float), colors


class TestRender:
    def test_single_opaque(self):
        out = rasterize(*splats([[0, 0, 0]], [1.0]), cam(width=9, height=9))
        assert out.weight_sum()[4, 4] == pytest.approx(1.0)
        np.testing.assert_allclose(out.color[4, 4], [1.0, 0.5, 0.25], atol=1e-3)

    def test_full_occlusion(self):
        out = rasterize(*splats([[0, 0, 1], [0, 0, 0]], [0.5, 1.0]), cam(width=9, height=9))
        # primitive 1 is in front (smaller depth) and opaque
        assert out.weight_image(0)[4, 4] == 0.0

    def test_three_translucent(self):
        out = rasterize(*splats([[0, 0, 0], [0, 0, 1], [0, 0, 2]], [0.5, 0.5, 0.5]), cam(width=9, height=9))
        w = [out.weight_image(k)[4, 4] for k in range(3)]
        np.testing.assert_allclose(w, [0.5, 0.25, 0.125], atol=1e-15)

    def test_weight_sum_bounded_equals_alpha(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            out = rasterize(*random_scene(rng))
            ws = out.weight_sum()
            assert ws.max() <= 1 + 1e-6 and out.w.min() >= 0
            np.testing.assert_allclose(ws, out.alpha, atol=1e-12)

    def test_order_invariant(self):
        *args, c = random_scene(np.random.default_rng(1))
        perm = np.random.default_rng(2).permutation(12)
        a = rasterize(*args, c)
        b = rasterize(*[x[perm] for x in args], c)
        np.testing.assert_allclose(a.color, b.color, atol=1e-12)
        np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-12)

    def test_background_exact(self):
        c = cam(width=16, height=16, background=(0.1, 0.2, 0.3))
        out = rasterize(*splats([[-5, -5, 0]], [1.0]), c)
        empty = out.weight_sum() == 0
        assert empty.any()
        assert np.all(out.color[empty] == np.array([0.1, 0.2, 0.3]))

    def test_bit_stable(self):
        *args, c = random_scene(np.random.default_rng(3))
        a, b = rasterize(*args, c), rasterize(*args, c)
        assert np.array_equal(a.color, b.color) and np.array_equal(a.w, b.w)

    def test_render_respects_visibility(self):
        sc = generate_scene(kind="windmill", n=16, frames=10, occlusion={"fraction": 0.25, "start": 2, "end": 5})
        out = render_scene(sc, 3, Camera())
        hidden = np.flatnonzero(~sc.visible[:, 3])
        assert out.primitive_weights()[hidden].sum() == 0.0


class TestConfidence:
    def test_culled_zero(self):
        pos, R, s, o, col = splats([[0, 0, 0], [0, 0, -20]], [1.0, 1.0])
        out = rasterize(pos, R, s, o, col, cam())
        C = confidence([out])
        assert C[1] == 0.0 and C[0] > 0

    def test_matches_independent_pass(self):
        rng = np.random.default_rng(4)
        outs = [rasterize(*random_scene(rng)) for _ in range(3)]
        C = confidence(outs)
        manual = np.zeros(12)
        for out in outs:
            for k in range(12):
                manual[k] += out.weight_image(k).sum()
        np.testing.assert_allclose(C, manual, rtol=1e-12)

    def test_hidden_twins_lower(self):
        sc = generate_scene(kind="windmill", n=32, frames=20, occlusion={"fraction": 0.25, "start": 5, "end": 15})
        c = Camera()
        C_occ = confidence([render_scene(sc, f, c) for f in range(20)])
        C_vis = confidence([render_scene(sc, f, c, respect_visibility=False) for f in range(20)])
        hidden = np.array(sc.metadata["hidden"])
        assert np.all(C_occ[hidden] < C_vis[hidden])

    def test_empty(self):
        with pytest.raises(ValueError):
            confidence([])


class TestUncertaintyMap:
    def test_zero(self):
        out = rasterize(*random_scene(np.random.default_rng(5)))
        assert np.all(render_uncertainty(out, np.zeros(12)) == 0)

    def test_single_primitive(self):
        out = rasterize(*splats([[0, 0, 0]], [1.0]), cam(width=9, height=9))
        np.testing.assert_allclose(render_uncertainty(out, [2.5]), 2.5 * out.weight_image(0), atol=1e-15)

    def test_two_primitives(self):
        out = rasterize(*splats([[0, 0, 0], [0.5, 0.2, 1]], [0.7, 0.8]), cam(width=9, height=9))
        expected = out.weight_image(0) + 2 * out.weight_image(1)
        np.testing.assert_allclose(render_uncertainty(out, [1.0, 2.0]), expected, atol=1e-15)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        out = rasterize(*random_scene(rng))
        U, V = rng.uniform(0, 1, 12), rng.uniform(0, 1, 12)
        a, b = 0.3, 1.7
        lhs = render_uncertainty(out, a * U + b * V)
        rhs = a * render_uncertainty(out, U) + b * render_uncertainty(out, V)
        assert np.abs(lhs - rhs).max() < 1e-9


class TestFiles:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).uniform(0, 1, (10, 12, 3))
        write_ppm(tmp_path / "a.ppm", img)
        back = read_ppm(tmp_path / "a.ppm")
        assert back.shape == img.shape and np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(1).uniform(0, 3, (10, 12))
        scale = write_pgm16(tmp_path / "u.pgm", img)
        assert scale == img.max()
        back = read_pgm16(tmp_path / "u.pgm")
        assert np.abs(back - img).max() <= 0.5 / 65535 * scale + 1e-12

    def test_render_from_primitives(self):
        prims = Primitives(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), 0.1),
                           np.array([1.0]), np.array([[1.0, 1.0, 1.0]]))
        out = render(prims, np.r_[0.0, 0.0, 0.0, IDENTITY_6D][None], Camera())
        assert out.alpha.max() > 0.9
