import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvp3d import autodiff as ad
from mvp3d.camgeom import (
    BehindCameraError,
    CameraParams,
    DegenerateGeometryError,
    bilinear_sample,
    bilinear_sample_batch,
    coord_field,
    look_at,
    project,
    project_node,
    ray_field,
    triangulate_dlt,
)
from conftest import fd_check


def identity_cam(**kw):
    return CameraParams(**{"fx": 100.0, "fy": 100.0, "cx": 50.0, "cy": 50.0, "width": 100, "height": 100, **kw})


def random_cam(rng, target=(0.0, 0.0, 1.0)):
    ang = rng.uniform(0, 2 * np.pi)
    r = rng.uniform(4, 8)
    eye = np.array([r * np.cos(ang), r * np.sin(ang), rng.uniform(0.5, 3.5)])
    f = rng.uniform(200, 800)
    return look_at(eye, target, f, f * rng.uniform(0.9, 1.1), rng.uniform(300, 340), rng.uniform(220, 260), 640, 480)


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


# ---------------------------------------------------------------- camera params


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValueError):
        CameraParams(1, 1, 0, 0, R=np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        CameraParams(1, 1, 0, 0, R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        CameraParams(0, 1, 0, 0)


def test_camera_vector_roundtrip(rng):
    cam = random_cam(rng)
    back = CameraParams.from_vector(cam.as_vector())
    assert back.as_vector().tobytes() == cam.as_vector().tobytes()


# ---------------------------------------------------------------- project


def test_project_optical_axis():
    np.testing.assert_array_equal(project([0, 0, 2.0], identity_cam()), [50, 50])


def test_project_offset_point():
    np.testing.assert_array_equal(project([1.0, 0, 2.0], identity_cam()), [100, 50])


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project([0, 0, -1.0], identity_cam())
    with pytest.raises(BehindCameraError):
        project([0, 0, 1e-7], identity_cam())


def test_project_triangulate_roundtrip(rng):
    for _ in range(50):
        y = rng.uniform([-1, -1, 0], [1, 1, 2])
        cams = [random_cam(rng) for _ in range(3)]
        rec = triangulate_dlt([(project(y, c), c) for c in cams])
        assert np.linalg.norm(rec - y) < 1e-6


def test_project_node_grad(rng):
    cam = random_cam(rng)
    y = rng.uniform([-1, -1, 0], [1, 1, 2], size=(4, 3))
    fd_check(lambda n: ad.sum_(ad.mul(project_node(n, cam)[0], 1e-3)), y)
    uv, front = project_node(ad.Node(y), cam)
    np.testing.assert_allclose(uv.value, project(y, cam), rtol=1e-12)
    assert front.all()


# ---------------------------------------------------------------- ray field


def test_ray_field_principal_pixel():
    rays = ray_field(identity_cam(cx=50.5, cy=50.5))
    np.testing.assert_array_equal(rays[:, 50, 50], [0, 0, 1])


def test_ray_field_unit_norm(rng):
    rays = ray_field(identity_cam())
    assert np.max(np.abs(np.linalg.norm(rays, axis=0) - 1)) < 1e-9
    rays = ray_field(random_cam(rng))
    assert np.max(np.abs(np.linalg.norm(rays, axis=0) - 1)) < 1e-9


def test_ray_field_rotated_camera():
    R = rot_z(90)
    rays = ray_field(identity_cam(cx=50.5, cy=50.5, R=R))
    np.testing.assert_allclose(rays[:, 50, 50], R.T @ [0, 0, 1.0], atol=1e-15)


def test_ray_through_projection_hits_point(rng):
    for _ in range(100):
        cam = random_cam(rng)
        y = rng.uniform([-1, -1, 0], [1, 1, 2])
        u, v = project(y, cam)
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            continue
        d = ray_field(cam)[:, int(v), int(u)]
        to_point = y - cam.center
        # distance from y to the pixel ray, in pixels at that depth
        off = np.linalg.norm(to_point - d * (to_point @ d))
        depth = cam.to_camera(y)[2]
        assert off * cam.fx / depth <= 1.0


def test_coord_field_range():
    c = coord_field(4, 2)
    assert c.shape == (2, 2, 4)
    assert c.min() > 0 and c.max() < 1


# ---------------------------------------------------------------- bilinear


def test_bilinear_pixel_center_identity(rng):
    Z = rng.normal(size=(3, 5, 6))
    out = bilinear_sample(Z, np.array([2.5, 3.5])).value
    np.testing.assert_array_equal(out, Z[:, 3, 2])


def test_bilinear_common_corner():
    Z = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert bilinear_sample(Z, np.array([1.0, 1.0])).value.item() == 2.5


def test_bilinear_out_of_bounds_is_zero(rng):
    Z = rng.normal(size=(2, 4, 4))
    np.testing.assert_array_equal(bilinear_sample(Z, np.array([-3.0, 1.0])).value, 0)
    np.testing.assert_array_equal(bilinear_sample(Z, np.array([10.0, 10.0])).value, 0)
    # half outside: only in-bounds neighbors contribute
    half = bilinear_sample(Z, np.array([0.0, 0.5])).value
    np.testing.assert_allclose(half, 0.5 * Z[:, 0, 0])


def test_bilinear_grads(rng):
    Z = rng.uniform(-2, 2, (2, 5, 5))
    p = rng.uniform(0.7, 4.3, size=(6, 2))
    # keep samples away from the integer+0.5 grid where the map is only piecewise smooth
    p = np.where(np.abs((p - 0.5) - np.round(p - 0.5)) < 0.05, p + 0.1, p)
    w = rng.uniform(0.5, 1.5, size=(6, 2))
    fd_check(lambda z, q: ad.sum_(ad.mul(bilinear_sample(z, q), w)), Z, p)


def test_bilinear_batch_matches_single(rng):
    Z = rng.normal(size=(2, 3, 6, 5))
    pts = rng.uniform(-1, 7, size=(2, 4, 2))
    out = bilinear_sample_batch(Z, pts).value
    for b in range(2):
        np.testing.assert_allclose(out[b], bilinear_sample(Z[b], pts[b]).value, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 6.0), st.floats(0.0, 6.0), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.integers(0, 999))
def test_bilinear_lipschitz(x, y, dx, dy, seed):
    Z = np.random.default_rng(seed).normal(size=(1, 6, 6))
    Zp = np.pad(Z[0], 1)
    lip = np.abs(np.diff(Zp, axis=0)).max() + np.abs(np.diff(Zp, axis=1)).max()
    a = bilinear_sample(Z, np.array([x, y])).value
    b = bilinear_sample(Z, np.array([x + dx, y + dy])).value
    assert np.abs(a - b).max() <= lip * (abs(dx) + abs(dy)) + 1e-12


# ---------------------------------------------------------------- triangulation


def test_triangulate_two_views(rng):
    y = np.array([0.3, -0.2, 1.1])
    cams = [random_cam(rng) for _ in range(2)]
    assert np.linalg.norm(triangulate_dlt([(project(y, c), c) for c in cams]) - y) < 1e-6


def test_triangulate_five_views_exact(rng):
    y = np.array([-0.7, 0.4, 0.9])
    cams = [random_cam(rng) for _ in range(5)]
    np.testing.assert_allclose(triangulate_dlt([(project(y, c), c) for c in cams]), y, atol=1e-9)


def test_triangulate_identical_cameras_degenerate(rng):
    cam = random_cam(rng)
    uv = project([0.1, 0.2, 1.0], cam)
    with pytest.raises(DegenerateGeometryError):
        triangulate_dlt([(uv, cam), (uv, cam)])


def test_triangulate_needs_two_views(rng):
    cam = random_cam(rng)
    with pytest.raises(DegenerateGeometryError):
        triangulate_dlt([(np.zeros(2), cam)])
