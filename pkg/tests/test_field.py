import json

import numpy as np
import pytest

from dvckit.field import (
    DisplacementField,
    GridSpec,
    Status,
    UnrecoverableFieldError,
    accumulate,
    compose,
    densify,
    densify_scalar,
    detect_outliers,
    equivalent_strain,
    load_field,
    repair_field,
    save_field,
    save_strain,
    save_vtk,
    strain_from_field,
)
from dvckit.synth import AnalyticField, evaluate_field


def affine_field(grid, B, t=(0, 0, 0)):
    B = np.asarray(B, dtype=float)
    return DisplacementField.from_function(grid, lambda x: np.asarray(t, float) + x @ B.T)


def analytic(grid, fld):
    return DisplacementField.from_function(grid, lambda x: evaluate_field(fld, x)[0])


# ---------------------------------------------------------------- grid


def test_grid_covering_and_json():
    g = GridSpec.covering((64, 64, 64), 10, 10)
    assert g.fits((64, 64, 64), 10)
    pos = g.node_positions()
    assert pos.shape == g.shape + (3,)
    assert pos.min() >= 10 and pos.max() <= 53
    assert GridSpec.from_json(json.loads(json.dumps(g.to_json()))) == g
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), 0, (2, 2, 2))


def test_status_labels_round_trip():
    for s in Status:
        assert Status.from_label(s.label) is s
    assert Status.REPAIRED.label == "Repaired"


# ---------------------------------------------------------------- outliers


def test_single_spike_flagged_and_restored():
    grid = GridSpec((0, 0, 0), 8, (5, 5, 5))
    f = DisplacementField.uniform(grid, (1.0, -2.0, 0.5))
    assert not detect_outliers(f).any()
    disp = f.disp.copy()
    disp[2, 3, 1, 0] += 50.0
    spiked = f.with_values(disp=disp)
    flags = detect_outliers(spiked, eps0=0.1, thresh=2.0)
    assert flags.sum() == 1 and flags[2, 3, 1]
    fixed = repair_field(spiked, flags)
    assert np.array_equal(fixed.disp, f.disp)
    assert fixed.status[2, 3, 1] == Status.REPAIRED
    assert np.count_nonzero(fixed.status == Status.REPAIRED) == 1


def test_smooth_sinusoid_no_false_positives():
    grid = GridSpec((0, 0, 0), 8, (10, 6, 6))
    f = analytic(grid, AnalyticField.sinusoid((3, 0, 0), 64))
    assert not detect_outliers(f, eps0=0.1, thresh=2.0).any()
    # the plain neighbour median mistakes curvature at the extrema for outliers
    assert detect_outliers(f, eps0=0.1, thresh=2.0, method="median").any()


def test_quadratic_field_never_flagged(rng):
    grid = GridSpec((0, 0, 0), 6, (6, 5, 7))
    x = grid.node_positions() / 6.0
    Q = rng.normal(scale=0.3, size=(3, 3, 3))
    disp = np.einsum("...i,kij,...j->...k", x, Q, x) + x @ rng.normal(size=(3, 3))
    f = DisplacementField.uniform(grid).with_values(disp=disp)
    assert not detect_outliers(f).any()


def test_outlier_cluster_found_without_collateral():
    grid = GridSpec((0, 0, 0), 8, (9, 9, 9))
    f = analytic(grid, AnalyticField.sinusoid((2, 0, 0), 64))
    bad = np.random.default_rng(7).random(grid.shape) < 0.1
    disp = f.disp.copy()
    disp[bad] += 8.0
    flags = detect_outliers(f.with_values(disp=disp))
    assert np.array_equal(flags, bad)
    fixed = repair_field(f.with_values(disp=disp), flags)
    assert np.max(np.abs(fixed.disp - f.disp)) < 0.1
    assert not detect_outliers(fixed).any()  # repair is idempotent


def test_unknown_method_rejected():
    f = DisplacementField.uniform(GridSpec((0, 0, 0), 8, (3, 3, 3)))
    with pytest.raises(ValueError, match="unknown"):
        detect_outliers(f, method="mean")


def test_untrusted_status_always_flagged():
    grid = GridSpec((0, 0, 0), 8, (4, 4, 4))
    f = DisplacementField.uniform(grid)
    status = f.status.copy()
    status[1, 1, 1] = Status.LOW_CORRELATION
    assert detect_outliers(f.with_values(status=status))[1, 1, 1]


def test_repair_no_flags_is_identity():
    grid = GridSpec((0, 0, 0), 8, (4, 4, 4))
    f = affine_field(grid, np.eye(3) * 0.01)
    out = repair_field(f, np.zeros(grid.shape, bool))
    assert out.disp.tobytes() == f.disp.tobytes()


def test_repair_corner_block_of_linear_field():
    grid = GridSpec((0, 0, 0), 8, (6, 6, 6))
    B = np.array([[0.02, 0.01, 0.0], [0.0, -0.01, 0.03], [0.01, 0.0, 0.02]])
    f = affine_field(grid, B)
    flags = np.zeros(grid.shape, bool)
    flags[:2, :2, :2] = True
    bad = f.disp.copy()
    bad[flags] = 99.0
    out = repair_field(f.with_values(disp=bad), flags)
    tol = grid.step * np.abs(B).max() * np.sqrt(3)
    assert np.max(np.abs(out.disp - f.disp)) <= tol
    # the neighbour-median repair is also within the bound
    med = repair_field(f.with_values(disp=bad), flags, method="median")
    assert np.max(np.abs(med.disp - f.disp)) <= tol
    assert np.all(out.status[flags] == Status.REPAIRED)


def test_repair_all_flagged_raises():
    grid = GridSpec((0, 0, 0), 8, (3, 3, 3))
    with pytest.raises(UnrecoverableFieldError):
        repair_field(DisplacementField.uniform(grid), np.ones(grid.shape, bool))


# ---------------------------------------------------------------- densify


def test_densify_exact_at_nodes(rng):
    grid = GridSpec((3, 5, 7), 6, (5, 4, 6))
    f = DisplacementField.uniform(grid).with_values(disp=rng.normal(size=grid.shape + (3,)))
    dense = densify(f)
    pos = grid.node_positions().reshape(-1, 3)
    assert np.max(np.abs(dense(pos) - f.disp.reshape(-1, 3))) < 1e-12


def test_densify_linear_reproduced(rng):
    grid = GridSpec((0, 0, 0), 7, (5, 5, 5))
    B = rng.normal(scale=0.02, size=(3, 3))
    dense = densify(affine_field(grid, B, (1, 2, 3)))
    pts = rng.uniform(0, 28, (200, 3))
    assert np.max(np.abs(dense(pts) - (np.array([1, 2, 3]) + pts @ B.T))) < 1e-9
    lat = dense.lattice(np.arange(0, 29, 4), np.arange(0, 29, 7), np.arange(0, 29, 14))
    zz, yy, xx = np.meshgrid(np.arange(0, 29, 14), np.arange(0, 29, 7), np.arange(0, 29, 4), indexing="ij")
    want = np.array([1, 2, 3]) + np.stack([xx, yy, zz], -1) @ B.T
    assert np.max(np.abs(lat - want)) < 1e-9


def test_densify_sinusoid_off_grid(rng):
    grid = GridSpec((0, 0, 0), 10, (11, 5, 5))
    fld = AnalyticField.sinusoid((3, 0, 0), 64)
    dense = densify(analytic(grid, fld))
    pts = rng.uniform(0, 100, (2000, 3))
    pts[:, 1:] = rng.uniform(0, 40, (2000, 2))
    err = np.abs(dense(pts)[:, 0] - evaluate_field(fld, pts)[0][:, 0])
    interior = (pts[:, 0] >= 10) & (pts[:, 0] <= 90)
    # not-a-knot end intervals are less accurate than the interior
    assert err[interior].max() < 0.05
    assert err.max() < 0.08


def test_densify_constant_and_clamped():
    grid = GridSpec((10, 10, 10), 5, (4, 4, 4))
    dense = densify(DisplacementField.uniform(grid, (0.7, -0.2, 1.1)))
    far = np.array([[0, 0, 0], [60, 3, 40], [25, 25, 25]], float)
    assert np.allclose(dense(far), [0.7, -0.2, 1.1], atol=1e-12)
    s = densify_scalar(grid, np.full(grid.shape, 4.0))
    assert s((12.5, 40, 0)) == pytest.approx(4.0, abs=1e-12)


def test_densify_preconditions():
    with pytest.raises(ValueError, match="4 nodes"):
        densify(DisplacementField.uniform(GridSpec((0, 0, 0), 5, (3, 4, 4))))
    grid = GridSpec((0, 0, 0), 5, (4, 4, 4))
    f = DisplacementField.uniform(grid)
    status = f.status.copy()
    status[0, 0, 0] = Status.DIVERGED
    with pytest.raises(ValueError, match="repaired"):
        densify(f.with_values(status=status))


# ---------------------------------------------------------------- compose


def test_compose_identity_and_translations():
    grid = GridSpec((0, 0, 0), 8, (4, 4, 4))
    f = affine_field(grid, np.eye(3) * 0.01, (0.3, 0.2, 0.1))
    same = compose(f, DisplacementField.uniform(grid))
    assert np.allclose(same.disp, f.disp, atol=1e-12)
    tt = compose(DisplacementField.uniform(grid, (1, 2, 3)), DisplacementField.uniform(grid, (4, 5, 6)))
    assert np.allclose(tt.disp, (5, 7, 9), atol=1e-12)


def test_compose_affine_oracle():
    grid = GridSpec((0, 0, 0), 8, (7, 7, 7))
    A1 = np.array([[0.01, 0.02, 0.0], [0.0, -0.01, 0.01], [0.02, 0.0, 0.01]])
    A2 = np.array([[-0.02, 0.0, 0.01], [0.01, 0.02, 0.0], [0.0, 0.01, -0.01]])
    t1, t2 = np.array([0.5, -0.4, 0.3]), np.array([-0.2, 0.1, 0.4])
    out = compose(affine_field(grid, A1, t1), affine_field(grid, A2, t2))
    x = grid.node_positions()
    d1 = t1 + x @ A1.T
    want = d1 + t2 + (x + d1) @ A2.T
    y = x + d1
    inside = np.all((y >= 0) & (y <= 48), axis=-1)
    assert inside.sum() > 100
    assert np.max(np.abs(out.disp[inside] - want[inside])) < 1e-6


def test_compose_status_weakest_and_grid_mismatch():
    grid = GridSpec((0, 0, 0), 8, (4, 4, 4))
    a = DisplacementField.uniform(grid)
    st = a.status.copy()
    st[1, 1, 1] = Status.REPAIRED
    out = compose(a, a.with_values(status=st))
    assert out.status[1, 1, 1] == Status.REPAIRED
    with pytest.raises(ValueError, match="same grid"):
        compose(a, DisplacementField.uniform(GridSpec((0, 0, 0), 4, (4, 4, 4))))


def test_accumulate_cases():
    grid = GridSpec((0, 0, 0), 8, (5, 5, 5))
    one = DisplacementField.uniform(grid, (1, 0, 0))
    assert accumulate([one]) is one
    zero = accumulate([DisplacementField.uniform(grid)] * 3)
    assert np.all(zero.disp == 0)
    with pytest.raises(ValueError):
        accumulate([])


def test_accumulate_three_shears():
    # each increment is a shear in y driven by x, expressed in its starting configuration
    grid = GridSpec((0, 0, 0), 6, (13, 9, 5))
    shears = [AnalyticField.sinusoid((0, a, 0), 48, phase=ph) for a, ph in ((0.8, 0.0), (0.6, 1.0), (0.7, 2.0))]
    incs = [analytic(grid, s) for s in shears]
    total = accumulate(incs)
    x = grid.node_positions().reshape(-1, 3)
    cur = x.copy()
    for s in shears:
        cur = cur + evaluate_field(s, cur)[0]
    want = (cur - x).reshape(total.disp.shape)
    inside = np.all((cur >= 0) & (cur <= grid.node_positions().max(axis=(0, 1, 2))), axis=-1)
    inside = inside.reshape(grid.shape)
    assert inside.sum() > 200
    assert np.max(np.abs(total.disp[inside] - want[inside])) < 0.1


# ---------------------------------------------------------------- strain


def test_strain_uniaxial_and_rotation():
    grid = GridSpec((0, 0, 0), 5, (4, 4, 4))
    s = strain_from_field(affine_field(grid, [[0.01, 0, 0], [0, 0, 0], [0, 0, 0]]))
    assert np.allclose(s.components[..., 0], 0.01, atol=1e-12)
    assert np.allclose(s.components[..., 1:], 0.0, atol=1e-12)
    th = 0.01
    rot = strain_from_field(affine_field(grid, [[0, -th, 0], [th, 0, 0], [0, 0, 0]]))
    assert np.max(np.abs(rot.components)) < 1e-12
    assert np.max(rot.equivalent) < 1e-12


def test_strain_sinusoid_derivative():
    grid = GridSpec((0, 0, 0), 8, (17, 4, 4))
    fld = AnalyticField.sinusoid((0.3, 0, 0), 64)  # period = 8 steps
    s = strain_from_field(analytic(grid, fld), window=1)
    _, g = evaluate_field(fld, grid.node_positions().reshape(-1, 3))
    ex = g[:, 0, 0].reshape(grid.shape)
    inner = (slice(None), slice(None), slice(1, -1))
    assert np.max(np.abs(s.components[..., 0][inner] - ex[inner])) < 5e-3


@pytest.mark.parametrize("window", [1, 2])
def test_strain_affine_exact_any_window(rng, window):
    grid = GridSpec((0, 0, 0), 4, (5, 5, 5))
    B = rng.normal(scale=0.05, size=(3, 3))
    s = strain_from_field(affine_field(grid, B, (1, 1, 1)), window=window)
    sym = 0.5 * (B + B.T)
    want = [sym[0, 0], sym[1, 1], sym[2, 2], sym[0, 1], sym[1, 2], sym[2, 0]]
    assert np.max(np.abs(s.components - want)) < 1e-10
    assert np.max(np.abs(s.equivalent - equivalent_strain(s.components))) < 1e-12


def test_strain_errors():
    grid = GridSpec((0, 0, 0), 4, (1, 3, 3))
    with pytest.raises(ValueError, match="degenerate"):
        strain_from_field(DisplacementField.uniform(grid))
    with pytest.raises(ValueError):
        strain_from_field(DisplacementField.uniform(GridSpec((0, 0, 0), 4, (3, 3, 3))), window=0)


def test_equivalent_strain_values():
    assert equivalent_strain([0.1, 0.1, 0.1, 0, 0, 0]) == pytest.approx(0.0, abs=1e-15)
    assert equivalent_strain([0, 0, 0.09, 0, 0, 0]) == pytest.approx(0.06, abs=1e-15)
    assert equivalent_strain([0, 0, 0, 0.15, 0, 0]) == pytest.approx(2 * 0.15 / np.sqrt(3), abs=1e-15)


# ---------------------------------------------------------------- files


def test_field_csv_round_trip(tmp_path, rng):
    grid = GridSpec((2, 3, 4), 5, (3, 4, 2))
    f = DisplacementField.uniform(grid).with_values(disp=rng.normal(size=grid.shape + (3,)))
    st = f.status.copy()
    st[0, 1, 1] = Status.OUT_OF_BOUNDS
    f = f.with_values(status=st)
    save_field(f, tmp_path / "f.csv", meta={"note": "x"})
    back = load_field(tmp_path / "f.csv")
    assert back.grid == grid
    assert back.disp.tobytes() == f.disp.tobytes()
    assert np.array_equal(back.status, f.status)
    assert back.meta["note"] == "x"
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "ix,iy,iz,x,y,z,u,v,w,zncc,status,iters"


def test_strain_and_vtk_files(tmp_path):
    grid = GridSpec((0, 0, 0), 4, (3, 3, 3))
    f = affine_field(grid, np.eye(3) * 0.01)
    s = strain_from_field(f)
    save_strain(s, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "ix,iy,iz,ex,ey,ez,exy,eyz,ezx,eeq" and len(lines) == 28
    save_vtk(f, s, tmp_path / "f.vtk")
    text = (tmp_path / "f.vtk").read_text()
    assert "DIMENSIONS 3 3 3" in text and "equivalent_strain" in text
