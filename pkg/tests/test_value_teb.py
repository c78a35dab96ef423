import numpy as np
import pytest

from pfastrack.dynamics import ContractError, double_int_rel
from pfastrack.grid_solver import GridSpec, solve_family
from pfastrack.value_teb import (
    EmptyLevelSetError,
    FunctionValueSource,
    GridValueSource,
    Teb,
    TebTable,
    build_teb_table,
    dteb_radius,
    load_teb_table,
    membership,
    save_teb_table,
    teb_level,
)

DI = double_int_rel()


def norm_source(scale=None, beta_lo=0.0, beta_hi=1.0):
    """V(r; beta) = |r| * scale(beta) on [-1, 1]^2."""
    scale = scale or (lambda b: 1.0)

    def fn(r, beta):
        return np.linalg.norm(r, axis=-1) * scale(float(np.ravel(beta)[0]))

    def grad_fn(r, beta):
        n = np.linalg.norm(r, axis=-1, keepdims=True)
        return r / np.maximum(n, 1e-12) * scale(float(np.ravel(beta)[0]))

    return FunctionValueSource(fn, grad_fn, np.array([beta_lo]), np.array([beta_hi]), (0, 1),
                               np.array([-1.0, -1.0]), np.array([1.0, 1.0]))


@pytest.fixture(scope="module")
def di_family():
    g = GridSpec.for_system(DI, (-2.0, -2.0), (2.0, 2.0), (41, 41))
    return solve_family(DI, g, [0.25, 0.5, 0.75, 1.0, 1.25])


def test_synthetic_norm_level_and_radius():
    src = norm_source()
    assert teb_level(src, eps=0.05) == pytest.approx(0.05, abs=1e-3)
    assert dteb_radius(src, [0.5], 0.3) == pytest.approx(0.3, abs=1e-6)
    with pytest.raises(EmptyLevelSetError):
        dteb_radius(src, [0.5], -0.1)


def test_envelope_over_raw_radii():
    # raw radii 0.3, 0.29, 0.4 at beta 0, 0.5, 1
    k = {0.0: 1.0, 0.5: 0.3 / 0.29, 1.0: 0.3 / 0.4}
    src = norm_source(lambda b: k[round(b, 6)])
    table = build_teb_table(src, 0.5, eps=0.3, policy="minimal")
    np.testing.assert_allclose(table.raw_radii, [0.3, 0.29, 0.4], atol=2e-3)
    np.testing.assert_allclose(table.radii, [table.raw_radii[0], table.raw_radii[0], table.raw_radii[2]])
    assert np.all(np.diff(table.radii) >= 0)


def test_single_entry_table_is_steb():
    src = norm_source(beta_lo=0.5, beta_hi=0.5)
    table = build_teb_table(src, 0.25, eps=0.2)
    assert len(table.entries) == 1
    assert table.steb is table.entries[0]
    assert table.steb.radius == pytest.approx(0.2, abs=1e-3)


def test_beta_grid_reaches_upper_end():
    src = norm_source(beta_lo=0.0, beta_hi=1.0)
    table = build_teb_table(src, 0.3, eps=0.1)
    assert [float(b[0]) for b in table.betas] == pytest.approx([0.0, 0.3, 0.6, 0.9, 1.0])
    with pytest.raises(ContractError):
        build_teb_table(src, 0.0)


def test_table_rejects_decreasing_radii():
    with pytest.raises(ContractError):
        TebTable(betas=[np.array([0.0]), np.array([1.0])],
                 entries=[Teb(np.array([0.0]), 0.1, 0.5), Teb(np.array([1.0]), 0.2, 0.4)],
                 delta_beta=1.0, epsilon=0.1)
    with pytest.raises(ContractError):
        TebTable(betas=[], entries=[], delta_beta=1.0, epsilon=0.1)


def test_grid_level_is_slice_min_plus_eps(di_family):
    src = GridValueSource(di_family, DI)
    assert teb_level(src, eps=0.01) == di_family.slices[0].v_min + 0.01
    assert teb_level(src, [1.0], eps=0.0) == di_family.slices[3].v_min


def test_grid_radius_matches_cell_scan(di_family):
    src = GridValueSource(di_family, DI)
    pts = di_family.grid.points().reshape(-1, 2)
    for k, vs in enumerate(di_family.slices):
        level = vs.v_min + 0.1
        vals = vs.values.ravel()
        expected = max(abs(p[0]) for p, v in zip(pts, vals) if v <= level)
        assert dteb_radius(src, vs.beta, level) == expected


def test_grid_radius_strictly_grows_with_beta(di_family):
    src = GridValueSource(di_family, DI)
    eps = 0.02 * (di_family.slices[0].values.max() - di_family.slices[0].v_min)
    r_lo = dteb_radius(src, [0.5], teb_level(src, [0.5], eps))
    r_hi = dteb_radius(src, [1.25], teb_level(src, [1.25], eps))
    assert r_lo < r_hi


def test_grid_source_uses_next_slice_up(di_family):
    src = GridValueSource(di_family, DI)
    assert src.slice_for([0.6]) is di_family.slices[2]
    assert src.slice_for([0.5]) is di_family.slices[1]
    with pytest.raises(ContractError):
        src.slice_for([1.5])
    assert src.kappa([0.25]) > 0


def test_two_entry_grid_table(di_family):
    src = GridValueSource(di_family, DI)
    table = build_teb_table(src, 0.25)
    assert len(table.entries) == 5
    assert table.radii[1] >= table.radii[0]
    assert table.steb.radius == table.entries[0].radius


def test_nested_levels_contain_previous_bound(di_family):
    src = GridValueSource(di_family, DI)
    table = build_teb_table(src, 0.25, policy="nested")
    for k in range(1, len(table.entries)):
        prev = di_family.slices[k - 1].values <= table.entries[k - 1].level
        cur = di_family.slices[k].values <= table.entries[k].level
        assert np.all(cur[prev])


def test_membership_agrees_with_query(di_family):
    src = GridValueSource(di_family, DI)
    rng = np.random.default_rng(3)
    r = rng.uniform(-2, 2, (1000, 2))
    level = di_family.slices[1].v_min + 0.3
    flags = membership(src, r, [0.5], level)
    np.testing.assert_array_equal(flags, src.query(r, [0.5]) <= level)
    argmin = di_family.grid.points()[np.unravel_index(np.argmin(di_family.slices[1].values), (41, 41))]
    assert membership(src, argmin, [0.5], di_family.slices[1].v_min) is True
    assert membership(src, argmin, [0.5], di_family.slices[1].v_min - 1.0) is False


def test_table_text_roundtrip(tmp_path, di_family):
    table = build_teb_table(GridValueSource(di_family, DI), 0.25)
    path = tmp_path / "teb.txt"
    save_teb_table(table, path)
    back = load_teb_table(path)
    assert back.policy == table.policy and back.epsilon == table.epsilon
    for a, b in zip(back.entries, table.entries):
        assert a.level == b.level and a.radius == b.radius
        np.testing.assert_array_equal(a.beta, b.beta)
    assert back.kappas == table.kappas and back.raw_radii == table.raw_radii
    bad = tmp_path / "bad.txt"
    bad.write_text("nonsense\n")
    with pytest.raises(ContractError):
        load_teb_table(bad)
