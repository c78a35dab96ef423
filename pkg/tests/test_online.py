import numpy as np
import pytest

from pfastrack.dynamics import ContractError, dubins_rel
from pfastrack.environment import Box, ObstacleMap, SensedSet, augment, collision
from pfastrack.planning import RawPath, densify
from pfastrack.online import (
    OnlineConfig,
    OnlineState,
    SafetyStallError,
    StepLog,
    StepRecord,
    adjust_planner_control,
    query_planner_control,
    relative_state,
    run,
)
from pfastrack.value_teb import FunctionValueSource, Teb, TebTable

DUB = dubins_rel()


def synthetic_table(radii=(0.3, 0.45, 0.6, 0.8), betas=(0.5, 0.75, 1.0, 1.25)):
    entries = [Teb(np.array([b, b]), level=r, radius=r) for b, r in zip(betas, radii)]
    return TebTable(betas=[e.beta for e in entries], entries=entries, delta_beta=0.25, epsilon=0.01)


def norm_source():
    """V(r) = |position error|, independent of beta."""
    return FunctionValueSource(
        lambda r, b: np.linalg.norm(np.asarray(r)[..., :2], axis=-1),
        lambda r, b: np.concatenate([np.asarray(r)[..., :2], np.zeros(np.shape(r)[:-1] + (2,))], axis=-1),
        np.array([0.5, 0.5]), np.array([1.25, 1.25]), (0, 1),
        np.array([-3.0, -3.0, -np.pi, -2.0]), np.array([3.0, 3.0, np.pi, 2.0]), (2,))


def test_query_planner_control_examples():
    table = synthetic_table()
    beta, K = query_planner_control(table, 1.0)
    np.testing.assert_array_equal(beta, [0.75, 0.75])
    assert K.radius == 0.45
    beta, K = query_planner_control(table, 0.4)
    np.testing.assert_array_equal(beta, [0.5, 0.5])
    assert K is table.steb
    beta, K = query_planner_control(table, np.inf)
    np.testing.assert_array_equal(beta, [1.25, 1.25])
    # radius exactly half the clearance is not strictly below it
    beta, _ = query_planner_control(table, 1.2)
    np.testing.assert_array_equal(beta, [0.75, 0.75])


def test_relative_state_examples():
    np.testing.assert_array_equal(relative_state(DUB, [1, 2, 0.3, 0.7], [1, 1]), [0, 1, 0.3, 0.7])
    r = relative_state(DUB, DUB.Q @ np.array([2.0, -1.0]), [2.0, -1.0])
    np.testing.assert_array_equal(r[:2], [0.0, 0.0])
    rng = np.random.default_rng(0)
    s, p, off = rng.normal(size=4), rng.normal(size=2), rng.normal(size=2)
    np.testing.assert_allclose(relative_state(DUB, s + DUB.Q @ off, p + off), relative_state(DUB, s, p))
    with pytest.raises(ContractError):
        relative_state(DUB, [0, 0, 0], [0, 0])


def _state(s, p, beta_old, path=None, seed=0):
    return OnlineState(s=np.asarray(s, float), p=np.asarray(p, float), beta_old=np.asarray(beta_old, float),
                       replan_flag=0, path=path, K=None, sensed=SensedSet(1.0), t=0.0,
                       rng=np.random.default_rng(seed))


FREE = lambda p: np.zeros(np.shape(p)[:-1], bool) if np.ndim(p) > 1 else False


def test_adjust_steps_when_beta_not_decreasing():
    path = RawPath(densify(np.array([[0.0, 0.0], [5.0, 0.0]]), 0.25))
    st = _state([0, 0, 0, 1], [0, 0], [0.75, 0.75], path)
    table = synthetic_table()
    p_next, flag, kind = adjust_planner_control(DUB, norm_source(), st, [1.0, 1.0], path.waypoints[0],
                                                table.entries[2], FREE, 0.1)
    np.testing.assert_allclose(p_next, [0.1, 0.0])
    assert flag == 0 and kind == "step"


def test_adjust_snaps_to_nearest_state_when_inside():
    path = RawPath(densify(np.array([[0.0, 0.0], [5.0, 0.0]]), 0.25))
    st = _state([1.0, 0.1, 0, 1], [1.5, 0.0], [1.0, 1.0], path)
    K = synthetic_table().steb
    p_next, flag, kind = adjust_planner_control(DUB, norm_source(), st, [0.5, 0.5], [1.0, 0.0], K, FREE, 0.1)
    np.testing.assert_array_equal(p_next, [1.0, 0.0])
    assert flag == 0 and kind == "snap"


def test_adjust_reset_postconditions():
    m = ObstacleMap((0.0, 0.0), (10.0, 10.0), (1.0, 1.0), (9.0, 9.0), 0.5, (), (Box((5.0, 4.0), (6.0, 6.0)),))
    aug = augment(m, SensedSet(0.0, (0,)), 0.3)
    K = Teb(np.array([0.5, 0.5]), level=0.6, radius=0.6)
    src = norm_source()
    for seed in range(50):
        st = _state([4.6, 5.0, 0, 1], [4.0, 5.0], [1.0, 1.0], seed=seed)
        p_star = np.array([3.0, 5.0])  # outside the bound around the tracker
        p_next, flag, kind = adjust_planner_control(DUB, src, st, [0.5, 0.5], p_star, K, aug, 0.1)
        assert kind == "reset" and flag == 1
        assert not aug(p_next)
        assert src.query(relative_state(DUB, st.s, p_next), [0.5, 0.5]) <= K.level


def test_adjust_stalls_when_no_reset_exists():
    K = Teb(np.array([0.5, 0.5]), level=0.6, radius=0.6)
    st = _state([4.6, 5.0, 0, 1], [4.0, 5.0], [1.0, 1.0])
    blocked = lambda p: True
    with pytest.raises(SafetyStallError):
        adjust_planner_control(DUB, norm_source(), st, [0.5, 0.5], [3.0, 5.0], K, blocked, 0.1, attempts=20)


def test_step_log_contract_and_text():
    log = StepLog()
    rec = lambda t: StepRecord(t, np.zeros(4), np.zeros(2), np.array([0.5, 0.5]), np.inf, 0.1, 0.2, ("sensed",))
    log.append(rec(0.05))
    with pytest.raises(ContractError):
        log.append(rec(0.05))
    log.append(rec(0.1))
    log.outcome = "reached"
    text = log.to_text()
    lines = text.splitlines()
    assert lines[0] == "# outcome=reached"
    assert lines[1].split(",")[0] == "t" and len(lines) == 4
    assert lines[2].endswith(",sensed") and "inf" in lines[2]
    assert log.count("sensed") == 2
    assert StepLog(outcome="stalled").to_text() == "# outcome=stalled\n"


def test_online_config_validation():
    with pytest.raises(ContractError):
        OnlineConfig(dt=0.0)
    with pytest.raises(ContractError):
        OnlineConfig(mode="fast")
    with pytest.raises(ContractError):
        OnlineConfig(disturbance="gusty")


# --- full runs on the solved Dubins family -------------------------------------


def open_world():
    return ObstacleMap((0.0, 0.0), (40.0, 40.0), (4.0, 20.0), (30.0, 20.0), 1.0)


def wall_world():
    return ObstacleMap((0.0, 0.0), (40.0, 40.0), (4.0, 14.0), (36.0, 14.0), 1.0, (),
                       (Box((19.0, 8.0), (21.0, 40.0)),))


@pytest.mark.slow
def test_obstacle_free_run_uses_top_beta(dubins_assets):
    a = dubins_assets
    log, outcome = run(a["sys"], a["table"], a["source"], open_world(), OnlineConfig())
    assert outcome == "reached"
    betas = log.betas
    arrive = next(k for k, r in enumerate(log.records) if np.allclose(r.p, open_world().goal))
    # top beta on every step until the planner parks at the goal
    assert np.all(betas[:arrive] == a["table"].beta_hi)
    assert log.count("invariant") == 0 and log.count("collision") == 0


@pytest.mark.slow
def test_wall_run_slows_near_wall_and_recovers(dubins_assets):
    a = dubins_assets
    world = wall_world()
    log, outcome = run(a["sys"], a["table"], a["source"], world, OnlineConfig())
    assert outcome == "reached"
    assert log.count("invariant") == 0 and log.count("collision") == 0
    b = log.betas[:, 0]
    lo, hi = a["table"].beta_lo[0], a["table"].beta_hi[0]
    assert np.all((b >= lo) & (b <= hi))
    assert b[0] == hi
    k_low = int(np.argmin(b))
    assert b[k_low] == lo
    assert np.any(b[k_low:] == hi)
    x_low = log.records[k_low].s[0]
    assert 14.0 < x_low < 26.0


@pytest.mark.slow
def test_run_is_deterministic(dubins_assets):
    a = dubins_assets
    cfg = OnlineConfig(seed=3)
    one, _ = run(a["sys"], a["table"], a["source"], wall_world(), cfg)
    two, _ = run(a["sys"], a["table"], a["source"], wall_world(), cfg)
    assert one.to_text() == two.to_text()


@pytest.mark.slow
def test_run_rejects_start_outside_steb(dubins_assets):
    a = dubins_assets
    with pytest.raises(ContractError):
        run(a["sys"], a["table"], a["source"], open_world(), OnlineConfig(), r0=np.array([2.9, 2.9, 0.0, 0.0]))
