import math

import numpy as np
import pytest

from mixserve.allocator import (
    GlobalMonitor,
    ModelProfile,
    MonitorSnapshot,
    PidController,
    QUALITY,
    THROUGHPUT,
    compute_savings,
    hit_workload,
    miss_workload,
    quality_allocate,
    throughput_allocate,
)


def profile(name, cls, rpm, total_steps=50, **kw):
    # P = 60 / (per_step * T)  =>  per_step = 60 / (P * T)
    return ModelProfile(name, cls, 60.0 / (rpm * total_steps), 1.0, total_steps, **kw)


def snap(rate, hit, k_dist, n):
    return MonitorSnapshot(rate, hit, k_dist, n)


class TestWorkloads:
    def test_miss_workload(self):
        assert miss_workload(snap(20, 0.9, {25: 1.0}, 4)) == pytest.approx(2.0)
        assert miss_workload(snap(7, 0.0, {}, 4)) == pytest.approx(7.0)
        assert miss_workload(snap(7, 1.0, {25: 1.0}, 4)) == pytest.approx(0.0)

    def test_hit_workload(self):
        assert hit_workload(snap(3, 0.5, {25: 1.0}, 4), 50) == pytest.approx(0.75)
        assert hit_workload(snap(3, 0.0, {}, 4), 50) == 0.0
        assert hit_workload(snap(3, 0.5, {0: 1.0}, 4), 50) == pytest.approx(1.5)

    def test_hit_workload_rejects_k_at_total(self):
        with pytest.raises(ValueError):
            hit_workload(snap(3, 0.5, {50: 1.0}, 4), 50)

    def test_snapshot_validation(self):
        with pytest.raises(ValueError):
            snap(-1, 0.5, {25: 1.0}, 4)
        with pytest.raises(ValueError):
            snap(1, 1.5, {25: 1.0}, 4)
        with pytest.raises(ValueError):
            snap(1, 0.5, {25: 0.7, 30: 0.2}, 4)  # sums to 0.9
        with pytest.raises(ValueError):
            snap(1, 0.5, {25: 1.0}, 0)


def brute_force_quality(s, p_large, p_small, total_steps):
    """Enumerate every split; pick the most larges satisfying both constraints."""
    w_miss = (1.0 - s.hit_rate) * s.rate_rpm
    w_hit = s.hit_rate * s.rate_rpm * sum(
        p * (1.0 - k / total_steps) for k, p in s.k_dist.items()
    )
    feasible = [
        n
        for n in range(1, s.n_workers + 1)
        if n * p_large >= w_miss
        and (n * p_large - w_miss) + (s.n_workers - n) * p_small >= w_hit
    ]
    if feasible:
        return max(feasible), False
    return min(s.n_workers, max(1, math.ceil(w_miss / p_large))), True


class TestQualityAllocate:
    def test_all_splits_feasible(self):
        s = snap(3, 0.5, {25: 1.0}, 4)
        plan = quality_allocate(s, 1.0, 3.0, 50)
        assert plan.n_large == 4 and not plan.saturated

    def test_hit_constraint_binds(self):
        s = snap(6, 0.5, {25: 1.0}, 4)
        plan = quality_allocate(s, 1.0, 4.0, 50)
        assert plan.n_large == 3
        assert plan.n_small == 1

    def test_idle_cluster_goes_all_large(self):
        s = snap(0, 0.0, {}, 4)
        assert quality_allocate(s, 1.0, 4.0, 50).n_large == 4

    def test_saturated_when_misses_exceed_cluster(self):
        s = snap(100, 0.0, {}, 4)
        plan = quality_allocate(s, 1.0, 4.0, 50)
        assert plan.saturated and plan.n_large == 4

    def test_matches_brute_force_randomized(self):
        rng = np.random.default_rng(42)
        choices = [5, 10, 15, 20, 25, 30]
        for _ in range(500):
            n = int(rng.integers(1, 33))
            rate = float(rng.uniform(0, 60))
            hit = float(rng.uniform(0, 1))
            m = int(rng.integers(1, len(choices) + 1))
            ks = rng.choice(choices, size=m, replace=False)
            w = rng.random(m)
            k_dist = {int(k): float(p) for k, p in zip(ks, w / w.sum())}
            s = snap(rate, hit, k_dist, n)
            p_large = float(rng.uniform(0.2, 4.0))
            p_small = float(rng.uniform(0.2, 16.0))
            plan = quality_allocate(s, p_large, p_small, 50)
            want_n, want_sat = brute_force_quality(s, p_large, p_small, 50)
            assert (plan.n_large, plan.saturated) == (want_n, want_sat)
            assert plan.n_large + plan.n_small == n


class TestThroughputAllocate:
    def test_hand_value(self):
        # W_miss = 3, W_hit = 1.5, weighted = 1.5/(4/1) = 0.375
        s = snap(6, 0.5, {25: 1.0}, 4)
        target = throughput_allocate(s, 1.0, 4.0, 50)
        assert target == pytest.approx(3.0 / 3.375 * 4.0, rel=1e-12)

    def test_all_misses_wants_everything(self):
        s = snap(6, 0.0, {}, 4)
        assert throughput_allocate(s, 1.0, 4.0, 50) == pytest.approx(4.0)

    def test_all_hits_wants_nothing(self):
        s = snap(6, 1.0, {25: 1.0}, 4)
        assert throughput_allocate(s, 1.0, 4.0, 50) == pytest.approx(0.0)

    def test_idle_default(self):
        s = snap(0, 0.0, {}, 4)
        assert throughput_allocate(s, 1.0, 4.0, 50) == 1.0

    def test_formula_randomized(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = int(rng.integers(1, 65))
            rate = float(rng.uniform(0.1, 100))
            hit = float(rng.uniform(0, 1))
            k = int(rng.choice([5, 10, 15, 20, 25, 30]))
            s = snap(rate, hit, {k: 1.0}, n)
            p_large = float(rng.uniform(0.2, 4))
            p_small = float(rng.uniform(0.2, 16))
            w_miss = (1 - hit) * rate
            w_hit_weighted = hit * rate * (1 - k / 50) / (p_small / p_large)
            want = w_miss / (w_hit_weighted + w_miss) * n
            got = throughput_allocate(s, p_large, p_small, 50)
            assert got == pytest.approx(want, rel=1e-9)


class TestPid:
    def test_zero_gains(self):
        pid = PidController(0.0, 0.0, 0.0)
        assert pid.step(10.0, 2.0) == 0.0

    def test_proportional_only_linear(self):
        pid = PidController(0.5, 0.0, 0.0)
        assert pid.step(4.0, 1.0) == pytest.approx(1.5)
        assert pid.step(5.0, 1.0) == pytest.approx(2.0)

    def test_first_call_hand_value(self):
        pid = PidController(0.6, 0.05, 0.05)
        assert pid.step(4.0, 2.0) == pytest.approx(1.3)

    def test_zero_error_leaves_kp_kd_silent(self):
        pid = PidController(0.6, 0.0, 0.05)
        assert pid.step(3.0, 3.0) == 0.0

    def test_integral_clamped(self):
        pid = PidController(0.0, 1.0, 0.0, integral_bound=2.0)
        for _ in range(10):
            delta = pid.step(10.0, 0.0)
        assert delta == pytest.approx(2.0)

    def test_closed_loop_contracts_once_close(self):
        # closed-loop oracle: after entering the 1-unit band the gap stays
        # inside it, and from the overshoot peak on it shrinks every step
        pid = PidController(0.6, 0.05, 0.05, integral_bound=8.0)
        current, target = 0.0, 5.0
        gaps = []
        for _ in range(40):
            current += pid.step(target, current)
            gaps.append(abs(current - target))
        start = next(i for i, g in enumerate(gaps) if g <= 1.0)
        assert all(g <= 1.0 for g in gaps[start:])
        rises = [i for i in range(1, len(gaps)) if gaps[i] > gaps[i - 1]]
        turn = rises[-1] if rises else 0
        assert turn <= 10
        tail = gaps[turn:]
        assert all(b <= a + 1e-9 for a, b in zip(tail, tail[1:]))
        assert gaps[-1] < 0.1


class TestComputeSavings:
    def test_step_skip_only(self):
        s = snap(10, 0.5, {25: 1.0}, 4)
        c_saved, _ = compute_savings(s, 1.0, 0.2, 50)
        assert c_saved == pytest.approx(0.25)

    def test_with_small_offload(self):
        s = snap(10, 0.5, {25: 1.0}, 4)
        _, c_total = compute_savings(s, 1.0, 0.2, 50)
        assert c_total == pytest.approx(0.45)

    def test_equal_costs_collapse(self):
        s = snap(10, 0.5, {25: 1.0}, 4)
        c_saved, c_total = compute_savings(s, 1.0, 1.0, 50)
        assert c_total == pytest.approx(c_saved)

    def test_total_dominates_when_small_cheaper(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            hit = float(rng.uniform(0, 1))
            k = int(rng.choice([5, 10, 15, 20, 25, 30]))
            s = snap(10, hit, {k: 1.0}, 4)
            c_gen = float(rng.uniform(0.1, 5))
            c_small = float(rng.uniform(0, c_gen))
            c_saved, c_total = compute_savings(s, c_gen, c_small, 50)
            assert c_total >= c_saved - 1e-12


def make_monitor(mode=THROUGHPUT, n=4, p_large_rpm=1.0, p_small_rpms=(4.0,), **kw):
    large = profile("large", "large", p_large_rpm)
    smalls = [profile(f"small{i}", "small", r) for i, r in enumerate(p_small_rpms)]
    return GlobalMonitor(large, smalls, n, mode=mode, **kw)


class TestGlobalMonitor:
    def test_zero_gains_open_loop(self):
        mon = make_monitor(mode=QUALITY, gains=(0.0, 0.0, 0.0), initial_n_large=1)
        s = snap(6, 0.5, {25: 1.0}, 4)
        plan = mon.tick(s)
        want = quality_allocate(s, 1.0, 4.0, 50)
        assert plan.n_large == want.n_large

    def test_steady_snapshot_settles(self):
        mon = make_monitor(mode=THROUGHPUT, initial_n_large=4)
        s = snap(6, 0.5, {25: 1.0}, 4)
        values = [mon.tick(s).n_large for _ in range(50)]
        settled = values[10:]
        assert max(settled) - min(settled) <= 1
        target = throughput_allocate(s, 1.0, 4.0, 50)
        assert all(abs(v - target) <= 1.0 for v in settled)

    def test_high_hit_rate_prefers_small_pool(self):
        # with hits dominating and P_s/P_l >= 2, most workers go small
        mon = make_monitor(mode=THROUGHPUT, n=16, p_large_rpm=1.0, p_small_rpms=(2.0,))
        s = snap(20, 0.928, {25: 0.5, 30: 0.5}, 16)
        plan = None
        for _ in range(30):
            plan = mon.tick(s)
        assert plan.n_large < plan.n_small

    def test_never_leaves_bounds(self):
        rng = np.random.default_rng(5)
        mon = make_monitor(mode=THROUGHPUT, n=4)
        for _ in range(200):
            hit = float(rng.uniform(0, 1))
            s = snap(float(rng.uniform(0, 200)), hit, {25: 1.0} if hit else {}, 4)
            plan = mon.tick(s)
            assert 1 <= plan.n_large <= 4
            assert plan.n_large + plan.n_small == 4

    def test_empty_period_holds_plan(self):
        mon = make_monitor(mode=THROUGHPUT, initial_n_large=4)
        busy = snap(6, 0.5, {25: 1.0}, 4)
        plan = None
        for _ in range(10):
            plan = mon.tick(busy)
        frac_before = mon.current_num_large
        held = mon.tick(snap(0, 0.0, {}, 4))
        assert held == plan
        assert mon.current_num_large == frac_before

    def test_quality_never_below_feasible_throughput_target(self):
        # when the rounded throughput-mode split is itself feasible, the
        # quality maximizer cannot sit below it
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(300):
            n = int(rng.integers(2, 17))
            hit = float(rng.uniform(0, 1))
            k = int(rng.choice([5, 10, 15, 20, 25, 30]))
            s = snap(float(rng.uniform(0.1, 30)), hit, {k: 1.0} if hit else {}, n)
            p_large = float(rng.uniform(0.5, 2))
            p_small = float(rng.uniform(p_large, 8))
            plan = quality_allocate(s, p_large, p_small, 50)
            if plan.saturated:
                continue
            target = throughput_allocate(s, p_large, p_small, 50)
            rounded = max(1, min(round(target), n))
            w_miss = miss_workload(s)
            w_hit = hit_workload(s, 50)
            spare = rounded * p_large - w_miss
            if spare < 0 or spare + (n - rounded) * p_small < w_hit:
                continue  # throughput split infeasible; counterexamples allowed
            checked += 1
            assert plan.n_large >= rounded
        assert checked > 100


class TestEscalation:
    def overload(self, n=4):
        # misses alone need 8 large workers at P_large = 1
        return snap(8, 0.0, {}, n)

    def test_escalates_after_patience(self):
        mon = make_monitor(
            mode=THROUGHPUT, p_small_rpms=(4.0, 12.0), escalation_patience=2
        )
        assert mon.small_profile.name == "small0"
        mon.tick(self.overload())
        assert mon.small_profile.name == "small0"
        mon.tick(self.overload())
        assert mon.small_profile.name == "small1"

    def test_deescalates_when_previous_profile_suffices(self):
        mon = make_monitor(
            mode=THROUGHPUT, p_small_rpms=(4.0, 12.0), escalation_patience=2
        )
        for _ in range(3):
            mon.tick(self.overload())
        assert mon.small_profile.name == "small1"
        calm = snap(2, 0.5, {25: 1.0}, 4)
        mon.tick(calm)
        assert mon.small_profile.name == "small1"
        mon.tick(calm)
        assert mon.small_profile.name == "small0"

    def test_plan_carries_small_profile(self):
        mon = make_monitor(mode=THROUGHPUT, p_small_rpms=(4.0, 12.0))
        plan = mon.tick(snap(2, 0.5, {25: 1.0}, 4))
        assert plan.small_profile == "small0"

    def test_decision_log_schema(self):
        mon = make_monitor()
        mon.tick(snap(6, 0.5, {25: 1.0}, 4))
        mon.tick(snap(0, 0.0, {}, 4))
        assert len(mon.decisions) == 2
        row = mon.decisions[0]
        assert set(row) == {
            "tick", "R", "H", "k_dist", "mode", "target", "delta",
            "n_large", "saturated", "small_profile",
        }
        assert mon.decisions[1]["target"] is None
