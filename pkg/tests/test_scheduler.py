"""Tests for padding realization: scheduling, preload, upload ratio, restart."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from padlab.neuralcore import GeneratorNet
from padlab.ratemeter import RateMeter
from padlab.scheduler import (
    DefenseConfig,
    DefendedTrace,
    ConfigError,
    apportion_integer,
    defend_corpus,
    defend_trace_offline,
    front_baseline,
    parse_defended,
    preload_padding,
    schedule_bin,
    serialize_defended,
    upload_padding_step,
    _upload_padding_sweep,
)
from padlab.traces import DOWN, UP, ShortTraceError, Trace, bandwidth_overhead, make_bin_edges


def make_generator(seed=0):
    torch.manual_seed(seed)
    return GeneratorNet()


def page_load_trace(rng, start=0.2, n_down=300, n_up=40, dur=8.0, label=None, instance=None):
    """A plausible single page load: an upload burst then download bulk."""
    t_down = np.sort(rng.uniform(start, start + dur, size=n_down))
    t_up = np.sort(rng.uniform(start, start + dur, size=n_up))
    times = np.concatenate([t_down, t_up])
    dirs = np.concatenate([np.full(n_down, DOWN, np.int8), np.full(n_up, UP, np.int8)])
    order = np.argsort(times, kind="stable")
    return Trace(times=times[order], dirs=dirs[order], label=label, instance=instance)


class TestScheduleBin:
    def test_zero_count(self):
        assert len(schedule_bin(0, 1.0, 0.5, np.random.default_rng(0))) == 0

    def test_count_preserved(self):
        rng = np.random.default_rng(1)
        for count in (1, 2, 7, 100):
            assert len(schedule_bin(count, 2.0, 0.3, rng)) == count

    def test_timestamps_start_inside_bin_and_increase(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ts = schedule_bin(20, 5.0, 1.5, rng)
            assert 5.0 <= ts[0] <= 6.5
            assert np.all(np.diff(ts) >= 0)

    def test_mean_gap_is_bin_len_over_count(self):
        rng = np.random.default_rng(3)
        gaps = []
        for _ in range(200):
            ts = schedule_bin(10, 0.0, 1.0, rng)
            gaps.extend(np.diff(ts))
        assert np.mean(gaps) == pytest.approx(0.1, rel=0.1)

    def test_gaps_pass_ks_against_exponential(self):
        rng = np.random.default_rng(4)
        gaps = []
        while len(gaps) < 10_000:
            gaps.extend(np.diff(schedule_bin(101, 0.0, 2.0, rng)))
        res = stats.kstest(np.array(gaps[:10_000]), "expon", args=(0, 2.0 / 101))
        assert res.pvalue > 0.01

    def test_burst_offsets_pass_ks_against_uniform(self):
        rng = np.random.default_rng(5)
        offsets = np.array([schedule_bin(1, 3.0, 0.8, rng)[0] - 3.0 for _ in range(10_000)])
        res = stats.kstest(offsets, "uniform", args=(0, 0.8))
        assert res.pvalue > 0.01


class TestPreload:
    def _cfg(self):
        return DefenseConfig(edges=make_bin_edges(L=16))

    def test_zero_horizon(self):
        assert len(preload_padding(np.random.default_rng(0), self._cfg(), 0.0)) == 0

    def test_expected_count_about_ten_per_second(self):
        cfg = self._cfg()
        counts = [
            len(preload_padding(np.random.default_rng(s), cfg, 1.0)) for s in range(1000)
        ]
        assert 9.0 <= np.mean(counts) <= 11.0

    def test_all_before_horizon_and_sorted(self):
        cfg = self._cfg()
        ts = preload_padding(np.random.default_rng(7), cfg, 3.0)
        assert np.all(ts < 3.0)
        assert np.all(ts >= 0.0)
        assert np.all(np.diff(ts) >= 0)

    def test_gaps_pass_ks_against_exponential(self):
        cfg = self._cfg()
        gaps = []
        s = 0
        while len(gaps) < 10_000:
            ts = preload_padding(np.random.default_rng(1000 + s), cfg, 60.0)
            gaps.extend(np.diff(ts))
            s += 1
        res = stats.kstest(np.array(gaps[:10_000]), "expon", args=(0, cfg.preload_mean_delay))
        assert res.pvalue > 0.01


class TestUploadPadding:
    def test_send_when_ratio_low(self):
        up = RateMeter(estimate=1.0, last_t=1.0)
        down = RateMeter(estimate=10.0, last_t=1.0)
        assert upload_padding_step(up, down, 1.0, ratio=5.0) is True

    def test_hold_when_ratio_met(self):
        up = RateMeter(estimate=3.0, last_t=1.0)
        down = RateMeter(estimate=10.0, last_t=1.0)
        assert upload_padding_step(up, down, 1.0, ratio=5.0) is False

    def test_long_run_rate_tracks_ratio(self):
        # constant 50 downloads/s; upload dummies should settle near 10/s
        times = np.arange(0.0, 30.0, 0.02)
        dirs = np.full(len(times), DOWN, np.int8)
        sent = _upload_padding_sweep(times, dirs, 30.0, ratio=5.0)
        steady = sent[sent > 5.0]
        rate = len(steady) / 25.0
        assert 8.0 <= rate <= 12.0


class TestApportionment:
    def test_exact_total(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = rng.uniform(0, 10, size=64)
            counts = apportion_integer(v, 3000)
            assert counts.sum() == 3000
            assert np.all(counts >= 0)

    def test_within_one_of_exact_share(self):
        rng = np.random.default_rng(1)
        v = rng.uniform(0, 5, size=32)
        counts = apportion_integer(v, 777)
        exact = v * 777 / v.sum()
        assert np.all(np.abs(counts - exact) < 1.0)

    def test_zero_volume_bins_get_nothing(self):
        v = np.array([0.0, 2.0, 0.0, 6.0])
        counts = apportion_integer(v, 100)
        assert counts[0] == counts[2] == 0
        assert counts.sum() == 100

    @given(
        vols=st.lists(st.floats(0, 100), min_size=4, max_size=64),
        total=st.integers(1, 5000),
    )
    @settings(max_examples=60, deadline=None)
    def test_property_exact_sum(self, vols, total):
        v = np.array(vols)
        counts = apportion_integer(v, total)
        if v.sum() > 0:
            assert counts.sum() == total
        else:
            assert counts.sum() == 0


class TestDefendTraceOffline:
    def _cfg(self, n=200.0):
        return DefenseConfig(N_download=n)

    def test_short_trace_raises(self):
        tr = Trace(times=np.arange(5.0), dirs=np.full(5, DOWN, np.int8))
        with pytest.raises(ShortTraceError):
            defend_trace_offline(tr, make_generator(), self._cfg(), np.random.default_rng(0))

    def test_padding_only_invariant_bitwise(self):
        rng = np.random.default_rng(0)
        tr = page_load_trace(rng)
        dt = defend_trace_offline(tr, make_generator(), self._cfg(), np.random.default_rng(1))
        rec = dt.real_part()
        np.testing.assert_array_equal(rec.times, tr.times)
        np.testing.assert_array_equal(rec.dirs, tr.dirs)

    def test_single_round_budget_exact(self):
        rng = np.random.default_rng(2)
        tr = page_load_trace(rng)  # ends well before the 50 s span
        cfg = self._cfg(n=200.0)
        dt = defend_trace_offline(tr, make_generator(), cfg, np.random.default_rng(3))
        origin = tr.times[9]
        dummy_down_t = dt.times[dt.dummy & (dt.dirs == DOWN)]
        preload_n = int(np.count_nonzero(dummy_down_t < origin))
        scheduled_n = len(dummy_down_t) - preload_n
        assert scheduled_n == 200
        # one round only: every scheduled dummy inside [origin, origin + span]
        assert np.all(dummy_down_t[dummy_down_t >= origin] <= origin + cfg.edges.span)

    def test_preload_runs_until_origin(self):
        rng = np.random.default_rng(4)
        tr = page_load_trace(rng, start=1.5)
        dt = defend_trace_offline(tr, make_generator(), self._cfg(), np.random.default_rng(5))
        origin = tr.times[9]
        pre = dt.times[dt.dummy & (dt.dirs == DOWN) & (dt.times < origin)]
        assert len(pre) > 0
        # roughly one per mean delay over [0, origin]
        assert len(pre) == pytest.approx(origin / 0.1, abs=3 * math.sqrt(origin / 0.1) + 2)

    def test_two_page_loads_trigger_restart(self):
        rng = np.random.default_rng(6)
        first = page_load_trace(rng, start=0.2, n_down=200, n_up=20, dur=6.0)
        second = page_load_trace(rng, start=57.0, n_down=150, n_up=15, dur=5.0)
        tr = Trace(
            times=np.concatenate([first.times, second.times]),
            dirs=np.concatenate([first.dirs, second.dirs]),
        )
        cfg = self._cfg(n=150.0)
        dt = defend_trace_offline(tr, make_generator(), cfg, np.random.default_rng(7))

        origin1 = tr.times[9]
        round1_end = origin1 + cfg.edges.span
        down_after = tr.times[(tr.dirs == DOWN) & (tr.times >= round1_end)]
        origin2 = down_after[cfg.restart_threshold]  # the 10th post-round download

        dummy_down_t = dt.times[dt.dummy & (dt.dirs == DOWN)]
        # two rounds of budget plus the preload tail
        preload_n = int(np.count_nonzero(dummy_down_t < origin1))
        assert len(dummy_down_t) - preload_n == 2 * 150
        # padding is silent between round 1 end and the restart origin
        gap = dummy_down_t[(dummy_down_t > round1_end) & (dummy_down_t < origin2)]
        assert len(gap) == 0
        # round 2 dummies all fall inside the restarted span
        tail = dummy_down_t[dummy_down_t >= origin2]
        assert len(tail) > 0
        assert np.all(tail <= origin2 + cfg.edges.span)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(8)
        tr = page_load_trace(rng)
        G = make_generator(seed=3)
        a = defend_trace_offline(tr, G, self._cfg(), np.random.default_rng(42))
        b = defend_trace_offline(tr, G, self._cfg(), np.random.default_rng(42))
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.dirs, b.dirs)
        np.testing.assert_array_equal(a.dummy, b.dummy)

    def test_upload_dummies_present_and_upward(self):
        rng = np.random.default_rng(9)
        tr = page_load_trace(rng, n_down=400, n_up=10)
        dt = defend_trace_offline(tr, make_generator(), self._cfg(n=400.0), np.random.default_rng(10))
        n_up_dummy = dt.dummy_count(UP)
        n_down_total = int(np.count_nonzero(dt.dirs == DOWN))
        assert n_up_dummy > 0
        # ratio padding should not wildly overshoot 1:5
        assert n_up_dummy < n_down_total

    def test_provenance_recorded(self):
        rng = np.random.default_rng(11)
        tr = page_load_trace(rng)
        G = make_generator(seed=4)
        cfg = self._cfg()
        dt = defend_trace_offline(tr, G, cfg, np.random.default_rng(12), seed=12)
        assert dt.provenance["config"] == cfg.content_hash()
        assert len(dt.provenance["generator"]) == 12
        assert dt.provenance["seed"] == 12


class TestDefendCorpus:
    def test_order_independent_per_trace_streams(self):
        rng = np.random.default_rng(13)
        traces = [
            page_load_trace(rng, label=c, instance=i, n_down=120, n_up=15, dur=4.0)
            for c in range(2)
            for i in range(3)
        ]
        G = make_generator(seed=5)
        cfg = DefenseConfig(N_download=100.0)
        fwd = defend_corpus(traces, G, cfg, seed=99)
        rev = defend_corpus(list(reversed(traces)), G, cfg, seed=99)
        by_key_fwd = {(d.label, d.instance): d for d in fwd}
        by_key_rev = {(d.label, d.instance): d for d in rev}
        assert by_key_fwd.keys() == by_key_rev.keys()
        for k in by_key_fwd:
            np.testing.assert_array_equal(by_key_fwd[k].times, by_key_rev[k].times)

    def test_short_traces_skipped(self):
        ok = page_load_trace(np.random.default_rng(14), label=0, instance=0)
        short = Trace(times=np.arange(4.0), dirs=np.full(4, DOWN, np.int8), label=0, instance=1)
        out = defend_corpus([ok, short], make_generator(), DefenseConfig(N_download=50.0), seed=1)
        assert len(out) == 1


class TestFrontBaseline:
    def test_minimal_counts(self):
        tr = page_load_trace(np.random.default_rng(15))
        dt = front_baseline(tr, N_s=1, N_c=1, rng=np.random.default_rng(16))
        assert int(dt.dummy.sum()) == 2

    def test_padding_only(self):
        tr = page_load_trace(np.random.default_rng(17))
        dt = front_baseline(tr, rng=np.random.default_rng(18))
        rec = dt.real_part()
        np.testing.assert_array_equal(rec.times, tr.times)
        np.testing.assert_array_equal(rec.dirs, tr.dirs)

    def test_dummy_times_pass_rayleigh_ks(self):
        tr = Trace(times=np.array([0.0]), dirs=np.array([DOWN]))
        w = 3.0
        samples = []
        seed = 0
        while len(samples) < 10_000:
            dt = front_baseline(
                tr, N_s=4000, N_c=4000, W_min=w, W_max=w * (1 + 1e-12),
                rng=np.random.default_rng(200 + seed),
            )
            samples.extend(dt.times[dt.dummy].tolist())
            seed += 1
        res = stats.kstest(np.array(samples[:10_000]), "rayleigh", args=(0, w))
        assert res.pvalue > 0.01

    def test_requires_rng(self):
        tr = page_load_trace(np.random.default_rng(19))
        with pytest.raises(ConfigError):
            front_baseline(tr)

    def test_invalid_window(self):
        tr = page_load_trace(np.random.default_rng(20))
        with pytest.raises(ConfigError):
            front_baseline(tr, W_min=5.0, W_max=2.0, rng=np.random.default_rng(0))


class TestDefendedTraceFormat:
    def test_serialize_parse_round_trip(self):
        rng = np.random.default_rng(21)
        tr = page_load_trace(rng, n_down=60, n_up=8)
        dt = defend_trace_offline(
            tr, make_generator(), DefenseConfig(N_download=50.0), np.random.default_rng(22)
        )
        again = parse_defended(serialize_defended(dt))
        np.testing.assert_array_equal(dt.times, again.times)
        np.testing.assert_array_equal(dt.dirs, again.dirs)
        np.testing.assert_array_equal(dt.dummy, again.dummy)

    def test_overhead_wiring(self):
        rng = np.random.default_rng(23)
        tr = page_load_trace(rng, n_down=100, n_up=10)
        dt = defend_trace_offline(
            tr, make_generator(), DefenseConfig(N_download=110.0), np.random.default_rng(24)
        )
        rep = bandwidth_overhead(tr, dt)
        assert rep.real_down == 100 and rep.real_up == 10
        assert rep.dummy_down >= 110  # scheduled budget plus preload
        assert rep.bandwidth_oh > 1.0


class TestConfig:
    def test_default_Z_scales_with_bins(self):
        cfg = DefenseConfig(edges=make_bin_edges(L=128))
        assert cfg.live_norm_Z == pytest.approx(128 * math.log(2))

    def test_restart_threshold_bound(self):
        with pytest.raises(ConfigError):
            DefenseConfig(restart_threshold=10)

    def test_positivity_checks(self):
        with pytest.raises(ConfigError):
            DefenseConfig(N_download=0)
        with pytest.raises(ConfigError):
            DefenseConfig(upload_ratio=-1)

    def test_content_hash_stable_and_sensitive(self):
        a = DefenseConfig(N_download=100.0)
        b = DefenseConfig(N_download=100.0)
        c = DefenseConfig(N_download=101.0)
        assert a.content_hash() == b.content_hash()
        assert a.content_hash() != c.content_hash()
