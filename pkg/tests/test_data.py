import numpy as np
import pytest

from pgnn_pf.case_model import build_admittance
from pgnn_pf.data import (EmptySplit, InfeasibleStep, Normalizer, RangePortion, Sequential,
                          SplitSpec, TooManyFailures, add_noise, build_samples, gen_load_profiles,
                          inject_outliers, input_layout, load_buses, portion_of, read_dataset,
                          scale_to_capacity, split, write_dataset)


@pytest.fixture(scope="module")
def small57(case57):
    prof = gen_load_profiles(60, len(load_buses(case57)), 3)
    ds, census = build_samples(case57, scale_to_capacity(case57, prof))
    return ds, census


class TestProfiles:
    def test_shape_bounds_determinism(self):
        a = gen_load_profiles(500, 7, 1)
        assert a.shape == (500, 7)
        assert a.min() >= 0 and a.max() <= 1.2
        np.testing.assert_array_equal(a, gen_load_profiles(500, 7, 1))
        assert not np.array_equal(a, gen_load_profiles(500, 7, 2))

    def test_daily_cycle(self):
        a = gen_load_profiles(24 * 70, 3, 0).mean(axis=1)
        hourly = a.reshape(-1, 24).mean(axis=0)
        assert hourly.max() - hourly.min() > 0.1

    def test_negative_sizes(self):
        with pytest.raises(ValueError):
            gen_load_profiles(-1, 3, 0)


class TestScaling:
    def test_peak_hits_target(self, case57):
        prof = gen_load_profiles(200, len(load_buses(case57)), 0)
        sch = scale_to_capacity(case57, prof)
        cap = sum(case57.gen_capacity)
        assert sch.p_demand.sum(axis=1).max() == pytest.approx(0.9 * cap)
        np.testing.assert_allclose(sch.p_gen.sum(axis=1), sch.p_demand.sum(axis=1))
        share = np.asarray(case57.gen_capacity) / cap
        np.testing.assert_allclose(sch.p_gen[5], sch.p_gen[5].sum() * share)

    def test_power_factor_kept(self, case57):
        loads = load_buses(case57)
        sch = scale_to_capacity(case57, np.ones((1, len(loads))))
        ratio = sch.q_demand[0, loads] / sch.p_demand[0, loads]
        np.testing.assert_allclose(ratio, case57.q_demand[loads] / case57.p_demand[loads])

    def test_over_capacity(self, case57):
        with pytest.raises(InfeasibleStep):
            scale_to_capacity(case57, np.ones((2, len(load_buses(case57)))), target=1.5)

    def test_profile_width(self, case57):
        with pytest.raises(ValueError):
            scale_to_capacity(case57, np.ones((2, 3)))


class TestSamples:
    def test_layout(self, case57):
        kinds = [k for k, _ in input_layout(case57)]
        n_pq, n_pv = len(case57.pq), len(case57.pv)
        assert kinds == ["PL"] * n_pq + ["PG"] * n_pv + ["QL"] * n_pq + ["VG"] * n_pv + ["VR", "thetaR"]

    def test_all_converge(self, case57, small57):
        ds, census = small57
        assert census["failed"] == 0 and len(ds) == 60
        assert ds.x.shape == (60, len(input_layout(case57)))
        assert ds.v.shape == ds.s.shape == (60, 114)

    def test_sample_is_a_power_flow_solution(self, case57, small57):
        ds, _ = small57
        y = build_admittance(case57)
        from pgnn_pf.acpf import RectState, injections_rect

        n = 57
        inj = injections_rect(RectState(ds.v[7, :n], ds.v[7, n:]), y)
        np.testing.assert_allclose(np.concatenate([inj.p, inj.q]), ds.s[7], atol=1e-8)

    def test_driver_is_total_demand(self, case57, small57):
        ds, _ = small57
        pl = np.array([name.startswith("x_PL") for name in ds.x_names])
        # PL entries are injections (negative demand) at PQ buses; PV demand lives in PG
        assert np.all(ds.driver > 0)
        assert np.all(ds.x[:, pl] <= 1e-12)

    def test_too_many_failures(self, case57):
        loads = load_buses(case57)
        sch = scale_to_capacity(case57, np.ones((4, len(loads))))
        heavy = type(sch)(sch.p_demand * 8, sch.q_demand * 8, sch.p_gen * 8)
        with pytest.raises(TooManyFailures):
            build_samples(case57, heavy)

    def test_zero_steps(self, case57):
        ds, census = build_samples(case57, scale_to_capacity(case57, np.zeros((0, len(load_buses(case57))))))
        assert len(ds) == 0 and census["steps"] == 0


class TestCorruption:
    def test_noise_statistics(self, small57):
        ds, _ = small57
        noisy = add_noise(ds, 0.01, 0)
        cols, ncols = ds.columns, noisy.columns
        m = np.abs(cols) > 1e-6
        rel = ncols[m] / cols[m] - 1
        assert abs(rel.std() - 0.01) < 0.001 and abs(rel.mean()) < 0.001
        assert noisy.noise_applied and not ds.noise_applied

    def test_outlier_rows(self, small57):
        ds, _ = small57
        bad, rows = inject_outliers(ds, 0.10, 4)
        assert len(rows) == 6
        changed = np.flatnonzero(np.any(bad.columns != ds.columns, axis=1))
        np.testing.assert_array_equal(changed, rows)
        assert len(inject_outliers(ds, 0.0, 4)[1]) == 0

    def test_outlier_level_bounds(self, small57):
        with pytest.raises(ValueError):
            inject_outliers(small57[0], 0.2, 0)


class TestSplits:
    def test_sequential(self, small57):
        tr, va, te = split(small57[0], SplitSpec(Sequential()))
        assert (len(tr), len(va), len(te)) == (36, 6, 18)
        assert tr.step.max() < va.step.min() <= va.step.max() < te.step.min()

    def test_range_portions(self, small57):
        ds = small57[0]
        reg = RangePortion.interpolation()
        tr, va, te = split(ds, SplitSpec(reg))
        assert len(tr) + len(va) + len(te) == len(ds)
        assert set(te.meta["portion"]) <= set(reg.test_portions)
        assert set(va.meta["portion"]) <= {2, 5, 14, 17}

    def test_portion_bins(self):
        p = portion_of(np.linspace(0, 1, 101), 20)
        assert p.min() == 0 and p.max() == 19
        assert np.all(np.diff(p) >= 0)

    def test_all_train_empty_test(self, small57):
        reg = RangePortion(20, tuple(range(18)), (18, 19))
        with pytest.raises(EmptySplit):
            split(small57[0], SplitSpec(reg))

    def test_overlapping_portions(self):
        with pytest.raises(ValueError):
            RangePortion(20, (1, 2), (2, 3))


class TestNormalizer:
    def test_round_trip_and_floor(self, rng):
        a = rng.normal(3, 2, (50, 4))
        a[:, 2] = 7.0
        nrm = Normalizer.fit(a)
        z = nrm.transform(a)
        np.testing.assert_allclose(z[:, [0, 1, 3]].std(axis=0), 1.0)
        assert nrm.std[2] == 1.0
        np.testing.assert_allclose(nrm.inverse(z), a)
        back = Normalizer.from_dict(nrm.to_dict())
        np.testing.assert_array_equal(back.std, nrm.std)


class TestFiles:
    def test_round_trip(self, tmp_path, small57):
        ds = small57[0]
        write_dataset(ds, tmp_path / "d.csv", {"case": "ieee57"})
        back = read_dataset(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.s, ds.s)
        assert back.x_names == ds.x_names and back.meta["case"] == "ieee57"
        assert not list(tmp_path.glob("*.tmp"))

    def test_empty_has_header(self, tmp_path, small57):
        write_dataset(small57[0].subset([]), tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("step,driver,x_PL")
