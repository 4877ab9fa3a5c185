from pathlib import Path

import numpy as np
import pytest

from warpfit.data import (
    Dataset,
    SimSpec,
    default_template,
    downsample,
    downsample_indices,
    load_curves,
    load_dataset,
    save_dataset,
    simulate,
    truncate,
    write_labels,
    write_long_csv,
)
from warpfit.exceptions import DataFormatError
from warpfit.model import Curve

FIX = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def template():
    return default_template()


class TestLoad:
    def test_two_subject_fixture(self):
        ds = load_curves(FIX / "two_subjects.csv", labels_path=FIX / "two_labels.csv")
        assert ds.ids == ["A", "B"]
        assert [c.m for c in ds.curves] == [3, 5]
        for c in ds.curves:
            assert np.all(np.diff(c.grid) > 0)
        np.testing.assert_array_equal(ds.curves[0].values, [0.1, 0.2, 0.3])
        assert ds.labels == {"A": 1, "B": 0}

    def test_duplicate_rejected(self):
        with pytest.raises(DataFormatError, match=r"id=A, t=-50\.0.*duplicate\.csv:2.*duplicate\.csv:4"):
            load_curves(FIX / "duplicate.csv")

    def test_malformed_row_reports_line(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text("id,t,value\nA,-1,0.3\nA,oops,0.2\n")
        with pytest.raises(DataFormatError, match="bad.csv:3"):
            load_curves(f)

    def test_nonfinite_rejected(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text("id,t,value\nA,-1,nan\n")
        with pytest.raises(DataFormatError, match="non-finite"):
            load_curves(f)

    def test_unknown_label_id(self, tmp_path):
        f = tmp_path / "labels.csv"
        f.write_text("id,group\nA,upper\nB,lower\nZ,upper\n")
        with pytest.raises(DataFormatError, match="Z"):
            load_curves(FIX / "two_subjects.csv", labels_path=f)

    def test_directory_format(self, tmp_path):
        (tmp_path / "A.csv").write_text("t,value\n-3,1\n-5,2\n")
        (tmp_path / "B.csv").write_text("t,value\n-1,4\n")
        ds = load_curves(tmp_path, format="dir")
        assert ds.ids == ["A", "B"]
        np.testing.assert_array_equal(ds.curves[0].grid, [-5, -3])

    def test_unknown_format(self):
        with pytest.raises(DataFormatError):
            load_curves(FIX / "two_subjects.csv", format="xml")


class TestRoundtrip:
    def test_json_bundle(self, template, tmp_path):
        ds, _ = simulate(SimSpec(template, n=7, m=13, grid="random", labels={"alpha": 0.2}, seed=5))
        save_dataset(ds, tmp_path / "d.json")
        back = load_dataset(tmp_path / "d.json")
        assert back.curves == ds.curves and back.labels == ds.labels and back.meta == ds.meta

    def test_csv(self, template, tmp_path):
        ds, _ = simulate(SimSpec(template, n=4, m=9, labels={"alpha": 0.0}, seed=6))
        write_long_csv(ds, tmp_path / "c.csv")
        write_labels(ds, tmp_path / "l.csv")
        back = load_curves(tmp_path / "c.csv", labels_path=tmp_path / "l.csv")
        assert back.curves == ds.curves and back.labels == ds.labels


class TestTruncate:
    def test_inside_unchanged(self):
        ds = Dataset([Curve("a", [-70.0, -10.0], [1.0, 2.0])])
        assert truncate(ds, -80.0).curves == ds.curves

    def test_spanning_curve(self):
        grid = np.linspace(-120, 0, 25)
        ds = Dataset([Curve("a", grid, np.arange(25.0))])
        out = truncate(ds, -80.0)
        np.testing.assert_array_equal(out.curves[0].grid, grid[grid >= -80])
        np.testing.assert_array_equal(out.curves[0].values, np.arange(25.0)[grid >= -80])
        assert out.meta["truncation"] == -80.0

    def test_below_all_data_is_identity(self):
        ds = load_curves(FIX / "two_subjects.csv")
        assert truncate(ds, -1000.0).curves == ds.curves

    def test_empty_curves_removed_and_reported(self):
        ds = Dataset([Curve("a", [-100.0, -90.0], [1.0, 2.0]), Curve("b", [-50.0], [1.0])], {"a": 1, "b": 0})
        out = truncate(ds, -80.0)
        assert out.ids == ["b"] and out.meta["dropped_empty"] == ["a"] and out.labels == {"b": 0}

    def test_idempotent(self):
        ds = Dataset([Curve("a", np.linspace(-120, 0, 30), np.ones(30))])
        once = truncate(ds, -80.0)
        assert truncate(once, -80.0).curves == once.curves


class TestDownsample:
    def test_at_target_unchanged(self):
        ds = Dataset([Curve("a", np.linspace(-80, 0, 30), np.arange(30.0))])
        assert downsample(ds, 30).curves == ds.curves

    def test_short_passthrough(self):
        ds = Dataset([Curve("a", np.linspace(-80, 0, 12), np.arange(12.0))])
        assert downsample(ds, 30).curves == ds.curves

    def test_dense_equispaced(self):
        grid = np.linspace(-80, 0, 100)
        ds = Dataset([Curve("a", grid, np.sin(grid))])
        out = downsample(ds, 30).curves[0]
        assert out.m == 30 and out.grid[0] == -80 and out.grid[-1] == 0
        gaps = np.diff(out.grid)
        ideal = 80 / 29
        # nearest-point selection on a grid of spacing 80/99 moves each
        # point by at most half a source gap
        assert np.max(np.abs(gaps - ideal)) <= 80 / 99 + 1e-12
        assert abs(gaps.mean() - ideal) < 1e-12
        np.testing.assert_array_equal(out.values, np.sin(out.grid))

    def test_irregular_grid_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = int(rng.integers(31, 300))
            grid = np.sort(rng.uniform(-80, 0, m))
            idx = downsample_indices(grid, 30)
            assert idx.size == 30 and np.all(np.diff(idx) > 0)
            assert idx[0] == 0 and idx[-1] == m - 1

    def test_never_increases_m(self, template):
        ds, _ = simulate(SimSpec(template, n=10, m=45, grid="random", seed=1))
        out = downsample(ds, 30)
        for a, b in zip(ds.curves, out.curves):
            assert b.m <= a.m
            assert set(zip(b.grid, b.values)) <= set(zip(a.grid, a.values))


class TestSimulate:
    def test_noise_free_curves_equal_mean(self, template):
        model = template.with_params(lam=np.zeros(2), Sigma=np.zeros((3, 3)))
        ds, _ = simulate(SimSpec(model, n=4, m=15, grid="random", sigma=0.0, seed=2))
        for c in ds.curves:
            np.testing.assert_allclose(c.values, model.mean_function(c.grid), atol=1e-12)

    def test_bit_identical_reruns(self, template):
        spec = SimSpec(template, n=5, m=10, grid="random", labels={"alpha": 0.5}, seed=9)
        a, ta = simulate(spec)
        b, tb = simulate(spec)
        assert a.curves == b.curves and a.labels == b.labels
        np.testing.assert_array_equal(ta.theta, tb.theta)

    def test_score_moments(self, template):
        _, truth = simulate(SimSpec(template, n=10000, m=2, seed=3))
        z = truth.z
        n = z.shape[0]
        lam = template.lam
        assert np.all(np.abs(z.mean(axis=0)) < 3 * np.sqrt(lam / n))
        # Var of the sample variance of a normal is 2 lam^2 / (n - 1)
        assert np.all(np.abs(z.var(axis=0, ddof=1) - lam) < 3 * lam * np.sqrt(2 / (n - 1)))
        cross = np.mean(z[:, 0] * z[:, 1])
        assert abs(cross) < 3 * np.sqrt(lam[0] * lam[1] / n)

    def test_label_prevalence(self, template):
        spec = SimSpec(template, n=10000, m=2, seed=4,
                       labels={"alpha": 0.3, "b": [0.5, -1.0], "d": [0.0, 0.01, 0.0]})
        ds, truth = simulate(spec)
        y = ds.label_vector()
        pbar = truth.prob.mean()
        se = np.sqrt(np.sum(truth.prob * (1 - truth.prob))) / len(y)
        assert abs(y.mean() - pbar) < 3 * se

    def test_random_grids_inside_interval(self, template):
        ds, _ = simulate(SimSpec(template, n=30, m=20, grid="random", seed=5))
        for c in ds.curves:
            assert c.m == 20 and c.grid[0] >= -80 and c.grid[-1] == 0
        starts = [c.grid[0] for c in ds.curves]
        assert min(starts) < -70 and max(starts) > -70
