import numpy as np
import pytest

from actquant.errors import PlanError
from actquant.groupquant import (
    CHANNEL,
    PIXEL,
    DimensionStats,
    GroupQuantConfig,
    GroupQuantScheme,
    apply_group_quant,
    cluster_ranges,
    compute_dimension_score,
    fit_group_scheme,
    kmeans_objective,
    scheme_overhead_bytes,
    select_dimension,
)
from actquant.quantizers import calibrate_minmax, fake_quantize
from actquant.tensorio import Tensor, load_calibration_set

from conftest import write_manifest


def direct_dscore(arr, axis):
    """Oracle: Eq-style spread score computed with plain reductions."""
    other = tuple(i for i in range(arr.ndim) if i != axis)
    maxs = arr.max(axis=other)
    mins = arr.min(axis=other)
    return float((maxs.max() - maxs.min()) + (mins.max() - mins.min()))


def brute_force_kmeans(points, k):
    """Oracle: exact minimum within-cluster SSE over all label assignments."""
    n = len(points)
    points = np.asarray(points, dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    best = np.inf
    total = k**n
    codes = np.arange(total)
    for start in range(0, total, 65536):
        chunk = codes[start : start + 65536]
        assign = (chunk[:, None] // k ** np.arange(n)[None, :]) % k
        sse = np.zeros(len(chunk))
        for j in range(k):
            mask = (assign == j).astype(np.float64)
            counts = mask.sum(axis=1)
            sums = mask @ points
            sq = mask @ (points**2).sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                centered = sq - (sums**2).sum(axis=1) / counts
            sse += np.where(counts > 0, centered, 0.0)
        best = min(best, float(sse.min()))
    return best


OUTLIER_TENSOR = np.array([[0, 0, 10], [0, 0, 10.5]], dtype=np.float32)


class TestDimensionScore:
    def test_channel_score(self):
        t = Tensor(OUTLIER_TENSOR, ("pixel", "channel"))
        stats = compute_dimension_score(t, CHANNEL)
        assert stats.score == pytest.approx(20.5)
        assert stats.score == pytest.approx(direct_dscore(OUTLIER_TENSOR, 1))

    def test_pixel_score(self):
        t = Tensor(OUTLIER_TENSOR, ("pixel", "channel"))
        stats = compute_dimension_score(t, PIXEL)
        assert stats.score == pytest.approx(0.5)
        assert stats.score == pytest.approx(direct_dscore(OUTLIER_TENSOR, 0))

    def test_constant_tensor_zero_scores(self):
        t = Tensor(np.full((4, 6), 2.0, dtype=np.float32))
        assert compute_dimension_score(t, CHANNEL).score == 0.0
        assert compute_dimension_score(t, PIXEL).score == 0.0

    def test_batch_axis_folds_into_stats(self):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((3, 5, 7)).astype(np.float32)
        t = Tensor(arr, ("other", "pixel", "channel"))
        stats = compute_dimension_score(t, CHANNEL)
        assert stats.score == pytest.approx(direct_dscore(arr, 2))

    def test_selection(self):
        t = Tensor(OUTLIER_TENSOR, ("pixel", "channel"))
        sc = compute_dimension_score(t, CHANNEL)
        sp = compute_dimension_score(t, PIXEL)
        assert select_dimension(sc, sp) == CHANNEL

    def test_tie_goes_to_channel(self):
        s = DimensionStats(CHANNEL, np.zeros(3), np.ones(3))
        p = DimensionStats(PIXEL, np.zeros(3), np.ones(3))
        assert select_dimension(s, p) == CHANNEL

    def test_planted_pixel_outlier_selected(self):
        rng = np.random.default_rng(1)
        arr = rng.uniform(0.5, 1.5, (32, 16)).astype(np.float32)
        arr[7, :] *= 100.0
        t = Tensor(arr, ("pixel", "channel"))
        sc = compute_dimension_score(t, CHANNEL)
        sp = compute_dimension_score(t, PIXEL)
        assert sp.score == pytest.approx(direct_dscore(arr, 0))
        assert select_dimension(sc, sp) == PIXEL


class TestClusterRanges:
    def test_clear_split(self):
        mins = np.array([0.0, 0.0, 90.0])
        maxs = np.array([1.0, 1.1, 100.0])
        assign = cluster_ranges(mins, maxs, 2)
        assert assign.tolist() == [0, 0, 1]
        got = kmeans_objective(mins, maxs, assign)
        assert got <= brute_force_kmeans(np.stack([mins, maxs], 1), 2) * (1 + 1e-9)

    def test_k_equals_n(self):
        mins = np.array([0.0, 1.0, 2.0, 3.0])
        maxs = mins + 1
        assign = cluster_ranges(mins, maxs, 4)
        assert sorted(assign.tolist()) == [0, 1, 2, 3]

    def test_identical_vectors_split_repaired(self):
        mins = np.zeros(5)
        maxs = np.ones(5)
        assign = cluster_ranges(mins, maxs, 2)
        assert set(assign.tolist()) == {0, 1}

    def test_k_too_large_rejected(self):
        with pytest.raises(ValueError):
            cluster_ranges(np.zeros(2), np.ones(2), 3)

    def test_relabeled_by_ascending_mean_range(self):
        mins = np.array([0.0, 0.0, -50.0, -49.0])
        maxs = np.array([1.0, 1.2, 50.0, 51.0])
        assign = cluster_ranges(mins, maxs, 2)
        assert assign.tolist() == [0, 0, 1, 1]

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        mins = rng.uniform(-5, 0, 12)
        maxs = mins + rng.uniform(0.1, 10, 12)
        assign = cluster_ranges(mins, maxs, 3)
        perm = rng.permutation(12)
        assign_p = cluster_ranges(mins[perm], maxs[perm], 3)
        np.testing.assert_array_equal(assign[perm], assign_p)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        mins = rng.uniform(-5, 0, 20)
        maxs = mins + rng.uniform(0.1, 10, 20)
        a1 = cluster_ranges(mins, maxs, 4)
        a2 = cluster_ranges(mins, maxs, 4)
        np.testing.assert_array_equal(a1, a2)

    def test_near_optimal_on_small_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            k = int(rng.integers(1, 4))
            n = int(rng.integers(k, 10))
            centers = rng.uniform(-20, 20, (k, 2))
            pts = centers[rng.integers(0, k, n)] + rng.normal(0, 0.5, (n, 2))
            mins = pts.min(axis=1)
            maxs = pts.max(axis=1)
            assign = cluster_ranges(mins, maxs, k)
            ours = kmeans_objective(mins, maxs, assign)
            best = brute_force_kmeans(np.stack([mins, maxs], 1), k)
            assert ours <= best * 1.05 + 1e-12


def single_timestep_set(tmp_path, arr, roles=("pixel", "channel")):
    return write_manifest(
        tmp_path,
        layers=[{"id": "l0", "shape": list(arr.shape), "axis_roles": list(roles)}],
        entries={("l0", 0, 0): arr},
        num_timesteps=1,
    )


class TestFitScheme:
    def test_eq6_parameters(self, tmp_path):
        # channels with ranges [0,1], [0,1.1], [90,100]; K=2, b=8
        arr = np.array([[0, 0, 90], [1, 1.1, 100]], dtype=np.float32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        scheme = fit_group_scheme(cal, "l0", 2, 8)
        assert scheme.dim == CHANNEL
        assert scheme.assignment.tolist() == [0, 0, 1]
        assert scheme.scales[0, 0] == pytest.approx(1.1 / 256)
        assert scheme.offsets[0, 0] == 0.0
        assert scheme.scales[0, 1] == pytest.approx(10 / 256)
        assert scheme.offsets[0, 1] == 90.0

    def test_k1_matches_layerwise_minmax_calibration(self, tmp_path):
        rng = np.random.default_rng(5)
        arr = rng.standard_normal((8, 6)).astype(np.float32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        scheme = fit_group_scheme(cal, "l0", 1, 8)
        p = calibrate_minmax(arr, 8)
        assert scheme.scales[0, 0] == p.scale
        assert scheme.offsets[0, 0] == p.offset

    def test_doubled_timestep_scales_parameters(self, tmp_path):
        rng = np.random.default_rng(6)
        arr = rng.standard_normal((8, 6)).astype(np.float32)
        path = write_manifest(
            tmp_path,
            layers=[{"id": "l0", "shape": [8, 6], "axis_roles": ["pixel", "channel"]}],
            entries={("l0", 0, 0): arr, ("l0", 1, 0): 2 * arr},
            num_timesteps=2,
        )
        cal = load_calibration_set(path)
        scheme = fit_group_scheme(cal, "l0", 3, 8)
        np.testing.assert_allclose(scheme.scales[1], 2 * scheme.scales[0])
        np.testing.assert_allclose(scheme.offsets[1], 2 * scheme.offsets[0])

    def test_json_roundtrip(self, tmp_path):
        arr = np.array([[0, 0, 90], [1, 1.1, 100]], dtype=np.float32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        scheme = fit_group_scheme(cal, "l0", 2, 8)
        d = scheme.to_dict()
        assert set(d) >= {"layer", "dim", "K", "bits", "assignment", "table"}
        back = GroupQuantScheme.from_dict(d)
        np.testing.assert_array_equal(back.assignment, scheme.assignment)
        np.testing.assert_array_equal(back.scales, scheme.scales)
        path = tmp_path / "scheme.json"
        scheme.save(path)
        assert GroupQuantScheme.load(path).to_dict() == d


class TestApply:
    def test_k1_bit_identical_to_layerwise(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(10):
            arr = (rng.standard_normal((6, 5)) * rng.uniform(0.1, 10)).astype(np.float32)
            sub = tmp_path / str(i)
            sub.mkdir()
            cal = load_calibration_set(single_timestep_set(sub, arr))
            scheme = fit_group_scheme(cal, "l0", 1, 8)
            got = apply_group_quant(Tensor(arr, ("pixel", "channel")), scheme, 0)
            p = calibrate_minmax(arr, 8)
            want = fake_quantize(arr, p)
            assert got.data.tobytes() == want.tobytes()

    def test_outlier_value_within_group_bound(self, tmp_path):
        arr = np.array([[0, 0, 90], [1, 1.1, 100]], dtype=np.float32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        scheme = fit_group_scheme(cal, "l0", 2, 8)
        x = np.array([[0.5, 0.2, 95.0], [0.1, 1.0, 93.0]], dtype=np.float32)
        out = apply_group_quant(Tensor(x, ("pixel", "channel")), scheme, 0)
        err_outlier = np.abs(out.data[:, 2] - x[:, 2]).max()
        assert err_outlier <= (10 / 256) / 2 + 1e-6

    def test_group_vs_layerwise_outlier_error(self, tmp_path):
        # the s/2 bound covers the range maximum only when it is representable,
        # i.e. under the 2^b-1 denominator; 2^b clamps the top code by design
        arr = np.array([[0, 0, 90], [1, 1.1, 100]], dtype=np.float32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        cfg = GroupQuantConfig(denominator="2^b-1")
        scheme = fit_group_scheme(cal, "l0", 2, 8, cfg)
        out_group = apply_group_quant(Tensor(arr, ("pixel", "channel")), scheme, 0)
        p = calibrate_minmax(arr, 8, denominator="2^b-1")
        out_layer = fake_quantize(arr, p)
        err_g = np.abs(out_group.data - arr).max()
        assert err_g <= (10 / 255) / 2 + 1e-6
        assert np.abs(out_layer - arr).max() <= p.scale / 2 + 1e-6
        assert (10 / 256) / 2 == pytest.approx(0.0195, abs=5e-4)
        assert (100 / 256) / 2 == pytest.approx(0.195, abs=5e-4)

    def test_per_value_error_bounded_by_own_group_scale(self, tmp_path):
        rng = np.random.default_rng(8)
        arr = rng.standard_normal((16, 12)).astype(np.float32)
        arr[:, 3] += 40
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        # strict s/2 bound under the representable-max denominator
        scheme = fit_group_scheme(cal, "l0", 4, 6, GroupQuantConfig(denominator="2^b-1"))
        out = apply_group_quant(Tensor(arr, ("pixel", "channel")), scheme, 0)
        err = np.abs(out.data.astype(np.float64) - arr)
        for c in range(12):
            s = scheme.scales[0, scheme.assignment[c]]
            ulp = np.spacing(np.abs(arr[:, c]).max().astype(np.float32))
            assert err[:, c].max() <= s / 2 + float(ulp)
        # default denominator 2^b clamps the top code: bound is s there
        scheme2 = fit_group_scheme(cal, "l0", 4, 6)
        out2 = apply_group_quant(Tensor(arr, ("pixel", "channel")), scheme2, 0)
        err2 = np.abs(out2.data.astype(np.float64) - arr)
        for c in range(12):
            s = scheme2.scales[0, scheme2.assignment[c]]
            ulp = np.spacing(np.abs(arr[:, c]).max().astype(np.float32))
            assert err2[:, c].max() <= s + float(ulp)

    def test_shape_mismatch_rejected(self, tmp_path):
        arr = np.ones((4, 3), dtype=np.float32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        scheme = fit_group_scheme(cal, "l0", 1, 8)
        with pytest.raises(PlanError):
            apply_group_quant(Tensor(np.ones((4, 7), dtype=np.float32),
                                     ("pixel", "channel")), scheme, 0)

    def test_bad_timestep_rejected(self, tmp_path):
        arr = np.ones((4, 3), dtype=np.float32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        scheme = fit_group_scheme(cal, "l0", 1, 8)
        with pytest.raises(ValueError):
            apply_group_quant(Tensor(arr, ("pixel", "channel")), scheme, 1)

    def test_monotone_error_in_groups(self, tmp_path):
        rng = np.random.default_rng(9)
        arr = rng.standard_normal((32, 16)).astype(np.float32)
        arr[:, 2] = 10 + 0.2 * rng.standard_normal(32)
        arr[:, 9] = -10 + 0.2 * rng.standard_normal(32)
        cal = load_calibration_set(single_timestep_set(tmp_path, arr))
        t = Tensor(arr, ("pixel", "channel"))
        mses = {}
        for k in (1, 2, 4, 8):
            scheme = fit_group_scheme(cal, "l0", k, 6)
            out = apply_group_quant(t, scheme, 0)
            mses[k] = float(np.mean((out.data.astype(np.float64) - arr) ** 2))
        assert all(mses[k] <= mses[1] for k in (2, 4, 8))


class TestRank4Nchw:
    def _set(self, tmp_path, arr):
        return load_calibration_set(
            write_manifest(
                tmp_path,
                layers=[{"id": "conv", "shape": list(arr.shape),
                         "axis_roles": ["other", "channel", "pixel", "pixel"]}],
                entries={("conv", 0, 0): arr},
                num_timesteps=1,
            )
        )

    def test_channel_grouping_matches_per_channel_oracle(self, tmp_path):
        rng = np.random.default_rng(10)
        arr = rng.standard_normal((2, 12, 4, 5)).astype(np.float32)
        arr[:, 3] = 10 + 0.2 * rng.standard_normal((2, 4, 5))
        cal = self._set(tmp_path, arr)
        scheme = fit_group_scheme(cal, "conv", 12, 8)
        assert scheme.dim == CHANNEL
        assert len(scheme.assignment) == 12
        t = Tensor(arr, ("other", "channel", "pixel", "pixel"))
        out = apply_group_quant(t, scheme, 0).data
        # oracle: each channel slice fake-quantized with its own minmax params
        for c in range(12):
            sl = arr[:, c]
            want = fake_quantize(sl, calibrate_minmax(sl, 8))
            assert out[:, c].tobytes() == want.tobytes()

    def test_pixel_grouping_spans_height_and_width(self, tmp_path):
        rng = np.random.default_rng(11)
        arr = rng.uniform(0.5, 1.5, (2, 6, 4, 5)).astype(np.float32)
        arr[:, :, 2, 3] *= 10  # one hot pixel across all channels and batch
        cal = self._set(tmp_path, arr)
        scheme = fit_group_scheme(cal, "conv", 2, 8)
        assert scheme.dim == PIXEL
        assert len(scheme.assignment) == 4 * 5
        # the hot pixel (row-major position 2*5+3) sits alone in the top group
        assert scheme.assignment[2 * 5 + 3] == 1
        assert (scheme.assignment == 1).sum() == 1
        t = Tensor(arr, ("other", "channel", "pixel", "pixel"))
        out = apply_group_quant(t, scheme, 0).data
        hot = arr[:, :, 2, 3]
        want = fake_quantize(hot, calibrate_minmax(hot, 8))
        assert out[:, :, 2, 3].tobytes() == want.tobytes()


class TestOverhead:
    def test_timestep_group_table_bytes(self):
        scheme = GroupQuantScheme(
            layer_id="all",
            dim=CHANNEL,
            num_groups=16,
            bits=8,
            assignment=np.arange(16),
            scales=np.ones((25, 16)),
            offsets=np.zeros((25, 16)),
        )
        assert scheme_overhead_bytes(scheme, 3008) == 2_406_400

    def test_trivial_cases(self):
        scheme = GroupQuantScheme(
            layer_id="l",
            dim=CHANNEL,
            num_groups=1,
            bits=8,
            assignment=np.zeros(4, dtype=np.int32),
            scales=np.ones((1, 1)),
            offsets=np.zeros((1, 1)),
        )
        assert scheme_overhead_bytes(scheme, 12) == 24

    def test_linear_in_groups(self):
        def make(k):
            return GroupQuantScheme(
                layer_id="l",
                dim=CHANNEL,
                num_groups=k,
                bits=8,
                assignment=np.arange(k),
                scales=np.ones((3, k)),
                offsets=np.zeros((3, k)),
            )

        assert scheme_overhead_bytes(make(8), 4) == 2 * scheme_overhead_bytes(make(4), 4)
