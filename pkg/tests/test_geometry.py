import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphdisp.autodiff import RngStream
from sphdisp.errors import ArityError, DegenerateInputError
from sphdisp.geometry import (
    MetricRecord,
    avg_cosine,
    matrix_entropy,
    metrics_for,
    read_metric_log,
    spherical_variance,
    write_metric_log,
)


def brute_avg_cosine(z):
    n = z.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += z[i] @ z[j] / (np.linalg.norm(z[i]) * np.linalg.norm(z[j]))
    return 2.0 * total / (n * (n - 1))


def brute_spherical_variance(z):
    u = z / np.linalg.norm(z, axis=1)[:, None]
    return 1.0 - np.linalg.norm(u.mean(axis=0))


class TestAvgCosine:
    def test_identical_rows(self):
        z = np.tile([2.0, 1.0, -1.0], (3, 1))
        assert abs(avg_cosine(z) - 1.0) < 1e-9

    def test_orthogonal_rows(self):
        assert abs(avg_cosine(np.eye(2)) - 0.0) < 1e-9

    def test_three_vector_hand_case(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        assert abs(avg_cosine(z) - (-1.0 / 3.0)) < 1e-9
        assert abs(avg_cosine(z) - brute_avg_cosine(z)) < 1e-12

    def test_matches_pairwise_enumeration(self, rng):
        z = rng.normal((12, 5))
        assert abs(avg_cosine(z) - brute_avg_cosine(z)) < 1e-10

    def test_errors(self):
        with pytest.raises(ArityError):
            avg_cosine(np.ones((1, 3)))
        with pytest.raises(DegenerateInputError):
            avg_cosine(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestMatrixEntropy:
    def test_rank_one_is_zero(self, rng):
        row = rng.normal(6)
        z = np.outer(rng.normal(5), row)
        assert abs(matrix_entropy(z)) < 1e-9

    def test_identity_gives_log_d(self):
        assert abs(matrix_entropy(np.eye(4)) - np.log(4)) < 1e-9

    def test_alpha2_on_uniform_spectrum(self):
        assert abs(matrix_entropy(np.eye(4), alpha=2.0) - np.log(4)) < 1e-9

    def test_renyi_orders_on_skewed_spectrum(self, rng):
        z = rng.normal((30, 4)) * np.array([4.0, 2.0, 1.0, 0.5])
        s1 = matrix_entropy(z, 1.0)
        s2 = matrix_entropy(z, 2.0)
        assert s2 <= s1 + 1e-12  # Renyi is non-increasing in alpha

    def test_bounded_by_log_min_dim(self, rng):
        for n, d in [(3, 8), (20, 4), (5, 5)]:
            z = rng.normal((n, d))
            assert matrix_entropy(z) <= np.log(min(n, d)) + 1e-9

    def test_rotation_invariance(self, rng):
        z = rng.normal((15, 6))
        q, _ = np.linalg.qr(rng.normal((6, 6)))
        assert abs(matrix_entropy(z) - matrix_entropy(z @ q)) < 1e-8

    def test_centering_flag_changes_value_not_signature(self, rng):
        z = rng.normal((20, 4)) + 5.0
        assert matrix_entropy(z, center=True) != matrix_entropy(z)
        collapsed = np.tile(rng.normal(4), (10, 1))
        assert matrix_entropy(collapsed) < 1e-9

    def test_errors(self):
        with pytest.raises(DegenerateInputError):
            matrix_entropy(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            matrix_entropy(np.eye(3), alpha=0.0)


class TestSphericalVariance:
    def test_identical_rows(self, rng):
        z = np.tile(rng.normal(4), (5, 1)) * np.array([[1.0], [2.0], [3.0], [4.0], [0.5]])
        assert abs(spherical_variance(z)) < 1e-9

    def test_antipodal_pair(self):
        z = np.array([[1.0, 2.0], [-1.0, -2.0]])
        assert abs(spherical_variance(z) - 1.0) < 1e-9

    def test_two_orthonormal(self):
        assert abs(spherical_variance(np.eye(2)) - (1.0 - np.sqrt(2) / 2)) < 1e-9

    def test_matches_direct_formula(self, rng):
        z = rng.normal((9, 3))
        assert abs(spherical_variance(z) - brute_spherical_variance(z)) < 1e-12

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            spherical_variance(np.array([[0.0, 0.0], [1.0, 0.0]]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = RngStream(seed)
    z = rng.normal((8, 4))
    perm = rng.permutation(8)
    zp = z[perm]
    assert avg_cosine(z) == pytest.approx(avg_cosine(zp), abs=1e-12)
    assert matrix_entropy(z) == pytest.approx(matrix_entropy(zp), abs=1e-10)
    assert spherical_variance(z) == pytest.approx(spherical_variance(zp), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_row_rescaling_invariance(seed):
    rng = RngStream(seed)
    z = rng.normal((8, 4))
    scales = np.exp(rng.normal(8))[:, None]
    assert avg_cosine(z) == pytest.approx(avg_cosine(z * scales), abs=1e-9)
    assert spherical_variance(z) == pytest.approx(
        spherical_variance(z * scales), abs=1e-9
    )


def test_complete_collapse_signature(rng):
    row = rng.normal(6)
    z = np.tile(row, (40, 1)) * np.exp(rng.normal(40))[:, None]
    assert avg_cosine(z) > 1 - 1e-12
    assert matrix_entropy(z) < 1e-9
    assert spherical_variance(z) < 1e-12


class TestMetricRecord:
    def test_round_trip(self):
        rec = MetricRecord(10, "E", 0.5, 1.25, 0.75)
        back = MetricRecord.from_json_line(rec.to_json_line())
        assert back == rec

    def test_json_schema(self):
        obj = json.loads(MetricRecord(3, "H", 0.1, 2.0, 0.9).to_json_line())
        assert set(obj) == {"step", "component", "avg_cos", "entropy", "svar"}

    def test_validation(self):
        with pytest.raises(ValueError):
            MetricRecord(0, "X", 0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            MetricRecord(0, "H", 1.5, 0.0, 0.0)
        with pytest.raises(ValueError):
            MetricRecord(0, "H", 0.0, -0.1, 0.0)
        with pytest.raises(ValueError):
            MetricRecord(0, "H", 0.0, 0.0, 1.5)

    def test_log_round_trip_with_meta(self, tmp_path, rng):
        records = [metrics_for(rng.normal((6, 3)), step, comp) for step in (0, 5) for comp in "HEF"]
        path = tmp_path / "m.jsonl"
        write_metric_log(path, records, meta={"config_hash": "abc", "seed": 1})
        assert read_metric_log(path) == records
