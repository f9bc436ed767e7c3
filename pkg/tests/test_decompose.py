import numpy as np
import pytest

from mxblock.decompose import (
    DecompReport,
    decompose_tensor,
    orthogonality_check,
    scale_precision_sweep,
    tensor_stats,
    verify_identity,
)
from mxblock.quantize import BlockQuantConfig

WORKED_X = np.array([0.03, 0.1, 0.3, 0.5, 0.9, 1.5, 2.0, 4.0])
WORKED_E_SCALE = np.array([0.0, 0.0, 1 / 6, -1 / 6, 0.0, 1 / 6, 0.0, 0.0])
WORKED_E_DZ = np.array([-0.03, -0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
WORKED_E_GRID = np.array([0.0, 0.0, 1 / 30, 1 / 6, 0.1, -1 / 6, 0.0, 0.0])


def _cfg8():
    return BlockQuantConfig(block_size=8)


def _families(rng, shape=(64, 96)):
    yield "gaussian", rng.standard_normal(shape)
    yield "laplace", rng.laplace(size=shape)
    yield "student_t", rng.standard_t(5.0, size=shape)


class TestWorkedBlock:
    def setup_method(self):
        self.d = decompose_tensor(WORKED_X, _cfg8())

    def test_component_vectors(self):
        np.testing.assert_allclose(self.d.e_scale, WORKED_E_SCALE, atol=1e-15)
        np.testing.assert_allclose(self.d.e_dz, WORKED_E_DZ, atol=1e-15)
        np.testing.assert_allclose(self.d.e_grid, WORKED_E_GRID, atol=1e-15)

    def test_norms(self):
        assert self.d.n2_scale == pytest.approx(1 / 12, abs=1e-12)
        assert self.d.n2_dz == pytest.approx(0.0109, abs=1e-12)
        assert self.d.n2_grid == pytest.approx(1 / 15, abs=1e-12)
        assert self.d.n2_total == pytest.approx(0.0609, abs=1e-12)

    def test_cross_term(self):
        assert self.d.ip_scale_grid == pytest.approx(-0.05, abs=1e-12)
        assert self.d.ip_scale_dz == 0.0
        assert self.d.ip_dz_grid == 0.0

    def test_dz_fraction(self):
        assert self.d.dz_fraction == 0.25

    def test_identity(self):
        assert verify_identity(self.d) <= 1e-9

    def test_cosine(self):
        want = -0.05 / np.sqrt((1 / 12) * (1 / 15))
        assert self.d.cos_scale_grid == pytest.approx(want, rel=1e-12)
        assert self.d.cos_defined["scale_grid"]


class TestIdentityAndOrthogonality:
    def test_identity_across_families_and_m(self):
        rng = np.random.default_rng(30)
        for _, x in _families(rng):
            for m in range(9):
                cfg = BlockQuantConfig(scale_mantissa_bits=m)
                d = decompose_tensor(x, cfg)
                assert verify_identity(d) <= 1e-9

    def test_dz_orthogonality_exact(self):
        # structural: e_dz has disjoint support from e_grid, and e_scale
        # vanishes on dead coordinates (both round to zero index)
        rng = np.random.default_rng(31)
        for _, x in _families(rng):
            d = decompose_tensor(x, BlockQuantConfig())
            assert orthogonality_check(d) == (0.0, 0.0)

    def test_components_sum_to_total(self):
        rng = np.random.default_rng(32)
        x = rng.standard_normal((32, 64))
        d = decompose_tensor(x, BlockQuantConfig())
        np.testing.assert_allclose(
            d.e_scale + d.e_dz + d.e_grid, d.e_total, atol=1e-12)

    def test_independent_inner_product_route(self):
        rng = np.random.default_rng(33)
        x = rng.laplace(size=(16, 64))
        d = decompose_tensor(x, BlockQuantConfig())
        assert d.ip_scale_grid == pytest.approx(
            float((d.e_scale * d.e_grid).sum()), rel=1e-10)
        assert d.n2_total == pytest.approx(
            float((d.e_total ** 2).sum()), rel=1e-10)

    def test_sign_flip_invariance(self):
        rng = np.random.default_rng(34)
        x = rng.standard_normal((8, 64))
        a = decompose_tensor(x, BlockQuantConfig())
        b = decompose_tensor(-x, BlockQuantConfig())
        assert np.array_equal(a.e_scale, -b.e_scale)
        assert a.n2_total == b.n2_total
        assert a.ip_scale_grid == b.ip_scale_grid

    def test_zero_tensor(self):
        d = decompose_tensor(np.zeros((4, 32)), BlockQuantConfig())
        assert d.n2_total == 0.0
        assert not any(d.cos_defined.values())
        assert d.cos_scale_grid == 0.0
        assert d.dz_fraction == 0.0


class TestTensorStats:
    def test_records_sorted_and_complete(self):
        rng = np.random.default_rng(35)
        tensors = {"b": rng.standard_normal((4, 64)),
                   "a": rng.standard_normal((4, 64)),
                   "c": np.zeros((2, 32))}
        rep = tensor_stats(tensors, BlockQuantConfig())
        assert [r["name"] for r in rep.records] == ["a", "b", "c"]
        assert rep.records[2]["zero_error"]
        assert not rep.records[0]["zero_error"]

    def test_shares_partition_unity(self):
        rng = np.random.default_rng(36)
        tensors = {f"t{i}": rng.standard_normal((8, 64)) for i in range(5)}
        rep = tensor_stats(tensors, BlockQuantConfig())
        for r in rep.records:
            total = (r["share_scale"] + r["share_dz"] + r["share_grid"]
                     + r["cross_share"])
            assert total == pytest.approx(1.0, abs=1e-9)
            assert r["identity_residual"] <= 1e-9
            assert r["dz_inner_products"] == [0.0, 0.0]

    def test_aggregates_exclude_zero_error(self):
        rng = np.random.default_rng(37)
        tensors = {"live": rng.standard_normal((8, 64)),
                   "dead": np.zeros((8, 64))}
        rep = tensor_stats(tensors, BlockQuantConfig())
        live = next(r for r in rep.records if r["name"] == "live")
        assert rep.aggregates["share_scale"]["mean"] == live["share_scale"]
        assert rep.aggregates["share_scale"]["std"] == 0.0

    def test_cos_histogram_accounts_live_tensors(self):
        rng = np.random.default_rng(38)
        tensors = {f"t{i}": rng.standard_normal((4, 64)) for i in range(7)}
        rep = tensor_stats(tensors, BlockQuantConfig())
        hist = rep.cos_histogram
        assert len(hist["counts"]) == len(hist["bin_edges"]) - 1
        assert sum(hist["counts"]) == 7
        assert hist["bin_edges"][0] == -1.0 and hist["bin_edges"][-1] == 1.0

    def test_csv_rows_align_with_records(self):
        rng = np.random.default_rng(39)
        rep = tensor_stats({"x": rng.standard_normal((4, 64))},
                           BlockQuantConfig())
        cols, rows = rep.csv_rows()
        assert len(rows) == 1 and len(rows[0]) == len(cols)
        for c, v in zip(cols, rows[0]):
            assert rep.records[0][c] == v

    def test_to_json_dict_round_trip_keys(self):
        rng = np.random.default_rng(40)
        rep = tensor_stats({"x": rng.standard_normal((4, 64))},
                           BlockQuantConfig())
        d = rep.to_json_dict()
        assert set(d) == {"records", "aggregates", "cos_histogram", "config"}
        assert d["config"]["block_size"] == 32

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            tensor_stats({}, BlockQuantConfig())


class TestScalePrecisionSweep:
    def test_grid_and_dz_bitwise_constant(self):
        rng = np.random.default_rng(41)
        x = rng.standard_normal((32, 128))
        d0 = decompose_tensor(x, BlockQuantConfig(scale_mantissa_bits=0))
        d8 = decompose_tensor(x, BlockQuantConfig(scale_mantissa_bits=8))
        assert np.array_equal(d0.e_grid, d8.e_grid)
        assert np.array_equal(d0.e_dz, d8.e_dz)
        assert d0.n2_grid == d8.n2_grid

    def test_rows_and_flag(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((16, 128))
        rows = scale_precision_sweep(x)
        assert [r["M"] for r in rows] == list(range(9))
        flags = {r["mse_monotone"] for r in rows}
        assert len(flags) == 1 and isinstance(flags.pop(), bool)
        for r in rows:
            got = r["mse_scale"] + r["mse_dz"] + r["mse_grid"] + r["cross"]
            assert got == pytest.approx(r["mse_total"], rel=1e-9)

    def test_scale_error_shrinks_with_m(self):
        rng = np.random.default_rng(43)
        x = rng.standard_normal((32, 128))
        rows = scale_precision_sweep(x)
        # e_scale couples to rounding, so it shrinks slower than the pure
        # gamma-ratio mse; measured ratio here is ~87x
        assert rows[8]["mse_scale"] < rows[0]["mse_scale"] / 50.0

    def test_empty_m_list_raises(self):
        with pytest.raises(ValueError, match="empty"):
            scale_precision_sweep(np.ones(32), m_list=[])
