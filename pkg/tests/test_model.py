import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskreg.dataset import ImageBuffer, Strategy
from maskreg.errors import DataError, ModelFormatError
from maskreg.evaluation import train
from maskreg.model import (MAGIC, Mapping, SparseRowModel, count_nonzeros, from_bytes, load,
                           relative_importance, save, synthesize, synthesize_raw, to_bytes,
                           weight_only_synthesize)
from maskreg.synthetic import local_linear_task
from maskreg.topology import RfGeometry, build_topology, total_parameters


def random_model(rng, size=4, r=3, d=1, strategy=Strategy.GRAY, zero_bias=False):
    g = RfGeometry.square(size, r, d)
    topo = build_topology(g)
    maps = [Mapping.from_topology(topo, rng.normal(size=topo.n_weights),
                                  np.zeros(g.n_outputs) if zero_bias else rng.normal(size=g.n_outputs))
            for _ in range(strategy.n_mappings)]
    return SparseRowModel(g, strategy, maps)


def identity_model(size=5, r=3):
    g = RfGeometry.square(size, r)
    topo = build_topology(g)
    w = np.array([1.0 if i == k else 0.0 for k in range(len(topo)) for i in topo[k]])
    return SparseRowModel(g, "gray", [Mapping.from_topology(topo, w, np.zeros(len(topo)))])


class TestSynthesize:
    def test_zero_weights_give_clamped_bias(self, rng):
        g = RfGeometry.square(4, 3)
        topo = build_topology(g)
        b = rng.normal(0.5, 0.8, 16)
        m = SparseRowModel(g, "gray", [Mapping.from_topology(topo, np.zeros(topo.n_weights), b)])
        out = synthesize(m, ImageBuffer(rng.random((1, 4, 4))))
        np.testing.assert_array_equal(out.data.ravel(), np.clip(b, 0, 1))

    def test_identity(self, rng):
        x = ImageBuffer(rng.random((1, 5, 5)))
        np.testing.assert_array_equal(synthesize(identity_model(), x).data, x.data)

    def test_dense_oracle(self, rng):
        m = random_model(rng)
        x = rng.random((1, 4, 4))
        W = m.mappings[0].dense()
        expected = W @ x.ravel() + m.mappings[0].bias
        np.testing.assert_allclose(synthesize_raw(m, ImageBuffer(x)).ravel(), expected, atol=1e-12)

    def test_weight_only(self, rng):
        m = random_model(rng)
        x = ImageBuffer(rng.random((1, 4, 4)))
        diff = synthesize_raw(m, x) - weight_only_synthesize(m, x, clamp=False).data
        np.testing.assert_allclose(diff.ravel(), m.mappings[0].bias, atol=1e-12)
        W = m.mappings[0].dense()
        np.testing.assert_allclose(weight_only_synthesize(m, x, clamp=False).data.ravel(),
                                   W @ x.data.ravel(), atol=1e-12)

    def test_weight_only_equals_full_without_bias(self, rng):
        m = random_model(rng, zero_bias=True)
        x = ImageBuffer(rng.random((1, 4, 4)))
        np.testing.assert_array_equal(synthesize(m, x).data, weight_only_synthesize(m, x).data)

    def test_affine_combination(self, rng):
        m = random_model(rng, 6)
        x1, x2 = rng.random((1, 6, 6)), rng.random((1, 6, 6))
        a = 0.3
        lhs = synthesize_raw(m, ImageBuffer(a * x1 + (1 - a) * x2))
        rhs = a * synthesize_raw(m, ImageBuffer(x1)) + (1 - a) * synthesize_raw(m, ImageBuffer(x2))
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_locality(self, rng):
        g = RfGeometry.square(7, 3, 2)
        m = random_model(rng, 7, 3, 2)
        topo = build_topology(g)
        x = rng.random((1, 7, 7))
        base = synthesize_raw(m, ImageBuffer(x)).ravel()
        p = 24
        x2 = x.copy()
        x2.flat[p] += 0.5
        changed = np.flatnonzero(synthesize_raw(m, ImageBuffer(x2)).ravel() != base)
        watchers = [k for k in range(len(topo)) if p in topo[k]]
        assert changed.tolist() == watchers

    def test_per_channel_uses_each_mapping(self, rng):
        m = random_model(rng, strategy=Strategy.PER_CHANNEL)
        x = rng.random((3, 4, 4))
        out = synthesize_raw(m, ImageBuffer(x))
        for c in range(3):
            np.testing.assert_allclose(out[c].ravel(), m.mappings[c].dense() @ x[c].ravel()
                                       + m.mappings[c].bias, atol=1e-12)

    def test_replicate_applies_same_mapping(self, rng):
        m = random_model(rng, strategy=Strategy.REPLICATE_GRAY)
        x = rng.random((3, 4, 4))
        out = synthesize_raw(m, ImageBuffer(x))
        for c in range(3):
            np.testing.assert_allclose(out[c].ravel(), m.mappings[0].apply(x[c].ravel()), atol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 5, 4), (3, 4, 4)])
    def test_mismatch(self, rng, shape):
        with pytest.raises(DataError):
            synthesize(random_model(rng), ImageBuffer(rng.random(shape)))


class TestIntrospection:
    def test_parameter_count_matches_topology(self):
        pairs, _ = local_linear_task(12, size=8)
        m = train(pairs, "mr", 1.0, taps_per_side=5, dilation=2)
        assert m.n_parameters == total_parameters(build_topology(RfGeometry.square(8, 5, 2)))

    def test_count_nonzeros(self, rng):
        g = RfGeometry.square(5, 3)
        topo = build_topology(g)
        zero = SparseRowModel(g, "gray", [Mapping.from_topology(topo, np.zeros(topo.n_weights), np.zeros(25))])
        assert count_nonzeros(zero, 0.0) == 0
        assert count_nonzeros(identity_model(), 1e-12) == 25

    def test_relative_importance(self, rng):
        m = random_model(rng, zero_bias=True)
        imgs = [ImageBuffer(rng.random((1, 4, 4))) for _ in range(3)]
        wx, b, _ = relative_importance(m, imgs)
        assert b == 0.0 and wx > 0
        g = m.geometry
        const = SparseRowModel(g, "gray", [Mapping(m.mappings[0].indptr, m.mappings[0].indices,
                                                   m.mappings[0].weights, np.full(16, -0.25), 16)])
        assert relative_importance(const, imgs)[1] == pytest.approx(0.25)
        with pytest.raises(DataError):
            relative_importance(m, [])

    def test_identity_task_is_weight_dominated(self, rng):
        xs = [ImageBuffer(rng.random((1, 6, 6))) for _ in range(20)]
        m = train([(x, x) for x in xs], "mr", 1e-6, taps_per_side=3)
        wx, b, ratio = relative_importance(m, xs)
        assert b < 1e-3 and ratio > 100


class TestPersistence:
    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_round_trip(self, tmp_path, rng, strategy):
        m = random_model(rng, 5, 3, 2, strategy)
        save(m, tmp_path / "m.lrm")
        back = load(tmp_path / "m.lrm")
        assert back.equals(m)
        assert to_bytes(back) == to_bytes(m)

    def test_sparse_rows_round_trip(self, rng):
        pairs, _ = local_linear_task(15, size=6)
        m = train(pairs, "omp", 3)
        assert from_bytes(to_bytes(m)).equals(m)

    def test_header_layout(self, rng):
        buf = to_bytes(random_model(rng, 4, 3, 1))
        assert buf[:4] == MAGIC
        assert struct.unpack_from("<HB6H", buf, 4) == (1, 0, 4, 4, 4, 4, 3, 1)
        assert struct.unpack_from("<I", buf, len(buf) - 4)[0] == zlib.crc32(buf[:-4])

    def test_bad_magic(self, rng):
        buf = bytearray(to_bytes(random_model(rng)))
        buf[:4] = b"XXXX"
        with pytest.raises(ModelFormatError, match="LRFM"):
            from_bytes(bytes(buf))

    def test_bad_version(self, rng):
        buf = bytearray(to_bytes(random_model(rng)))
        buf[4:6] = struct.pack("<H", 9)
        with pytest.raises(ModelFormatError, match="version 9"):
            from_bytes(bytes(buf))

    def test_truncated_mid_row(self, rng):
        m = random_model(rng, 4, 3)
        buf = to_bytes(m)
        # header 19 bytes; row 0 has 4 taps: 4 + 4*12 + 8 = 60 bytes; cut inside row 1
        with pytest.raises(ModelFormatError, match="row 1"):
            from_bytes(buf[:19 + 60 + 20])

    def test_index_out_of_range(self, rng):
        buf = bytearray(to_bytes(random_model(rng, 4, 3)))
        struct.pack_into("<I", buf, 19 + 4, 99)
        with pytest.raises(ModelFormatError, match="row 0"):
            from_bytes(bytes(buf))

    def test_checksum(self, rng):
        buf = bytearray(to_bytes(random_model(rng)))
        buf[-12] ^= 0x01
        with pytest.raises(ModelFormatError, match="checksum"):
            from_bytes(bytes(buf))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFormatError):
            load(tmp_path / "nothing.lrm")

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), size=st.integers(1, 7), r=st.sampled_from([1, 3, 5]))
    def test_round_trip_property(self, seed, size, r):
        m = random_model(np.random.default_rng(seed), size, r)
        assert from_bytes(to_bytes(m)).equals(m)
