import numpy as np
import pytest

from finermoe.config import FineRConfig, baseline_preset, derive
from finermoe.moe_layer import forward_forced
from finermoe.numerics import Rng
from finermoe.oracle import dense_ffn_forward
from finermoe.upcycle import (
    ROUTER_INIT_STD,
    drop_upcycle,
    expert_slice_indices,
    random_dense,
    upcycle,
)


class TestSliceIndices:
    def test_two_by_two_grid(self):
        cfg = FineRConfig(h=8, H=8, G_I=2, R_I=1, G_O=2, R_O=1)
        got = [(a.i_slice, a.j_slice) for a in (expert_slice_indices(k, cfg) for k in range(4))]
        assert got == [(0, 0), (1, 0), (0, 1), (1, 1)]

    def test_pure_replication(self):
        cfg = FineRConfig(h=8, H=8, G_I=1, R_I=2, G_O=1, R_O=1)
        for k in (0, 1):
            a = expert_slice_indices(k, cfg)
            assert (a.i_slice, a.j_slice) == (0, 0)

    def test_expert_zero_is_always_origin(self):
        for cfg in [
            FineRConfig(h=8, H=8, G_I=2, R_I=2, G_O=2, R_O=2),
            FineRConfig(h=8, H=8, G_I=4, R_I=1, G_O=1, R_O=2),
            FineRConfig(h=8, H=8),
        ]:
            a = expert_slice_indices(0, cfg)
            assert (a.i_slice, a.j_slice) == (0, 0)

    def test_out_of_range(self):
        cfg = FineRConfig(h=8, H=8, G_I=2, R_I=1, G_O=1, R_O=1)
        with pytest.raises(ValueError, match="out of range"):
            expert_slice_indices(2, cfg)


class TestUpcycle:
    def test_replication_preset_copies_dense(self):
        cfg = baseline_preset("C32A2", h=16, H=32)
        dense = random_dense(16, 32, 1)
        model = upcycle(dense, cfg, 2)
        assert len(model.experts) == 32
        for e in model.experts:
            assert e.w1.a.tobytes() == dense.w1.a.tobytes()
            assert e.wg.a.tobytes() == dense.wg.a.tobytes()
            assert e.w2.a.tobytes() == dense.w2.a.tobytes()

    def test_split_preset_tiles_dense_exactly(self):
        cfg = baseline_preset("S16A4", h=16, H=32)
        dense = random_dense(16, 32, 3)
        model = upcycle(dense, cfg, 4)
        w1_cat = np.concatenate([e.w1.a for e in model.experts], axis=1)
        wg_cat = np.concatenate([e.wg.a for e in model.experts], axis=1)
        w2_cat = np.concatenate([e.w2.a for e in model.experts], axis=0)
        assert w1_cat.tobytes() == dense.w1.a.tobytes()
        assert wg_cat.tobytes() == dense.wg.a.tobytes()
        assert w2_cat.tobytes() == dense.w2.a.tobytes()
        assert model.shared is None

    def test_nvshard_replicates_split_parts(self):
        cfg = baseline_preset("NVShard", h=16, H=32)
        dense = random_dense(16, 32, 5)
        model = upcycle(dense, cfg, 6)
        assert len(model.experts) == 64
        for k in range(64):
            twin = model.experts[(k + 8) % 64]
            assert model.experts[k].w1.a.tobytes() == twin.w1.a.tobytes()
            assert model.experts[k].w2.a.tobytes() == twin.w2.a.tobytes()

    def test_two_dim_partition_tiles_w2(self):
        cfg = FineRConfig(h=16, H=32, G_I=4, R_I=1, G_O=2, R_O=1, T_I=1)
        dense = random_dense(16, 32, 7)
        model = upcycle(dense, cfg, 8)
        dims = derive(cfg)
        rebuilt = np.zeros_like(dense.w2.a)
        for k, e in enumerate(model.experts):
            a = expert_slice_indices(k, cfg)
            rebuilt[
                a.i_slice * dims.H_e : (a.i_slice + 1) * dims.H_e,
                a.j_slice * dims.h_e : (a.j_slice + 1) * dims.h_e,
            ] = e.w2.a
        assert rebuilt.tobytes() == dense.w2.a.tobytes()

    def test_reconstruction_identity(self):
        cfg = FineRConfig(h=64, H=128, G_I=32, R_I=1, G_O=2, R_O=2, T_I=1, share_expert=False)
        dense = random_dense(64, 128, 9).astype(np.float64)
        model = upcycle(dense, cfg, 10).astype(np.float64)
        x = Rng(11).matrix(16, 64, dtype=np.float64)
        got = forward_forced(x, model).a
        want = dense_ffn_forward(x, dense).a
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-5

    def test_duplicated_slices_double_the_forced_output(self):
        # R_I=2: every intermediate slice appears twice per group, so the
        # forced path (all weights 1) reproduces twice the dense output.
        cfg = FineRConfig(h=64, H=128, G_I=8, R_I=2, G_O=2, R_O=2, T_I=1, share_expert=False)
        dense = random_dense(64, 128, 35).astype(np.float64)
        model = upcycle(dense, cfg, 36).astype(np.float64)
        x = Rng(37).matrix(12, 64, dtype=np.float64)
        got = forward_forced(x, model).a
        want = 2.0 * dense_ffn_forward(x, dense).a
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-5

    def test_experts_own_their_storage(self):
        cfg = FineRConfig(h=8, H=8, G_I=1, R_I=2, G_O=1, R_O=1, T_I=1)
        dense = random_dense(8, 8, 12)
        model = upcycle(dense, cfg, 13)
        model.experts[0].w1.a[0, 0] += 1.0
        assert model.experts[1].w1.a[0, 0] == dense.w1.a[0, 0]
        assert model.shared.w1.a[0, 0] == dense.w1.a[0, 0]

    def test_dims_mismatch_rejected(self):
        with pytest.raises(ValueError, match="do not match config"):
            upcycle(random_dense(8, 16, 1), FineRConfig(h=8, H=32), 0)

    def test_router_init_statistics_and_determinism(self):
        cfg = FineRConfig(h=64, H=64, G_I=8, R_I=1, G_O=2, R_O=2, T_I=1)
        dense = random_dense(64, 64, 14)
        a = upcycle(dense, cfg, 15)
        b = upcycle(dense, cfg, 15)
        c = upcycle(dense, cfg, 16)
        assert a.router.w.a.tobytes() == b.router.w.a.tobytes()
        assert a.router.w.a.tobytes() != c.router.w.a.tobytes()
        assert abs(float(a.router.w.a.std()) - ROUTER_INIT_STD) < 0.002

    def test_separate_mode_gets_second_router(self):
        cfg = FineRConfig(h=16, H=16, G_I=2, R_I=1, G_O=2, R_O=2, T_I=1, router_mode="separate")
        model = upcycle(random_dense(16, 16, 17), cfg, 18)
        assert model.router_cc is not None
        assert model.router_cc.w.shape == (16, derive(cfg).n_groups)


class TestDropUpcycle:
    def test_zero_ratio_equals_replication(self):
        dense = random_dense(8, 16, 20)
        dropped = drop_upcycle(dense, 4, 0.0, 2, seed=21)
        plain = upcycle(dense, FineRConfig(h=8, H=16, G_I=1, R_I=4, T_I=2), seed=21)
        for a, b in zip(dropped.experts, plain.experts):
            assert a.w1.a.tobytes() == b.w1.a.tobytes()
            assert a.w2.a.tobytes() == b.w2.a.tobytes()

    def test_full_ratio_replaces_everything(self):
        dense = random_dense(8, 16, 22)
        model = drop_upcycle(dense, 3, 1.0, 2, seed=23)
        for e in model.experts:
            assert not np.any(e.w1.a == dense.w1.a)
            assert not np.any(e.w2.a == dense.w2.a)
        # Shared expert is untouched by the re-init.
        assert model.shared.w1.a.tobytes() == dense.w1.a.tobytes()

    def test_half_ratio_binomial_concentration(self):
        dense = random_dense(64, 256, 24)  # 16384 entries per up/gate matrix
        model = drop_upcycle(dense, 2, 0.5, 1, seed=25)
        for e in model.experts:
            kept = float(np.mean(e.w1.a == dense.w1.a))
            assert abs(kept - 0.5) < 0.02

    def test_redrawn_entries_match_donor_std(self):
        dense = random_dense(64, 256, 26)
        model = drop_upcycle(dense, 1, 1.0, 1, seed=27)
        donor_std = float(dense.w1.a.std())
        drawn_std = float(model.experts[0].w1.a.std())
        assert abs(drawn_std - donor_std) / donor_std < 0.05

    def test_experts_draw_independent_masks(self):
        dense = random_dense(16, 64, 28)
        model = drop_upcycle(dense, 2, 0.5, 1, seed=29)
        mask0 = model.experts[0].w1.a == dense.w1.a
        mask1 = model.experts[1].w1.a == dense.w1.a
        assert not np.array_equal(mask0, mask1)

    def test_config_shape(self):
        model = drop_upcycle(random_dense(8, 16, 30), 8, 0.5, 2, seed=31)
        cfg = model.cfg
        assert (cfg.G_I, cfg.R_I, cfg.G_O, cfg.R_O, cfg.T_I) == (1, 8, 1, 1, 2)
        assert derive(cfg).n_active == 2

    def test_invalid_ratio(self):
        with pytest.raises(ValueError, match="drop_ratio"):
            drop_upcycle(random_dense(8, 16, 32), 2, 1.5, 1, seed=33)
