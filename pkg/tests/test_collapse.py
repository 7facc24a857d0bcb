import numpy as np
import pytest

from modalign import (
    CollapseKind,
    CollapseTransform,
    DimensionError,
    Embedding,
    EmbeddingBank,
    EmptyBankError,
    Modality,
    ParameterError,
    TransformKindError,
    apply_centralize,
    apply_delete,
    apply_to_bank,
    cosine_similarity,
    fit_centralize,
    fit_delete,
    gap_report,
    load_transform,
    save_transform,
    synthetic_gap_bank,
)


def make_bank(modality, rows):
    return EmbeddingBank.from_rows(modality, rows)


class TestFitCentralize:
    def test_mean_of_rows(self):
        bank_v = make_bank(Modality.VISUAL, [("a", [2, 0]), ("b", [4, 0])])
        bank_l = make_bank(Modality.TEXT, [("a", [0, 1]), ("b", [0, 3])])
        t = fit_centralize(bank_v, bank_l)
        np.testing.assert_allclose(t.visual_mean, [3, 0])
        np.testing.assert_allclose(t.text_mean, [0, 2])

    def test_single_row_means(self):
        bank_v = make_bank(Modality.VISUAL, [("a", [1.5, -2.0])])
        bank_l = make_bank(Modality.TEXT, [("a", [0.25, 9.0])])
        t = fit_centralize(bank_v, bank_l)
        np.testing.assert_array_equal(t.visual_mean, [1.5, -2.0])
        np.testing.assert_array_equal(t.text_mean, [0.25, 9.0])

    def test_recovers_synthetic_gap(self):
        sigma = 0.1
        bank_v, bank_l = synthetic_gap_bank(
            10, 8, gap_norm=3.0, intra_noise_std=sigma, seed=7, rows_per_task=50
        )
        t = fit_centralize(bank_v, bank_l)
        diff = t.visual_mean - t.text_mean
        assert abs(np.linalg.norm(diff) - 3.0) < 6 * sigma / np.sqrt(bank_v.n)

    def test_empty_bank_rejected(self):
        empty = EmbeddingBank(Modality.VISUAL, 2, (), np.zeros((0, 2)))
        full = make_bank(Modality.TEXT, [("a", [1, 2])])
        with pytest.raises(EmptyBankError):
            fit_centralize(empty, full)


class TestApplyCentralize:
    def test_mean_maps_to_origin(self):
        t = CollapseTransform(
            CollapseKind.CENTRALIZE,
            source_dim=2,
            visual_mean=np.array([3.0, 0.0]),
            text_mean=np.array([0.0, 0.0]),
        )
        out = apply_centralize(t, Embedding(np.array([3.0, 0.0]), Modality.VISUAL))
        np.testing.assert_array_equal(out.values, [0, 0])

    def test_zero_mean_is_identity(self):
        t = CollapseTransform(
            CollapseKind.CENTRALIZE,
            source_dim=3,
            visual_mean=np.zeros(3),
            text_mean=np.zeros(3),
        )
        e = Embedding(np.array([1.0, -2.0, 0.5]), Modality.TEXT)
        np.testing.assert_array_equal(apply_centralize(t, e).values, e.values)

    def test_modality_selects_mean(self):
        t = CollapseTransform(
            CollapseKind.CENTRALIZE,
            source_dim=2,
            visual_mean=np.array([1.0, 0.0]),
            text_mean=np.array([0.0, 1.0]),
        )
        vis = apply_centralize(t, Embedding(np.array([1.0, 1.0]), Modality.VISUAL))
        txt = apply_centralize(t, Embedding(np.array([1.0, 1.0]), Modality.TEXT))
        np.testing.assert_array_equal(vis.values, [0, 1])
        np.testing.assert_array_equal(txt.values, [1, 0])

    def test_improves_matched_cosine_on_offset_pair(self):
        bank_v, bank_l = synthetic_gap_bank(
            6, 8, gap_norm=4.0, intra_noise_std=0.05, seed=11
        )
        t = fit_centralize(bank_v, bank_l)
        before, after = [], []
        for (_, rv), (_, rl) in zip(bank_v.rows(), bank_l.rows()):
            before.append(cosine_similarity(rv, rl))
            cv = apply_centralize(t, Embedding(rv, Modality.VISUAL))
            cl = apply_centralize(t, Embedding(rl, Modality.TEXT))
            after.append(cosine_similarity(cv.values, cl.values))
        assert np.mean(after) > np.mean(before)

    def test_wrong_kind(self):
        t = fit_delete(
            make_bank(Modality.VISUAL, [("a", [1, 0, 0])]),
            make_bank(Modality.TEXT, [("a", [0, 0, 0.5])]),
            k=1,
        )
        with pytest.raises(TransformKindError):
            apply_centralize(t, Embedding(np.array([1.0, 0, 0]), Modality.VISUAL))


class TestFitDelete:
    def test_argmax_of_gap_profile(self):
        bank_v = make_bank(Modality.VISUAL, [("a", [0.1, 5.0, 0.2])])
        bank_l = make_bank(Modality.TEXT, [("a", [0.0, 0.0, 0.0])])
        t = fit_delete(bank_v, bank_l, k=1)
        assert t.deleted_dims == (1,)

    def test_tie_breaks_to_lower_index(self):
        bank_v = make_bank(Modality.VISUAL, [("a", [3.0, 3.0, 1.0])])
        bank_l = make_bank(Modality.TEXT, [("a", [0.0, 0.0, 0.0])])
        assert fit_delete(bank_v, bank_l, k=2).deleted_dims == (0, 1)

    def test_all_zero_gap_deletes_first(self):
        bank = make_bank(Modality.VISUAL, [("a", [1.0, 2.0, 3.0])])
        bank_l = make_bank(Modality.TEXT, [("a", [1.0, 2.0, 3.0])])
        assert fit_delete(bank, bank_l, k=1).deleted_dims == (0,)

    def test_k_bounds(self):
        bank_v = make_bank(Modality.VISUAL, [("a", [1, 2])])
        bank_l = make_bank(Modality.TEXT, [("a", [3, 4])])
        with pytest.raises(ParameterError):
            fit_delete(bank_v, bank_l, k=2)
        with pytest.raises(ParameterError):
            fit_delete(bank_v, bank_l, k=0)


class TestApplyDelete:
    def _delete(self, dims, source_dim):
        return CollapseTransform(CollapseKind.DELETE, source_dim=source_dim, deleted_dims=dims)

    def test_single_coordinate_removal(self):
        t = self._delete((1,), 3)
        out = apply_delete(t, Embedding(np.array([7.0, 8.0, 9.0]), Modality.VISUAL))
        np.testing.assert_array_equal(out.values, [7, 9])

    def test_multi_removal_keeps_order(self):
        t = self._delete((0, 2), 4)
        out = apply_delete(t, Embedding(np.array([1.0, 2.0, 3.0, 4.0]), Modality.TEXT))
        np.testing.assert_array_equal(out.values, [2, 4])

    def test_same_dims_for_both_modalities(self):
        t = self._delete((2,), 3)
        v = apply_delete(t, Embedding(np.array([1.0, 2.0, 3.0]), Modality.VISUAL))
        l = apply_delete(t, Embedding(np.array([4.0, 5.0, 6.0]), Modality.TEXT))
        np.testing.assert_array_equal(v.values, [1, 2])
        np.testing.assert_array_equal(l.values, [4, 5])

    def test_concentrated_gap_mostly_removed(self):
        # construct a gap with ~95% of its squared norm in coordinate 3
        rng = np.random.default_rng(13)
        dim, n = 8, 200
        gap = np.full(dim, 0.05)
        gap[3] = 2.0  # 4.0 of ~4.0175 squared norm sits in one coordinate
        base_v = rng.standard_normal((n, dim)) * 0.1
        base_l = rng.standard_normal((n, dim)) * 0.1
        ids = tuple(f"t{i}" for i in range(n))
        bank_v = EmbeddingBank(Modality.VISUAL, dim, ids, base_v + gap)
        bank_l = EmbeddingBank(Modality.TEXT, dim, ids, base_l)
        t = fit_delete(bank_v, bank_l, k=1)
        assert t.deleted_dims == (3,)
        before = gap_report(bank_v, bank_l).gap_norm
        after = gap_report(apply_to_bank(t, bank_v), apply_to_bank(t, bank_l)).gap_norm
        assert after <= 0.1 * before

    def test_wrong_dim(self):
        t = self._delete((0,), 3)
        with pytest.raises(DimensionError):
            apply_delete(t, Embedding(np.array([1.0, 2.0]), Modality.VISUAL))


class TestInvariants:
    def test_post_centralize_bank_mean_is_zero(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n_v, n_l, dim = rng.integers(1, 30), rng.integers(1, 30), rng.integers(2, 10)
            bank_v = EmbeddingBank(
                Modality.VISUAL, int(dim), tuple(f"v{i}" for i in range(n_v)),
                rng.standard_normal((n_v, dim)) * 5,
            )
            bank_l = EmbeddingBank(
                Modality.TEXT, int(dim), tuple(f"l{i}" for i in range(n_l)),
                rng.standard_normal((n_l, dim)) * 5,
            )
            t = fit_centralize(bank_v, bank_l)
            out_v = apply_to_bank(t, bank_v)
            out_l = apply_to_bank(t, bank_l)
            assert np.abs(out_v.values.mean(axis=0)).max() < 1e-9
            assert np.abs(out_l.values.mean(axis=0)).max() < 1e-9

    def test_post_centralize_gap_norm_vanishes(self):
        bank_v, bank_l = synthetic_gap_bank(7, 6, gap_norm=2.5, intra_noise_std=0.3, seed=19)
        t = fit_centralize(bank_v, bank_l)
        report = gap_report(apply_to_bank(t, bank_v), apply_to_bank(t, bank_l))
        assert report.gap_norm < 1e-9

    def test_pairwise_differences_preserved_exactly_on_dyadic_data(self):
        # On values that are multiples of 2^-20 with power-of-two row
        # counts, every subtraction is exactly representable, so the
        # preservation must hold bitwise.
        rng = np.random.default_rng(23)
        values = rng.integers(-(2**24), 2**24, size=(16, 6)).astype(np.float64) * 2.0**-20
        bank = EmbeddingBank(Modality.VISUAL, 6, tuple(f"t{i}" for i in range(16)), values)
        other_vals = rng.integers(-(2**24), 2**24, size=(8, 6)).astype(np.float64) * 2.0**-20
        other = EmbeddingBank(Modality.TEXT, 6, tuple(f"x{i}" for i in range(8)), other_vals)
        t = fit_centralize(bank, other)
        out = apply_to_bank(t, bank)
        for i in range(bank.n):
            for j in range(bank.n):
                np.testing.assert_array_equal(
                    out.values[i] - out.values[j], bank.values[i] - bank.values[j]
                )

    def test_pairwise_differences_preserved_to_ulp_on_arbitrary_data(self):
        # Full-entropy float64 values pick up at most ~1 ulp of mean-scale
        # rounding per coordinate.
        rng = np.random.default_rng(24)
        bank = EmbeddingBank(
            Modality.VISUAL, 6, tuple(f"t{i}" for i in range(10)),
            rng.standard_normal((10, 6)) * 3,
        )
        other = EmbeddingBank(Modality.TEXT, 6, ("x",), rng.standard_normal((1, 6)))
        out = apply_to_bank(fit_centralize(bank, other), bank)
        for i in range(bank.n):
            for j in range(bank.n):
                np.testing.assert_allclose(
                    out.values[i] - out.values[j],
                    bank.values[i] - bank.values[j],
                    atol=1e-14,
                )

    def test_delete_commutes_with_row_permutation(self):
        rng = np.random.default_rng(29)
        values = rng.standard_normal((8, 5))
        ids = tuple(f"t{i}" for i in range(8))
        bank = EmbeddingBank(Modality.VISUAL, 5, ids, values)
        ref_l = EmbeddingBank(Modality.TEXT, 5, ids, rng.standard_normal((8, 5)))
        t = fit_delete(bank, ref_l, k=2)
        perm = rng.permutation(8)
        permuted = EmbeddingBank(Modality.VISUAL, 5, tuple(ids[i] for i in perm), values[perm])
        np.testing.assert_array_equal(
            apply_to_bank(t, permuted).values, apply_to_bank(t, bank).values[perm]
        )


class TestSerialization:
    def test_centralize_roundtrip(self, tmp_path):
        bank_v, bank_l = synthetic_gap_bank(4, 5, gap_norm=1.0, intra_noise_std=0.1, seed=31)
        t = fit_centralize(bank_v, bank_l, fit_reference="unit-test banks")
        path = tmp_path / "transform.json"
        save_transform(t, path)
        loaded = load_transform(path)
        assert loaded.kind is CollapseKind.CENTRALIZE
        assert loaded.fit_reference == "unit-test banks"
        np.testing.assert_array_equal(loaded.visual_mean, t.visual_mean)
        np.testing.assert_array_equal(loaded.text_mean, t.text_mean)

    def test_delete_roundtrip(self, tmp_path):
        t = CollapseTransform(CollapseKind.DELETE, source_dim=6, deleted_dims=(1, 4))
        path = tmp_path / "transform.json"
        save_transform(t, path)
        loaded = load_transform(path)
        assert loaded.kind is CollapseKind.DELETE
        assert loaded.deleted_dims == (1, 4)
        assert loaded.source_dim == 6

    def test_loaded_transform_applies_identically(self, tmp_path):
        bank_v, bank_l = synthetic_gap_bank(5, 7, gap_norm=2.0, intra_noise_std=0.2, seed=37)
        t = fit_centralize(bank_v, bank_l)
        path = tmp_path / "t.json"
        save_transform(t, path)
        loaded = load_transform(path)
        np.testing.assert_array_equal(
            apply_to_bank(loaded, bank_v).values, apply_to_bank(t, bank_v).values
        )
