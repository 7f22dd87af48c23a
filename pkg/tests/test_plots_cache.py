"""Plot emission determinism, artifact cache behavior, seed derivation."""

import json

import numpy as np
import pytest

from esmakit.cache import ArtifactCache, canonical_json, config_hash
from esmakit.data import LabeledDataset
from esmakit.evaluation import AttackReport
from esmakit.plots import PLOT_KINDS, UnknownPlotKindError, emit_plots, plot_consistency_curves
from esmakit.rng import derive_seed, generator as make_rng


class TestRng:
    def test_derivation_is_stable(self):
        assert derive_seed(42, "targets") == derive_seed(42, "targets")

    def test_labels_separate_streams(self):
        a = make_rng(42, "a").integers(0, 1000, 10)
        b = make_rng(42, "b").integers(0, 1000, 10)
        assert not np.array_equal(a, b)

    def test_root_seed_changes_stream(self):
        a = make_rng(1, "x").integers(0, 1000, 10)
        b = make_rng(2, "x").integers(0, 1000, 10)
        assert not np.array_equal(a, b)


class TestDataset:
    def test_rejects_misaligned(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 2)), np.zeros(4, dtype=int))

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 2)), np.array([0, 5]), n_classes=2)

    def test_subset_and_class_indices(self):
        ds = LabeledDataset(np.arange(12).reshape(6, 2), np.array([0, 1, 0, 1, 0, 1]))
        assert ds.class_indices(0).tolist() == [0, 2, 4]
        sub = ds.subset(np.array([1, 3]))
        assert len(sub) == 2 and sub.labels.tolist() == [1, 1]

    def test_as_matrix_flattens_images(self):
        ds = LabeledDataset(np.zeros((2, 3, 4, 4)), np.array([0, 0]))
        assert ds.as_matrix().shape == (2, 48)
        assert ds.feature_dim == 48


class TestCache:
    def test_disabled_cache_misses(self):
        cache = ArtifactCache(None)
        assert cache.load_torch("models", "abc") is None
        cache.save_torch("models", "abc", {"x": 1})  # no-op, no error

    def test_roundtrip_torch_payload(self, tmp_path):
        import torch

        cache = ArtifactCache(tmp_path)
        payload = {"weights": torch.arange(5).float()}
        cache.save_torch("models", "k1", payload)
        loaded = cache.load_torch("models", "k1")
        torch.testing.assert_close(loaded["weights"], payload["weights"])

    def test_json_roundtrip(self, tmp_path):
        cache = ArtifactCache(tmp_path)
        cache.save_json("reports", "k2", {"a": [1, 2]})
        assert cache.load_json("reports", "k2") == {"a": [1, 2]}

    def test_hash_is_order_insensitive(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})

    def test_hash_distinguishes_values(self):
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_canonical_json_handles_arrays(self):
        assert canonical_json({"x": np.array([1, 2])}) == '{"x":[1,2]}'


def _density_report():
    report = AttackReport(config={"protocol": "density_shift"}, config_hash="feedbeef" * 8)
    shift = {
        "r": 1.0,
        "bin_edges": np.linspace(0, 1, 11).tolist(),
        "clean_counts": [3, 1, 4, 1, 5, 9, 2, 6, 5, 3],
        "adversarial_counts": [2, 7, 1, 8, 2, 8, 1, 8, 2, 1],
        "clean_normalized": [0.1] * 10,
        "adversarial_normalized": [0.2] * 10,
    }
    report.notes.append(json.dumps(shift))
    return report


def _watermark_report():
    report = AttackReport(config={"protocol": "exp1"}, config_hash="cafe" * 16)
    for L in (5, 10):
        report.add_cell("erasure_detection", 0.5, 10, L=L, attack="esma", enterprise=0)
        report.add_cell("tamper_detection", 0.2, 10, L=L, attack="esma", enterprise=0)
        report.add_cell("watermark_psnr", 30.0, 10, L=L)
        report.add_cell("attack_psnr", 28.0, 10, L=L)
        report.add_cell("gaussian_psnr", 28.0, 10, L=L)
    return report


class TestPlots:
    def test_no_kinds_no_files(self, tmp_path):
        assert emit_plots(_watermark_report(), [], tmp_path) == []

    def test_unknown_kind_lists_available(self, tmp_path):
        with pytest.raises(UnknownPlotKindError) as err:
            emit_plots(_watermark_report(), ["nope"], tmp_path)
        for kind in PLOT_KINDS:
            assert kind in str(err.value)

    def test_density_curves_one_file_per_shift(self, tmp_path):
        paths = emit_plots(_density_report(), ["density-curves"], tmp_path)
        assert len(paths) == 1
        assert all(p.exists() for p in paths)

    def test_risk_scatter_and_psnr_bars(self, tmp_path):
        report = _watermark_report()
        paths = emit_plots(report, ["risk-scatter", "psnr-bars"], tmp_path)
        assert len(paths) == 2
        names = {p.name for p in paths}
        assert any("risk-scatter" in n for n in names)
        assert any("psnr-bars" in n for n in names)

    def test_rerun_byte_identical(self, tmp_path):
        report = _watermark_report()
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first = emit_plots(report, ["risk-scatter"], tmp_path / "a")[0]
        second = emit_plots(report, ["risk-scatter"], tmp_path / "b")[0]
        assert first.read_bytes() == second.read_bytes()

    def test_consistency_curves_four_files(self, tmp_path, blob_model, blob_dataset):
        from esmakit.toylab import consistency_report

        report = consistency_report([blob_model, blob_model], blob_dataset, r=1.0, n_bins=5)
        paths = plot_consistency_curves(report, tmp_path, "toy")
        assert len(paths) == 4
        assert all(p.exists() for p in paths)
