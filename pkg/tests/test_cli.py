"""CLI and config loading: schema validation, round-trips, subcommand smoke."""

import json

import numpy as np
import pytest

from esmakit.cli import EXIT_ARTIFACT, EXIT_CONFIG, main
from esmakit.config import ConfigError, load_config, save_config, validate_config
from esmakit.datasets import ingest_dataset, make_cover_images, make_desk_dataset


class TestConfigLoading:
    def test_minimal_exp1_fills_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"protocol": "exp1"}))
        config = load_config(path)
        assert config.epsilon == pytest.approx(16 / 255)
        assert config.q == 2
        assert config.nu == 1.0
        assert config.lengths == [5, 10, 15, 20, 25, 30]

    def test_unknown_keys_rejected_all_at_once(self):
        with pytest.raises(ConfigError) as err:
            validate_config({"protocol": "exp1", "bogus_a": 1, "bogus_b": 2})
        assert "bogus_a" in str(err.value) and "bogus_b" in str(err.value)

    def test_missing_protocol(self):
        with pytest.raises(ConfigError, match="protocol"):
            validate_config({"lengths": [5]})

    def test_roundtrip_identity(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"protocol": "exp2", "lengths": [5, 10], "seeds": [3]}))
        config = load_config(path)
        save_config(config, tmp_path / "echo.json")
        reloaded = load_config(tmp_path / "echo.json")
        assert reloaded.to_dict() == config.to_dict()

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(path)


class TestIngestDataset:
    def _write_images(self, root, counts):
        from PIL import Image

        rng = np.random.default_rng(0)
        for cls, n in counts.items():
            d = root / cls
            d.mkdir(parents=True)
            for i in range(n):
                array = (rng.random((8, 8, 3)) * 255).astype("uint8")
                Image.fromarray(array).save(d / f"img_{i:03d}.png")

    def test_empty_directory_errors(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ValueError, match="no image files"):
            ingest_dataset(empty)

    def test_ingests_class_directories(self, tmp_path):
        self._write_images(tmp_path, {"a": 3, "b": 2})
        dataset, manifest = ingest_dataset(tmp_path, target_size=8)
        assert len(dataset) == 5
        assert dataset.n_classes == 2
        assert dataset.labels.tolist() == [0, 0, 0, 1, 1]  # lexicographic order
        assert manifest.artifact_hash

    def test_same_directory_same_hash(self, tmp_path):
        self._write_images(tmp_path, {"a": 3})
        _, m1 = ingest_dataset(tmp_path, target_size=8)
        _, m2 = ingest_dataset(tmp_path, target_size=8)
        assert m1.artifact_hash == m2.artifact_hash

    def test_corrupt_file_skipped_with_warning(self, tmp_path):
        self._write_images(tmp_path, {"a": 30})
        (tmp_path / "a" / "img_999.png").write_bytes(b"not an image")
        with pytest.warns(UserWarning, match="skipped"):
            dataset, manifest = ingest_dataset(tmp_path, target_size=8)
        assert len(dataset) == 30
        assert len(manifest.skipped) == 1

    def test_too_many_corrupt_aborts(self, tmp_path):
        self._write_images(tmp_path, {"a": 2})
        (tmp_path / "a" / "zz_bad.png").write_bytes(b"junk")
        with pytest.raises(ValueError, match="skip budget"):
            ingest_dataset(tmp_path, target_size=8)


class TestBuiltinDatasets:
    def test_desk_dataset_shapes_and_determinism(self):
        a = make_desk_dataset(5, n_classes=3, size=16, seed=2)
        b = make_desk_dataset(5, n_classes=3, size=16, seed=2)
        assert a.features.shape == (15, 3, 16, 16)
        np.testing.assert_array_equal(a.features, b.features)
        assert a.features.min() >= 0.0 and a.features.max() <= 1.0

    def test_covers_range_and_determinism(self):
        a = make_cover_images(4, size=16, seed=3)
        b = make_cover_images(4, size=16, seed=3)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestCliExitCodes:
    def test_run_with_missing_config(self, tmp_path, capsys):
        code = main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert code == EXIT_CONFIG

    def test_run_with_bad_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"protocol": "exp1", "bogus": 1}))
        code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_attack_with_missing_generator(self, tmp_path, capsys):
        code = main(
            ["attack", "--generator", str(tmp_path / "none.pt"), "--out", str(tmp_path)]
        )
        assert code == EXIT_ARTIFACT

    def test_plots_with_missing_report(self, tmp_path):
        code = main(["plots", "--report", str(tmp_path), "--out", str(tmp_path)])
        assert code == EXIT_ARTIFACT


class TestCliSmoke:
    def test_make_pools_writes_file(self, tmp_path):
        out = tmp_path / "pools.txt"
        code = main([
            "make-pools", "--enterprises", "3", "--pool-size", "4",
            "--length", "6", "--out", str(out),
        ])
        assert code == 0
        assert out.exists()
        from esmakit.watermark import load_pools

        pools = load_pools(out)
        assert len(pools) == 3 and pools[0].length == 6

    def test_toy_density_writes_report(self, tmp_path):
        out = tmp_path / "toy"
        code = main(["toy-density", "--n-samples", "60", "--out", str(out), "--seed", "1"])
        assert code == 0
        payload = json.loads((out / "toy_density.json").read_text())
        assert "spearman" in payload and "curves" in payload
        assert (out / "manifest.json").exists()

    def test_train_watermark_and_eval(self, tmp_path):
        ckpt = tmp_path / "wm.pt"
        code = main([
            "train-watermark", "--length", "5", "--regime", "nonoise",
            "--n-covers", "64", "--epochs", "30", "--image-size", "16",
            "--out", str(ckpt),
        ])
        assert code == 0 and ckpt.exists()

        from esmakit.watermark import HiddenWatermarker

        model = HiddenWatermarker.load_checkpoint(ckpt)
        covers = make_cover_images(8, size=16, seed=5)
        msgs = np.random.default_rng(0).integers(0, 2, (8, 5)).astype(np.float32)
        encoded = model.encode(covers, msgs)
        np.save(tmp_path / "encoded.npy", encoded)

        out = tmp_path / "eval"
        code = main([
            "eval-watermark", "--watermark", str(ckpt),
            "--encoded", str(tmp_path / "encoded.npy"),
            "--target-psnr", "24", "--out", str(out),
        ])
        assert code == 0
        rows = json.loads((out / "watermark_eval.json").read_text())
        metrics = {r["metric"] for r in rows}
        assert {"erasure_bit_error", "erasure_detection", "attack_psnr"} <= metrics
