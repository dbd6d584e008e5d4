"""Scene generation, experiment config, CSV contracts, and the CLI."""

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from sclrf import cli, config as cfg_mod, harness
from sclrf.config import (ConfigError, ExperimentConfig, config_hash,
                          load_config, parse_config, serialize_config)
from sclrf.field import FieldDims, init_field
from sclrf.metrics import payload_estimate
from sclrf.scene import (GaussianBlob, SceneSpec, default_scene,
                         generate_scene, oracle_render_image, ring_poses,
                         split_indices)

MINI_SCENE = SceneSpec(
    blobs=(GaussianBlob((0.0, 0.0, 0.0), 0.5, 8.0, (0.9, 0.4, 0.2)),),
    num_cameras=6, holdout_cameras=2, image_size=16, samples_per_ray=8)


class TestSceneGeneration:
    def test_empty_blob_list_renders_black(self):
        spec = replace(MINI_SCENE, blobs=())
        data = generate_scene(spec)
        np.testing.assert_allclose(data.train_images, 0.0, atol=1e-12)

    def test_split_counts(self):
        data = generate_scene(MINI_SCENE)
        assert len(data.train_poses) == 4
        assert len(data.holdout_poses) == 2
        assert data.train_images.shape == (4, 3, 16, 16)

    def test_single_blob_brightest_at_principal_point(self):
        """A centered blob viewed fronto-parallel peaks at the image center."""
        from sclrf.field import look_at_pose

        spec = replace(MINI_SCENE, image_size=33)
        pose = look_at_pose((3.0, 0.0, 0.0), (0.0, 0.0, 0.0), 33, 33)
        img = oracle_render_image(spec, pose, 128)
        luma = img.sum(axis=0)
        peak = np.unravel_index(np.argmax(luma), luma.shape)
        assert abs(peak[0] - 16) <= 1
        assert abs(peak[1] - 16) <= 1

    def test_quadrature_convergence(self):
        spec = MINI_SCENE
        pose = ring_poses(spec)[0]
        coarse = oracle_render_image(spec, pose, 256)
        fine = oracle_render_image(spec, pose, 512)
        assert np.max(np.abs(coarse - fine)) < 1e-4

    def test_blob_center_validation(self):
        with pytest.raises(ValueError):
            GaussianBlob((2.0, 0.0, 0.0), 0.5, 1.0, (1, 0, 0))

    def test_pose_split_requirements(self):
        with pytest.raises(ValueError):
            SceneSpec(num_cameras=5, holdout_cameras=2)  # 3 train < 4


CONFIG_TEXT = """
[scene]
cameras = 6
holdout = 2
image_size = 16
samples_per_ray = 8

[field]
channels = 6
hidden = 32

[train]
pretrain_steps = 10
finetune_steps = 5
rays_per_batch = 64

[codec]
backend = jpeg
qualities = 20, 50

[run]
seed = 7
out_dir = out
"""


class TestConfig:
    def test_parse_reads_values(self):
        cfg = parse_config(CONFIG_TEXT)
        assert cfg.scene.num_cameras == 6
        assert cfg.dims.channels == 6
        assert cfg.train.pretrain_steps == 10
        assert cfg.qualities == (20, 50)
        assert cfg.seed == 7
        assert cfg.train.seed == 7

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[train]\nlearning_rate = 5\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[optimizer]\nlr = 1\n")

    def test_serialize_parse_roundtrip(self):
        cfg = parse_config(CONFIG_TEXT)
        canonical = serialize_config(cfg)
        reparsed = parse_config(canonical)
        assert serialize_config(reparsed) == canonical
        assert reparsed == cfg

    def test_default_roundtrip(self):
        cfg = ExperimentConfig()
        assert parse_config(serialize_config(cfg)) == cfg

    def test_blob_roundtrip(self):
        cfg = ExperimentConfig()
        text = serialize_config(cfg)
        assert parse_config(text).scene.blobs == cfg.scene.blobs

    def test_pretrain_hash_ignores_codec_sweep(self):
        cfg = ExperimentConfig()
        jpeg = config_hash(cfg, pretrain_only=True)
        identity = config_hash(replace(cfg, qualities=(10,)),
                               pretrain_only=True)
        assert jpeg == identity
        assert config_hash(cfg) != config_hash(replace(cfg, qualities=(10,)))

    def test_pretrain_hash_tracks_scene(self):
        cfg = ExperimentConfig()
        other = replace(cfg, scene=replace(cfg.scene, image_size=32))
        assert (config_hash(cfg, pretrain_only=True)
                != config_hash(other, pretrain_only=True))


def tiny_experiment(tmp_path, **kwargs) -> ExperimentConfig:
    cfg = parse_config(CONFIG_TEXT)
    cfg = replace(cfg, out_dir=str(tmp_path), **kwargs)
    return replace(cfg, dims=FieldDims(channels=6, plane_h=12, plane_w=12,
                                       grid_y=12, grid_x=12, grid_z=12,
                                       hidden=24))


class TestSweepAndCompare:
    def test_rd_sweep_csv_schema_and_monotone_bits(self, tmp_path):
        cfg = tiny_experiment(tmp_path, qualities=(20, 50, 80))
        points, csv_path = harness.run_rd_sweep(cfg, log=None)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "scene,codec,quality,bits_total,psnr_decoded"
        assert len(points) == 3
        bits = [p.bitrate for p in points]
        assert bits == sorted(bits)  # higher quality never costs fewer bits
        assert (tmp_path / "manifest.json").exists()

    def test_sweep_reuses_pretrain_checkpoint(self, tmp_path):
        cfg = tiny_experiment(tmp_path, qualities=(30,))
        harness.run_rd_sweep(cfg, log=None)
        stamps = {p: p.stat().st_mtime
                  for p in (tmp_path / "pretrain").glob("*.npz")}
        assert stamps
        harness.run_rd_sweep(cfg, log=None)
        for p, t in stamps.items():
            assert p.stat().st_mtime == t  # loaded, not retrained

    def test_sweep_determinism(self, tmp_path):
        cfg_a = tiny_experiment(tmp_path / "a", qualities=(25,))
        cfg_b = tiny_experiment(tmp_path / "b", qualities=(25,))
        _, csv_a = harness.run_rd_sweep(cfg_a, log=None)
        _, csv_b = harness.run_rd_sweep(cfg_b, log=None)
        assert csv_a.read_text() == csv_b.read_text()

    def test_unavailable_backend_writes_warning_row(self, tmp_path):
        cfg = tiny_experiment(tmp_path, qualities=(30,))
        bad_codec = replace(cfg.train.codec, backend="external",
                            encode_cmd="no-such-tool {input} {output}",
                            decode_cmd="no-such-tool {input} {output}")
        cfg = replace(cfg, train=replace(cfg.train, codec=bad_codec))
        with pytest.warns(UserWarning, match="unavailable"):
            points, csv_path = harness.run_rd_sweep(cfg, log=None)
        assert points == []
        assert "skipped" in csv_path.read_text()

    def test_compare_emits_delta_table(self, tmp_path):
        cfg = tiny_experiment(tmp_path, qualities=(25,))
        rows, csv_path = harness.compare_scl_vs_ca(cfg, log=None)
        header = csv_path.read_text().splitlines()[0]
        assert header == ("scene,codec,quality,bits_scl,psnr_scl,"
                          "bits_ca,psnr_ca,delta_psnr")
        assert len(rows) == 1
        assert math.isfinite(rows[0].delta_psnr)

    def test_diagnostics_csv_schema(self, tmp_path):
        cfg = tiny_experiment(tmp_path, qualities=(25,))
        harness.run_rd_sweep(cfg, log=None)
        diag = (tmp_path / "diagnostics_q25.csv").read_text().splitlines()
        assert diag[0] == "step,mse,grad_l2,grad_over_param,grad_p99,refreshed,bits"
        assert diag[1].split(",")[6].isdigit()

    def test_manifest_contents(self, tmp_path):
        cfg = tiny_experiment(tmp_path, qualities=(25,))
        harness.run_rd_sweep(cfg, log=None)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config_hash"] == config_hash(cfg)
        assert manifest["seed"] == cfg.seed
        assert "pillow_version" in manifest
        assert manifest["codec"].startswith("jpeg")


class TestCanvasDumps:
    def test_dump_canvases_writes_pngs(self, tmp_path):
        fld = init_field(FieldDims(channels=6, plane_h=8, plane_w=8,
                                   grid_y=8, grid_x=8, grid_z=8, hidden=16),
                         seed=0)
        from sclrf.trainer import TrainConfig

        paths = harness.dump_canvases(fld, TrainConfig(), tmp_path)
        assert sorted(p.name for p in paths) == [
            "canvas_density.png", "canvas_xy.png", "canvas_xz.png",
            "canvas_yz.png"]
        for p in paths:
            assert p.stat().st_size > 0


class TestCLI:
    def test_bdrate_identical_curves_prints_zero(self, tmp_path, capsys):
        rows = [("s", "jpeg:q", q, b, 30.0 + i)
                for i, (q, b) in enumerate([(20, 1000), (35, 2000),
                                            (50, 4000), (65, 8000)])]
        csv_path = tmp_path / "rd.csv"
        csv_path.write_text(harness.rd_csv(rows))
        code = cli.main(["bdrate", str(csv_path), str(csv_path)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "0.00%"

    def test_unknown_flag_exits_2(self, capsys):
        assert cli.main(["sweep", "--no-such-flag"]) == 2

    def test_config_error_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nbogus_key = 1\n")
        code = cli.main(["train", "--config", str(bad)])
        assert code == 2
        assert "error[config]" in capsys.readouterr().err

    def test_unavailable_codec_exits_3(self, tmp_path, capsys):
        ini = tmp_path / "cfg.ini"
        ini.write_text("[codec]\nbackend = external\n"
                       "encode_cmd = missing-encoder {input} {output}\n"
                       "decode_cmd = missing-decoder {input} {output}\n")
        code = cli.main(["train", "--config", str(ini)])
        assert code == 3
        assert "error[codec-unavailable]" in capsys.readouterr().err

    def test_payload_header_bits_column(self, tmp_path, capsys):
        from sclrf import checkpoint

        fld = init_field(FieldDims(channels=4, plane_h=6, plane_w=6,
                                   grid_y=6, grid_x=6, grid_z=6, hidden=8),
                         seed=1)
        ckpt = tmp_path / "field.npz"
        checkpoint.save_field(ckpt, fld)
        out_csv = tmp_path / "payload.csv"
        assert cli.main(["payload", str(ckpt), "--out", str(out_csv)]) == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0].split(",")[4] == "header_bits"
        for line in lines[1:]:
            name, _, d, _, header, _ = line.split(",")
            assert int(header) == 2 * 32 + 8 + 32 * int(d)

    def test_scene_preview_writes_images(self, tmp_path):
        ini = tmp_path / "cfg.ini"
        ini.write_text("[scene]\ncameras = 6\nholdout = 2\nimage_size = 8\n"
                       "samples_per_ray = 4\n")
        out = tmp_path / "previews"
        code = cli.main(["scene", "preview", "--config", str(ini),
                         "--out", str(out)])
        assert code == 0
        assert len(list(out.glob("view_*.png"))) == 6

    def test_train_writes_artifacts(self, tmp_path):
        cfg = tiny_experiment(tmp_path / "run", qualities=(30,))
        ini = tmp_path / "cfg.ini"
        ini.write_text(serialize_config(cfg))
        code = cli.main(["train", "--config", str(ini)])
        assert code == 0
        out = Path(cfg.out_dir)
        for name in ("field.npz", "diagnostics.csv", "rd_points.csv",
                     "manifest.json", "config.ini"):
            assert (out / name).exists()
