"""Experiment harness: RD sweeps, the SCL-vs-codec-agnostic comparison,
manifests, and CSV emission. Pretrain checkpoints are content-addressed by
config hash so sweeps reuse stage 1."""

from __future__ import annotations

import copy
import io
import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import PIL

from . import __version__, checkpoint
from . import trainer as tr
from .codec import CodecConfig, codec_availability
from .config import ExperimentConfig, config_hash, serialize_config
from .field import Field, init_field
from .metrics import RDCurve, RDPoint
from .scene import SceneData, generate_scene, oracle_render_image, ring_poses
from .trainer import DiagnosticsRecord, SCLResult, TrainConfig

RD_CSV_HEADER = "scene,codec,quality,bits_total,psnr_decoded"
DIAG_CSV_HEADER = "step,mse,grad_l2,grad_over_param,grad_p99,refreshed,bits"
COMPARE_CSV_HEADER = ("scene,codec,quality,bits_scl,psnr_scl,"
                      "bits_ca,psnr_ca,delta_psnr")


def scene_label(cfg: ExperimentConfig) -> str:
    return f"blobs{len(cfg.scene.blobs)}_px{cfg.scene.image_size}"


def diagnostics_csv(records: list[DiagnosticsRecord]) -> str:
    buf = io.StringIO()
    buf.write(DIAG_CSV_HEADER + "\n")
    for r in records:
        buf.write(f"{r.step},{r.mse!r},{r.grad_l2!r},{r.grad_over_param!r},"
                  f"{r.grad_p99!r},{r.refreshed},{r.bits}\n")
    return buf.getvalue()


def rd_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    buf.write(RD_CSV_HEADER + "\n")
    for scene, codec, quality, bits, quality_db in rows:
        buf.write(f"{scene},{codec},{quality},{bits},{quality_db!r}\n")
    return buf.getvalue()


def write_manifest(out_dir: Path, cfg: ExperimentConfig, extra=None) -> None:
    """Record everything needed to reproduce the run."""
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "pillow_version": PIL.__version__,
        "codec": cfg.train.codec.describe(),
        "qualities": list(cfg.qualities),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out_dir / "config.ini").write_text(serialize_config(cfg))


def get_pretrained(cfg: ExperimentConfig, scene: SceneData,
                   cache_dir: Path | None = None,
                   log=None) -> Field:
    """Train (or load) the stage-1 vanilla backbone, content-addressed by
    the pretrain-relevant part of the config."""
    cache_dir = Path(cache_dir if cache_dir is not None
                     else Path(cfg.out_dir) / "pretrain")
    key = config_hash(cfg, pretrain_only=True)
    path = cache_dir / f"{key}.npz"
    if path.exists():
        return checkpoint.load_field(path)
    fld = init_field(cfg.dims, cfg.seed)
    records = tr.pretrain_vanilla(fld, scene, cfg.train)
    cache_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save_field(path, fld)
    if log:
        log(f"pretrained {cfg.train.pretrain_steps} steps -> {path}")
    (cache_dir / f"{key}.diagnostics.csv").write_text(
        diagnostics_csv(records))
    return fld


def clone_field(fld: Field) -> Field:
    """Independent copy so each sweep point finetunes from the same start."""
    clone = copy.deepcopy(fld)
    for _, t in clone.parameters():
        t.zero_grad()
    return clone


def run_rd_sweep(cfg: ExperimentConfig, out_dir: Path | None = None,
                 scene: SceneData | None = None,
                 pretrained: Field | None = None,
                 log=print) -> tuple[list[RDPoint], Path]:
    """Finetune and evaluate one RD point per codec quality; write
    rd_points.csv. Unavailable backends are skipped with a warning row."""
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    scene = scene or generate_scene(cfg.scene)
    pretrained = pretrained or get_pretrained(cfg, scene, log=log)
    label = scene_label(cfg)
    rows = []
    points = []
    for quality in cfg.qualities:
        train_cfg = cfg.train_for_quality(quality)
        if not codec_availability(train_cfg.codec):
            warnings.warn(f"codec backend unavailable, skipping quality {quality}")
            rows.append((label, train_cfg.codec.describe(), quality,
                         "skipped", float("nan")))
            continue
        fld = clone_field(pretrained)
        result = tr.finetune_scl(fld, scene, train_cfg)
        rows.append((label, train_cfg.codec.describe(), quality,
                     result.bits_total, result.psnr_decoded))
        points.append(RDPoint(result.bits_total, result.psnr_decoded))
        (out_dir / f"diagnostics_q{quality}.csv").parent.mkdir(
            parents=True, exist_ok=True)
        (out_dir / f"diagnostics_q{quality}.csv").write_text(
            diagnostics_csv(result.diagnostics))
        if log:
            log(f"quality {quality}: {result.bits_total} bits, "
                f"{result.psnr_decoded:.2f} dB")
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "rd_points.csv"
    csv_path.write_text(rd_csv(rows))
    write_manifest(out_dir, cfg)
    return points, csv_path


@dataclass
class CompareRow:
    quality: int
    codec: str
    scl: SCLResult
    ca: SCLResult

    @property
    def delta_psnr(self) -> float:
        return self.scl.psnr_decoded - self.ca.psnr_decoded


def compare_scl_vs_ca(cfg: ExperimentConfig, out_dir: Path | None = None,
                      scene: SceneData | None = None,
                      pretrained: Field | None = None,
                      log=print) -> tuple[list[CompareRow], Path]:
    """Train the codec-agnostic baseline and the SCL model at identical
    codec configs; emit a side-by-side table.

    Both arms start from the shared pretrained backbone and receive the
    same number of further steps on the same ray batches; the CA arm never
    sees the codec and is compressed once after training, the SCL arm
    trains through the codec round trip.
    """
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    scene = scene or generate_scene(cfg.scene)
    pretrained = pretrained or get_pretrained(cfg, scene, log=log)
    label = scene_label(cfg)
    rows: list[CompareRow] = []
    lines = [COMPARE_CSV_HEADER]
    for quality in cfg.qualities:
        train_cfg = cfg.train_for_quality(quality)
        if not codec_availability(train_cfg.codec):
            warnings.warn(f"codec backend unavailable, skipping quality {quality}")
            continue
        ca = tr.finetune_ca(clone_field(pretrained), scene, train_cfg)
        scl = tr.finetune_scl(clone_field(pretrained), scene, train_cfg)
        row = CompareRow(quality, train_cfg.codec.describe(), scl, ca)
        rows.append(row)
        lines.append(f"{label},{row.codec},{quality},"
                     f"{scl.bits_total},{scl.psnr_decoded!r},"
                     f"{ca.bits_total},{ca.psnr_decoded!r},"
                     f"{row.delta_psnr!r}")
        if log:
            log(f"quality {quality}: SCL {scl.psnr_decoded:.2f} dB vs "
                f"CA {ca.psnr_decoded:.2f} dB "
                f"(delta {row.delta_psnr:+.2f} dB)")
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "compare.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    write_manifest(out_dir, cfg)
    return rows, csv_path


def run_train(cfg: ExperimentConfig, out_dir: Path | None = None,
              log=print) -> SCLResult:
    """Pretrain + finetune at the first configured quality; write artifacts."""
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    scene = generate_scene(cfg.scene)
    pretrained = get_pretrained(cfg, scene, log=log)
    quality = cfg.qualities[0]
    train_cfg = cfg.train_for_quality(quality)
    fld = clone_field(pretrained)
    result = tr.finetune_scl(fld, scene, train_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save_field(out_dir / "field.npz", fld)
    (out_dir / "diagnostics.csv").write_text(diagnostics_csv(result.diagnostics))
    (out_dir / "rd_points.csv").write_text(rd_csv([
        (scene_label(cfg), train_cfg.codec.describe(), quality,
         result.bits_total, result.psnr_decoded)]))
    write_manifest(out_dir, cfg)
    if log:
        log(f"finetuned at quality {quality}: {result.bits_total} bits, "
            f"{result.psnr_decoded:.2f} dB (decoded held-out)")
    return result


def dump_scene_previews(cfg: ExperimentConfig, out_dir: Path,
                        log=print) -> list[Path]:
    """Emit the ground-truth images as 8-bit PNG files."""
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    poses = ring_poses(cfg.scene)
    quad = 4 * cfg.scene.samples_per_ray
    paths = []
    for i, pose in enumerate(poses):
        img = oracle_render_image(cfg.scene, pose, quad)
        arr = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
        path = out_dir / f"view_{i:02d}.png"
        Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB").save(path)
        paths.append(path)
    if log:
        log(f"wrote {len(paths)} ground-truth views to {out_dir}")
    return paths


def dump_canvases(fld: Field, train_cfg: TrainConfig, out_dir: Path) -> list[Path]:
    """Optional visual inspection: the packed 8-bit canvases as images."""
    from PIL import Image

    from . import quantpack as qp

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    tensors = {"xy": fld.planes.p_xy.data, "xz": fld.planes.p_xz.data,
               "yz": fld.planes.p_yz.data, "density": fld.grid.d.data}
    for key, raw in tensors.items():
        is_density = key == "density"
        spec = train_cfg.quant.spec_for(raw, is_density)
        kind = qp.DENSITY_MONO if is_density else train_cfg.pack_kind
        layout = qp.layout_for(kind, raw.shape)
        canvas = qp.pack(qp.quantize(raw, spec), layout)
        arr = canvas.to_uint8()
        path = out_dir / f"canvas_{key}.png"
        if canvas.channels == 1:
            Image.fromarray(arr[0], mode="L").save(path)
        else:
            Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB").save(path)
        paths.append(path)
    return paths


def read_rd_csv(path) -> RDCurve:
    """Load an rd_points.csv (skipping warning rows) as an RD curve."""
    points = []
    for line in Path(path).read_text().splitlines()[1:]:
        parts = line.split(",")
        if len(parts) != 5 or parts[3] == "skipped":
            continue
        points.append(RDPoint(float(parts[3]), float(parts[4])))
    points.sort(key=lambda p: p.bitrate)
    return RDCurve(points)
