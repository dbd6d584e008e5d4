"""Experiment configuration: a flat key/value file with sections, parsed
strictly (unknown keys are rejected) and serializable to a canonical form."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, replace

from .cache import QuantConfig
from .codec import DEFAULT_DECODE_CMD, DEFAULT_ENCODE_CMD, CodecConfig
from .field import FieldDims
from .quantpack import PACK_KINDS
from .scene import GaussianBlob, SceneSpec, default_scene
from .surrogate import SurrogateKind
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=default_scene)
    dims: FieldDims = field(default_factory=FieldDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    qualities: tuple[int, ...] = (20, 35, 65)  # sweep points
    out_dir: str = "runs"
    seed: int = 0

    def codec_configs(self) -> list[CodecConfig]:
        return [replace(self.train.codec, quality=q) for q in self.qualities]

    def train_for_quality(self, quality: int) -> TrainConfig:
        cfg = replace(self.train, codec=replace(self.train.codec, quality=quality),
                      seed=self.seed)
        if cfg.density_codec is not None:
            cfg = replace(cfg, density_codec=replace(cfg.density_codec,
                                                     quality=quality))
        return cfg


_SECTIONS = {
    "scene": ("blobs", "cameras", "holdout", "camera_radius", "elevation_deg",
              "image_size", "samples_per_ray"),
    "field": ("channels", "plane_h", "plane_w", "grid_y", "grid_x", "grid_z",
              "hidden"),
    "train": ("lambda_rec", "lambda_tv", "lr_field", "lr_mlp", "beta1",
              "beta2", "adam_eps", "pretrain_steps", "finetune_steps",
              "rays_per_batch", "cache_interval", "drift_threshold",
              "surrogate", "spsa_eps", "spsa_draws", "mste_var_guard"),
    "quant": ("scheme", "appearance_bounds", "density_bounds", "min_range"),
    "pack": ("layout",),
    "codec": ("backend", "qualities", "density_quality", "pixel_format",
              "encode_cmd", "decode_cmd", "fps"),
    "run": ("out_dir", "seed"),
}


def _fmt_blobs(blobs) -> str:
    return "; ".join(
        " ".join(repr(v) for v in (*b.center, b.radius, b.peak, *b.color))
        for b in blobs)


def _parse_blobs(text: str) -> tuple[GaussianBlob, ...]:
    blobs = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        vals = [float(v) for v in part.split()]
        if len(vals) != 8:
            raise ConfigError(
                "each blob needs 8 numbers: cx cy cz radius peak r g b")
        blobs.append(GaussianBlob(tuple(vals[0:3]), vals[3], vals[4],
                                  tuple(vals[5:8])))
    return tuple(blobs)


def parse_config(text: str) -> ExperimentConfig:
    """Parse the sectioned key/value format into an ExperimentConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")

    def get(section, key, cast, default):
        if parser.has_option(section, key):
            try:
                return cast(parser.get(section, key))
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"bad value for {section}.{key}: {e}") from e
        return default

    def pair(text_val):
        vals = [float(v) for v in text_val.replace(",", " ").split()]
        if len(vals) != 2:
            raise ConfigError("expected two numbers")
        return (vals[0], vals[1])

    base_scene = default_scene()
    try:
        scene = SceneSpec(
            blobs=get("scene", "blobs", _parse_blobs, base_scene.blobs),
            num_cameras=get("scene", "cameras", int, base_scene.num_cameras),
            holdout_cameras=get("scene", "holdout", int,
                                base_scene.holdout_cameras),
            camera_radius=get("scene", "camera_radius", float,
                              base_scene.camera_radius),
            elevation_deg=get("scene", "elevation_deg", float,
                              base_scene.elevation_deg),
            image_size=get("scene", "image_size", int, base_scene.image_size),
            samples_per_ray=get("scene", "samples_per_ray", int,
                                base_scene.samples_per_ray),
        )
        dims = FieldDims(
            channels=get("field", "channels", int, 12),
            plane_h=get("field", "plane_h", int, 32),
            plane_w=get("field", "plane_w", int, 32),
            grid_y=get("field", "grid_y", int, 32),
            grid_x=get("field", "grid_x", int, 32),
            grid_z=get("field", "grid_z", int, 32),
            hidden=get("field", "hidden", int, 64),
        )
        quant = QuantConfig(
            scheme=get("quant", "scheme", str, "absmax"),
            appearance_bounds=get("quant", "appearance_bounds", pair,
                                  (-5.0, 5.0)),
            density_bounds=get("quant", "density_bounds", pair, (-25.0, 25.0)),
            min_range=get("quant", "min_range", float, 1e-3),
        )
        pack_kind = get("pack", "layout", str, "flatten_gray")
        if pack_kind not in PACK_KINDS:
            raise ConfigError(f"unknown pack layout {pack_kind!r}")
        surrogate = SurrogateKind(
            kind=get("train", "surrogate", str, "ste"),
            spsa_eps=get("train", "spsa_eps", float, 0.01),
            spsa_draws=get("train", "spsa_draws", int, 1),
            mste_var_guard=get("train", "mste_var_guard", float, 1e-6),
        )
        backend = get("codec", "backend", str, "jpeg")
        codec = CodecConfig(
            backend=backend,
            quality=50,
            pixel_format=get("codec", "pixel_format", str, "444"),
            encode_cmd=get("codec", "encode_cmd", str, DEFAULT_ENCODE_CMD),
            decode_cmd=get("codec", "decode_cmd", str, DEFAULT_DECODE_CMD),
            fps=get("codec", "fps", int, 30),
        )
        density_quality = get("codec", "density_quality", int, None)
        density_codec = (None if density_quality is None
                         else replace(codec, quality=density_quality))
        seed = get("run", "seed", int, 0)
        train = TrainConfig(
            lambda_rec=get("train", "lambda_rec", float, 1.0),
            lambda_tv=get("train", "lambda_tv", float, 5e-5),
            lr_field=get("train", "lr_field", float, 0.02),
            lr_mlp=get("train", "lr_mlp", float, 0.001),
            beta1=get("train", "beta1", float, 0.9),
            beta2=get("train", "beta2", float, 0.999),
            adam_eps=get("train", "adam_eps", float, 1e-8),
            pretrain_steps=get("train", "pretrain_steps", int, 2000),
            finetune_steps=get("train", "finetune_steps", int, 300),
            rays_per_batch=get("train", "rays_per_batch", int, 1024),
            cache_interval=get("train", "cache_interval", int, 128),
            drift_threshold=get("train", "drift_threshold", float, 0.05),
            surrogate=surrogate,
            quant=quant,
            pack_kind=pack_kind,
            codec=codec,
            density_codec=density_codec,
            seed=seed,
        )

        def int_list(text_val):
            return tuple(int(v) for v in text_val.replace(",", " ").split())

        return ExperimentConfig(
            scene=scene, dims=dims, train=train,
            qualities=get("codec", "qualities", int_list, (20, 35, 65)),
            out_dir=get("run", "out_dir", str, "runs"),
            seed=seed,
        )
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: fixed section/key order, repr-formatted numbers."""
    t, q, s = cfg.train, cfg.train.quant, cfg.scene
    out = io.StringIO()

    def section(name, items):
        out.write(f"[{name}]\n")
        for key, val in items:
            out.write(f"{key} = {val}\n")
        out.write("\n")

    section("scene", [
        ("blobs", _fmt_blobs(s.blobs)),
        ("cameras", s.num_cameras),
        ("holdout", s.holdout_cameras),
        ("camera_radius", repr(s.camera_radius)),
        ("elevation_deg", repr(s.elevation_deg)),
        ("image_size", s.image_size),
        ("samples_per_ray", s.samples_per_ray),
    ])
    d = cfg.dims
    section("field", [
        ("channels", d.channels), ("plane_h", d.plane_h),
        ("plane_w", d.plane_w), ("grid_y", d.grid_y), ("grid_x", d.grid_x),
        ("grid_z", d.grid_z), ("hidden", d.hidden),
    ])
    section("train", [
        ("lambda_rec", repr(t.lambda_rec)), ("lambda_tv", repr(t.lambda_tv)),
        ("lr_field", repr(t.lr_field)), ("lr_mlp", repr(t.lr_mlp)),
        ("beta1", repr(t.beta1)), ("beta2", repr(t.beta2)),
        ("adam_eps", repr(t.adam_eps)),
        ("pretrain_steps", t.pretrain_steps),
        ("finetune_steps", t.finetune_steps),
        ("rays_per_batch", t.rays_per_batch),
        ("cache_interval", t.cache_interval),
        ("drift_threshold", repr(t.drift_threshold)),
        ("surrogate", t.surrogate.kind),
        ("spsa_eps", repr(t.surrogate.spsa_eps)),
        ("spsa_draws", t.surrogate.spsa_draws),
        ("mste_var_guard", repr(t.surrogate.mste_var_guard)),
    ])
    section("quant", [
        ("scheme", q.scheme),
        ("appearance_bounds", f"{q.appearance_bounds[0]!r} {q.appearance_bounds[1]!r}"),
        ("density_bounds", f"{q.density_bounds[0]!r} {q.density_bounds[1]!r}"),
        ("min_range", repr(q.min_range)),
    ])
    section("pack", [("layout", t.pack_kind)])
    codec_items = [
        ("backend", t.codec.backend),
        ("qualities", " ".join(str(v) for v in cfg.qualities)),
        ("pixel_format", t.codec.pixel_format),
        ("encode_cmd", t.codec.encode_cmd),
        ("decode_cmd", t.codec.decode_cmd),
        ("fps", t.codec.fps),
    ]
    if t.density_codec is not None:
        codec_items.insert(2, ("density_quality", t.density_codec.quality))
    section("codec", codec_items)
    section("run", [("out_dir", cfg.out_dir), ("seed", cfg.seed)])
    return out.getvalue()


def config_hash(cfg: ExperimentConfig, *, pretrain_only: bool = False) -> str:
    """Stable hash of the canonical form; with ``pretrain_only`` the codec
    sweep fields are masked out so stage-1 checkpoints can be shared."""
    text = serialize_config(cfg)
    if pretrain_only:
        lines = [ln for ln in text.splitlines()
                 if not ln.startswith(("qualities", "finetune_steps",
                                       "backend", "density_quality",
                                       "pixel_format", "encode_cmd",
                                       "decode_cmd", "fps", "out_dir",
                                       "surrogate", "spsa", "mste",
                                       "cache_interval", "drift_threshold"))]
        text = "\n".join(lines)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
