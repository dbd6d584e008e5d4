"""Codec round trips on canvases: encode-then-decode plus the bit count.

Three backends:
  * identity  - 8-bit rounding only; bits follow the raw-payload convention.
  * jpeg      - in-process via Pillow; bits are the pure JFIF file size.
  * external  - a real video encoder/decoder pair driven as subprocesses
                over Y4M raw-video files; bits include the container.

The external backend is a true black box: frames are piped as planar 8-bit
payloads behind a plain-text Y4M header, and the tool's output bitstream is
decoded back by the paired command. Command templates default to ffmpeg
pinned to single-threaded, deterministic settings.
"""

from __future__ import annotations

import io
import shlex
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .quantpack import Canvas

IDENTITY = "identity"
JPEG = "jpeg"
EXTERNAL = "external"

DEFAULT_ENCODE_CMD = (
    "ffmpeg -hide_banner -loglevel error -y -i {input} "
    "-c:v libvpx-vp9 -crf {q} -b:v 0 -threads 1 -row-mt 0 "
    "-pix_fmt {pix_fmt} {output}"
)
DEFAULT_DECODE_CMD = (
    "ffmpeg -hide_banner -loglevel error -y -i {input} "
    "-threads 1 -pix_fmt {decode_pix_fmt} {output}"
)


class CodecError(RuntimeError):
    """Encode/decode failure, with captured diagnostics where available."""


class CodecUnavailableError(CodecError):
    """The configured external tool is not present on this machine."""


@dataclass(frozen=True)
class CodecConfig:
    backend: str = IDENTITY
    quality: int = 50
    pixel_format: str = "444"  # "444" or "420", external backend only
    encode_cmd: str = DEFAULT_ENCODE_CMD
    decode_cmd: str = DEFAULT_DECODE_CMD
    fps: int = 30
    work_dir: str | None = None  # run-scoped temp dir for bitstream files

    def __post_init__(self):
        if self.backend not in (IDENTITY, JPEG, EXTERNAL):
            raise ValueError(f"unknown codec backend: {self.backend}")
        if self.backend == JPEG and not 1 <= self.quality <= 100:
            raise ValueError("jpeg quality must be in [1, 100]")
        if self.backend == EXTERNAL and self.quality < 0:
            raise ValueError("external codec quality must be >= 0")
        if self.pixel_format not in ("444", "420"):
            raise ValueError("pixel_format must be '444' or '420'")

    def describe(self) -> str:
        if self.backend == EXTERNAL:
            tool = shlex.split(self.encode_cmd)[0]
            return f"external:{tool}:q{self.quality}"
        return f"{self.backend}:q{self.quality}"


@dataclass
class RoundTripResult:
    decoded: Canvas
    bits: int
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0

    def __post_init__(self):
        if self.bits < 0:
            raise ValueError("bit count must be non-negative")


def codec_availability(cfg: CodecConfig) -> bool:
    """Probe whether the backend can run at all; never raises."""
    if cfg.backend in (IDENTITY, JPEG):
        return True
    try:
        enc = shlex.split(cfg.encode_cmd)[0]
        dec = shlex.split(cfg.decode_cmd)[0]
    except (ValueError, IndexError):
        return False
    return shutil.which(enc) is not None and shutil.which(dec) is not None


def round_trip(canvas: Canvas, cfg: CodecConfig) -> RoundTripResult:
    """Run the encode-decode round trip C_q(Y) -> (Y_hat, bits)."""
    if cfg.backend == IDENTITY:
        t0 = time.perf_counter()
        decoded = Canvas.from_uint8(canvas.to_uint8())
        dt = time.perf_counter() - t0
        bits = 8 * canvas.channels * canvas.height * canvas.width
        return RoundTripResult(decoded, bits, dt, 0.0)
    if cfg.backend == JPEG:
        return _jpeg_round_trip(canvas, cfg)
    frames, bits = round_trip_sequence([canvas], cfg)
    return RoundTripResult(frames[0], bits)


def _jpeg_round_trip(canvas: Canvas, cfg: CodecConfig) -> RoundTripResult:
    arr = canvas.to_uint8()
    if canvas.channels == 1:
        img = Image.fromarray(arr[0], mode="L")
        subsampling = -1  # not applicable to grayscale
    else:
        img = Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB")
        subsampling = 0 if cfg.pixel_format == "444" else 2
    buf = io.BytesIO()
    t0 = time.perf_counter()
    img.save(buf, format="JPEG", quality=cfg.quality, subsampling=subsampling)
    t1 = time.perf_counter()
    data = buf.getvalue()
    decoded_img = Image.open(io.BytesIO(data))
    decoded_img.load()
    t2 = time.perf_counter()
    out = np.asarray(decoded_img, dtype=np.uint8)
    out = out[None] if out.ndim == 2 else np.moveaxis(out, 2, 0)
    if out.shape != arr.shape:
        raise CodecError(f"jpeg decode shape {out.shape} != input {arr.shape}")
    return RoundTripResult(Canvas.from_uint8(out), 8 * len(data),
                           t1 - t0, t2 - t1)


# ---------------------------------------------------------------------------
# Y4M raw-video pipe format
# ---------------------------------------------------------------------------

def write_y4m(path: Path, frames: list[np.ndarray], fps: int) -> None:
    """Write uint8 frames [C, H, W] (C in {1, 3}) as a Y4M stream.

    Mono frames use the Cmono colorspace; 3-channel frames map canvas
    channels directly onto the Y/Cb/Cr planes of C444 without any color
    conversion, keeping the mapping lossless.
    """
    c, h, w = frames[0].shape
    cspace = "Cmono" if c == 1 else "C444"
    with open(path, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{w} H{h} F{fps}:1 Ip A1:1 {cspace}\n".encode())
        for frame in frames:
            if frame.shape != (c, h, w):
                raise CodecError("all frames in a sequence must share dims")
            fh.write(b"FRAME\n")
            fh.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def read_y4m(path: Path) -> list[np.ndarray]:
    """Parse a Y4M stream back into uint8 frames [C, H, W].

    Accepts Cmono, C444, and C420* (chroma upsampled by nearest neighbour).
    """
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = data[:nl].decode()
    if not header.startswith("YUV4MPEG2"):
        raise CodecError("not a Y4M stream")
    w = h = None
    cspace = "C420"
    for tok in header.split()[1:]:
        if tok.startswith("W"):
            w = int(tok[1:])
        elif tok.startswith("H"):
            h = int(tok[1:])
        elif tok.startswith("C"):
            cspace = tok
    if w is None or h is None:
        raise CodecError("Y4M header missing dimensions")
    if cspace.startswith("Cmono"):
        plane_dims = [(h, w)]
    elif cspace.startswith("C444"):
        plane_dims = [(h, w)] * 3
    elif cspace.startswith("C420"):
        plane_dims = [(h, w), (h // 2, w // 2), (h // 2, w // 2)]
    else:
        raise CodecError(f"unsupported Y4M colorspace {cspace}")
    frames = []
    pos = nl + 1
    while pos < len(data):
        fnl = data.index(b"\n", pos)
        if not data[pos:fnl].startswith(b"FRAME"):
            raise CodecError("Y4M stream desync: FRAME marker missing")
        pos = fnl + 1
        planes = []
        for ph, pw in plane_dims:
            n = ph * pw
            plane = np.frombuffer(data[pos:pos + n], dtype=np.uint8)
            if plane.size != n:
                raise CodecError("Y4M stream truncated")
            planes.append(plane.reshape(ph, pw))
            pos += n
        if cspace.startswith("C420"):
            planes = [planes[0]] + [np.repeat(np.repeat(p, 2, 0), 2, 1)[:h, :w]
                                    for p in planes[1:]]
        frames.append(np.stack(planes))
    return frames


def _pad_even(frame: np.ndarray) -> np.ndarray:
    c, h, w = frame.shape
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return frame
    return np.pad(frame, ((0, 0), (0, ph), (0, pw)), mode="edge")


def round_trip_sequence(frames: list[Canvas],
                        cfg: CodecConfig) -> tuple[list[Canvas], int]:
    """Encode a frame sequence with the external tool and decode it back.

    Returns decoded frames in order plus the encoded file size in bits.
    """
    if cfg.backend != EXTERNAL:
        raise ValueError("round_trip_sequence requires the external backend")
    if not frames:
        raise ValueError("empty frame sequence")
    if not codec_availability(cfg):
        raise CodecUnavailableError(
            f"external codec backend unavailable: {cfg.encode_cmd!r}")
    dims = (frames[0].channels, frames[0].height, frames[0].width)
    for f in frames:
        if (f.channels, f.height, f.width) != dims:
            raise CodecError("all frames in a sequence must share dims")

    raw = [f.to_uint8() for f in frames]
    mono = dims[0] == 1
    if cfg.pixel_format == "420":
        raw = [_pad_even(f) for f in raw]
    ph, pw = raw[0].shape[1], raw[0].shape[2]
    if mono:
        pix_fmt = "gray"
        decode_pix_fmt = "gray"
    else:
        pix_fmt = "yuv420p" if cfg.pixel_format == "420" else "yuv444p"
        decode_pix_fmt = "yuv444p"

    with tempfile.TemporaryDirectory(dir=cfg.work_dir) as tmp:
        tmp = Path(tmp)
        src = tmp / "input.y4m"
        stream = tmp / "stream.bin"
        dst = tmp / "decoded.y4m"
        write_y4m(src, raw, cfg.fps)
        subst = dict(input=str(src), output=str(stream), q=cfg.quality,
                     width=pw, height=ph, fps=cfg.fps,
                     pix_fmt=pix_fmt, decode_pix_fmt=decode_pix_fmt)
        _run(cfg.encode_cmd, subst)
        bits = 8 * stream.stat().st_size
        subst.update(input=str(stream), output=str(dst))
        _run(cfg.decode_cmd, subst)
        decoded = read_y4m(dst)

    if len(decoded) != len(frames):
        raise CodecError(
            f"decoder returned {len(decoded)} frames for {len(frames)} inputs")
    out = []
    for f in decoded:
        if mono and f.shape[0] != 1:
            f = f[:1]  # luma plane back from a 3-plane decode
        f = f[:, :dims[1], :dims[2]]  # crop any even-padding
        if f.shape != dims:
            raise CodecError(f"decoded frame dims {f.shape} != input {dims}")
        out.append(Canvas.from_uint8(f))
    return out, bits


def _run(template: str, subst: dict) -> None:
    cmd = [tok.format(**subst) for tok in shlex.split(template)]
    try:
        proc = subprocess.run(cmd, capture_output=True, timeout=600)
    except FileNotFoundError as e:
        raise CodecUnavailableError(f"codec tool missing: {cmd[0]}") from e
    if proc.returncode != 0:
        raise CodecError(
            f"codec command failed ({proc.returncode}): {' '.join(cmd)}\n"
            f"stderr: {proc.stderr.decode(errors='replace')[-2000:]}")
