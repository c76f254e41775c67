# app/storage/video_io.py
"""Frame sources: PGM sequence directories and the raw float container.

Raw container layout (little-endian):
    b"STRFVID1" | u32 width | u32 height | u32 frame count | f32 fps | f32 frames, row-major
"""
import struct
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from app.core.config import logger, settings
from app.core.exceptions import (
    BadParams,
    CorruptHeader,
    DimensionChangeMidStream,
    MissingFile,
    UnsupportedFormat,
)

RAW_MAGIC = b"STRFVID1"
RAW_HEADER = struct.Struct("<IIIIf")  # width, height, frames, bytes per sample, fps
RAW_SAMPLE_BYTES = 4  # little-endian float32
RAW_SUFFIXES = (".strfvid", ".raw")
PGM_SUFFIXES = (".pgm", ".pnm")


class FrameStream:
    """Re-iterable sequence of float32 frames in [0, 1] (raw containers keep their values).

    Each iteration re-opens the source, so only one frame is resident at a time.
    """

    def __init__(self, width: int, height: int, fps: float, frames: Optional[int],
                 factory: Callable[[], Iterator[np.ndarray]], source: str = "<memory>"):
        self.width = int(width)
        self.height = int(height)
        self.fps = float(fps)
        self.frames = frames
        self.source = source
        self._factory = factory

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def __iter__(self) -> Iterator[np.ndarray]:
        return self._factory()

    def __len__(self) -> int:
        if self.frames is None:
            return sum(1 for _ in self)
        return self.frames

    def to_array(self) -> np.ndarray:
        return np.stack(list(self), axis=0)

    @classmethod
    def from_array(cls, video: np.ndarray, fps: float, source: str = "<memory>") -> "FrameStream":
        video = np.asarray(video, dtype=np.float32)
        if video.ndim != 3:
            raise BadParams(f"Video array must be (T, H, W), got shape {video.shape}")
        return cls(video.shape[2], video.shape[1], fps, video.shape[0], lambda: iter(list(video)), source)

    def crop(self, box: Optional[Tuple[int, int, int, int]]) -> "FrameStream":
        """Restrict every frame to the (x, y, w, h) rectangle."""
        if box is None:
            return self
        x, y, w, h = box
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > self.width or y + h > self.height:
            raise BadParams(f"Crop {box} falls outside a {self.width}x{self.height} frame")
        parent = self

        def frames() -> Iterator[np.ndarray]:
            for frame in parent:
                yield frame[y:y + h, x:x + w]

        return FrameStream(w, h, self.fps, self.frames, frames, f"{self.source}[{x},{y},{w},{h}]")


# --- PGM -------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptHeader("Truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path: Path) -> np.ndarray:
    """Decode one binary (P5) or ASCII (P2) PGM to float32 in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise UnsupportedFormat(f"{path}: not a PGM file (magic {magic!r})")
    try:
        tokens, pos = _pgm_tokens(data, 4)
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise CorruptHeader(f"{path}: {e}") from e
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise CorruptHeader(f"{path}: bad PGM header {width}x{height} maxval {maxval}")

    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(data) < pos + 1 + width * height * dtype.itemsize:
            raise CorruptHeader(f"{path}: pixel data shorter than {width}x{height}")
        pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos + 1)
    else:
        values = data[pos:].split()
        if len(values) < width * height:
            raise CorruptHeader(f"{path}: pixel data shorter than {width}x{height}")
        pixels = np.array(values[:width * height], dtype=np.int64)
    return (pixels.reshape(height, width).astype(np.float32)) / np.float32(maxval)


def write_pgm(path: Path, frame: np.ndarray, maxval: int = 255) -> None:
    """Write a [0, 1] frame as binary PGM."""
    frame = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    height, width = frame.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    pixels = np.rint(frame * maxval).astype(dtype)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        f.write(pixels.tobytes())


def _pgm_directory(path: Path, fps: float) -> FrameStream:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in PGM_SUFFIXES)
    if not files:
        raise UnsupportedFormat(f"{path}: directory holds no PGM frames")
    first = read_pgm(files[0])
    height, width = first.shape

    def frames() -> Iterator[np.ndarray]:
        for i, file in enumerate(files):
            frame = first if i == 0 else read_pgm(file)
            if frame.shape != (height, width):
                raise DimensionChangeMidStream(
                    f"{file}: frame is {frame.shape[1]}x{frame.shape[0]}, stream is {width}x{height}")
            yield frame

    return FrameStream(width, height, fps, len(files), frames, str(path))


# --- Raw container ---------------------------------------------------------

def read_raw_header(path: Path) -> Tuple[int, int, int, float]:
    """Width, height, frame count and fps of a raw container."""
    with open(path, "rb") as f:
        magic = f.read(len(RAW_MAGIC))
        if magic != RAW_MAGIC:
            raise UnsupportedFormat(f"{path}: not a raw frame container (magic {magic!r})")
        header = f.read(RAW_HEADER.size)
    if len(header) < RAW_HEADER.size:
        raise CorruptHeader(f"{path}: truncated header")
    width, height, count, sample_bytes, fps = RAW_HEADER.unpack(header)
    if sample_bytes != RAW_SAMPLE_BYTES:
        raise UnsupportedFormat(f"{path}: {sample_bytes}-byte samples; only float32 frames are supported")
    if width == 0 or height == 0 or not np.isfinite(fps) or fps <= 0:
        raise CorruptHeader(f"{path}: bad header {width}x{height} at {fps} fps")
    expected = len(RAW_MAGIC) + RAW_HEADER.size + width * height * count * RAW_SAMPLE_BYTES
    if Path(path).stat().st_size < expected:
        raise CorruptHeader(f"{path}: {count} frames declared but file is truncated")
    return width, height, count, float(fps)


def _raw_container(path: Path) -> FrameStream:
    width, height, count, fps = read_raw_header(path)
    offset = len(RAW_MAGIC) + RAW_HEADER.size

    def frames() -> Iterator[np.ndarray]:
        with open(path, "rb") as f:
            f.seek(offset)
            for _ in range(count):
                frame = np.fromfile(f, dtype="<f4", count=width * height)
                yield frame.reshape(height, width).astype(np.float32, copy=False)

    return FrameStream(width, height, fps, count, frames, str(path))


def write_raw(stream: FrameStream, path: Path) -> int:
    """Write stream to a raw container; returns the number of frames written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(RAW_HEADER.pack(stream.width, stream.height, 0, RAW_SAMPLE_BYTES, stream.fps))
        for frame in stream:
            if frame.shape != stream.shape:
                raise DimensionChangeMidStream(f"Frame {count} is {frame.shape}, stream is {stream.shape}")
            f.write(np.ascontiguousarray(frame, dtype="<f4").tobytes())
            count += 1
        f.seek(len(RAW_MAGIC))
        f.write(RAW_HEADER.pack(stream.width, stream.height, count, RAW_SAMPLE_BYTES, stream.fps))
    logger.info(f"Wrote {count} frame(s) of {stream.width}x{stream.height} to {path}")
    return count


def read_frames(source: str, fps: Optional[float] = None,
                crop: Optional[Tuple[int, int, int, int]] = None) -> FrameStream:
    """Open a PGM directory, a single PGM or a raw container as a frame stream.

    fps overrides the rate of PGM sources; raw containers carry their own.
    """
    path = Path(source)
    if not path.exists():
        raise MissingFile(f"Video source not found: {path}")
    rate = fps if fps is not None else settings.default_fps

    if path.is_dir():
        stream = _pgm_directory(path, rate)
    else:
        with open(path, "rb") as f:
            head = f.read(len(RAW_MAGIC))
        if head == RAW_MAGIC:
            stream = _raw_container(path)
        elif head[:2] in (b"P5", b"P2"):
            frame = read_pgm(path)
            stream = FrameStream.from_array(frame[None], rate, str(path))
        else:
            raise UnsupportedFormat(f"{path}: unrecognized video format")
    logger.debug(f"Opened {stream.source}: {stream.width}x{stream.height}, {stream.frames} frame(s) at {stream.fps} fps")
    return stream.crop(crop)
