# tests/test_video_io.py
import numpy as np
import pytest

from app.core.exceptions import BadParams, CorruptHeader, DimensionChangeMidStream, MissingFile, UnsupportedFormat
from app.storage.video_io import FrameStream, RAW_HEADER, RAW_MAGIC, read_frames, read_pgm, read_raw_header, write_pgm, write_raw


class TestRawContainer:
    """Raw float container layout and round trip."""

    def test_roundtrip_is_bit_identical(self, tmp_path, rng):
        video = rng.random((7, 5, 6)).astype(np.float32)
        path = tmp_path / "clip.strfvid"
        assert write_raw(FrameStream.from_array(video, fps=12.5), path) == 7
        stream = read_frames(str(path))
        assert (stream.width, stream.height, stream.frames, stream.fps) == (6, 5, 7, 12.5)
        np.testing.assert_array_equal(stream.to_array(), video)

    def test_file_size(self, tmp_path):
        path = tmp_path / "clip.raw"
        write_raw(FrameStream.from_array(np.zeros((3, 4, 5)), fps=25.0), path)
        assert len(RAW_MAGIC) + RAW_HEADER.size == 8 + 16 + 4
        assert path.stat().st_size == 8 + 16 + 4 + 3 * 4 * 5 * 4

    def test_other_sample_width_is_rejected(self, tmp_path):
        path = tmp_path / "clip.raw"
        path.write_bytes(RAW_MAGIC + RAW_HEADER.pack(2, 2, 1, 2, 25.0) + bytes(8))
        with pytest.raises(UnsupportedFormat):
            read_raw_header(path)

    def test_header(self, tmp_path):
        path = tmp_path / "clip.raw"
        write_raw(FrameStream.from_array(np.zeros((2, 3, 4)), fps=30.0), path)
        assert read_raw_header(path) == (4, 3, 2, 30.0)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "clip.raw"
        write_raw(FrameStream.from_array(np.zeros((4, 3, 3)), fps=25.0), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CorruptHeader):
            read_frames(str(path))

    def test_unknown_format(self, tmp_path):
        path = tmp_path / "clip.bin"
        path.write_bytes(b"NOTAVIDEO" + bytes(32))
        with pytest.raises(UnsupportedFormat):
            read_frames(str(path))

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFile):
            read_frames(str(tmp_path / "absent.raw"))


class TestPGM:
    """Single PGM frames and PGM sequence directories."""

    def test_eight_bit_maxval(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([255, 0]))
        np.testing.assert_allclose(read_pgm(path), [[1.0, 0.0]])

    def test_sixteen_bit(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_bytes(b"P5 2 1 1000\n" + np.array([1000, 250], dtype=">u2").tobytes())
        np.testing.assert_allclose(read_pgm(path), [[1.0, 0.25]])

    def test_ascii(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_text("P2\n3 1\n4\n0 2 4\n")
        np.testing.assert_allclose(read_pgm(path), [[0.0, 0.5, 1.0]])

    def test_bad_header(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_bytes(b"P5\n2 x\n255\n\x00\x00")
        with pytest.raises(CorruptHeader):
            read_pgm(path)
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(CorruptHeader):
            read_pgm(path)

    def test_directory_order(self, tmp_path):
        for name, value in (("b.pgm", 0.5), ("a.pgm", 0.0), ("c.pgm", 1.0)):
            write_pgm(tmp_path / name, np.full((2, 3), value))
        stream = read_frames(str(tmp_path), fps=10.0)
        assert len(stream) == 3 and stream.fps == 10.0
        means = [float(f.mean()) for f in stream]
        assert means == pytest.approx([0.0, 128 / 255, 1.0])

    def test_dimension_change(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 3)))
        write_pgm(tmp_path / "b.pgm", np.zeros((3, 3)))
        with pytest.raises(DimensionChangeMidStream):
            list(read_frames(str(tmp_path)))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(UnsupportedFormat):
            read_frames(str(tmp_path))


class TestCrop:

    def test_crop(self, rng):
        video = rng.random((3, 10, 12))
        stream = FrameStream.from_array(video, fps=25.0).crop((2, 1, 5, 4))
        assert stream.shape == (4, 5)
        np.testing.assert_allclose(stream.to_array(), video[:, 1:5, 2:7].astype(np.float32))

    def test_crop_outside_frame(self):
        with pytest.raises(BadParams):
            FrameStream.from_array(np.zeros((1, 4, 4)), fps=25.0).crop((2, 2, 4, 4))
