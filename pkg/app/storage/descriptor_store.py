# app/storage/descriptor_store.py
"""PCA model files, descriptor files and the digest-keyed cache that holds them.

PCA model (little-endian):
    b"STRFPCA1" | u16 len + field-set name | 16 B channel-order hash | u32 N | u32 M_max | u64 seed
    | f64 mean[N] | f64 components[M_max·N] | f64 eigenvalues[M_max] | f64 proj_mean[M_max] | f64 proj_std[M_max]

Descriptor:
    b"STRFHIST1" | 64 B hex config digest | u32 M | u32 n_bins | u8 binary | u64 total | u64 n_records
    | n_records × (u64 cell index, f64 probability), index ascending
"""
import struct
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.core.config import logger
from app.core.exceptions import CacheCorrupt, CorruptHeader, EmptyHistogram, UnsupportedFormat
from app.processing.descriptor import JointHistogram, PCAModel, normalize

PCA_MAGIC = b"STRFPCA1"
HIST_MAGIC = b"STRFHIST1"
_PCA_DIMS = struct.Struct("<IIQ")
_HIST_HEADER = struct.Struct("<64sIIBQQ")
_RECORD = np.dtype([("index", "<u8"), ("value", "<f8")])


# --- PCA model -------------------------------------------------------------

def save_pca(model: PCAModel, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = model.fieldset.encode("utf-8")
    order_hash = model.order_hash.encode("ascii")[:16].ljust(16, b"\0")
    with open(path, "wb") as f:
        f.write(PCA_MAGIC)
        f.write(struct.pack("<H", len(name)))
        f.write(name)
        f.write(order_hash)
        f.write(_PCA_DIMS.pack(model.input_dim, model.max_components, model.seed))
        for array in (model.mean, model.components, model.eigenvalues, model.proj_mean, model.proj_std):
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.debug(f"Saved PCA model ({model.max_components}×{model.input_dim}) to {path}")


def load_pca(path: Path) -> PCAModel:
    data = Path(path).read_bytes()
    if not data.startswith(PCA_MAGIC):
        raise UnsupportedFormat(f"{path}: not a PCA model file")
    try:
        pos = len(PCA_MAGIC)
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        fieldset = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        order_hash = data[pos:pos + 16].rstrip(b"\0").decode("ascii")
        pos += 16
        dim, m_max, seed = _PCA_DIMS.unpack_from(data, pos)
        pos += _PCA_DIMS.size
        sizes = [dim, m_max * dim, m_max, m_max, m_max]
        arrays = []
        for size in sizes:
            arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64))
            pos += size * 8
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CorruptHeader(f"{path}: {e}") from e
    mean, components, eigenvalues, proj_mean, proj_std = arrays
    return PCAModel(input_dim=dim, mean=mean, components=components.reshape(m_max, dim),
                    eigenvalues=eigenvalues, proj_mean=proj_mean, proj_std=proj_std,
                    seed=seed, fieldset=fieldset, order_hash=order_hash)


# --- Descriptor ------------------------------------------------------------

def save_descriptor(hist: JointHistogram, path: Path, config_digest: str, binary: bool) -> None:
    """Write the normalized form of hist."""
    if hist.total == 0:
        raise EmptyHistogram(f"Refusing to write an empty descriptor to {path}")
    probs = normalize(hist)
    keys, values = probs.items()
    records = np.empty(keys.size, dtype=_RECORD)
    records["index"] = keys
    records["value"] = values
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HIST_MAGIC)
        f.write(_HIST_HEADER.pack(config_digest.encode("ascii"), hist.M, hist.n_bins, int(binary),
                                  hist.total, keys.size))
        f.write(records.tobytes())


def load_descriptor(path: Path, expected_digest: Optional[str] = None) -> JointHistogram:
    data = Path(path).read_bytes()
    if not data.startswith(HIST_MAGIC):
        raise UnsupportedFormat(f"{path}: not a descriptor file")
    pos = len(HIST_MAGIC)
    try:
        digest, M, n_bins, _binary, total, n_records = _HIST_HEADER.unpack_from(data, pos)
        records = np.frombuffer(data, dtype=_RECORD, count=n_records, offset=pos + _HIST_HEADER.size)
    except (struct.error, ValueError) as e:
        raise CorruptHeader(f"{path}: {e}") from e
    digest = digest.rstrip(b"\0").decode("ascii")
    if expected_digest is not None and digest != expected_digest:
        raise CacheCorrupt(f"{path}: written for config {digest[:12]}, expected {expected_digest[:12]}")
    return JointHistogram.from_items(M, n_bins, records["index"].copy(), records["value"].copy(), total,
                                     normalized=True)


# --- Cache -----------------------------------------------------------------

class DescriptorCache:
    """Artifacts under <root>/<kind>/<digest>/…; anything unreadable counts as a miss."""

    def __init__(self, root: str):
        self.root = Path(root)

    def pca_path(self, digest: str) -> Path:
        return self.root / "pca" / f"{digest}.strfpca"

    def descriptor_path(self, digest: str, video_index: int, window: Optional[int] = None) -> Path:
        name = f"{video_index:05d}" if window is None else f"{video_index:05d}_w{window:04d}"
        return self.root / "descriptors" / digest / f"{name}.strfhist"

    def load_pca(self, digest: str) -> Optional[PCAModel]:
        path = self.pca_path(digest)
        if not path.exists():
            return None
        try:
            model = load_pca(path)
        except (UnsupportedFormat, CorruptHeader) as e:
            logger.warning(f"Ignoring unreadable cached PCA model {path}: {e}")
            return None
        logger.debug(f"Cache hit: PCA model {digest[:12]}")
        return model

    def store_pca(self, digest: str, model: PCAModel) -> Path:
        path = self.pca_path(digest)
        save_pca(model, path)
        return path

    def load_descriptor(self, digest: str, video_index: int, window: Optional[int] = None) -> Optional[JointHistogram]:
        path = self.descriptor_path(digest, video_index, window)
        if not path.exists():
            return None
        try:
            return load_descriptor(path, expected_digest=digest)
        except (UnsupportedFormat, CorruptHeader, CacheCorrupt) as e:
            logger.warning(f"Ignoring unreadable cached descriptor {path}: {e}")
            return None

    def store_descriptor(self, digest: str, video_index: int, hist: JointHistogram, binary: bool,
                         window: Optional[int] = None) -> Path:
        path = self.descriptor_path(digest, video_index, window)
        save_descriptor(hist, path, digest, binary)
        return path

    def load_windows(self, digest: str, video_index: int) -> Optional[List[JointHistogram]]:
        """All window descriptors of one video, or None unless the full set was stored."""
        marker = self.descriptor_path(digest, video_index).with_suffix(".windows")
        if not marker.exists():
            return None
        try:
            count = int(marker.read_text(encoding="ascii").strip())
        except ValueError:
            logger.warning(f"Ignoring unreadable window marker {marker}")
            return None
        hists = [self.load_descriptor(digest, video_index, w) for w in range(count)]
        if any(h is None for h in hists):
            return None
        return hists

    def store_windows(self, digest: str, video_index: int, hists: List[JointHistogram], binary: bool) -> None:
        for w, hist in enumerate(hists):
            self.store_descriptor(digest, video_index, hist, binary, window=w)
        marker = self.descriptor_path(digest, video_index).with_suffix(".windows")
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(str(len(hists)), encoding="ascii")
