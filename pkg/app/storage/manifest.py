# app/storage/manifest.py
"""Dataset manifests: one video per line, tab separated.

    <path>\t<class>\t<instance>[\t[x,y,w,h]]

Blank lines and lines starting with '#' are ignored, except the directives
'# name: <text>' and '# fps: <rate>'. Relative paths resolve against the
manifest's directory.
"""
import re
from pathlib import Path
from typing import List, Optional, Tuple

from app.core.config import logger
from app.core.exceptions import BadParams, DuplicatePath, EmptyClass, MissingFile
from app.models.data_models import DatasetManifest, ManifestEntry

_DIRECTIVE = re.compile(r"^#\s*(name|fps)\s*[:=]\s*(.+?)\s*$", re.IGNORECASE)
_CROP = re.compile(r"^\[?\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]?$")


def _parse_crop(text: str, where: str) -> Tuple[int, int, int, int]:
    match = _CROP.match(text.strip())
    if not match:
        raise BadParams(f"{where}: crop must look like [x,y,w,h], got '{text}'")
    x, y, w, h = (int(g) for g in match.groups())
    if x < 0 or y < 0 or w <= 0 or h <= 0:
        raise BadParams(f"{where}: crop {text} must have non-negative origin and positive size")
    return x, y, w, h


def load_manifest(path: str, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest; classes and instances are indexed in order of first appearance."""
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise MissingFile(f"Manifest not found: {manifest_path}")
    base = manifest_path.parent
    name: str = manifest_path.stem
    fps: Optional[float] = None
    entries: List[ManifestEntry] = []
    seen = set()

    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r\n")
        where = f"{manifest_path}:{lineno}"
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            directive = _DIRECTIVE.match(line.strip())
            if directive:
                key, value = directive.group(1).lower(), directive.group(2)
                if key == "name":
                    name = value
                else:
                    try:
                        fps = float(value)
                    except ValueError as e:
                        raise BadParams(f"{where}: bad fps '{value}'") from e
                    if fps <= 0:
                        raise BadParams(f"{where}: fps must be positive, got {fps}")
            continue

        fields = line.split("\t")
        if len(fields) < 3 or len(fields) > 4:
            raise BadParams(f"{where}: expected 3 or 4 tab-separated fields, got {len(fields)}")
        video, label, instance = (f.strip() for f in fields[:3])
        if not label:
            raise EmptyClass(f"{where}: empty class label")
        if not video or not instance:
            raise BadParams(f"{where}: path and instance must be non-empty")
        crop = _parse_crop(fields[3], where) if len(fields) == 4 and fields[3].strip() else None

        resolved = (base / video).resolve() if not Path(video).is_absolute() else Path(video)
        if str(resolved) in seen:
            raise DuplicatePath(f"{where}: '{video}' listed twice")
        seen.add(str(resolved))
        if check_files and not resolved.exists():
            raise MissingFile(f"{where}: video '{video}' not found")
        entries.append(ManifestEntry(path=str(resolved), label=label, instance=instance, crop=crop))

    if not entries:
        raise EmptyClass(f"{manifest_path}: manifest lists no videos")

    classes = list(dict.fromkeys(e.label for e in entries))
    instances = list(dict.fromkeys(e.instance for e in entries))
    logger.info(f"Loaded manifest '{name}': {len(entries)} video(s), {len(classes)} class(es), {len(instances)} instance(s)")
    return DatasetManifest(name=name, fps=fps, entries=entries, classes=classes, instances=instances)


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    lines = [f"# name: {manifest.name}"]
    if manifest.fps is not None:
        lines.append(f"# fps: {manifest.fps}")
    for e in manifest.entries:
        row = [e.path, e.label, e.instance]
        if e.crop is not None:
            row.append("[" + ",".join(str(v) for v in e.crop) + "]")
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
