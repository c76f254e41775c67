# tests/test_manifest.py
import pytest

from app.core.exceptions import BadParams, DuplicatePath, EmptyClass, MissingFile
from app.storage.manifest import load_manifest, write_manifest


@pytest.fixture
def videos(tmp_path):
    for name in ("a.raw", "b.raw", "c.raw", "d.raw"):
        (tmp_path / name).write_bytes(b"")
    return tmp_path


def _write(root, text):
    path = root / "set.tsv"
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadManifest:

    def test_entries_and_directives(self, videos):
        path = _write(videos, "# name: waves\n# fps: 30\n\na.raw\tsea\tsea-1\nb.raw\tsmoke\tsmoke-1\t[1,2,30,40]\n")
        manifest = load_manifest(str(path))
        assert manifest.name == "waves"
        assert manifest.fps == 30.0
        assert manifest.classes == ["sea", "smoke"]
        assert manifest.entries[0].path == str((videos / "a.raw").resolve())
        assert manifest.entries[1].crop == (1, 2, 30, 40)
        assert manifest.class_index("smoke") == 1

    def test_shared_instance(self, videos):
        rows = "".join(f"{n}.raw\tsea\tsea-1\n" for n in "abcd")
        manifest = load_manifest(str(_write(videos, rows)))
        assert manifest.instances == ["sea-1"]
        assert len(manifest.entries) == 4

    def test_one_class_loads(self, videos):
        assert load_manifest(str(_write(videos, "a.raw\tsea\ts1\n"))).classes == ["sea"]

    def test_duplicate_path(self, videos):
        with pytest.raises(DuplicatePath):
            load_manifest(str(_write(videos, "a.raw\tsea\ts1\n./a.raw\tsea\ts2\n")))

    def test_missing_video(self, videos):
        with pytest.raises(MissingFile):
            load_manifest(str(_write(videos, "zzz.raw\tsea\ts1\n")))
        assert load_manifest(str(_write(videos, "zzz.raw\tsea\ts1\n")), check_files=False).entries

    def test_empty_label(self, videos):
        with pytest.raises(EmptyClass):
            load_manifest(str(_write(videos, "a.raw\t\ts1\n")))
        with pytest.raises(EmptyClass):
            load_manifest(str(_write(videos, "# only comments\n")))

    def test_malformed_rows(self, videos):
        with pytest.raises(BadParams):
            load_manifest(str(_write(videos, "a.raw sea s1\n")))
        with pytest.raises(BadParams):
            load_manifest(str(_write(videos, "a.raw\tsea\ts1\t[1,2]\n")))
        with pytest.raises(BadParams):
            load_manifest(str(_write(videos, "# fps: -3\na.raw\tsea\ts1\n")))

    def test_write_and_reload(self, videos):
        manifest = load_manifest(str(_write(videos, "# fps: 25\na.raw\tsea\ts1\t[0,0,2,2]\nb.raw\tfire\ts2\n")))
        out = videos / "copy.tsv"
        write_manifest(manifest, str(out))
        assert load_manifest(str(out)) == manifest
