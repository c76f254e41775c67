# tests/test_main_processor.py
import numpy as np
import pytest

import app.main_processor as processor
from app.core.exceptions import DimensionMismatch, EmptyTrainingSet, InsufficientHistory
from app.models.data_models import DescriptorConfig, SynthSpec
from app.processing.descriptor import fit_pca
from app.processing.synth import synth_texture
from app.storage.descriptor_store import DescriptorCache
from app.storage.manifest import load_manifest
from app.storage.video_io import FrameStream, write_raw

CONFIG = DescriptorConfig(sigma_s=[1.0], sigma_tau=[50.0], n_comp=6)


@pytest.fixture
def manifest(small_manifest):
    return load_manifest(str(small_manifest))


class TestFeatures:

    def test_border_margin(self):
        assert processor.border_margin(DescriptorConfig(sigma_s=[2.0, 4.0])) == 17
        assert processor.border_margin(DescriptorConfig(border_margin=3)) == 3

    def test_frames_after_warmup(self, rng):
        stream = FrameStream.from_array(rng.random((12, 16, 16)), fps=25.0)
        items = list(processor.iter_features(stream, CONFIG))
        assert [t for t, _ in items] == list(range(7, 12))
        assert items[0][1].shape == (6 * 6, 17)

    def test_video_shorter_than_warmup(self, rng):
        stream = FrameStream.from_array(rng.random((5, 16, 16)), fps=25.0)
        with pytest.raises(InsufficientHistory):
            list(processor.iter_features(stream, CONFIG))


class TestPipeline:
    """PCA fitting and descriptor extraction over a synthetic manifest."""

    def test_pca_is_cached(self, manifest, tmp_path, monkeypatch):
        cache = DescriptorCache(str(tmp_path / "cache"))
        model = processor.fit_pca_for_manifest(manifest, CONFIG, seed=0, cache=cache)
        assert model.input_dim == 17
        assert model.fieldset == "STRF-Njet"

        def fail(job):
            raise AssertionError("videos sampled again")

        monkeypatch.setattr(processor, "sample_video", fail)
        again = processor.fit_pca_for_manifest(manifest, CONFIG, seed=0, cache=cache)
        np.testing.assert_array_equal(again.components, model.components)

    def test_descriptors_for_several_n_comp(self, manifest):
        model = processor.fit_pca_for_manifest(manifest, CONFIG)
        by_m = processor.extract_descriptors(manifest, CONFIG, model, n_comps=[4, 6])
        assert sorted(by_m) == [4, 6]
        for m, dataset in by_m.items():
            assert len(dataset) == 9
            for item in dataset:
                assert item.histogram.M == m and item.histogram.normalized
                assert item.histogram.items()[1].sum() == pytest.approx(1.0, abs=1e-9)
                assert item.n_nonempty <= 2 ** m
        assert [d.label for d in by_m[4][:3]] == ["sine", "flicker", "static"]

    def test_windows_tile_post_warmup_frames(self, manifest):
        config = CONFIG.model_copy(update={"window": 8})
        model = processor.fit_pca_for_manifest(manifest, config)
        dataset = processor.extract_descriptors(manifest, config, model)[6]
        # 40 frames give windows [0, 8) .. [32, 40); the first holds only frame 7
        assert len(dataset) == 9 * 5
        assert [d.window for d in dataset[:5]] == [0, 1, 2, 3, 4]
        assert {d.video_id for d in dataset[:5]} == {0}

    @pytest.mark.parametrize("frames", [128, 133])
    def test_windows_sit_on_absolute_frame_positions(self, rng, frames):
        stream = FrameStream.from_array(rng.random((frames, 16, 16)), fps=25.0)
        config = CONFIG.model_copy(update={"window": 8})
        model = fit_pca(np.concatenate([r for _, r in processor.iter_features(stream, config)]), 6)
        hists = processor.describe_stream(stream, config, processor.build_binnings(model, config, [6]), model)[6]
        assert len(hists) == 16
        assert hists[0].total == 36
        assert all(h.total == 8 * 36 for h in hists[1:])

    def test_windows_inside_warmup_are_skipped(self, rng):
        stream = FrameStream.from_array(rng.random((20, 16, 16)), fps=25.0)
        config = CONFIG.model_copy(update={"window": 2})
        model = fit_pca(np.concatenate([r for _, r in processor.iter_features(stream, config)]), 6)
        hists = processor.describe_stream(stream, config, processor.build_binnings(model, config, [6]), model)[6]
        # frames 7..19: window [6, 8) keeps frame 7, then [8, 10) .. [18, 20)
        assert len(hists) == 7
        assert [h.total for h in hists] == [36] + [72] * 6

    def test_cached_descriptors_are_reused(self, manifest, tmp_path, monkeypatch):
        cache = DescriptorCache(str(tmp_path / "cache"))
        model = processor.fit_pca_for_manifest(manifest, CONFIG, cache=cache)
        first = processor.extract_descriptors(manifest, CONFIG, model, cache=cache)[6]

        def fail(*args, **kwargs):
            raise AssertionError("descriptor recomputed")

        monkeypatch.setattr(processor, "describe_stream", fail)
        second = processor.extract_descriptors(manifest, CONFIG, model, cache=cache)[6]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.histogram.items()[0], b.histogram.items()[0])
            np.testing.assert_allclose(a.histogram.items()[1], b.histogram.items()[1])

    def test_descriptor_digest_depends_on_model(self, manifest, rng):
        a = fit_pca(rng.normal(size=(40, 17)), 6)
        b = fit_pca(rng.normal(size=(40, 17)), 6)
        assert processor.descriptor_digest(CONFIG, manifest, a) != processor.descriptor_digest(CONFIG, manifest, b)
        assert processor.descriptor_digest(CONFIG, manifest, a) == processor.descriptor_digest(CONFIG, manifest, a)

    def test_model_from_other_scales_is_rejected(self, manifest):
        model = processor.fit_pca_for_manifest(manifest, CONFIG)
        other = CONFIG.model_copy(update={"sigma_s": [2.0]})
        with pytest.raises(DimensionMismatch):
            processor.extract_descriptors(manifest, other, model)

    def test_workers_do_not_change_output(self, manifest, tmp_path):
        serial = processor.fit_pca_for_manifest(manifest, CONFIG, workers=1)
        pooled = processor.fit_pca_for_manifest(manifest, CONFIG, workers=2)
        assert processor.model_fingerprint(pooled) == processor.model_fingerprint(serial)

        one, two = DescriptorCache(str(tmp_path / "one")), DescriptorCache(str(tmp_path / "two"))
        processor.extract_descriptors(manifest, CONFIG, serial, n_comps=[4, 6], cache=one, workers=1)
        processor.extract_descriptors(manifest, CONFIG, pooled, n_comps=[4, 6], cache=two, workers=2)
        files = sorted(p.relative_to(one.root) for p in one.root.rglob("*.strfhist"))
        assert len(files) == 9 * 2
        assert files == sorted(p.relative_to(two.root) for p in two.root.rglob("*.strfhist"))
        for name in files:
            assert (one.root / name).read_bytes() == (two.root / name).read_bytes()


class TestFoldDescriptors:
    """PCA fitted on one fold's training videos."""

    def test_every_video_reproduces_the_manifest_model(self, manifest):
        whole = processor.fit_pca_for_manifest(manifest, CONFIG)
        model = processor.FoldDescriptors(manifest, CONFIG).model(range(9))
        np.testing.assert_allclose(model.components, whole.components)
        np.testing.assert_allclose(model.proj_std, whole.proj_std)

    def test_held_out_video_does_not_reach_the_model(self, manifest, small_manifest):
        before = processor.FoldDescriptors(manifest, CONFIG)
        train_only, everything = before.model(range(8)), before.model(range(9))

        replacement = SynthSpec(kind="advected-noise", width=32, height=32, frames=40, velocity=0.5, seed=99)
        write_raw(synth_texture(replacement), manifest.entries[8].path)
        after = processor.FoldDescriptors(load_manifest(str(small_manifest)), CONFIG)
        np.testing.assert_array_equal(after.model(range(8)).components, train_only.components)
        assert not np.allclose(after.model(range(9)).components, everything.components)

    def test_descriptors_are_memoized_per_training_set(self, manifest, monkeypatch):
        folds = processor.FoldDescriptors(manifest, CONFIG, n_comps=[4, 6])
        first = folds(np.arange(1, 9))
        assert len(first) == 9
        assert first[0].histogram.M == 6

        calls = []
        real = processor.extract_descriptors

        def counting(*args, **kwargs):
            calls.append(1)
            return real(*args, **kwargs)

        monkeypatch.setattr(processor, "extract_descriptors", counting)
        assert folds.for_n_comp(4)(np.arange(8, 0, -1))[0].histogram.M == 4
        assert calls == []
        folds(np.arange(0, 8))
        assert calls == [1]
        assert 0 < folds.mean_nonempty(4) <= 16

    def test_empty_training_set(self, manifest):
        with pytest.raises(EmptyTrainingSet):
            processor.FoldDescriptors(manifest, CONFIG).model([])
