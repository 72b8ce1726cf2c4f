"""Fusion: mean/argmax/gating semantics, the cache format, and the
streaming engine's equivalence and memory contracts."""

import struct
import threading
import zlib

import numpy as np
import pytest

from fdakit import (
    IGNORE_LABEL,
    BufferMeter,
    DataError,
    DimensionError,
    FormatError,
    FusionManifest,
    MemoryBudgetError,
    ParameterError,
    ProbMap,
    argmax_labels,
    load_label,
    load_probmap,
    mbt_mean,
    pseudo_labels,
    read_manifest,
    store_probmap,
    streaming_fuse,
)
from fdakit.fusion import CODEC_RAW, CODEC_ZLIB, PROBMAP_MAGIC

from oracles import naive_argmax, naive_mean


def normalized_map(rng, classes, height, width, model_index=None):
    raw = rng.uniform(0.01, 1.0, (classes, height, width))
    raw /= raw.sum(axis=0)
    return ProbMap(raw, normalized=True, model_index=model_index)


class TestProbMap:
    def test_rejects_negative_scores(self):
        with pytest.raises(DataError):
            ProbMap(np.full((2, 2, 2), -0.1))

    def test_rejects_non_finite(self):
        bad = np.zeros((1, 2, 2))
        bad[0, 0, 0] = np.inf
        with pytest.raises(DataError):
            ProbMap(bad)

    def test_normalized_flag_verified(self):
        with pytest.raises(DataError):
            ProbMap(np.full((4, 3, 3), 0.3), normalized=True)
        ProbMap(np.full((4, 3, 3), 0.25), normalized=True)

    def test_from_scores_casts(self):
        pm = ProbMap.from_scores([[[1, 2]], [[3, 4]]])
        assert pm.scores.dtype == np.float64
        assert (pm.classes, pm.height, pm.width) == (2, 1, 2)


class TestMbtMean:
    def test_single_map_is_identity(self):
        rng = np.random.default_rng(0)
        pm = normalized_map(rng, 5, 4, 6)
        out = mbt_mean([pm])
        assert np.array_equal(out.scores, pm.scores)
        assert out.normalized

    def test_two_map_symmetry(self):
        a = ProbMap(np.array([[[1.0]], [[0.0]]]), normalized=True)
        b = ProbMap(np.array([[[0.0]], [[1.0]]]), normalized=True)
        out = mbt_mean([a, b])
        assert out.scores[:, 0, 0].tolist() == [0.5, 0.5]

    def test_matches_triple_sum_oracle(self):
        rng = np.random.default_rng(1)
        maps = [normalized_map(rng, 3, 4, 5) for _ in range(3)]
        expected = np.array(naive_mean([m.scores.tolist() for m in maps]))
        assert np.abs(mbt_mean(maps).scores - expected).max() < 1e-12

    def test_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(2)
        maps = [normalized_map(rng, 4, 6, 7, model_index=m) for m in range(4)]
        reference = mbt_mean(maps).scores
        for perm in ([3, 1, 0, 2], [2, 3, 1, 0], [1, 0, 3, 2]):
            shuffled = [maps[i] for i in perm]
            assert np.array_equal(mbt_mean(shuffled).scores, reference)

    def test_normalized_flag_needs_all_inputs(self):
        rng = np.random.default_rng(3)
        a = normalized_map(rng, 2, 2, 2)
        b = ProbMap(rng.uniform(0, 1, (2, 2, 2)))
        assert not mbt_mean([a, b]).normalized

    def test_shape_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(DimensionError):
            mbt_mean([normalized_map(rng, 2, 2, 2), normalized_map(rng, 2, 2, 3)])

    def test_empty_list(self):
        with pytest.raises(ParameterError):
            mbt_mean([])


class TestArgmaxLabels:
    def test_fixed_pixels(self):
        pm = ProbMap(np.array([0.1, 0.7, 0.2]).reshape(3, 1, 1), normalized=True)
        assert argmax_labels(pm)[0, 0] == 1

    def test_tie_takes_lowest_index(self):
        third = np.full((3, 2, 2), 1 / 3)
        assert (argmax_labels(ProbMap(third, normalized=True)) == 0).all()

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(5)
        pm = normalized_map(rng, 19, 32, 32)
        expected = np.array(naive_argmax(pm.scores.tolist()), dtype=np.uint8)
        assert np.array_equal(argmax_labels(pm), expected)

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        raw = rng.uniform(0, 1, (7, 8, 9))
        a = argmax_labels(ProbMap(raw))
        b = argmax_labels(ProbMap(raw * 37.5))
        assert np.array_equal(a, b)

    def test_output_dtype(self):
        rng = np.random.default_rng(7)
        labels = argmax_labels(normalized_map(rng, 19, 4, 4))
        assert labels.dtype == np.uint8


class TestPseudoLabels:
    def test_threshold_zero_equals_argmax(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            pm = normalized_map(rng, 6, 5, 7)
            assert np.array_equal(pseudo_labels(pm, threshold=0.0), argmax_labels(pm))

    def test_closed_gate_rejects_everything(self):
        scores = np.stack([np.full((3, 3), 0.7), np.full((3, 3), 0.3)])
        pm = ProbMap(scores, normalized=True)
        assert (pseudo_labels(pm, threshold=1.0) == IGNORE_LABEL).all()

    def test_constructed_forty_percent_pass(self):
        # 40 of 100 pixels win at 0.95, the rest at 0.85; a 0.9 gate keeps
        # exactly the forty
        winning = np.full(100, 0.85)
        winning[:40] = 0.95
        winning = winning.reshape(10, 10)
        pm = ProbMap(np.stack([winning, 1.0 - winning]), normalized=True)
        out = pseudo_labels(pm, threshold=0.9)
        assert (out == 0).sum() == 40
        assert (out == IGNORE_LABEL).sum() == 60

    def test_default_gate_is_090(self):
        winning = np.full((4, 4), 0.85)
        winning[0, 0] = 0.95
        pm = ProbMap(np.stack([winning, 1.0 - winning]), normalized=True)
        assert np.array_equal(pseudo_labels(pm), pseudo_labels(pm, threshold=0.9))

    def test_gate_monotonicity(self):
        rng = np.random.default_rng(9)
        pm = normalized_map(rng, 4, 12, 12)
        previous = pseudo_labels(pm, threshold=0.0)
        for t in (0.2, 0.3, 0.5, 0.9, 1.0):
            current = pseudo_labels(pm, threshold=t)
            newly_labeled = (current != IGNORE_LABEL) & (previous == IGNORE_LABEL)
            assert not newly_labeled.any()
            previous = current

    def test_top_fraction_counts(self):
        # class 0 wins all 10 pixels with distinct scores; keep ceil(3.0)
        winning = np.linspace(0.6, 0.9, 10).reshape(1, 10)
        pm = ProbMap(np.stack([winning, 1.0 - winning]), normalized=True)
        out = pseudo_labels(pm, top_fraction=0.3)
        kept = out != IGNORE_LABEL
        assert kept.sum() == 3
        # the kept pixels are the three best scores
        assert set(np.flatnonzero(kept[0])) == {7, 8, 9}

    def test_top_fraction_tie_breaks_by_scan_order(self):
        winning = np.full((1, 4), 0.9)
        pm = ProbMap(np.stack([winning, 1.0 - winning]), normalized=True)
        out = pseudo_labels(pm, top_fraction=0.5)
        assert out[0].tolist() == [0, 0, IGNORE_LABEL, IGNORE_LABEL]

    def test_top_fraction_is_per_class(self):
        # two classes with very different score ranges each keep half
        winning = np.array([[0.99, 0.98, 0.61, 0.6]])
        winners = np.array([[0, 0, 1, 1]])
        scores = np.where(winners == 0, winning, 1.0 - winning)
        pm = ProbMap(np.stack([scores, 1.0 - scores]), normalized=True)
        out = pseudo_labels(pm, top_fraction=0.5)
        assert out[0].tolist() == [0, IGNORE_LABEL, 1, IGNORE_LABEL]

    def test_bad_parameters(self):
        rng = np.random.default_rng(10)
        pm = normalized_map(rng, 2, 2, 2)
        with pytest.raises(ParameterError):
            pseudo_labels(pm, threshold=1.5)
        with pytest.raises(ParameterError):
            pseudo_labels(pm, threshold=-0.1)
        with pytest.raises(ParameterError):
            pseudo_labels(pm, top_fraction=0.0)
        with pytest.raises(ParameterError):
            pseudo_labels(pm, threshold=0.5, top_fraction=0.5)

    def test_requires_normalized(self):
        with pytest.raises(ParameterError):
            pseudo_labels(ProbMap(np.ones((2, 2, 2))), threshold=0.5)


class TestCacheFormat:
    def test_roundtrip_both_codecs(self, tmp_path):
        rng = np.random.default_rng(11)
        pm = normalized_map(rng, 4, 16, 16, model_index=2)
        for codec in (CODEC_RAW, CODEC_ZLIB):
            path = tmp_path / f"m{codec}.fdap"
            written = store_probmap(pm, path, codec=codec)
            assert written == path.stat().st_size
            back = load_probmap(path, model_index=2)
            assert np.array_equal(back.scores, pm.scores)
            assert back.normalized == pm.normalized
            assert back.model_index == 2

    def test_header_layout(self, tmp_path):
        rng = np.random.default_rng(12)
        path = tmp_path / "m.fdap"
        store_probmap(normalized_map(rng, 3, 5, 9), path)
        magic, version, height, width, classes, normalized, codec = struct.unpack(
            "<4sIIIIBB", path.read_bytes()[:22]
        )
        assert magic == PROBMAP_MAGIC == b"FDAP"
        assert version == 1
        assert (height, width, classes) == (5, 9, 3)
        assert normalized == 1
        assert codec == CODEC_ZLIB

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(13)
        path = tmp_path / "m.fdap"
        store_probmap(normalized_map(rng, 2, 3, 3), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(blob)
        with pytest.raises(FormatError) as err:
            load_probmap(path)
        assert "magic" in str(err.value)

    def test_unsupported_version(self, tmp_path):
        rng = np.random.default_rng(14)
        path = tmp_path / "m.fdap"
        store_probmap(normalized_map(rng, 2, 3, 3), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(blob)
        with pytest.raises(FormatError) as err:
            load_probmap(path)
        assert "version" in str(err.value)

    def test_truncation(self, tmp_path):
        rng = np.random.default_rng(15)
        path = tmp_path / "m.fdap"
        store_probmap(normalized_map(rng, 2, 8, 8), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            load_probmap(path)

    def test_corrupt_payload(self, tmp_path):
        rng = np.random.default_rng(16)
        path = tmp_path / "m.fdap"
        store_probmap(normalized_map(rng, 1, 8, 8), path)
        blob = bytearray(path.read_bytes())
        blob[-8:] = b"\xff" * 8
        path.write_bytes(blob)
        with pytest.raises(FormatError):
            load_probmap(path)

    def test_compression_shrinks_smooth_maps(self, tmp_path):
        # softmax-like outputs are locally smooth; zlib should bite
        rng = np.random.default_rng(17)
        base = np.linspace(0, 1, 64 * 64).reshape(64, 64)
        scores = np.stack([base, 1.0 - base]) * 0.5 + 0.25
        pm = ProbMap(scores / scores.sum(axis=0), normalized=True)
        raw_size = store_probmap(pm, tmp_path / "raw.fdap", codec=CODEC_RAW)
        zip_size = store_probmap(pm, tmp_path / "zip.fdap", codec=CODEC_ZLIB)
        assert zip_size < 0.6 * raw_size


def write_chunks(tmp_path, images, models, classes=5, height=6, width=8, seed=18):
    """Store a grid of random normalized maps and the manifest listing them."""
    rng = np.random.default_rng(seed)
    lines = []
    stacks = {}
    for i in range(images):
        paths = []
        maps = []
        for m in range(models):
            pm = normalized_map(rng, classes, height, width, model_index=m)
            name = f"img{i:02d}_m{m}.fdap"
            store_probmap(pm, tmp_path / name)
            paths.append(name)
            maps.append(pm)
        stacks[f"img{i:02d}"] = maps
        lines.append("\t".join([f"img{i:02d}"] + paths))
    manifest_path = tmp_path / "manifest.txt"
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path, stacks


class TestManifest:

    def test_read_and_resolve_relative(self, tmp_path):
        path, _ = write_chunks(tmp_path, images=2, models=3)
        manifest = read_manifest(path)
        assert manifest.model_count == 3
        assert len(manifest.entries) == 2
        for _, chunk_paths in manifest.entries:
            assert all(p.is_file() for p in chunk_paths)

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("a\tx.fdap\na\ty.fdap\n")
        with pytest.raises(FormatError) as err:
            read_manifest(path)
        assert "duplicate" in str(err.value)

    def test_ragged_columns(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("a\tx.fdap\tb.fdap\nc\ty.fdap\n")
        with pytest.raises(FormatError):
            read_manifest(path)

    def test_empty(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("\n\n")
        with pytest.raises(FormatError):
            read_manifest(path)

    def test_entry_width_invariant(self):
        with pytest.raises(FormatError):
            FusionManifest((("a", ("x",)),), model_count=2)


class TestStreamingFuse:
    def in_memory(self, maps, **gate):
        return pseudo_labels(mbt_mean(maps), **gate)

    def test_bitwise_equivalence(self, tmp_path):
        for models in (1, 3, 5):
            sub = tmp_path / f"m{models}"
            sub.mkdir()
            path, stacks = write_chunks(sub, images=6, models=models, seed=20 + models)
            report = streaming_fuse(read_manifest(path), sub / "out", threshold=0.25)
            assert report.images_processed == 6
            assert not report.failures
            for image_id, maps in stacks.items():
                expected = self.in_memory(maps, threshold=0.25)
                got = load_label(sub / "out" / f"{image_id}.png")
                assert np.array_equal(got, expected)

    def test_equivalence_with_top_fraction(self, tmp_path):
        path, stacks = write_chunks(tmp_path, images=4, models=2, seed=30)
        streaming_fuse(read_manifest(path), tmp_path / "out", top_fraction=0.4)
        for image_id, maps in stacks.items():
            expected = self.in_memory(maps, top_fraction=0.4)
            assert np.array_equal(load_label(tmp_path / "out" / f"{image_id}.png"), expected)

    def test_argmax_mode_single_model(self, tmp_path):
        path, stacks = write_chunks(tmp_path, images=3, models=1, seed=40)
        streaming_fuse(read_manifest(path), tmp_path / "out", threshold=0.0)
        for image_id, maps in stacks.items():
            got = load_label(tmp_path / "out" / f"{image_id}.png")
            assert np.array_equal(got, argmax_labels(maps[0]))

    def test_peak_within_documented_bound(self, tmp_path):
        classes, height, width = 19, 32, 48
        map_bytes = classes * height * width * 8
        bound = 2 * map_bytes + height * width
        peaks = {}
        for models in (1, 3, 5):
            sub = tmp_path / f"m{models}"
            sub.mkdir()
            path, _ = write_chunks(
                sub, images=4, models=models, classes=classes, height=height, width=width, seed=models
            )
            report = streaming_fuse(read_manifest(path), sub / "out", threshold=0.1)
            assert report.peak_buffer_bytes <= bound
            peaks[models] = report.peak_buffer_bytes
        # flat in the model count: adding models never adds buffers
        assert peaks[3] == peaks[5]
        assert abs(peaks[3] - peaks[1]) <= map_bytes

    def test_missing_chunk_fails_only_that_image(self, tmp_path):
        path, stacks = write_chunks(tmp_path, images=4, models=2, seed=50)
        (tmp_path / "img01_m1.fdap").unlink()
        report = streaming_fuse(read_manifest(path), tmp_path / "out", threshold=0.2)
        assert report.images_processed == 3
        assert len(report.failures) == 1
        assert report.failures[0][0] == "img01"
        assert not (tmp_path / "out" / "img01.png").exists()
        for image_id in ("img00", "img02", "img03"):
            expected = self.in_memory(stacks[image_id], threshold=0.2)
            assert np.array_equal(load_label(tmp_path / "out" / f"{image_id}.png"), expected)

    def test_corrupt_chunk_fails_only_that_image(self, tmp_path):
        path, _ = write_chunks(tmp_path, images=3, models=2, seed=60)
        chunk = tmp_path / "img02_m0.fdap"
        chunk.write_bytes(chunk.read_bytes()[:30])
        report = streaming_fuse(read_manifest(path), tmp_path / "out", threshold=0.2)
        assert report.images_processed == 2
        assert report.failures[0][0] == "img02"

    def test_budget_too_small_aborts(self, tmp_path):
        path, _ = write_chunks(tmp_path, images=2, models=2, seed=70)
        with pytest.raises(MemoryBudgetError):
            streaming_fuse(read_manifest(path, memory_budget=100), tmp_path / "out", threshold=0.2)

    def test_budget_clamps_workers(self, tmp_path):
        classes, height, width = 5, 6, 8
        need = 2 * classes * height * width * 8 + height * width
        path, _ = write_chunks(tmp_path, images=4, models=2, seed=80)
        report = streaming_fuse(
            read_manifest(path, memory_budget=need), tmp_path / "out", threshold=0.2, workers=4
        )
        assert report.workers == 1
        assert report.peak_buffer_bytes <= need

    def test_worker_count_does_not_change_bytes(self, tmp_path):
        path, _ = write_chunks(tmp_path, images=5, models=3, seed=90)
        streaming_fuse(read_manifest(path), tmp_path / "seq", threshold=0.3, workers=1)
        streaming_fuse(read_manifest(path), tmp_path / "par", threshold=0.3, workers=4)
        for i in range(5):
            name = f"img{i:02d}.png"
            assert (tmp_path / "seq" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()

    def test_exactly_one_gate(self, tmp_path):
        path, _ = write_chunks(tmp_path, images=1, models=1, seed=95)
        with pytest.raises(ParameterError):
            streaming_fuse(read_manifest(path), tmp_path / "out", threshold=0.5, top_fraction=0.5)


class TestBufferMeter:
    def test_peak_tracking(self):
        meter = BufferMeter()
        meter.alloc(100)
        meter.alloc(50)
        meter.release(100)
        meter.alloc(10)
        assert meter.current == 60
        assert meter.peak == 150

    def test_thread_safety(self):
        meter = BufferMeter()

        def worker():
            for _ in range(1000):
                meter.alloc(3)
                meter.release(3)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert meter.current == 0
        assert meter.peak <= 8 * 3
