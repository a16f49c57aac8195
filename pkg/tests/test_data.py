import json
import struct

import numpy as np
import pytest

from cookie_kit import data as D
from cookie_kit.errors import ContractError, DataError


class TestSceneSpec:
    def test_object_count_bounds(self):
        obj = D.SceneObject("circle", "red", 0, "small")
        with pytest.raises(ContractError):
            D.SceneSpec((), "blue")
        with pytest.raises(ContractError):
            D.SceneSpec((obj,) * 4, "blue")

    def test_duplicate_cell_rejected(self):
        a = D.SceneObject("circle", "red", 3, "small")
        b = D.SceneObject("square", "blue", 3, "large")
        with pytest.raises(ContractError):
            D.SceneSpec((a, b), "gray")

    def test_json_round_trip(self):
        spec, _, _, _ = D.generate_scene(7)
        assert D.SceneSpec.from_json(spec.to_json()) == spec

    def test_sample_spec_object_color_differs_from_background(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            spec = D.sample_spec(rng, D.GeneratorConfig())
            for obj in spec.objects:
                assert obj.color != spec.background


class TestRendering:
    def test_deterministic(self):
        spec, _, _, _ = D.generate_scene(3)
        a = D.render_scene(spec, render_seed=11)
        b = D.render_scene(spec, render_seed=11)
        np.testing.assert_array_equal(a, b)

    def test_shape_dtype_range(self):
        for seed in range(10):
            _, img, _, _ = D.generate_scene(seed)
            assert img.shape == (32, 32, 3)
            assert img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_render_seed_is_nuisance_only(self):
        # same spec, different render seed: pixels differ, captions identical
        spec, _, caps, _ = D.generate_scene(5)
        a = D.render_scene(spec, render_seed=1)
        b = D.render_scene(spec, render_seed=2)
        assert not np.array_equal(a, b)
        assert D.make_captions(spec) == caps

    def test_object_pixels_present(self):
        # an object's exact palette color must appear somewhere in the image
        for seed in range(20):
            spec, img, _, _ = D.generate_scene(seed)
            for obj in spec.objects:
                target = np.array(D.PALETTE[obj.color], dtype=np.float32)
                hits = np.all(np.isclose(img, target, atol=1e-6), axis=2)
                assert hits.any(), (seed, obj)


class TestCaptions:
    def test_five_distinct_captions(self):
        for seed in range(50):
            spec, _, caps, _ = D.generate_scene(seed)
            assert len(caps) == 5
            assert len({tuple(c) for c in caps}) == 5

    def test_length_and_vocab_budget(self):
        assert len(D.VOCAB) <= 128
        for seed in range(50):
            _, _, caps, _ = D.generate_scene(seed)
            for c in caps:
                assert 1 <= len(c) <= 12
                assert all(2 <= t < len(D.VOCAB) for t in c)

    def test_captions_mention_only_present_attributes(self):
        for seed in range(100):
            spec, _, caps, _ = D.generate_scene(seed)
            shapes = {o.shape for o in spec.objects}
            colors = {o.color for o in spec.objects} | {spec.background}
            sizes = {o.size for o in spec.objects}
            for c in caps:
                mentioned = D.caption_attributes(c)
                assert mentioned["shapes"] <= shapes
                assert mentioned["colors"] <= colors
                assert mentioned["sizes"] <= sizes

    def test_count_word_matches_object_count(self):
        for seed in range(50):
            spec, _, caps, _ = D.generate_scene(seed)
            words = set(D.detokenize(caps[2]))
            assert D.COUNT_WORDS[len(spec.objects)] in words

    def test_tokenize_round_trip_and_oov(self):
        assert D.detokenize(D.tokenize(["red", "circle"])) == ["red", "circle"]
        with pytest.raises(DataError):
            D.tokenize(["zebra"])


class TestPersistence:
    def test_image_file_round_trip(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(32, 32, 3)).astype(np.float32)
        path = tmp_path / "x.bin"
        D.write_image_file(path, img)
        np.testing.assert_array_equal(D.read_image_file(path), img)

    def test_image_file_header_layout(self, tmp_path):
        img = np.zeros((4, 5, 3), dtype=np.float32)
        path = tmp_path / "y.bin"
        D.write_image_file(path, img)
        raw = path.read_bytes()
        assert struct.unpack("<III", raw[:12]) == (4, 5, 3)
        assert len(raw) == 12 + 4 * 5 * 3 * 4

    def test_truncated_image_rejected(self, tmp_path):
        path = tmp_path / "z.bin"
        path.write_bytes(struct.pack("<III", 4, 4, 3) + b"\x00" * 8)
        with pytest.raises(DataError):
            D.read_image_file(path)

    def test_build_and_load_round_trip(self, tmp_path):
        built = D.build_corpus(12, seed=0, path=tmp_path / "c")
        loaded = D.load_corpus(tmp_path / "c")
        assert loaded.version == D.MANIFEST_VERSION
        assert loaded.vocab == D.VOCAB_WORDS
        assert loaded.records == built.records
        np.testing.assert_array_equal(loaded.load_image(3), built.load_image(3))

    def test_build_is_seed_deterministic(self, tmp_path):
        a = D.build_corpus(8, seed=5, path=tmp_path / "a")
        b = D.build_corpus(8, seed=5, path=tmp_path / "b")
        assert a.records == b.records
        np.testing.assert_array_equal(a.load_image(0), b.load_image(0))

    def test_manifest_record_fields(self, tmp_path):
        m = D.build_corpus(3, seed=1, path=tmp_path / "c")
        lines = (tmp_path / "c" / D.MANIFEST_NAME).read_text().splitlines()
        header = json.loads(lines[0])
        assert header["version"] == D.MANIFEST_VERSION and "vocab" in header
        for line in lines[1:]:
            rec = json.loads(line)
            assert set(rec) == {"version", "id", "spec", "captions", "render_seed"}
            assert len(rec["captions"]) == 5

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            D.load_corpus(tmp_path / "nope")

    def test_corrupt_manifest_line(self, tmp_path):
        D.build_corpus(3, seed=1, path=tmp_path / "c")
        path = tmp_path / "c" / D.MANIFEST_NAME
        path.write_text(path.read_text() + "{broken\n")
        with pytest.raises(DataError):
            D.load_corpus(tmp_path / "c")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return D.build_corpus(60, seed=9, path=tmp_path_factory.mktemp("corpus"))


class TestSplits:
    def test_split_fractions_roughly_80_10_10(self):
        counts = {"train": 0, "val": 0, "test": 0}
        for i in range(5000):
            counts[D.split_of(i)] += 1
        assert abs(counts["train"] / 5000 - 0.8) < 0.03
        assert abs(counts["val"] / 5000 - 0.1) < 0.03
        assert abs(counts["test"] / 5000 - 0.1) < 0.03

    def test_splits_partition_ids(self, corpus):
        all_ids = set(D.split_ids(corpus, "all"))
        parts = [set(D.split_ids(corpus, s)) for s in ("train", "val", "test")]
        assert set.union(*parts) == all_ids
        assert sum(len(p) for p in parts) == len(all_ids)

    def test_unknown_split_rejected(self, corpus):
        with pytest.raises(ContractError):
            D.split_ids(corpus, "dev")


class TestBatchIter:
    def test_each_sample_once_per_epoch_with_drop_last(self, corpus):
        ids = D.split_ids(corpus, "train")
        seen = []
        for _, _, _, _, batch_ids in D.batch_iter(corpus, 8, epoch_seed=0):
            assert len(batch_ids) == 8
            seen.extend(batch_ids)
        assert len(seen) == len(set(seen))
        assert len(seen) == (len(ids) // 8) * 8
        assert set(seen) <= set(ids)

    def test_epoch_seed_changes_order(self, corpus):
        first = [b[4] for b in D.batch_iter(corpus, 8, epoch_seed=1)]
        second = [b[4] for b in D.batch_iter(corpus, 8, epoch_seed=2)]
        again = [b[4] for b in D.batch_iter(corpus, 8, epoch_seed=1)]
        assert first == again
        assert first != second

    def test_batch_specs_distinct(self, corpus):
        for _, _, _, _, batch_ids in D.batch_iter(corpus, 8, epoch_seed=3):
            sigs = {D.SceneSpec.from_json(corpus.records[i]["spec"]).signature()
                    for i in batch_ids}
            assert len(sigs) == len(batch_ids)

    def test_yields_aligned_tensors(self, corpus):
        images, tok_ids, mask, caps, batch_ids = next(D.batch_iter(corpus, 8, epoch_seed=4))
        assert images.shape == (8, 32, 32, 3)
        assert tok_ids.shape == mask.shape == (8, 12)
        for row, cap in zip(tok_ids, caps):
            assert list(row[:len(cap)]) == cap
        for i, sid in enumerate(batch_ids):
            assert cap_in_record(caps[i], corpus.records[sid])

    def test_caption_choice_varies_across_epochs(self, corpus):
        def caps_of(seed):
            out = {}
            for _, _, _, caps, ids in D.batch_iter(corpus, 8, epoch_seed=seed):
                out.update(dict(zip(ids, map(tuple, caps))))
            return out

        a, b = caps_of(0), caps_of(5)
        common = set(a) & set(b)
        assert any(a[i] != b[i] for i in common)

    def test_batch_size_bounds(self, corpus):
        with pytest.raises(ContractError):
            next(D.batch_iter(corpus, 1, epoch_seed=0))
        with pytest.raises(DataError):
            next(D.batch_iter(corpus, 10_000, epoch_seed=0))


def cap_in_record(cap, record):
    return cap in record["captions"]


class TestParaphrasePairs:
    def test_same_scene_scores_five(self, corpus):
        pairs = D.paraphrase_pairs(corpus, 200, seed=0)
        caps_by_scene = [set(map(tuple, r["captions"])) for r in corpus.records]
        for c1, c2, score in pairs:
            if score == 5.0:
                assert any(tuple(c1) in s and tuple(c2) in s for s in caps_by_scene)

    def test_scores_bounded_and_graded(self, corpus):
        pairs = D.paraphrase_pairs(corpus, 300, seed=1)
        scores = [s for _, _, s in pairs]
        assert all(0.0 <= s <= 5.0 for s in scores)
        assert len(set(scores)) > 3  # genuinely graded, not binary

    def test_deterministic(self, corpus):
        assert D.paraphrase_pairs(corpus, 50, 7) == D.paraphrase_pairs(corpus, 50, 7)

    def test_too_small_corpus(self, tmp_path):
        m = D.build_corpus(1, seed=0, path=tmp_path / "one")
        with pytest.raises(DataError):
            D.paraphrase_pairs(m, 5, 0)
