import json

import numpy as np
import pytest

from fewloc.dataio import (
    FEATURE_DIM,
    DatasetManifest,
    FeatureFormatError,
    FeatureStore,
    GtSegment,
    ManifestError,
    PredictionRow,
    SnippetFeatureSet,
    StreamKind,
    SyntheticSpec,
    SyntheticSpecError,
    VideoRecord,
    gen_synthetic,
    load_features,
    load_manifest,
    manifest_to_json,
    read_predictions,
    read_tensor_container,
    save_manifest,
    write_features,
    write_predictions,
    write_tensor_container,
)
from fewloc.numkit import RngStream


def make_manifest(train=(0, 1), test=(2,), videos=None):
    classes = {c: f"class_{c}" for c in set(train) | set(test)}
    if videos is None:
        videos = [
            VideoRecord("t0", True, (0,), 16.0, (GtSegment(0, 0.0, 3.0),)),
            VideoRecord("u0", False, (0, 1), 16.0, (GtSegment(0, 1.0, 2.0), GtSegment(1, 4.0, 6.0))),
            VideoRecord("t2", True, (2,), 16.0, ()),
            VideoRecord("u2", False, (2,), 16.0, (GtSegment(2, 0.0, 2.0),)),
        ]
    return DatasetManifest(classes=classes, train_classes=tuple(train), test_classes=tuple(test), videos=videos)


class TestFeatureFiles:
    def test_round_trip_bitwise_at_32bit(self, tmp_path):
        rng = RngStream(0, "ff")
        feats = SnippetFeatureSet(
            "vid", rng.standard_normal((5, FEATURE_DIM)), rng.standard_normal((5, FEATURE_DIM))
        )
        path = tmp_path / "vid.fsl"
        write_features(path, feats)
        back = load_features(path, "vid")
        assert np.array_equal(back.rgb, feats.rgb.astype(np.float32).astype(np.float64))
        assert np.array_equal(back.flow, feats.flow.astype(np.float32).astype(np.float64))
        # writing what we read reproduces the file byte for byte
        path2 = tmp_path / "vid2.fsl"
        write_features(path2, back)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.fsl"
        p.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(FeatureFormatError, match="magic"):
            load_features(p, "bad")

    def test_wrong_dim_rejected_on_write_and_read(self, tmp_path):
        with pytest.raises(FeatureFormatError, match="512"):
            SnippetFeatureSet("v", np.zeros((3, 512)), np.zeros((3, 512)))
        # hand-craft a file with dim 512
        import struct

        p = tmp_path / "dim.fsl"
        payload = np.zeros((2, 512), dtype=np.float32).tobytes()
        with open(p, "wb") as f:
            f.write(b"FSL1")
            f.write(struct.pack("<II", 1, 2))
            f.write(struct.pack("<BII", 0, 2, 512))
            f.write(payload)
            f.write(struct.pack("<BII", 1, 2, 512))
            f.write(payload)
        with pytest.raises(FeatureFormatError, match="512"):
            load_features(p, "dim")

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        rng = RngStream(1, "ff")
        feats = SnippetFeatureSet(
            "vid", rng.standard_normal((4, FEATURE_DIM)), rng.standard_normal((4, FEATURE_DIM))
        )
        p = tmp_path / "vid.fsl"
        write_features(p, feats)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 100])
        with pytest.raises(FeatureFormatError, match=r"expected \d+ bytes, file has \d+"):
            load_features(p, "vid")

    def test_nan_payload_rejected(self, tmp_path):
        rgb = np.zeros((2, FEATURE_DIM), dtype=np.float64)
        feats = SnippetFeatureSet("v", rgb, rgb)
        p = tmp_path / "v.fsl"
        write_features(p, feats)
        raw = bytearray(p.read_bytes())
        nan = np.array([np.nan], dtype="<f4").tobytes()
        raw[21 : 21 + 4] = nan  # first payload float
        p.write_bytes(bytes(raw))
        with pytest.raises(FeatureFormatError, match="NaN"):
            load_features(p, "v")

    def test_stream_count_mismatch(self, tmp_path):
        import struct

        p = tmp_path / "one.fsl"
        with open(p, "wb") as f:
            f.write(b"FSL1")
            f.write(struct.pack("<II", 1, 1))
            f.write(struct.pack("<BII", 0, 1, FEATURE_DIM))
            f.write(np.zeros((1, FEATURE_DIM), dtype=np.float32).tobytes())
        with pytest.raises(FeatureFormatError, match="2 streams"):
            load_features(p, "one")

    def test_store_missing_file(self, tmp_path):
        store = FeatureStore(tmp_path)
        with pytest.raises(FileNotFoundError, match="ghost"):
            store.load("ghost")


class TestTensorContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = RngStream(2, "tc")
        tensors = {
            "a/w": rng.standard_normal((3, 4)),
            "a/b": rng.standard_normal(7),
            "meta": np.array([1.0]),
        }
        p = tmp_path / "t.fslp"
        write_tensor_container(p, tensors)
        back = read_tensor_container(p)
        assert list(back) == list(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])
            assert back[k].shape == tensors[k].shape

    def test_truncation_detected(self, tmp_path):
        p = tmp_path / "t.fslp"
        write_tensor_container(p, {"x": np.ones((4, 4))})
        data = p.read_bytes()
        p.write_bytes(data[:-9])
        with pytest.raises(FeatureFormatError, match="truncated"):
            read_tensor_container(p)


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = make_manifest()
        p = tmp_path / "m.json"
        save_manifest(p, m)
        back = load_manifest(p)
        assert manifest_to_json(back) == manifest_to_json(m)

    def test_disjoint_split_mirrors_real_protocol(self, tmp_path):
        # 6 train / 14 test classes, like the THUMOS-style split
        classes = {c: f"class_{c}" for c in range(20)}
        videos = []
        for c in range(20):
            videos.append(VideoRecord(f"t{c}", True, (c,), 25.0, ()))
            videos.append(VideoRecord(f"u{c}", False, (c,), 25.0, ()))
        m = DatasetManifest(classes, tuple(range(6)), tuple(range(6, 20)), videos)
        p = tmp_path / "m.json"
        save_manifest(p, m)
        back = load_manifest(p)
        assert len(back.train_classes) == 6 and len(back.test_classes) == 14

    def test_overlapping_split_rejected(self, tmp_path):
        m = make_manifest(train=(0, 1), test=(1, 2))
        p = tmp_path / "m.json"
        save_manifest(p, m)
        with pytest.raises(ManifestError, match="overlap"):
            load_manifest(p)

    def test_empty_video_list_rejected(self, tmp_path):
        m = make_manifest(videos=[])
        p = tmp_path / "m.json"
        save_manifest(p, m)
        with pytest.raises(ManifestError, match="no videos"):
            load_manifest(p)

    def test_unknown_label_rejected(self, tmp_path):
        videos = [VideoRecord("v", False, (9,), None, ())]
        m = make_manifest(videos=videos)
        p = tmp_path / "m.json"
        save_manifest(p, m)
        with pytest.raises(ManifestError, match="unknown class id 9"):
            load_manifest(p)

    def test_trimmed_must_have_one_label(self):
        videos = [VideoRecord("v", True, (0, 1), None, ())]
        with pytest.raises(ManifestError, match="exactly one label"):
            make_manifest(videos=videos).validate()

    def test_degenerate_gt_rejected(self):
        videos = [VideoRecord("v", False, (0,), 16.0, (GtSegment(0, 3.0, 3.0),))]
        with pytest.raises(ManifestError, match="degenerate"):
            make_manifest(videos=videos).validate()

    def test_snippet_conversion(self):
        v = VideoRecord("v", False, (0,), 32.0, (GtSegment(0, 1.0, 3.0),))
        assert v.gt_in_snippets() == [(0, 2.0, 6.0)]
        v_nofps = VideoRecord("v", False, (0,), None, (GtSegment(0, 1.0, 3.0),))
        with pytest.raises(ManifestError, match="fps"):
            v_nofps.gt_in_snippets()


class TestPredictions:
    def test_empty_list_writes_header_only(self, tmp_path):
        p = tmp_path / "pred.csv"
        write_predictions(p, [], class_ids={0})
        assert p.read_text() == "video_id,class_id,start_snippet,end_snippet,score\n"

    def test_sorted_and_stable_on_ties(self, tmp_path):
        rows = [
            PredictionRow("b", 0, 5, 6, 0.5),
            PredictionRow("a", 1, 0, 1, 0.5),
            PredictionRow("a", 0, 3, 4, 0.5),   # tie with next in all keys except start
            PredictionRow("a", 0, 3, 9, 0.5),   # exact tie on sort keys with previous? no: same start
            PredictionRow("a", 0, 1, 2, 0.9),
        ]
        p = tmp_path / "pred.csv"
        write_predictions(p, rows, class_ids={0, 1})
        lines = p.read_text().splitlines()[1:]
        assert lines[0].startswith("a,0,1,2")      # highest score first within (a, 0)
        assert lines[1] == "a,0,3,4,0.500000"      # tie keeps input order (3,4) before (3,9)
        assert lines[2] == "a,0,3,9,0.500000"
        assert lines[3].startswith("a,1,")
        assert lines[4].startswith("b,0,")

    def test_round_trip_snippet_mode(self, tmp_path):
        rows = [PredictionRow("v", 0, 2, 5, 0.25), PredictionRow("v", 1, 0, 0, 1.0)]
        p = tmp_path / "pred.csv"
        write_predictions(p, rows, class_ids={0, 1})
        back = read_predictions(p)
        assert sorted(back, key=lambda r: r.class_id) == sorted(rows, key=lambda r: r.class_id)

    def test_seconds_mode_uses_fps(self, tmp_path):
        rows = [PredictionRow("v", 0, 2, 3, 0.5)]
        p = tmp_path / "pred.csv"
        write_predictions(p, rows, class_ids={0}, fps_by_video={"v": 32.0})
        text = p.read_text()
        assert "start_seconds" in text
        assert "1.000000,2.000000" in text  # snippets [2,3] -> seconds [1.0, 2.0)
        back = read_predictions(p, fps_by_video={"v": 32.0})
        assert back == rows

    def test_unknown_class_rejected(self, tmp_path):
        with pytest.raises(ManifestError, match="unknown class id 7"):
            write_predictions(tmp_path / "x.csv", [PredictionRow("v", 7, 0, 1, 0.1)], class_ids={0})


class TestSynthetic:
    def test_separated_data_is_nearest_prototype_classifiable(self, tmp_path):
        spec = SyntheticSpec(class_count=5, videos_per_class=2, separation=10.0, noise=0.1, seed=3)
        ds = gen_synthetic(spec, tmp_path / "d")
        store = FeatureStore(ds.out_dir)
        checked = 0
        for v in ds.manifest.videos:
            feats = store.load(v.video_id)
            for cid, s, e in v.gt_in_snippets():
                for kind in (StreamKind.RGB, StreamKind.FLOW):
                    rows = feats.stream(kind)[int(s) : int(e)]
                    sims = rows @ ds.prototypes[kind].T
                    assert (sims.argmax(axis=1) == cid).all()
                    checked += rows.shape[0]
        assert checked > 50

    def test_same_seed_identical_bytes(self, tmp_path):
        spec = SyntheticSpec(class_count=3, videos_per_class=2, seed=9)
        a = gen_synthetic(spec, tmp_path / "a")
        b = gen_synthetic(spec, tmp_path / "b")
        for pa, pb in zip(sorted(a.out_dir.iterdir()), sorted(b.out_dir.iterdir())):
            assert pa.name == pb.name
            assert pa.read_bytes() == pb.read_bytes()

    def test_single_instance_layout(self, tmp_path):
        spec = SyntheticSpec(class_count=3, videos_per_class=1, instances_min=1, instances_max=1, seed=4)
        ds = gen_synthetic(spec, tmp_path / "d")
        untrimmed = [v for v in ds.manifest.videos if not v.trimmed]
        assert untrimmed
        for v in untrimmed:
            assert len(v.gt_segments) == 1

    def test_impossible_packing_rejected(self):
        spec = SyntheticSpec(snippets_min=2, snippets_max=4, action_len_min=6, action_len_max=8)
        with pytest.raises(SyntheticSpecError, match="impossible packing"):
            spec.validate()

    def test_split_sizes(self, tmp_path):
        spec = SyntheticSpec(class_count=15, videos_per_class=1, seed=5)
        ds = gen_synthetic(spec, tmp_path / "d")
        assert len(ds.manifest.train_classes) == 10
        assert len(ds.manifest.test_classes) == 5

    def test_instances_stay_within_split(self, tiny_dataset):
        m = tiny_dataset.manifest
        train = set(m.train_classes)
        for v in m.videos:
            labels = set(v.labels)
            assert labels <= train or labels.isdisjoint(train)

    def test_gt_within_video_and_trimmed_spans_whole(self, tiny_dataset, tiny_store):
        for v in tiny_dataset.manifest.videos:
            n = tiny_store.load(v.video_id).num_snippets
            for cid, s, e in v.gt_in_snippets():
                assert 0.0 <= s < e <= n
            if v.trimmed:
                assert len(v.gt_segments) == 1
                (cid, s, e), = v.gt_in_snippets()
                assert s == 0.0 and e == float(n)

    def test_spec_json_round_trip(self):
        spec = SyntheticSpec(class_count=7, separation=2.5, seed=42)
        assert SyntheticSpec.from_json(spec.to_json()) == spec
        with pytest.raises(SyntheticSpecError, match="unknown"):
            SyntheticSpec.from_json({"bogus": 1})


class TestStreamValidation:
    def test_duplicate_stream_tag_means_missing_stream(self, tmp_path):
        import struct

        p = tmp_path / "dup.fsl"
        payload = np.zeros((2, FEATURE_DIM), dtype=np.float32).tobytes()
        with open(p, "wb") as f:
            f.write(b"FSL1")
            f.write(struct.pack("<II", 1, 2))
            for _ in range(2):  # RGB written twice, FLOW absent
                f.write(struct.pack("<BII", 0, 2, FEATURE_DIM))
                f.write(payload)
        with pytest.raises(FeatureFormatError, match="FLOW missing"):
            load_features(p, "dup")
