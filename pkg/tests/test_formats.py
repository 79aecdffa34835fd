"""CSV, embedding sidecar, checkpoint and config file formats."""

import dataclasses

import numpy as np
import pytest

from embtrack.core import BBox2D, BBox3D, TrackerConfig
from embtrack.formats import (
    DetectionRow,
    attach_embeddings,
    config_from_json,
    config_to_json,
    load_checkpoint,
    load_config,
    load_matcher,
    load_motion,
    read_detections,
    read_embeddings,
    rows_to_objects,
    save_checkpoint,
    save_config,
    save_matcher,
    save_motion,
    write_detections,
    write_embeddings,
)
from embtrack.matcher import MatcherParams
from embtrack.motion import MotionParams


class TestDetectionCsv:
    def test_mot_row_converts_to_center(self, tmp_path):
        p = tmp_path / "dets.csv"
        p.write_text("1,-1,10,20,30,40,0.9,1,1.0\n")
        frames = read_detections(p)
        assert list(frames) == [1]
        (row,) = frames[1]
        assert row.track_id == -1
        assert (row.box.cx, row.box.cy, row.box.w, row.box.h) == (25.0, 40.0, 30.0, 40.0)
        assert row.confidence == 0.9
        assert row.class_id == 1
        assert row.visibility == 1.0

    def test_round_trip_2d(self, tmp_path):
        rows = {
            1: [
                DetectionRow(1, 7, BBox2D(12.5, 8.25, 30.0, 40.0), 0.75, 2, 0.5),
                DetectionRow(1, -1, BBox2D(100.0, 200.0, 10.0, 10.0)),
            ],
            3: [DetectionRow(3, 7, BBox2D(13.0, 9.0, 30.0, 40.0), 0.5)],
        }
        p = tmp_path / "rt.csv"
        write_detections(p, rows)
        back = read_detections(p)
        assert sorted(back) == [1, 3]
        for f in rows:
            assert len(back[f]) == len(rows[f])
            for orig, got in zip(rows[f], back[f]):
                assert got.track_id == orig.track_id
                assert got.class_id == orig.class_id
                np.testing.assert_allclose(
                    got.box.as_array(), orig.box.as_array(), atol=1e-4
                )
                assert got.confidence == pytest.approx(orig.confidence, abs=1e-4)
                assert got.visibility == pytest.approx(orig.visibility, abs=1e-4)

    def test_round_trip_3d(self, tmp_path):
        rows = {
            2: [DetectionRow(2, 4, BBox3D(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5), 0.9, 2)]
        }
        p = tmp_path / "rt3.csv"
        write_detections(p, rows, mode="3d")
        text = p.read_text()
        assert text.startswith("2,4,1.000000,2.000000,3.000000")
        back = read_detections(p, mode="3d")
        (row,) = back[2]
        np.testing.assert_allclose(row.box.as_array(), [1, 2, 3, 4, 5, 6, 0.5], atol=1e-4)
        assert row.class_id == 2

    def test_frames_come_back_sorted(self, tmp_path):
        p = tmp_path / "unsorted.csv"
        p.write_text(
            "5,1,0,0,10,10,1.0,1,1.0\n"
            "1,1,0,0,10,10,1.0,1,1.0\n"
            "5,2,20,20,10,10,1.0,1,1.0\n"
        )
        frames = read_detections(p)
        assert list(frames) == [1, 5]
        assert [r.track_id for r in frames[5]] == [1, 2]

    def test_malformed_lines_name_line_number(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("1,1,0,0,10,10,1.0,1,1.0\n1,1,0,0\n")
        with pytest.raises(ValueError, match="line 2"):
            read_detections(p)
        p.write_text("1,1,zero,0,10,10,1.0,1,1.0\n")
        with pytest.raises(ValueError, match="line 1.*zero"):
            read_detections(p)
        p.write_text("one,1,0,0,10,10,1.0,1,1.0\n")
        with pytest.raises(ValueError, match="line 1"):
            read_detections(p)

    def test_empty_and_blank_lines(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        assert read_detections(p) == {}
        p.write_text("\n\n1,1,0,0,10,10,1.0,1,1.0\n\n")
        assert list(read_detections(p)) == [1]

    def test_mode_and_box_type_guards(self, tmp_path):
        with pytest.raises(ValueError):
            read_detections(tmp_path / "x.csv", mode="4d")
        rows = {1: [DetectionRow(1, 1, BBox3D(0, 0, 0, 1, 1, 1, 0.0))]}
        with pytest.raises(TypeError):
            write_detections(tmp_path / "x.csv", rows, mode="2d")
        rows2 = {1: [DetectionRow(1, 1, BBox2D(0, 0, 1, 1))]}
        with pytest.raises(TypeError):
            write_detections(tmp_path / "x.csv", rows2, mode="3d")


class TestEmbeddingSidecar:
    def test_round_trip_with_empty_frame(self, tmp_path):
        rng = np.random.default_rng(0)
        per_frame = {
            0: rng.normal(size=(2, 4)),
            2: np.zeros((0, 4)),
            5: rng.normal(size=(3, 4)),
        }
        p = tmp_path / "emb.bin"
        write_embeddings(p, per_frame, embed_dim=4)
        back = read_embeddings(p)
        assert sorted(back) == [0, 2, 5]
        for f, arr in per_frame.items():
            assert back[f].dtype == np.float64
            expected = arr.astype(np.float32).astype(np.float64)
            np.testing.assert_array_equal(back[f], expected)

    def test_write_rejects_bad_shapes(self, tmp_path):
        p = tmp_path / "emb.bin"
        with pytest.raises(ValueError):
            write_embeddings(p, {0: np.zeros((2, 3))}, embed_dim=4)
        with pytest.raises(ValueError):
            write_embeddings(p, {0: np.zeros(4)}, embed_dim=4)
        with pytest.raises(ValueError):
            write_embeddings(p, {-1: np.zeros((1, 4))}, embed_dim=4)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "emb.bin"
        p.write_bytes(b"NOTEMBED" + b"\x00" * 12)
        with pytest.raises(ValueError, match="magic"):
            read_embeddings(p)

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "emb.bin"
        write_embeddings(p, {0: np.ones((2, 4))}, embed_dim=4)
        data = p.read_bytes()
        p.write_bytes(data[:-5])
        with pytest.raises(ValueError, match="truncated"):
            read_embeddings(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "emb.bin"
        write_embeddings(p, {0: np.ones((2, 4))}, embed_dim=4)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            read_embeddings(p)


class TestAttachEmbeddings:
    def test_join_and_clamp(self):
        frames = {
            0: [
                DetectionRow(0, -1, BBox2D(5, 5, 10, 10), 1.7, 3),
                DetectionRow(0, -1, BBox2D(50, 50, 10, 10), -0.3, 1),
            ]
        }
        emb = {0: np.arange(8, dtype=np.float64).reshape(2, 4)}
        out = attach_embeddings(frames, emb)
        assert list(out) == [0]
        a, b = out[0]
        assert a.confidence == 1.0 and b.confidence == 0.0
        assert a.class_id == 3
        np.testing.assert_array_equal(a.embedding, [0, 1, 2, 3])
        np.testing.assert_array_equal(b.embedding, [4, 5, 6, 7])

    def test_count_mismatch_names_frame(self):
        frames = {3: [DetectionRow(3, -1, BBox2D(0, 0, 1, 1))]}
        with pytest.raises(ValueError, match="frame 3"):
            attach_embeddings(frames, {3: np.zeros((2, 4))})
        with pytest.raises(ValueError, match="frame 3"):
            attach_embeddings(frames, {})

    def test_empty_frame_needs_no_embeddings(self):
        out = attach_embeddings({4: []}, {})
        assert out == {4: []}
        # zero-row embedding entries for unknown frames are harmless
        out = attach_embeddings({4: []}, {9: np.zeros((0, 4))})
        assert out == {4: []}
        with pytest.raises(ValueError, match="frame 9"):
            attach_embeddings({4: []}, {9: np.ones((1, 4))})

    def test_rows_to_objects(self):
        frames = {
            0: [DetectionRow(0, 2, BBox2D(0, 0, 1, 1)), DetectionRow(0, 5, BBox2D(9, 9, 1, 1))]
        }
        out = rows_to_objects(frames)
        assert [(i, b.cx) for i, b in out[0]] == [(2, 0.0), (5, 9.0)]
        frames[0].append(DetectionRow(0, -1, BBox2D(1, 1, 1, 1)))
        with pytest.raises(ValueError):
            rows_to_objects(frames)


def f32(arr):
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


class TestCheckpoints:
    def test_matcher_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        params = MatcherParams.create(embed_dim=4, hidden=(8, 4, 3), rng=rng)
        p = tmp_path / "m.ckpt"
        save_matcher(p, params)
        back = load_matcher(p)
        assert len(back.layers) == len(params.layers)
        for (w0, b0), (w1, b1) in zip(params.layers, back.layers):
            np.testing.assert_array_equal(w1, f32(w0))
            np.testing.assert_array_equal(b1, f32(b0))
        back.validate()

    @pytest.mark.parametrize("mode", ["2d", "3d"])
    def test_motion_round_trip(self, tmp_path, mode):
        rng = np.random.default_rng(8)
        params = MotionParams.create(mode=mode, hidden_dim=6, horizon=3, rng=rng)
        params = dataclasses.replace(params, input_scale=250.0)
        p = tmp_path / "mo.ckpt"
        save_motion(p, params)
        back = load_motion(p)
        assert back.mode == mode
        assert back.hidden_dim == 6
        assert back.horizon == 3
        assert back.input_scale == 250.0
        for a, b in zip(params.flat_arrays(), back.flat_arrays()):
            np.testing.assert_array_equal(b, f32(a))

    def test_combined_checkpoint(self, tmp_path):
        rng = np.random.default_rng(9)
        matcher = MatcherParams.create(embed_dim=3, hidden=(6, 4, 2), rng=rng)
        motion = MotionParams.create(mode="2d", hidden_dim=4, horizon=2, rng=rng)
        p = tmp_path / "both.ckpt"
        save_checkpoint(p, matcher=matcher, motion=motion)
        out = load_checkpoint(p)
        assert out["matcher"] is not None and out["motion"] is not None

    def test_empty_checkpoint_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "x.ckpt")

    def test_section_lookup_errors(self, tmp_path):
        rng = np.random.default_rng(10)
        p = tmp_path / "only_matcher.ckpt"
        save_matcher(p, MatcherParams.create(embed_dim=3, hidden=(6, 4, 2), rng=rng))
        with pytest.raises(ValueError, match="no motion"):
            load_motion(p)
        q = tmp_path / "only_motion.ckpt"
        save_motion(q, MotionParams.create(mode="2d", hidden_dim=4, horizon=2, rng=rng))
        with pytest.raises(ValueError, match="no matcher"):
            load_matcher(q)

    def test_corrupt_checkpoint(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 8)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)
        rng = np.random.default_rng(11)
        save_matcher(p, MatcherParams.create(embed_dim=3, hidden=(6, 4, 2), rng=rng))
        p.write_bytes(p.read_bytes() + b"\x01")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(p)


class TestConfigJson:
    def test_round_trip_preserves_every_field(self, tmp_path):
        cfg = TrackerConfig(
            embed_dim=16,
            max_objects=40,
            max_pair_gap=4,
            memory_size=6,
            iou_stage_max_age=2,
            similarity_threshold=0.25,
            iou_threshold=0.3,
            max_age=7,
            nonmatch_logit=2.5,
            past_window=8,
            forecast_horizon=3,
            mode="3d",
            motion_model="kalman",
            iou_second_stage=True,
            min_confidence=0.1,
        )
        assert config_from_json(config_to_json(cfg)) == cfg
        p = tmp_path / "cfg.json"
        save_config(p, cfg)
        assert load_config(p) == cfg

    def test_defaults_round_trip(self):
        cfg = TrackerConfig()
        assert config_from_json(config_to_json(cfg)) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="simlarity_threshold"):
            config_from_json('{"simlarity_threshold": 0.5}')
        with pytest.raises(ValueError):
            config_from_json("[1, 2]")

    def test_invalid_values_still_validated(self):
        with pytest.raises(ValueError):
            config_from_json('{"similarity_threshold": 1.5}')
