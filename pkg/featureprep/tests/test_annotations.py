import json
import logging

import pytest

from featureprep.annotations import convert_annotations, load_split_table

from stt import data as stt_data


class TestConvert:
    def test_one_line_per_caption(self, image_fixture, tmp_path):
        written = convert_annotations(image_fixture["annotations"], tmp_path)
        lines = written["all"].read_text().splitlines()
        assert len(lines) == 20  # 10 images x 2 captions

    def test_output_loads_into_engine_with_zero_warnings(self, image_fixture,
                                                         tmp_path, caplog):
        written = convert_annotations(image_fixture["annotations"], tmp_path)
        with caplog.at_level(logging.WARNING):
            captions = stt_data.load_captions(written["all"])
            vocab = stt_data.build_vocab(captions, min_freq=1)
            samples = stt_data.make_samples(captions, vocab)
        assert not caplog.records
        assert len(captions) == 10
        assert len(samples) == 10 * 2  # k=2 captions -> k(k-1)=2 pairs each

    def test_split_lists(self, image_fixture, tmp_path):
        splits = {"train": list(range(1, 8)), "test": [8, 9, 10]}
        written = convert_annotations(image_fixture["annotations"], tmp_path,
                                      splits)
        assert set(written) == {"train", "test"}
        train_ids = (tmp_path / "train_images.txt").read_text().split()
        assert train_ids == [str(i) for i in range(1, 8)]
        test_caps = stt_data.load_captions(written["test"])
        assert set(test_caps) == {8, 9, 10}

    def test_malformed_entries_skipped(self, tmp_path, caplog):
        doc = {
            "images": [{"id": 1, "file_name": "a.png"}],
            "annotations": [
                {"image_id": 1, "caption": "a good caption"},
                {"image_id": 1, "caption": "   "},
                {"caption": "no image id"},
                {"image_id": "seven??", "caption": "bad id"},
            ],
        }
        path = tmp_path / "ann.json"
        path.write_text(json.dumps(doc))
        with caplog.at_level(logging.WARNING):
            written = convert_annotations(path, tmp_path / "out")
        assert len(written["all"].read_text().splitlines()) == 1
        assert len(caplog.records) >= 3

    def test_no_usable_captions_fails(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps({"images": [], "annotations": [
            {"image_id": 1, "caption": ""}]}))
        with pytest.raises(ValueError):
            convert_annotations(path, tmp_path / "out")

    def test_split_table_validation(self, tmp_path):
        good = tmp_path / "s.json"
        good.write_text('{"train": [1, 2]}')
        assert load_split_table(good) == {"train": [1, 2]}
        bad = tmp_path / "b.json"
        bad.write_text('{"train": 5}')
        with pytest.raises(ValueError):
            load_split_table(bad)
