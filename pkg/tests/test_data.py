import json

import pytest
import torch
from PIL import Image

from vitviz.data import (BoxAnnotation, CorpusEntry, CorpusEvalSet, CorpusIndex, ResizeSpec, annotate_corpus,
                         load_image, parse_imagenet_xml)
from vitviz.errors import DataError

XML = """<annotation><filename>{stem}</filename><size><width>{w}</width><height>{h}</height></size>
<object><name>n01</name><bndbox><xmin>10</xmin><ymin>20</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object>
<object><name>n02</name><bndbox><xmin>0</xmin><ymin>0</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object>
</annotation>"""


def test_resize_geometry():
    assert ResizeSpec(224).geometry(500, 375) == (341, 256, 58, 16)
    assert ResizeSpec(224, "squash").geometry(500, 375) == (224, 224, 0, 0)


def test_map_box_squash_and_crop():
    assert ResizeSpec(100, "squash").map_box((50, 25, 100, 50), 200, 100) == (25.0, 25.0, 50.0, 50.0)
    full = ResizeSpec(224).map_box((0, 0, 500, 375), 500, 375)
    assert full == (0, 0, 224, 224)


def test_load_image_and_errors(tmp_path):
    Image.new("RGB", (40, 30), (255, 0, 0)).save(tmp_path / "a.png")
    x, size = load_image(tmp_path / "a.png", ResizeSpec(16))
    assert x.shape == (3, 16, 16) and size == (40, 30)
    assert torch.allclose(x[0], torch.ones(16, 16)) and x[1:].abs().max() == 0
    (tmp_path / "b.png").write_text("junk")
    with pytest.raises(DataError):
        load_image(tmp_path / "b.png", ResizeSpec(16))


def test_manifest_roundtrip(tmp_path):
    c = CorpusIndex((CorpusEntry("a", "a.png", 1, ((1, 2, 3, 4),)), CorpusEntry("b", "b.png", 2)), "custom")
    c.write(tmp_path / "m.jsonl")
    back = CorpusIndex.load(tmp_path / "m.jsonl")
    assert back.entries == c.entries and back.digest == c.digest
    (tmp_path / "bad.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(DataError):
        CorpusIndex.load(tmp_path / "bad.jsonl")


def test_stratified_subset():
    c = CorpusIndex(tuple(CorpusEntry(f"i{i}", f"{i}.png", i % 4) for i in range(40)), "val")
    s = c.stratified_subset(8, seed=1)
    assert len(s) == 8 and sorted(e.label for e in s).count(0) == 2
    assert s.digest == c.stratified_subset(8, seed=1).digest
    assert s.digest != c.stratified_subset(8, seed=2).digest


def test_retained_boxes_only_true_class():
    a = BoxAnnotation("x", ((0, 0, 1, 1), (2, 2, 3, 3)), (1, 2)).retained(2)
    assert a.boxes == ((2, 2, 3, 3),)


def test_parse_xml_and_annotate(tmp_path):
    (tmp_path / "boxes").mkdir()
    (tmp_path / "boxes" / "img.xml").write_text(XML.format(stem="img", w=64, h=48))
    image_id, size, ann = parse_imagenet_xml(tmp_path / "boxes" / "img.xml")
    assert (image_id, size, ann.labels) == ("img", (64, 48), ("n01", "n02"))
    corpus = CorpusIndex((CorpusEntry("img", "img.JPEG", 0), CorpusEntry("other", "other.JPEG", 0)), "val")
    out = annotate_corpus(corpus, tmp_path / "boxes", ["n01", "n02"])
    assert [e.image_id for e in out] == ["img"]
    assert out.entries[0].boxes == ((10.0, 20.0, 30.0, 40.0, 0),)


def test_corpus_eval_set_maps_boxes(tmp_path):
    Image.new("RGB", (32, 32), (0, 0, 0)).save(tmp_path / "a.png")
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a", "path": "a.png", "label": 3,
                                                  "boxes": [[0, 0, 16, 16, 3], [0, 0, 32, 32, 5]]}) + "\n")
    es = CorpusEvalSet(CorpusIndex.load(tmp_path / "m.jsonl"), "squash")
    ((_, img, label, ann),) = list(es.annotated(16))
    assert img.shape == (3, 16, 16) and label == 3 and ann.boxes == ((0, 0, 8, 8),)
