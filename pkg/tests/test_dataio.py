import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facedetkit.dataio import (
    AugConfig,
    FaceAnnotation,
    ParseError,
    Sample,
    augment_train,
    format_predictions,
    hflip_sample,
    image_key,
    parse_predictions,
    parse_wider_gt,
    random_square_crop,
    read_predictions,
    resize_sample,
    serialize_wider_gt,
    write_prediction_set,
    write_predictions,
)
from facedetkit.geometry import Box
from facedetkit.postprocess import Detection, TTAVariant, tta_transform

GT = """0--Parade/0_Parade_marchingband_1_849.jpg
1
449 330 122 149 0 0 0 0 0 0
0--Parade/0_Parade_Parade_0_904.jpg
0
0 0 0 0 0 0 0 0 0 0
1--Handshaking/1_Handshaking_1_1.jpg
2
10 20 30 40 2 1 1 0 2 1
5 5 0 3 0 0 0 1 0 0
"""


def test_parse_examples():
    recs = parse_wider_gt(io.StringIO("a.jpg\n1\n10 20 30 40 0 0 0 0 0 0\n"))
    assert len(recs) == 1 and recs[0].annotations[0].box == Box(10, 20, 40, 60)
    recs = parse_wider_gt(io.StringIO("b.jpg\n0\n0 0 0 0 0 0 0 0 0 0\n"))
    assert len(recs) == 1 and recs[0].annotations == []


def test_parse_full_layout():
    recs = parse_wider_gt(io.StringIO(GT))
    assert [len(r.annotations) for r in recs] == [1, 0, 2]
    a = recs[2].annotations[0]
    assert (a.blur, a.expression, a.illumination, a.invalid, a.occlusion, a.pose) == (2, 1, 1, 0, 2, 1)
    assert recs[2].annotations[1].box.width == 0
    assert recs[0].key == "0--Parade/0_Parade_marchingband_1_849"
    assert recs[2].boxes.shape == (2, 4)


def test_zero_count_without_placeholder():
    recs = parse_wider_gt(io.StringIO("b.jpg\n0\nc.jpg\n1\n1 2 3 4 0 0 0 0 0 0\n"))
    assert [r.path for r in recs] == ["b.jpg", "c.jpg"]


def test_roundtrip_bytes():
    recs = parse_wider_gt(io.StringIO(GT))
    assert serialize_wider_gt(recs) == GT
    assert serialize_wider_gt(parse_wider_gt(io.StringIO(serialize_wider_gt(recs)))) == GT


@pytest.mark.parametrize(
    "text,line",
    [
        ("a.jpg\nx\n", 2),
        ("a.jpg\n2\n1 2 3 4 0 0 0 0 0 0\n", 4),
        ("a.jpg\n1\n1 2 3\n", 3),
        ("a.jpg\n1\n1 2 3 4 0 0 0 0 9 0\n", 3),
        ("a.jpg\n1\n1 2 -3 4 0 0 0 0 0 0\n", 3),
        ("a.jpg\n", 2),
    ],
)
def test_parse_errors_name_line(text, line):
    with pytest.raises(ParseError) as exc:
        parse_wider_gt(io.StringIO(text))
    assert exc.value.line == line


def test_annotation_validation():
    with pytest.raises(ValueError):
        FaceAnnotation(Box(0, 0, 1, 1), blur=3)


def test_prediction_line_format():
    text = format_predictions("img", [Detection.scored((6, 6, 22, 14), 0.45)])
    assert text == "img\n1\n6.0 6.0 16.0 8.0 0.45\n"
    assert format_predictions("img", []) == "img\n0\n"
    with pytest.raises(ValueError):
        format_predictions("img", [Detection.scored((0, 0, 1, 1), 1.5)])


def test_prediction_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    dets = []
    for _ in range(20):
        xy = rng.uniform(0, 500, 2)
        b = np.concatenate([xy, xy + rng.uniform(1, 100, 2)])
        dets.append(Detection.scored(b, rng.random()))
    write_predictions(tmp_path, "3--Riot/3_Riot_Riot_3_1.jpg", dets)
    back = read_predictions(tmp_path)
    assert list(back) == ["3--Riot/3_Riot_Riot_3_1"]
    for d, e in zip(dets, back["3--Riot/3_Riot_Riot_3_1"]):
        # width round trip (x + w) - x can differ in the last bit
        assert e.fused_score == d.fused_score
        assert e.box.x1 == d.box.x1 and e.box.y1 == d.box.y1
        assert e.box.x2 == pytest.approx(d.box.x2, rel=1e-15)
    write_prediction_set(tmp_path / "set", {"e/x.y": dets[:1]})
    assert list(read_predictions(tmp_path / "set")) == ["e/x.y"]


def test_prediction_count_mismatch():
    with pytest.raises(ParseError):
        parse_predictions("img\n2\n1 2 3 4 0.5\n")
    with pytest.raises(ParseError):
        parse_predictions("img\n")
    name, dets = parse_predictions("img\n0\n")
    assert name == "img" and dets == []


def test_image_key():
    assert image_key("0--Parade/a_b.jpg") == "0--Parade/a_b"


def test_crop_identity():
    boxes = np.array([[10.0, 10, 30, 30], [50, 60, 70, 90]])
    patch, out, kept = random_square_crop(100, 100, boxes, 1.0, np.random.default_rng(0))
    assert patch == (0, 0, 100, 100)
    np.testing.assert_array_equal(out, boxes)
    assert kept.tolist() == [0, 1]


def test_crop_side():
    patch, _, _ = random_square_crop(1000, 800, np.zeros((0, 4)), 0.6, np.random.default_rng(0))
    assert patch[2] - patch[0] == 480 and patch[3] - patch[1] == 480


def test_crop_drops_outside_centre():
    # patch on a 200x100 image at ratio 1.0 has side 100; force a known position
    rng = np.random.default_rng(0)
    for _ in range(50):
        boxes = np.array([[80.0, 10, 140, 40]])
        (x0, y0, x1, y1), out, kept = random_square_crop(200, 100, boxes, 1.0, rng)
        c = 110.0
        assert (len(kept) == 1) == (x0 < c < x1)
        if len(kept):
            assert out[0, 0] == max(80 - x0, 0) and out[0, 2] == min(140, x1) - x0


def test_crop_centre_on_edge_drops():
    rng = np.random.default_rng(0)
    boxes = np.array([[-10.0, 10, 10, 20]])  # centre x = 0 is on the boundary
    _, out, kept = random_square_crop(50, 50, boxes, 1.0, rng)
    assert len(kept) == 0 and out.shape == (0, 4)


@given(st.integers(0, 10_000), st.sampled_from([0.3, 0.45, 0.6, 0.8, 1.0]))
def test_crop_survivors_inside_patch(seed, ratio):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-20, 300, (8, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(0, 80, (8, 2))], axis=1)
    (x0, y0, x1, y1), out, _ = random_square_crop(320, 240, boxes, ratio, rng)
    side = x1 - x0
    assert side == round(ratio * 240)
    assert np.all(out >= 0) and np.all(out <= side)
    assert np.all(out[:, 2] >= out[:, 0]) and np.all(out[:, 3] >= out[:, 1])


def _sample(seed=0, w=120, h=90):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3))
    boxes = np.array([[10.0, 10, 40, 50], [60, 20, 100, 70]])
    return Sample(img, boxes)


def test_hflip_twice_is_identity():
    s = _sample()
    t = hflip_sample(hflip_sample(s))
    np.testing.assert_array_equal(t.image, s.image)
    np.testing.assert_array_equal(t.boxes, s.boxes)


def test_resize_scales_boxes():
    s = Sample(np.zeros((480, 480, 3)), np.array([[30.0, 60, 90, 120]]))
    r = resize_sample(s, 640)
    assert r.image.shape == (640, 640, 3)
    np.testing.assert_allclose(r.boxes, [[40, 80, 120, 160]])


def test_flip_and_resize_match_tta_maps():
    s = _sample()
    f = hflip_sample(s)
    m = tta_transform(120, 90, TTAVariant(flip=True))
    np.testing.assert_array_equal(f.boxes, m.forward(s.boxes))
    sq = Sample(np.zeros((80, 80, 3)), s.boxes)
    r = resize_sample(sq, 120)
    m = tta_transform(80, 80, TTAVariant(scale=1.5))
    np.testing.assert_array_equal(r.boxes, m.forward(s.boxes))


def test_augment_deterministic_and_shaped():
    s = _sample()
    cfg = AugConfig(output_size=64, seed=3)
    a = augment_train(s, cfg)
    b = augment_train(s, cfg)
    assert a.image.shape == (64, 64, 3)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.boxes, b.boxes)
    assert np.all(a.boxes >= 0) and np.all(a.boxes <= 64)


def test_augment_identity_settings_only_resize_and_normalize():
    s = _sample(w=120, h=120)
    cfg = AugConfig(crop_ratios=(1.0,), hflip_prob=0.0, distort_prob=0.0, output_size=90, mean=(0, 0, 0), std=(1, 1, 1))
    out = augment_train(s, cfg)
    np.testing.assert_allclose(out.boxes, s.boxes * 90 / 120)
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_min_face_size_filter():
    # widths 30 and 40 after the crop; only the second reaches 35
    s = _sample(w=120, h=120)
    cfg = AugConfig(crop_ratios=(1.0,), hflip_prob=0.0, distort_prob=0.0, output_size=120, min_face_size=35)
    np.testing.assert_allclose(augment_train(s, cfg).boxes, s.boxes[1:])


def test_aug_config_validation():
    with pytest.raises(ValueError):
        AugConfig(crop_ratios=(1.2,))
    with pytest.raises(ValueError):
        AugConfig(hflip_prob=2.0)
