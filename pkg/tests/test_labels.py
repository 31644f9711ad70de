import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbamseg.labels import (InstanceRecord, LabelParseError, clip_to_unit_square, is_simple_polygon,
                            mask_to_polygon, parse_labels, parse_predictions, polygon_area, rasterize,
                            read_labels, serialize_labels, write_labels)

from oracles import shoelace


def test_parse_single_triangle():
    recs = parse_labels("1 0.1 0.1 0.9 0.1 0.5 0.9")
    assert len(recs) == 1
    assert recs[0].class_id == 1
    assert recs[0].polygon.tolist() == [[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]


def test_parse_empty():
    assert parse_labels("") == []
    assert parse_labels("\n\n  \n") == []


def test_box_is_tight_hull():
    rec = parse_labels("0 0.2 0.3 0.6 0.1 0.4 0.7 0.1 0.5")[0]
    assert rec.box.tolist() == [0.1, 0.1, 0.6, 0.7]


@pytest.mark.parametrize("line,fragment", [
    ("0 0.1 0.1 0.2 0.2 0.3", "odd"),
    ("0 0.1 0.1 0.2 0.2", "3 vertices"),
    ("0 0.1 0.1 0.2 1.2 0.3 0.3", "outside"),
    ("0 0.1 x 0.2 0.2 0.3 0.3", "non-numeric"),
    ("a 0.1 0.1 0.2 0.2 0.3 0.3", "class"),
    ("-1 0.1 0.1 0.2 0.2 0.3 0.3", "class"),
    ("1.5 0.1 0.1 0.2 0.2 0.3 0.3", "class"),
    ("0 0.1 nan 0.2 0.2 0.3 0.3", "non-finite"),
])
def test_invalid_lines_rejected(line, fragment):
    with pytest.raises(LabelParseError, match=fragment):
        parse_labels("1 0.1 0.1 0.9 0.1 0.5 0.9\n" + line)
    try:
        parse_labels("1 0.1 0.1 0.9 0.1 0.5 0.9\n" + line)
    except LabelParseError as err:
        assert err.line_no == 2 and "line 2" in str(err)


def test_tolerance_band_accepted_and_clipped():
    rec = parse_labels("0 -1e-10 0.1 0.5 1.0000000001 0.9 0.2")[0]
    assert rec.polygon.min() == 0.0 and rec.polygon.max() == 1.0


def test_lenient_mode_skips_and_counts():
    errors = []
    text = "0 0.1 0.1 0.2 0.2 0.3 0.3\n0 0.5\n1 0.1 0.1 0.9 0.1 0.5 0.9\n2 9 9 9 9 9 9\n"
    recs = parse_labels(text, strict=False, errors=errors)
    assert len(recs) == 2
    assert [e.line_no for e in errors] == [2, 4]


def test_serialize_examples():
    assert serialize_labels([]) == ""
    text = serialize_labels([InstanceRecord(1, [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]])])
    assert text.count("\n") == 1
    assert len(text.split()) == 1 + 2 * 4
    assert text == "1 0.100000 0.200000 0.300000 0.400000 0.500000 0.600000 0.700000 0.800000\n"


def test_prediction_lines_carry_confidence():
    recs = parse_predictions("0 0.1 0.1 0.9 0.1 0.5 0.9 0.75\n")
    assert recs[0].confidence == 0.75 and len(recs[0].polygon) == 3
    assert parse_predictions(serialize_labels(recs))[0].confidence == 0.75
    with pytest.raises(LabelParseError, match="confidence"):
        parse_predictions("0 0.1 0.1 0.9 0.1 0.5 0.9 1.5")


def test_file_round_trip(tmp_path):
    recs = parse_labels("0 0.1 0.1 0.9 0.1 0.5 0.9\n1 0.2 0.2 0.4 0.2 0.4 0.8 0.2 0.8\n")
    write_labels(tmp_path / "a.txt", recs)
    back = read_labels(tmp_path / "a.txt")
    assert serialize_labels(back) == serialize_labels(recs)


coord = st.floats(0.0, 1.0, allow_nan=False)
polygon = st.lists(st.tuples(coord, coord), min_size=3, max_size=8)
record = st.tuples(st.integers(0, 5), polygon)


def _canonical(records):
    return "".join(f"{c} " + " ".join(f"{v:.6f}" for xy in poly for v in xy) + "\n" for c, poly in records)


@settings(max_examples=100, deadline=None)
@given(st.lists(record, max_size=6), st.sampled_from([" ", "  ", "\t"]), st.booleans())
def test_round_trip_canonical(records, sep, blank_lines):
    lines = [sep.join([str(c)] + [repr(v) for xy in poly for v in xy]) for c, poly in records]
    text = ("\n\n" if blank_lines else "\n").join(lines)
    parsed = parse_labels(text)
    assert serialize_labels(parsed) == _canonical(records)
    again = parse_labels(serialize_labels(parsed))
    for a, b in zip(parsed, again):
        assert a.class_id == b.class_id
        assert np.max(np.abs(a.polygon - b.polygon)) <= 5e-7


def test_rasterize_full_frame_and_half():
    full = [[0, 0], [1, 0], [1, 1], [0, 1]]
    assert rasterize(full, 7, 9).sum() == 63
    half = [[0, 0], [0.5, 0], [0.5, 1], [0, 1]]
    m = rasterize(half, 8, 10)
    assert m.sum() == 40 and m[:, :5].all() and not m[:, 5:].any()


def test_rasterize_degenerate_warns():
    with pytest.warns(UserWarning, match="degenerate"):
        m = rasterize([[0.1, 0.1], [0.5, 0.5], [0.9, 0.9]], 16, 16)
    assert not m.any()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(coord, coord), min_size=3, max_size=3))
def test_rasterize_triangle_area(tri):
    p = np.array(tri)
    area = shoelace(p.tolist())
    if area < 1e-6:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = rasterize(p, 64, 64)
    edges = sum(np.hypot(*(p[(i + 1) % 3] - p[i])) * 64 for i in range(3))
    # each edge mislabels at most about one pixel per pixel of length, plus two
    assert abs(m.sum() - area * 64 * 64) <= edges + 2 * 3


def test_polygon_area_matches_shoelace():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.random((5, 2))
        assert abs(abs(polygon_area(p)) - shoelace(p.tolist())) < 1e-15


def test_simplicity_validator():
    assert is_simple_polygon(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float))
    assert not is_simple_polygon(np.array([[0, 0], [1, 1], [1, 0], [0, 1]], float))


def test_clip_to_unit_square():
    out = clip_to_unit_square(np.array([[-0.5, 0.2], [0.5, 0.2], [0.5, 0.8], [-0.5, 0.8]]))
    assert out.min() >= 0 and out.max() <= 1
    assert abs(abs(polygon_area(out)) - 0.3) < 1e-12


def test_mask_to_polygon_reproduces_blobs():
    rng = np.random.default_rng(1)
    for _ in range(40):
        m = np.zeros((24, 24), bool)
        r0, c0 = rng.integers(0, 16, 2)
        m[r0:r0 + rng.integers(2, 8), c0:c0 + rng.integers(2, 8)] = True
        m[r0:r0 + 2, c0:c0 + rng.integers(2, 9)] = True
        poly = mask_to_polygon(m)
        assert np.array_equal(rasterize(poly, 24, 24), m)
    assert mask_to_polygon(np.zeros((5, 5), bool)) is None
