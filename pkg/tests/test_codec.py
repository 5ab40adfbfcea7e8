import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locseq.codec import (
    Detection,
    NormBox,
    ParseError,
    PredictionSet,
    SequenceOrder,
    SerializationError,
    ValidationError,
    detections_from_json,
    detections_to_json,
    parse,
    parse_segments,
    quantize_coord,
    serialize,
)

LABEL_FIRST = SequenceOrder.LABEL_FIRST
COORD_FIRST = SequenceOrder.COORD_FIRST

# Labels may contain anything except '&' and newlines, including hyphens,
# digits, spaces, brackets, and box-shaped substrings.
label_strategy = st.text(
    alphabet=st.characters(blacklist_characters="&\n\r"), min_size=1, max_size=24
)

coord_strategy = st.integers(min_value=0, max_value=1000)


@st.composite
def norm_boxes(draw):
    x1 = draw(coord_strategy)
    x2 = draw(st.integers(min_value=x1, max_value=1000))
    y1 = draw(coord_strategy)
    y2 = draw(st.integers(min_value=y1, max_value=1000))
    return NormBox(x1, y1, x2, y2)


@st.composite
def prediction_sets(draw):
    dets = draw(
        st.lists(
            st.builds(Detection, label=label_strategy, box=norm_boxes()),
            min_size=1,
            max_size=6,
        )
    )
    return PredictionSet.of(dets)


class TestQuantize:
    def test_rounding_at_three_decimals(self):
        assert quantize_coord(0.3456) == 346

    def test_endpoints_fixed(self):
        assert quantize_coord(0.0) == 0
        assert quantize_coord(1.0) == 1000

    def test_tie_rounds_away_from_zero(self):
        assert quantize_coord(0.0005) == 1
        # 0.0625 is an exactly representable midpoint between 62 and 63
        assert quantize_coord(0.0625) == 63

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            quantize_coord(-0.001)
        with pytest.raises(ValidationError):
            quantize_coord(1.0001)
        with pytest.raises(ValidationError):
            quantize_coord(float("nan"))

    @given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
    def test_error_bounded_by_half_step(self, v):
        q = quantize_coord(v)
        # exact rational comparison: |q/1000 - v| <= 1/2000
        assert abs(Fraction(q, 1000) - Fraction(v)) <= Fraction(1, 2000)

    @given(st.integers(min_value=0, max_value=1000))
    def test_grid_points_are_fixed(self, t):
        assert quantize_coord(t / 1000) == t


class TestSerialize:
    def test_label_first_single(self):
        preds = PredictionSet.of([Detection("person", NormBox(1, 345, 111, 678))])
        assert serialize(preds, LABEL_FIRST) == "person-[0.001,0.345,0.111,0.678]"

    def test_label_first_multiple(self):
        preds = PredictionSet.of(
            [
                Detection("cat", NormBox(100, 200, 300, 400)),
                Detection("dog", NormBox(500, 500, 900, 900)),
            ]
        )
        assert (
            serialize(preds, LABEL_FIRST)
            == "cat-[0.100,0.200,0.300,0.400]&dog-[0.500,0.500,0.900,0.900]"
        )

    def test_coord_first_swaps_fields(self):
        preds = PredictionSet.of([Detection("person", NormBox(1, 345, 111, 678))])
        assert serialize(preds, COORD_FIRST) == "[0.001,0.345,0.111,0.678]-person"

    def test_none_sentinel(self):
        assert serialize(PredictionSet.none_sentinel(), LABEL_FIRST) == "None"
        assert serialize(PredictionSet.none_sentinel(), COORD_FIRST) == "None"

    def test_empty_objects_rejected(self):
        with pytest.raises(SerializationError):
            serialize(PredictionSet.of([]), LABEL_FIRST)

    def test_label_with_ampersand_rejected_at_construction(self):
        with pytest.raises(ValidationError):
            Detection("cat&dog", NormBox(0, 0, 1, 1))

    def test_full_scale_coordinate_prints_as_1_000(self):
        preds = PredictionSet.of([Detection("x", NormBox(0, 0, 1000, 1000))])
        assert serialize(preds, LABEL_FIRST) == "x-[0.000,0.000,1.000,1.000]"


class TestParse:
    def test_label_with_spaces_and_hyphen_boundary(self):
        preds, diags = parse(
            "traffic light-[0.100,0.200,0.300,0.400]", LABEL_FIRST, "strict"
        )
        assert diags == []
        assert preds.detections == (
            Detection("traffic light", NormBox(100, 200, 300, 400)),
        )

    def test_label_containing_box_like_substring(self):
        text = "b-[0.100,0.200,0.300,0.400]-[0.500,0.500,0.900,0.900]"
        preds, _ = parse(text, LABEL_FIRST, "strict")
        (det,) = preds.detections
        assert det.label == "b-[0.100,0.200,0.300,0.400]"
        assert det.box == NormBox(500, 500, 900, 900)

    def test_none_after_trim(self):
        for text in ("None", "  None", "None\n", "\tNone  "):
            preds, diags = parse(text, LABEL_FIRST, "strict")
            assert preds.is_none and diags == []

    def test_none_is_case_sensitive(self):
        with pytest.raises(ParseError):
            parse("none", LABEL_FIRST, "strict")

    def test_lenient_skips_short_coordinate_block(self):
        preds, diags = parse(
            "cat-[0.1,0.2,0.3]&dog-[0.500,0.500,0.900,0.900]", LABEL_FIRST, "lenient"
        )
        assert [d.label for d in preds.detections] == ["dog"]
        assert len(diags) == 1
        assert "3 values" in diags[0].message

    def test_strict_reports_offset(self):
        with pytest.raises(ParseError) as err:
            parse("cat-[0.100,0.200,0.300,0.400]&junk", LABEL_FIRST, "strict")
        assert err.value.offset == 30

    def test_inverted_box_rejected_in_both_modes(self):
        text = "cat-[0.500,0.200,0.300,0.400]"
        with pytest.raises(ParseError):
            parse(text, LABEL_FIRST, "strict")
        preds, diags = parse(text, LABEL_FIRST, "lenient")
        assert preds.detections == () and len(diags) == 1

    def test_non_canonical_numerals_are_quantized(self):
        preds, _ = parse("cat-[0.1,0.2,0.30049,1.0]", LABEL_FIRST, "strict")
        assert preds.detections[0].box == NormBox(100, 200, 300, 1000)

    def test_out_of_range_numeral_clamped(self):
        preds, _ = parse("cat-[0.100,0.200,7.5,0.400]", LABEL_FIRST, "strict")
        assert preds.detections[0].box == NormBox(100, 200, 1000, 400)

    def test_coord_first(self):
        preds, _ = parse("[0.001,0.345,0.111,0.678]-traffic light", COORD_FIRST, "strict")
        assert preds.detections == (
            Detection("traffic light", NormBox(1, 345, 111, 678)),
        )

    def test_lenient_tolerates_segment_whitespace(self):
        preds, diags = parse(
            " cat-[0.100,0.200,0.300,0.400] & dog-[0.500,0.500,0.900,0.900] ",
            LABEL_FIRST,
            "lenient",
        )
        assert [d.label for d in preds.detections] == ["cat", "dog"]
        assert diags == []

    def test_strict_keeps_label_whitespace(self):
        preds, _ = parse(" cat-[0.100,0.200,0.300,0.400]", LABEL_FIRST, "strict")
        assert preds.detections[0].label == " cat"

    def test_lenient_empty_input_gives_empty_objects(self):
        preds, diags = parse("", LABEL_FIRST, "lenient")
        assert preds.detections == () and diags == []

    def test_strict_empty_input_fails(self):
        with pytest.raises(ParseError):
            parse("", LABEL_FIRST, "strict")

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError):
            parse("None", LABEL_FIRST, "loose")

    def test_parse_segments_char_extents(self):
        text = "cat-[0.100,0.200,0.300,0.400]&dog-[0.500,0.500,0.900,0.900]"
        segs = parse_segments(text, LABEL_FIRST)
        assert [text[slice(*s.label_chars)] for s in segs] == ["cat", "dog"]
        first_coords = [text[slice(*c)] for c in segs[0].coord_chars]
        assert first_coords == ["0.100", "0.200", "0.300", "0.400"]
        second_coords = [text[slice(*c)] for c in segs[1].coord_chars]
        assert second_coords == ["0.500", "0.500", "0.900", "0.900"]

    def test_parse_segments_none(self):
        assert parse_segments("None", LABEL_FIRST) is None


class TestRoundTrip:
    @settings(max_examples=300)
    @given(prediction_sets(), st.sampled_from([LABEL_FIRST, COORD_FIRST]))
    def test_parse_inverts_serialize(self, preds, order):
        text = serialize(preds, order)
        parsed, diags = parse(text, order, "strict")
        assert diags == []
        assert parsed == preds

    def test_none_round_trip(self):
        for order in (LABEL_FIRST, COORD_FIRST):
            text = serialize(PredictionSet.none_sentinel(), order)
            parsed, _ = parse(text, order, "strict")
            assert parsed.is_none

    @given(prediction_sets(), st.sampled_from([LABEL_FIRST, COORD_FIRST]))
    def test_serialization_deterministic(self, preds, order):
        assert serialize(preds, order) == serialize(preds, order)


class TestLenientTotality:
    @settings(max_examples=500)
    @given(st.text(max_size=120), st.sampled_from([LABEL_FIRST, COORD_FIRST]))
    def test_never_raises(self, text, order):
        preds, diags = parse(text, order, "lenient")
        if not preds.is_none:
            assert isinstance(preds.detections, tuple)
        assert all(d.offset >= 0 for d in diags)

    def test_mutated_serializations(self):
        rng = random.Random(7)
        base = "cat-[0.100,0.200,0.300,0.400]&dog-[0.500,0.500,0.900,0.900]"
        for _ in range(500):
            chars = list(base)
            for _ in range(rng.randint(1, 4)):
                op = rng.randrange(3)
                pos = rng.randrange(len(chars))
                if op == 0:
                    chars[pos] = chr(rng.randrange(32, 127))
                elif op == 1 and len(chars) > 1:
                    del chars[pos]
                else:
                    chars.insert(pos, chr(rng.randrange(32, 127)))
            parse("".join(chars), LABEL_FIRST, "lenient")


class TestJsonRecords:
    def test_detection_record_round_trip(self):
        preds = PredictionSet.of(
            [Detection("cat", NormBox(100, 200, 300, 400), score=0.5)]
        )
        image_id, back = detections_from_json(detections_to_json("img1", preds))
        assert image_id == "img1"
        assert back == preds

    def test_none_record_round_trip(self):
        obj = detections_to_json("img2", PredictionSet.none_sentinel())
        assert obj["detections"] is None
        _, back = detections_from_json(obj)
        assert back.is_none
