import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mercatran.datamodel import (
    EVENT_TYPES,
    EventType,
    ProductId,
    format_stime,
    parse_event_line,
    parse_stime,
    product_id_of,
    reconstruct_sequences,
    serialize_event,
)
from mercatran.errors import MalformedLine, MissingField, UnknownEventType

from conftest import make_event, make_item

TABLE1_FIELDS = {
    "user_id", "sequence_id", "session_id", "stime", "event_id", "item_id", "name", "price", "c0_name", "c0_id",
    "c1_name", "c1_id", "c2_name", "c2_id", "brand_name", "brand_id", "item_condition_id", "size_id", "shipper_id",
}


def full_line(**over):
    obj = {
        "user_id": "u9", "sequence_id": "s3", "session_id": "x1", "stime": "2023-05-01T12:00:00.123456Z",
        "event_id": "item_view", "item_id": "m77", "name": "Blue Jeans", "price": 12.5,
        "c0_name": "Women", "c0_id": 2, "c1_name": "Bottoms", "c1_id": 21, "c2_name": "Jeans", "c2_id": 310,
        "brand_name": "Levi's", "brand_id": 44, "item_condition_id": 3, "size_id": 8, "shipper_id": 1,
    }
    obj.update(over)
    return obj


class TestParseEventLine:
    def test_complete_line_echoes_every_field(self):
        ev = parse_event_line(json.dumps(full_line()))
        assert ev.user_id == "u9" and ev.sequence_id == "s3" and ev.session_id == "x1"
        assert ev.event_type is EventType.ITEM_VIEW
        assert ev.stime == parse_stime("2023-05-01T12:00:00.123456Z")
        it = ev.item
        assert (it.item_id, it.name, it.price_usd) == ("m77", "Blue Jeans", 12.5)
        assert (it.c0_id, it.c1_id, it.c2_id, it.brand_id) == (2, 21, 310, 44)
        assert (it.c0_name, it.c1_name, it.c2_name, it.brand_name) == ("Women", "Bottoms", "Jeans", "Levi's")
        assert (it.item_condition_id, it.size_id, it.shipper_id) == (3, 8, 1)

    def test_missing_item_id(self):
        obj = full_line()
        del obj["item_id"]
        with pytest.raises(MissingField) as info:
            parse_event_line(json.dumps(obj))
        assert info.value.field == "item_id"

    def test_unknown_event_type(self):
        with pytest.raises(UnknownEventType):
            parse_event_line(json.dumps(full_line(event_id="teleport")))

    def test_bad_json(self):
        with pytest.raises(MalformedLine):
            parse_event_line("{not json")
        with pytest.raises(MalformedLine):
            parse_event_line("[1, 2]")

    def test_extra_fields_ignored_and_optionals_absent(self):
        obj = full_line(extra="zzz")
        for k in ("session_id", "price", "c0_id", "c1_id", "item_condition_id", "size_id", "shipper_id"):
            del obj[k]
        ev = parse_event_line(json.dumps(obj))
        assert ev.session_id is None and ev.item.price_usd is None and ev.item.shipper_id is None

    def test_serialized_field_names_match_table1(self):
        out = json.loads(serialize_event(parse_event_line(json.dumps(full_line()))))
        assert set(out) == TABLE1_FIELDS

    def test_six_event_types(self):
        assert len(EVENT_TYPES) == 6


class TestStime:
    def test_integer_micros_pass_through(self):
        assert parse_stime(1_700_000_000_000_123) == 1_700_000_000_000_123

    def test_rfc3339_and_micros_agree(self):
        micros = 1_683_000_000_654_321
        assert parse_stime(format_stime(micros)) == micros
        assert parse_stime("1970-01-01T00:00:01+00:00") == 1_000_000

    def test_bad_value(self):
        with pytest.raises(MalformedLine):
            parse_stime("yesterday")


@st.composite
def events(draw):
    ts = draw(st.integers(0, 10**15))
    return make_event(
        user=draw(st.sampled_from(["u1", "u2"])), seq=draw(st.sampled_from(["s1", "s2"])), t=ts,
        etype=draw(st.sampled_from(EVENT_TYPES)),
        item=make_item(item_id=draw(st.text("abc0123", min_size=1, max_size=4)),
                       name=draw(st.text(min_size=1, max_size=10)),
                       price_usd=draw(st.none() | st.floats(0, 1e4, allow_nan=False)),
                       brand_id=draw(st.integers(0, 99)), c2_id=draw(st.integers(0, 999))),
    )


class TestRoundTrip:
    @settings(max_examples=60, deadline=None)
    @given(events())
    def test_parse_serialize_identity(self, ev):
        assert parse_event_line(serialize_event(ev)) == ev


class TestReconstructSequences:
    def test_empty(self):
        assert reconstruct_sequences([]) == []

    def test_orders_by_time(self):
        evs = [make_event("u1", "s1", 2), make_event("u1", "s1", 1), make_event("u2", "s1", 5)]
        seqs = reconstruct_sequences(evs)
        assert len(seqs) == 2
        u1 = [s for s in seqs if s.user_id == "u1"][0]
        assert [e.stime for e in u1.events] == [1, 2]

    def test_stable_ties(self):
        a = make_event("u1", "s1", 3, item_id="a")
        b = make_event("u1", "s1", 3, item_id="b")
        (seq,) = reconstruct_sequences([a, b])
        assert [e.item.item_id for e in seq.events] == ["a", "b"]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(events(), max_size=30))
    def test_partition_and_shard_invariance(self, evs):
        seqs = reconstruct_sequences(evs)
        assert sum(len(s) for s in seqs) == len(evs)
        half = len(evs) // 2
        shards = reconstruct_sequences(evs[:half]) + reconstruct_sequences(evs[half:])
        merged = reconstruct_sequences([e for s in shards for e in s.events])
        assert [(s.user_id, s.sequence_id, sorted(e.stime for e in s.events)) for s in merged] == \
               [(s.user_id, s.sequence_id, sorted(e.stime for e in s.events)) for s in seqs]
        for s in seqs:
            assert all(x.stime <= y.stime for x, y in zip(s.events, s.events[1:]))


class TestProductId:
    def test_construction(self):
        assert product_id_of(make_item(brand_id=7, c2_id=301)) == ProductId(7, 301)

    def test_same_brand_and_leaf_share_product(self):
        a = make_item("p1", "iPhone 12 64GB", brand_id=1, brand_name="Apple", c2_id=55, price_usd=300.0)
        b = make_item("p2", "iPhone 12 128GB", brand_id=1, brand_name="Apple", c2_id=55, price_usd=420.0)
        assert product_id_of(a) == product_id_of(b)

    def test_missing_brand(self):
        with pytest.raises(MissingField):
            product_id_of(make_item(brand_id=None))
