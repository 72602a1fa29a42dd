"""Event and item schema for C2C clickstream logs, plus sequence reconstruction.

Event logs are UTF-8 ``.jsonl`` files with one flattened event per line. Field
names follow the public marketplace dataset column names (``user_id``, ``sequence_id``,
``stime``, ``event_id``, ``item_id``, ``name``, ``price``, ``c0_name`` ... ).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Iterator, NamedTuple, Optional

from .errors import MalformedLine, MissingField, UnknownEventType

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_MICRO = timedelta(microseconds=1)


class EventType(str, enum.Enum):
    ITEM_VIEW = "item_view"
    ITEM_LIKE = "item_like"
    ITEM_ADD_TO_CART = "item_add_to_cart"
    OFFER_MAKE = "offer_make"
    BUY_START = "buy_start"
    BUY_COMPLETE = "buy_complete"


EVENT_TYPES = tuple(EventType)

ITEM_REQUIRED = ("item_id", "name", "brand_id", "brand_name", "c0_name", "c1_name", "c2_name", "c2_id")
EVENT_REQUIRED = ("user_id", "sequence_id", "stime", "event_id") + ITEM_REQUIRED


@dataclass(frozen=True)
class ItemSnapshot:
    """An item listing as it looked at one point in time.

    The same ``item_id`` may appear with different field values in different
    snapshots, since sellers can edit listings.
    """

    item_id: str
    name: str
    brand_id: int
    brand_name: str
    c0_name: str
    c1_name: str
    c2_name: str
    c2_id: int
    c0_id: Optional[int] = None
    c1_id: Optional[int] = None
    price_usd: Optional[float] = None
    item_condition_id: Optional[int] = None
    size_id: Optional[int] = None
    shipper_id: Optional[int] = None

    def to_dict(self) -> dict:
        out = {
            "item_id": self.item_id,
            "name": self.name,
            "price": self.price_usd,
            "c0_name": self.c0_name,
            "c0_id": self.c0_id,
            "c1_name": self.c1_name,
            "c1_id": self.c1_id,
            "c2_name": self.c2_name,
            "c2_id": self.c2_id,
            "brand_name": self.brand_name,
            "brand_id": self.brand_id,
            "item_condition_id": self.item_condition_id,
            "size_id": self.size_id,
            "shipper_id": self.shipper_id,
        }
        return {k: v for k, v in out.items() if v is not None}


class ProductId(NamedTuple):
    """Coarse SKU stand-in: brand plus leaf category."""

    brand_id: int
    c2_id: int


@dataclass(frozen=True)
class EventRecord:
    user_id: str
    sequence_id: str
    stime: int  # epoch microseconds, UTC
    event_type: EventType
    item: ItemSnapshot
    session_id: Optional[str] = None

    def to_dict(self) -> dict:
        out = {
            "user_id": self.user_id,
            "sequence_id": self.sequence_id,
            "stime": format_stime(self.stime),
            "event_id": self.event_type.value,
        }
        if self.session_id is not None:
            out["session_id"] = self.session_id
        out.update(self.item.to_dict())
        return out


@dataclass
class UserSequence:
    user_id: str
    sequence_id: str
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.events)


def parse_stime(value) -> int:
    """Normalize an RFC-3339 string or integer epoch-microseconds to epoch-microseconds."""
    if isinstance(value, bool):
        raise MalformedLine(f"bad stime {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError as exc:
            raise MalformedLine(f"bad stime {value!r}") from exc
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return (dt - _EPOCH) // _MICRO
    raise MalformedLine(f"bad stime {value!r}")


def format_stime(micros: int) -> str:
    dt = _EPOCH + timedelta(microseconds=micros)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _opt_int(obj, key):
    value = obj.get(key)
    if value is None:
        return None
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise MalformedLine(f"field {key!r} is not an integer: {value!r}") from exc


def _require(obj, keys):
    for key in keys:
        if obj.get(key) is None:
            raise MissingField(key)


def item_from_dict(obj: dict) -> ItemSnapshot:
    _require(obj, ITEM_REQUIRED)
    price = obj.get("price")
    if price is not None:
        try:
            price = float(price)
        except (TypeError, ValueError) as exc:
            raise MalformedLine(f"bad price {price!r}") from exc
        if price < 0:
            raise MalformedLine(f"negative price {price!r}")
    shipper = _opt_int(obj, "shipper_id")
    if shipper not in (None, 0, 1):
        raise MalformedLine(f"shipper_id must be 0 or 1, got {shipper!r}")
    return ItemSnapshot(
        item_id=str(obj["item_id"]),
        name=str(obj["name"]),
        brand_id=_opt_int(obj, "brand_id"),
        brand_name=str(obj["brand_name"]),
        c0_name=str(obj["c0_name"]),
        c1_name=str(obj["c1_name"]),
        c2_name=str(obj["c2_name"]),
        c2_id=_opt_int(obj, "c2_id"),
        c0_id=_opt_int(obj, "c0_id"),
        c1_id=_opt_int(obj, "c1_id"),
        price_usd=price,
        item_condition_id=_opt_int(obj, "item_condition_id"),
        size_id=_opt_int(obj, "size_id"),
        shipper_id=shipper,
    )


def _load_object(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(str(exc)) from exc
    if not isinstance(obj, dict):
        raise MalformedLine("line is not a JSON object")
    return obj


def event_from_dict(obj: dict) -> EventRecord:
    _require(obj, EVENT_REQUIRED)
    try:
        event_type = EventType(obj["event_id"])
    except ValueError as exc:
        raise UnknownEventType(obj["event_id"]) from exc
    session = obj.get("session_id")
    return EventRecord(
        user_id=str(obj["user_id"]),
        sequence_id=str(obj["sequence_id"]),
        stime=parse_stime(obj["stime"]),
        event_type=event_type,
        item=item_from_dict(obj),
        session_id=None if session is None else str(session),
    )


def parse_event_line(line: str) -> EventRecord:
    """Parse one JSON line into an :class:`EventRecord`; unknown keys are ignored."""
    return event_from_dict(_load_object(line))


def serialize_event(event: EventRecord) -> str:
    return json.dumps(event.to_dict(), ensure_ascii=False, sort_keys=True)


def parse_item_line(line: str) -> ItemSnapshot:
    return item_from_dict(_load_object(line))


def serialize_item(item: ItemSnapshot) -> str:
    return json.dumps(item.to_dict(), ensure_ascii=False, sort_keys=True)


def product_id_of(item: ItemSnapshot) -> ProductId:
    if item.brand_id is None:
        raise MissingField("brand_id")
    if item.c2_id is None:
        raise MissingField("c2_id")
    return ProductId(item.brand_id, item.c2_id)


def reconstruct_sequences(events: Iterable[EventRecord]) -> list[UserSequence]:
    """Group events by (user_id, sequence_id) and order each group by time.

    Equal timestamps keep their input order. Output is sorted by key so the
    result does not depend on how the input was sharded.
    """
    groups: dict[tuple[str, str], list[EventRecord]] = {}
    for ev in events:
        groups.setdefault((ev.user_id, ev.sequence_id), []).append(ev)
    out = []
    for key in sorted(groups):
        evs = sorted(groups[key], key=lambda e: e.stime)  # stable
        out.append(UserSequence(key[0], key[1], evs))
    return out


def iter_lines(path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield line


def read_events(path) -> list[EventRecord]:
    return [parse_event_line(line) for line in iter_lines(path)]


def read_items(path) -> list[ItemSnapshot]:
    return [parse_item_line(line) for line in iter_lines(path)]


def write_jsonl(path, lines: Iterable[str]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
            n += 1
    return n
