"""Behavior-log schema: record types, JSONL parsing, sequence construction.

Two line-oriented formats cross the package boundary here. The item catalog
is JSONL with keys i (item id), leaf, cat, brand, shop; the event log is
JSONL with keys u (user id), i (item id), t (integer timestamp, seconds) and
e ("imp" for an impression, "clk" for a click). Parsing is strict: any
missing key, wrong type, or unknown event tag fails with the 1-based line
number in the message.

From a parsed event log, build_examples places one anchor immediately after
every click that still has at least label_k strictly later clicks by the
same user. Each anchor yields a training example:

* clicked_seq: the user's clicks before the anchor, oldest first, truncated
  to the most recent max_clicked_len;
* unclicked_seq: items the user saw in the trailing window before the anchor
  (at least min_exposures impressions, zero clicks inside the window),
  ordered by their latest in-window impression time, truncated to the most
  recent max_unclicked_len;
* labels: the next label_k clicked item ids at or after the anchor.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass
from itertools import groupby
from math import ceil
from typing import IO, Iterable

import numpy as np

EVENT_IMPRESSION = "imp"
EVENT_CLICK = "clk"

FEATURE_NAMES = ("item", "leaf", "cat", "brand", "shop")


class LogFormatError(ValueError):
    """A catalog or event line failed to parse; message carries the line number."""


class SequenceBuildError(ValueError):
    """An assembled example violates the sequence-construction invariants."""


@dataclass(frozen=True)
class ItemMeta:
    """One catalog row: an item and its categorical side features."""

    item_id: str
    leaf_category: str
    first_level_category: str
    brand: str
    shop: str


@dataclass(frozen=True)
class Event:
    """One behavior-log row."""

    user_id: str
    item_id: str
    timestamp: int
    event_type: str  # EVENT_IMPRESSION or EVENT_CLICK


@dataclass
class TrainingExample:
    """One anchor: the clicked/unclicked history and the next-click labels."""

    user_id: str
    anchor_time: int
    clicked_seq: list[str]
    unclicked_seq: list[str]
    labels: list[str]


@dataclass
class DatasetSplit:
    train: list[TrainingExample]
    test: list[TrainingExample]


@dataclass
class SequenceConfig:
    """Knobs for anchor placement and history windows."""

    label_k: int = 5                       # future clicks required per anchor
    max_clicked_len: int = 50              # keep the most recent clicks
    max_unclicked_len: int = 100           # keep the most recent skipped items
    unclicked_window_seconds: int = 259200  # trailing 3 days
    min_exposures: int = 2                 # impressions needed to count as skipped

    def validate(self) -> None:
        if self.label_k < 1:
            raise ValueError(f"label_k must be >= 1, got {self.label_k}")
        if self.max_clicked_len < 1:
            raise ValueError(f"max_clicked_len must be >= 1, got {self.max_clicked_len}")
        if self.max_unclicked_len < 0:
            raise ValueError(
                f"max_unclicked_len must be >= 0, got {self.max_unclicked_len}"
            )
        if self.unclicked_window_seconds < 1:
            raise ValueError(
                "unclicked_window_seconds must be >= 1, got "
                f"{self.unclicked_window_seconds}"
            )
        if self.min_exposures < 1:
            raise ValueError(f"min_exposures must be >= 1, got {self.min_exposures}")


def _iter_lines(stream: IO[bytes] | IO[str] | Iterable[bytes | str]):
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise LogFormatError(f"line {line_no}: not valid UTF-8: {exc}") from exc
        yield line_no, raw


def _parse_record(line_no: int, raw: str, kind: str, keys: tuple[str, ...]) -> dict:
    text = raw.strip()
    if not text:
        raise LogFormatError(f"{kind} line {line_no}: blank line")
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"{kind} line {line_no}: invalid JSON: {exc}") from exc
    if not isinstance(rec, dict):
        raise LogFormatError(f"{kind} line {line_no}: expected a JSON object")
    for key in keys:
        if key not in rec:
            raise LogFormatError(f"{kind} line {line_no}: missing key '{key}'")
    return rec


def parse_catalog(stream) -> list[ItemMeta]:
    """Parse catalog JSONL; duplicate item ids are an error. Empty input is []."""
    items: list[ItemMeta] = []
    seen: set[str] = set()
    for line_no, raw in _iter_lines(stream):
        rec = _parse_record(line_no, raw, "catalog", ("i", "leaf", "cat", "brand", "shop"))
        for key in ("i", "leaf", "cat", "brand", "shop"):
            if not isinstance(rec[key], str) or not rec[key]:
                raise LogFormatError(
                    f"catalog line {line_no}: key '{key}' must be a non-empty string"
                )
        if rec["i"] in seen:
            raise LogFormatError(
                f"catalog line {line_no}: duplicate item id '{rec['i']}'"
            )
        seen.add(rec["i"])
        items.append(
            ItemMeta(
                item_id=rec["i"],
                leaf_category=rec["leaf"],
                first_level_category=rec["cat"],
                brand=rec["brand"],
                shop=rec["shop"],
            )
        )
    return items


def parse_events(stream) -> list[Event]:
    """Parse event JSONL and return events sorted by (user_id, timestamp).

    The sort is stable, so same-timestamp events keep their file order.
    """
    events: list[Event] = []
    for line_no, raw in _iter_lines(stream):
        rec = _parse_record(line_no, raw, "events", ("u", "i", "t", "e"))
        if not isinstance(rec["u"], str) or not rec["u"]:
            raise LogFormatError(
                f"events line {line_no}: key 'u' must be a non-empty string"
            )
        if not isinstance(rec["i"], str) or not rec["i"]:
            raise LogFormatError(
                f"events line {line_no}: key 'i' must be a non-empty string"
            )
        if isinstance(rec["t"], bool) or not isinstance(rec["t"], int):
            raise LogFormatError(
                f"events line {line_no}: key 't' must be an integer timestamp"
            )
        if rec["e"] not in (EVENT_IMPRESSION, EVENT_CLICK):
            raise LogFormatError(
                f"events line {line_no}: unknown event type '{rec['e']}'"
            )
        events.append(
            Event(
                user_id=rec["u"],
                item_id=rec["i"],
                timestamp=rec["t"],
                event_type=rec["e"],
            )
        )
    events.sort(key=lambda e: (e.user_id, e.timestamp))
    return events


def catalog_record(item: ItemMeta) -> str:
    return json.dumps(
        {
            "i": item.item_id,
            "leaf": item.leaf_category,
            "cat": item.first_level_category,
            "brand": item.brand,
            "shop": item.shop,
        },
        separators=(",", ":"),
    )


def event_record(event: Event) -> str:
    return json.dumps(
        {
            "u": event.user_id,
            "i": event.item_id,
            "t": event.timestamp,
            "e": event.event_type,
        },
        separators=(",", ":"),
    )


def write_catalog(items: Iterable[ItemMeta], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(catalog_record(item) + "\n")


def write_events(events: Iterable[Event], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event_record(event) + "\n")


def read_catalog(path) -> list[ItemMeta]:
    with open(path, "rb") as fh:
        return parse_catalog(fh)


def read_events(path) -> list[Event]:
    with open(path, "rb") as fh:
        return parse_events(fh)


def _user_examples(
    user_id: str, events: list[Event], cfg: SequenceConfig
) -> list[TrainingExample]:
    clicks = [e for e in events if e.event_type == EVENT_CLICK]
    imps = [e for e in events if e.event_type == EVENT_IMPRESSION]
    if len(clicks) < cfg.label_k + 1:
        return []
    click_times = [e.timestamp for e in clicks]
    click_items = [e.item_id for e in clicks]

    # Sliding 3-day window over impressions and clicks. Anchors move forward
    # in time, so both streams advance with two pointers each; per item we
    # keep the in-window event times (appended in time order, popped from the
    # front as the window slides).
    imp_times: dict[str, list[int]] = defaultdict(list)
    imp_start: dict[str, int] = defaultdict(int)
    clk_in_window: dict[str, int] = defaultdict(int)
    clk_window: list[Event] = []
    imp_right = 0
    imp_left = 0
    clk_right = 0
    clk_left = 0

    out: list[TrainingExample] = []
    for pos, anchor_click in enumerate(clicks):
        t_click = anchor_click.timestamp
        anchor_time = t_click + 1
        after = bisect_right(click_times, t_click)
        if len(clicks) - after < cfg.label_k:
            continue
        labels = click_items[after : after + cfg.label_k]
        clicked_seq = click_items[:after][-cfg.max_clicked_len :]

        lo = anchor_time - cfg.unclicked_window_seconds
        # Window membership: lo <= t < anchor_time, i.e. t <= t_click.
        while imp_right < len(imps) and imps[imp_right].timestamp <= t_click:
            ev = imps[imp_right]
            imp_times[ev.item_id].append(ev.timestamp)
            imp_right += 1
        while imp_left < imp_right and imps[imp_left].timestamp < lo:
            ev = imps[imp_left]
            imp_start[ev.item_id] += 1
            imp_left += 1
        while clk_right < len(clicks) and clicks[clk_right].timestamp <= t_click:
            ev = clicks[clk_right]
            clk_in_window[ev.item_id] += 1
            clk_window.append(ev)
            clk_right += 1
        while clk_left < clk_right and clk_window[clk_left].timestamp < lo:
            clk_in_window[clk_window[clk_left].item_id] -= 1
            clk_left += 1

        eligible: list[tuple[int, str]] = []
        for item_id, times in imp_times.items():
            start = imp_start[item_id]
            count = len(times) - start
            if count < cfg.min_exposures:
                continue
            if clk_in_window.get(item_id, 0) > 0:
                continue
            eligible.append((times[-1], item_id))
        eligible.sort()
        unclicked_seq = [item for _, item in eligible[-cfg.max_unclicked_len :]]

        out.append(
            TrainingExample(
                user_id=user_id,
                anchor_time=anchor_time,
                clicked_seq=clicked_seq,
                unclicked_seq=unclicked_seq,
                labels=labels,
            )
        )
    return out


def build_examples(events: list[Event], cfg: SequenceConfig) -> list[TrainingExample]:
    """Assemble anchored examples from an event list.

    Events are sorted by (user_id, timestamp) first (stable, so ties keep
    input order), users are processed in ascending id order and anchors in
    time order; the output is a pure function of the input.
    """
    cfg.validate()
    ordered = sorted(events, key=lambda e: (e.user_id, e.timestamp))
    out: list[TrainingExample] = []
    for user_id, group in groupby(ordered, key=lambda e: e.user_id):
        out.extend(_user_examples(user_id, list(group), cfg))
    return out


def split_temporal(
    examples: list[TrainingExample], test_fraction: float
) -> DatasetSplit:
    """Hold out each user's latest ceil(test_fraction * n) anchors for test."""
    if not (0.0 <= test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    by_user: dict[str, list[TrainingExample]] = defaultdict(list)
    for ex in examples:
        by_user[ex.user_id].append(ex)
    train: list[TrainingExample] = []
    test: list[TrainingExample] = []
    for user_id in sorted(by_user):
        user_exs = sorted(by_user[user_id], key=lambda ex: ex.anchor_time)
        n_test = ceil(test_fraction * len(user_exs)) if test_fraction > 0 else 0
        cut = len(user_exs) - n_test
        train.extend(user_exs[:cut])
        test.extend(user_exs[cut:])
    return DatasetSplit(train=train, test=test)


def validate_example(
    ex: TrainingExample, cfg: SequenceConfig, known_items: set[str] | None = None
) -> None:
    """Check one example against the construction invariants."""
    if not ex.clicked_seq:
        raise SequenceBuildError(f"{ex.user_id}@{ex.anchor_time}: empty clicked_seq")
    if len(ex.clicked_seq) > cfg.max_clicked_len:
        raise SequenceBuildError(
            f"{ex.user_id}@{ex.anchor_time}: clicked_seq longer than "
            f"{cfg.max_clicked_len}"
        )
    if len(ex.unclicked_seq) > cfg.max_unclicked_len:
        raise SequenceBuildError(
            f"{ex.user_id}@{ex.anchor_time}: unclicked_seq longer than "
            f"{cfg.max_unclicked_len}"
        )
    if len(ex.labels) != cfg.label_k:
        raise SequenceBuildError(
            f"{ex.user_id}@{ex.anchor_time}: expected {cfg.label_k} labels, "
            f"got {len(ex.labels)}"
        )
    if len(set(ex.unclicked_seq)) != len(ex.unclicked_seq):
        raise SequenceBuildError(
            f"{ex.user_id}@{ex.anchor_time}: duplicate items in unclicked_seq"
        )
    if known_items is not None:
        for item in (*ex.clicked_seq, *ex.unclicked_seq, *ex.labels):
            if item not in known_items:
                raise SequenceBuildError(
                    f"{ex.user_id}@{ex.anchor_time}: unknown item id '{item}'"
                )


def validate_examples(
    examples: Iterable[TrainingExample],
    cfg: SequenceConfig,
    catalog: list[ItemMeta] | None = None,
) -> int:
    """Validate every example; returns the number checked."""
    known = {item.item_id for item in catalog} if catalog is not None else None
    n = 0
    for ex in examples:
        validate_example(ex, cfg, known)
        n += 1
    return n


def recount_unclicked(
    ex: TrainingExample, events: list[Event], cfg: SequenceConfig
) -> list[str]:
    """Recompute the unclicked sequence for one anchor by brute force.

    Independent of the sliding-window bookkeeping in build_examples; used to
    cross-check it.
    """
    lo = ex.anchor_time - cfg.unclicked_window_seconds
    hi = ex.anchor_time
    imp_count: dict[str, int] = defaultdict(int)
    latest_imp: dict[str, int] = {}
    clicked_in_window: set[str] = set()
    for ev in events:
        if ev.user_id != ex.user_id or not (lo <= ev.timestamp < hi):
            continue
        if ev.event_type == EVENT_IMPRESSION:
            imp_count[ev.item_id] += 1
            prev = latest_imp.get(ev.item_id)
            if prev is None or ev.timestamp > prev:
                latest_imp[ev.item_id] = ev.timestamp
        else:
            clicked_in_window.add(ev.item_id)
    eligible = sorted(
        (latest_imp[item], item)
        for item, count in imp_count.items()
        if count >= cfg.min_exposures and item not in clicked_in_window
    )
    return [item for _, item in eligible[-cfg.max_unclicked_len :]]


class CatalogIndex:
    """Row lookup for items and their categorical feature vocabularies.

    Item rows follow catalog order; feature vocabularies are the sorted
    distinct values of each side feature, so the index is a pure function of
    the catalog content.
    """

    def __init__(self, items: list[ItemMeta]):
        if not items:
            raise ValueError("catalog must contain at least one item")
        self.items = list(items)
        self.ids = [item.item_id for item in self.items]
        self.row = {item_id: i for i, item_id in enumerate(self.ids)}
        if len(self.row) != len(self.ids):
            raise ValueError("catalog contains duplicate item ids")
        self.vocab: dict[str, list[str]] = {
            "leaf": sorted({it.leaf_category for it in self.items}),
            "cat": sorted({it.first_level_category for it in self.items}),
            "brand": sorted({it.brand for it in self.items}),
            "shop": sorted({it.shop for it in self.items}),
        }
        lookups = {name: {v: i for i, v in enumerate(vals)} for name, vals in self.vocab.items()}
        rows = np.empty((len(self.items), 5), dtype=np.int64)
        for i, item in enumerate(self.items):
            rows[i, 0] = i
            rows[i, 1] = lookups["leaf"][item.leaf_category]
            rows[i, 2] = lookups["cat"][item.first_level_category]
            rows[i, 3] = lookups["brand"][item.brand]
            rows[i, 4] = lookups["shop"][item.shop]
        self.feature_rows = rows

    @property
    def n_items(self) -> int:
        return len(self.items)

    def vocab_sizes(self) -> dict[str, int]:
        return {
            "item": self.n_items,
            "leaf": len(self.vocab["leaf"]),
            "cat": len(self.vocab["cat"]),
            "brand": len(self.vocab["brand"]),
            "shop": len(self.vocab["shop"]),
        }

    def require(self, item_id: str) -> int:
        try:
            return self.row[item_id]
        except KeyError:
            raise LookupError(f"unknown item id '{item_id}'") from None
