"""Event logs, prefix-sample construction, and the synthetic clickstream.

Raw interaction events arrive as JSONL with second-resolution timestamps.
Samples carry times in fractional days relative to their own first
behavior, which keeps integration spans O(1-30) and makes per-day drift
rates directly interpretable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

SECONDS_PER_DAY = 86400.0
DEFAULT_MAX_LEN = 100


class DataError(ValueError):
    """Malformed input data or an impossible sampling request."""


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    category_id: str
    timestamp: float  # seconds since epoch

    def __post_init__(self):
        if not self.user_id or not self.item_id or not self.category_id:
            raise DataError("event ids must be non-empty")
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise DataError(f"event timestamp must be finite and non-negative, got {self.timestamp}")


@dataclass(frozen=True)
class Sample:
    """One training/eval instance: behavior prefix, target, next time, label."""

    profile_id: str
    behaviors: tuple  # of (item_id, category_id, time_days)
    target_item: tuple  # (item_id, category_id)
    next_time: float
    label: int

    def __post_init__(self):
        if not (1 <= len(self.behaviors) <= DEFAULT_MAX_LEN):
            raise DataError(f"sample must have 1..{DEFAULT_MAX_LEN} behaviors, got {len(self.behaviors)}")
        times = [b[2] for b in self.behaviors]
        if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
            raise DataError("behavior times must be non-decreasing")
        if self.next_time < times[-1]:
            raise DataError("next_time must not precede the last behavior")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "profile_id": self.profile_id,
                "behaviors": [[i, c, t] for i, c, t in self.behaviors],
                "target_item": list(self.target_item),
                "next_time": self.next_time,
                "label": self.label,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Sample":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed sample JSON: {e}") from None
        try:
            return cls(
                profile_id=obj["profile_id"],
                behaviors=tuple((b[0], b[1], float(b[2])) for b in obj["behaviors"]),
                target_item=(obj["target_item"][0], obj["target_item"][1]),
                next_time=float(obj["next_time"]),
                label=int(obj["label"]),
            )
        except (KeyError, IndexError, TypeError) as e:
            raise DataError(f"sample JSON missing field: {e}") from None


_EVENT_KEYS = ("user_id", "item_id", "category_id", "timestamp")


def parse_events(stream) -> dict[str, list[InteractionEvent]]:
    """Parse JSONL events, grouping by user and sorting by time within user.

    ``stream`` is an iterable of lines (an open file works).  Ties keep
    input order.  Errors carry the 1-based line number.
    """
    by_user: dict[str, list[InteractionEvent]] = {}
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
        for key in _EVENT_KEYS:
            if key not in obj:
                raise DataError(f"line {lineno}: missing key {key!r}")
        ev = InteractionEvent(
            user_id=str(obj["user_id"]),
            item_id=str(obj["item_id"]),
            category_id=str(obj["category_id"]),
            timestamp=float(obj["timestamp"]),
        )
        by_user.setdefault(ev.user_id, []).append(ev)
    for user in by_user:
        by_user[user].sort(key=lambda e: e.timestamp)  # stable: ties keep input order
    return by_user


def item_category_map(events_by_user: dict[str, list[InteractionEvent]]) -> dict[str, str]:
    """First-seen category per item, scanning users then events in order."""
    mapping: dict[str, str] = {}
    for events in events_by_user.values():
        for ev in events:
            mapping.setdefault(ev.item_id, ev.category_id)
    return mapping


def normalize_timestamps(sample: Sample, origin: float) -> Sample:
    """Rewrite raw second timestamps as fractional days past ``origin``."""
    behaviors = tuple((i, c, (t - origin) / SECONDS_PER_DAY) for i, c, t in sample.behaviors)
    return replace(sample, behaviors=behaviors, next_time=(sample.next_time - origin) / SECONDS_PER_DAY)


def _make_sample(user_id, prefix, target_event, max_len, label, target_override=None):
    prefix = prefix[-max_len:]
    origin = prefix[0].timestamp
    target = target_override if target_override is not None else (target_event.item_id, target_event.category_id)
    raw = Sample(
        profile_id=user_id,
        behaviors=tuple((e.item_id, e.category_id, e.timestamp) for e in prefix),
        target_item=target,
        next_time=target_event.timestamp,
        label=label,
    )
    return normalize_timestamps(raw, origin)


def build_samples(
    events_by_user: dict[str, list[InteractionEvent]],
    max_len: int = DEFAULT_MAX_LEN,
    neg_per_pos: int = 1,
    rng_seed: int = 0,
) -> tuple[list[Sample], list[Sample]]:
    """Build (train, test) prefix samples with uniform negative sampling.

    For a user with events e_1..e_N, training positives use prefixes of
    length k = 1..N-2 with target e_{k+1}; the test positive uses the
    length-(N-1) prefix with target e_N.  Every positive is paired with
    ``neg_per_pos`` negatives sharing its prefix and next_time, the target
    item drawn uniformly from the vocabulary minus the user's own items.
    """
    categories = item_category_map(events_by_user)
    vocab = sorted(categories.keys())
    rng = np.random.default_rng(rng_seed)
    train: list[Sample] = []
    test: list[Sample] = []

    def negatives(user_items, prefix, target_event, user_id):
        pool = [it for it in vocab if it not in user_items]
        if not pool:
            raise DataError(f"no negative candidates left for user {user_id!r}")
        out = []
        for _ in range(neg_per_pos):
            item = pool[int(rng.integers(len(pool)))]
            out.append(
                _make_sample(
                    user_id, prefix, target_event, max_len, label=0,
                    target_override=(item, categories[item]),
                )
            )
        return out

    for user_id, events in events_by_user.items():
        n = len(events)
        if n < 2:
            continue
        user_items = frozenset(e.item_id for e in events)
        for k in range(1, n - 1):
            prefix, target = events[:k], events[k]
            train.append(_make_sample(user_id, prefix, target, max_len, label=1))
            train.extend(negatives(user_items, prefix, target, user_id))
        prefix, target = events[: n - 1], events[n - 1]
        test.append(_make_sample(user_id, prefix, target, max_len, label=1))
        test.extend(negatives(user_items, prefix, target, user_id))
    return train, test


# ---------------------------------------------------------------------------
# synthetic time-dependent clickstream


def _default_pool(prefix: str, size: int) -> tuple:
    return tuple(f"{prefix}{i:03d}" for i in range(size))


@dataclass(frozen=True)
class SyntheticConfig:
    """Two item pools whose attractiveness alternates with a daily phase."""

    num_users: int = 100
    events_per_user: int = 30
    period: float = 1.0  # days
    phases: tuple = (0.0, 0.5)  # fractions of the period, assigned round-robin
    pool_a: tuple = field(default_factory=lambda: _default_pool("a", 50))
    pool_b: tuple = field(default_factory=lambda: _default_pool("b", 50))
    category_a: str = "catA"
    category_b: str = "catB"
    preference_strength: float = 0.9
    horizon_periods: int = 30
    seed: int = 0

    def __post_init__(self):
        if not (0.5 < self.preference_strength <= 1.0):
            raise DataError(f"preference_strength must lie in (0.5, 1.0], got {self.preference_strength}")
        if not self.pool_a or not self.pool_b or set(self.pool_a) & set(self.pool_b):
            raise DataError("item pools must be non-empty and disjoint")
        if self.num_users < 1 or self.events_per_user < 1 or self.period <= 0:
            raise DataError("num_users, events_per_user and period must be positive")


@dataclass(frozen=True)
class Impression:
    """Ground-truth record of one generated click (for audit and tests)."""

    user_id: str
    time_days: float
    preferred_pool: str  # "a" or "b"
    clicked_pool: str


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[InteractionEvent], list[Impression]]:
    """Generate clicks whose pool preference oscillates with time of day.

    Each user gets a phase p from cfg.phases round-robin.  At day-time t the
    preferred pool is pool_a when sin(2*pi*(t - p*period)/period) > 0, else
    pool_b; the clicked item comes from the preferred pool with probability
    ``preference_strength``.  Deterministic given the seed.
    """
    rng = np.random.default_rng(cfg.seed)
    phases = tuple(cfg.phases)
    events: list[InteractionEvent] = []
    impressions: list[Impression] = []
    horizon = cfg.horizon_periods * cfg.period

    for u in range(cfg.num_users):
        user_id = f"u{u:05d}"
        phase = phases[u % len(phases)]
        times = np.sort(rng.uniform(0.0, horizon, size=cfg.events_per_user))
        for t in times:
            prefers_a = math.sin(2.0 * math.pi * (t - phase * cfg.period) / cfg.period) > 0.0
            take_preferred = rng.random() < cfg.preference_strength
            use_a = prefers_a if take_preferred else not prefers_a
            pool, category = (cfg.pool_a, cfg.category_a) if use_a else (cfg.pool_b, cfg.category_b)
            item = pool[int(rng.integers(len(pool)))]
            events.append(
                InteractionEvent(
                    user_id=user_id,
                    item_id=item,
                    category_id=category,
                    timestamp=float(t) * SECONDS_PER_DAY,
                )
            )
            impressions.append(
                Impression(
                    user_id=user_id,
                    time_days=float(t),
                    preferred_pool="a" if prefers_a else "b",
                    clicked_pool="a" if use_a else "b",
                )
            )
    return events, impressions


# ---------------------------------------------------------------------------
# serialization helpers


def write_events_jsonl(events, path):
    with open(path, "w", encoding="utf-8") as f:
        for ev in events:
            f.write(
                json.dumps(
                    {
                        "user_id": ev.user_id,
                        "item_id": ev.item_id,
                        "category_id": ev.category_id,
                        "timestamp": ev.timestamp,
                    }
                )
                + "\n"
            )


def load_events_jsonl(path) -> dict[str, list[InteractionEvent]]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_events(f)


def write_samples_jsonl(samples, path):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(s.to_json() + "\n")


def load_samples_jsonl(path) -> list[Sample]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(Sample.from_json(line))
            except DataError as e:
                raise DataError(f"line {lineno}: {e}") from None
    return out
