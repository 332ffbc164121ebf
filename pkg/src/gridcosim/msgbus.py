"""Topic-based publish/subscribe bus with MQTT topic and wildcard semantics.

Only the topic/wildcard rules follow MQTT. Delivery is QoS-0 (at most once),
with no retained messages, sessions or keep-alive handshakes. Every payload is
tagged with a schema that is fixed by the topic namespace.
"""

from __future__ import annotations

import collections
import dataclasses
import logging
import math
import threading
from typing import Any, Mapping

log = logging.getLogger(__name__)


class BusError(Exception):
    pass


class ValidationError(BusError, ValueError):
    pass


class UnavailableError(BusError):
    pass


class NotFoundError(BusError, LookupError):
    pass


# ---------------------------------------------------------------------------
# topics

def split_topic(topic: str) -> list[str]:
    if not isinstance(topic, str) or topic == "":
        raise ValidationError("topic must be a non-empty string")
    return topic.split("/")


def validate_topic(topic: str) -> list[str]:
    """Check a publish topic (no wildcards) and return its segments."""
    segments = split_topic(topic)
    if "+" in topic or "#" in topic:
        raise ValidationError(f"publish topic {topic!r} contains a wildcard")
    return segments


def validate_filter(filter: str) -> list[str]:
    """Check a subscription filter and return its segments.

    ``+`` must occupy a whole segment; ``#`` must be a whole segment and the
    last one.
    """
    segments = split_topic(filter)
    last = len(segments) - 1
    for i, seg in enumerate(segments):
        if seg == "#":
            if i != last:
                raise ValidationError(f"filter {filter!r}: '#' must be the final segment")
        elif seg == "+":
            continue
        elif "#" in seg or "+" in seg:
            raise ValidationError(f"filter {filter!r}: wildcard mixed into segment {seg!r}")
    return segments


def topic_matches(filter: str, topic: str) -> bool:
    """True iff ``topic`` matches ``filter`` under MQTT ``+``/``#`` rules."""
    fsegs = validate_filter(filter)
    tsegs = validate_topic(topic)
    n = len(tsegs)
    for i, fs in enumerate(fsegs):
        if fs == "#":
            # matches the parent level too: 'a/#' matches 'a'
            return True
        if i >= n:
            return False
        if fs != "+" and fs != tsegs[i]:
            return False
    return len(fsegs) == n


# ---------------------------------------------------------------------------
# payload schemas

@dataclasses.dataclass(frozen=True)
class Schema:
    name: str
    filter: str
    required: Mapping[str, type]
    optional: Mapping[str, type] = dataclasses.field(default_factory=dict)

    def coerce(self, values: Mapping[str, Any]) -> dict[str, Any]:
        out = {}
        for key, value in values.items():
            kind = self.required.get(key) or self.optional.get(key)
            if kind is None:
                raise ValidationError(f"schema {self.name!r} has no field {key!r}")
            out[key] = _coerce(self.name, key, kind, value)
        missing = [k for k in self.required if k not in out]
        if missing:
            raise ValidationError(f"schema {self.name!r} missing field(s) {missing}")
        return out


def _coerce(schema: str, key: str, kind: type, value: Any) -> Any:
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{schema}.{key} must be numeric, got {value!r}")
        value = float(value)
        if math.isnan(value):
            raise ValidationError(f"{schema}.{key} is NaN")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ValidationError(f"{schema}.{key} must be an integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ValidationError(f"{schema}.{key} must be a string, got {value!r}")
        return value
    raise TypeError(kind)


SCHEMAS: tuple[Schema, ...] = (
    Schema("tick", "sync/tick", {"tick": int, "sim_time_s": float, "step_s": float}),
    Schema("done", "sync/done/+", {"tick": int}, {"status": str}),
    Schema("frequency", "ts/+/freq", {"f_hz": float}),
    Schema("voltage", "ts/+/voltage", {"v_pu": float}),
    Schema("headpower", "ds/+/headpower", {"p_mw": float, "q_mvar": float}, {"losses_kw": float}),
    Schema("agc", "derms/agc", {"r_pu": float}, {"request_kw": float}),
    Schema("setpoint", "derms/setpoint/+", {"p_kw": float}),
    Schema("control", "derms/control/+", {"verb": str},
           {"db_of_hz": float, "db_uf_hz": float, "k_of": float, "k_uf": float}),
    Schema("der_output", "der/+/output", {"p_kw": float},
           {"q_kvar": float, "p_available_kw": float}),
)
_schema_cache: dict[str, Schema | None] = {}


def schema_for(topic: str) -> Schema:
    """Return the payload schema fixed by the topic's namespace."""
    try:
        found = _schema_cache[topic]
    except KeyError:
        found = None
        for schema in SCHEMAS:
            if topic_matches(schema.filter, topic):
                found = schema
                break
        if len(_schema_cache) < 100_000:
            _schema_cache[topic] = found
    if found is None:
        raise ValidationError(f"topic {topic!r} is outside every known namespace")
    return found


@dataclasses.dataclass(frozen=True, slots=True)
class Envelope:
    """A timestamped, topic-addressed message."""

    topic: str
    tick: int
    publisher_id: str
    values: Mapping[str, Any]
    schema: str

    @classmethod
    def create(cls, topic: str, tick: int, publisher_id: str, /, **values: Any) -> "Envelope":
        validate_topic(topic)
        if isinstance(tick, bool) or not isinstance(tick, int) or tick < 0:
            raise ValidationError(f"tick must be a non-negative integer, got {tick!r}")
        if not publisher_id:
            raise ValidationError("publisher_id must be non-empty")
        schema = schema_for(topic)
        return cls(topic, tick, publisher_id, schema.coerce(values), schema.name)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def to_wire(self) -> dict[str, Any]:
        return {"topic": self.topic, "tick": self.tick, "publisher_id": self.publisher_id,
                "schema": self.schema, "values": dict(self.values)}

    @classmethod
    def from_wire(cls, obj: Mapping[str, Any]) -> "Envelope":
        try:
            env = cls.create(obj["topic"], obj["tick"], obj["publisher_id"], **obj["values"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed envelope: {exc}") from None
        if obj.get("schema", env.schema) != env.schema:
            raise ValidationError(
                f"schema {obj['schema']!r} does not match namespace of {env.topic!r}")
        return env


@dataclasses.dataclass(frozen=True)
class DeliveryReport:
    count: int


@dataclasses.dataclass(frozen=True)
class Subscription:
    subscriber_id: str
    filter: str


# ---------------------------------------------------------------------------
# delivery

class Mailbox:
    """FIFO delivery queue for one subscriber. Puts are serialized."""

    def __init__(self) -> None:
        self._items: collections.deque[Envelope] = collections.deque()
        self._cond = threading.Condition()
        self.closed = False

    def put(self, envelope: Envelope) -> None:
        with self._cond:
            self._items.append(envelope)
            self._cond.notify()

    def get(self, timeout: float | None = None) -> Envelope | None:
        with self._cond:
            if not self._items and not self.closed:
                self._cond.wait(timeout)
            return self._items.popleft() if self._items else None

    def drain(self) -> list[Envelope]:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            return items

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        return len(self._items)


class _TrieNode:
    __slots__ = ("children", "subscribers")

    def __init__(self) -> None:
        self.children: dict[str, _TrieNode] = {}
        self.subscribers: set[str] = set()


class Broker:
    """In-process broker. Safe for concurrent publishers and subscribers."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._root = _TrieNode()
        self._subscriptions: set[Subscription] = set()
        self._mailboxes: dict[str, Mailbox] = {}
        self._route_cache: dict[str, tuple[str, ...]] = {}
        self._last_tick: dict[str, int] = {}
        self._running = True

    # -- subscriptions

    def mailbox(self, subscriber_id: str) -> Mailbox:
        with self._lock:
            box = self._mailboxes.get(subscriber_id)
            if box is None:
                box = self._mailboxes[subscriber_id] = Mailbox()
            return box

    def attach(self, subscriber_id: str, mailbox: Any) -> None:
        """Route ``subscriber_id``'s deliveries to ``mailbox`` (anything with ``put``)."""
        with self._lock:
            self._mailboxes[subscriber_id] = mailbox

    def subscribe(self, subscriber_id: str, filter: str) -> Subscription:
        segments = validate_filter(filter)
        sub = Subscription(subscriber_id, filter)
        with self._lock:
            self._check_running()
            self.mailbox(subscriber_id)
            if sub in self._subscriptions:
                return sub
            node = self._root
            for seg in segments:
                node = node.children.setdefault(seg, _TrieNode())
            node.subscribers.add(subscriber_id)
            self._subscriptions.add(sub)
            self._route_cache.clear()
        return sub

    def unsubscribe(self, subscription: Subscription) -> None:
        with self._lock:
            if subscription not in self._subscriptions:
                raise NotFoundError(f"no subscription {subscription}")
            self._subscriptions.discard(subscription)
            path = [self._root]
            for seg in subscription.filter.split("/"):
                path.append(path[-1].children[seg])
            path[-1].subscribers.discard(subscription.subscriber_id)
            self._route_cache.clear()

    def subscriptions(self, subscriber_id: str | None = None) -> list[Subscription]:
        with self._lock:
            return sorted((s for s in self._subscriptions
                           if subscriber_id is None or s.subscriber_id == subscriber_id),
                          key=lambda s: (s.subscriber_id, s.filter))

    def disconnect(self, subscriber_id: str) -> None:
        with self._lock:
            for sub in self.subscriptions(subscriber_id):
                self.unsubscribe(sub)
            box = self._mailboxes.pop(subscriber_id, None)
        if box is not None and hasattr(box, "close"):
            box.close()

    # -- routing

    def route(self, topic: str) -> tuple[str, ...]:
        """Subscriber ids whose filters match ``topic``, sorted, without duplicates."""
        with self._lock:
            hit = self._route_cache.get(topic)
            if hit is None:
                found: set[str] = set()
                _collect(self._root, topic.split("/"), 0, found)
                hit = self._route_cache[topic] = tuple(sorted(found))
            return hit

    def publish(self, envelope: Envelope) -> DeliveryReport:
        with self._lock:
            self._check_running()
            last = self._last_tick.get(envelope.publisher_id)
            if last is not None and envelope.tick < last:
                raise ValidationError(
                    f"publisher {envelope.publisher_id!r} tick went backwards ({last} -> {envelope.tick})")
            self._last_tick[envelope.publisher_id] = envelope.tick
            targets = [self._mailboxes[sid] for sid in self.route(envelope.topic)]
            # deliver under the lock so per-publisher order holds in every queue
            for box in targets:
                box.put(envelope)
        return DeliveryReport(len(targets))

    # -- lifecycle

    def _check_running(self) -> None:
        if not self._running:
            raise UnavailableError("broker is shut down")

    @property
    def running(self) -> bool:
        return self._running

    def shutdown(self) -> None:
        with self._lock:
            self._running = False
            boxes = list(self._mailboxes.values())
        for box in boxes:
            if hasattr(box, "close"):
                box.close()

    def connect(self, client_id: str) -> "LocalClient":
        return LocalClient(self, client_id)


def _collect(node: _TrieNode, segs: list[str], i: int, found: set[str]) -> None:
    hash_node = node.children.get("#")
    if hash_node is not None:
        found.update(hash_node.subscribers)
    if i == len(segs):
        found.update(node.subscribers)
        return
    child = node.children.get(segs[i])
    if child is not None:
        _collect(child, segs, i + 1, found)
    plus = node.children.get("+")
    if plus is not None:
        _collect(plus, segs, i + 1, found)


class LocalClient:
    """A component's handle on an in-process broker."""

    def __init__(self, broker: Broker, client_id: str) -> None:
        self.broker = broker
        self.client_id = client_id
        self._box = broker.mailbox(client_id)

    def subscribe(self, filter: str) -> Subscription:
        return self.broker.subscribe(self.client_id, filter)

    def unsubscribe(self, subscription: Subscription) -> None:
        self.broker.unsubscribe(subscription)

    def publish(self, topic: str, tick: int, /, **values: Any) -> DeliveryReport:
        return self.broker.publish(Envelope.create(topic, tick, self.client_id, **values))

    def publish_envelope(self, envelope: Envelope) -> DeliveryReport:
        return self.broker.publish(envelope)

    def get(self, timeout: float | None = None) -> Envelope | None:
        return self._box.get(timeout)

    def drain(self) -> list[Envelope]:
        return self._box.drain()

    def close(self) -> None:
        self.broker.disconnect(self.client_id)

