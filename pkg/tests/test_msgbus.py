import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcosim.msgbus import (
    Broker,
    Envelope,
    NotFoundError,
    Subscription,
    UnavailableError,
    ValidationError,
    topic_matches,
)
from gridcosim.wire import BusServer, RemoteClient


def reference_match(filter_segs, topic_segs):
    """Recursive MQTT matcher written straight from the wildcard rules."""
    if not filter_segs:
        return not topic_segs
    head, rest = filter_segs[0], filter_segs[1:]
    if head == "#":
        return True
    if not topic_segs:
        return False
    if head == "+" or head == topic_segs[0]:
        return reference_match(rest, topic_segs[1:])
    return False


LABELS = ["a", "b", "grid", "ts", "area1", "freq", ""]


def random_topic(rng):
    return "/".join(rng.choice(LABELS) for _ in range(rng.randint(1, 5))) or "a"


def random_filter(rng):
    n = rng.randint(1, 5)
    segs = [rng.choice(LABELS + ["+", "+"]) for _ in range(n)]
    if rng.random() < 0.3:
        segs[-1] = "#"
    return "/".join(segs) or "a"


@pytest.mark.parametrize("flt,topic,expected", [
    ("grid/area1/freq", "grid/area1/freq", True),
    ("grid/+/freq", "grid/area1/freq", True),
    ("derms/#", "grid/area1/freq", False),
    ("grid/#", "grid", True),
    ("#", "a/b", True),
    ("+", "a/b", False),
    ("a/+", "a/", True),
])
def test_topic_matches_examples(flt, topic, expected):
    assert topic_matches(flt, topic) is expected


@pytest.mark.parametrize("flt", ["a/#/b", "a+b", "a/b#", "", "#/x"])
def test_malformed_filter_rejected(flt):
    with pytest.raises(ValidationError):
        topic_matches(flt, "a/b")


def test_wildcard_in_publish_topic_rejected():
    with pytest.raises(ValidationError):
        topic_matches("a/+", "a/+")


def test_topic_matches_agrees_with_reference_10k():
    rng = random.Random(1234)
    for _ in range(10_000):
        topic, flt = random_topic(rng), random_filter(rng)
        assert topic_matches(flt, topic) == reference_match(flt.split("/"), topic.split("/")), (flt, topic)


def env(topic="ts/area1/freq", tick=0, pub="tsnet", **values):
    values = values or {"f_hz": 60.0}
    return Envelope.create(topic, tick, pub, **values)


def test_publish_with_no_subscribers():
    assert Broker().publish(env()).count == 0


def test_two_overlapping_filters_count_two_subscribers():
    broker = Broker()
    broker.subscribe("s1", "ts/+/freq")
    broker.subscribe("s2", "ts/#")
    assert broker.publish(env()).count == 2


def test_fifo_order_per_publisher():
    broker = Broker()
    broker.subscribe("s", "ts/#")
    broker.publish(env(tick=5))
    broker.publish(env(tick=6))
    assert [e.tick for e in broker.mailbox("s").drain()] == [5, 6]


def test_subscribe_unsubscribe_and_dedup():
    broker = Broker()
    sub = broker.subscribe("s", "ts/+/freq")
    assert broker.subscribe("s", "ts/+/freq") == sub
    broker.subscribe("s", "ts/#")  # second matching filter, still one delivery
    assert broker.publish(env()).count == 1
    assert len(broker.mailbox("s").drain()) == 1
    broker.unsubscribe(sub)
    broker.unsubscribe(Subscription("s", "ts/#"))
    assert broker.publish(env(tick=1)).count == 0
    with pytest.raises(NotFoundError):
        broker.unsubscribe(sub)


def test_schema_mismatch_rejected():
    with pytest.raises(ValidationError):
        Envelope.create("ts/area1/freq", 0, "tsnet", v_pu=1.0)
    with pytest.raises(ValidationError):
        Envelope.create("ts/area1/freq", 0, "tsnet", f_hz="sixty")
    with pytest.raises(ValidationError):
        Envelope.create("nowhere/x", 0, "tsnet")
    with pytest.raises(ValidationError):
        Envelope.create("ts/+/freq", 0, "tsnet", f_hz=60.0)


def test_tick_monotone_per_publisher():
    broker = Broker()
    broker.publish(env(tick=3))
    with pytest.raises(ValidationError):
        broker.publish(env(tick=2))
    broker.publish(env(tick=1, pub="other"))


def test_shutdown_makes_broker_unavailable():
    broker = Broker()
    broker.shutdown()
    with pytest.raises(UnavailableError):
        broker.publish(env())


raw_topics = st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=4).map("/".join)
raw_filters = st.lists(st.sampled_from(["a", "b", "c", "+"]), min_size=1, max_size=4).flatmap(
    lambda segs: st.sampled_from(["/".join(segs), "/".join(segs[:-1] + ["#"])]))


@settings(max_examples=500, deadline=None)
@given(subs=st.lists(st.tuples(st.sampled_from(["s1", "s2", "s3"]), raw_filters), max_size=8),
       topic=raw_topics)
def test_trie_routing_matches_brute_force(subs, topic):
    broker = Broker()
    for sid, flt in subs:
        broker.subscribe(sid, flt)
    assert set(broker.route(topic)) == {sid for sid, flt in subs if topic_matches(flt, topic)}


NAMESPACE_TOPICS = {
    "ts/a1/freq": {"f_hz": 60.0}, "ts/a2/freq": {"f_hz": 60.0}, "ts/b1/voltage": {"v_pu": 1.0},
    "ds/g1/headpower": {"p_mw": 1.0, "q_mvar": 0.0}, "der/d1/output": {"p_kw": 1.0},
    "der/d2/output": {"p_kw": 2.0}, "derms/agc": {"r_pu": 0.1}, "derms/setpoint/d1": {"p_kw": 3.0},
}
ns_filters = st.lists(st.sampled_from(["ts", "ds", "der", "derms", "a1", "d1", "freq", "output", "+"]),
                      min_size=1, max_size=3).flatmap(
    lambda segs: st.sampled_from(["/".join(segs), "/".join(segs[:-1] + ["#"])]))


@settings(max_examples=300, deadline=None)
@given(subs=st.lists(st.tuples(st.sampled_from(["s1", "s2", "s3"]), ns_filters), max_size=8),
       published=st.lists(st.tuples(st.sampled_from(["p1", "p2"]), st.sampled_from(sorted(NAMESPACE_TOPICS))),
                          max_size=25))
def test_delivery_completeness_order_and_no_crosstalk(subs, published):
    broker = Broker()
    for sid, flt in subs:
        broker.subscribe(sid, flt)
    sent = []
    for i, (pub, topic) in enumerate(published):
        e = Envelope.create(topic, i, pub, **NAMESPACE_TOPICS[topic])
        report = broker.publish(e)
        expected = {sid for sid, flt in subs if topic_matches(flt, topic)}
        assert report.count == len(expected)
        sent.append((e, expected))
    for sid in {sid for sid, _ in subs}:
        got = broker.mailbox(sid).drain()
        want = [e for e, expected in sent if sid in expected]
        # exactly once each, in publish order, nothing unmatched
        assert got == want


def test_concurrent_publishers_keep_per_publisher_order():
    broker = Broker()
    broker.subscribe("s", "der/#")

    def worker(pub):
        for t in range(500):
            broker.publish(Envelope.create(f"der/{pub}/output", t, pub, p_kw=float(t)))

    threads = [threading.Thread(target=worker, args=(f"p{i}",)) for i in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    got = broker.mailbox("s").drain()
    assert len(got) == 2000
    for i in range(4):
        assert [e.tick for e in got if e.publisher_id == f"p{i}"] == list(range(500))


@pytest.fixture
def server():
    srv = BusServer().start()
    yield srv
    srv.stop()


def test_wire_roundtrip(server):
    host, port = server.address
    sub = RemoteClient(host, port, "listener")
    pub = RemoteClient(host, port, "tsnet")
    try:
        sub.subscribe("ts/+/freq")
        assert pub.publish("ts/area1/freq", 0, f_hz=59.98).count == 1
        assert pub.publish("ts/area1/voltage", 0, v_pu=1.0).count == 0
        got = sub.get(timeout=5)
        assert got == Envelope.create("ts/area1/freq", 0, "tsnet", f_hz=59.98)
        with pytest.raises(ValidationError):
            sub.subscribe("a/#/b")
        with pytest.raises(ValidationError):
            pub.publish_envelope(Envelope.create("ts/area1/freq", 0, "impostor", f_hz=60.0))
        with pytest.raises(NotFoundError):
            sub.unsubscribe(Subscription("listener", "never/subscribed"))
    finally:
        sub.close()
        pub.close()


def test_wire_frame_is_length_prefixed_json():
    from gridcosim.wire import encode_frame
    import json
    import struct
    frame = encode_frame(Envelope.create("derms/agc", 3, "derms", r_pu=0.5).to_wire())
    (n,) = struct.unpack(">I", frame[:4])
    assert n == len(frame) - 4
    assert json.loads(frame[4:].decode("utf-8")) == {
        "topic": "derms/agc", "tick": 3, "publisher_id": "derms", "schema": "agc", "values": {"r_pu": 0.5}}
