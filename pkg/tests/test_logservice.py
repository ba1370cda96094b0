from __future__ import annotations

import json
import threading
import urllib.request

import pytest
from hypothesis import given, settings, strategies as st

import oracle
from helpers import FP, NOW, OPERATOR, digest, endorsement
from cctransparency.encoding import b64d
from cctransparency.logservice import (
    CLIENT_ID_HEADER,
    MAX_ENTRIES_PER_REQUEST,
    LogClient,
    LogRequestError,
    LogService,
    LogUnavailable,
    Mode,
    ServiceConfig,
    make_server,
)
from cctransparency.merkle_log import MerkleLog, verify_checkpoint, verify_consistency, verify_inclusion
from cctransparency.kernels import leaf_hash

ORIGIN = "test/log"


def payload(i: int) -> bytes:
    return json.dumps({"n": i}).encode()


def service(**kw) -> LogService:
    return LogService(ServiceConfig(origin=ORIGIN, **kw), OPERATOR, clock=lambda: NOW)


@pytest.fixture
def http_service():
    svc = service(mode=Mode.SPLIT_VIEW, fork_at=2, victim_clients=frozenset({"victim"}))
    server = make_server(svc, ("127.0.0.1", 0))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    yield svc, f"http://{host}:{port}"
    server.shutdown()
    server.server_close()


def test_http_roundtrip(http_service):
    svc, url = http_service
    client = LogClient.http(url, "owner")
    for i in range(5):
        assert client.append(payload(i)) == i
    cp = client.checkpoint()
    assert cp.tree_size == 5 and verify_checkpoint(cp, OPERATOR.public_key)
    assert client.entries(0, 5) == [payload(i) for i in range(5)]
    proof = client.inclusion_proof(3, 5)
    assert verify_inclusion(leaf_hash(payload(3)), proof, cp.root_hash)
    old = svc.main.root(2)
    assert verify_consistency(old, cp.root_hash, client.consistency_proof(2, 5))


def test_http_client_id_selects_branch(http_service):
    svc, url = http_service
    owner = LogClient.http(url, "owner")
    victim = LogClient.http(url, "victim")
    for i in range(2):
        owner.append(payload(i))
    owner.append(payload(100))
    victim.append(payload(200))
    a, b = owner.checkpoint(), victim.checkpoint()
    assert a.tree_size == b.tree_size == 3 and a.root_hash != b.root_hash
    assert victim.entries(2, 3) == [payload(200)]


def test_http_errors(http_service):
    _, url = http_service
    client = LogClient.http(url)
    with pytest.raises(LogRequestError) as exc:
        client.inclusion_proof(0, 1)
    assert exc.value.status == 404
    for body in [b"", b"[1]", b"not json", b'{"a":1,"a":2}']:
        with pytest.raises(LogRequestError) as exc:
            client.append(body)
        assert exc.value.status == 400
    req = urllib.request.Request(url + "/checkpoint", data=b"{}", method="POST")
    with pytest.raises(urllib.error.HTTPError) as http_exc:
        urllib.request.urlopen(req, timeout=5)
    assert http_exc.value.code == 405
    with pytest.raises(urllib.error.HTTPError) as http_exc:
        urllib.request.urlopen(url + "/nope", timeout=5)
    assert http_exc.value.code == 404
    with pytest.raises(urllib.error.HTTPError) as http_exc:
        urllib.request.urlopen(url + "/entries?start=x&end=1", timeout=5)
    assert http_exc.value.code == 400


def test_unreachable_raises_log_unavailable():
    with pytest.raises(LogUnavailable):
        LogClient.http("http://127.0.0.1:9", timeout=0.5).checkpoint()


@pytest.mark.parametrize(
    "path,query,status",
    [
        ("/proof/inclusion", {"index": "0"}, 400),
        ("/proof/inclusion", {"index": "5", "size": "3"}, 404),
        ("/proof/consistency", {"from": "3", "to": "2"}, 404),
        ("/proof/consistency", {"from": "1", "to": "9"}, 404),
        ("/entries", {"start": "2", "end": "1"}, 400),
        ("/entries", {"start": "0", "end": "9"}, 404),
        ("/entries", {"start": "-1", "end": "1"}, 400),
    ],
)
def test_bad_requests(path, query, status):
    svc = service()
    for i in range(3):
        svc.append(payload(i))
    got, body = svc.handle("GET", path, query, {})
    assert got == status and "error" in json.loads(body)


def test_entries_page_limit():
    svc = service()
    for i in range(MAX_ENTRIES_PER_REQUEST + 5):
        svc.append(payload(i))
    status, _ = svc.handle("GET", "/entries", {"start": "0", "end": str(MAX_ENTRIES_PER_REQUEST + 1)}, {})
    assert status == 400
    client = LogClient.local(svc)
    assert len(client.entries(0, MAX_ENTRIES_PER_REQUEST + 5)) == MAX_ENTRIES_PER_REQUEST + 5


def test_header_lookup_ignores_case():
    svc = service(mode=Mode.DELAYED_VISIBILITY, delay_entries=1, victim_clients=frozenset({"v"}))
    svc.append(payload(0))
    for name in (CLIENT_ID_HEADER, CLIENT_ID_HEADER.lower(), "X-client-id"):
        status, body = svc.handle("GET", "/checkpoint", {}, {name: "v"})
        assert json.loads(body)["tree_size"] == 0


@settings(max_examples=30, deadline=None)
@given(payloads=st.lists(st.dictionaries(st.text(max_size=3), st.integers(), max_size=2), min_size=1, max_size=30))
def test_service_matches_reference_log(payloads):
    raw = [json.dumps(p, sort_keys=True).encode() for p in payloads]
    svc = service()
    ref = MerkleLog(ORIGIN, OPERATOR, clock=lambda: NOW)
    client = LogClient.local(svc)
    for p in raw:
        assert client.append(p) == ref.append(p)
    cp = client.checkpoint()
    assert cp == ref.latest_checkpoint()
    assert cp.root_hash == oracle.mth(raw)
    n = len(raw)
    for i in range(n):
        assert client.inclusion_proof(i, n) == ref.prove_inclusion(i, n)
    for m in range(1, n + 1):
        assert client.consistency_proof(m, n) == ref.prove_consistency(m, n)


def test_split_view_branches():
    svc = service(mode=Mode.SPLIT_VIEW, fork_at=3, victim_clients=frozenset({"v"}))
    honest, victim = LogClient.local(svc, "h"), LogClient.local(svc, "v")
    for i in range(3):
        honest.append(payload(i))
    assert honest.checkpoint() == victim.checkpoint()
    honest.append(payload(10))
    victim.append(payload(20))
    victim.append(payload(21))
    h, v = honest.checkpoint(), victim.checkpoint()
    assert (h.tree_size, v.tree_size) == (4, 5)
    assert verify_checkpoint(h, OPERATOR.public_key) and verify_checkpoint(v, OPERATOR.public_key)
    assert victim.entries(0, 3) == honest.entries(0, 3)
    assert svc.main.root(3) == svc.fork.root(3)
    with pytest.raises(LogRequestError):
        honest.inclusion_proof(4, 5)


def test_delayed_visibility_hides_tail():
    svc = service(mode=Mode.DELAYED_VISIBILITY, delay_entries=2, victim_clients=frozenset({"v"}))
    honest, victim = LogClient.local(svc, "h"), LogClient.local(svc, "v")
    for i in range(5):
        honest.append(payload(i))
    v = victim.checkpoint()
    assert v.tree_size == 3 and verify_checkpoint(v, OPERATOR.public_key)
    assert v.root_hash == svc.main.root(3)
    with pytest.raises(LogRequestError):
        victim.entries(0, 4)
    assert verify_consistency(v.root_hash, honest.checkpoint().root_hash, honest.consistency_proof(3, 5))


def test_config_validation():
    with pytest.raises(ValueError):
        ServiceConfig(mode=Mode.SPLIT_VIEW)
    with pytest.raises(ValueError):
        ServiceConfig(mode="delayed_visibility", delay_entries=0)
    with pytest.raises(ValueError):
        ServiceConfig(mode="bogus")
    assert ServiceConfig(listen=":9000").address == ("127.0.0.1", 9000)


def test_persistence_reload(tmp_path):
    path = tmp_path / "log.records"
    svc = LogService(ServiceConfig(origin=ORIGIN, storage_path=str(path)), OPERATOR, clock=lambda: NOW)
    stmts = [endorsement(digest(f"b{i}"), FP).encode() for i in range(4)]
    for s in stmts:
        svc.append(s)
    root = svc.main.root()
    again = LogService(ServiceConfig(origin=ORIGIN, storage_path=str(path)), OPERATOR, clock=lambda: NOW)
    assert again.main.size == 4 and again.main.root() == root
    assert again.append(payload(9)) == 4
    assert [b64d(e) for e in json.loads(again.handle("GET", "/entries", {"start": "0", "end": "4"}, {})[1])["entries"]] == stmts
