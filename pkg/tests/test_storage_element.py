import hashlib
import threading

import pytest
from hypothesis import given, settings, strategies as st

from gridemu.config import load_config
from gridemu.core import compute_checksum
from gridemu.errors import ChecksumMismatch, GuidConflict, InjectedFault, InvalidRequest, NotFound, StorageIOFailure
from gridemu.runtime import SteppedRuntime
from gridemu.storage_element import StorageElement, decode_download, encode_upload, object_path
from gridemu.transport import Kind


@pytest.fixture
def make_se(tmp_path):
    def make(**overrides):
        return StorageElement(SteppedRuntime(seed=3), load_config(mode="stepped", run_dir=str(tmp_path), **overrides))
    return make


def guid(i: int) -> str:
    return f"{i:032x}"


def test_object_path_fans_out(tmp_path):
    g = "abcdef0123456789abcdef0123456789"
    assert object_path(tmp_path, g) == tmp_path / "ab" / "cd" / g
    with pytest.raises(InvalidRequest):
        object_path(tmp_path, "../../etc/passwd")


def test_roundtrip_idempotent_and_conflict(make_se):
    se = make_se()
    data = b"hello\n"
    ck = compute_checksum(data)
    assert se.upload(guid(1), data, ck)["created"] is True
    assert se.upload(guid(1), data, ck)["created"] is False
    with pytest.raises(GuidConflict):
        se.upload(guid(1), b"other", compute_checksum(b"other"))
    got, got_ck = se.download(guid(1))
    assert got == data and got_ck == ck
    assert se.stat(guid(1)) == (True, 6, ck)
    assert se.stat(guid(2)) == (False, 0, None)
    with pytest.raises(NotFound):
        se.download(guid(2))


def test_upload_verifies_checksum(make_se):
    se = make_se()
    with pytest.raises(ChecksumMismatch):
        se.upload(guid(1), b"abc", compute_checksum(b"abd"))
    assert not object_path(se.root, guid(1)).exists()


def test_bitrot_detected_on_download(make_se):
    se = make_se()
    se.upload(guid(5), b"payload", compute_checksum(b"payload"))
    object_path(se.root, guid(5)).write_bytes(b"paYload")
    with pytest.raises(StorageIOFailure):
        se.download(guid(5))


def test_faults(make_se):
    se = make_se(faults=[
        {"component": "se", "stage": "upload", "mode": "fail", "match": [1]},
        {"component": "se", "stage": "download", "mode": "corrupt", "match": [2]},
        {"component": "se", "stage": "upload", "mode": "delay_ms(250)", "match": [3]},
    ])
    data = b"x" * 10
    ck = compute_checksum(data)
    with pytest.raises(InjectedFault):
        se.upload(guid(1), data, ck, job_id=1)
    se.upload(guid(2), data, ck, job_id=3)
    assert se.rt.now_ms() == 250
    got, _ = se.download(guid(2), job_id=2)
    assert got != data and len(got) == len(data)
    assert se.download(guid(2), job_id=9)[0] == data


def test_wire_handlers(make_se):
    se = make_se()
    data = bytes(range(256))
    reply = se.on_upload(encode_upload(guid(7), data, compute_checksum(data)))
    assert reply["size"] == 256
    out, ck = decode_download(se.on_download({"guid": guid(7)}))
    assert out == data and ck.matches(out)
    assert se.on_stat({"guid": guid(7)})["exists"] is True
    with pytest.raises(InvalidRequest):
        se.on_upload({"guid": guid(8), "data": "!!notbase64", "checksum": compute_checksum(b"").to_dict()})


def test_racing_uploads_of_same_guid(make_se):
    se = make_se()
    payloads = [bytes([i]) * 100 for i in range(8)]
    outcomes = []

    def up(p):
        try:
            se.upload(guid(9), p, compute_checksum(p))
            outcomes.append("ok")
        except GuidConflict:
            outcomes.append("conflict")

    threads = [threading.Thread(target=up, args=(p,)) for p in payloads]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert outcomes.count("ok") == 1 and outcomes.count("conflict") == 7
    stored, _ = se.download(guid(9))
    assert stored in payloads


@settings(max_examples=40)
@given(st.lists(st.binary(max_size=2048), min_size=1, max_size=10), st.sampled_from(["md5", "sha1", "sha256"]))
def test_roundtrip_property(tmp_path_factory, blobs, algo):
    se = StorageElement(SteppedRuntime(), load_config(mode="stepped", run_dir=str(tmp_path_factory.mktemp("se"))))
    for i, blob in enumerate(blobs):
        se.upload(guid(i), blob, compute_checksum(blob, algo))
    for i, blob in enumerate(blobs):
        got, ck = se.download(guid(i))
        assert got == blob
        assert hashlib.new(algo, got).hexdigest() == ck.digest
    se.journal.close()
