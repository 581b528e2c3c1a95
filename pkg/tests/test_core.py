import json
import threading
from itertools import product

import pytest
from hypothesis import given, strategies as st

from gridemu.core import (
    ALLOWED_EDGES, TERMINAL_STATUSES, Checksum, EventKind, Journal, JobRecord, JobSpec, JobStatus,
    advance_status, compute_checksum, is_valid_lfn, lfn_under, read_journal, validate_job_spec, walk_is_legal,
)
from gridemu.errors import IllegalTransition, JournalIOFailure, UnsupportedAlgorithm

S = JobStatus
# Hand-written edge table: the happy path plus every non-terminal state into each failure state.
ORACLE_EDGES = {
    (S.WAITING, S.ASSIGNED), (S.ASSIGNED, S.RUNNING), (S.RUNNING, S.SAVING), (S.SAVING, S.DONE),
}
for src in ("WAITING", "ASSIGNED", "RUNNING", "SAVING"):
    for dst in ("ERROR_EXEC", "ERROR_SAVE", "ERROR_AGENT", "EXPIRED"):
        ORACLE_EDGES.add((S(src), S(dst)))


def test_edge_table_matches_oracle_all_81_pairs():
    for a, b in product(S, S):
        assert ((a, b) in ALLOWED_EDGES) == ((a, b) in ORACLE_EDGES), (a, b)
    assert len(ALLOWED_EDGES) == 20


def test_terminal_states_have_no_exit():
    assert TERMINAL_STATUSES == {S.DONE, S.ERROR_EXEC, S.ERROR_SAVE, S.ERROR_AGENT, S.EXPIRED}
    for t in TERMINAL_STATUSES:
        for b in S:
            with pytest.raises(IllegalTransition):
                advance_status(t, b)


def test_self_loops_rejected():
    for s in S:
        assert (s, s) not in ALLOWED_EDGES


@given(st.lists(st.tuples(st.sampled_from(list(S)), st.sampled_from(list(S))), min_size=1, max_size=200))
def test_random_transition_attempts_match_oracle(pairs):
    for a, b in pairs:
        legal = (a, b) in ORACLE_EDGES
        if legal:
            assert advance_status(a, b) is b
        else:
            with pytest.raises(IllegalTransition):
                advance_status(a, b)


@given(st.lists(st.sampled_from(list(S)), max_size=8))
def test_walk_is_legal_agrees_with_pairwise_oracle(tail):
    walk = [S.WAITING] + tail
    expected = all((a, b) in ORACLE_EDGES for a, b in zip(walk, walk[1:]))
    assert walk_is_legal(walk) == expected


def test_walk_must_start_waiting():
    assert not walk_is_legal([])
    assert not walk_is_legal([S.ASSIGNED, S.RUNNING])
    assert walk_is_legal([S.WAITING, S.ASSIGNED, S.RUNNING, S.SAVING, S.DONE])


# checksums: digests of the empty string and "hello\n" computed with coreutils md5sum/sha1sum/sha256sum
@pytest.mark.parametrize("data,algo,digest", [
    (b"", "md5", "d41d8cd98f00b204e9800998ecf8427e"),
    (b"hello\n", "md5", "b1946ac92492d2347c6235b4d2611184"),
    (b"", "sha1", "da39a3ee5e6b4b0d3255bfef95601890afd80709"),
    (b"hello\n", "sha1", "f572d396fae9206628714fb2ce00f72e94f2258f"),
    (b"", "sha256", "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
    (b"hello\n", "sha256", "5891b5b522d5df086d0ff0b110fbd9d21bb4fc7163af34d08286a2e846f6be03"),
])
def test_checksum_known_digests(data, algo, digest):
    c = compute_checksum(data, algo)
    assert c == Checksum(digest, algo)
    assert c.matches(data)


def test_checksum_rejects_unknown_algorithm_and_bad_digest():
    with pytest.raises(UnsupportedAlgorithm):
        compute_checksum(b"x", "crc32")
    with pytest.raises(UnsupportedAlgorithm):
        Checksum("0" * 8, "crc32")
    with pytest.raises(ValueError):
        Checksum("xyz")


@given(st.binary(max_size=512), st.sampled_from(["md5", "sha1", "sha256"]))
def test_checksum_roundtrip_and_sensitivity(data, algo):
    c = compute_checksum(data, algo)
    assert Checksum.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    assert not c.matches(data + b"\0")


@pytest.mark.parametrize("lfn,ok", [
    ("/users/admin/a.txt", True), ("/outputs/1/stdout.log", True), ("/", False), ("relative", False),
    ("/a//b", False), ("/a/../b", False), ("/a/./b", False), ("/a/b c", False), ("/a/", False),
])
def test_lfn_validation(lfn, ok):
    assert is_valid_lfn(lfn) is ok


def test_lfn_under():
    assert lfn_under("/users/admin/x", "/users/admin")
    assert lfn_under("/users/admin/x", "/users/admin/")
    assert not lfn_under("/users/administrator/x", "/users/admin")


def test_job_spec_violations_are_all_reported():
    spec = JobSpec(script="  ", ttl_seconds=0, output_patterns=("/abs", "../up", ""), input_lfns=("nope",))
    v = validate_job_spec(spec)
    assert "script non-empty" in v and "ttl_seconds >= 1" in v
    assert any("no absolute paths" in x for x in v)
    assert any("parent" in x for x in v)
    assert any("nope" in x for x in v)
    assert validate_job_spec(JobSpec("echo hi", output_patterns=("*.log", "out/x.txt"))) == []


specs = st.builds(
    JobSpec,
    script=st.text(min_size=1, max_size=40),
    arguments=st.lists(st.text(max_size=10), max_size=3).map(tuple),
    input_lfns=st.lists(st.from_regex(r"/users/admin/[a-z]{1,8}", fullmatch=True), max_size=3).map(tuple),
    output_patterns=st.lists(st.sampled_from(["stdout.log", "*.txt", "out/*"]), max_size=3).map(tuple),
    ttl_seconds=st.integers(1, 10_000),
)


@given(specs)
def test_job_spec_and_record_roundtrip(spec):
    assert JobSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    rec = JobRecord(1, spec, S.WAITING, ((S.WAITING, 5),))
    rec = rec.advanced(S.ASSIGNED, 6).advanced(S.RUNNING, 7)
    assert JobRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec


def test_record_exit_codes_and_outputs():
    rec = JobRecord(1, JobSpec("x"), S.WAITING, ((S.WAITING, 0),))
    rec = rec.advanced(S.ASSIGNED, 1).advanced(S.RUNNING, 2)
    failed = rec.advanced(S.ERROR_EXEC, 3, {"exit_code": "7"})
    assert failed.exit_code == 7 and failed.status_detail == {"exit_code": "7"}
    done = rec.advanced(S.SAVING, 3).advanced(S.DONE, 4)
    assert done.exit_code == 0
    assert [s for s, _ in done.status_history] == list(S)[:5]
    assert done.submitted_ms == 0


def test_journal_seq_and_reopen(tmp_path):
    path = tmp_path / "j" / "central.jsonl"
    clock = iter(range(100, 200))
    j = Journal(path, "central", clock=lambda: next(clock))
    j.append(EventKind.JOB_SUBMITTED, job_id=1, detail={"n": 1})
    j.append("ERROR", stage="x")
    j.close()
    with pytest.raises(JournalIOFailure):
        j.append(EventKind.ERROR)
    j2 = Journal(path, "central")
    assert j2.append(EventKind.COMPONENT_STOPPED).seq == 3
    j2.close()
    events = read_journal(path)
    assert [e.seq for e in events] == [1, 2, 3]
    assert events[0].ts_ms == 100 and events[0].detail == {"n": "1"}
    assert events[1].detail == {"stage": "x"}
    assert set(json.loads(path.read_text().splitlines()[0])) == {"seq", "ts_ms", "component", "kind", "job_id", "detail"}


def test_journal_concurrent_appends_are_dense_and_parseable(tmp_path):
    path = tmp_path / "w.jsonl"
    j = Journal(path, "worker")
    n_threads, per = 10, 1000

    def work(t):
        for i in range(per):
            j.append(EventKind.JOB_EXECUTED, job_id=t, detail={"i": i})

    threads = [threading.Thread(target=work, args=(t,)) for t in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    j.close()
    events = read_journal(path)
    assert [e.seq for e in events] == list(range(1, n_threads * per + 1))
    for t in range(n_threads):
        assert [int(e.detail["i"]) for e in events if e.job_id == t] == list(range(per))


def test_journal_bad_line_reported(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"seq": 1}\n')
    with pytest.raises(JournalIOFailure):
        read_journal(path)
