import threading

import pytest
from hypothesis import given, settings, strategies as st

from gridemu.central import Central
from gridemu.config import load_config
from gridemu.core import EventKind, JobSpec, JobStatus, compute_checksum, read_journal
from gridemu.errors import (DuplicateLFN, IllegalTransition, InjectedFault, InvalidRequest, InvalidSpec,
                            MissingInput, NotFound, UnknownAgent, UnknownJob, UnknownSE, WrongState)
from gridemu.runtime import SteppedRuntime

GUID = "0123456789abcdef0123456789abcdef"


@pytest.fixture
def central(tmp_path):
    def make(**overrides):
        rt = SteppedRuntime()
        c = Central(rt, load_config(mode="stepped", run_dir=str(tmp_path), **overrides))
        c.announce({"role": "se", "name": "se"})
        return c
    return make


def _spec(**kw):
    kw.setdefault("script", "echo hi")
    return JobSpec(**kw)


def test_submit_assigns_dense_ids_and_polls_fifo(central):
    c = central()
    ids = [c.submit_job(_spec()) for _ in range(5)]
    assert ids == [1, 2, 3, 4, 5]
    assert [i for i, _ in c.poll_waiting(3)] == [1, 2, 3]
    assert c.poll_waiting(0) == []
    # polling is read-only
    assert all(c.query_status(i).status is JobStatus.WAITING for i in ids)


def test_submit_rejects_bad_spec_and_missing_input(central):
    c = central()
    with pytest.raises(InvalidSpec) as info:
        c.submit_job(_spec(script="", ttl_seconds=0))
    assert "script non-empty" in info.value.violations
    with pytest.raises(MissingInput) as info:
        c.submit_job(_spec(input_lfns=("/users/admin/absent.txt",)))
    assert "/users/admin/absent.txt" in str(info.value)
    assert c.jobs == {}


def test_request_job_requires_registered_agent(central):
    c = central()
    c.submit_job(_spec())
    with pytest.raises(UnknownAgent):
        c.request_job("ghost", "worker")
    c.register_agent("a1")
    job_id, spec = c.request_job("a1", "worker")
    assert job_id == 1 and spec.script == "echo hi"
    rec = c.query_status(1)
    assert rec.status is JobStatus.ASSIGNED and rec.assigned_worker == "worker"
    assert c.request_job("a1", "worker") is None


def test_concurrent_requests_grant_each_job_once(central):
    c = central()
    for _ in range(5):
        c.submit_job(_spec())
    agents = [f"a{i}" for i in range(8)]
    for a in agents:
        c.register_agent(a)
    barrier = threading.Barrier(len(agents))
    grants, lock = [], threading.Lock()

    def ask(agent):
        barrier.wait()
        got = c.request_job(agent, "worker")
        with lock:
            grants.append(got[0] if got else None)

    threads = [threading.Thread(target=ask, args=(a,)) for a in agents]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(g for g in grants if g is not None) == [1, 2, 3, 4, 5]
    assert grants.count(None) == 3


def test_update_status_enforces_state_machine(central):
    c = central()
    c.submit_job(_spec())
    with pytest.raises(IllegalTransition):
        c.update_status(1, JobStatus.RUNNING)
    with pytest.raises(UnknownJob):
        c.update_status(42, JobStatus.ASSIGNED)
    c.register_agent("a")
    c.request_job("a", "w")
    c.update_status(1, JobStatus.RUNNING)
    c.update_status(1, JobStatus.ERROR_AGENT, {"stage": "download", "reason": "boom"})
    rec = c.query_status(1)
    assert rec.status_detail == {"stage": "download", "reason": "boom"}
    with pytest.raises(IllegalTransition):
        c.update_status(1, JobStatus.DONE)


def test_expire_jobs_uses_ttl(central):
    c = central()
    c.submit_job(_spec(ttl_seconds=2))
    c.submit_job(_spec(ttl_seconds=10))
    assert c.expire_jobs(2000) == []
    assert c.expire_jobs(2001) == [1]
    assert c.query_status(1).status is JobStatus.EXPIRED
    assert c.query_status(2).status is JobStatus.WAITING
    assert c.expire_jobs(100_000) == [2]


def _to_saving(c):
    c.submit_job(_spec())
    c.register_agent("a")
    c.request_job("a", "w")
    c.update_status(1, JobStatus.RUNNING)


def test_register_output_rules(central):
    c = central()
    _to_saving(c)
    ck = compute_checksum(b"hello\n")
    with pytest.raises(WrongState):
        c.register_output(1, "/outputs/1/stdout.log", GUID, 6, ck, ("se", "p"))
    c.update_status(1, JobStatus.SAVING)
    with pytest.raises(UnknownSE):
        c.register_output(1, "/outputs/1/stdout.log", GUID, 6, ck, ("other", "p"))
    with pytest.raises(InvalidRequest):
        c.register_output(1, "outputs/rel", GUID, 6, ck, ("se", "p"))
    entry = c.register_output(1, "/outputs/1/stdout.log", GUID, 6, ck, ("se", "p"))
    assert entry.job_id == 1 and c.lookup("/outputs/1/stdout.log") == entry
    with pytest.raises(DuplicateLFN):
        c.register_output(1, "/outputs/1/stdout.log", GUID, 6, ck, ("se", "p"))
    c.update_status(1, JobStatus.DONE)
    assert c.query_status(1).output_lfns == ("/outputs/1/stdout.log",)


def test_register_fault_fires_before_commit(central):
    c = central(faults=[{"component": "central", "stage": "register", "mode": "fail"}])
    _to_saving(c)
    c.update_status(1, JobStatus.SAVING)
    with pytest.raises(InjectedFault):
        c.register_output(1, "/outputs/1/x", GUID, 1, compute_checksum(b"x"), ("se", "p"))
    with pytest.raises(NotFound):
        c.lookup("/outputs/1/x")


def test_register_file_needs_user_home(central):
    c = central()
    ck = compute_checksum(b"x")
    with pytest.raises(InvalidRequest):
        c.register_file("/elsewhere/x", GUID, 1, ck, ("se", "p"))
    with pytest.raises(InvalidRequest):
        c.register_file("/users/admin", GUID, 1, ck, ("se", "p"))
    c.register_file("/users/admin/x", GUID, 1, ck, ("se", "p"))
    assert c.submit_job(_spec(input_lfns=("/users/admin/x",))) == 1


def test_announce_is_idempotent(central):
    c = central()
    for _ in range(3):
        c.announce({"role": "ce", "name": "ce", "slots": 2})
    assert c.ces == {"ce": {"slots": 2, "memory_mb": 0, "address": ""}}
    events = read_journal(c.journal.path)
    assert sum(e.kind is EventKind.CE_ANNOUNCED for e in events) == 1
    with pytest.raises(InvalidRequest):
        c.announce({"role": "mystery"})


def test_snapshot_layout(central):
    c = central()
    c.submit_job(_spec())
    snap = c.snapshot()
    assert set(snap) == {"jobs", "catalog", "ses", "next_id"}
    assert snap["catalog"]["dirs"] == ["/users/admin", "/users/probe"]
    assert snap["next_id"] == 2 and snap["jobs"]["1"]["status"] == "WAITING"


ops = st.lists(st.sampled_from(["submit", "request", "run", "save", "done", "fail", "expire"]), max_size=60)


@settings(max_examples=60)
@given(ops)
def test_random_operations_keep_every_history_legal(tmp_path_factory, seq):
    from gridemu.core import walk_is_legal
    c = Central(SteppedRuntime(), load_config(mode="stepped", run_dir=str(tmp_path_factory.mktemp("c"))))
    c.register_agent("a")
    now = 0
    for op in seq:
        now += 100
        c.rt.clock = now
        try:
            if op == "submit":
                c.submit_job(_spec(ttl_seconds=1))
            elif op == "request":
                c.request_job("a", "w")
            elif op == "expire":
                c.expire_jobs(now)
            else:
                target = {"run": JobStatus.RUNNING, "save": JobStatus.SAVING, "done": JobStatus.DONE,
                          "fail": JobStatus.ERROR_AGENT}[op]
                for rec in list(c.jobs.values()):
                    try:
                        c.update_status(rec.id, target)
                        break
                    except IllegalTransition:
                        continue
        except IllegalTransition:
            pass
    for rec in c.jobs.values():
        assert walk_is_legal([s for s, _ in rec.status_history])
    granted = [e.job_id for e in read_journal(c.journal.path)
               if e.kind is EventKind.STATUS_UPDATED and e.detail.get("status") == "ASSIGNED"]
    assert len(granted) == len(set(granted))
    c.journal.close()
