import json

import pytest
from hypothesis import given, strategies as st

from gridemu.config import FAULT_STAGES, FaultPlan, FaultSpec, RunConfig, load_config, merge
from gridemu.errors import ConfigError, InjectedFault


def test_defaults_make_a_small_working_grid():
    c = load_config()
    assert (c.mode, c.central.port, c.se.port, c.worker.slots, c.announced_slots) == ("realtime", 8098, 8099, 2, 2)
    assert c.faults == [] and not c.fault_plan


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"worker": {"slots": 4}, "faults": [
        {"component": "worker", "stage": "upload", "mode": "fail", "match": [2]}]}))
    c = load_config(path, mode="stepped")
    assert c.worker.slots == 4 and c.mode == "stepped"
    assert c.faults == [FaultSpec("worker", "upload", "fail", 0, (2,))]
    assert c.worker.port == 0  # untouched defaults survive


@pytest.mark.parametrize("doc", [
    {"bogus": 1}, {"worker": {"cores": 2}}, {"worker": 3}, {"mode": "warp"},
    {"central": {"port": 9000}, "se": {"port": 9000}},
    {"faults": [{"component": "ce", "stage": "upload", "mode": "fail"}]},
    {"faults": [{"component": "se", "stage": "execute", "mode": "fail"}]},
    {"faults": [{"component": "worker", "stage": "upload", "mode": "explode"}]},
    {"suite": {"scopes": ["host", "moon"]}},
    {"mode": "stepped", "processes": True},
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        merge(RunConfig(), doc).validate()


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


@pytest.mark.parametrize("mode,delay", [("delay_ms(250)", 250), ({"delay_ms": 40}, 40)])
def test_delay_spellings(mode, delay):
    spec = FaultSpec.from_dict({"component": "worker", "stage": "execute", "mode": mode})
    assert (spec.mode, spec.delay_ms) == ("delay_ms", delay)


def test_fault_plan_apply():
    slept = []
    plan = FaultPlan([FaultSpec("worker", "download", "corrupt", match=(1,)),
                      FaultSpec("worker", "execute", "delay_ms", 30),
                      FaultSpec("central", "register", "corrupt")])
    assert plan.apply("worker", "download", 1, slept.append) is True
    assert plan.apply("worker", "download", 2, slept.append) is False
    assert plan.apply("worker", "execute", 5, slept.append) is False and slept == [30]
    with pytest.raises(InjectedFault):  # corrupt makes no sense at register; it fails instead
        plan.apply("central", "register", 1, slept.append)


@given(st.sampled_from(sorted(FAULT_STAGES)), st.data())
def test_fault_spec_dict_roundtrip(component, data):
    stage = data.draw(st.sampled_from(sorted(FAULT_STAGES[component])))
    spec = FaultSpec(component, stage, data.draw(st.sampled_from(["fail", "corrupt"])),
                     match=tuple(data.draw(st.lists(st.integers(1, 99), max_size=3))))
    assert FaultSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    assert spec.problems() == []


def test_hash_ignores_run_dir():
    a, b = load_config(run_dir="/tmp/a"), load_config(run_dir="/tmp/b")
    assert a.hash() == b.hash()
    assert a.hash() != load_config(worker={"slots": 3}).hash()
    assert RunConfig.from_dict(a.to_dict()) == a
