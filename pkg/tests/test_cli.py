import json
import socket
import subprocess
import time

import pytest

from conftest import PY, port_free

pytestmark = pytest.mark.skipif(not (port_free(8098) and port_free(8099)), reason="grid ports busy on this host")


def gridemu(args, env, stdin=None, timeout=120):
    return subprocess.run([PY, "-m", "gridemu", *args], capture_output=True, text=True, env=env,
                          input=stdin, timeout=timeout)


def test_usage_errors_exit_2(cli_env):
    assert gridemu(["frobnicate"], cli_env).returncode == 2
    assert gridemu(["test", "--scope", "moon"], cli_env).returncode == 2
    assert gridemu(["up", "--mode", "stepped"], cli_env).returncode == 2


def test_environment_errors_exit_3(cli_env, tmp_path):
    assert gridemu(["test", "--run-dir", str(tmp_path)], cli_env).returncode == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"worker": {"cores": 1}}')
    assert gridemu(["ci", "--config", str(bad)], cli_env).returncode == 3
    host = gridemu(["test", "--scope", "host", "--run-dir", str(tmp_path)], cli_env)
    assert host.returncode == 0 and "Host Python Version Check" in host.stdout


def test_lifecycle(cli_env, tmp_path):
    run = str(tmp_path / "run")
    up = gridemu(["up", "--detach", "--run-dir", run], cli_env)
    assert up.returncode == 0, up.stderr
    try:
        script = tmp_path / "job.sh"
        script.write_text('cat in.txt; echo "$1"\n')
        local = tmp_path / "in.txt"
        local.write_text("staged\n")
        sub = gridemu(["submit", str(script), "--run-dir", run, "--arg", "A",
                       "--stage", f"{local}=/users/admin/in.txt"], cli_env)
        assert sub.stdout == "JOB 1\n"
        assert gridemu(["submit", "-", "--run-dir", run], cli_env, stdin="echo piped\n").stdout == "JOB 2\n"
        deadline = time.time() + 20
        while "DONE" not in gridemu(["status", "1", "--run-dir", run], cli_env).stdout and time.time() < deadline:
            time.sleep(0.1)
        status = gridemu(["status", "1", "--run-dir", run], cli_env)
        assert status.stdout.startswith("JOB 1 DONE") and "WAITING" in status.stdout
        out = tmp_path / "out"
        assert gridemu(["fetch", "1", str(out), "--run-dir", run], cli_env).returncode == 0
        assert (out / "stdout.log").read_bytes() == b"staged\nA\n"
        assert gridemu(["status", "77", "--run-dir", run], cli_env).returncode == 1
        missing = gridemu(["submit", str(script), "--input", "/users/admin/nope", "--run-dir", run], cli_env)
        assert missing.returncode == 1 and "/users/admin/nope" in missing.stderr
        slow = gridemu(["submit", "-", "--run-dir", run], cli_env, stdin="sleep 20\n").stdout.split()[1]
        time.sleep(0.5)
        assert gridemu(["fetch", slow, str(out), "--run-dir", run], cli_env).returncode == 1
        test = gridemu(["test", "--run-dir", run, "--format", "json"], cli_env)
        assert test.returncode == 0, test.stdout
        assert json.loads(test.stdout)["aborted"] is False
    finally:
        down = gridemu(["down", "--run-dir", run], cli_env)
    assert down.returncode == 0
    assert gridemu(["down", "--run-dir", run], cli_env).stdout == "already down\n"
    assert port_free(8098) and port_free(8099)
    doc = json.loads((tmp_path / "run" / "run.json").read_text())
    assert doc["state"] == "down" and int(slow) in doc["non_terminal_jobs"]


def test_ci_with_upload_fault_exits_1_and_tears_down(cli_env, tmp_path):
    cfg = tmp_path / "fault.json"
    cfg.write_text(json.dumps({"faults": [{"component": "worker", "stage": "upload", "mode": "fail"}]}))
    run = tmp_path / "run"
    ci = gridemu(["ci", "--config", str(cfg), "--run-dir", str(run)], cli_env)
    assert ci.returncode == 1
    assert "| FAILED | Critical |" in ci.stdout and "Test Summary:" in ci.stdout
    report = json.loads((run / "report.json").read_text())
    assert report["aborted"] is True
    assert port_free(8098) and port_free(8099)


def test_ci_exits_3_when_central_port_taken(cli_env, tmp_path):
    blocker = socket.socket()
    blocker.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    blocker.bind(("127.0.0.1", 8098))
    blocker.listen(1)
    try:
        ci = gridemu(["ci", "--run-dir", str(tmp_path / "run")], cli_env)
    finally:
        blocker.close()
    assert ci.returncode == 3 and "AddressInUse" in ci.stderr
    assert port_free(8099)
