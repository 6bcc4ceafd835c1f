import json
import os
import socket
import subprocess
import sys
import time

import httpx
import pytest

from annoserv.cli import main
from annoserv.config import ConfigError, load_config

from helpers import CallbackReceiver, write_corpus


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "annoserv.cli", *args], capture_output=True, text=True,
                          timeout=120, env={**os.environ, **(env or {})})


def test_config_env_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"listen": "127.0.0.1:1234", "apikeys": ["k"]}))
    cfg = load_config(path, env={"ANNOSERV_LISTEN": "0.0.0.0:9999", "ANNOSERV_DATA_DIR": "/tmp/x"})
    assert (cfg.host, cfg.port, cfg.data_dir, cfg.apikeys) == ("0.0.0.0", 9999, "/tmp/x", ["k"])


@pytest.mark.parametrize("content", ["{not json", "[]", '{"listen": "nowhere"}', '{"unknown_key": 1}',
                                     '{"annotators": [{"name": "x", "type": "GENE", "kind": "dictionary"}]}'])
def test_bad_config_rejected(tmp_path, content):
    path = tmp_path / "c.json"
    path.write_text(content)
    with pytest.raises(ConfigError):
        load_config(path, env={})


def test_serve_with_malformed_config_exits_nonzero(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"parallelism": 0}')
    proc = run_cli("serve", "--config", str(path), env={"ANNOSERV_DATA_DIR": str(tmp_path / "data")})
    assert proc.returncode != 0
    assert "invalid configuration" in proc.stderr
    assert not (tmp_path / "data").exists()


def test_serve_port_busy_exits(tmp_path):
    with socket.socket() as busy:
        busy.bind(("127.0.0.1", 0))
        busy.listen()
        port = busy.getsockname()[1]
        proc = run_cli("serve", env={"ANNOSERV_LISTEN": f"127.0.0.1:{port}",
                                     "ANNOSERV_DATA_DIR": str(tmp_path / "data")})
    assert proc.returncode == 3
    assert "cannot listen" in proc.stderr


def test_offline_command(tmp_path, capsys):
    corpus = write_corpus(tmp_path / "corpus")
    out = tmp_path / "out.jsonl"
    assert main(["offline", "--input", str(corpus), "--output", str(out), "--parallelism", "2",
                 "--types", "mutation,DISEASE"]) == 0
    assert "3 documents in 1 requests" in capsys.readouterr().out
    [line] = out.read_text().splitlines()
    types = {a["type"] for a in json.loads(line)["annotations"]}
    assert types == {"MUTATION", "DISEASE"}


def test_bench_zero_docs(capsys):
    assert main(["bench", "--docs", "0", "--parallelism", "1,2", "--executor", "thread"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["parallelism", "wall_s", "docs/s", "speedup"]
    assert [ln.split() for ln in lines[1:]] == [["1", "0.00", "0.0", "0.00"], ["2", "0.00", "0.0", "0.00"]]


def test_serve_submit_status_round_trip(tmp_path):
    corpus = write_corpus(tmp_path / "corpus")
    port = free_port()
    config = tmp_path / "c.json"
    config.write_text(json.dumps({
        "listen": f"127.0.0.1:{port}",
        "data_dir": str(tmp_path / "data"),
        "adapters": [{"source": "LOCAL", "directory": str(corpus)}],
    }))
    receiver = CallbackReceiver()
    server = subprocess.Popen([sys.executable, "-m", "annoserv.cli", "serve", "--config", str(config)],
                              stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
    url = f"http://127.0.0.1:{port}"
    try:
        deadline = time.monotonic() + 30
        while True:
            try:
                httpx.get(f"{url}/status", timeout=1)
                break
            except httpx.TransportError:
                assert time.monotonic() < deadline and server.poll() is None
                time.sleep(0.1)
        request = tmp_path / "req.json"
        request.write_text(json.dumps({"communication_id": 42, "types": ["MIRNA"], "callback_url": receiver.url,
                                       "documents": [{"document_id": "d1", "source": "LOCAL"}]}))
        proc = run_cli("submit", str(request), "--url", url)
        assert proc.returncode == 0, proc.stderr
        assert json.loads(proc.stdout) == {"communication_id": 42, "status": "accepted"}
        assert receiver.wait_for_comms({42}, timeout=20)
        assert receiver.by_comm()[42]["annotations"][0]["annotated_text"] == "hsa-miR-21-5p"
        proc = run_cli("status", "--url", url)
        assert json.loads(proc.stdout)["requests_accepted"] == 1
    finally:
        server.terminate()
        server.wait(20)
        receiver.close()
    assert server.returncode == 0
