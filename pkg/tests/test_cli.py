"""Operator CLI smoke tests (subprocess level)."""

import json
import socket
import subprocess
import sys
import time

from fedshield.enclave import measure
from fedshield.fl import save_dataset_csv, synthetic_dataset
from fedshield.policy import parse_policy

CLI = [sys.executable, "-m", "fedshield.cli"]


def run_cli(*args, check=True, **kwargs):
    result = subprocess.run([*CLI, *map(str, args)], capture_output=True,
                            text=True, **kwargs)
    if check and result.returncode != 0:
        raise AssertionError(f"cli failed: {result.stderr}\n{result.stdout}")
    return result


def test_help_for_every_subcommand():
    for verb in ["keygen", "measure", "policy", "encrypt-data", "decrypt-data",
                 "counter", "run-manager", "run-coordinator", "run-client",
                 "audit", "demo"]:
        result = run_cli(verb, "--help")
        assert result.returncode == 0


def test_keygen_platform_and_signing(tmp_path):
    out = run_cli("keygen", "--out", tmp_path / "platform.json")
    assert "root_public_key" in out.stdout
    doc = json.loads((tmp_path / "platform.json").read_text())
    assert doc["kind"] == "platform"
    out = run_cli("keygen", "--kind", "signing", "--out", tmp_path / "svc.json")
    assert "public_key" in out.stdout


def test_measure_matches_library(tmp_path):
    bundle = tmp_path / "bundle.bin"
    config = tmp_path / "config.txt"
    bundle.write_bytes(b"program bytes here")
    config.write_bytes(b"lr=0.1\n")
    out = run_cli("measure", bundle, "--config", config)
    assert out.stdout.strip() == measure(b"program bytes here", b"lr=0.1\n").hex()


def test_encrypt_decrypt_with_rollback(tmp_path):
    run_cli("keygen", "--kind", "signing", "--out", tmp_path / "svc.json")
    counter_dir = tmp_path / "counters"
    counter_id = run_cli("counter", "init", "--counter-dir", counter_dir,
                         "--counter-key", tmp_path / "svc.json").stdout.strip()
    secret = tmp_path / "secret.txt"
    secret.write_bytes(b"the plaintext training dataset, version 1")
    key_hex = "ab" * 32
    run_cli("encrypt-data", "--in", secret, "--out", tmp_path / "v1.sfl",
            "--key-hex", key_hex, "--counter-id", counter_id,
            "--counter-dir", counter_dir, "--counter-key", tmp_path / "svc.json")
    run_cli("decrypt-data", "--in", tmp_path / "v1.sfl", "--out",
            tmp_path / "v1.out", "--key-hex", key_hex,
            "--counter-dir", counter_dir, "--counter-key", tmp_path / "svc.json")
    assert (tmp_path / "v1.out").read_bytes() == secret.read_bytes()

    # a second authorized write advances the counter; v1 must now be stale
    secret.write_bytes(b"the plaintext training dataset, version 2")
    run_cli("encrypt-data", "--in", secret, "--out", tmp_path / "v2.sfl",
            "--key-hex", key_hex, "--counter-id", counter_id,
            "--counter-dir", counter_dir, "--counter-key", tmp_path / "svc.json")
    stale = run_cli("decrypt-data", "--in", tmp_path / "v1.sfl", "--out",
                    tmp_path / "stale.out", "--key-hex", key_hex,
                    "--counter-dir", counter_dir,
                    "--counter-key", tmp_path / "svc.json", check=False)
    assert stale.returncode == 1
    assert "counter" in stale.stderr


def test_policy_new(tmp_path):
    data = tmp_path / "alice.csv"
    save_dataset_csv(synthetic_dataset(20, 3, seed=1), data)
    out = run_cli("policy", "new", "--out", tmp_path / "policy.json",
                  "--name", "cli-pact",
                  "--manager-measurement", "11" * 32,
                  "--coordinator-measurement", "22" * 32,
                  "--client-measurement", "33" * 32,
                  "--client", f"alice={data}")
    policy = parse_policy((tmp_path / "policy.json").read_text())
    assert policy.name == "cli-pact"
    assert policy.policy_hash.hex() in out.stdout


def test_demo_and_audit_verify(tmp_path):
    out = run_cli("demo", "--workdir", tmp_path / "demo", "--rows", "60",
                  "--dim", "4", "--capture")
    assert "session finished at round" in out.stdout
    assert "confidentiality scan (wire + storage): clean" in out.stdout
    log = tmp_path / "demo" / "coordinator" / "audit.log"
    ok = run_cli("audit", "verify", log)
    assert "accepted" in ok.stdout

    blob = bytearray(log.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    log.write_bytes(bytes(blob))
    broken = run_cli("audit", "verify", log, check=False)
    assert broken.returncode == 1
    assert "BROKEN" in broken.stdout


def test_session_file_pins_policy_hash(tmp_path):
    run_cli("keygen", "--out", tmp_path / "platform.json")
    data = tmp_path / "alice.csv"
    save_dataset_csv(synthetic_dataset(20, 3, seed=3), data)
    run_cli("policy", "new", "--out", tmp_path / "policy.json",
            "--name", "pinned",
            "--manager-measurement", "11" * 32,
            "--coordinator-measurement", "22" * 32,
            "--client-measurement", "33" * 32,
            "--client", f"alice={data}")
    bundle = tmp_path / "bundle.bin"
    config = tmp_path / "config.txt"
    bundle.write_bytes(b"agent")
    config.write_bytes(b"cfg")
    session_file = tmp_path / "session.json"
    session_file.write_text(json.dumps({
        "manager": "127.0.0.1:1", "coordinator": "127.0.0.1:1",
        "policy": str(tmp_path / "policy.json"),
        "policy_hash": "00" * 32,  # wrong on purpose
        "counter_public_key": "aa" * 32,
    }))
    result = run_cli("run-client", "--client-id", "alice",
                     "--data", tmp_path / "whatever.sfl",
                     "--key-file", tmp_path / "platform.json",
                     "--bundle", bundle, "--config", config,
                     "--session-file", session_file, check=False)
    assert result.returncode == 1
    assert "session file pins" in result.stderr


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_run_manager_and_policy_upload(tmp_path):
    run_cli("keygen", "--out", tmp_path / "platform.json")
    run_cli("keygen", "--kind", "signing", "--out", tmp_path / "svc.json")
    bundle = tmp_path / "manager.bundle"
    config = tmp_path / "role.cfg"
    bundle.write_bytes(b"manager program")
    config.write_bytes(b"cfg\n")
    manager_measurement = measure(b"manager program", b"cfg\n").hex()

    data = tmp_path / "alice.csv"
    save_dataset_csv(synthetic_dataset(20, 3, seed=2), data)
    run_cli("policy", "new", "--out", tmp_path / "policy.json",
            "--name", "net-pact",
            "--manager-measurement", manager_measurement,
            "--coordinator-measurement", "22" * 32,
            "--client-measurement", "33" * 32,
            "--client", f"alice={data}")

    port = _free_port()
    server = subprocess.Popen(
        [sys.executable, "-u", "-m", "fedshield.cli",
         "run-manager", "--listen", f"127.0.0.1:{port}",
         "--store-dir", str(tmp_path / "store"),
         "--key-file", str(tmp_path / "platform.json"),
         "--bundle", str(bundle), "--config", str(config),
         "--counter-key", str(tmp_path / "svc.json")],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        counter_pub = None
        deadline = time.time() + 15
        while time.time() < deadline:
            line = server.stdout.readline()
            if line.startswith("counter service public key:"):
                counter_pub = line.split(":", 1)[1].strip()
            if line.startswith("listening on"):
                break
        assert counter_pub, "manager did not come up"

        out = run_cli("policy", "upload",
                      "--policy", tmp_path / "policy.json",
                      "--manager", f"127.0.0.1:{port}",
                      "--key-file", tmp_path / "platform.json",
                      "--bundle", bundle, "--config", config,
                      "--counter-public-key", counter_pub,
                      "--generate")
        assert "uploaded:" in out.stdout
        assert "secrets generated" in out.stdout
        assert (tmp_path / "store" / "policies").glob("*.pol")
    finally:
        server.terminate()
        server.wait(timeout=10)
