"""One-process desk-scale deployment wiring every component together.

Builds a simulated platform, spawns manager/coordinator/client enclaves,
authors and uploads a policy, provisions secrets, encrypts datasets with
counter-bound freshness, and runs a full federated session over attested
in-process channels. Optionally records every wire frame in a capture log
and collects the sensitive byte patterns (dataset rows, update vectors,
released secrets) that confidentiality scans search for.

All plaintext staging happens in memory: the only artifacts that reach
disk are sealed blobs, shielded files, policy documents, key files, and
the audit logs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

from .attestation import AttestationPolicy
from .counters import CounterService
from .enclave import generate_platform, generate_signing_key, measure, spawn_enclave
from .encoding import canonical_bytes, sha256
from .errors import FedShieldError
from .fl import (
    GlobalModel,
    dataset_from_csv_bytes,
    dataset_to_csv_bytes,
    make_update,
    synthetic_dataset,
)
from .orchestrator import ClientAgent, Coordinator
from .policy import PolicyManager, SessionConfig, secret_key_id
from .services import ServiceEndpoint, connect_manager
from .shield import (
    read_shielded,
    shield_decrypt,
    shield_encrypt,
    verified_stable_lookup,
    write_shielded,
)
from .transport import CaptureLog, Hub

MANAGER_BUNDLE = b"fedshield service bundle: policy manager + counter service"
COORDINATOR_BUNDLE = b"fedshield service bundle: session coordinator"
CLIENT_BUNDLE = b"fedshield service bundle: client training agent"
ROLE_CONFIG = b"profile=desk-scale\n"

DATASET_SECRET = "dataset-key"
CHECKPOINT_SECRET = "checkpoint-key"
VALIDATION_SECRET = "validation-key"


def role_measurements() -> dict[str, bytes]:
    return {
        "policy_manager_self": measure(MANAGER_BUNDLE, ROLE_CONFIG),
        "coordinator": measure(COORDINATOR_BUNDLE, ROLE_CONFIG),
        "client": measure(CLIENT_BUNDLE, ROLE_CONFIG),
    }


def author_policy(name: str, measurements: dict[str, bytes],
                  roster: list[tuple[str, bytes]], session: SessionConfig,
                  validation_hash: bytes | None = None,
                  extra_secrets: list[dict] | None = None) -> str:
    """Compose a policy document for the standard three-secret deployment."""
    doc = {
        "name": name,
        "allowed_measurements": {role: m.hex() for role, m in measurements.items()},
        "client_roster": [
            {"client_id": cid, "dataset_hash": h.hex()} for cid, h in roster
        ],
        "session": session.to_dict(),
        "secrets": [
            {"secret_name": DATASET_SECRET, "kind": "symmetric-key-256"},
            {"secret_name": CHECKPOINT_SECRET, "kind": "symmetric-key-256"},
            {"secret_name": VALIDATION_SECRET, "kind": "symmetric-key-256"},
        ] + (extra_secrets or []),
        "injection": [
            {"role": "client", "mechanism": "environment-variable",
             "name": "DATASET_KEY", "template": f"$${DATASET_SECRET}$$"},
            {"role": "coordinator", "mechanism": "environment-variable",
             "name": "CHECKPOINT_KEY", "template": f"$${CHECKPOINT_SECRET}$$"},
            {"role": "coordinator", "mechanism": "environment-variable",
             "name": "VALIDATION_KEY", "template": f"$${VALIDATION_SECRET}$$"},
        ],
    }
    if validation_hash is not None:
        doc["validation_dataset_hash"] = validation_hash.hex()
    return canonical_bytes(doc).decode("utf-8")


def scaling_attack(factor: float):
    """Update transform modeling a poisoning client that rescales its
    trained parameters before submission."""
    def transform(update):
        return make_update(update.client_id, update.round_index,
                           update.params * factor, update.num_examples)
    return transform


@dataclass
class DemoResult:
    workdir: Path
    model: GlobalModel | None
    policy_hash: bytes
    coordinator: Coordinator
    agents: list[ClientAgent]
    capture: CaptureLog | None
    audit_paths: dict[str, Path]
    sensitive: dict[str, bytes] = field(default_factory=dict)
    rejected: dict[str, str] = field(default_factory=dict)

    def flags_by_round(self) -> dict[int, list[str]]:
        return {rec.round_index: rec.flags for rec in self.coordinator.records}


def _partition_seeds(seed: int, labels: list[str]) -> dict[str, int]:
    return {
        label: int.from_bytes(sha256(canonical_bytes([seed, label]))[:4], "big")
        for label in labels
    }


def run_demo(workdir: str | Path, *, num_clients: int = 3,
             rows_per_client: int = 200, dim: int = 8, seed: int = 7,
             separation: float = 2.0, session: SessionConfig | None = None,
             capture: CaptureLog | None = None,
             attacker_id: str | None = None, attack_factor: float = -10.0,
             unpinned_client_id: str | None = None,
             round_deadline: float = 30.0) -> DemoResult:
    """Stand up the full deployment in one process and run the session.

    ``attacker_id`` makes that client submit updates scaled by
    ``attack_factor``; ``unpinned_client_id`` adds an extra, non-roster
    participant running a modified code bundle (its admission must fail).
    """
    workdir = Path(workdir)
    manager_dir = workdir / "manager"
    coordinator_dir = workdir / "coordinator"
    clients_dir = workdir / "clients"
    for d in (manager_dir, coordinator_dir, clients_dir):
        d.mkdir(parents=True, exist_ok=True)

    platform = generate_platform()
    root = platform.root_public_key
    manager_enclave = spawn_enclave(platform, MANAGER_BUNDLE, ROLE_CONFIG)
    coordinator_enclave = spawn_enclave(platform, COORDINATOR_BUNDLE, ROLE_CONFIG)

    counter_service = CounterService(manager_dir / "counters.wal",
                                     generate_signing_key())
    manager = PolicyManager(manager_dir, manager_enclave, root)

    hub = Hub(capture)
    endpoint = ServiceEndpoint(hub.listen("manager"), manager, counter_service,
                               manager_enclave, root)
    endpoint.start()

    client_ids = [f"client-{i + 1}" for i in range(num_clients)]
    data_seeds = _partition_seeds(seed, client_ids + ["validation"])
    datasets = {cid: synthetic_dataset(rows_per_client, dim, data_seeds[cid],
                                       separation=separation)
                for cid in client_ids}
    validation = synthetic_dataset(rows_per_client * 2, dim,
                                   data_seeds["validation"],
                                   separation=separation)
    csv_blobs = {cid: dataset_to_csv_bytes(ds) for cid, ds in datasets.items()}
    validation_csv = dataset_to_csv_bytes(validation)

    measurements = role_measurements()
    if session is None:
        session = SessionConfig(
            min_clients=min(2, num_clients), max_rounds=5,
            target_accuracy=0.99, convergence_epsilon=1e-9, patience=3,
            learning_rate=0.1, local_epochs=2, batch_size=32,
            clone_count=num_clients, clone_subset_size=num_clients - 1,
            outlier_threshold=0.02, rng_seed=seed)
    roster = [(cid, sha256(csv_blobs[cid])) for cid in client_ids]
    document = author_policy("desk-scale-session", measurements, roster, session,
                             validation_hash=sha256(validation_csv))

    manager_policy = AttestationPolicy(
        trusted_root=root,
        expected_measurements=frozenset({measurements["policy_manager_self"]}))
    coordinator_policy = AttestationPolicy(
        trusted_root=root,
        expected_measurements=frozenset({measurements["coordinator"]}))

    sensitive: dict[str, bytes] = {}
    for cid in client_ids:
        lines = csv_blobs[cid].split(b"\n")
        sensitive[f"dataset-row:{cid}"] = lines[1]
        sensitive[f"dataset-tail:{cid}"] = lines[-2]
    sensitive["validation-row"] = validation_csv.split(b"\n")[1]

    # Client platforms share the deployment root in this desk simulation;
    # the first roster client uploads the agreed policy after attesting the
    # manager, then secrets are generated inside the manager enclave.
    client_enclaves = {cid: spawn_enclave(platform, CLIENT_BUNDLE, ROLE_CONFIG)
                       for cid in client_ids}
    uploader = connect_manager(
        client_enclaves[client_ids[0]], hub.connect("manager"),
        manager_policy, role="client",
        counter_public_key=counter_service.public_key)
    policy_hash = uploader.upload_policy(document)
    uploader.generate_secrets(policy_hash)
    uploader.close()

    agents: list[ClientAgent] = []
    for cid in client_ids:
        mgr = connect_manager(client_enclaves[cid], hub.connect("manager"),
                              manager_policy, role="client",
                              counter_public_key=counter_service.public_key)
        bundle = mgr.request_secrets(policy_hash, "client")
        dataset_key = bundle.key_bytes("DATASET_KEY")
        sensitive.setdefault("secret:dataset-key", dataset_key)
        sensitive.setdefault("secret:dataset-key-hex",
                             dataset_key.hex().encode("ascii"))
        token = mgr.counter_create()
        shielded = shield_encrypt(csv_blobs[cid], dataset_key,
                                  secret_key_id(policy_hash, DATASET_SECRET),
                                  token, counter_service.public_key)
        data_path = clients_dir / cid / "data.sfl"
        data_path.parent.mkdir(parents=True, exist_ok=True)
        write_shielded(data_path, shielded)
        freshness = verified_stable_lookup(mgr.counter_read,
                                           counter_service.public_key)
        plaintext = shield_decrypt(read_shielded(data_path), dataset_key, freshness)
        mgr.close()
        agent = ClientAgent(
            cid, client_enclaves[cid], dataset_from_csv_bytes(plaintext),
            sha256(plaintext), session, coordinator_policy,
            update_transform=(scaling_attack(attack_factor)
                              if cid == attacker_id else None))
        agents.append(agent)

    coordinator_manager = connect_manager(
        coordinator_enclave, hub.connect("manager"), manager_policy,
        role="coordinator", counter_public_key=counter_service.public_key)
    coord_bundle = coordinator_manager.request_secrets(policy_hash, "coordinator")
    checkpoint_key = coord_bundle.key_bytes("CHECKPOINT_KEY")
    validation_key = coord_bundle.key_bytes("VALIDATION_KEY")
    sensitive["secret:checkpoint-key"] = checkpoint_key
    sensitive["secret:checkpoint-key-hex"] = checkpoint_key.hex().encode("ascii")
    sensitive["secret:validation-key"] = validation_key

    val_token = coordinator_manager.counter_create()
    val_shielded = shield_encrypt(validation_csv, validation_key,
                                  secret_key_id(policy_hash, VALIDATION_SECRET),
                                  val_token, counter_service.public_key)
    write_shielded(coordinator_dir / "validation.sfl", val_shielded)
    val_freshness = verified_stable_lookup(coordinator_manager.counter_read,
                                           counter_service.public_key)
    validation_plain = shield_decrypt(read_shielded(coordinator_dir / "validation.sfl"),
                                      validation_key, val_freshness)
    validation_ds = dataset_from_csv_bytes(validation_plain)

    policy = manager.get_policy(policy_hash)
    coordinator = Coordinator(policy, coordinator_enclave, coordinator_dir,
                              root, validation_ds, checkpoint_key,
                              coordinator_manager,
                              round_deadline=round_deadline)

    listener = hub.listen("coordinator")
    expected = num_clients
    accept_thread = threading.Thread(
        target=coordinator.accept_clients,
        kwargs={"listener": listener, "expected": expected, "deadline": 60.0},
        daemon=True)
    accept_thread.start()

    rejected: dict[str, str] = {}
    if unpinned_client_id is not None:
        bad_enclave = spawn_enclave(platform, CLIENT_BUNDLE + b" (modified)",
                                    ROLE_CONFIG)
        bad_agent = ClientAgent(unpinned_client_id, bad_enclave,
                                datasets[client_ids[0]], roster[0][1],
                                session, coordinator_policy)
        try:
            bad_agent.join(hub.connect("coordinator", label="unpinned"))
        except FedShieldError as exc:
            rejected[unpinned_client_id] = type(exc).__name__

    for agent in agents:
        agent.join(hub.connect("coordinator", label=f"client:{agent.client_id}"))
    accept_thread.join(timeout=60.0)

    agent_threads = [threading.Thread(target=agent.run, daemon=True)
                     for agent in agents]
    for thread in agent_threads:
        thread.start()

    model = coordinator.run_session()
    for thread in agent_threads:
        thread.join(timeout=60.0)
    coordinator_manager.close()
    endpoint.stop()
    counter_service.close()

    for agent in agents:
        for i, blob in enumerate(agent.sent_update_blobs):
            sensitive[f"update:{agent.client_id}:{i}"] = blob

    return DemoResult(
        workdir=workdir,
        model=model,
        policy_hash=policy_hash,
        coordinator=coordinator,
        agents=agents,
        capture=capture,
        audit_paths={
            "coordinator": coordinator_dir / "audit.log",
            "manager": manager_dir / "audit.log",
        },
        sensitive=sensitive,
        rejected=rejected,
    )


def scan_tree(root: str | Path, patterns: dict[str, bytes]) -> list[str]:
    """Find any sensitive pattern in any file under ``root``.

    Returns ``file:pattern-name`` findings; an empty list means the scan
    is clean. Patterns shorter than 16 bytes are rejected because short
    strings can collide by chance.
    """
    findings = []
    for path in sorted(Path(root).rglob("*")):
        if not path.is_file():
            continue
        blob = path.read_bytes()
        for name, pattern in patterns.items():
            if len(pattern) < 16:
                raise ValueError(f"pattern {name!r} is too short to scan for")
            if pattern in blob:
                findings.append(f"{path}:{name}")
    return findings


def scan_capture(capture: CaptureLog, patterns: dict[str, bytes]) -> list[str]:
    """Find any sensitive pattern in the recorded wire traffic."""
    wire = capture.all_bytes()
    findings = []
    for name, pattern in patterns.items():
        if len(pattern) < 16:
            raise ValueError(f"pattern {name!r} is too short to scan for")
        if pattern in wire:
            findings.append(f"wire:{name}")
    return findings
