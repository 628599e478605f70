"""Coordinator service, client agent, and the attested round protocol.

The coordinator drives rounds: broadcast the global parameters, collect
client updates until the deadline, run the clone-and-sample guard,
aggregate what survives, evaluate on the policy-declared validation set,
seal a rollback-protected checkpoint, append the round record to the
hash-chained audit log, and send the committed parameters back. Clients
that fail admission receive no model material at all.

Round protocol message types: JOIN(30), MODEL_BROADCAST(31),
UPDATE_SUBMIT(32), ROUND_COMMIT(33), SESSION_END(34); payloads are
canonical JSON with parameter vectors carried base64-encoded in their
binary serialization.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import protocol
from .attestation import (
    ROLE_CLIENT,
    ROLE_COORDINATOR,
    AttestationPolicy,
    attested_handshake,
)
from .audit import AuditLog
from .enclave import Enclave
from .encoding import b64, canonical_bytes, canonical_loads, sha256, unb64, unhex
from .errors import (
    ChannelIntegrityError,
    ChannelReplayError,
    DecodeError,
    FedShieldError,
    InvalidInputError,
    RollbackDetectedError,
    RoundQuorumError,
    SessionFailedError,
    TransportClosedError,
)
from .fl import (
    Dataset,
    GlobalModel,
    ModelUpdate,
    aggregate,
    converged,
    deserialize_params,
    evaluate,
    local_train,
    make_update,
    params_hash,
    serialize_params,
)
from .outliers import clone_aggregate, flag_outliers, score_clients
from .policy import Policy, secret_key_id
from .services import ManagerChannel
from .shield import (
    read_shielded,
    shield_decrypt,
    shield_encrypt,
    verified_stable_lookup,
    write_shielded,
)

logger = logging.getLogger(__name__)

CHECKPOINT_SECRET = "checkpoint-key"
_SLOTS = ("checkpoint-a.sfl", "checkpoint-b.sfl")


def derive_training_seed(rng_seed: int, client_id: str, round_index: int) -> int:
    """Per-(client, round) seed, stable across platforms."""
    digest = sha256(canonical_bytes([rng_seed, client_id, round_index]))
    return struct.unpack(">Q", digest[:8])[0]


@dataclass(frozen=True)
class AdmissionDecision:
    client_id: str | None
    admitted: bool
    reason: str | None = None  # attestation | roster | dataset-hash


@dataclass
class RoundRecord:
    round_index: int
    admitted: list[str]
    update_hashes: dict[str, str]
    committed_hash: bytes
    accuracy: float
    loss: float
    counter_value: int
    flags: list[str] = field(default_factory=list)
    clone: dict | None = None
    dropped: dict[str, str] = field(default_factory=dict)


class ClientAgent:
    """One participant: joins over an attested channel, trains on demand.

    ``update_transform`` lets tests and demos model a malicious client that
    tampers with its update before submission. ``quote_provider`` feeds the
    handshake, so corrupted evidence can be presented end to end.
    """

    def __init__(self, client_id: str, enclave: Enclave, dataset: Dataset,
                 dataset_hash: bytes, cfg, coordinator_policy: AttestationPolicy,
                 *, update_transform=None, quote_provider=None,
                 recv_timeout: float = 120.0):
        self.client_id = client_id
        self.enclave = enclave
        self.dataset = dataset
        self.dataset_hash = dataset_hash
        self.cfg = cfg
        self.coordinator_policy = coordinator_policy
        self.update_transform = update_transform
        self.quote_provider = quote_provider
        self.recv_timeout = recv_timeout
        self.channel = None
        self.params: np.ndarray | None = None
        self.sent_update_blobs: list[bytes] = []
        self.result: dict | None = None

    def join(self, transport) -> None:
        """Attest the coordinator, present identity and dataset hash."""
        self.channel = attested_handshake(
            self.enclave, transport, self.coordinator_policy,
            role=ROLE_CLIENT, expected_peer_role=ROLE_COORDINATOR,
            quote_provider=self.quote_provider)
        protocol.request(self.channel, protocol.JOIN, {
            "client_id": self.client_id,
            "dataset_hash": self.dataset_hash.hex(),
        })

    def run(self) -> dict:
        """Participate until the coordinator ends the session."""
        if self.channel is None:
            raise InvalidInputError("join before running")
        while True:
            mtype, body = protocol.recv_message(self.channel, timeout=self.recv_timeout)
            if mtype == protocol.MODEL_BROADCAST:
                self._train_and_submit(int(body["round"]), unb64(body["params"]))
            elif mtype == protocol.ROUND_COMMIT:
                self.params = deserialize_params(unb64(body["params"]))
            elif mtype == protocol.SESSION_END:
                if body.get("params"):
                    self.params = deserialize_params(unb64(body["params"]))
                self.result = body
                self.channel.close()
                return body
            else:
                raise DecodeError(f"unexpected coordinator message {mtype}")

    def _train_and_submit(self, round_index: int, params_blob: bytes) -> None:
        start = deserialize_params(params_blob)
        seed = derive_training_seed(self.cfg.rng_seed, self.client_id, round_index)
        update = local_train(start, self.dataset, self.cfg, seed,
                             client_id=self.client_id, round_index=round_index)
        if self.update_transform is not None:
            update = self.update_transform(update)
        blob = serialize_params(update.params)
        self.sent_update_blobs.append(blob)
        protocol.send_message(self.channel, protocol.UPDATE_SUBMIT, {
            "client_id": update.client_id,
            "round": update.round_index,
            "params": b64(blob),
            "num_examples": update.num_examples,
            "params_hash": update.params_hash.hex(),
        })


class Coordinator:
    """Round driver and checkpoint owner for one federated session."""

    def __init__(self, policy: Policy, enclave: Enclave, state_dir: str | Path,
                 trusted_root: bytes, validation: Dataset,
                 checkpoint_key: bytes, manager: ManagerChannel,
                 *, round_deadline: float = 30.0, clock=time.time):
        self.policy = policy
        self.cfg = policy.session
        self.enclave = enclave
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.validation = validation
        self.checkpoint_key = checkpoint_key
        self.checkpoint_key_id = secret_key_id(policy.policy_hash, CHECKPOINT_SECRET)
        self.manager = manager
        self.round_deadline = round_deadline
        self.clock = clock
        self.client_policy = AttestationPolicy(
            trusted_root=trusted_root,
            expected_measurements=frozenset({policy.allowed_measurements["client"]}))
        self.audit = AuditLog(self.state_dir / "audit.log", clock=clock)
        self.records: list[RoundRecord] = []
        self.admitted: dict[str, object] = {}
        self._admit_lock = threading.Lock()
        self.counter_id: bytes | None = None
        self.model = GlobalModel(round_index=0,
                                 params=np.zeros(validation.dim + 1), history=[])
        self._freshness = verified_stable_lookup(
            self.manager.counter_read, self.manager.counter_public_key)
        self._resume_or_init()

    # -- checkpointing -----------------------------------------------------

    def _slot_path(self, round_index: int) -> Path:
        return self.state_dir / _SLOTS[round_index % 2]

    def _checkpoint_plaintext(self) -> bytes:
        return canonical_bytes({
            "history": [[r, acc, loss] for r, acc, loss in self.model.history],
            "params": b64(serialize_params(self.model.params)),
            "policy_hash": self.policy.policy_hash.hex(),
            "round": self.model.round_index,
        })

    def _write_checkpoint(self) -> tuple[bytes, int]:
        token = self.manager.counter_increment(self.counter_id)
        plaintext = self._checkpoint_plaintext()
        shielded = shield_encrypt(plaintext, self.checkpoint_key,
                                  self.checkpoint_key_id, token,
                                  self.manager.counter_public_key)
        write_shielded(self._slot_path(self.model.round_index), shielded)
        stable = self._freshness(self.counter_id)
        if stable != token.value:
            raise RollbackDetectedError(
                f"checkpoint counter did not stabilize at {token.value}")
        return sha256(plaintext), token.value

    def _resume_or_init(self) -> None:
        existing = [p for p in (self.state_dir / s for s in _SLOTS) if p.exists()]
        if not existing:
            self.counter_id = self.manager.counter_create().counter_id
            return
        rollbacks = 0
        for path in existing:
            shielded = read_shielded(path)
            try:
                plaintext = shield_decrypt(shielded, self.checkpoint_key, self._freshness)
            except RollbackDetectedError:
                rollbacks += 1
                continue
            doc = canonical_loads(plaintext)
            if doc["policy_hash"] != self.policy.policy_hash.hex():
                raise InvalidInputError("checkpoint belongs to a different policy")
            self.model = GlobalModel(
                round_index=int(doc["round"]),
                params=deserialize_params(unb64(doc["params"])),
                history=[(int(r), float(a), float(l)) for r, a, l in doc["history"]],
            )
            self.counter_id = shielded.header.counter_id
            self.audit.append("resume", {"round": self.model.round_index})
            return
        if rollbacks:
            raise RollbackDetectedError(
                "every checkpoint candidate is stale; refusing to resume")
        raise InvalidInputError("no decryptable checkpoint found")

    # -- admission ---------------------------------------------------------

    def handle_join(self, transport) -> AdmissionDecision:
        """Admit or reject one connecting client. Rejected clients get an
        error response (or a closed transport) and never any model bytes."""
        try:
            channel = attested_handshake(
                self.enclave, transport, self.client_policy,
                role=ROLE_COORDINATOR, expected_peer_role=ROLE_CLIENT)
        except (FedShieldError, TimeoutError) as exc:
            decision = AdmissionDecision(None, False, "attestation")
            self.audit.append("admission", {
                "client_id": None, "admitted": False, "reason": "attestation",
                "detail": getattr(exc, "check", str(exc)),
            })
            return decision
        try:
            mtype, body = protocol.recv_message(channel, timeout=self.round_deadline)
        except (FedShieldError, TimeoutError):
            channel.close()
            return AdmissionDecision(None, False, "attestation")
        client_id = str(body.get("client_id", "")) if mtype == protocol.JOIN else None
        reason = None
        if mtype != protocol.JOIN or not client_id:
            reason = "roster"
        elif self.policy.roster_hash(client_id) is None or client_id in self.admitted:
            reason = "roster"
        else:
            try:
                presented = unhex(body.get("dataset_hash", ""), 32)
            except DecodeError:
                presented = b""
            if presented != self.policy.roster_hash(client_id):
                reason = "dataset-hash"
        if reason is not None:
            protocol.send_err(channel, "admission-rejected", reason)
            channel.close()
            decision = AdmissionDecision(client_id, False, reason)
        else:
            with self._admit_lock:
                self.admitted[client_id] = channel
            protocol.send_ok(channel, {"admitted": True})
            decision = AdmissionDecision(client_id, True)
        self.audit.append("admission", {
            "client_id": client_id,
            "admitted": decision.admitted,
            "reason": decision.reason,
        })
        return decision

    def accept_clients(self, listener, *, expected: int | None = None,
                       deadline: float = 30.0) -> None:
        """Accept joins until the roster (or ``expected``) is admitted."""
        want = expected if expected is not None else len(self.policy.roster)
        end = self.clock() + deadline
        while len(self.admitted) < want and self.clock() < end:
            try:
                transport = listener.accept(timeout=0.2)
            except TimeoutError:
                continue
            except TransportClosedError:
                return
            self.handle_join(transport)

    # -- rounds ------------------------------------------------------------

    def _broadcast(self, mtype: int, body: dict) -> None:
        for client_id in sorted(self.admitted):
            channel = self.admitted[client_id]
            try:
                protocol.send_message(channel, mtype, body)
            except FedShieldError:
                logger.info("broadcast to %s failed", client_id)

    def _collect_updates(self, round_index: int
                         ) -> tuple[dict[str, ModelUpdate], dict[str, str]]:
        updates: dict[str, ModelUpdate] = {}
        dropped: dict[str, str] = {}
        deadline = self.clock() + self.round_deadline
        for client_id in sorted(self.admitted):
            channel = self.admitted[client_id]
            budget = max(deadline - self.clock(), 0.05)
            try:
                mtype, body = protocol.recv_message(channel, timeout=budget)
                updates[client_id] = self._parse_update(client_id, round_index,
                                                        mtype, body)
            except TimeoutError:
                dropped[client_id] = "timeout"
            except (ChannelIntegrityError, ChannelReplayError, DecodeError,
                    TransportClosedError) as exc:
                dropped[client_id] = type(exc).__name__
                self.admitted.pop(client_id, None)
            except FedShieldError as exc:
                dropped[client_id] = str(exc)
        return updates, dropped

    def _parse_update(self, client_id: str, round_index: int, mtype: int,
                      body: dict) -> ModelUpdate:
        if mtype != protocol.UPDATE_SUBMIT:
            raise DecodeError(f"expected update, got message type {mtype}")
        if body.get("client_id") != client_id:
            raise DecodeError("update claims a different client id")
        try:
            round_claim = int(body.get("round", -1))
            num_examples = int(body.get("num_examples", 0))
        except (TypeError, ValueError) as exc:
            raise DecodeError(f"malformed update fields: {exc}") from exc
        if round_claim != round_index:
            raise DecodeError("update is for a different round")
        params = deserialize_params(unb64(body.get("params", "")))
        declared = unhex(body.get("params_hash", ""), 32)
        if params_hash(params) != declared:
            raise DecodeError("update hash mismatch")
        if params.shape != (self.validation.dim + 1,):
            raise DecodeError("update dimension mismatch")
        return make_update(client_id, round_index, params, num_examples)

    def _run_guard(self, round_index: int, updates: dict[str, ModelUpdate]
                   ) -> tuple[set[str], dict | None]:
        if self.cfg.clone_count < 1 or len(updates) < 2:
            return set(), None
        k, m = self.cfg.clone_count, self.cfg.clone_subset_size
        if m < 1 or m >= len(updates):
            # attendance shrank below the configured subset size; fall back
            # to exhaustive leave-one-out over whoever responded
            k, m = len(updates), len(updates) - 1
        cfg = replace(self.cfg, clone_count=k, clone_subset_size=m)
        runs = clone_aggregate(list(updates.values()), self.validation, cfg,
                               round_seed=round_index)
        scores = score_clients(runs, sorted(updates))
        flags = flag_outliers(scores, self.cfg.outlier_threshold)
        payload = {
            "clones": [
                {"subset": sorted(run.subset), "utility": run.utility}
                for run in runs
            ],
            "scores": {
                s.client_id: s.score for s in scores
            },
            "flags": sorted(flags),
            "seed": [self.cfg.rng_seed, round_index],
        }
        return flags, payload

    def run_round(self, round_index: int) -> RoundRecord:
        """One broadcast-train-collect-aggregate-commit cycle."""
        self._broadcast(protocol.MODEL_BROADCAST, {
            "round": round_index,
            "params": b64(serialize_params(self.model.params)),
        })
        updates, dropped = self._collect_updates(round_index)
        if len(updates) < self.cfg.min_clients:
            raise RoundQuorumError(
                f"round {round_index}: {len(updates)} updates, "
                f"need {self.cfg.min_clients}")
        flags, clone_payload = self._run_guard(round_index, updates)
        kept = [updates[cid] for cid in sorted(updates) if cid not in flags]
        if not kept:
            raise RoundQuorumError(f"round {round_index}: every update was flagged")
        new_params = aggregate(kept)
        accuracy, loss = evaluate(new_params, self.validation)
        self.model.round_index = round_index
        self.model.params = new_params
        self.model.history.append((round_index, accuracy, loss))
        committed_hash, counter_value = self._write_checkpoint()
        record = RoundRecord(
            round_index=round_index,
            admitted=sorted(updates),
            update_hashes={cid: updates[cid].params_hash.hex()
                           for cid in sorted(updates)},
            committed_hash=committed_hash,
            accuracy=accuracy,
            loss=loss,
            counter_value=counter_value,
            flags=sorted(flags),
            clone=clone_payload,
            dropped=dropped,
        )
        self.records.append(record)
        self.audit.append("round", {
            "round": record.round_index,
            "admitted": record.admitted,
            "update_hashes": record.update_hashes,
            "committed_hash": record.committed_hash.hex(),
            "accuracy": record.accuracy,
            "loss": record.loss,
            "counter_value": record.counter_value,
            "flags": record.flags,
            "clone": record.clone,
            "dropped": record.dropped,
        })
        self._broadcast(protocol.ROUND_COMMIT, {
            "round": round_index,
            "params": b64(serialize_params(new_params)),
            "accuracy": accuracy,
            "loss": loss,
        })
        return record

    def _convergence_reason(self) -> str:
        _, accuracy, _ = self.model.history[-1]
        if accuracy >= self.cfg.target_accuracy:
            return "target-reached"
        if len(self.model.history) >= self.cfg.patience + 1:
            tail = [loss for _, _, loss in self.model.history[-(self.cfg.patience + 1):]]
            deltas = [tail[i + 1] - tail[i] for i in range(len(tail) - 1)]
            if all(abs(d) < self.cfg.convergence_epsilon for d in deltas):
                return "loss-plateau"
        return "max-rounds"

    def run_session(self) -> GlobalModel:
        """Loop rounds until the stop rule fires; audit everything."""
        self.audit.append("session-start", {
            "policy_hash": self.policy.policy_hash.hex(),
            "starting_round": self.model.round_index,
        })
        try:
            while True:
                record = self.run_round(self.model.round_index + 1)
                if converged(self.model.history, self.cfg):
                    reason = self._convergence_reason()
                    break
        except RoundQuorumError as exc:
            self.audit.append("session-failed", {"reason": str(exc)})
            self._broadcast(protocol.SESSION_END,
                            {"status": "failed", "reason": str(exc), "params": None})
            self._close_clients()
            raise SessionFailedError(str(exc)) from exc
        self.audit.append("session-end", {
            "reason": reason,
            "round": record.round_index,
            "committed_hash": record.committed_hash.hex(),
        })
        self._broadcast(protocol.SESSION_END, {
            "status": "converged",
            "reason": reason,
            "round": record.round_index,
            "params": b64(serialize_params(self.model.params)),
        })
        self._close_clients()
        return self.model

    def _close_clients(self) -> None:
        for channel in self.admitted.values():
            channel.close()
        self.admitted.clear()
