"""Attested service endpoint hosting the policy manager and counter service.

One listener serves both components: request types 10-12 dispatch to the
policy manager, 20-22 to the counter service. They remain distinct trust
anchors (the counter service signs tokens with its own key); co-hosting is
purely a deployment convenience. Inbound handshakes pin no measurement:
callers attest the service, and the service gates secret release on the
in-band quote presented with each request, verified against the freshness
nonce this endpoint issued during that channel's handshake.
"""

from __future__ import annotations

import logging
import threading

from . import protocol
from .attestation import AttestationPolicy, ROLE_POLICY_MANAGER, attested_handshake
from .counters import CounterService, CounterToken
from .enclave import Enclave, Quote
from .encoding import b64, unb64, unhex
from .errors import (
    AccessDeniedError,
    AlreadyGeneratedError,
    DecodeError,
    FedShieldError,
    NotFoundError,
    PolicyConflictError,
    PolicyInvalidError,
    RoleUnknownError,
    TemplateError,
    TransportClosedError,
)
from .policy import InjectionBundle, PolicyManager

logger = logging.getLogger(__name__)

_ERROR_KINDS = [
    (PolicyInvalidError, "policy-invalid"),
    (PolicyConflictError, "policy-conflict"),
    (AlreadyGeneratedError, "already-generated"),
    (RoleUnknownError, "role-unknown"),
    (TemplateError, "template-error"),
    (NotFoundError, "not-found"),
    (DecodeError, "decode"),
]


def _error_kind(exc: FedShieldError) -> str:
    for klass, kind in _ERROR_KINDS:
        if isinstance(exc, klass):
            return kind
    return "internal"


class ServiceEndpoint:
    """Accept loop for the manager/counter endpoint."""

    def __init__(self, listener, manager: PolicyManager,
                 counters: CounterService, enclave: Enclave,
                 trusted_root: bytes):
        self.listener = listener
        self.manager = manager
        self.counters = counters
        self.enclave = enclave
        # Any attested peer may connect; release decisions happen per request.
        self.handshake_policy = AttestationPolicy(
            trusted_root=trusted_root, expected_measurements=None)
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self._accept_loop, daemon=True,
                                  name="service-endpoint")
        thread.start()
        self._threads.append(thread)
        return thread

    def stop(self) -> None:
        self._stop.set()
        self.listener.close()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                transport = self.listener.accept(timeout=0.2)
            except TimeoutError:
                continue
            except (TransportClosedError, OSError):
                return
            thread = threading.Thread(target=self._serve_connection,
                                      args=(transport,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_connection(self, transport) -> None:
        try:
            channel = attested_handshake(
                self.enclave, transport, self.handshake_policy,
                role=ROLE_POLICY_MANAGER)
        except (FedShieldError, TimeoutError) as exc:
            logger.info("service handshake failed: %s", exc)
            return
        try:
            while True:
                mtype, body = protocol.recv_message(channel, timeout=None)
                self._dispatch(channel, mtype, body)
        except (TransportClosedError, FedShieldError):
            channel.close()

    def _dispatch(self, channel, mtype: int, body: dict) -> None:
        try:
            if mtype == protocol.UPLOAD_POLICY:
                policy_hash = self.manager.upload_policy(str(body.get("document", "")))
                protocol.send_ok(channel, {"policy_hash": policy_hash.hex()})
            elif mtype == protocol.GENERATE:
                self.manager.generate_secrets(unhex(body.get("policy_hash", ""), 32))
                protocol.send_ok(channel)
            elif mtype == protocol.REQUEST_SECRETS:
                self._handle_request_secrets(channel, body)
            elif mtype == protocol.COUNTER_CREATE:
                counter_id = self.counters.create_counter()
                token = self.counters.read_stable(counter_id)
                protocol.send_ok(channel, {"token": b64(token.to_bytes())})
            elif mtype == protocol.COUNTER_INC:
                token = self.counters.increment_async(unhex(body.get("counter_id", ""), 16))
                protocol.send_ok(channel, {"token": b64(token.to_bytes())})
            elif mtype == protocol.COUNTER_READ:
                token = self.counters.read_stable(unhex(body.get("counter_id", ""), 16))
                protocol.send_ok(channel, {"token": b64(token.to_bytes())})
            else:
                protocol.send_err(channel, "unknown-request", f"type {mtype}")
        except AccessDeniedError as exc:
            protocol.send_err(channel, "access-denied", str(exc),
                              check=exc.verdict.check)
        except FedShieldError as exc:
            protocol.send_err(channel, _error_kind(exc), str(exc))

    def _handle_request_secrets(self, channel, body: dict) -> None:
        policy_hash = unhex(body.get("policy_hash", ""), 32)
        role = str(body.get("role", ""))
        quote = Quote.from_bytes(unb64(body.get("quote", "")))
        bundle = self.manager.release_secrets(
            policy_hash, role, quote, expected_nonce=channel.local_nonce)
        protocol.send_ok(channel, {"bundle": bundle.to_dict()})


class ManagerChannel:
    """Caller-side stub for the manager/counter endpoint over one channel."""

    def __init__(self, channel, counter_public_key: bytes):
        self.channel = channel
        self.counter_public_key = counter_public_key

    def upload_policy(self, document_text: str) -> bytes:
        body = protocol.request(self.channel, protocol.UPLOAD_POLICY,
                                {"document": document_text})
        return unhex(body["policy_hash"], 32)

    def generate_secrets(self, policy_hash: bytes) -> None:
        protocol.request(self.channel, protocol.GENERATE,
                         {"policy_hash": policy_hash.hex()})

    def request_secrets(self, policy_hash: bytes, role: str,
                        quote_bytes: bytes | None = None) -> InjectionBundle:
        """Present a quote (the channel's own handshake quote by default)."""
        if quote_bytes is None:
            quote_bytes = self.channel.local_quote_bytes
        body = protocol.request(self.channel, protocol.REQUEST_SECRETS, {
            "policy_hash": policy_hash.hex(),
            "role": role,
            "quote": b64(quote_bytes),
        })
        return InjectionBundle.from_dict(body["bundle"])

    def _token(self, body: dict) -> CounterToken:
        return CounterToken.from_bytes(unb64(body["token"]))

    def counter_create(self) -> CounterToken:
        return self._token(protocol.request(self.channel, protocol.COUNTER_CREATE, {}))

    def counter_increment(self, counter_id: bytes) -> CounterToken:
        return self._token(protocol.request(self.channel, protocol.COUNTER_INC,
                                            {"counter_id": counter_id.hex()}))

    def counter_read(self, counter_id: bytes) -> CounterToken:
        return self._token(protocol.request(self.channel, protocol.COUNTER_READ,
                                            {"counter_id": counter_id.hex()}))

    def close(self) -> None:
        self.channel.close()


def connect_manager(enclave: Enclave, transport, manager_policy: AttestationPolicy,
                    role: str, counter_public_key: bytes,
                    quote_provider=None) -> ManagerChannel:
    """Attest the manager endpoint and wrap the channel in a stub."""
    channel = attested_handshake(
        enclave, transport, manager_policy, role=role,
        expected_peer_role=ROLE_POLICY_MANAGER, quote_provider=quote_provider)
    return ManagerChannel(channel, counter_public_key)
