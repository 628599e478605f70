"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import threading

import pytest

from fedshield.attestation import attested_handshake
from fedshield.enclave import generate_platform, spawn_enclave
from fedshield.transport import transport_pair

BUNDLE_A = b"test bundle: role A program bytes"
BUNDLE_B = b"test bundle: role B program bytes"
CONFIG = b"mode=test\n"


@pytest.fixture
def platform():
    return generate_platform(svn=3)


@pytest.fixture
def enclave_a(platform):
    return spawn_enclave(platform, BUNDLE_A, CONFIG)


@pytest.fixture
def enclave_b(platform):
    return spawn_enclave(platform, BUNDLE_B, CONFIG)


def run_handshake_pair(enclave_a, role_a, policy_a, enclave_b, role_b, policy_b,
                       *, capture=None, quote_provider_a=None,
                       quote_provider_b=None, timeout=10.0):
    """Drive both ends of a handshake on two threads.

    Returns (result_a, result_b) where each is either a SecureChannel or the
    exception that aborted that side.
    """
    ta, tb = transport_pair(capture)
    results = [None, None]

    def side(index, enclave, transport, policy, role, provider):
        try:
            results[index] = attested_handshake(
                enclave, transport, policy, role,
                quote_provider=provider, timeout=timeout)
        except Exception as exc:  # collected for assertions
            results[index] = exc

    threads = [
        threading.Thread(target=side,
                         args=(0, enclave_a, ta, policy_a, role_a, quote_provider_a)),
        threading.Thread(target=side,
                         args=(1, enclave_b, tb, policy_b, role_b, quote_provider_b)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout + 5)
    return results[0], results[1]
