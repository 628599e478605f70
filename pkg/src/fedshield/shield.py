"""Authenticated-encryption file container with counter-bound freshness.

Header layout (big-endian, 59 bytes):

    magic "SFL1" 4B | version u16 | aead_alg u8 | key_id 16B |
    counter_id 16B | counter_value u64 | nonce 12B

The body is AES-256-GCM ciphertext+tag over the payload with the exact
header bytes as associated data, so any header mutation fails
authentication before freshness is even considered. Decryption succeeds
only when the embedded counter value equals the stable counter value:
strict equality detects both rollback and forward-dating, since every
authorized overwrite increments the counter by one.

File extension: ``.sfl``. This module never stores keys; key ids resolve
through the policy manager's injected secrets.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .counters import COUNTER_ID_LEN, CounterToken, verify_token
from .errors import (
    DecodeError,
    FreshnessTokenError,
    IntegrityError,
    InvalidInputError,
    RollbackDetectedError,
)

MAGIC = b"SFL1"
VERSION = 1
AEAD_AES_256_GCM = 1
KEY_ID_LEN = 16
NONCE_LEN = 12
HEADER_LEN = 4 + 2 + 1 + KEY_ID_LEN + COUNTER_ID_LEN + 8 + NONCE_LEN
FILE_EXT = ".sfl"


@dataclass(frozen=True)
class ShieldHeader:
    version: int
    aead_alg: int
    key_id: bytes
    counter_id: bytes
    counter_value: int
    nonce: bytes

    def to_bytes(self) -> bytes:
        return (MAGIC + struct.pack(">HB", self.version, self.aead_alg)
                + self.key_id + self.counter_id
                + struct.pack(">Q", self.counter_value) + self.nonce)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ShieldHeader":
        if len(data) < HEADER_LEN:
            raise DecodeError("shielded file shorter than header")
        if data[:4] != MAGIC:
            raise DecodeError("bad shielded-file magic")
        version, aead_alg = struct.unpack(">HB", data[4:7])
        if version != VERSION:
            raise DecodeError(f"unsupported shielded-file version {version}")
        off = 7
        key_id = data[off:off + KEY_ID_LEN]; off += KEY_ID_LEN
        counter_id = data[off:off + COUNTER_ID_LEN]; off += COUNTER_ID_LEN
        (counter_value,) = struct.unpack(">Q", data[off:off + 8]); off += 8
        nonce = data[off:off + NONCE_LEN]
        return cls(version, aead_alg, key_id, counter_id, counter_value, nonce)


@dataclass(frozen=True)
class ShieldedFile:
    header: ShieldHeader
    body: bytes  # ciphertext + tag

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ShieldedFile":
        header = ShieldHeader.from_bytes(data)
        return cls(header, data[HEADER_LEN:])


def shield_encrypt(plaintext: bytes, key: bytes, key_id: bytes,
                   counter_token: CounterToken, service_public_key: bytes,
                   *, nonce: bytes | None = None) -> ShieldedFile:
    """Seal a payload under a key and bind it to a counter state.

    The token may be provisional or stable; it must verify under the
    counter service key and carry a positive value. Readers will require
    the embedded value to have become the stable one.
    """
    if len(key) != 32:
        raise InvalidInputError("shield key must be 32 bytes")
    if len(key_id) != KEY_ID_LEN:
        raise InvalidInputError("key_id must be 16 bytes")
    if not verify_token(counter_token, service_public_key):
        raise FreshnessTokenError("counter token signature does not verify")
    if counter_token.value < 1:
        raise FreshnessTokenError("counter token value must be positive")
    if nonce is None:
        nonce = os.urandom(NONCE_LEN)
    elif len(nonce) != NONCE_LEN:
        raise InvalidInputError("nonce must be 12 bytes")
    header = ShieldHeader(VERSION, AEAD_AES_256_GCM, key_id,
                          counter_token.counter_id, counter_token.value, nonce)
    header_bytes = header.to_bytes()
    body = AESGCM(key).encrypt(nonce, plaintext, header_bytes)
    return ShieldedFile(header, body)


def shield_decrypt(shielded: ShieldedFile, key: bytes,
                   freshness_check: Callable[[bytes], int]) -> bytes:
    """Open a shielded file iff the tag verifies and the file is current.

    ``freshness_check(counter_id) -> stable value`` is the caller's counter
    lookup, typically a verified read against the counter service. Stale or
    forward-dated files raise ``RollbackDetectedError`` after the tag check.
    """
    if len(key) != 32:
        raise InvalidInputError("shield key must be 32 bytes")
    header_bytes = shielded.header.to_bytes()
    try:
        plaintext = AESGCM(key).decrypt(shielded.header.nonce, shielded.body, header_bytes)
    except InvalidTag as exc:
        raise IntegrityError("shielded file failed authentication") from exc
    stable = freshness_check(shielded.header.counter_id)
    if shielded.header.counter_value != stable:
        raise RollbackDetectedError(
            f"file written at counter {shielded.header.counter_value}, "
            f"stable value is {stable}")
    return plaintext


def write_shielded(path, shielded: ShieldedFile) -> None:
    with open(path, "wb") as fh:
        fh.write(shielded.to_bytes())


def read_shielded(path) -> ShieldedFile:
    with open(path, "rb") as fh:
        return ShieldedFile.from_bytes(fh.read())


def verified_stable_lookup(read_stable: Callable[[bytes], CounterToken],
                           service_public_key: bytes) -> Callable[[bytes], int]:
    """Wrap a stable-read function into a freshness check that verifies
    token signatures at the consumer."""
    def lookup(counter_id: bytes) -> int:
        token = read_stable(counter_id)
        if not verify_token(token, service_public_key):
            raise FreshnessTokenError("stable counter token failed verification")
        if not token.stable:
            raise FreshnessTokenError("counter token is not stable")
        if token.counter_id != counter_id:
            raise FreshnessTokenError("counter token is for a different counter")
        return token.value
    return lookup
