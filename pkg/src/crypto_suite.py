# src/crypto_suite.py
"""
Cryptographic primitives behind the messaging path.

`RealCryptoSuite` uses X25519 key agreement, HKDF-SHA256 key derivation,
AES-GCM authenticated encryption and truncated HMAC-SHA256 tags.
`NullCryptoSuite` keeps the same contracts (wrong keys fail, layers must be
peeled in order) with transparent, deterministic transforms so protocol tests
and simulation runs are reproducible and fast.
"""
import hashlib
import hmac
import os
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from src.errors import ConfigError, DecryptionError, ProtocolError

KEY_BYTES = 32
TAG_BYTES = 16
NONCE_BYTES = 12
LAYER_INFO = b"covisim mix layer"


@dataclass(frozen=True)
class KeyPair:
    private: Any
    public: bytes


class CryptoSuite(Protocol):
    name: str

    def generate_keypair(self) -> KeyPair: ...

    def agree(self, keypair: KeyPair, peer_public: bytes) -> bytes: ...

    def derive(self, secret: bytes, info: bytes, length: int = KEY_BYTES) -> bytes: ...

    def seal(self, key: bytes, plaintext: bytes, aad: bytes = b"") -> bytes: ...

    def open(self, key: bytes, blob: bytes, aad: bytes = b"") -> bytes: ...

    def tag(self, key: bytes, data: bytes) -> bytes: ...

    def verify(self, key: bytes, data: bytes, tag: bytes) -> bool: ...

    def layer_seal(self, server_public: bytes, plaintext: bytes) -> bytes: ...

    def layer_open(self, keypair: KeyPair, blob: bytes) -> bytes: ...


def check_public_key(public):
    if not isinstance(public, (bytes, bytearray)) or len(public) != KEY_BYTES:
        raise ProtocolError(f"public key must be {KEY_BYTES} bytes")
    if not any(public):
        raise ProtocolError("public key is the all-zero point")
    return bytes(public)


def _hmac_tag(key, data):
    return hmac.new(key, data, hashlib.sha256).digest()[:TAG_BYTES]


class RealCryptoSuite:
    name = "real"

    def generate_keypair(self):
        private = X25519PrivateKey.generate()
        public = private.public_key().public_bytes(
            encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
        return KeyPair(private, public)

    def agree(self, keypair, peer_public):
        peer_public = check_public_key(peer_public)
        try:
            return keypair.private.exchange(X25519PublicKey.from_public_bytes(peer_public))
        except ValueError as exc:
            # low-order point: the shared secret would be all zeros
            raise ProtocolError(f"key agreement failed: {exc}") from exc

    def derive(self, secret, info, length=KEY_BYTES):
        return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(secret)

    def seal(self, key, plaintext, aad=b""):
        nonce = os.urandom(NONCE_BYTES)
        return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)

    def open(self, key, blob, aad=b""):
        if len(blob) < NONCE_BYTES + TAG_BYTES:
            raise DecryptionError("ciphertext too short")
        try:
            return AESGCM(key).decrypt(blob[:NONCE_BYTES], blob[NONCE_BYTES:], aad)
        except InvalidTag as exc:
            raise DecryptionError("authentication failed") from exc

    def tag(self, key, data):
        return _hmac_tag(key, data)

    def verify(self, key, data, tag):
        return hmac.compare_digest(_hmac_tag(key, data), tag)

    def layer_seal(self, server_public, plaintext):
        ephemeral = self.generate_keypair()
        shared = self.agree(ephemeral, server_public)
        key = self.derive(shared, LAYER_INFO + ephemeral.public + server_public)
        return ephemeral.public + self.seal(key, plaintext)

    def layer_open(self, keypair, blob):
        if len(blob) < KEY_BYTES:
            raise DecryptionError("layer too short")
        ephemeral_public, sealed = blob[:KEY_BYTES], blob[KEY_BYTES:]
        try:
            shared = self.agree(keypair, ephemeral_public)
        except ProtocolError as exc:
            raise DecryptionError(str(exc)) from exc
        key = self.derive(shared, LAYER_INFO + ephemeral_public + keypair.public)
        return self.open(key, sealed)


class NullCryptoSuite:
    """Transparent stand-in: ciphertexts carry a key prefix instead of encryption."""
    name = "null"
    SEAL_PREFIX = 4
    LAYER_PREFIX = 8

    def __init__(self, rng=None):
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def generate_keypair(self):
        private = self.rng.bytes(KEY_BYTES)
        public = hashlib.sha256(b"public" + private).digest()
        return KeyPair(private, public)

    def agree(self, keypair, peer_public):
        peer_public = check_public_key(peer_public)
        low, high = sorted((keypair.public, peer_public))
        return hashlib.sha256(low + high).digest()

    def derive(self, secret, info, length=KEY_BYTES):
        if length > KEY_BYTES:
            raise ValueError(f"null suite derives at most {KEY_BYTES} bytes")
        return hashlib.sha256(info + secret).digest()[:length]

    def seal(self, key, plaintext, aad=b""):
        return key[:self.SEAL_PREFIX] + plaintext

    def open(self, key, blob, aad=b""):
        if blob[:self.SEAL_PREFIX] != key[:self.SEAL_PREFIX] or len(blob) < self.SEAL_PREFIX:
            raise DecryptionError("wrong key")
        return blob[self.SEAL_PREFIX:]

    def tag(self, key, data):
        return key[:TAG_BYTES]

    def verify(self, key, data, tag):
        return hmac.compare_digest(key[:TAG_BYTES], tag)

    def layer_seal(self, server_public, plaintext):
        check_public_key(server_public)
        return server_public[:self.LAYER_PREFIX] + plaintext

    def layer_open(self, keypair, blob):
        if len(blob) < self.LAYER_PREFIX or blob[:self.LAYER_PREFIX] != keypair.public[:self.LAYER_PREFIX]:
            raise DecryptionError("layer addressed to another server")
        return blob[self.LAYER_PREFIX:]


def get_crypto_suite(name, rng=None):
    if name == "real":
        return RealCryptoSuite()
    if name == "null":
        return NullCryptoSuite(rng)
    raise ConfigError("transport.crypto", f"unknown crypto suite '{name}' (expected 'real' or 'null')")
