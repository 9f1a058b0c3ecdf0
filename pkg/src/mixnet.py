# src/mixnet.py
"""
Onion-layered envelopes and batching mix servers.

Wire format (big-endian, bit-exact):
    envelope        = version (1 byte) || remaining layers (1 byte) || layered blob
    deposit record  = address (32 bytes) || ciphertext length (2 bytes) || ciphertext

A sender wraps a deposit record once per server, innermost layer for the
last server. Each server peels exactly one layer, waits until its buffer
holds a full batch, and forwards the batch in a uniformly random order.
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.crypto_suite import KEY_BYTES
from src.errors import ConfigError, ProtocolError
from src.mailbox import DailyQuota

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
ADDRESS_BYTES = 32
MAX_LAYERS = 255
MAX_CIPHERTEXT = 0xFFFF


@dataclass(frozen=True)
class MixEnvelope:
    remaining_layers: int
    blob: bytes

    def encode(self):
        if not 0 <= self.remaining_layers <= MAX_LAYERS:
            raise ProtocolError(f"layer count {self.remaining_layers} does not fit one byte")
        return bytes((WIRE_VERSION, self.remaining_layers)) + self.blob

    @classmethod
    def decode(cls, data):
        if len(data) < 2:
            raise ProtocolError("envelope shorter than its header")
        if data[0] != WIRE_VERSION:
            raise ProtocolError(f"unsupported envelope version {data[0]}")
        return cls(data[1], bytes(data[2:]))


@dataclass(frozen=True)
class DepositRecord:
    address: bytes
    ciphertext: bytes

    def encode(self):
        if len(self.address) != ADDRESS_BYTES:
            raise ProtocolError(f"mailbox address must be {ADDRESS_BYTES} bytes")
        if len(self.ciphertext) > MAX_CIPHERTEXT:
            raise ProtocolError("ciphertext exceeds the 2-byte length field")
        return self.address + len(self.ciphertext).to_bytes(2, "big") + self.ciphertext

    @classmethod
    def decode(cls, data):
        if len(data) < ADDRESS_BYTES + 2:
            raise ProtocolError("deposit record shorter than its header")
        length = int.from_bytes(data[ADDRESS_BYTES:ADDRESS_BYTES + 2], "big")
        body = bytes(data[ADDRESS_BYTES + 2:])
        if len(body) != length:
            raise ProtocolError(f"deposit length field says {length}, body has {len(body)} bytes")
        return cls(bytes(data[:ADDRESS_BYTES]), body)


def onion_encrypt(suite, payload, address, server_publics):
    """Wrap (address, payload) for servers 1..N, outermost layer for server 1."""
    if len(server_publics) == 0:
        raise ConfigError("transport.mix_servers", "at least one mix server is required")
    if len(server_publics) > MAX_LAYERS:
        raise ConfigError("transport.mix_servers", f"at most {MAX_LAYERS} mix servers are supported")
    blob = DepositRecord(address, payload).encode()
    for public in reversed(server_publics):
        blob = suite.layer_seal(public, blob)
    return MixEnvelope(len(server_publics), blob)


def peel(suite, keypair, envelope):
    """Remove one layer; the last layer yields the DepositRecord."""
    if envelope.remaining_layers < 1:
        raise ProtocolError("envelope has no layers left")
    inner = suite.layer_open(keypair, envelope.blob)
    if envelope.remaining_layers == 1:
        return DepositRecord.decode(inner)
    return MixEnvelope(envelope.remaining_layers - 1, inner)


class MixServer:
    """One mix in the chain.

    Attributes:
        position: 1-based place in the chain
        batch_threshold: buffer size that triggers a flush
        dropped: envelopes discarded because they failed to decode or decrypt
    """

    def __init__(self, position, suite, keypair=None, batch_threshold=8, rng=None,
                 ingress_quota=None, net_id=None):
        if batch_threshold < 1:
            raise ConfigError("transport.batch_threshold", "must be at least 1")
        self.position = position
        self.suite = suite
        self.keypair = keypair or suite.generate_keypair()
        self.batch_threshold = batch_threshold
        self.rng = rng if rng is not None else np.random.default_rng(position)
        self.ingress = DailyQuota(ingress_quota) if ingress_quota else None
        self.net_id = net_id or f"mix-{position}"
        self.buffer = []
        self.dropped = 0
        self.throttled = 0
        self.forwarded = 0
        self.batches = 0

    @property
    def public(self):
        return self.keypair.public

    def receive(self, envelope, sender_net_id=None, day=0):
        """Buffer one envelope (bytes or MixEnvelope); False if it was refused."""
        if self.ingress is not None and sender_net_id is not None \
                and not self.ingress.allow(sender_net_id, day):
            self.throttled += 1
            return False
        if not isinstance(envelope, MixEnvelope):
            try:
                envelope = MixEnvelope.decode(envelope)
            except ProtocolError:
                self.dropped += 1
                return False
        self.buffer.append((envelope, sender_net_id))
        return True

    def ready(self):
        return len(self.buffer) >= self.batch_threshold

    def _peel_all(self, batch):
        outputs = []
        for envelope, sender in batch:
            try:
                outputs.append((peel(self.suite, self.keypair, envelope), sender))
            except ProtocolError:
                self.dropped += 1
        return outputs

    def flush(self, force=False):
        """Peel and shuffle the whole buffer once it holds a full batch, or at once when forced."""
        if not self.buffer or (not force and not self.ready()):
            return []
        batch, self.buffer = self.buffer, []
        outputs = [item for item, _ in self._peel_all(batch)]
        order = self.rng.permutation(len(outputs))
        outputs = [outputs[i] for i in order]
        self.forwarded += len(outputs)
        self.batches += 1
        logger.debug("MIX_BATCH_FLUSHED", extra={"position": self.position, "size": len(batch),
                                                 "forwarded": len(outputs), "dropped": self.dropped})
        return outputs


class DroppingMixServer(MixServer):
    """Tracking attack: forwards only one sender's messages, garbage in place of the rest.

    The batch size is preserved so downstream servers cannot tell.
    """

    def __init__(self, *args, target_net_id=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.target_net_id = target_net_id
        self.suppressed = 0

    def _garbage_like(self, item):
        if isinstance(item, DepositRecord):
            return DepositRecord(self.rng.bytes(ADDRESS_BYTES), self.rng.bytes(len(item.ciphertext)))
        return MixEnvelope(item.remaining_layers, self.rng.bytes(max(len(item.blob), KEY_BYTES)))

    def _peel_all(self, batch):
        outputs = []
        for item, sender in super()._peel_all(batch):
            if sender != self.target_net_id:
                item = self._garbage_like(item)
                self.suppressed += 1
            outputs.append((item, sender))
        return outputs


def mix_process(server, incoming):
    """Receive `incoming` envelopes, then flush if a full batch is buffered."""
    for envelope in incoming:
        server.receive(envelope)
    return server.flush()
