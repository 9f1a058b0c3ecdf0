# src/messaging.py
"""
Phone-to-phone risk messaging over the mix chain.

Flow for one encounter between phones A (initiator) and B (responder):

    1. exchange_tokens: ephemeral key agreement, two directional tokens
    2. derive_mailbox(token): address + key; A sends on token_ab, reads token_ba
    3. send_risk_update: RiskUpdateMessage -> tag -> seal under mailbox key
       -> onion layers -> scheduled at now + U[0, 1) day
    4. the chain peels, batches, shuffles and deposits at the mailbox
    5. fetch_updates: B reads its incoming addresses, checks tags and counters

RiskUpdateMessage payload (big-endian):
    day (2 bytes) || new level (1) || prior level (1, 0xFF = none) || counter (4) || tag (16)
"""
import hashlib
import heapq
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from src.crypto_suite import KEY_BYTES, TAG_BYTES, get_crypto_suite
from src.errors import ConfigError, ProtocolError
from src.mailbox import MailboxServer
from src.mixnet import DroppingMixServer, MixServer, onion_encrypt
from src.risk import WINDOW_DAYS, RiskLevel

logger = logging.getLogger(__name__)

TOKEN_INFO_AB = b"covisim contact token initiator->responder"
TOKEN_INFO_BA = b"covisim contact token responder->initiator"
NO_PRIOR = 0xFF
PAYLOAD = struct.Struct(">HBBI")


@dataclass(frozen=True)
class TransportConfig:
    crypto: str = "null"
    mix_servers: int = 3
    batch_threshold: int = 8
    mailbox_quota: int = 1000
    ingress_quota: int = 1000
    max_delay_days: float = 1.0
    canary_interval_days: int = 7
    canary_timeout_days: int = 2
    mailbox_retention_days: int = 15

    def __post_init__(self):
        if self.crypto not in ("null", "real"):
            raise ConfigError("transport.crypto", f"expected 'null' or 'real', got '{self.crypto}'")
        if self.mix_servers < 1:
            raise ConfigError("transport.mix_servers", "at least one mix server is required")
        if self.batch_threshold < 1:
            raise ConfigError("transport.batch_threshold", "must be at least 1")
        for name in ("mailbox_quota", "ingress_quota", "canary_interval_days",
                     "canary_timeout_days", "mailbox_retention_days"):
            if getattr(self, name) < 1:
                raise ConfigError(f"transport.{name}", "must be at least 1")
        if not 0.0 <= self.max_delay_days <= 1.0:
            raise ConfigError("transport.max_delay_days", "delays are drawn within one day")


# ---------------------------------------------------------------------------
# Tokens and mailboxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContactTokenPair:
    token_ab: bytes   # initiator -> responder
    token_ba: bytes   # responder -> initiator

    def sending(self, initiator):
        return self.token_ab if initiator else self.token_ba

    def receiving(self, initiator):
        return self.token_ba if initiator else self.token_ab


def derive_contact_tokens(suite, own_keys, peer_public, initiator):
    shared = suite.agree(own_keys, peer_public)
    if initiator:
        context = own_keys.public + peer_public
    else:
        context = peer_public + own_keys.public
    return ContactTokenPair(suite.derive(shared, TOKEN_INFO_AB + context),
                            suite.derive(shared, TOKEN_INFO_BA + context))


def exchange_tokens(suite, initiator_keys, responder_keys):
    """Both sides derive the pair; a mismatch or malformed key aborts the contact."""
    ours = derive_contact_tokens(suite, initiator_keys, responder_keys.public, initiator=True)
    theirs = derive_contact_tokens(suite, responder_keys, initiator_keys.public, initiator=False)
    if ours != theirs:
        raise ProtocolError("contact token agreement mismatch")
    return ours


@dataclass(frozen=True)
class MailboxKeys:
    address: bytes
    key: bytes


def derive_mailbox(token):
    if len(token) != KEY_BYTES:
        raise ProtocolError(f"contact token must be {KEY_BYTES} bytes")
    return MailboxKeys(hashlib.sha256(token + b"addr").digest(), hashlib.sha256(token + b"key").digest())


@dataclass(frozen=True)
class RiskUpdateMessage:
    day: int
    new_level: int
    prior_level: Optional[int]
    counter: int

    def body(self):
        prior = NO_PRIOR if self.prior_level is None else int(RiskLevel(self.prior_level))
        try:
            return PAYLOAD.pack(self.day, int(RiskLevel(self.new_level)), prior, self.counter)
        except struct.error as exc:
            raise ProtocolError(f"message field out of range: {exc}") from exc

    def encode(self, suite, token):
        body = self.body()
        return body + suite.tag(token, body)

    @classmethod
    def decode(cls, suite, token, data):
        if len(data) != PAYLOAD.size + TAG_BYTES:
            raise ProtocolError("risk message has the wrong length")
        body, tag = data[:PAYLOAD.size], data[PAYLOAD.size:]
        if not suite.verify(token, body, tag):
            raise ProtocolError("authenticity tag mismatch")
        day, new_level, prior, counter = PAYLOAD.unpack(body)
        if new_level > 15 or (prior > 15 and prior != NO_PRIOR):
            raise ProtocolError("risk level outside 0..15")
        return cls(day, new_level, None if prior == NO_PRIOR else prior, counter)


# ---------------------------------------------------------------------------
# Chain and scheduler
# ---------------------------------------------------------------------------

class MixChain:
    """N mix servers in series feeding one mailbox server."""

    def __init__(self, suite, mailbox, n_servers=3, batch_threshold=8, ingress_quota=None,
                 rng=None, attack_target=None):
        if n_servers < 1:
            raise ConfigError("transport.mix_servers", "at least one mix server is required")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.suite = suite
        self.mailbox = mailbox
        self.servers = []
        for position in range(1, n_servers + 1):
            quota = ingress_quota if position == 1 else None
            server_rng = np.random.default_rng(rng.integers(2**63))
            if position == 1 and attack_target is not None:
                server = DroppingMixServer(position, suite, batch_threshold=batch_threshold, rng=server_rng,
                                           ingress_quota=quota, target_net_id=attack_target)
            else:
                server = MixServer(position, suite, batch_threshold=batch_threshold, rng=server_rng,
                                   ingress_quota=quota)
            self.servers.append(server)
        mailbox.trust(self.servers[-1].net_id)

    @classmethod
    def from_config(cls, cfg, rng, attack_target=None):
        suite = get_crypto_suite(cfg.crypto, rng=np.random.default_rng(rng.integers(2**63)))
        mailbox = MailboxServer(quota=cfg.mailbox_quota, retention_days=cfg.mailbox_retention_days)
        return cls(suite, mailbox, cfg.mix_servers, cfg.batch_threshold, cfg.ingress_quota, rng, attack_target)

    @property
    def publics(self):
        return [s.public for s in self.servers]

    def submit(self, envelope, sender_net_id, day):
        accepted = self.servers[0].receive(envelope, sender_net_id, day)
        self.cascade(day)
        return accepted

    def cascade(self, day, force=False):
        for index, server in enumerate(self.servers):
            outputs = server.flush(force)
            if index == len(self.servers) - 1:
                for record in outputs:
                    self.mailbox.deposit(record, server.net_id, day)
            else:
                for envelope in outputs:
                    self.servers[index + 1].receive(envelope, server.net_id, day)

    def drain(self, day):
        """Force partial batches through to the mailbox; returns how many envelopes were waiting."""
        waiting = self.buffered()
        if waiting:
            self.cascade(day, force=True)
        return waiting

    def buffered(self):
        return sum(len(s.buffer) for s in self.servers)

    def dropped(self):
        return sum(s.dropped for s in self.servers)


class Courier:
    """Holds delayed envelopes until their send time (virtual days)."""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def schedule(self, at, envelope, sender_net_id):
        heapq.heappush(self._heap, (at, self._seq, envelope, sender_net_id))
        self._seq += 1

    def dispatch_until(self, until, chain):
        sent = 0
        while self._heap and self._heap[0][0] < until:
            at, _, envelope, sender = heapq.heappop(self._heap)
            chain.submit(envelope, sender, int(at))
            sent += 1
        return sent

    def __len__(self):
        return len(self._heap)


# ---------------------------------------------------------------------------
# Phone side
# ---------------------------------------------------------------------------

@dataclass
class OutgoingContact:
    day: int
    token: bytes
    keys: MailboxKeys
    counter: int = 0
    last_sent_level: Optional[int] = None


@dataclass
class IncomingContact:
    entry: object
    token: bytes
    keys: MailboxKeys
    last_counter: int = -1
    read_day: int = -1
    read_count: int = 0


class CanaryVerdict(str, Enum):
    DELIVERED = "delivered"
    LOST = "lost"


@dataclass
class PendingCanary:
    sent_day: int
    token: bytes
    keys: MailboxKeys


class PhoneMessenger:
    """Per-phone protocol state: contact books, counters and canaries."""

    def __init__(self, agent_id, suite, server_publics, courier, rng, net_id=None, max_delay_days=1.0):
        self.agent_id = agent_id
        self.suite = suite
        self.server_publics = list(server_publics)
        self.courier = courier
        self.rng = rng
        self.net_id = net_id or f"phone-{agent_id}"
        self.max_delay_days = max_delay_days
        self.outgoing: List[OutgoingContact] = []
        self.incoming: Dict[bytes, IncomingContact] = {}
        self.canaries: Dict[bytes, PendingCanary] = {}
        self.sent = 0
        self.received = 0
        self.replays_rejected = 0
        self.forgeries_rejected = 0
        self.canary_alarms = 0
        self.canaries_delivered = 0

    def add_contact(self, day, pair, initiator, entry):
        send_token, recv_token = pair.sending(initiator), pair.receiving(initiator)
        self.outgoing.append(OutgoingContact(day, send_token, derive_mailbox(send_token)))
        keys = derive_mailbox(recv_token)
        self.incoming[keys.address] = IncomingContact(entry, recv_token, keys)
        entry.token = keys.address

    def _post(self, now, token, keys, message):
        inner = self.suite.seal(keys.key, message.encode(self.suite, token))
        envelope = onion_encrypt(self.suite, inner, keys.address, self.server_publics)
        delay = self.rng.random() * self.max_delay_days
        self.courier.schedule(now + delay, envelope, self.net_id)
        self.sent += 1
        return delay

    def send_risk_update(self, now, contact, new_level, prior_level=None):
        """Schedule one update for `contact`; returns the sampled delay in days."""
        contact.counter += 1
        message = RiskUpdateMessage(contact.day, int(new_level), prior_level, contact.counter)
        contact.last_sent_level = int(new_level)
        return self._post(now, contact.token, contact.keys, message)

    def broadcast(self, day, update):
        """Send changed levels to that day's contacts and first levels to new contacts."""
        horizon = day - WINDOW_DAYS
        self.outgoing = [c for c in self.outgoing if c.day >= horizon]
        sent = 0
        for contact in self.outgoing:
            level = update.levels.get(contact.day)
            if level is None:
                continue
            if contact.last_sent_level is None or (contact.day in update.changed
                                                   and int(level) != contact.last_sent_level):
                self.send_risk_update(day, contact, level, contact.last_sent_level)
                sent += 1
        return sent

    @staticmethod
    def _unread(contact, stored_messages):
        # messages arrive in deposit-day order and expiry drops whole days,
        # so (day, position within day) is a stable read cursor
        fresh = []
        position, current = 0, None
        for stored in stored_messages:
            if stored.deposit_day != current:
                current, position = stored.deposit_day, 0
            position += 1
            if current < contact.read_day or (current == contact.read_day and position <= contact.read_count):
                continue
            fresh.append(stored)
            contact.read_day, contact.read_count = current, position
        return fresh

    def fetch_updates(self, mailbox, day, phone):
        """Read every incoming address once; returns the number of accepted updates."""
        horizon = day - WINDOW_DAYS
        self.incoming = {a: c for a, c in self.incoming.items() if c.entry.day >= horizon}
        accepted = 0
        for address, contact in self.incoming.items():
            decoded = []
            for stored in self._unread(contact, mailbox.fetch(address)):
                try:
                    plain = self.suite.open(contact.keys.key, stored.ciphertext)
                    decoded.append(RiskUpdateMessage.decode(self.suite, contact.token, plain))
                except ProtocolError:
                    self.forgeries_rejected += 1
            # the mix shuffles, so apply in counter order
            for message in sorted(decoded, key=lambda m: m.counter):
                if message.counter <= contact.last_counter:
                    self.replays_rejected += 1
                    continue
                contact.last_counter = message.counter
                phone.receive_update(contact.entry, message.new_level, message.prior_level, day)
                accepted += 1
        self.received += accepted
        return accepted

    def send_canary(self, day):
        token = self.rng.bytes(KEY_BYTES)
        keys = derive_mailbox(token)
        self._post(day, token, keys, RiskUpdateMessage(day, 0, None, 0))
        self.canaries[keys.address] = PendingCanary(day, token, keys)
        return keys.address

    def canary_check(self, mailbox, now, timeout_days=2):
        """Resolve pending canaries: delivered if found, lost after the timeout."""
        verdicts = []
        for address, canary in list(self.canaries.items()):
            delivered = False
            for stored in mailbox.fetch(address):
                try:
                    plain = self.suite.open(canary.keys.key, stored.ciphertext)
                    RiskUpdateMessage.decode(self.suite, canary.token, plain)
                    delivered = True
                    break
                except ProtocolError:
                    continue
            if delivered:
                self.canaries_delivered += 1
                verdicts.append(CanaryVerdict.DELIVERED)
                del self.canaries[address]
            elif now - canary.sent_day >= timeout_days:
                self.canary_alarms += 1
                verdicts.append(CanaryVerdict.LOST)
                del self.canaries[address]
                logger.warning("CANARY_LOST", extra={"day": now, "sent_day": canary.sent_day})
        return verdicts
