# src/loopback.py
"""
The messaging path over real sockets.

Every mix server and the mailbox run as a TCP actor on 127.0.0.1, each
served by its own thread and owning its state. Frames are

    length (4 bytes, big-endian, covers the rest) || kind (1 byte) || payload

with kinds E (envelope to a mix), D (deposit to the mailbox), F (fetch an
address), S (stats as JSON). Replies use A (ack), R (records) and J (JSON).
E and D payloads start with a sender header: id length (1) || id || day (2).

`run_protocol_demo` wires phones, the chain and the mailbox together and
reports deliveries, drops, canary alarms and a within-batch rank correlation
between submission order and deposit order.
"""
import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import stats

from src.crypto_suite import get_crypto_suite
from src.errors import ProtocolError
from src.mailbox import MailboxServer, StoredMessage
from src.messaging import Courier, PhoneMessenger, exchange_tokens
from src.mixnet import DepositRecord, DroppingMixServer, MixEnvelope, MixServer
from src.predictors import NullPredictor
from src.risk import Phone, PhoneData, QuantizerThresholds
from src.world import DistanceBand

logger = logging.getLogger(__name__)

HOST = "127.0.0.1"
_LENGTH = struct.Struct(">I")
MAX_FRAME = 1 << 20


def _recv_exact(sock, n):
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("peer closed the connection mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def write_frame(sock, kind, payload=b""):
    sock.sendall(_LENGTH.pack(1 + len(payload)) + kind + payload)


def read_frame(sock):
    (length,) = _LENGTH.unpack(_recv_exact(sock, _LENGTH.size))
    if not 1 <= length <= MAX_FRAME:
        raise ProtocolError(f"frame length {length} out of range")
    body = _recv_exact(sock, length)
    return body[:1], body[1:]


def request(address, kind, payload=b"", timeout=10.0):
    with socket.create_connection(address, timeout=timeout) as sock:
        write_frame(sock, kind, payload)
        return read_frame(sock)


def pack_sender(sender_net_id, day, body):
    name = sender_net_id.encode("utf-8")
    return bytes((len(name),)) + name + int(day).to_bytes(2, "big") + body


def unpack_sender(payload):
    n = payload[0]
    sender = payload[1:1 + n].decode("utf-8")
    day = int.from_bytes(payload[1 + n:3 + n], "big")
    return sender, day, payload[3 + n:]


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        try:
            kind, payload = read_frame(self.request)
            reply_kind, reply = self.server.actor.handle(kind, payload)
        except (ProtocolError, ConnectionError, ValueError) as exc:
            logger.warning("FRAME_REJECTED", extra={"actor": type(self.server.actor).__name__, "error": str(exc)})
            reply_kind, reply = b"A", b"\x00"
        write_frame(self.request, reply_kind, reply)


class _ActorServer(socketserver.TCPServer):
    allow_reuse_address = True

    def __init__(self, actor, host=HOST, port=0):
        self.actor = actor
        super().__init__((host, port), _FrameHandler)


class MailboxActor:
    def __init__(self, mailbox):
        self.mailbox = mailbox
        self.deposit_order = []

    def handle(self, kind, payload):
        if kind == b"D":
            sender, day, body = unpack_sender(payload)
            record = DepositRecord.decode(body)
            status = self.mailbox.deposit(record, sender, day)
            self.deposit_order.append(record.address.hex())
            return b"A", b"\x01" if status.value == "accepted" else b"\x00"
        if kind == b"F":
            out = [len(self.mailbox.fetch(bytes(payload))).to_bytes(4, "big")]
            for stored in self.mailbox.fetch(bytes(payload)):
                out.append(len(stored.ciphertext).to_bytes(2, "big") + stored.deposit_day.to_bytes(2, "big")
                           + stored.ciphertext)
            return b"R", b"".join(out)
        if kind == b"S":
            return b"J", json.dumps({"accepted": self.mailbox.accepted, "throttled": self.mailbox.throttled,
                                     "deposit_order": self.deposit_order}).encode()
        raise ProtocolError(f"mailbox does not handle frame kind {kind!r}")


class MixActor:
    def __init__(self, server, next_hop, next_is_mailbox):
        self.server = server
        self.next_hop = next_hop
        self.next_is_mailbox = next_is_mailbox

    def handle(self, kind, payload):
        if kind == b"E":
            sender, day, body = unpack_sender(payload)
            accepted = self.server.receive(body, sender, day)
            for item in self.server.flush():
                wire = item.encode()
                request(self.next_hop, b"D" if self.next_is_mailbox else b"E",
                        pack_sender(self.server.net_id, day, wire))
            return b"A", b"\x01" if accepted else b"\x00"
        if kind == b"S":
            return b"J", json.dumps({"position": self.server.position, "buffered": len(self.server.buffer),
                                     "dropped": self.server.dropped, "forwarded": self.server.forwarded,
                                     "batches": self.server.batches}).encode()
        raise ProtocolError(f"mix does not handle frame kind {kind!r}")


class ChainClient:
    """Duck-types MixChain.submit for the Courier; records submission order."""

    def __init__(self, first_hop):
        self.first_hop = first_hop
        self.submitted: List[MixEnvelope] = []

    def submit(self, envelope, sender_net_id, day):
        self.submitted.append(envelope)
        _, ack = request(self.first_hop, b"E", pack_sender(sender_net_id, day, envelope.encode()))
        return ack == b"\x01"


class MailboxClient:
    """Duck-types MailboxServer.fetch for PhoneMessenger."""

    def __init__(self, address):
        self.address = address

    def fetch(self, mailbox_address):
        kind, payload = request(self.address, b"F", mailbox_address)
        count = int.from_bytes(payload[:4], "big")
        messages, offset = [], 4
        for _ in range(count):
            length = int.from_bytes(payload[offset:offset + 2], "big")
            day = int.from_bytes(payload[offset + 2:offset + 4], "big")
            messages.append(StoredMessage(payload[offset + 4:offset + 4 + length], day))
            offset += 4 + length
        return messages


class LoopbackNetwork:
    """Starts the mailbox and N mix actors, one serving thread each."""

    def __init__(self, suite, n_servers=3, batch_threshold=8, rng=None, attack_target=None, host=HOST):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mailbox = MailboxServer()
        self.mixes = []
        for position in range(1, n_servers + 1):
            server_rng = np.random.default_rng(rng.integers(2**63))
            if position == 1 and attack_target is not None:
                mix = DroppingMixServer(position, suite, batch_threshold=batch_threshold, rng=server_rng,
                                        target_net_id=attack_target)
            else:
                mix = MixServer(position, suite, batch_threshold=batch_threshold, rng=server_rng)
            self.mixes.append(mix)
        self.mailbox.trust(self.mixes[-1].net_id)
        self.host = host
        self._servers = []
        self._threads = []

    def __enter__(self):
        mailbox_server = _ActorServer(MailboxActor(self.mailbox), self.host)
        self._start(mailbox_server)
        self.mailbox_address = mailbox_server.server_address
        next_hop, next_is_mailbox = self.mailbox_address, True
        addresses = []
        for mix in reversed(self.mixes):
            server = _ActorServer(MixActor(mix, next_hop, next_is_mailbox), self.host)
            self._start(server)
            next_hop, next_is_mailbox = server.server_address, False
            addresses.append(server.server_address)
        self.mix_addresses = list(reversed(addresses))
        return self

    def _start(self, server):
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        self._servers.append(server)
        self._threads.append(thread)

    def __exit__(self, *exc):
        for server in self._servers:
            server.shutdown()
            server.server_close()
        for thread in self._threads:
            thread.join(timeout=5)
        return False

    def stats(self):
        mixes = [json.loads(request(addr, b"S")[1]) for addr in self.mix_addresses]
        mailbox = json.loads(request(self.mailbox_address, b"S")[1])
        return mixes, mailbox


@dataclass
class DemoReport:
    messages_sent: int
    messages_delivered: int
    canaries_sent: int
    canaries_delivered: int
    canary_alarms: int
    dropped: int
    buffered: int
    rank_correlation: float
    transcript: List[str] = field(default_factory=list)

    def lines(self):
        return [
            f"messages sent:        {self.messages_sent}",
            f"messages delivered:   {self.messages_delivered}",
            f"canaries sent:        {self.canaries_sent}",
            f"canaries delivered:   {self.canaries_delivered}",
            f"canary alarms:        {self.canary_alarms}",
            f"dropped at mixes:     {self.dropped}",
            f"left in mix buffers:  {self.buffered}",
            f"within-batch rank correlation (submission vs deposit): {self.rank_correlation:.4f}",
        ]


def within_batch_rank_correlation(submitted, deposited, batch):
    """Spearman rho between position-in-batch at submission and at deposit."""
    deposit_rank = {}
    for j, address in enumerate(deposited):
        deposit_rank.setdefault(address, j % batch)
    xs, ys = [], []
    for i, address in enumerate(submitted):
        if address in deposit_rank:
            xs.append(i % batch)
            ys.append(deposit_rank[address])
    if len(xs) < 3 or len(set(xs)) < 2 or len(set(ys)) < 2:
        return float("nan")
    return float(stats.spearmanr(xs, ys)[0])


class _LabellingCourier(Courier):
    def schedule(self, at, envelope, sender_net_id):
        self.last_envelope = envelope
        super().schedule(at, envelope, sender_net_id)


def run_protocol_demo(n_servers=3, batch_threshold=8, null_crypto=True, canaries=True,
                      drop_attack=False, n_messages=100, n_pairs=10, seed=0, host=HOST):
    """Scripted encounters and risk updates pushed through a loopback mix chain."""
    rng = np.random.default_rng(seed)
    suite = get_crypto_suite("null" if null_crypto else "real", rng=np.random.default_rng(rng.integers(2**63)))
    courier = _LabellingCourier()
    thresholds = QuantizerThresholds.uniform()
    predictor = NullPredictor()
    attack_target = "phone-0" if drop_attack else None

    with LoopbackNetwork(suite, n_servers, batch_threshold, rng, attack_target, host) as net:
        publics = [m.public for m in net.mixes]
        phones, messengers = [], []
        for agent_id in range(2 * n_pairs):
            data = PhoneData(age_band=30, sex="other", conditions=frozenset(), is_healthcare_worker=False)
            phones.append(Phone(agent_id, data, predictor, thresholds))
            messengers.append(PhoneMessenger(agent_id, suite, publics, courier,
                                             np.random.default_rng(rng.integers(2**63))))
        for j in range(n_pairs):
            a, b = 2 * j, 2 * j + 1
            pair = exchange_tokens(suite, suite.generate_keypair(), suite.generate_keypair())
            messengers[a].add_contact(0, pair, True, phones[a].log_contact(0, 15.0, DistanceBand.CLOSE))
            messengers[b].add_contact(0, pair, False, phones[b].log_contact(0, 15.0, DistanceBand.CLOSE))

        address_of = {}
        for i in range(n_messages):
            sender = messengers[i % len(messengers)]
            contact = sender.outgoing[0]
            sender.send_risk_update(0, contact, (i * 7) % 16, contact.last_sent_level)
            address_of[id(courier.last_envelope)] = contact.keys.address.hex()
        n_canaries = 0
        if canaries:
            for messenger in messengers:
                address = messenger.send_canary(0)
                address_of[id(courier.last_envelope)] = address.hex()
                n_canaries += 1
            while (n_messages + n_canaries) % batch_threshold:
                address = messengers[n_canaries % len(messengers)].send_canary(0)
                address_of[id(courier.last_envelope)] = address.hex()
                n_canaries += 1

        client = ChainClient(net.mix_addresses[0])
        courier.dispatch_until(1.0, client)
        mailbox_client = MailboxClient(net.mailbox_address)
        delivered = sum(m.fetch_updates(mailbox_client, 1, p) for m, p in zip(messengers, phones))
        for m in messengers:
            m.canary_check(mailbox_client, now=2, timeout_days=2)
        mix_stats, mailbox_stats = net.stats()

    submitted = [address_of[id(env)] for env in client.submitted]
    deposited = mailbox_stats["deposit_order"]
    transcript = [f"{j:04d} {address[:16]}" for j, address in enumerate(deposited)]
    report = DemoReport(
        messages_sent=n_messages,
        messages_delivered=delivered,
        canaries_sent=n_canaries,
        canaries_delivered=sum(m.canaries_delivered for m in messengers),
        canary_alarms=sum(m.canary_alarms for m in messengers),
        dropped=sum(s["dropped"] for s in mix_stats),
        buffered=sum(s["buffered"] for s in mix_stats),
        rank_correlation=within_batch_rank_correlation(submitted, deposited, batch_threshold),
        transcript=transcript,
    )
    logger.info("PROTOCOL_DEMO_DONE", extra={"delivered": delivered, "alarms": report.canary_alarms})
    return report
