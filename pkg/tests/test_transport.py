import math
import socket
import struct
import unittest

import numpy as np
from scipy import stats

from src.crypto_suite import KEY_BYTES, NullCryptoSuite, RealCryptoSuite, check_public_key, get_crypto_suite
from src.errors import ConfigError, DecryptionError, DomainError, ProtocolError
from src.loopback import (ChainClient, LoopbackNetwork, MailboxClient, pack_sender, read_frame, run_protocol_demo,
                          unpack_sender, within_batch_rank_correlation, write_frame)
from src.mailbox import DailyQuota, MailboxServer, PostStatus
from src.messaging import (CanaryVerdict, Courier, MixChain, PhoneMessenger, RiskUpdateMessage, TransportConfig,
                           derive_mailbox, exchange_tokens)
from src.mixnet import DepositRecord, MixEnvelope, MixServer, mix_process, onion_encrypt, peel
from src.predictors import NullPredictor
from src.risk import Phone, PhoneData, QuantizerThresholds
from src.world import DistanceBand


def make_phone(agent_id):
    data = PhoneData(age_band=30, sex="female", conditions=frozenset(), is_healthcare_worker=False)
    return Phone(agent_id, data, NullPredictor(), QuantizerThresholds.uniform())


class TestCryptoSuites(unittest.TestCase):
    def test_public_key_checks(self):
        with self.assertRaises(ProtocolError):
            check_public_key(bytes(KEY_BYTES))
        with self.assertRaises(ProtocolError):
            check_public_key(b"\x01" * 31)
        with self.assertRaises(ConfigError):
            get_crypto_suite("rot13")

    def test_real_seal_rejects_tampering(self):
        suite = RealCryptoSuite()
        key = suite.derive(b"secret" * 6, b"test")
        blob = suite.seal(key, b"payload")
        self.assertEqual(suite.open(key, blob), b"payload")
        tampered = blob[:-1] + bytes([blob[-1] ^ 1])
        with self.assertRaises(DecryptionError):
            suite.open(key, tampered)
        with self.assertRaises(DecryptionError):
            suite.open(suite.derive(b"other" * 7, b"test"), blob)

    def test_real_agreement_refuses_zero_point(self):
        suite = RealCryptoSuite()
        with self.assertRaises(ProtocolError):
            suite.agree(suite.generate_keypair(), bytes(KEY_BYTES))

    def test_null_wrong_key_fails(self):
        suite = NullCryptoSuite(np.random.default_rng(0))
        key, other = suite.derive(b"a" * 32, b"k"), suite.derive(b"b" * 32, b"k")
        with self.assertRaises(DecryptionError):
            suite.open(other, suite.seal(key, b"x"))
        keypair, stranger = suite.generate_keypair(), suite.generate_keypair()
        with self.assertRaises(DecryptionError):
            suite.layer_open(stranger, suite.layer_seal(keypair.public, b"inner"))

    def test_tags(self):
        for suite in (RealCryptoSuite(), NullCryptoSuite()):
            key = suite.derive(b"k" * 32, b"tag")
            tag = suite.tag(key, b"body")
            self.assertTrue(suite.verify(key, b"body", tag))
            self.assertFalse(suite.verify(suite.derive(b"j" * 32, b"tag"), b"body", tag))


class TestTokens(unittest.TestCase):
    def _check_agreement(self, suite, n):
        seen = set()
        for _ in range(n):
            pair = exchange_tokens(suite, suite.generate_keypair(), suite.generate_keypair())
            self.assertNotEqual(pair.token_ab, pair.token_ba)
            self.assertEqual(pair.sending(True), pair.receiving(False))
            self.assertEqual(pair.sending(False), pair.receiving(True))
            seen.add(pair.token_ab)
        self.assertEqual(len(seen), n)

    def test_null_agreement(self):
        self._check_agreement(NullCryptoSuite(np.random.default_rng(1)), 10_000)

    def test_real_agreement(self):
        self._check_agreement(RealCryptoSuite(), 1000)

    def test_mailbox_derivation(self):
        keys = derive_mailbox(b"\x07" * KEY_BYTES)
        self.assertEqual(len(keys.address), 32)
        self.assertNotEqual(keys.address, keys.key)
        with self.assertRaises(ProtocolError):
            derive_mailbox(b"short")


class TestWireFormats(unittest.TestCase):
    def test_envelope_header(self):
        encoded = MixEnvelope(3, b"abc").encode()
        self.assertEqual(encoded[:2], b"\x01\x03")
        self.assertEqual(MixEnvelope.decode(encoded), MixEnvelope(3, b"abc"))
        with self.assertRaises(ProtocolError):
            MixEnvelope.decode(b"\x02\x01xyz")
        with self.assertRaises(ProtocolError):
            MixEnvelope.decode(b"\x01")
        with self.assertRaises(ProtocolError):
            MixEnvelope(256, b"").encode()

    def test_deposit_record_layout(self):
        record = DepositRecord(b"\xaa" * 32, b"hello")
        encoded = record.encode()
        self.assertEqual(len(encoded), 32 + 2 + 5)
        self.assertEqual(encoded[32:34], b"\x00\x05")
        with self.assertRaises(ProtocolError):
            DepositRecord.decode(encoded[:-1])
        with self.assertRaises(ProtocolError):
            DepositRecord(b"\xaa" * 31, b"").encode()

    def test_risk_message_layout(self):
        suite = NullCryptoSuite()
        token = b"\x05" * KEY_BYTES
        message = RiskUpdateMessage(day=12, new_level=9, prior_level=None, counter=3)
        encoded = message.encode(suite, token)
        self.assertEqual(len(encoded), 8 + 16)
        self.assertEqual(struct.unpack(">HBBI", encoded[:8]), (12, 9, 0xFF, 3))
        self.assertEqual(RiskUpdateMessage.decode(suite, token, encoded), message)
        with self.assertRaises(ProtocolError):
            RiskUpdateMessage.decode(suite, b"\x06" * KEY_BYTES, encoded)
        with self.assertRaises(ProtocolError):
            RiskUpdateMessage.decode(suite, token, encoded[:-1])

    def test_risk_message_ranges(self):
        suite = NullCryptoSuite()
        token = b"\x05" * KEY_BYTES
        with self.assertRaises(DomainError):
            RiskUpdateMessage(1, 16, None, 1).encode(suite, token)
        with self.assertRaises(ProtocolError):
            RiskUpdateMessage(1, 3, 2, 2**32).encode(suite, token)
        body = struct.pack(">HBBI", 1, 20, 0xFF, 1)
        with self.assertRaises(ProtocolError):
            RiskUpdateMessage.decode(suite, token, body + suite.tag(token, body))

    def test_sender_header(self):
        payload = pack_sender("phone-12", 300, b"body")
        self.assertEqual(unpack_sender(payload), ("phone-12", 300, b"body"))


class TestOnionRouting(unittest.TestCase):
    def test_layers_peel_in_order(self):
        suite = RealCryptoSuite()
        address = b"\x11" * 32
        for n in (1, 2, 3, 5):
            keypairs = [suite.generate_keypair() for _ in range(n)]
            item = onion_encrypt(suite, b"risk update", address, [k.public for k in keypairs])
            self.assertEqual(item.remaining_layers, n)
            for keypair in keypairs:
                item = peel(suite, keypair, item)
            self.assertEqual(item, DepositRecord(address, b"risk update"))

    def test_wrong_order_fails(self):
        suite = RealCryptoSuite()
        keypairs = [suite.generate_keypair() for _ in range(2)]
        envelope = onion_encrypt(suite, b"x", b"\x11" * 32, [k.public for k in keypairs])
        with self.assertRaises(ProtocolError):
            peel(suite, keypairs[1], envelope)

    def test_needs_a_server(self):
        with self.assertRaises(ConfigError):
            onion_encrypt(NullCryptoSuite(), b"x", b"\x11" * 32, [])


class TestMixServer(unittest.TestCase):
    def setUp(self):
        self.suite = NullCryptoSuite(np.random.default_rng(3))

    def test_batches_before_forwarding(self):
        server = MixServer(1, self.suite, batch_threshold=4, rng=np.random.default_rng(0))
        envelopes = [onion_encrypt(self.suite, b"m", bytes([k]) * 32, [server.public]) for k in range(4)]
        self.assertEqual(mix_process(server, envelopes[:3]), [])
        out = mix_process(server, envelopes[3:])
        self.assertEqual(sorted(r.address[0] for r in out), [0, 1, 2, 3])
        self.assertEqual(server.batches, 1)

    def test_malformed_input_is_dropped(self):
        server = MixServer(1, self.suite, batch_threshold=1)
        self.assertFalse(server.receive(b"\x09\x01junk"))
        self.assertEqual(server.dropped, 1)
        self.assertTrue(server.receive(MixEnvelope(1, b"not for this server")))
        self.assertEqual(server.flush(), [])
        self.assertEqual(server.dropped, 2)

    def test_ingress_quota(self):
        server = MixServer(1, self.suite, batch_threshold=100, ingress_quota=2)
        envelope = onion_encrypt(self.suite, b"m", b"\x01" * 32, [server.public])
        results = [server.receive(envelope, "phone-1", day=0) for _ in range(3)]
        self.assertEqual(results, [True, True, False])
        self.assertTrue(server.receive(envelope, "phone-1", day=1))
        self.assertEqual(server.throttled, 1)

    def test_output_order_is_uniform(self):
        batch = 8
        server = MixServer(1, self.suite, batch_threshold=batch, rng=np.random.default_rng(17))
        envelopes = [onion_encrypt(self.suite, b"m", bytes([k]) * 32, [server.public]) for k in range(batch)]
        first, last = np.zeros(batch), np.zeros(batch)
        for _ in range(10_000):
            out = [r.address[0] for r in mix_process(server, envelopes)]
            first[out.index(0)] += 1
            last[out.index(batch - 1)] += 1
        self.assertGreater(stats.chisquare(first).pvalue, 1e-3)
        self.assertGreater(stats.chisquare(last).pvalue, 1e-3)


class TestMailbox(unittest.TestCase):
    def test_quota(self):
        quota = DailyQuota(2)
        self.assertEqual([quota.allow("a", 0) for _ in range(3)], [True, True, False])
        self.assertTrue(quota.allow("b", 0))
        self.assertEqual(quota.used("a", 0), 2)
        quota.forget_before(1)
        self.assertEqual(quota.used("a", 0), 0)
        with self.assertRaises(ValueError):
            DailyQuota(-1)

    def test_post_and_throttle(self):
        mailbox = MailboxServer(quota=1, trusted_net_ids=("mix-3",))
        address = b"\x01" * 32
        self.assertIs(mailbox.post(address, b"a", "phone-1", 0), PostStatus.ACCEPTED)
        self.assertIs(mailbox.post(address, b"b", "phone-1", 0), PostStatus.THROTTLED)
        for _ in range(5):
            self.assertIs(mailbox.post(address, b"c", "mix-3", 0), PostStatus.ACCEPTED)
        self.assertEqual(len(mailbox.fetch(address)), 6)
        self.assertEqual(mailbox.fetch(b"\x02" * 32), [])

    def test_retention(self):
        mailbox = MailboxServer(retention_days=15, trusted_net_ids=("mix",))
        mailbox.post(b"\x01" * 32, b"old", "mix", 0)
        mailbox.post(b"\x02" * 32, b"new", "mix", 10)
        self.assertEqual(mailbox.expire(14), 0)
        self.assertEqual(mailbox.expire(15), 1)
        self.assertEqual(mailbox.stored_count(), 1)
        self.assertEqual(mailbox.fetch(b"\x01" * 32), [])


class TestMessaging(unittest.TestCase):
    def _setup(self, n_servers=2, batch=1, attack_target=None, crypto="null"):
        rng = np.random.default_rng(5)
        suite = get_crypto_suite(crypto, rng=np.random.default_rng(6))
        self.mailbox = MailboxServer()
        self.chain = MixChain(suite, self.mailbox, n_servers, batch, rng=rng, attack_target=attack_target)
        self.courier = Courier()
        self.phones = [make_phone(0), make_phone(1)]
        self.messengers = [PhoneMessenger(i, suite, self.chain.publics, self.courier, np.random.default_rng(10 + i))
                           for i in range(2)]
        pair = exchange_tokens(suite, suite.generate_keypair(), suite.generate_keypair())
        self.entries = [self.phones[i].log_contact(0, 30.0, DistanceBand.CLOSE) for i in range(2)]
        self.messengers[0].add_contact(0, pair, True, self.entries[0])
        self.messengers[1].add_contact(0, pair, False, self.entries[1])

    def test_transport_config(self):
        cfg = TransportConfig(mix_servers=2, batch_threshold=1)
        chain = MixChain.from_config(cfg, np.random.default_rng(0))
        self.assertEqual(len(chain.publics), 2)
        self.assertIn(chain.servers[-1].net_id, chain.mailbox.trusted_net_ids)

    def test_update_reaches_contact(self):
        for crypto in ("null", "real"):
            self._setup(crypto=crypto)
            sender, receiver = self.messengers
            sender.send_risk_update(0, sender.outgoing[0], 11)
            self.assertEqual(self.courier.dispatch_until(1.0, self.chain), 1)
            self.assertEqual(receiver.fetch_updates(self.mailbox, 1, self.phones[1]), 1)
            self.assertEqual(self.entries[1].received_level, 11)
            self.assertIsNone(self.entries[1].prior_level)
            self.assertEqual(self.chain.buffered(), 0)

    def test_updates_apply_in_counter_order(self):
        self._setup(batch=2)
        sender, receiver = self.messengers
        contact = sender.outgoing[0]
        sender.send_risk_update(0, contact, 3)
        sender.send_risk_update(0, contact, 8, 3)
        self.courier.dispatch_until(1.0, self.chain)
        self.assertEqual(receiver.fetch_updates(self.mailbox, 1, self.phones[1]), 2)
        self.assertEqual(self.entries[1].level_history, [3, 8])

    def test_delays_are_uniform(self):
        self._setup()
        sender = self.messengers[0]
        delays = [sender.send_risk_update(0, sender.outgoing[0], 1) for _ in range(2000)]
        self.assertGreater(stats.kstest(delays, "uniform").pvalue, 1e-3)
        self.assertEqual(len(self.courier), 2000)

    def test_replay_is_rejected(self):
        self._setup()
        sender, receiver = self.messengers
        sender.send_risk_update(0, sender.outgoing[0], 6)
        self.courier.dispatch_until(1.0, self.chain)
        receiver.fetch_updates(self.mailbox, 1, self.phones[1])
        address = self.entries[1].token
        stored = self.mailbox.fetch(address)[0]
        self.mailbox.post(address, stored.ciphertext, "attacker", 1)
        self.assertEqual(receiver.fetch_updates(self.mailbox, 1, self.phones[1]), 0)
        self.assertEqual(receiver.replays_rejected, 1)
        self.assertEqual(self.entries[1].level_history, [6])

    def test_refetch_same_day_reads_nothing_new(self):
        self._setup()
        sender, receiver = self.messengers
        sender.send_risk_update(0, sender.outgoing[0], 4)
        self.courier.dispatch_until(1.0, self.chain)
        self.assertEqual(receiver.fetch_updates(self.mailbox, 1, self.phones[1]), 1)
        self.assertEqual(receiver.fetch_updates(self.mailbox, 1, self.phones[1]), 0)
        self.assertEqual(receiver.replays_rejected, 0)
        self.assertEqual(self.entries[1].level_history, [4])

    def test_drain_forces_partial_batches_out(self):
        self._setup(batch=4)
        sender, receiver = self.messengers
        sender.send_risk_update(0, sender.outgoing[0], 5)
        self.courier.dispatch_until(1.0, self.chain)
        self.assertEqual(self.chain.buffered(), 1)
        self.assertEqual(receiver.fetch_updates(self.mailbox, 1, self.phones[1]), 0)
        self.assertEqual(self.chain.drain(1), 1)
        self.assertEqual(self.chain.buffered(), 0)
        self.assertEqual(self.chain.drain(1), 0)
        self.assertEqual(receiver.fetch_updates(self.mailbox, 1, self.phones[1]), 1)
        self.assertEqual(self.entries[1].level_history, [5])

    def test_forgery_is_rejected(self):
        self._setup()
        receiver = self.messengers[1]
        self.mailbox.post(self.entries[1].token, bytes(40), "attacker", 0)
        self.assertEqual(receiver.fetch_updates(self.mailbox, 0, self.phones[1]), 0)
        self.assertEqual(receiver.forgeries_rejected, 1)
        self.assertEqual(self.entries[1].level_history, [])

    def test_broadcast_sends_first_and_changed_levels(self):
        self._setup()
        sender = self.messengers[0]
        first = self.phones[0].update(3)
        self.assertEqual(sender.broadcast(3, first), 1)
        again = self.phones[0].update(3)
        self.assertEqual(sender.broadcast(3, again), 0)

    def test_canaries_on_honest_chain(self):
        self._setup()
        sender = self.messengers[0]
        for _ in range(100):
            sender.send_canary(0)
        self.courier.dispatch_until(1.0, self.chain)
        verdicts = sender.canary_check(self.mailbox, now=1, timeout_days=2)
        self.assertEqual(verdicts.count(CanaryVerdict.DELIVERED), 100)
        self.assertEqual(sender.canary_alarms, 0)

    def test_canaries_detect_dropping_mix(self):
        self._setup(attack_target="phone-99")
        sender = self.messengers[0]
        sender.send_canary(0)
        self.courier.dispatch_until(1.0, self.chain)
        self.assertEqual(sender.canary_check(self.mailbox, now=1, timeout_days=2), [])
        self.assertEqual(sender.canary_check(self.mailbox, now=2, timeout_days=2), [CanaryVerdict.LOST])
        self.assertEqual(sender.canary_alarms, 1)
        self.assertGreater(self.chain.dropped(), 0)


class TestLoopback(unittest.TestCase):
    def test_frames(self):
        a, b = socket.socketpair()
        with a, b:
            write_frame(a, b"S", b"xyz")
            self.assertEqual(read_frame(b), (b"S", b"xyz"))
            a.sendall(struct.pack(">I", 0))
            with self.assertRaises(ProtocolError):
                read_frame(b)
            a.sendall(struct.pack(">I", (1 << 20) + 1))
            with self.assertRaises(ProtocolError):
                read_frame(b)

    def test_rank_correlation(self):
        order = [f"{k:02d}" for k in range(32)]
        self.assertAlmostEqual(within_batch_rank_correlation(order, order, 8), 1.0)
        self.assertTrue(math.isnan(within_batch_rank_correlation(order[:2], order[:2], 8)))

    def test_network_roundtrip(self):
        suite = NullCryptoSuite(np.random.default_rng(2))
        with LoopbackNetwork(suite, n_servers=2, batch_threshold=1) as net:
            envelope = onion_encrypt(suite, b"hello", b"\x33" * 32, [m.public for m in net.mixes])
            self.assertTrue(ChainClient(net.mix_addresses[0]).submit(envelope, "phone-0", 4))
            stored = MailboxClient(net.mailbox_address).fetch(b"\x33" * 32)
            mixes, mailbox = net.stats()
        self.assertEqual([(s.ciphertext, s.deposit_day) for s in stored], [(b"hello", 4)])
        self.assertEqual(mailbox["accepted"], 1)
        self.assertEqual([m["forwarded"] for m in mixes], [1, 1])

    def test_demo_honest(self):
        report = run_protocol_demo(n_servers=3, batch_threshold=8, n_messages=40, n_pairs=5, seed=1)
        self.assertEqual(report.messages_delivered, 40)
        self.assertEqual(report.canary_alarms, 0)
        self.assertEqual(report.canaries_delivered, report.canaries_sent)
        self.assertEqual((report.dropped, report.buffered), (0, 0))
        self.assertEqual((report.messages_sent + report.canaries_sent) % 8, 0)
        self.assertLess(abs(report.rank_correlation), 0.6)
        self.assertEqual(len(report.transcript), 40 + report.canaries_sent)

    def test_demo_real_crypto(self):
        report = run_protocol_demo(n_servers=2, batch_threshold=4, null_crypto=False, n_messages=8, n_pairs=2)
        self.assertEqual(report.messages_delivered, 8)
        self.assertEqual(report.canary_alarms, 0)

    def test_demo_drop_attack(self):
        report = run_protocol_demo(n_servers=3, batch_threshold=4, drop_attack=True, n_messages=40, n_pairs=5)
        self.assertLess(report.messages_delivered, 40)
        self.assertGreater(report.canary_alarms, 0)
        self.assertGreater(report.dropped, 0)


if __name__ == "__main__":
    unittest.main()
