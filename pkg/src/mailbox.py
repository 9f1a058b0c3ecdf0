# src/mailbox.py
"""
Mailbox server: stores deposited ciphertexts by address, nothing else.

The server never learns who a message is for or what it says; it sees an
address digest and opaque bytes. Posts are rate limited per network id per
day, except for the trusted egress of the last mix server.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import List

logger = logging.getLogger(__name__)

DEFAULT_RETENTION_DAYS = 15


class DailyQuota:
    """At most `limit` uses per key per day."""

    def __init__(self, limit):
        if limit < 0:
            raise ValueError(f"quota limit must be non-negative, got {limit}")
        self.limit = limit
        self._counts = defaultdict(int)

    def allow(self, key, day):
        if self._counts[(key, day)] >= self.limit:
            return False
        self._counts[(key, day)] += 1
        return True

    def used(self, key, day):
        return self._counts.get((key, day), 0)

    def forget_before(self, day):
        for key in [k for k in self._counts if k[1] < day]:
            del self._counts[key]


class PostStatus(str, Enum):
    ACCEPTED = "accepted"
    THROTTLED = "throttled"


@dataclass(frozen=True)
class StoredMessage:
    ciphertext: bytes
    deposit_day: int


@dataclass
class Mailbox:
    address: bytes
    messages: List[StoredMessage] = field(default_factory=list)


class MailboxServer:
    def __init__(self, quota=1000, retention_days=DEFAULT_RETENTION_DAYS, trusted_net_ids=()):
        self.quota = DailyQuota(quota)
        self.retention_days = retention_days
        self.trusted_net_ids = set(trusted_net_ids)
        self.mailboxes = {}
        self.accepted = 0
        self.throttled = 0

    def trust(self, net_id):
        self.trusted_net_ids.add(net_id)

    def post(self, address, ciphertext, sender_net_id, day):
        if sender_net_id not in self.trusted_net_ids and not self.quota.allow(sender_net_id, day):
            self.throttled += 1
            logger.info("MAILBOX_THROTTLED", extra={"day": day, "throttled": self.throttled})
            return PostStatus.THROTTLED
        box = self.mailboxes.get(address)
        if box is None:
            box = self.mailboxes[address] = Mailbox(address)
        box.messages.append(StoredMessage(bytes(ciphertext), day))
        self.accepted += 1
        return PostStatus.ACCEPTED

    def deposit(self, record, sender_net_id, day):
        return self.post(record.address, record.ciphertext, sender_net_id, day)

    def fetch(self, address):
        box = self.mailboxes.get(address)
        return list(box.messages) if box is not None else []

    def expire(self, today):
        """Drop messages deposited `retention_days` or more days ago; returns how many."""
        removed = 0
        for address in list(self.mailboxes):
            box = self.mailboxes[address]
            kept = [m for m in box.messages if today - m.deposit_day < self.retention_days]
            removed += len(box.messages) - len(kept)
            if kept:
                box.messages = kept
            else:
                del self.mailboxes[address]
        self.quota.forget_before(today)
        if removed:
            logger.debug("MAILBOX_EXPIRED", extra={"day": today, "removed": removed})
        return removed

    def stored_count(self):
        return sum(len(b.messages) for b in self.mailboxes.values())
