"""Simulation-only validator that sees all three parties' shares."""
from __future__ import annotations

import threading

import numpy as np

from .sharing import InconsistentShares, check_consistent, reconstruct


class Inspector:
    """Collects shares deposited under the same label by all three parties.

    Once the third share of a label arrives it checks replication consistency
    and, when a bound was given, that the secret's signed value stays below it.
    Failures are collected in ``errors`` rather than raised inside party threads.
    """

    def __init__(self, record: bool = False):
        self.lock = threading.Lock()
        self.pending: dict[str, list] = {}
        self.errors: list[str] = []
        self.record = record
        self.values: dict[str, np.ndarray] = {}
        self.max_abs: dict[str, int] = {}

    def deposit(self, party, share, label: str, bound: int | None = None):
        key = f"{party.net.recorder.current}:{label}"
        with self.lock:
            slot = self.pending.setdefault(key, [None] * 3)
            slot[party.pid] = share
            if any(s is None for s in slot):
                return
            del self.pending[key]
        try:
            check_consistent(slot)
        except InconsistentShares as e:
            self.errors.append(f"{key}: {e}")
            return
        value = reconstruct(slot[0], slot[1])
        signed = share.ring.signed(value)
        peak = int(np.max(np.abs(signed))) if signed.size else 0
        with self.lock:
            self.max_abs[key] = peak
            if self.record:
                self.values[key] = value
            if bound is not None and peak >= bound:
                self.errors.append(f"{key}: |x| reached {peak}, budget is < {bound}")
