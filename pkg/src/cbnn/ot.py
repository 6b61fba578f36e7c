"""Three-party oblivious transfer with a helper.

The sender masks (m_0, m_1) with randomness it shares with the receiver and
hands both masked messages to the helper; the helper, who knows the choice
bit, forwards only s_c; the receiver unmasks.  Batched element-wise: one
instance per tensor element, all elements in the same two message legs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OtInstance:
    sender: int
    receiver: int
    helper: int
    shape: tuple
    m0: np.ndarray | None = None  # sender only
    m1: np.ndarray | None = None  # sender only
    choice: np.ndarray | None = None  # receiver and helper
    label: str = "ot"

    def __post_init__(self):
        if sorted((self.sender, self.receiver, self.helper)) != [0, 1, 2]:
            raise ValueError("sender, receiver and helper must be three distinct parties")
        self.shape = tuple(self.shape)


def _masks(party, inst: OtInstance, k: int):
    # one PRF stream per instance slot keeps sender and receiver counters
    # aligned even when a party plays different roles within one batch
    other = inst.receiver if party.pid == inst.sender else inst.sender
    kind = f"ot-mask/{k}"
    mask0 = party.rand.pair_words(other, kind, inst.shape)
    mask1 = party.rand.pair_words(other, kind, inst.shape)
    return mask0, mask1


def ot3_parallel(party, instances: list[OtInstance], alongside=None, phase: str = "ot") -> list:
    """Run several independent OTs sharing the same two message legs.

    Returns, per instance, m_c at that instance's receiver and None elsewhere.
    Each party does its sender work, then its helper work, then its receiver
    work, so no instance waits on another.  ``alongside`` is an optional
    (send, recv) pair of callables for a one-round exchange that rides in the
    first leg; ``send`` runs after the sender leg and ``recv`` after the helper
    leg, which keeps per-link FIFO order intact.
    """
    net = party.net
    out: list = [None] * len(instances)
    with net.phase(phase):
        for k, inst in enumerate(instances):
            if party.pid == inst.sender:
                mask0, mask1 = _masks(party, inst, k)
                s0 = np.asarray(inst.m0, dtype=np.uint64) ^ mask0
                s1 = np.asarray(inst.m1, dtype=np.uint64) ^ mask1
                net.send_ring(inst.helper, f"{inst.label}{k}:pair", np.stack([s0, s1]))
        if alongside is not None:
            alongside[0]()
        for k, inst in enumerate(instances):
            if party.pid == inst.helper:
                pair = net.recv_ring(inst.sender, f"{inst.label}{k}:pair", (2,) + inst.shape)
                c = np.asarray(inst.choice, dtype=np.uint8).reshape(inst.shape)
                net.send_ring(inst.receiver, f"{inst.label}{k}:sel", np.where(c == 1, pair[1], pair[0]))
        if alongside is not None:
            alongside[1]()
        for k, inst in enumerate(instances):
            if party.pid == inst.receiver:
                mask0, mask1 = _masks(party, inst, k)
                s_c = net.recv_ring(inst.helper, f"{inst.label}{k}:sel", inst.shape)
                c = np.asarray(inst.choice, dtype=np.uint8).reshape(inst.shape)
                out[k] = s_c ^ np.where(c == 1, mask1, mask0)
    return out


def ot3_transfer(party, sender: int, receiver: int, helper: int, shape, msgs=None, choice=None):
    """Single batched OT: the receiver gets m_choice; the others get None."""
    m0, m1 = msgs if msgs is not None else (None, None)
    inst = OtInstance(sender, receiver, helper, shape, m0, m1, choice)
    return ot3_parallel(party, [inst])[0]
