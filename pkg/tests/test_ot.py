import itertools

import numpy as np
import pytest

from cbnn.ot import OtInstance, ot3_parallel, ot3_transfer
from cbnn.ring import Ring
from helpers import phase, run_protocol

RING = Ring(32)


@pytest.mark.parametrize("sender,receiver,helper", list(itertools.permutations(range(3))))
def test_receiver_gets_chosen_message(sender, receiver, helper):
    rng = np.random.default_rng(sender * 9 + receiver)
    n = 300
    m0, m1 = RING.random(rng, (n,)), RING.random(rng, (n,))
    c = rng.integers(0, 2, n).astype(np.uint8)

    def prog(party):
        msgs = (m0, m1) if party.pid == sender else None
        choice = c if party.pid in (receiver, helper) else None
        return ot3_transfer(party, sender, receiver, helper, (n,), msgs, choice)

    outs, stats, _ = run_protocol(prog)
    assert np.array_equal(outs[receiver], np.where(c == 1, m1, m0))
    assert outs[sender] is None and outs[helper] is None
    cost = phase(stats, "ot")
    assert cost.rounds == 2
    want = [0, 0, 0]
    want[sender], want[helper] = 2 * n * 4, n * 4
    assert cost.bytes == want


def test_parallel_instances_share_two_legs():
    n = 50
    rng = np.random.default_rng(3)
    data = [(RING.random(rng, (n,)), RING.random(rng, (n,)), rng.integers(0, 2, n).astype(np.uint8))
            for _ in range(3)]
    roles = [(1, 0, 2), (1, 2, 0), (0, 1, 2)]

    def prog(party):
        insts = []
        for (s, r, h), (m0, m1, c) in zip(roles, data):
            insts.append(OtInstance(s, r, h, (n,), m0 if party.pid == s else None,
                                    m1 if party.pid == s else None, c if party.pid in (r, h) else None))
        return ot3_parallel(party, insts)

    outs, stats, _ = run_protocol(prog)
    for k, ((s, r, h), (m0, m1, c)) in enumerate(zip(roles, data)):
        assert np.array_equal(outs[r][k], np.where(c == 1, m1, m0))
    assert phase(stats, "ot").rounds == 2


def test_helper_sees_only_masked_pairs():
    n = 2000
    m0 = np.zeros(n, dtype=np.uint64)
    m1 = np.ones(n, dtype=np.uint64)
    c = np.zeros(n, dtype=np.uint8)

    def prog(party):
        return ot3_transfer(party, 1, 0, 2, (n,), (m0, m1) if party.pid == 1 else None,
                            c if party.pid != 1 else None)

    _, _, taps = run_protocol(prog, tap=True)
    (frm, tag, payload), = [t for t in taps[2] if "pair" in t[1]]
    words = np.frombuffer(payload, dtype="<u4")
    # constant plaintexts arrive as high-entropy words
    assert frm == 1 and len(np.unique(words)) > 3990


def test_distinct_parties_required():
    with pytest.raises(ValueError):
        OtInstance(0, 0, 1, (1,))
