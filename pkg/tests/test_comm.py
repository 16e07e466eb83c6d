"""Communicator tests: init, point-to-point, non-blocking ops, collectives,
keepalive, and teardown, all over the deterministic simulated network."""

import random
import struct

import pytest

from punchgrid.comm import CommConfig, comm_init
from punchgrid.errors import (
    CommClosed,
    OutstandingRequests,
    PeerClosed,
    SizeMismatch,
    Timeout,
)
from punchgrid.natsim import NatPolicy

from simworld import make_sim_world, run_comm_world

AR = NatPolicy.AddressRestricted


def test_init_single_rank_returns_immediately():
    counts = run_comm_world(1, lambda comm: len(comm.peers))
    assert counts == [0]


def test_init_w4_over_address_restricted_nats():
    counts = run_comm_world(4, lambda comm: len(comm.peers), policies=[AR] * 4)
    assert counts == [3, 3, 3, 3]


def test_init_times_out_when_rendezvous_down():
    world = make_sim_world(1, with_rdv=False)
    cfg = CommConfig(op_timeout=2.0)

    def worker(env):
        with pytest.raises(Timeout):
            comm_init("j", world.kv_addr, world.rdv_addr, 1, cfg, env=env)

    world.spawn(worker, world.worker_envs[0], name="w0")
    world.run_or_raise()


def test_send_recv_identity():
    def fn(comm):
        if comm.rank == 0:
            comm.send(1, 5, b"abc")
            return None
        return comm.recv(0, 5)

    assert run_comm_world(2, fn) == [None, b"abc"]


def test_sends_matched_fifo_per_peer_and_tag():
    def fn(comm):
        if comm.rank == 0:
            comm.send(1, 9, b"first")
            comm.send(1, 9, b"second")
            return None
        return [comm.recv(0, 9), comm.recv(0, 9)]

    assert run_comm_world(2, fn)[1] == [b"first", b"second"]


def test_messages_with_distinct_tags_do_not_cross():
    def fn(comm):
        if comm.rank == 0:
            comm.send(1, 1, b"one")
            comm.send(1, 2, b"two")
            return None
        # receive in the opposite order of sending
        hi = comm.recv(0, 2)
        lo = comm.recv(0, 1)
        return (lo, hi)

    assert run_comm_world(2, fn)[1] == (b"one", b"two")


def test_self_send_short_circuits():
    def fn(comm):
        comm.send(comm.rank, 3, b"me")
        return comm.recv(comm.rank, 3)

    assert run_comm_world(1, fn) == [b"me"]


def test_recv_from_closed_peer_raises():
    def fn(comm):
        if comm.rank == 1:
            return None  # returns and finalizes immediately
        with pytest.raises(PeerClosed):
            comm.recv(1, 0)
        return True

    assert run_comm_world(2, fn)[0] is True


def test_user_tags_must_stay_below_reserved_space():
    def fn(comm):
        with pytest.raises(ValueError):
            comm.send(0, 0xFFFF0001, b"")
        return True

    run_comm_world(1, fn)


def test_isend_irecv_pair_equals_blocking_pair():
    def fn(comm):
        if comm.rank == 0:
            req = comm.isend(1, 4, b"payload")
            assert req.wait() is None
            return None
        req = comm.irecv(0, 4)
        return req.wait()

    assert run_comm_world(2, fn) == [None, b"payload"]


def test_wait_is_idempotent():
    def fn(comm):
        req = comm.isend(comm.rank, 1, b"x")
        first = comm.wait(req)
        second = comm.wait(req)
        assert first == second == None  # noqa: E711 - deliberate triple compare
        got = comm.irecv(comm.rank, 1)
        assert got.wait() == b"x"
        assert got.wait() == b"x"
        return True

    run_comm_world(1, fn)


def _oracle_payload(src: int, dst: int, i: int) -> bytes:
    return f"{src}->{dst}#{i}".encode()


def test_hundred_interleaved_requests_match_oracle():
    w = 4
    per_peer = 100 // (w - 1) + 1

    def fn(comm):
        recvs = []
        for src in range(w):
            if src == comm.rank:
                continue
            for i in range(per_peer):
                recvs.append((src, i, comm.irecv(src, i)))
        sends = []
        rng = random.Random(comm.rank)
        targets = [
            (dst, i) for dst in range(w) if dst != comm.rank for i in range(per_peer)
        ]
        rng.shuffle(targets)  # interleave the isends arbitrarily
        for dst, i in targets:
            sends.append(comm.isend(dst, i, _oracle_payload(comm.rank, dst, i)))
        for req in sends:
            req.wait()
        for src, i, req in recvs:
            assert req.wait() == _oracle_payload(src, comm.rank, i)
        return len(recvs) + len(sends)

    counts = run_comm_world(w, fn)
    assert all(c == 2 * (w - 1) * per_peer for c in counts)


def test_barrier_single_rank():
    run_comm_world(1, lambda comm: comm.barrier())


def test_barrier_waits_for_slowest_rank():
    stall = 1.0

    def fn(comm):
        if comm.rank == 3:
            comm.env.sleep(stall)
        comm.barrier()
        return comm.env.now()

    exits = run_comm_world(8, fn)
    assert all(t >= stall for t in exits)


def test_barrier_missing_rank_times_out():
    cfg = CommConfig(op_timeout=1.0, keepalive_interval=0.2)

    def fn(comm):
        if comm.rank == 1:
            comm.env.sleep(5.0)  # alive but never enters the barrier
            return None
        with pytest.raises(Timeout):
            comm.barrier()
        return True

    results = run_comm_world(2, fn, config=cfg)
    assert results[0] is True


def test_bcast_from_nonzero_root():
    def fn(comm):
        data = b"xyz" if comm.rank == 2 else b""
        return comm.bcast(2, data)

    assert run_comm_world(4, fn) == [b"xyz"] * 4


def test_bcast_empty_payload():
    assert run_comm_world(3, lambda c: c.bcast(0, b"")) == [b""] * 3


def test_gather_rank_ordered():
    def fn(comm):
        data = bytes([97 + comm.rank]) * (comm.rank + 1)  # "a", "bb", "ccc"
        return comm.gather(0, data)

    results = run_comm_world(3, fn)
    assert results[0] == [b"a", b"bb", b"ccc"]
    assert results[1] is None and results[2] is None


def test_gather_single_rank():
    assert run_comm_world(1, lambda c: c.gather(0, b"solo")) == [[b"solo"]]


def test_gatherv_random_sizes_match_oracle():
    rng = random.Random(11)
    w = 5
    contributions = [rng.randbytes(rng.randrange(0, 64)) for _ in range(w)]

    def fn(comm):
        return comm.gatherv(0, contributions[comm.rank])

    results = run_comm_world(w, fn)
    assert results[0] == contributions


def test_allgather_rank_vector():
    def fn(comm):
        out = comm.allgather(struct.pack("<I", comm.rank))
        return [struct.unpack("<I", x)[0] for x in out]

    w = 6
    assert run_comm_world(w, fn) == [list(range(w))] * w


def test_allgatherv_variable_lengths():
    def fn(comm):
        out = comm.allgatherv(bytes([comm.rank]) * (comm.rank + 1))
        return [len(x) for x in out]

    w = 5
    assert run_comm_world(w, fn) == [[1, 2, 3, 4, 5]] * w


def test_allgather_unequal_sizes_rejected():
    def fn(comm):
        with pytest.raises(SizeMismatch):
            comm.allgather(b"x" * (comm.rank + 1))
        return True

    assert run_comm_world(3, fn) == [True] * 3


def test_alltoallv_two_ranks_hand_case():
    def fn(comm):
        out = [b"x", b"y"] if comm.rank == 0 else [b"p", b"q"]
        return comm.alltoallv(out)

    results = run_comm_world(2, fn)
    assert results[0] == [b"x", b"p"]
    assert results[1] == [b"y", b"q"]


def test_alltoallv_self_delivery_skips_network():
    world = make_sim_world(1)

    def fn(comm):
        baseline = world.net.stats["sent"]
        out = comm.alltoallv([b"only mine"])
        assert world.net.stats["sent"] == baseline  # no frames for self
        return out

    assert run_comm_world(1, fn, world=world) == [[b"only mine"]]


def test_alltoallv_frame_count_excludes_self():
    w = 4
    world = make_sim_world(w, policies=None)
    counted = {}

    def fn(comm):
        comm.barrier()
        if comm.rank == 0:
            counted["before"] = world.net.stats["sent"]
        comm.alltoallv([b"z" for _ in range(w)])
        comm.barrier()
        if comm.rank == 0:
            counted["after"] = world.net.stats["sent"]
        return True

    run_comm_world(w, fn, world=world)
    sent = counted["after"] - counted["before"]
    # W*(W-1) data frames, plus the trailing barrier's 2*(W-1) and any pings
    assert sent >= w * (w - 1)
    assert sent <= w * (w - 1) + 2 * (w - 1) + 8


@pytest.mark.parametrize("w", [2, 3, 5, 8])
def test_alltoallv_matches_transpose_oracle(w):
    rng = random.Random(w * 1000 + 7)
    matrix = [[rng.randbytes(rng.randrange(0, 48)) for _ in range(w)] for _ in range(w)]

    def fn(comm):
        return comm.alltoallv(matrix[comm.rank])

    results = run_comm_world(w, fn)
    for i in range(w):
        for j in range(w):
            assert results[i][j] == matrix[j][i]


@pytest.mark.parametrize("w", [2, 3, 5, 8, 16])
def test_alltoallv_completes_with_tiny_send_window(w):
    # payloads far larger than the window force blocking sends; the pairwise
    # schedule must still complete (an ordering bug deadlocks deterministically)
    payload = bytes(8192)

    def fn(comm):
        out = [payload for _ in range(w)]
        result = comm.alltoallv(out)
        assert all(x == payload for x in result)
        return True

    assert all(run_comm_world(w, fn, send_window=1024))


def test_finalize_then_send_errors():
    def fn(comm):
        comm.finalize()
        with pytest.raises(CommClosed):
            comm.send(comm.rank, 0, b"")
        return True

    run_comm_world(1, fn)


def test_finalize_with_pending_irecv_errors():
    def fn(comm):
        comm.irecv(comm.rank, 0)
        with pytest.raises(OutstandingRequests):
            comm.finalize()
        # satisfy it so the world can shut down cleanly
        comm.send(comm.rank, 0, b"done")
        return True

    run_comm_world(1, fn)


def test_double_finalize_is_noop():
    def fn(comm):
        comm.finalize()
        comm.finalize()
        return True

    run_comm_world(1, fn)


# --- keepalive vs NAT mapping expiry ---

def _stalled_barrier_world(keepalive):
    cfg = CommConfig(keepalive_interval=keepalive, op_timeout=30.0)

    def fn(comm):
        if comm.rank == 1:
            comm.env.sleep(2.0)  # stall while everyone else waits in the barrier
        comm.barrier()
        return "done"

    return run_comm_world(
        4, fn, policies=[AR] * 4, mapping_ttl=0.5, config=cfg
    )


def test_keepalive_survives_stalled_barrier():
    assert _stalled_barrier_world(0.2) == ["done"] * 4


def test_disabled_keepalive_breaks_stalled_barrier():
    with pytest.raises(PeerClosed):
        _stalled_barrier_world(None)


def test_keepalive_outcomes_are_deterministic():
    for _ in range(3):
        assert _stalled_barrier_world(0.2) == ["done"] * 4
        with pytest.raises(PeerClosed):
            _stalled_barrier_world(None)
