import threading

import numpy as np
import pytest
import torch

from dist import (
    CollectiveAbortedError,
    CommError,
    InProcessGroup,
    ShardRoleError,
    all_gather_vec,
    exchange_sharded,
    init_comm,
    rank_rng,
    read_metrics,
    reduce_for_shards,
    reduce_to_replica,
    run_ranks,
    shared_seed_rng,
)
from statevec import init_state, to_dense, ungroup


def test_run_ranks_returns_rank_order():
    assert run_ranks(4, lambda comm: (comm.rank, comm.world)) == [(0, 4), (1, 4), (2, 4), (3, 4)]


@pytest.mark.parametrize("world", [0, 3, 6])
def test_world_must_be_power_of_two(world):
    with pytest.raises(CommError):
        run_ranks(world, lambda comm: None)


def test_rank_collision_detected():
    group = InProcessGroup(2, timeout=5)
    group.join(0)
    with pytest.raises(CommError, match="collision"):
        group.join(0)


def test_rank_outside_world():
    with pytest.raises(CommError):
        init_comm(2, 2, "inprocess", group=InProcessGroup(2))


def test_failure_on_one_rank_aborts_the_others():
    def fn(comm):
        if comm.rank == 1:
            raise KeyError("boom")
        comm.barrier()

    with pytest.raises(KeyError):
        run_ranks(2, fn, timeout=10)


def test_timeout_raises_aborted():
    group = InProcessGroup(2, timeout=0.2)
    with pytest.raises(CollectiveAbortedError):
        group.wait()


def test_all_gather_and_all_reduce():
    def fn(comm):
        local = torch.tensor([float(comm.rank), 1.0])
        return comm.all_gather(local), comm.all_reduce(local)

    for parts, total in run_ranks(4, fn):
        assert [p.tolist() for p in parts] == [[0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [3.0, 1.0]]
        assert total.tolist() == [6.0, 4.0]


def test_all_gather_shape_mismatch():
    def fn(comm):
        comm.all_gather(torch.zeros(comm.rank + 1))

    with pytest.raises(CommError):
        run_ranks(2, fn)


def test_all_gather_vec_concatenates_and_checks_lengths():
    def fn(comm):
        return all_gather_vec(comm, torch.full((2, 3), float(comm.rank)))

    for full in run_ranks(2, fn):
        assert full.shape == (2, 6)
        assert full[0].tolist() == [0, 0, 0, 1, 1, 1]

    def bad(comm):
        all_gather_vec(comm, torch.zeros(1, comm.rank + 2))

    with pytest.raises(CommError, match="length mismatch"):
        run_ranks(2, bad)


def test_broadcast_and_seeded_generators():
    def fn(comm):
        shared = shared_seed_rng(comm, 100 + comm.rank).random(3)
        local = rank_rng(comm, 5).random(3)
        return comm.broadcast(f"from-{comm.rank}", src=1), shared, local

    results = run_ranks(2, fn)
    assert [r[0] for r in results] == ["from-1", "from-1"]
    np.testing.assert_array_equal(results[0][1], results[1][1])
    assert not np.array_equal(results[0][2], results[1][2])


def test_exchange_swaps_roles_and_preserves_state():
    def fn(comm):
        state = init_state(4, 2, comm)
        state = ungroup(state, [1])
        before = to_dense(state)
        after = exchange_sharded(state, 3, 1)
        return before, after.layout, to_dense(after), read_metrics(comm)

    for before, layout, after, metrics in run_ranks(2, fn):
        assert layout.sharded == (1,)
        assert (3,) in layout.groups and (1,) not in layout.groups
        torch.testing.assert_close(after, before, rtol=0, atol=0)
        assert metrics.exchanges == 1
        assert metrics.all_to_all_bytes == 2 * (1 << 4) * 16
        assert metrics.all_to_all_seconds >= 0.0


def test_exchange_role_errors():
    def not_sharded(comm):
        exchange_sharded(init_state(4, 1, comm), 0, 1)

    def grouped_local(comm):
        state = init_state(6, 1, comm, rank_cap=6)
        exchange_sharded(state, 5, 4)

    with pytest.raises(ShardRoleError):
        run_ranks(2, not_sharded)
    with pytest.raises(ShardRoleError):
        run_ranks(2, grouped_local)


def test_read_metrics_is_a_snapshot():
    comm = init_comm()
    snapshot = read_metrics(comm)
    comm.metrics.observe_buffer(1024)
    assert snapshot.peak_local_bytes != comm.metrics.peak_local_bytes


def test_reduce_to_replica_backward_is_identity():
    def fn(comm):
        x = torch.tensor([float(comm.rank + 1)], dtype=torch.float64, requires_grad=True)
        total = reduce_to_replica(x * 2, comm)
        (grad,) = torch.autograd.grad(total.sum(), [x])
        return float(total), float(grad)

    assert run_ranks(2, fn) == [(6.0, 2.0), (6.0, 2.0)]


def test_reduce_for_shards_backward_sums_over_ranks():
    def fn(comm):
        x = torch.tensor([float(comm.rank + 1)], dtype=torch.float64, requires_grad=True)
        total = reduce_for_shards(x, comm)
        local_loss = total * float(comm.rank + 1)
        (grad,) = torch.autograd.grad(local_loss.sum(), [x])
        return float(grad)

    assert run_ranks(2, fn) == [3.0, 3.0]


def test_harness_threads_are_named():
    names = run_ranks(2, lambda comm: threading.current_thread().name)
    assert names == ["qsim-rank-0", "qsim-rank-1"]
