"""Rank/world runtime: collectives, shard exchange, shared-seed randomness and counters.

Two transports share one interface. ``InProcessComm`` runs every rank as a thread of the
current process (the test and desk harness); ``TorchComm`` wraps ``torch.distributed``
with the gloo backend for launcher-style multi-process runs (RANK/WORLD_SIZE).
Every collective must be called by all ranks in the same order.
"""

from __future__ import annotations

import logging
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from datetime import timedelta
from typing import Any, Callable, TypeVar

import numpy as np
import torch

import config
from statevec import LayoutError, QubitLayout, StateVector, log2_world

logger = logging.getLogger(__name__)

T = TypeVar("T")

TRANSPORTS = ("local", "inprocess", "torch")


class CommError(RuntimeError):
    """Invalid world/rank setup or a failed collective."""


class CollectiveAbortedError(CommError):
    """Another rank failed or the collective timed out."""


class ShardRoleError(ValueError):
    """exchange_sharded called with qubits in the wrong shard/local roles."""


@dataclass
class CommMetrics:
    all_to_all_seconds: float = 0.0
    all_to_all_bytes: int = 0
    peak_local_bytes: int = 0
    exchanges: int = 0

    def record_all_to_all(self, seconds: float, nbytes: int) -> None:
        self.all_to_all_seconds += max(seconds, 0.0)
        self.all_to_all_bytes += nbytes
        self.exchanges += 1

    def observe_buffer(self, nbytes: int) -> None:
        self.peak_local_bytes = max(self.peak_local_bytes, nbytes)


class Communicator(ABC):
    transport = "abstract"

    def __init__(self, rank: int, world: int):
        self.rank = rank
        self.world = world
        self.metrics = CommMetrics()

    @property
    def shard_bits(self) -> int:
        return log2_world(self.world)

    @abstractmethod
    def all_gather(self, tensor: torch.Tensor) -> list[torch.Tensor]:
        """Rank-ordered copies of every rank's tensor (detached)."""

    @abstractmethod
    def broadcast(self, obj: Any, src: int = 0) -> Any:
        """Picklable object from ``src`` on every rank."""

    @abstractmethod
    def barrier(self) -> None: ...

    @abstractmethod
    def _all_to_all(self, send: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]: ...

    def all_reduce(self, tensor: torch.Tensor) -> torch.Tensor:
        """Sum over ranks, added in rank order so every rank gets the same bits."""
        parts = self.all_gather(tensor)
        total = parts[0]
        for part in parts[1:]:
            total = total + part
        return total

    def all_to_all(self, send: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        """Send ``send[peer]`` to each peer, receive one block from each.

        Counted bytes are the collective's input plus output buffers, self block included.
        """
        payload = {peer: tensor.detach().contiguous() for peer, tensor in send.items()}
        start = time.perf_counter()
        received = self._all_to_all(payload)
        elapsed = time.perf_counter() - start
        nbytes = sum(t.numel() * t.element_size() for t in payload.values())
        nbytes += sum(t.numel() * t.element_size() for t in received.values())
        self.metrics.record_all_to_all(elapsed, nbytes)
        return received

    def close(self) -> None:
        pass

    def __repr__(self) -> str:
        return f"{type(self).__name__}(rank={self.rank}, world={self.world})"


class LocalComm(Communicator):
    transport = "local"

    def __init__(self):
        super().__init__(0, 1)

    def all_gather(self, tensor: torch.Tensor) -> list[torch.Tensor]:
        return [tensor.detach()]

    def broadcast(self, obj: Any, src: int = 0) -> Any:
        return obj

    def barrier(self) -> None:
        pass

    def _all_to_all(self, send: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return dict(send)


class InProcessGroup:
    """Shared rendezvous for the ranks of one in-process world."""

    def __init__(self, world: int, timeout: float | None = None):
        self.world = world
        self.timeout = timeout or config.QSIM_COLLECTIVE_TIMEOUT
        self._barrier = threading.Barrier(world, timeout=self.timeout)
        self._slots: list[Any] = [None] * world
        self._joined: set[int] = set()
        self._lock = threading.Lock()

    def join(self, rank: int) -> None:
        with self._lock:
            if rank in self._joined:
                raise CommError(f"Rank collision: rank {rank} already joined this world")
            self._joined.add(rank)

    def wait(self) -> None:
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise CollectiveAbortedError(
                "Collective aborted: another rank failed or the collective timed out "
                f"({self.timeout:.0f}s)"
            ) from None

    def abort(self) -> None:
        self._barrier.abort()

    def exchange(self, rank: int, value: Any) -> list[Any]:
        self._slots[rank] = value
        self.wait()
        values = list(self._slots)
        self.wait()
        return values


class InProcessComm(Communicator):
    transport = "inprocess"

    def __init__(self, rank: int, group: InProcessGroup):
        super().__init__(rank, group.world)
        self.group = group

    def all_gather(self, tensor: torch.Tensor) -> list[torch.Tensor]:
        parts = self.group.exchange(self.rank, tensor.detach().clone())
        shapes = {tuple(part.shape) for part in parts}
        if len(shapes) != 1:
            raise CommError(f"all_gather shape mismatch across ranks: {sorted(shapes)}")
        return parts

    def broadcast(self, obj: Any, src: int = 0) -> Any:
        values = self.group.exchange(self.rank, obj if self.rank == src else None)
        return values[src]

    def barrier(self) -> None:
        self.group.wait()

    def _all_to_all(self, send: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        outgoing = {peer: tensor.clone() for peer, tensor in send.items()}
        boxes = self.group.exchange(self.rank, outgoing)
        received = {}
        for peer in send:
            if self.rank not in boxes[peer]:
                raise CommError(f"Rank {peer} sent nothing to rank {self.rank}")
            received[peer] = boxes[peer][self.rank]
        return received


class TorchComm(Communicator):
    """torch.distributed (gloo) transport, one process per rank."""

    transport = "torch"

    def __init__(self, rank: int, world: int, timeout: float | None = None):
        super().__init__(rank, world)
        import torch.distributed as tdist

        self._dist = tdist
        if not tdist.is_initialized():
            tdist.init_process_group(
                "gloo",
                init_method=f"tcp://{config.MASTER_ADDR}:{config.MASTER_PORT}",
                rank=rank,
                world_size=world,
                timeout=timedelta(seconds=timeout or config.QSIM_COLLECTIVE_TIMEOUT),
            )
        if tdist.get_world_size() != world or tdist.get_rank() != rank:
            raise CommError(
                f"Process group is rank {tdist.get_rank()}/{tdist.get_world_size()}, "
                f"expected {rank}/{world}"
            )

    def all_gather(self, tensor: torch.Tensor) -> list[torch.Tensor]:
        local = tensor.detach().contiguous()
        shapes: list[Any] = [None] * self.world
        self._dist.all_gather_object(shapes, tuple(local.shape))
        if len(set(shapes)) != 1:
            raise CommError(f"all_gather shape mismatch across ranks: {shapes}")
        out = [torch.empty_like(local) for _ in range(self.world)]
        self._dist.all_gather(out, local)
        return out

    def broadcast(self, obj: Any, src: int = 0) -> Any:
        box = [obj]
        self._dist.broadcast_object_list(box, src=src)
        return box[0]

    def barrier(self) -> None:
        self._dist.barrier()

    def _all_to_all(self, send: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        # Peers exchange equally shaped blocks, so receive buffers mirror the send blocks.
        received = {peer: torch.empty_like(t) for peer, t in send.items() if peer != self.rank}
        ops = []
        for peer, tensor in send.items():
            if peer == self.rank:
                continue
            ops.append(self._dist.P2POp(self._dist.isend, tensor, peer))
            ops.append(self._dist.P2POp(self._dist.irecv, received[peer], peer))
        if ops:
            for req in self._dist.batch_isend_irecv(ops):
                req.wait()
        if self.rank in send:
            received[self.rank] = send[self.rank]
        return received

    def close(self) -> None:
        if self._dist.is_initialized():
            self._dist.destroy_process_group()


def init_comm(
    world: int = 1,
    rank: int = 0,
    transport: str = "local",
    group: InProcessGroup | None = None,
) -> Communicator:
    try:
        log2_world(world)
    except LayoutError as exc:
        raise CommError(str(exc)) from None
    if not 0 <= rank < world:
        raise CommError(f"Rank {rank} outside world of size {world}")
    if transport not in TRANSPORTS:
        raise CommError(f"Unknown transport '{transport}' (valid: {', '.join(TRANSPORTS)})")

    if transport == "torch":
        comm: Communicator = TorchComm(rank, world)
    elif world == 1 and group is None:
        comm = LocalComm()
    else:
        if group is None or group.world != world:
            raise CommError("In-process transport needs an InProcessGroup of the same world size")
        group.join(rank)
        comm = InProcessComm(rank, group)
    comm.barrier()
    logger.debug("Communicator listo: %r (%s)", comm, comm.transport)
    return comm


def comm_from_env() -> Communicator | None:
    """Real transport when RANK and WORLD_SIZE are set (torchrun-style launch)."""
    if not (config.RANK_ENV and config.WORLD_SIZE_ENV):
        return None
    return init_comm(int(config.WORLD_SIZE_ENV), int(config.RANK_ENV), "torch")


def run_ranks(
    world: int, fn: Callable[[Communicator], T], timeout: float | None = None
) -> list[T]:
    """Run ``fn(comm)`` on every rank of an in-process world; results in rank order."""
    try:
        log2_world(world)
    except LayoutError as exc:
        raise CommError(str(exc)) from None
    if world == 1:
        return [fn(init_comm(1))]

    group = InProcessGroup(world, timeout)
    results: list[Any] = [None] * world
    errors: list[BaseException | None] = [None] * world

    def worker(rank: int) -> None:
        try:
            comm = init_comm(world, rank, "inprocess", group=group)
            results[rank] = fn(comm)
        except BaseException as exc:
            errors[rank] = exc
            group.abort()

    threads = [
        threading.Thread(target=worker, args=(rank,), name=f"qsim-rank-{rank}")
        for rank in range(world)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    failures = [exc for exc in errors if exc is not None]
    if failures:
        primary = next(
            (exc for exc in failures if not isinstance(exc, CollectiveAbortedError)),
            failures[0],
        )
        raise primary
    return results


def exchange_sharded(
    state: StateVector,
    sharded_qubit: int,
    local_qubit: int,
    comm: Communicator | None = None,
) -> StateVector:
    """Swap the roles of a sharded qubit and an ungrouped local qubit (one pairwise all-to-all)."""
    comm = comm or state.comm
    layout = state.layout
    if sharded_qubit not in layout.sharded:
        raise ShardRoleError(
            f"Qubit {sharded_qubit} is not sharded (sharded qubits: {list(layout.sharded)})"
        )
    if not layout.is_single(local_qubit):
        raise ShardRoleError(f"Qubit {local_qubit} must be local and ungrouped")

    index = layout.sharded.index(sharded_qubit)
    bit_pos = len(layout.sharded) - 1 - index
    partner = comm.rank ^ (1 << bit_pos)
    my_bit = (comm.rank >> bit_pos) & 1
    dim = 1 + layout.groups.index((local_qubit,))

    keep = state.data.select(dim, my_bit)
    give = state.data.select(dim, 1 - my_bit)
    received = comm.all_to_all({comm.rank: keep, partner: give})[partner]
    pieces = (keep, received) if my_bit == 0 else (received, keep)
    data = torch.stack(pieces, dim=dim)

    sharded = list(layout.sharded)
    sharded[index] = local_qubit
    groups = tuple((sharded_qubit,) if g == (local_qubit,) else g for g in layout.groups)
    comm.metrics.observe_buffer(2 * state.nbytes)
    logger.debug(
        "exchange rank=%d shard q%d <-> local q%d (partner %d)",
        comm.rank, sharded_qubit, local_qubit, partner,
    )
    return state.with_data(data, QubitLayout(groups, tuple(sharded)))


def all_gather_vec(comm: Communicator, local: torch.Tensor) -> torch.Tensor:
    """Rank-ordered concatenation along the last axis; local lengths must agree."""
    lengths = comm.all_gather(torch.tensor([local.shape[-1]]))
    if len({int(n) for n in lengths}) != 1:
        raise CommError(
            f"all_gather_vec length mismatch across ranks: {[int(n) for n in lengths]}"
        )
    return torch.cat(comm.all_gather(local), dim=-1)


def shared_seed_rng(comm: Communicator, seed: int) -> np.random.Generator:
    """Same stream on every rank (rank 0's seed wins)."""
    return np.random.default_rng(comm.broadcast(int(seed), src=0))


def rank_rng(comm: Communicator, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), comm.rank]))


def read_metrics(comm: Communicator) -> CommMetrics:
    return replace(comm.metrics)


class _ReduceToReplica(torch.autograd.Function):
    @staticmethod
    def forward(ctx, tensor, comm):
        return comm.all_reduce(tensor.detach())

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class _ReduceForShards(torch.autograd.Function):
    @staticmethod
    def forward(ctx, tensor, comm):
        ctx.comm = comm
        return comm.all_reduce(tensor.detach())

    @staticmethod
    def backward(ctx, grad):
        return ctx.comm.all_reduce(grad.contiguous()), None


def reduce_to_replica(tensor: torch.Tensor, comm: Communicator) -> torch.Tensor:
    """Cross-rank sum whose result feeds a computation replicated on every rank."""
    if comm.world == 1:
        return tensor
    return _ReduceToReplica.apply(tensor, comm)


def reduce_for_shards(tensor: torch.Tensor, comm: Communicator) -> torch.Tensor:
    """Cross-rank sum whose result feeds rank-local (sharded) computations."""
    if comm.world == 1:
        return tensor
    return _ReduceForShards.apply(tensor, comm)
