"""Sharded statevector storage, qubit layout bookkeeping and the gate contraction kernel.

Local data is a real tensor shaped ``(batch, *groups, 2)``: the first dimension is the
batch, the last holds the real and imaginary parts, and each interior dimension is a
group of one or more qubits (extent ``2**len(group)``, row-major over the group members).
The sharded qubits are not stored locally; they are encoded in the rank index, most
significant bit first. Qubit 0 is the most significant bit of a dense basis index.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
import torch

import config

if TYPE_CHECKING:
    from dist import Communicator

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
UNITARY_TOLERANCE = {torch.float64: 1e-10, torch.float32: 1e-4}
DUMP_MAGIC = b"SVEC"
DUMP_HEADER = struct.Struct("<4sIII")


class LayoutError(ValueError):
    """Invalid qubit layout, wire request or state shape."""


class RankCapError(LayoutError):
    """The tensor rank cap cannot be satisfied."""


class NotUnitaryError(ValueError):
    """A gate matrix deviates from unitarity beyond tolerance."""

    def __init__(self, name: str, deviation: float, tolerance: float):
        super().__init__(
            f"Gate '{name}' is not unitary: max |M M^H - I| = {deviation:.3g} "
            f"(tolerance {tolerance:.1g})"
        )
        self.deviation = deviation


def torch_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise LayoutError(
            f"Unknown precision '{precision}' (valid: {', '.join(DTYPES)})"
        ) from None


def log2_world(world: int) -> int:
    if world <= 0 or world & (world - 1):
        raise LayoutError(f"World size must be a power of two, got {world}")
    return world.bit_length() - 1


def minimum_rank(num_qubits: int, world: int) -> int:
    """Smallest reachable rank: batch, shards, two single dims, one group, component."""
    shard_bits = log2_world(world)
    return 2 + shard_bits + min(num_qubits - shard_bits, 3)


@dataclass(frozen=True)
class QubitLayout:
    groups: tuple[tuple[int, ...], ...]
    sharded: tuple[int, ...] = ()

    @property
    def local_qubits(self) -> tuple[int, ...]:
        return tuple(qubit for group in self.groups for qubit in group)

    @property
    def order_record(self) -> tuple[int, ...]:
        """Physical qubit order: rank bits first, then local dims."""
        return self.sharded + self.local_qubits

    @property
    def num_qubits(self) -> int:
        return len(self.sharded) + sum(len(group) for group in self.groups)

    @property
    def rank(self) -> int:
        return 2 + len(self.sharded) + len(self.groups)

    @property
    def dim_shape(self) -> tuple[int, ...]:
        return tuple(1 << len(group) for group in self.groups)

    @property
    def single_dims(self) -> int:
        return sum(1 for group in self.groups if len(group) == 1)

    def is_single(self, qubit: int) -> bool:
        return (qubit,) in self.groups

    def validate(self, world: int, rank_cap: int) -> None:
        order = self.order_record
        if sorted(order) != list(range(len(order))):
            raise LayoutError(f"Layout {order} is not a permutation of 0..{len(order) - 1}")
        if len(self.sharded) != log2_world(world):
            raise LayoutError(
                f"{len(self.sharded)} sharded qubits but world size {world}"
            )
        if self.single_dims < 2:
            raise LayoutError("Layout must keep at least two ungrouped local qubits")
        if self.rank > rank_cap:
            raise RankCapError(f"Layout rank {self.rank} exceeds cap {rank_cap}")


@dataclass(frozen=True)
class StateVector:
    data: torch.Tensor
    layout: QubitLayout
    comm: "Communicator"
    rank_cap: int = field(default_factory=lambda: config.QSIM_RANK_CAP)

    @property
    def batch_size(self) -> int:
        return int(self.data.shape[0])

    @property
    def num_qubits(self) -> int:
        return self.layout.num_qubits

    @property
    def precision(self) -> str:
        return "float32" if self.data.dtype == torch.float32 else "float64"

    @property
    def local_size(self) -> int:
        return 1 << len(self.layout.local_qubits)

    @property
    def nbytes(self) -> int:
        return self.data.numel() * self.data.element_size()

    def with_data(self, data: torch.Tensor, layout: QubitLayout | None = None) -> StateVector:
        return replace(self, data=data, layout=layout or self.layout)


@dataclass(frozen=True)
class Gate:
    """Concrete gate instance: the (M, Q) pair plus the parameter it was built from.

    ``matrix`` holds real and imaginary parts shaped ``(2**k, 2**k)`` or, for gates
    bound to per-example encoder inputs, ``(batch, 2**k, 2**k)``.
    """

    name: str
    wires: tuple[int, ...]
    matrix: tuple[torch.Tensor, torch.Tensor]
    param: torch.Tensor | None = None

    @property
    def arity(self) -> int:
        return len(self.wires)

    def adjoint(self) -> Gate:
        real, imag = self.matrix
        return replace(
            self,
            name=f"{self.name}^H",
            matrix=(real.transpose(-1, -2), -imag.transpose(-1, -2)),
        )

    def unitarity_deviation(self) -> float:
        real, imag = self.matrix
        m = torch.complex(real.to(torch.float64), imag.to(torch.float64))
        eye = torch.eye(m.shape[-1], dtype=m.dtype)
        return float((m @ m.conj().transpose(-1, -2) - eye).abs().max())

    def check_unitary(self, tolerance: float | None = None) -> None:
        tol = tolerance or UNITARY_TOLERANCE.get(self.matrix[0].dtype, 1e-10)
        deviation = self.unitarity_deviation()
        if not deviation < tol:
            raise NotUnitaryError(self.name, deviation, tol)


def init_state(
    num_qubits: int,
    batch: int,
    comm: "Communicator",
    precision: str | None = None,
    rank_cap: int | None = None,
) -> StateVector:
    """All-zeros basis state e_0 for every batch element."""
    precision = precision or config.QSIM_PRECISION
    rank_cap = rank_cap or config.QSIM_RANK_CAP
    if batch < 1:
        raise LayoutError(f"Batch size must be positive, got {batch}")
    shard_bits = log2_world(comm.world)
    if num_qubits < 2 + shard_bits:
        raise LayoutError(
            f"{num_qubits} qubits cannot keep two local qubits with {comm.world} ranks "
            f"(need at least {2 + shard_bits})"
        )
    needed = minimum_rank(num_qubits, comm.world)
    if rank_cap < needed:
        raise RankCapError(f"Rank cap {rank_cap} below minimum feasible rank {needed}")

    local = num_qubits - shard_bits
    layout = plan_groups(
        QubitLayout(
            groups=tuple((qubit,) for qubit in range(local)),
            sharded=tuple(range(local, num_qubits)),
        ),
        rank_cap,
    )
    data = torch.zeros((batch, *layout.dim_shape, 2), dtype=torch_dtype(precision))
    if comm.rank == 0:
        data.view(batch, -1, 2)[:, 0, 0] = 1.0
    layout.validate(comm.world, rank_cap)
    comm.metrics.observe_buffer(data.numel() * data.element_size())
    logger.debug(
        "init_state q=%d batch=%d rank=%d/%d layout=%s",
        num_qubits, batch, comm.rank, comm.world, layout,
    )
    return StateVector(data=data, layout=layout, comm=comm, rank_cap=rank_cap)


def _blocks(source: Sequence[int], target: Sequence[int]) -> list[tuple[int, ...]]:
    """Maximal runs of ``target`` that are also contiguous, in order, in ``source``."""
    position = {qubit: index for index, qubit in enumerate(source)}
    blocks: list[tuple[int, ...]] = []
    run = [target[0]]
    for qubit in target[1:]:
        if position[qubit] == position[run[-1]] + 1:
            run.append(qubit)
        else:
            blocks.append(tuple(run))
            run = [qubit]
    blocks.append(tuple(run))
    return blocks


def relabel(state: StateVector, layout: QubitLayout) -> StateVector:
    """Move local data into ``layout`` (same sharded qubits). Pure relabeling."""
    source_layout = state.layout
    if layout == source_layout:
        return state
    if layout.sharded != source_layout.sharded or sorted(layout.local_qubits) != sorted(
        source_layout.local_qubits
    ):
        raise LayoutError(f"Cannot relabel {source_layout} into {layout}")

    source = source_layout.local_qubits
    blocks = _blocks(source, layout.local_qubits)
    source_blocks = sorted(blocks, key=lambda block: source.index(block[0]))
    batch = state.batch_size
    data = state.data.reshape(batch, *(1 << len(block) for block in source_blocks), 2)
    if len(blocks) > 1:
        perm = [0] + [1 + source_blocks.index(block) for block in blocks] + [len(blocks) + 1]
        data = data.permute(perm)
    data = data.reshape(batch, *layout.dim_shape, 2)
    return state.with_data(data, layout)


def _split_around(
    groups: Iterable[tuple[int, ...]], qubits: set[int]
) -> tuple[tuple[int, ...], ...]:
    out: list[tuple[int, ...]] = []
    for group in groups:
        if len(group) == 1 or not qubits.intersection(group):
            out.append(group)
            continue
        run: list[int] = []
        for qubit in group:
            if qubit in qubits:
                if run:
                    out.append(tuple(run))
                    run = []
                out.append((qubit,))
            else:
                run.append(qubit)
        if run:
            out.append(tuple(run))
    return tuple(out)


def _check_local(layout: QubitLayout, wires: Sequence[int]) -> None:
    if len(set(wires)) != len(wires):
        raise LayoutError(f"Duplicate wires in {list(wires)}")
    local = set(layout.local_qubits)
    for wire in wires:
        if wire in layout.sharded:
            raise LayoutError(f"Qubit {wire} is sharded; exchange it into local memory first")
        if wire not in local:
            raise LayoutError(f"Qubit {wire} does not exist in a {layout.num_qubits}-qubit state")


def ungroup(state: StateVector, qubits: Sequence[int]) -> StateVector:
    """Split every group holding one of ``qubits`` so each becomes its own dimension."""
    _check_local(state.layout, qubits)
    groups = _split_around(state.layout.groups, set(qubits))
    return relabel(state, QubitLayout(groups, state.layout.sharded))


def move_dims_front(state: StateVector, wires: Sequence[int]) -> StateVector:
    """MoveDim: bring ``wires`` to the leading interior dims, J = [Q, I \\ Q]."""
    wires = tuple(wires)
    layout = state.layout
    _check_local(layout, wires)
    wire_set = set(wires)
    rest = tuple(
        group
        for group in _split_around(layout.groups, wire_set)
        if not (len(group) == 1 and group[0] in wire_set)
    )
    target = QubitLayout(tuple((wire,) for wire in wires) + rest, layout.sharded)
    return relabel(state, target)


def apply_matrix(state: StateVector, gate: Gate) -> StateVector:
    """Y <- mm(M, X) over the leading ``gate.arity`` dims, as four real contractions."""
    k = gate.arity
    front = tuple((wire,) for wire in gate.wires)
    if state.layout.groups[:k] != front:
        raise LayoutError(
            f"Wires {list(gate.wires)} must lead the layout {state.layout.groups}; "
            "call move_dims_front first"
        )
    real, imag = gate.matrix
    size = 1 << k
    if real.shape[-2:] != (size, size) or imag.shape != real.shape:
        raise LayoutError(
            f"Gate '{gate.name}' matrix shape {tuple(real.shape)} does not match "
            f"{k} wires (expected {size}x{size})"
        )
    batch = state.batch_size
    if real.dim() == 3 and real.shape[0] != batch:
        raise LayoutError(
            f"Per-example matrix batch {real.shape[0]} does not match state batch {batch}"
        )
    dtype = state.data.dtype
    real, imag = real.to(dtype), imag.to(dtype)
    x = state.data.reshape(batch, size, -1, 2)
    xr, xi = x[..., 0], x[..., 1]
    yr = real @ xr - imag @ xi
    yi = real @ xi + imag @ xr
    data = torch.stack((yr, yi), dim=-1).reshape(state.data.shape)
    return state.with_data(data)


def plan_groups(layout: QubitLayout, rank_cap: int) -> QubitLayout:
    """Merge rightmost adjacent local dims until the rank fits, sparing the two leftmost singles."""
    if layout.rank <= rank_cap:
        return layout
    needed = minimum_rank(layout.num_qubits, 1 << len(layout.sharded))
    if rank_cap < needed:
        raise RankCapError(f"Rank cap {rank_cap} below minimum feasible rank {needed}")

    groups = [tuple(group) for group in layout.groups]
    while 2 + len(layout.sharded) + len(groups) > rank_cap:
        protected = [i for i, group in enumerate(groups) if len(group) == 1][:2]
        merge_at = next(
            (
                i
                for i in range(len(groups) - 2, -1, -1)
                if i not in protected and i + 1 not in protected
            ),
            None,
        )
        if merge_at is None:
            raise RankCapError(
                f"Cannot reach rank {rank_cap} from {tuple(groups)} without reordering qubits"
            )
        groups[merge_at : merge_at + 2] = [groups[merge_at] + groups[merge_at + 1]]
    return QubitLayout(tuple(groups), layout.sharded)


def regroup(state: StateVector, rank_cap: int | None = None) -> StateVector:
    return relabel(state, plan_groups(state.layout, rank_cap or state.rank_cap))


def to_dense(state: StateVector) -> torch.Tensor:
    """Collective: full complex amplitudes (batch x 2**q) in canonical qubit order on every rank."""
    batch = state.batch_size
    q = state.num_qubits
    local = state.data.detach().reshape(batch, -1, 2).contiguous()
    parts = state.comm.all_gather(local)
    full = torch.stack(parts, dim=1).reshape(batch, *([2] * q), 2)
    order = state.layout.order_record
    perm = [0] + [1 + order.index(qubit) for qubit in range(q)] + [q + 1]
    full = full.permute(perm).reshape(batch, 1 << q, 2)
    return torch.complex(full[..., 0].contiguous(), full[..., 1].contiguous())


def write_dense_dump(path: Path, dense: torch.Tensor) -> Path:
    """16-byte header (magic, u32 q, u32 batch, u32 reserved) then little-endian (re, im) f64 pairs."""
    values = dense.detach().to(torch.complex128).cpu().numpy()
    batch, size = values.shape
    q = size.bit_length() - 1
    if 1 << q != size:
        raise LayoutError(f"Dense state length {size} is not a power of two")
    interleaved = np.empty((batch, size, 2), dtype="<f8")
    interleaved[..., 0] = values.real
    interleaved[..., 1] = values.imag
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(DUMP_HEADER.pack(DUMP_MAGIC, q, batch, 0) + interleaved.tobytes())
    return path


def read_dense_dump(path: Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    magic, q, batch, _ = DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise LayoutError(f"{path} is not a statevector dump (magic {magic!r})")
    values = np.frombuffer(raw, dtype="<f8", offset=DUMP_HEADER.size).reshape(batch, 1 << q, 2)
    return torch.complex(torch.from_numpy(values[..., 0].copy()), torch.from_numpy(values[..., 1].copy()))
