"""Gate registry: each gate is defined once, functional and stateful forms are generated.

Rotations follow RP(θ) = exp(-iθP/2). Two-qubit gates take wires[0] as control and
wires[1] as target. Importing this module exposes every builtin gate as a lowercase
function (``gates.ry(state, wires=[0], theta=...)``) and an uppercase ``torch.nn.Module``
class (``gates.RY(wires=[0], theta=...)``).
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

import torch

import autodiff
from dist import exchange_sharded
from statevec import (
    Gate,
    LayoutError,
    QubitLayout,
    StateVector,
    apply_matrix,
    move_dims_front,
    regroup,
    relabel,
    ungroup,
)

logger = logging.getLogger(__name__)

MatrixFn = Callable[[Any], Any]

UNITARITY_GRID = 16
REGISTRATION_TOLERANCE = 1e-10
DERIVATIVE_TOLERANCE = 1e-6
FD_STEP = 1e-5
_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")


class GateRegistrationError(ValueError):
    """Rejected gate definition (bad name, duplicate, non-unitary, wrong derivative)."""


class UnknownGateError(LookupError):
    def __init__(self, name: str, known: Sequence[str] = ()):
        hint = f" (registered: {', '.join(known)})" if known else ""
        super().__init__(f"Unknown gate '{name}'{hint}")
        self.name = name


class GateArityError(ValueError):
    """Wire count does not match the gate arity."""


class GateParameterError(ValueError):
    """θ missing for a parameterized gate or given to a fixed one."""


def _complex(value: Any) -> torch.Tensor:
    return torch.as_tensor(value).to(torch.complex128)


def _angle(theta: Any) -> torch.Tensor:
    return torch.as_tensor(theta, dtype=torch.float64)


def _mat2(a: Any, b: Any, c: Any, d: Any) -> torch.Tensor:
    """2x2 matrix from entries; batched entries give a (..., 2, 2) stack."""
    a, b, c, d = torch.broadcast_tensors(*(_complex(v) for v in (a, b, c, d)))
    return torch.stack((torch.stack((a, b), dim=-1), torch.stack((c, d), dim=-1)), dim=-2)


def _fixed(rows: list[list[complex]]) -> MatrixFn:
    matrix = torch.tensor(rows, dtype=torch.complex128)
    return lambda theta=None: matrix


def _rx(theta):
    half = _angle(theta) / 2
    return _mat2(torch.cos(half), -1j * torch.sin(half), -1j * torch.sin(half), torch.cos(half))


def _drx(theta):
    half = _angle(theta) / 2
    c, s = torch.cos(half), torch.sin(half)
    return 0.5 * _mat2(-s, -1j * c, -1j * c, -s)


def _ry(theta):
    half = _angle(theta) / 2
    return _mat2(torch.cos(half), -torch.sin(half), torch.sin(half), torch.cos(half))


def _dry(theta):
    half = _angle(theta) / 2
    c, s = torch.cos(half), torch.sin(half)
    return 0.5 * _mat2(-s, -c, c, -s)


def _rz(theta):
    half = _angle(theta) / 2
    return _mat2(torch.exp(-1j * half), 0.0, 0.0, torch.exp(1j * half))


def _drz(theta):
    half = _angle(theta) / 2
    return _mat2(-0.5j * torch.exp(-1j * half), 0.0, 0.0, 0.5j * torch.exp(1j * half))


@dataclass(frozen=True)
class GateDef:
    name: str
    arity: int
    matrix_fn: MatrixFn
    dmatrix_fn: MatrixFn | None = None
    parameterized: bool = False

    @property
    def differentiable(self) -> bool:
        return self.dmatrix_fn is not None

    @property
    def dim(self) -> int:
        return 1 << self.arity

    def matrix(self, theta: Any = None) -> torch.Tensor:
        return _complex(self.matrix_fn(theta))

    def dmatrix(self, theta: Any) -> torch.Tensor:
        if self.dmatrix_fn is None:
            raise GateParameterError(f"Gate '{self.name}' has no derivative")
        return _complex(self.dmatrix_fn(theta))


def split_complex(matrix: torch.Tensor, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    return matrix.real.to(dtype).contiguous(), matrix.imag.to(dtype).contiguous()


def _unitarity_deviation(matrix: torch.Tensor) -> float:
    eye = torch.eye(matrix.shape[-1], dtype=matrix.dtype)
    return float((matrix @ matrix.conj().transpose(-1, -2) - eye).abs().max())


def _as_wires(wires: int | Sequence[int]) -> tuple[int, ...]:
    if isinstance(wires, int):
        return (wires,)
    return tuple(int(w) for w in wires)


class GateRegistry:
    def __init__(self):
        self._defs: dict[str, GateDef] = {}

    def __contains__(self, name: object) -> bool:
        return name in self._defs

    def __iter__(self) -> Iterator[GateDef]:
        return iter(self._defs.values())

    def __len__(self) -> int:
        return len(self._defs)

    def names(self) -> list[str]:
        return list(self._defs)

    def get(self, name: str) -> GateDef:
        try:
            return self._defs[name]
        except KeyError:
            raise UnknownGateError(name, self.names()) from None

    def register(self, definition: GateDef) -> GateDef:
        name = definition.name
        if not _NAME_RE.match(name):
            raise GateRegistrationError(f"Gate name '{name}' must be a lowercase identifier")
        if name in self._defs:
            raise GateRegistrationError(f"Duplicate gate name: {name}")
        if definition.arity < 1:
            raise GateRegistrationError(f"Gate '{name}' arity must be positive")
        _check_definition(definition)
        self._defs[name] = definition
        logger.debug("Gate registrada: %s (arity=%d)", name, definition.arity)
        return definition

    def register_custom(
        self,
        name: str,
        arity: int,
        matrix_fn: MatrixFn,
        dmatrix_fn: MatrixFn | None = None,
        parameterized: bool | None = None,
    ) -> GateDef:
        if parameterized is None:
            parameterized = dmatrix_fn is not None
        return self.register(GateDef(name, arity, matrix_fn, dmatrix_fn, parameterized))

    def as_functional(self, name: str) -> Callable[..., StateVector]:
        definition = self.get(name)

        def functional(target, wires, theta=None, **kwargs) -> StateVector:
            return _apply_to_target(target, definition, wires, theta, **kwargs)

        functional.__name__ = name
        functional.__qualname__ = name
        functional.__doc__ = f"Apply '{name}' to a StateVector or device (arity {definition.arity})."
        return functional

    def as_stateful(self, name: str) -> type[StatefulGate]:
        definition = self.get(name)
        return type(
            name.upper(),
            (StatefulGate,),
            {"definition": definition, "__doc__": f"Stateful '{name}' gate."},
        )


def _check_definition(definition: GateDef) -> None:
    thetas: list[float | None] = (
        [2 * math.pi * i / UNITARITY_GRID for i in range(UNITARITY_GRID)]
        if definition.parameterized
        else [None]
    )
    worst = 0.0
    for theta in thetas:
        try:
            matrix = definition.matrix(theta)
        except Exception as exc:
            raise GateRegistrationError(
                f"Gate '{definition.name}' matrix_fn failed at θ={theta}: {exc}"
            ) from exc
        if tuple(matrix.shape) != (definition.dim, definition.dim):
            raise GateRegistrationError(
                f"Gate '{definition.name}' matrix shape {tuple(matrix.shape)} does not match "
                f"arity {definition.arity} ({definition.dim}x{definition.dim})"
            )
        worst = max(worst, _unitarity_deviation(matrix))
    if not worst < REGISTRATION_TOLERANCE:
        raise GateRegistrationError(
            f"Gate '{definition.name}' is not unitary: max deviation {worst:.6g}"
        )

    if definition.dmatrix_fn is None:
        return
    if not definition.parameterized:
        raise GateRegistrationError(f"Gate '{definition.name}' has a derivative but no θ")
    for theta in thetas:
        numeric = (definition.matrix(theta + FD_STEP) - definition.matrix(theta - FD_STEP)) / (
            2 * FD_STEP
        )
        error = float((definition.dmatrix(theta) - numeric).abs().max())
        if not error < DERIVATIVE_TOLERANCE:
            raise GateRegistrationError(
                f"Gate '{definition.name}' derivative disagrees with finite differences "
                f"at θ={theta:.4f}: max error {error:.3g}"
            )


def builtin_registry() -> GateRegistry:
    r2 = 1 / math.sqrt(2)
    registry = GateRegistry()
    registry.register(GateDef("x", 1, _fixed([[0, 1], [1, 0]])))
    registry.register(GateDef("y", 1, _fixed([[0, -1j], [1j, 0]])))
    registry.register(GateDef("z", 1, _fixed([[1, 0], [0, -1]])))
    registry.register(GateDef("h", 1, _fixed([[r2, r2], [r2, -r2]])))
    registry.register(GateDef("s", 1, _fixed([[1, 0], [0, 1j]])))
    registry.register(GateDef("t", 1, _fixed([[1, 0], [0, complex(r2, r2)]])))
    registry.register(GateDef("rx", 1, _rx, _drx, parameterized=True))
    registry.register(GateDef("ry", 1, _ry, _dry, parameterized=True))
    registry.register(GateDef("rz", 1, _rz, _drz, parameterized=True))
    registry.register(
        GateDef(
            "cx",
            2,
            _fixed([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]]),
        )
    )
    return registry


class StatefulGate(torch.nn.Module):
    """A gate bound to wires, holding its own θ as a parameter when the gate takes one."""

    definition: GateDef

    def __init__(
        self,
        wires: int | Sequence[int],
        theta: Any = None,
        trainable: bool = True,
        definition: GateDef | None = None,
    ):
        super().__init__()
        if definition is not None:
            self.definition = definition
        self.wires = _as_wires(wires)
        _check_arity(self.definition, self.wires)
        if self.definition.parameterized:
            value = _angle(0.0 if theta is None else theta).detach().clone()
            self.theta = torch.nn.Parameter(value, requires_grad=trainable)
        else:
            if theta is not None:
                raise GateParameterError(f"Gate '{self.definition.name}' takes no θ")
            self.register_parameter("theta", None)

    def forward(self, target) -> StateVector:
        """Apply to a StateVector, or in place to a device holding one in ``.state``."""
        if isinstance(target, StateVector):
            return apply(target, self)
        target.state = apply(target.state, self)
        return target.state

    def extra_repr(self) -> str:
        theta = "" if self.theta is None else f", theta={float(self.theta):.6g}"
        return f"{self.definition.name}, wires={list(self.wires)}{theta}"


def _check_arity(definition: GateDef, wires: tuple[int, ...]) -> None:
    if len(wires) != definition.arity:
        raise GateArityError(
            f"Gate '{definition.name}' takes {definition.arity} wire(s), got {len(wires)}"
        )


def _deshard_partner(layout: QubitLayout, wires: tuple[int, ...]) -> int:
    """Lowest-indexed ungrouped local non-wire qubit, else the lowest grouped one."""
    excluded = set(wires)
    singles = [g[0] for g in layout.groups if len(g) == 1 and g[0] not in excluded]
    if singles:
        return min(singles)
    grouped = [q for q in layout.local_qubits if q not in excluded]
    if not grouped:
        raise LayoutError(f"No local qubit left to de-shard wires {list(wires)}")
    return min(grouped)


def _deshard(state: StateVector, wires: tuple[int, ...], tape) -> StateVector:
    for wire in wires:
        if wire not in state.layout.sharded:
            continue
        partner = _deshard_partner(state.layout, wires)
        if not state.layout.is_single(partner):
            state = ungroup(state, [partner])
        state = exchange_sharded(state, wire, partner)
        if tape is not None:
            tape.record_exchange(wire, partner, state)
    return state


def apply_gate(
    state: StateVector,
    gate: str | GateDef,
    wires: int | Sequence[int],
    theta: Any = None,
    *,
    registry: GateRegistry | None = None,
    slot: tuple[str, int] | None = None,
    restore_layout: bool = False,
) -> StateVector:
    """De-shard, move wires to the front, contract, then regroup (or restore the layout)."""
    definition = gate if isinstance(gate, GateDef) else (registry or REGISTRY).get(gate)
    wires = _as_wires(wires)
    _check_arity(definition, wires)
    if definition.parameterized and theta is None:
        raise GateParameterError(f"Gate '{definition.name}' needs θ")
    if not definition.parameterized and theta is not None:
        raise GateParameterError(f"Gate '{definition.name}' takes no θ")
    for wire in wires:
        if not 0 <= wire < state.num_qubits:
            raise LayoutError(
                f"Wire {wire} out of range for a {state.num_qubits}-qubit state"
            )

    tape = autodiff.active_tape()
    if tape is None and torch.is_grad_enabled() and state.data.requires_grad:
        # exchanges detach; keep the state gradient through a one-gate tape
        return autodiff.execute(
            state,
            lambda initial, _inputs, _thetas: apply_gate(
                initial, definition, wires, theta, restore_layout=restore_layout
            ),
        )
    param = None if theta is None else _angle(theta).detach()
    state = _deshard(state, wires, tape)
    moved = move_dims_front(state, wires)
    instance = Gate(
        definition.name,
        wires,
        split_complex(definition.matrix(param), moved.data.dtype),
        param,
    )
    instance.check_unitary()
    out = apply_matrix(moved, instance)
    if tape is not None:
        tape.record_gate(definition, instance, moved, slot)
    out = relabel(out, state.layout) if restore_layout else regroup(out)
    out.comm.metrics.observe_buffer(2 * out.nbytes)
    return out


def apply(
    state: StateVector,
    gate: StatefulGate,
    *,
    slot: tuple[str, int] | None = None,
    restore_layout: bool = False,
) -> StateVector:
    """Apply a stateful gate with its own θ.

    Outside a recording tape, a θ that requires grad runs the gate through
    ``autodiff.execute`` bound to slot ``("theta", 0)``, so ``loss.backward()``
    reaches ``gate.theta`` (and any gradient carried by ``state.data``). Under an
    active tape the gate is recorded like any other, in ``slot`` when given.
    """
    theta = gate.theta
    trainable = (
        theta is not None
        and theta.requires_grad
        and torch.is_grad_enabled()
        and autodiff.active_tape() is None
    )
    if not trainable:
        return apply_gate(
            state, gate.definition, gate.wires, theta, slot=slot, restore_layout=restore_layout
        )

    def program(initial: StateVector, _inputs: torch.Tensor, thetas: torch.Tensor) -> StateVector:
        return apply_gate(
            initial,
            gate.definition,
            gate.wires,
            thetas[0],
            slot=("theta", 0),
            restore_layout=restore_layout,
        )

    return autodiff.execute(state, program, thetas=theta.reshape(1))


def _apply_to_target(target, definition: GateDef, wires, theta=None, **kwargs) -> StateVector:
    """Targets are a StateVector or anything holding one in ``.state`` (QuantumDevice)."""
    if isinstance(target, StateVector):
        return apply_gate(target, definition, wires, theta, **kwargs)
    target.state = apply_gate(target.state, definition, wires, theta, **kwargs)
    return target.state


REGISTRY = builtin_registry()

for _name in REGISTRY.names():
    globals()[_name] = REGISTRY.as_functional(_name)
    globals()[_name.upper()] = REGISTRY.as_stateful(_name)
del _name
