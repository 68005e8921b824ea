"""Reverse-mode differentiation over circuit executions plus the Adam optimizer.

A ``Tape`` records gate applications and shard exchanges while a circuit runs. In
invertible mode it keeps only gate metadata and the final state; the backward pass
recomputes each layer input as x = U^H y. In stored mode every gate input is kept.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import torch

import config
from dist import exchange_sharded
from statevec import Gate, QubitLayout, StateVector, apply_matrix, relabel, ungroup

logger = logging.getLogger(__name__)

Program = Callable[[StateVector, torch.Tensor, torch.Tensor], StateVector]

_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("qsim_active_tape", default=None)


class TapeError(RuntimeError):
    """Tape used out of order (no final state, mode switched after recording)."""


class NoGradientPathError(RuntimeError):
    """The loss does not depend differentiably on the requested tensors."""


class ReplayDivergenceError(RuntimeError):
    """Recomputed activations drifted from the recorded forward pass."""


@dataclass
class BufferLedger:
    """Counts full statevector buffers alive at once."""

    live: int = 0
    peak: int = 0

    def acquire(self, count: int = 1) -> None:
        self.live += count
        self.peak = max(self.peak, self.live)

    def release(self, count: int = 1) -> None:
        self.live = max(self.live - count, 0)


@dataclass
class TapeNode:
    kind: str
    layout: QubitLayout
    gate: Gate | None = None
    definition: Any = None
    slot: tuple[str, int] | None = None
    stored_input: torch.Tensor | None = None
    qubits: tuple[int, int] | None = None


@dataclass
class Tape:
    invertible: bool = field(default_factory=lambda: config.QSIM_INVERTIBLE)
    nodes: list[TapeNode] = field(default_factory=list)
    breaks: list[int] = field(default_factory=list)
    final_state: StateVector | None = None
    initial_layout: QubitLayout | None = None
    initial_is_zero: bool = False
    buffers: BufferLedger = field(default_factory=BufferLedger)

    def begin(self, initial: StateVector) -> None:
        self.nodes.clear()
        self.breaks.clear()
        self.final_state = None
        self.initial_layout = initial.layout
        self.initial_is_zero = _is_zero_state(initial)

    def record_gate(self, definition, gate: Gate, moved: StateVector, slot) -> None:
        stored = None if self.invertible else moved.data.detach().clone()
        self.nodes.append(
            TapeNode("gate", moved.layout, gate, definition, slot, stored_input=stored)
        )

    def record_exchange(self, sharded_qubit: int, local_qubit: int, state: StateVector) -> None:
        self.nodes.append(
            TapeNode("exchange", state.layout, qubits=(sharded_qubit, local_qubit))
        )

    def record_break(self, reason: str) -> None:
        self.breaks.append(len(self.nodes))
        logger.debug("Corte de gradiente en nodo %d: %s", len(self.nodes), reason)

    @property
    def gate_nodes(self) -> list[TapeNode]:
        return [node for node in self.nodes if node.kind == "gate"]

    @property
    def stored_buffers(self) -> int:
        return sum(1 for node in self.nodes if node.stored_input is not None)


@dataclass
class GradientSet:
    d_input: torch.Tensor | None
    d_params: torch.Tensor | None
    d_state: torch.Tensor | None = None


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextmanager
def recording(tape: Tape) -> Iterator[Tape]:
    token = _ACTIVE_TAPE.set(tape)
    try:
        yield tape
    finally:
        _ACTIVE_TAPE.reset(token)


def enable_invertible(tape: Tape, flag: bool) -> Tape:
    if not flag and tape.invertible and tape.gate_nodes:
        raise TapeError("Cannot switch to stored mode after recording: inputs were not kept")
    if flag:
        for node in tape.nodes:
            node.stored_input = None
    tape.invertible = flag
    return tape


def _is_zero_state(state: StateVector) -> bool:
    """Collective: True when every batch element is e_0."""
    flat = state.data.detach().reshape(state.batch_size, -1, 2)
    if state.comm.rank == 0:
        expected = torch.zeros_like(flat)
        expected[:, 0, 0] = 1.0
        local = bool(torch.equal(flat, expected))
    else:
        local = not bool(flat.any())
    votes = state.comm.all_gather(torch.tensor([1 if local else 0]))
    return all(int(v) == 1 for v in votes)


def _zero_deviation(state: StateVector) -> float:
    flat = state.data.detach().reshape(state.batch_size, -1, 2)
    expected = torch.zeros_like(flat)
    if state.comm.rank == 0:
        expected[:, 0, 0] = 1.0
    local = float((flat - expected).abs().max()) if flat.numel() else 0.0
    return max(float(v) for v in state.comm.all_gather(torch.tensor([local], dtype=torch.float64)))


def _pair_dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Re(Σ conj(a) b) per batch element over the (re, im) representation."""
    return (a * b).reshape(a.shape[0], -1).sum(dim=-1)


def _derivative_gate(node: TapeNode, dtype: torch.dtype) -> Gate:
    dm = node.definition.dmatrix(node.gate.param)
    return Gate(
        f"d{node.gate.name}",
        node.gate.wires,
        (dm.real.to(dtype).contiguous(), dm.imag.to(dtype).contiguous()),
    )


def backward(
    tape: Tape,
    d_final: torch.Tensor | StateVector,
    *,
    num_params: int = 0,
    num_features: int = 0,
    trace: list[torch.Tensor] | None = None,
) -> GradientSet:
    """Walk the tape in reverse: ∂x = U^H ∂y, ∂θ = Re Σ ∂y · (dM/dθ x).

    Collective: exchanges are replayed inversely and the parameter and input
    gradients are summed over ranks. ``trace`` collects every recomputed (or
    stored) gate input in reverse order.
    """
    final = tape.final_state
    if final is None:
        raise TapeError("Tape has no final state; run the circuit under execute() first")
    if tape.breaks:
        raise NoGradientPathError(
            "Exact sampling breaks the gradient path; use analytic or approx measurement"
        )
    comm = final.comm
    dtype = final.data.dtype
    batch = final.batch_size
    if isinstance(d_final, StateVector):
        d_final = d_final.data
    if tuple(d_final.shape) != tuple(final.data.shape):
        raise TapeError(
            f"Gradient shape {tuple(d_final.shape)} does not match state {tuple(final.data.shape)}"
        )

    d_params = torch.zeros(num_params, dtype=dtype)
    d_input = torch.zeros(batch, num_features, dtype=dtype)
    ledger = BufferLedger()
    ledger.acquire(tape.stored_buffers)
    tape.buffers = ledger

    y = final.with_data(final.data.detach()) if tape.invertible else None
    g = final.with_data(d_final.detach().to(dtype))
    ledger.acquire(2 if tape.invertible else 1)

    for node in reversed(tape.nodes):
        if node.kind == "exchange":
            sharded_qubit, local_qubit = node.qubits
            g = exchange_sharded(relabel(g, node.layout), local_qubit, sharded_qubit)
            if y is not None:
                y = exchange_sharded(relabel(y, node.layout), local_qubit, sharded_qubit)
            continue

        adjoint = node.gate.adjoint()
        g = relabel(g, node.layout)
        if y is not None:
            y = relabel(y, node.layout)
            x = apply_matrix(y, adjoint)
            ledger.acquire()
            ledger.release()
        else:
            x = g.with_data(node.stored_input)
        if trace is not None:
            trace.append(x.data)

        if node.slot is not None and node.definition.differentiable:
            w = apply_matrix(x, _derivative_gate(node, dtype))
            ledger.acquire()
            contribution = _pair_dot(g.data, w.data)
            ledger.release()
            kind, index = node.slot
            if kind == "theta":
                if config.QSIM_GRAD_REDUCTION == "mean":
                    d_params[index] += contribution.sum() / batch
                else:
                    d_params[index] += contribution.sum()
            elif kind == "input":
                d_input[:, index] += contribution
            else:
                raise TapeError(f"Unknown parameter slot kind '{kind}'")

        g = apply_matrix(g, adjoint)
        ledger.acquire()
        ledger.release()
        if y is not None:
            y = x
        elif node.stored_input is not None:
            ledger.release()

    if y is not None and tape.initial_layout is not None:
        y = relabel(y, tape.initial_layout)
        if tape.initial_is_zero:
            deviation = _zero_deviation(y)
            if deviation > config.QSIM_REPLAY_TOLERANCE:
                raise ReplayDivergenceError(
                    f"Recomputed initial state deviates by {deviation:.3g} "
                    f"(tolerance {config.QSIM_REPLAY_TOLERANCE:g})"
                )
    if tape.initial_layout is not None:
        g = relabel(g, tape.initial_layout)

    if comm.world > 1:
        d_params = comm.all_reduce(d_params)
        d_input = comm.all_reduce(d_input)
    logger.debug(
        "backward: %d nodos, pico de buffers %d (invertible=%s)",
        len(tape.nodes), ledger.peak, tape.invertible,
    )
    return GradientSet(d_input=d_input, d_params=d_params, d_state=g.data)


class _CircuitFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, inputs, thetas, initial_data, initial, program, tape):
        with torch.no_grad(), recording(tape):
            tape.begin(initial)
            final = program(initial, inputs.detach(), thetas.detach())
        tape.final_state = final
        ctx.tape = tape
        ctx.num_params = thetas.numel()
        ctx.num_features = inputs.shape[-1]
        ctx.input_dtype = inputs.dtype
        ctx.theta_dtype = thetas.dtype
        ctx.state_dtype = initial_data.dtype
        return final.data

    @staticmethod
    def backward(ctx, grad_output):
        grads = backward(
            ctx.tape,
            grad_output.contiguous(),
            num_params=ctx.num_params,
            num_features=ctx.num_features,
        )
        d_input = grads.d_input.to(ctx.input_dtype) if ctx.needs_input_grad[0] else None
        d_params = grads.d_params.to(ctx.theta_dtype) if ctx.needs_input_grad[1] else None
        d_state = grads.d_state.to(ctx.state_dtype) if ctx.needs_input_grad[2] else None
        return d_input, d_params, d_state, None, None, None


def execute(
    initial: StateVector,
    program: Program,
    inputs: torch.Tensor | None = None,
    thetas: torch.Tensor | None = None,
    tape: Tape | None = None,
) -> StateVector:
    """Run ``program`` under a tape and attach it to torch autograd.

    The returned state's data carries a grad_fn whenever ``inputs``, ``thetas`` or
    ``initial.data`` require grad; its backward is the tape walk above, so
    executions chain like any other autograd op.
    """
    tape = tape if tape is not None else Tape()
    dtype = initial.data.dtype
    if inputs is None:
        inputs = torch.zeros(initial.batch_size, 0, dtype=dtype)
    if thetas is None:
        thetas = torch.zeros(0, dtype=dtype)
    data = _CircuitFunction.apply(inputs, thetas, initial.data, initial, program, tape)
    return tape.final_state.with_data(data)


def replay(tape: Tape, initial: StateVector) -> StateVector:
    """Re-run the recorded gates forward from ``initial``."""
    state = initial
    for node in tape.nodes:
        if node.kind == "exchange":
            sharded_qubit, local_qubit = node.qubits
            if not state.layout.is_single(local_qubit):
                state = ungroup(state, [local_qubit])
            state = relabel(exchange_sharded(state, sharded_qubit, local_qubit), node.layout)
        else:
            state = apply_matrix(relabel(state, node.layout), node.gate)
    if tape.final_state is not None:
        state = relabel(state, tape.final_state.layout)
    return state


def gradients(
    loss: torch.Tensor,
    tensors: Sequence[torch.Tensor],
    tape: Tape | None = None,
) -> tuple[torch.Tensor | None, ...]:
    """torch.autograd.grad with an explicit error instead of silent zeros."""
    if tape is not None and tape.breaks:
        raise NoGradientPathError(
            "Loss depends on exact sampling, which has no gradient path"
        )
    if not loss.requires_grad:
        raise NoGradientPathError("Loss does not require grad; no gradient path to inputs")
    return torch.autograd.grad(loss, list(tensors), allow_unused=True)


@dataclass
class AdamState:
    lr: float = field(default_factory=lambda: config.ADAM_LR)
    beta1: float = field(default_factory=lambda: config.ADAM_BETA1)
    beta2: float = field(default_factory=lambda: config.ADAM_BETA2)
    eps: float = field(default_factory=lambda: config.ADAM_EPS)
    step: int = 0
    m: dict[int, torch.Tensor] = field(default_factory=dict)
    v: dict[int, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
) -> list[torch.Tensor]:
    """One bias-corrected Adam update; returns new detached parameter tensors."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    step_size = state.lr / bc1

    updated = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        param = param.detach()
        if grad is None:
            updated.append(param.clone())
            continue
        grad = grad.detach()
        if grad.shape != param.shape:
            raise ValueError(
                f"Gradient shape {tuple(grad.shape)} does not match param {tuple(param.shape)}"
            )
        if index not in state.m:
            state.m[index] = torch.zeros_like(param)
            state.v[index] = torch.zeros_like(param)
        state.m[index] = state.beta1 * state.m[index] + (1.0 - state.beta1) * grad
        state.v[index] = state.beta2 * state.v[index] + (1.0 - state.beta2) * grad * grad
        denom = torch.sqrt(state.v[index] / bc2) + state.eps
        updated.append(param - step_size * state.m[index] / denom)
    return updated


def finite_diff_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    values: torch.Tensor,
    eps: float = 1e-5,
    grad: torch.Tensor | None = None,
) -> float:
    """Max relative error between autograd and central differences over every coordinate."""
    values = values.detach().clone()
    if grad is None:
        probe = values.clone().requires_grad_(True)
        (grad,) = gradients(loss_fn(probe), [probe])
        if grad is None:
            raise NoGradientPathError("loss_fn does not use its argument")
    grad = grad.detach().reshape(-1)

    flat = values.reshape(-1)
    worst = 0.0
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += eps
        minus[i] -= eps
        with torch.no_grad():
            f_plus = float(loss_fn(plus.reshape(values.shape)))
            f_minus = float(loss_fn(minus.reshape(values.shape)))
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = float(grad[i])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
