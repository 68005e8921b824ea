"""Device object holding one rank's shard, with every registered gate as a method.

    qdev = QuantumDevice(6, comm=comm)
    gates.z(qdev, wires=[0])
    gates.RY(wires=[0], theta=math.pi / 3)(qdev)
    qdev.cx(wires=[0, 1])
    expectations = qdev.measure_allZ()
"""

from __future__ import annotations

import functools
import logging
from typing import Any

import torch

import config
from autodiff import Program, Tape, execute
from dist import Communicator, init_comm
from gates import REGISTRY, GateRegistry
from sampling import measure_allZ
from statevec import StateVector, init_state, to_dense

logger = logging.getLogger(__name__)


class QuantumDevice:
    def __init__(
        self,
        num_qubits: int,
        batch: int = 1,
        comm: Communicator | None = None,
        precision: str | None = None,
        rank_cap: int | None = None,
        invertible: bool | None = None,
        registry: GateRegistry | None = None,
    ):
        self.num_qubits = num_qubits
        self.batch = batch
        self.comm = comm or init_comm()
        self.precision = precision or config.QSIM_PRECISION
        self.rank_cap = rank_cap or config.QSIM_RANK_CAP
        self.invertible = config.QSIM_INVERTIBLE if invertible is None else invertible
        self.registry = registry or REGISTRY
        self.tape: Tape | None = None
        self.state: StateVector = self._fresh()

    def _fresh(self) -> StateVector:
        return init_state(self.num_qubits, self.batch, self.comm, self.precision, self.rank_cap)

    def reset_states(self) -> StateVector:
        """Back to e_0 on every batch element; drops the last tape."""
        self.state = self._fresh()
        self.tape = None
        return self.state

    def __getattr__(self, name: str) -> Any:
        # Only reached for names not set in __init__; guard against lookups before it ran.
        registry = self.__dict__.get("registry")
        if registry is not None and name in registry:
            return functools.partial(registry.as_functional(name), self)
        raise AttributeError(f"{type(self).__name__!s} has no attribute or gate '{name}'")

    def __dir__(self) -> list[str]:
        return sorted(set(super().__dir__()) | set(self.registry.names()))

    def execute(
        self,
        program: Program,
        inputs: torch.Tensor | None = None,
        thetas: torch.Tensor | None = None,
    ) -> StateVector:
        """Run ``program`` from the current state under a fresh tape wired into autograd."""
        self.tape = Tape(invertible=self.invertible)
        self.state = execute(self.state, program, inputs, thetas, self.tape)
        return self.state

    def measure_allZ(self, shots: int = 0, **kwargs: Any) -> torch.Tensor:
        if self.tape is not None:
            kwargs.setdefault("tape", self.tape)
        return measure_allZ(self.state, shots, **kwargs)

    def to_dense(self) -> torch.Tensor:
        return to_dense(self.state)

    def __repr__(self) -> str:
        return (
            f"QuantumDevice(num_qubits={self.num_qubits}, batch={self.batch}, "
            f"rank={self.comm.rank}/{self.comm.world}, precision={self.precision})"
        )
