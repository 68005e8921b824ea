"""Shared fixtures: flat modules on sys.path, a dense reference simulator and circuit generators."""

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np
import pytest
import torch

import config
from gates import REGISTRY, apply_gate
from statevec import init_state

ONE_QUBIT = ("x", "y", "z", "h", "s", "t", "rx", "ry", "rz")
PARAMETERIZED = ("rx", "ry", "rz")


def dense_apply(psi: torch.Tensor, matrix: torch.Tensor, wires, num_qubits: int) -> torch.Tensor:
    """psi (batch, 2**q) complex; matrix (2**k, 2**k) or (batch, 2**k, 2**k); qubit 0 is the MSB."""
    batch = psi.shape[0]
    k = len(wires)
    t = psi.reshape(batch, *([2] * num_qubits))
    t = torch.movedim(t, [1 + w for w in wires], list(range(1, 1 + k)))
    shape = t.shape
    t = matrix.to(torch.complex128) @ t.reshape(batch, 1 << k, -1)
    t = torch.movedim(t.reshape(shape), list(range(1, 1 + k)), [1 + w for w in wires])
    return t.reshape(batch, 1 << num_qubits)


def dense_circuit(ops, num_qubits: int, batch: int = 1) -> torch.Tensor:
    psi = torch.zeros(batch, 1 << num_qubits, dtype=torch.complex128)
    psi[:, 0] = 1.0
    for name, wires, theta in ops:
        psi = dense_apply(psi, REGISTRY.get(name).matrix(theta), wires, num_qubits)
    return psi


def random_ops(rng: np.random.Generator, num_qubits: int, depth: int, names=None):
    names = names or ONE_QUBIT + ("cx",)
    ops = []
    for _ in range(depth):
        name = str(rng.choice(names))
        arity = REGISTRY.get(name).arity
        wires = tuple(int(w) for w in rng.choice(num_qubits, size=arity, replace=False))
        theta = float(rng.uniform(-np.pi, np.pi)) if name in PARAMETERIZED else None
        ops.append((name, wires, theta))
    return ops


def run_ops(comm, ops, num_qubits: int, batch: int = 1, rank_cap=None, restore_layout=False):
    state = init_state(num_qubits, batch, comm, "float64", rank_cap)
    for name, wires, theta in ops:
        state = apply_gate(state, name, wires, theta, restore_layout=restore_layout)
    return state


@pytest.fixture
def isolated_paths(tmp_path, monkeypatch):
    """Point every on-disk location at a temporary directory."""
    monkeypatch.setattr(config, "DATA_DIR", tmp_path / "data")
    monkeypatch.setattr(config, "DB_PATH", tmp_path / "data" / "qsim_state.db")
    monkeypatch.setattr(config, "LOG_DIR", tmp_path / "logs")
    monkeypatch.setattr(config, "OUTPUT_DIR", tmp_path / "out")
    monkeypatch.setattr(config, "RANK_ENV", "")
    monkeypatch.setattr(config, "WORLD_SIZE_ENV", "")
    return tmp_path
