import math

import numpy as np
import pytest
import torch
from scipy import stats

from autodiff import Tape, recording
from conftest import dense_circuit, random_ops, run_ops
from dist import init_comm, run_ranks
from gates import apply_gate
from sampling import (
    SamplingError,
    ShotCounts,
    gaussian_factor,
    measure_allZ,
    multinomial_pmf,
    sample_exact,
    sample_gaussian,
    z_from_counts,
)
from statevec import init_state


def _dense_z(psi: torch.Tensor, num_qubits: int) -> torch.Tensor:
    probs = psi.abs() ** 2
    index = torch.arange(1 << num_qubits)
    columns = []
    for qubit in range(num_qubits):
        bit = (index >> (num_qubits - 1 - qubit)) & 1
        columns.append((probs * (1 - 2 * bit).to(probs.dtype)).sum(dim=-1))
    return torch.stack(columns, dim=-1)


def test_multinomial_pmf():
    assert multinomial_pmf([1, 1], 2, [0.5, 0.5]) == pytest.approx(0.5)
    assert multinomial_pmf([3, 0, 0], 3, [1.0, 0.0, 0.0]) == pytest.approx(1.0)
    assert multinomial_pmf([2, 1, 0], 3, [0.2, 0.3, 0.5]) == pytest.approx(3 * 0.04 * 0.3)
    with pytest.raises(SamplingError):
        multinomial_pmf([1, 1], 3, [0.5, 0.5])
    with pytest.raises(SamplingError):
        multinomial_pmf([1, 1], 2, [1.0])


@pytest.mark.parametrize("world", [1, 2, 4])
def test_analytic_z_matches_dense(world):
    rng = np.random.default_rng(world + 40)
    ops = random_ops(rng, 6, 30)
    expected = _dense_z(dense_circuit(ops, 6, batch=2), 6)

    def fn(comm):
        return measure_allZ(run_ops(comm, ops, 6, batch=2))

    for z in run_ranks(world, fn):
        torch.testing.assert_close(z, expected, rtol=0, atol=1e-12)


def test_exact_counts_sum_to_n_and_respect_support():
    state = init_state(4, 3, init_comm())
    state = apply_gate(state, "h", [1])
    counts = sample_exact(state, 500, seed=3)
    assert counts.counts.shape == (3, 16)
    assert counts.counts.dtype == torch.int64
    assert counts.counts.sum(dim=-1).tolist() == [500, 500, 500]
    support = counts.counts.nonzero()[:, 1].unique().tolist()
    assert set(support) <= {0, 4}


def test_exact_sampling_rejects_zero_shots():
    with pytest.raises(SamplingError):
        sample_exact(init_state(3, 1, init_comm()), 0, seed=0)


def test_exact_sampling_records_gradient_break():
    tape = Tape()
    state = init_state(3, 1, init_comm())
    with recording(tape):
        sample_exact(state, 10, seed=1)
    assert tape.breaks == [0]


def test_exact_counts_identical_across_worlds():
    rng = np.random.default_rng(77)
    circuits = []
    for _ in range(12):
        q = int(rng.integers(5, 11))
        circuits.append((q, random_ops(rng, q, int(rng.integers(5, 40)))))

    def fn(comm):
        return [
            sample_exact(run_ops(comm, ops, q, batch=2), 1000, seed=index).counts
            for index, (q, ops) in enumerate(circuits)
        ]

    reference = run_ranks(1, fn)[0]
    for world in (2, 4, 8):
        for rank_counts in run_ranks(world, fn):
            for counts, expected in zip(rank_counts, reference):
                assert torch.equal(counts, expected)


def _embedded_state(comm, categories: int, trials: int):
    """Product state on 4 qubits with ``categories`` outcomes spread over the rank bits."""
    state = init_state(4, trials, comm)
    wires = {2: [3], 4: [0, 3], 8: [0, 2, 3]}[categories]
    angles = [math.pi / 3, 2 * math.pi / 5, math.pi / 7]
    for wire, theta in zip(wires, angles):
        state = apply_gate(state, "ry", [wire], theta)
    return state, wires, angles


def _expected_probs(wires, angles):
    probs = np.zeros(16)
    for outcome in range(1 << len(wires)):
        index, mass = 0, 1.0
        for position, (wire, theta) in enumerate(zip(wires, angles)):
            bit = (outcome >> (len(wires) - 1 - position)) & 1
            mass *= math.sin(theta / 2) ** 2 if bit else math.cos(theta / 2) ** 2
            index |= bit << (3 - wire)
        probs[index] = mass
    return probs


@pytest.mark.parametrize("world", [1, 2, 4])
@pytest.mark.parametrize("categories", [2, 4, 8])
def test_exact_sampler_chi_square(world, categories):
    trials, shots = 2000, 1000

    def fn(comm):
        state, wires, angles = _embedded_state(comm, categories, trials)
        return sample_exact(state, shots, seed=1234 + categories).counts, wires, angles

    counts, wires, angles = run_ranks(world, fn)[0]
    assert counts.sum(dim=-1).eq(shots).all()
    probs = _expected_probs(wires, angles)
    support = np.nonzero(probs)[0]
    assert len(support) == categories
    totals = counts.sum(dim=0).numpy()
    assert totals[np.setdiff1d(np.arange(16), support)].sum() == 0
    observed = totals[support]
    expected = probs[support] * trials * shots
    result = stats.chisquare(observed, expected)
    assert result.pvalue > 0.001


def test_gaussian_moments():
    n, trials = 10**6, 20000
    p = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
    draws = sample_gaussian(p.repeat(trials, 1), n, rng=np.random.default_rng(2)).counts
    np.testing.assert_allclose(draws.sum(dim=-1).numpy(), n, rtol=0, atol=1e-9 * n)

    sigma = torch.diag(p) - torch.outer(p, p)
    mean = draws.mean(dim=0)
    se_mean = torch.sqrt(n * torch.diag(sigma) / trials)
    assert ((mean - n * p).abs() <= 5 * se_mean).all()

    centered = draws - mean
    cov = centered.T @ centered / (trials - 1)
    target = n * sigma
    var = torch.diag(target)
    se_cov = torch.sqrt((torch.outer(var, var) + target**2) / trials)
    assert ((cov - target).abs() <= 3 * se_cov).all()


def test_gaussian_factor_reproduces_covariance():
    p = torch.tensor([0.1, 0.25, 0.4, 0.25], dtype=torch.float64)
    factor = gaussian_factor(p)
    s = factor.effective_factor()
    torch.testing.assert_close(s @ s.T, torch.eye(4, dtype=torch.float64) - torch.outer(factor.u, factor.u))
    d = torch.diag(factor.d)
    torch.testing.assert_close(d @ s @ s.T @ d, torch.diag(p) - torch.outer(p, p))


def test_gaussian_factor_rejects_unnormalized():
    with pytest.raises(SamplingError):
        gaussian_factor(torch.tensor([0.5, 0.6], dtype=torch.float64))


@pytest.mark.parametrize("k", [0, 1, 2])
def test_gaussian_degenerate_point_mass(k):
    p = torch.zeros(3, dtype=torch.float64)
    p[k] = 1.0
    y = sample_gaussian(p, 1000, rng=np.random.default_rng(k)).counts
    expected = torch.zeros(3, dtype=torch.float64)
    expected[k] = 1000.0
    assert torch.equal(y, expected)


def test_gaussian_sharded_matches_single_rank():
    p = torch.tensor([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]], dtype=torch.float64)
    z = torch.from_numpy(np.random.default_rng(8).standard_normal((2, 4)))
    reference = sample_gaussian(p, 500, z=z).counts

    def fn(comm):
        cols = slice(2 * comm.rank, 2 * comm.rank + 2)
        return sample_gaussian(p[:, cols], 500, comm=comm, z=z[:, cols])

    parts = run_ranks(2, fn)
    assert [part.offset for part in parts] == [0, 2]
    joined = torch.cat([part.counts for part in parts], dim=-1)
    torch.testing.assert_close(joined, reference, rtol=0, atol=1e-9)


def test_gaussian_is_differentiable_in_p():
    logits = torch.tensor([0.1, -0.3, 0.4], dtype=torch.float64, requires_grad=True)
    z = torch.tensor([0.5, -1.0, 0.0], dtype=torch.float64)
    y = sample_gaussian(torch.softmax(logits, dim=0), 100, z=z).counts
    (grad,) = torch.autograd.grad(y[0], [logits])
    assert torch.isfinite(grad).all() and grad.abs().sum() > 0


def test_measure_modes_and_errors():
    state = apply_gate(init_state(3, 1, init_comm()), "ry", [0], math.pi / 3)
    analytic = measure_allZ(state)
    exact = measure_allZ(state, shots=20000, seed=4)
    approx = measure_allZ(state, shots=20000, mode="approx", seed=4)
    for estimate in (exact, approx):
        torch.testing.assert_close(estimate, analytic, rtol=0, atol=0.05)
    with pytest.raises(SamplingError):
        measure_allZ(state, shots=-1)
    with pytest.raises(SamplingError):
        measure_allZ(state, shots=5, mode="analytic")
    with pytest.raises(SamplingError):
        measure_allZ(state, shots=0, mode="exact")
    with pytest.raises(SamplingError):
        measure_allZ(state, mode="bogus")


def test_z_from_counts_and_csv(tmp_path):
    counts = ShotCounts(torch.tensor([[3, 0, 0, 1]]), 4)
    torch.testing.assert_close(z_from_counts(counts, 2), torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    path = counts.to_csv(tmp_path / "counts.csv")
    assert path.read_text().splitlines() == ["batch_index,basis_index,count", "0,0,3", "0,3,1"]
