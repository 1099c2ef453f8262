import numpy as np
import pytest
import torch

from di3cl.errors import CapacityError, ConfigError, NotReadyError
from di3cl.memorybank import MemoryBank


def _unit_rows(n, dim, seed):
    g = torch.Generator().manual_seed(seed)
    rows = torch.randn(n, dim, generator=g)
    return rows / rows.norm(dim=1, keepdim=True)


def test_empty_bank_raises():
    bank = MemoryBank(8, 4)
    assert len(bank) == 0
    with pytest.raises(NotReadyError):
        bank.negatives()


def test_partial_fill_preserves_order():
    bank = MemoryBank(8, 2)
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    b = torch.tensor([[-1.0, 0.0]])
    bank.enqueue(a)
    bank.enqueue(b)
    assert len(bank) == 3
    assert torch.equal(bank.negatives(), torch.cat([a, b]))


def test_fifo_overwrite_oldest_first():
    # Capacity 4 filled with a, b, c, d; enqueueing e drops a and the
    # oldest-first view reads b, c, d, e.
    bank = MemoryBank(4, 2)
    rows = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    bank.enqueue(rows)
    e = torch.tensor([[np.sqrt(0.5), np.sqrt(0.5)]], dtype=torch.float32)
    bank.enqueue(e)
    expected = torch.cat([rows[1:], e])
    assert torch.allclose(bank.negatives(), expected)
    # Storage order keeps e in the overwritten slot.
    assert torch.allclose(bank.entries[0], e[0])


def test_wraparound_split_write():
    bank = MemoryBank(10, 3)
    a = _unit_rows(4, 3, 0)
    b = _unit_rows(4, 3, 1)
    c = _unit_rows(4, 3, 2)
    for chunk in (a, b, c):
        bank.enqueue(chunk)
    # 12 rows into capacity 10: oldest two of a are gone.
    expected = torch.cat([a[2:], b, c])
    assert torch.allclose(bank.negatives(), expected)


def test_renormalizes_off_unit_rows_and_counts():
    bank = MemoryBank(4, 2)
    bank.enqueue(torch.tensor([[3.0, 0.0], [0.0, 1.0]]))
    assert bank.renormalized == 1
    assert torch.allclose(bank.negatives().norm(dim=1), torch.ones(2), atol=1e-6)


def test_capacity_and_shape_errors():
    bank = MemoryBank(4, 2)
    with pytest.raises(CapacityError):
        bank.enqueue(_unit_rows(5, 2, 0))
    with pytest.raises(ConfigError):
        bank.enqueue(_unit_rows(2, 3, 0))
    with pytest.raises(ConfigError):
        MemoryBank(0, 2)
    with pytest.raises(ConfigError):
        MemoryBank(4, 0)


def test_negatives_is_detached_copy():
    bank = MemoryBank(4, 2)
    rows = _unit_rows(2, 2, 3).requires_grad_(True)
    bank.enqueue(rows)
    negs = bank.negatives()
    assert not negs.requires_grad
    negs.zero_()
    assert not torch.equal(bank.negatives(), negs)


def test_state_dict_round_trip():
    bank = MemoryBank(6, 3)
    bank.enqueue(_unit_rows(4, 3, 0))
    bank.enqueue(_unit_rows(4, 3, 1))
    clone = MemoryBank(6, 3)
    clone.load_state_dict(bank.state_dict())
    assert torch.equal(clone.negatives(), bank.negatives())
    assert len(clone) == len(bank)


def test_matches_bounded_list_oracle():
    rng = np.random.default_rng(99)
    for trial in range(100):
        capacity = int(rng.integers(1, 16))
        dim = int(rng.integers(1, 5))
        bank = MemoryBank(capacity, dim)
        oracle: list[torch.Tensor] = []
        for _ in range(int(rng.integers(1, 12))):
            n = int(rng.integers(1, capacity + 1))
            rows = _unit_rows(n, dim, int(rng.integers(0, 10_000)))
            bank.enqueue(rows)
            oracle.extend(rows)
            oracle = oracle[-capacity:]
            assert torch.allclose(bank.negatives(), torch.stack(oracle), atol=1e-7)
