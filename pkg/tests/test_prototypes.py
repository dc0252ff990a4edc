import numpy as np
import pytest
import torch

from fd_oracle import autograd_at, central_difference
from protoground.encoders import FeatureGrid
from protoground.prototypes import (
    BankFileError,
    PrototypeBank,
    assign,
    ema_update,
    freeze,
    load_bank,
    save_bank,
    straight_through,
)


def _bank(protos, momentum=0.9):
    protos = torch.as_tensor(protos, dtype=torch.float64)
    bank = PrototypeBank(protos.shape[0], protos.shape[1], momentum).double()
    bank.prototypes.copy_(protos)
    bank.initialized.fill_(True)
    return bank


def _grid(cells):
    """(HW, C) cell vectors -> single-batch FeatureGrid."""
    cells = torch.as_tensor(cells, dtype=torch.float64)
    return FeatureGrid(cells.T[None].contiguous(), 1, cells.shape[0])


class TestAssign:
    def test_exact_match(self):
        bank = _bank([[0.0, 0.0], [1.0, 1.0], [3.0, -1.0]])
        res = assign(_grid([[1.0, 1.0]]), bank)
        assert res.indices.tolist() == [[1]]
        assert res.distances.item() == 0.0

    def test_nearest(self):
        bank = _bank([[0.0, 0.0], [1.0, 1.0]])
        assert assign(_grid([[0.9, 0.9]]), bank).indices.item() == 1

    def test_tie_goes_to_lowest_index(self):
        bank = _bank([[1.0, 0.0], [-1.0, 0.0]])
        assert assign(_grid([[0.0, 0.0]]), bank).indices.item() == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            k, c, n = rng.integers(1, 8), rng.integers(1, 5), rng.integers(1, 10)
            protos = rng.integers(-3, 4, size=(k, c)).astype(float)
            cells = rng.integers(-3, 4, size=(n, c)).astype(float)
            got = assign(_grid(cells), _bank(protos)).indices[0].numpy()
            d2 = ((cells[:, None, :] - protos[None]) ** 2).sum(-1)
            want = d2.argmin(1)  # numpy argmin also returns the first minimum
            np.testing.assert_array_equal(got, want)

    def test_idempotent(self):
        bank = _bank(np.random.default_rng(1).normal(size=(5, 3)))
        first = assign(_grid(np.random.default_rng(2).normal(size=(20, 3))), bank)
        second = assign(first.quantized, bank)
        assert torch.equal(first.indices, second.indices)
        assert (second.distances == 0).all()

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim"):
            assign(_grid([[1.0, 2.0, 3.0]]), _bank([[0.0, 0.0]]))


class TestStraightThrough:
    def test_forward_value_and_identity_gradient(self):
        bank = _bank([[0.0, 0.0], [1.0, 1.0]])
        cells = torch.tensor([[0.2, 0.1], [0.8, 1.3]], dtype=torch.float64, requires_grad=True)
        grid = FeatureGrid(cells.T[None], 1, 2)
        res = assign(grid, bank)
        out = straight_through(grid, res)
        torch.testing.assert_close(out.values, res.quantized.values)
        out.values.sum().backward()
        assert torch.equal(cells.grad, torch.ones_like(cells))

    def test_finite_difference_with_fixed_offset(self):
        bank = _bank(np.random.default_rng(3).normal(size=(4, 3)))
        feats = torch.randn(1, 3, 5, dtype=torch.float64, requires_grad=True)
        grid = FeatureGrid(feats, 1, 5)
        offset = assign(grid, bank).quantized.values - feats.detach()
        probe = torch.randn(1, 3, 5, dtype=torch.float64)

        def loss():
            # forward with the stop-gradient offset held fixed, as the estimator defines it
            return (torch.sin(feats + offset) * probe).sum()

        def st_loss():
            g = FeatureGrid(feats, 1, 5)
            return (torch.sin(straight_through(g, assign(g, bank)).values) * probe).sum()

        np.testing.assert_allclose(autograd_at(st_loss, feats), central_difference(loss, feats), rtol=1e-3)


class TestEMA:
    def test_unassigned_prototype_unchanged(self):
        bank = _bank([[0.0, 0.0], [10.0, 10.0]])
        before = bank.prototypes[1].clone(), bank.ema_counts[1].clone(), bank.ema_sums[1].clone()
        grid = _grid([[0.1, 0.0], [-0.1, 0.2]])
        ema_update(bank, grid, assign(grid, bank))
        assert torch.equal(bank.prototypes[1], before[0])
        assert torch.equal(bank.ema_counts[1], before[1])
        assert torch.equal(bank.ema_sums[1], before[2])

    def test_single_update_oracle(self):
        bank = _bank([[0.0, 0.0], [5.0, 5.0]], momentum=0.9)
        cells = np.array([[1.0, 0.0], [0.0, 1.0], [4.0, 6.0]])
        grid = _grid(cells)
        ema_update(bank, grid, assign(grid, bank))
        # n = 0.1 * count, m = 0.1 * sum, prototype = m / n = batch mean
        np.testing.assert_allclose(bank.ema_counts.numpy(), [0.2, 0.1])
        np.testing.assert_allclose(bank.prototypes.numpy(), [[0.5, 0.5], [4.0, 6.0]])

    def test_converges_to_cluster_means(self):
        rng = np.random.default_rng(0)
        centers = np.array([[-5.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        bank = _bank(centers + rng.normal(scale=0.5, size=centers.shape), momentum=0.9)
        # a fixed batch: the EMA fixed point is its per-cluster mean
        cells = np.concatenate([c + rng.normal(scale=0.3, size=(40, 2)) for c in centers])
        grid = _grid(cells)
        for _ in range(200):
            ema_update(bank, grid, assign(grid, bank))
        labels = assign(grid, bank).indices[0].numpy()
        means = np.stack([cells[labels == i].mean(0) for i in range(3)])
        np.testing.assert_allclose(bank.prototypes.numpy(), means, atol=1e-4)

    def test_zero_momentum_is_batch_mean(self):
        bank = _bank([[0.0], [10.0]], momentum=0.0)
        grid = _grid([[1.0], [3.0], [9.0]])
        ema_update(bank, grid, assign(grid, bank))
        np.testing.assert_allclose(bank.prototypes.numpy(), [[2.0], [9.0]])

    def test_frozen_rejects_update(self):
        bank = freeze(_bank([[0.0, 0.0]]))
        grid = _grid([[1.0, 1.0]])
        with pytest.raises(RuntimeError, match="frozen"):
            ema_update(bank, grid, assign(grid, bank))

    def test_frozen_lookup_is_stable(self):
        bank = freeze(_bank(np.random.default_rng(4).normal(size=(6, 3))))
        grid = _grid(np.random.default_rng(5).normal(size=(30, 3)))
        a, b = assign(grid, bank), assign(grid, bank)
        assert torch.equal(a.quantized.values, b.quantized.values)

    def test_bad_momentum(self):
        with pytest.raises(ValueError):
            PrototypeBank(4, 2, momentum=1.0)


class TestBankFile:
    def _trained_bank(self):
        bank = PrototypeBank(8, 4)
        bank.init_from_features(FeatureGrid(torch.randn(2, 4, 16), 4, 4), torch.Generator().manual_seed(0))
        grid = FeatureGrid(torch.randn(2, 4, 16), 4, 4)
        ema_update(bank, grid, assign(grid, bank))
        return bank

    def test_roundtrip_bitwise(self, tmp_path):
        bank = self._trained_bank()
        save_bank(bank, tmp_path / "bank.bin")
        loaded = load_bank(tmp_path / "bank.bin", expected_k=8, expected_dim=4)
        for name in ("prototypes", "ema_counts", "ema_sums"):
            assert getattr(bank, name).numpy().tobytes() == getattr(loaded, name).numpy().tobytes()
        assert bool(loaded.initialized) and loaded.momentum == bank.momentum and not loaded.frozen

    def test_wrong_k(self, tmp_path):
        save_bank(self._trained_bank(), tmp_path / "bank.bin")
        with pytest.raises(BankFileError, match="k=16"):
            load_bank(tmp_path / "bank.bin", expected_k=16)

    def test_truncated(self, tmp_path):
        path = tmp_path / "bank.bin"
        save_bank(self._trained_bank(), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(BankFileError, match="offset"):
            load_bank(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bank.bin"
        save_bank(self._trained_bank(), path)
        path.write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
        with pytest.raises(BankFileError, match="magic"):
            load_bank(path)

    def test_init_without_replacement(self):
        bank = PrototypeBank(16, 3)
        feats = FeatureGrid(torch.arange(3 * 16, dtype=torch.float32).reshape(1, 3, 16), 4, 4)
        bank.init_from_features(feats, torch.Generator().manual_seed(0))
        assert torch.unique(bank.prototypes, dim=0).shape[0] == 16
