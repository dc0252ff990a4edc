import math

import numpy as np
import pytest
import torch

from fd_oracle import autograd_at, central_difference
from protoground.encoders import FeatureGrid, TokenFeatures
from protoground.head import BBox, RegressionHead, hadamard_fuse, regress_box


def _lang(values, mask=None):
    values = torch.as_tensor(values, dtype=torch.float64)
    if mask is None:
        mask = torch.ones(values.shape[0], values.shape[2], dtype=torch.bool)
    return TokenFeatures(values, mask)


class TestHadamard:
    def test_scalar_case(self):
        q = FeatureGrid(torch.full((1, 1, 1), 0.5, dtype=torch.float64), 1, 1)
        out = hadamard_fuse(q, _lang([[[0.5]]]), torch.ones(1, 1, dtype=torch.float64))
        assert abs(out.values.item() - math.tanh(0.5) ** 2) < 1e-12

    def test_zero_language_gives_zero(self):
        q = FeatureGrid(torch.randn(2, 4, 6, dtype=torch.float64), 2, 3)
        out = hadamard_fuse(q, _lang(torch.zeros(2, 4, 3)), torch.full((2, 3), 1 / 3, dtype=torch.float64))
        assert (out.values == 0).all()

    def test_bounded(self):
        q = FeatureGrid(torch.randn(3, 8, 10, dtype=torch.float64) * 3, 2, 5)
        out = hadamard_fuse(q, _lang(torch.randn(3, 8, 4) * 3), torch.softmax(torch.randn(3, 4, dtype=torch.float64), -1))
        assert (out.values.abs() < 1).all()

    def test_pooling_oracle(self):
        q = torch.randn(1, 3, 2, dtype=torch.float64)
        lang = torch.randn(1, 3, 4, dtype=torch.float64)
        phi = torch.tensor([[0.1, 0.2, 0.7, 0.0]], dtype=torch.float64)
        out = hadamard_fuse(FeatureGrid(q, 1, 2), _lang(lang), phi).values[0].numpy()
        pooled = lang[0].numpy() @ phi[0].numpy()
        np.testing.assert_allclose(out, np.tanh(q[0].numpy()) * np.tanh(pooled)[:, None], rtol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            hadamard_fuse(FeatureGrid(torch.zeros(1, 4, 1), 1, 1), _lang(torch.zeros(1, 3, 1)), torch.ones(1, 1))


class TestBBox:
    def test_valid(self):
        assert BBox(0.0, 0.0, 1.0, 1.0).as_tensor().tolist() == [0.0, 0.0, 1.0, 1.0]

    @pytest.mark.parametrize("args", [(0.5, 0.5, 0.6, 0.1), (-0.1, 0, 0.5, 0.5), (0, 0, 0, 0.5), (0, 0, 0.5, 1.2)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            BBox(*args)

    def test_head_outputs_always_valid(self):
        torch.manual_seed(0)
        head = RegressionHead(16, layers=1, heads=2, ff_dim=32)
        with torch.no_grad():
            head.mlp[-1].weight.mul_(200)  # push logits to the saturated range too
            boxes = head(FeatureGrid(torch.randn(1000, 16, 4) * 3, 2, 2))
        for row in boxes:
            BBox.from_tensor(row)


class TestRegressionHead:
    def test_shape_and_determinism(self):
        head = RegressionHead(16, layers=2, heads=2, ff_dim=32).eval()
        x = FeatureGrid(torch.randn(3, 16, 6), 2, 3)
        a, b = head(x), head(x)
        assert a.shape == (3, 4)
        assert torch.equal(a, b)

    def test_dropout_disabled(self):
        head = RegressionHead(16, layers=3, heads=2, ff_dim=32).train()
        probs = head.dropout_probabilities()
        assert probs and all(p == 0.0 for p in probs)
        x = FeatureGrid(torch.randn(2, 16, 6), 2, 3)
        assert torch.equal(head(x), head(x))

    def test_zero_layers_reads_reg_token_only(self):
        head = RegressionHead(16, layers=0, heads=2, ff_dim=32)
        out = head(FeatureGrid(torch.randn(2, 16, 6), 2, 3))
        logits = head.mlp(head.norm(head.reg.embedding + head.reg_pos))
        s = torch.sigmoid(logits)
        expected = torch.cat((s[:2] * (1 - s[2:]), s[2:]))
        torch.testing.assert_close(out, expected.expand(2, 4))

    def test_nan_rejected(self):
        head = RegressionHead(16, layers=1, heads=2, ff_dim=32)
        bad = torch.zeros(1, 16, 4)
        bad[0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            regress_box(FeatureGrid(bad, 2, 2), head)

    def test_reg_token_gradient(self):
        torch.manual_seed(0)
        head = RegressionHead(8, layers=2, heads=2, ff_dim=16).double()
        fused = FeatureGrid(torch.randn(2, 8, 4, dtype=torch.float64), 2, 2)
        probe = torch.randn(2, 4, dtype=torch.float64)

        def loss():
            return (head(fused) * probe).sum()

        for t in (head.reg.embedding, head.reg_pos):
            np.testing.assert_allclose(autograd_at(loss, t), central_difference(loss, t), rtol=1e-3, atol=1e-9)

    def test_joint_mode_uses_language_and_mask(self):
        head = RegressionHead(8, layers=1, heads=2, ff_dim=16, joint_language=True).double()
        fused = FeatureGrid(torch.randn(1, 8, 4, dtype=torch.float64), 2, 2)
        words = torch.randn(1, 8, 5, dtype=torch.float64)
        mask = torch.tensor([[True, True, True, False, False]])
        a = head(fused, _lang(words, mask))
        noisy = words.clone()
        noisy[..., 3:] = 100
        assert torch.allclose(a, head(fused, _lang(noisy, mask)))
        changed = words.clone()
        changed[:, :4, 0] += 1
        assert not torch.allclose(a, head(fused, _lang(changed, mask)))
        with pytest.raises(ValueError, match="language"):
            head(fused)
