import math

import numpy as np
import pytest
import torch
import torch.nn as nn

import rfsep.model as model_mod
from rfsep.errors import DimensionError, ParameterError
from rfsep.loss import upit_loss
from rfsep.model import (
    FULL_CONFIG,
    TINY_CONFIG,
    DualPathModule,
    DualPathTransformer,
    FeatureExtractor,
    GatedOutput,
    ModelConfig,
    RFSeparator,
    Separator,
    TransformerEncoderBlock,
    count_params,
    param_ledger,
    positional_encoding,
)


def hand_count(n, layers, stacks, k=4, ffw=None, in_ch=2, out=4):
    ffw = ffw or n
    ln = 2 * n
    lin = n * n + n
    extractor = (in_ch * k * k + in_ch * n + n) + ln + (n * k * k + n * n + n) + ln + lin + ln
    layer = 4 * lin + ln + (n * ffw + ffw + ffw * n + n) + ln
    transformer = stacks * 2 * layers * layer
    gate = 3 * lin + ln
    separator = (n * n * k * k + n) + ln + (n * out + out)
    return extractor + transformer + gate + separator


def no_dropout(cfg):
    return ModelConfig(**{**cfg.to_dict(), "dropout": 0.0})


class TestPositionalEncoding:
    def test_first_row(self):
        E = positional_encoding(5, 8, torch.float64)
        np.testing.assert_array_equal(E[0].numpy(), [0, 1, 0, 1, 0, 1, 0, 1])

    def test_sin_one(self):
        assert positional_encoding(3, 4, torch.float64)[1, 0] == pytest.approx(math.sin(1.0))
        assert positional_encoding(3, 4, torch.float64)[1, 0] == pytest.approx(0.8415, abs=1e-4)

    def test_formula(self):
        E = positional_encoding(7, 6, torch.float64)
        p, i = 5, 2
        assert E[p, 2 * i] == pytest.approx(math.sin(p / 10000 ** (2 * i / 6)))
        assert E[p, 2 * i + 1] == pytest.approx(math.cos(p / 10000 ** (2 * i / 6)))

    @pytest.mark.parametrize("length,dim", [(1, 2), (129, 128), (13, 10)])
    def test_shape(self, length, dim):
        assert positional_encoding(length, dim).shape == (length, dim)

    def test_odd_dim(self):
        with pytest.raises(ParameterError):
            positional_encoding(4, 5)

    def test_not_a_parameter(self):
        names = [n for n, _ in RFSeparator(TINY_CONFIG).named_parameters()]
        assert not any("pos" in n for n in names)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ParameterError):
            ModelConfig(n_features=10, n_heads=4)

    def test_round_trip(self):
        cfg = ModelConfig(n_features=16, n_layers=3)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_full_defaults(self):
        c = FULL_CONFIG
        assert (c.n_features, c.n_layers, c.n_stacks, c.n_heads, c.dropout) == (128, 2, 2, 2, 0.1)
        assert c.ffw == 128 and c.out_channels == 4


class TestFeatureExtractor:
    def test_full_shape(self):
        out = FeatureExtractor(FULL_CONFIG)(torch.randn(1, 258, 256, 2))
        assert out.shape == (1, 129, 128, 128)

    def test_tiny_shape(self):
        cfg = ModelConfig(n_features=4, n_heads=2)
        out = FeatureExtractor(cfg)(torch.randn(1, 10, 8, 2))
        assert out.shape == (1, 5, 4, 4)

    def test_zero_input_finite(self):
        out = FeatureExtractor(ModelConfig(n_features=4, n_heads=2))(torch.zeros(1, 10, 8, 2))
        assert torch.isfinite(out).all()

    def test_stride_mismatch(self):
        with pytest.raises(DimensionError):
            FeatureExtractor(ModelConfig(n_features=4, n_heads=2))(torch.zeros(1, 9, 8, 2))


class TestEncoder:
    @pytest.mark.parametrize("length,n,layers", [(4, 4, 1), (7, 8, 2), (1, 2, 3)])
    def test_shape_preserved(self, length, n, layers):
        cfg = ModelConfig(n_features=n, n_layers=layers, n_heads=2, dropout=0.0)
        z = torch.randn(3, length, n)
        assert TransformerEncoderBlock(cfg)(z).shape == z.shape

    def test_permutation_equivariance_without_positions(self, monkeypatch):
        monkeypatch.setattr(model_mod, "positional_encoding", lambda L, N, dtype=None, device=None: torch.zeros(L, N, dtype=dtype))
        cfg = ModelConfig(n_features=4, n_layers=2, n_heads=2, dropout=0.0)
        block = TransformerEncoderBlock(cfg).double().eval()
        z = torch.randn(1, 4, 4, dtype=torch.float64)
        perm = torch.tensor([2, 0, 3, 1])
        torch.testing.assert_close(block(z[:, perm]), block(z)[:, perm])

    def test_positions_break_equivariance(self):
        cfg = ModelConfig(n_features=4, n_layers=1, n_heads=2, dropout=0.0)
        block = TransformerEncoderBlock(cfg).double().eval()
        z = torch.randn(1, 4, 4, dtype=torch.float64)
        perm = torch.tensor([2, 0, 3, 1])
        assert not torch.allclose(block(z[:, perm]), block(z)[:, perm])

    def test_scalar_oracle(self):
        # I=1, heads=1, N=2, L=3; value/output = identity, feed-forward = 0
        cfg = ModelConfig(n_features=2, n_layers=1, n_heads=1, dropout=0.0)
        block = TransformerEncoderBlock(cfg).double().eval()
        layer = block.layers[0]
        rng = np.random.default_rng(11)
        wq, wk = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        bq, bk = rng.standard_normal(2), rng.standard_normal(2)
        g1, b1, g2, b2 = rng.standard_normal((4, 2))
        with torch.no_grad():
            att = layer.attention
            att.query.weight.copy_(torch.tensor(wq))
            att.query.bias.copy_(torch.tensor(bq))
            att.key.weight.copy_(torch.tensor(wk))
            att.key.bias.copy_(torch.tensor(bk))
            for lin in (att.value, att.out):
                lin.weight.copy_(torch.eye(2))
                lin.bias.zero_()
            for lin in (layer.ffw[0], layer.ffw[2]):
                lin.weight.zero_()
                lin.bias.zero_()
            layer.norm1.weight.copy_(torch.tensor(g1))
            layer.norm1.bias.copy_(torch.tensor(b1))
            layer.norm2.weight.copy_(torch.tensor(g2))
            layer.norm2.bias.copy_(torch.tensor(b2))
        Z = rng.standard_normal((3, 2))

        def ln(row, g, b):
            mu = (row[0] + row[1]) / 2
            var = ((row[0] - mu) ** 2 + (row[1] - mu) ** 2) / 2
            return [g[j] * (row[j] - mu) / math.sqrt(var + 1e-5) + b[j] for j in range(2)]

        Z1 = [[Z[p][j] + (math.sin(p) if j == 0 else math.cos(p)) for j in range(2)] for p in range(3)]
        q = [[sum(Z1[p][i] * wq[j][i] for i in range(2)) + bq[j] for j in range(2)] for p in range(3)]
        k = [[sum(Z1[p][i] * wk[j][i] for i in range(2)) + bk[j] for j in range(2)] for p in range(3)]
        expected = []
        for p in range(3):
            s = [sum(q[p][j] * k[r][j] for j in range(2)) / math.sqrt(2) for r in range(3)]
            w = [math.exp(v - max(s)) for v in s]
            w = [v / sum(w) for v in w]
            a = [sum(w[r] * Z1[r][j] for r in range(3)) for j in range(2)]
            z2 = ln([a[j] + Z1[p][j] for j in range(2)], g1, b1)
            z3 = ln(z2, g2, b2)
            expected.append([z3[j] + Z[p][j] for j in range(2)])
        got = block(torch.tensor(Z)[None])[0].detach().numpy()
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)


class TestDualPath:
    @pytest.mark.parametrize("stacks", [1, 2, 3])
    def test_shape(self, stacks):
        cfg = ModelConfig(n_features=4, n_layers=1, n_stacks=stacks, n_heads=2)
        x = torch.randn(2, 5, 4, 4)
        assert DualPathTransformer(cfg)(x).shape == x.shape

    def test_zero_stacks_identity(self):
        cfg = ModelConfig(n_features=4, n_stacks=0, n_heads=2)
        x = torch.randn(1, 5, 4, 4)
        assert torch.equal(DualPathTransformer(cfg)(x), x)

    def test_freq_pass_column_locality(self):
        cfg = ModelConfig(n_features=4, n_layers=1, n_heads=2, dropout=0.0)
        mod = DualPathModule(cfg).double().eval()
        a = torch.randn(1, 5, 4, 4, dtype=torch.float64)
        b = a.clone()
        b[:, :, 2] += torch.randn(5, 4, dtype=torch.float64)
        diff = (mod.freq_pass(a) - mod.freq_pass(b)).abs().amax(dim=(0, 1, 3))
        assert diff[2] > 0
        assert torch.all(diff[[0, 1, 3]] == 0)

    def test_time_pass_row_locality(self):
        cfg = ModelConfig(n_features=4, n_layers=1, n_heads=2, dropout=0.0)
        mod = DualPathModule(cfg).double().eval()
        a = torch.randn(1, 5, 4, 4, dtype=torch.float64)
        b = a.clone()
        b[:, 1] += 1.0
        diff = (mod.time_pass(a) - mod.time_pass(b)).abs().amax(dim=(0, 2, 3))
        assert diff[1] > 0
        assert torch.all(diff[[0, 2, 3, 4]] == 0)

    def test_weight_sharing(self):
        cfg = ModelConfig(n_features=4, n_layers=1, n_heads=2, dropout=0.0)
        mod = DualPathModule(cfg).double().eval()
        x = torch.randn(1, 5, 4, 4, dtype=torch.float64)
        before = mod.freq_pass(x)
        with torch.no_grad():
            mod.freq_encoder.layers[0].ffw[0].weight.add_(0.1)
        changed = (mod.freq_pass(x) - before).abs().amax(dim=(0, 1, 3))
        assert torch.all(changed > 0)
        # parameters do not depend on how many blocks there are
        small = count_params(RFSeparator(ModelConfig(n_features=4, n_heads=2, signal_length=2048)))
        large = count_params(RFSeparator(ModelConfig(n_features=4, n_heads=2, signal_length=65280)))
        assert small == large


class TestGate:
    def test_gate_bound(self):
        g = GatedOutput(ModelConfig(n_features=8, n_heads=2))
        x = 100 * torch.randn(3, 4, 4, 8)
        assert g.gate(x).abs().max() <= 1

    def test_zero_input(self):
        g = GatedOutput(ModelConfig(n_features=8, n_heads=2))
        with torch.no_grad():
            g.tanh_proj.bias.zero_()
            g.sigmoid_proj.bias.zero_()
        assert torch.count_nonzero(g.gate(torch.zeros(1, 2, 2, 8))) == 0

    def test_distinct_projections(self):
        g = GatedOutput(ModelConfig(n_features=8, n_heads=2))
        assert not torch.equal(g.tanh_proj.weight, g.sigmoid_proj.weight)

    def test_shape_preserved(self):
        x = torch.randn(2, 5, 4, 8)
        assert GatedOutput(ModelConfig(n_features=8, n_heads=2))(x).shape == x.shape

    def test_gate_jacobian_finite_differences(self):
        g = GatedOutput(ModelConfig(n_features=2, n_heads=1)).double()
        for p in g.parameters():
            nn.init.normal_(p)
        x = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        jac = torch.autograd.functional.jacobian(g.gate, x).reshape(8, 8)
        h = 1e-6
        fd = torch.empty(8, 8, dtype=torch.float64)
        for i in range(8):
            e = torch.zeros(8, dtype=torch.float64)
            e[i] = h
            e = e.view_as(x)
            fd[:, i] = ((g.gate(x + e) - g.gate(x - e)) / (2 * h)).reshape(-1).detach()
        assert ((jac - fd).norm() / fd.norm()) < 1e-3


class TestSeparator:
    def test_tiny_shape(self):
        sep = Separator(ModelConfig(n_features=4, n_heads=2))
        assert sep(torch.randn(1, 5, 4, 4)).shape == (1, 10, 8, 4)

    def test_tiny_crop(self):
        model = RFSeparator(ModelConfig(n_features=4, n_heads=2))
        assert model.mask_params(torch.randn(1, 9, 8, 2)).shape == (1, 9, 8, 4)

    def test_full_upsample(self):
        sep = Separator(FULL_CONFIG)
        assert sep(torch.randn(1, 129, 128, 128)).shape == (1, 258, 256, 4)

    def test_linear_head(self):
        sep = Separator(ModelConfig(n_features=4, n_heads=2)).double()
        x = torch.randn(1, 5, 4, 4, dtype=torch.float64)
        with torch.no_grad():
            sep.head.bias.zero_()
        base = sep(x)
        with torch.no_grad():
            sep.head.weight.mul_(2.5)
        torch.testing.assert_close(sep(x), 2.5 * base)


class TestForward:
    def test_full_shapes(self):
        model = RFSeparator(FULL_CONFIG).eval()
        with torch.no_grad():
            S = model.mask_params(torch.randn(1, 257, 256, 2))
        assert S.shape == (1, 257, 256, 4)

    def test_full_forward_deterministic(self):
        model = RFSeparator(FULL_CONFIG).eval()
        x = torch.randn(65280)
        with torch.no_grad():
            a, b = model(x), model(x)
        assert a.shape == (2, 65280)
        assert torch.isfinite(a).all()
        assert torch.equal(a, b)

    def test_tiny_batch(self):
        model = RFSeparator(TINY_CONFIG).eval()
        with torch.no_grad():
            out = model(torch.randn(3, 2048))
        assert out.shape == (3, 2, 2048)

    def test_dropout_contract(self):
        model = RFSeparator(TINY_CONFIG)
        x = torch.randn(1, 2048)
        model.train()
        torch.manual_seed(1)
        a = model(x)
        torch.manual_seed(2)
        b = model(x)
        assert not torch.equal(a, b)
        model.eval()
        clean = RFSeparator(no_dropout(TINY_CONFIG)).eval()
        clean.load_state_dict(model.state_dict())
        with torch.no_grad():
            torch.testing.assert_close(model(x), clean(x), rtol=0, atol=0)

    def test_init_scheme(self):
        model = RFSeparator(TINY_CONFIG)
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                assert torch.count_nonzero(p) == 0, name
        for m in model.modules():
            if isinstance(m, nn.LayerNorm):
                assert torch.all(m.weight == 1)

    def test_every_parameter_gets_gradient(self):
        model = RFSeparator(TINY_CONFIG).train()
        x = torch.randn(2, 2048)
        truth = torch.randn(2, 2, 2048)
        upit_loss(truth, model(x)).backward()
        for name, p in model.named_parameters():
            norm = float(p.grad.norm())
            if name.endswith("attention.key.bias"):
                # softmax is invariant to a per-query constant, which is all this bias adds
                assert norm < 1e-4 * float(model.extractor.proj.weight.grad.norm()) + 1e-9, name
            else:
                assert norm > 0, name


class TestCounts:
    def test_full_exact(self):
        assert count_params(RFSeparator(FULL_CONFIG)) == 1_145_764

    def test_full_hand_ledger(self):
        assert hand_count(128, 2, 2) == 1_145_764

    def test_single_pointwise(self):
        assert count_params(nn.Linear(2, 4)) == 12
        assert count_params(nn.Conv2d(2, 4, 1)) == 12

    def test_tiny_hand_ledger(self):
        assert count_params(RFSeparator(TINY_CONFIG)) == hand_count(8, 1, 1) == 2620

    @pytest.mark.parametrize("n,layers,stacks", [(4, 1, 2), (16, 3, 1), (6, 2, 3)])
    def test_other_configs(self, n, layers, stacks):
        cfg = ModelConfig(n_features=n, n_layers=layers, n_stacks=stacks, n_heads=2)
        assert count_params(RFSeparator(cfg)) == hand_count(n, layers, stacks)

    def test_ledger_sums(self):
        model = RFSeparator(TINY_CONFIG)
        ledger = param_ledger(model)
        assert sum(c for _, _, c in ledger) == count_params(model)
        assert all(int(np.prod(s)) == c for _, s, c in ledger)
