import numpy as np
import pytest

from sphg import tensor as T
from sphg.errors import ContractError
from sphg.network import NetworkConfig, build_network
from sphg.optim import Adam
from sphg.prune import (build_prune_groups, channel_contribution, channel_spaces, l1_regularizer,
                        prune_step, zero_out_group)


def committed_net(seed=0, **kw):
    cfg = dict(input_size=32, depth=2, base_channels=6)
    cfg.update(kw)
    net = build_network(NetworkConfig(**cfg), rng=np.random.default_rng(seed), dtype=np.float64)
    for layer in net.sp_layers():
        layer.module.commit_to(seed % 2)
    return net


class TestContribution:
    def test_sums_to_one(self):
        net = committed_net()
        for layer in net.sp_layers():
            assert abs(channel_contribution(layer).sum() - 1.0) < 1e-9

    def test_two_channel_case(self):
        net = committed_net()
        layer = net.sp_layers()[0]
        w = np.zeros((2,) + layer.kernels[0].weight.shape[1:])
        w.reshape(2, -1)[1, 0] = np.log(2.0)
        layer.kernels[0].weight.data = w
        np.testing.assert_allclose(channel_contribution(layer), [1 / 3, 2 / 3], atol=1e-12)


class TestGroups:
    def test_skip_connected_layers_share_a_space(self):
        net = committed_net()
        spaces = channel_spaces(net)
        for up1, add in net.skip_edges:
            space = next(s for s in spaces.values() if up1 in s.producers)
            assert len(space.producers) >= 2

    def test_stem_space_is_not_prunable(self):
        net = committed_net()
        spaces = channel_spaces(net)
        stem = net.by_kind("stem")[0].id
        assert not next(s for s in spaces.values() if stem in s.producers).prunable(net)

    def test_uncommitted_network_refused(self):
        with pytest.raises(ContractError):
            build_prune_groups(build_network(input_size=32, depth=2, base_channels=4))


class TestPruneStep:
    def test_rule_b_removes_exact_count(self):
        net = committed_net()
        rep = prune_step(net, layer_threshold=0.0, global_count=5)
        assert rep.rule_b == 5 and rep.rule_a == 0
        assert rep.params_after < rep.params_before == committed_net().num_params()

    def test_rule_a_threshold(self):
        net = committed_net()
        rep = prune_step(net, layer_threshold=10.0, global_count=0)
        assert rep.rule_a > 0
        for layer in net.sp_layers():
            assert layer.c_out >= 1

    def test_never_empties_a_layer(self):
        net = committed_net()
        for _ in range(10):
            prune_step(net, global_count=50)
        assert all(l.c_out == 1 for l in net.sp_layers())
        net.forward(np.zeros((1, 1, 32, 32)))

    def test_stop_below_limits_removal(self):
        net = committed_net()
        base = net.num_params()
        rep = prune_step(net, global_count=100, stop_below=int(0.9 * base))
        assert rep.params_after <= 0.9 * base
        assert rep.params_after > 0.8 * base

    def test_optimizer_moments_follow_weights(self):
        net = committed_net()
        params = net.parameters()
        opt = Adam()
        for p in params.values():
            p.grad = np.ones_like(p.data)
        opt.step(params)
        prune_step(net, global_count=5, optimizer=opt)
        for name, p in net.parameters().items():
            assert opt.state.m[name].shape == p.data.shape

    def test_equivalence_with_zeroing(self, rng):
        net = committed_net(seed=2)
        for layer in net.layers:
            for k in layer.kernels:
                k.bias.data = rng.standard_normal(k.bias.shape) * 0.1
        groups = sorted(build_prune_groups(net), key=lambda g: g.sort_key)[:5]
        spaces = channel_spaces(net)
        for g in groups:
            zero_out_group(net, spaces[g.space], g.channel)
        x = rng.random((3, 1, 32, 32))
        before = net.forward(x)[0].corners.data
        prune_step(net, groups=groups, layer_threshold=0.0, global_count=5)
        after = net.forward(x)[0].corners.data
        np.testing.assert_allclose(after, before, atol=1e-9)


class TestL1:
    def test_l1_counts_only_prunable_weights(self):
        net = committed_net()
        stem = net.by_kind("stem")[0].kernel.weight
        stem.data[...] = 100.0
        v1 = l1_regularizer(net).item()
        stem.data[...] = 0.0
        assert l1_regularizer(net).item() == v1

    def test_l1_gradient_is_sign(self):
        net = committed_net()
        l1_regularizer(net).backward()
        w = net.sp_layers()[0].kernels[0].weight
        np.testing.assert_array_equal(w.grad, np.sign(w.data))
