"""Channel pruning with skip-connection groups.

Channels that meet in an elementwise add must disappear together, so the
graph is first partitioned into *channel spaces*: every conv output opens a
space, pooling/upsampling pass their input's space through and an add merges
the spaces of its operands. Channel ``i`` of a space is one
:class:`PruneGroup` whose members are channel ``i`` of every producer in
that space.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .network import CONV_KINDS

PRUNABLE_PRODUCERS = ("conv-block", "remap")


@dataclass
class PruneGroup:
    space: int
    channel: int
    members: list
    score: float = 0.0
    alive: bool = True

    @property
    def sort_key(self):
        return (self.score, min(m[0] for m in self.members), self.channel)


@dataclass
class ChannelSpace:
    root: int
    producers: list = field(default_factory=list)
    consumers: list = field(default_factory=list)

    def prunable(self, net):
        return bool(self.producers) and all(
            net.layers[p].kind in PRUNABLE_PRODUCERS for p in self.producers
        )


@dataclass
class PruneReport:
    removed: list
    rule_a: int
    rule_b: int
    params_before: int
    params_after: int
    channels: dict

    def lines(self):
        pairs = " ".join(f"{l}:{c}" for l, c in self.removed)
        chans = " ".join(f"{k}={v}" for k, v in sorted(self.channels.items()))
        return (f"removed={len(self.removed)} rule_a={self.rule_a} rule_b={self.rule_b} "
                f"params={self.params_before}->{self.params_after} channels[{chans}] pairs[{pairs}]")


def channel_spaces(net):
    """Partition conv outputs into spaces tied by skip/merge additions."""
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    space_of = {}
    for layer in net.layers:
        if layer.kind == "input" or layer.kind in CONV_KINDS:
            parent[layer.id] = layer.id
            space_of[layer.id] = layer.id
        elif layer.kind in ("pool", "upsample"):
            space_of[layer.id] = space_of[layer.inputs[0]]
        elif layer.kind in ("skip-add", "merge"):
            a, b = (find(space_of[i]) for i in layer.inputs)
            root, other = min(a, b), max(a, b)
            parent[other] = root
            space_of[layer.id] = root
        else:
            raise ContractError(f"unknown layer kind {layer.kind!r}")

    spaces = {}
    for layer in net.layers:
        if layer.kind in CONV_KINDS:
            r = find(space_of[layer.id])
            spaces.setdefault(r, ChannelSpace(r)).producers.append(layer.id)
    for layer in net.layers:
        if layer.kind in CONV_KINDS and layer.kind != "remap":
            r = find(space_of[layer.inputs[0]])
            spaces.setdefault(r, ChannelSpace(r)).consumers.append(layer.id)
    return spaces


def _weight(layer):
    ks = layer.kernels
    if len(ks) != 1:
        raise ContractError(f"layer {layer.id} is not committed to a single kernel")
    return ks[0]


def channel_contribution(layer):
    """Softmax over output channels of the per-channel L2 weight norms."""
    w = _weight(layer).weight.data.astype(np.float64)
    norms = np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))
    e = np.exp(norms - norms.max())
    return e / e.sum()


def build_prune_groups(net):
    """One group per channel index of every prunable space, scored by summed contribution."""
    if not net.all_committed():
        raise ContractError("prune groups need a fully committed network")
    groups = []
    contrib = {}
    for space in channel_spaces(net).values():
        if not space.prunable(net):
            continue
        widths = {net.layers[p].c_out for p in space.producers}
        if len(widths) != 1:
            raise ContractError(f"space {space.root} producers disagree on width: {widths}")
        for p in space.producers:
            if p not in contrib:
                contrib[p] = channel_contribution(net.layers[p])
        for ch in range(widths.pop()):
            members = [(p, ch) for p in space.producers]
            score = float(sum(contrib[p][ch] for p in space.producers))
            groups.append(PruneGroup(space.root, ch, members, score))
    return groups


def _removal_cost(net, space, cin, cout):
    cost = 0
    for p in space.producers:
        k = _weight(net.layers[p]).k
        cost += cin[p] * k * k + 1
    for q in space.consumers:
        k = _weight(net.layers[q]).k
        cost += cout[q] * k * k
    return cost


def prune_step(net, groups=None, layer_threshold=0.01, global_count=5,
               optimizer=None, stop_below=None):
    """Remove low-contribution groups in place and return a :class:`PruneReport`.

    Rule (a) drops every group scoring below ``layer_threshold``; rule (b)
    drops the ``global_count`` lowest-scoring groups of the whole model. A
    group that would empty its layer is skipped and the next one taken.
    Removal stops early once the parameter count reaches ``stop_below``.
    """
    if layer_threshold < 0 or global_count < 0:
        raise ConfigError("pruning thresholds must be non-negative")
    groups = build_prune_groups(net) if groups is None else groups
    spaces = channel_spaces(net)
    params_before = net.num_params()
    order = sorted(groups, key=lambda g: g.sort_key)

    cin = {l.id: l.c_in for l in net.layers}
    cout = {l.id: l.c_out for l in net.layers}
    width = {r: cout[s.producers[0]] for r, s in spaces.items() if s.producers}
    count = params_before
    chosen = []
    n_a = n_b = 0

    def take(g):
        nonlocal count
        if width[g.space] <= 1:
            return False
        space = spaces[g.space]
        count -= _removal_cost(net, space, cin, cout)
        for p in space.producers:
            cout[p] -= 1
        for q in space.consumers:
            cin[q] -= 1
        width[g.space] -= 1
        g.alive = False
        chosen.append(g)
        return True

    def done():
        return stop_below is not None and count <= stop_below

    for g in order:
        if done():
            break
        if g.score < layer_threshold and take(g):
            n_a += 1
    for g in order:
        if done() or n_b >= global_count:
            break
        if g.alive and take(g):
            n_b += 1

    by_space = {}
    for g in chosen:
        by_space.setdefault(g.space, []).append(g.channel)
    for root, drop in by_space.items():
        apply_channel_removal(net, spaces[root], drop, optimizer)
    net.refresh_channels()
    after = net.num_params()
    if after != count:
        raise ContractError(f"parameter bookkeeping drifted: {after} != {count}")
    removed = sorted((m[0], m[1]) for g in chosen for m in g.members)
    channels = {l.id: l.c_out for l in net.layers if l.kind in PRUNABLE_PRODUCERS}
    return PruneReport(removed, n_a, n_b, params_before, after, channels)


def apply_channel_removal(net, space, drop, optimizer=None):
    """Slice channels ``drop`` out of every producer and consumer of ``space``."""
    width = net.layers[space.producers[0]].c_out
    keep = np.array([i for i in range(width) if i not in set(drop)], dtype=np.int64)
    if keep.size == 0:
        raise ContractError(f"refusing to empty space {space.root}")
    for p in space.producers:
        kern = _weight(net.layers[p])
        for t, axis in ((kern.weight, 0), (kern.bias, 0)):
            t.data = np.ascontiguousarray(np.take(t.data, keep, axis=axis))
            t.grad = None
            if optimizer is not None:
                optimizer.slice_param(t.name, axis, keep)
    for q in space.consumers:
        kern = _weight(net.layers[q])
        kern.weight.data = np.ascontiguousarray(np.take(kern.weight.data, keep, axis=1))
        kern.weight.grad = None
        if optimizer is not None:
            optimizer.slice_param(kern.weight.name, 1, keep)


def prunable_weights(net):
    spaces = channel_spaces(net)
    out = []
    for space in spaces.values():
        if space.prunable(net):
            out += [k.weight for p in space.producers for k in net.layers[p].kernels]
    return out


def l1_regularizer(net):
    """Sum of absolute weights over all prunable output channels."""
    total = None
    for w in prunable_weights(net):
        term = T.tsum(T.tabs(w))
        total = term if total is None else total + term
    return total if total is not None else T.Tensor(np.zeros(()))


def zero_out_group(net, space, channel):
    """Zero a group's producer channels and every consumer input slice (oracle helper)."""
    for p in space.producers:
        kern = _weight(net.layers[p])
        kern.weight.data[channel] = 0
        kern.bias.data[channel] = 0
    for q in space.consumers:
        _weight(net.layers[q]).weight.data[:, channel] = 0
