"""Single/stacked hourglass network built from SP convolution blocks.

The graph is an ordered list of :class:`LayerSpec` nodes in topological
order. Each hourglass level has an upper branch (a conv block at the current
resolution) and a lower branch (pool, conv, recursion, conv, upsample); the
two meet in an elementwise ``skip-add``. Three 1x1 heads read the hourglass
output and produce corner, entry-line and separating-line heatmaps.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .select import ConvKernel, SelectModule, candidate_specs, he_kernel

HEAD_NAMES = ("corners", "entry_lines", "separating_lines")
CONV_KINDS = ("stem", "conv-block", "head", "remap")


@dataclass
class HeatmapTriple:
    corners: T.Tensor
    entry_lines: T.Tensor
    separating_lines: T.Tensor

    def as_tuple(self):
        return (self.corners, self.entry_lines, self.separating_lines)


@dataclass
class LayerSpec:
    id: int
    kind: str
    inputs: tuple
    c_in: int
    c_out: int
    size: int
    stack: int = 0
    module: SelectModule = None
    kernel: ConvKernel = None
    head: str = None

    @property
    def dilation(self):
        if self.kind == "conv-block":
            return self.module.kernel.dilation if self.module.is_committed else None
        if self.kernel is not None:
            return self.kernel.dilation
        return None

    @property
    def kernels(self):
        if self.module is not None:
            return self.module.candidates
        if self.kernel is not None:
            return [self.kernel]
        return []

    def parameters(self):
        if self.module is not None:
            return self.module.parameters()
        if self.kernel is not None:
            return {self.kernel.weight.name: self.kernel.weight, self.kernel.bias.name: self.kernel.bias}
        return {}


@dataclass
class NetworkConfig:
    input_size: int = 64
    depth: int = 3
    base_channels: int = 16
    stacks: int = 1
    dilations: tuple = (1, 2)
    large_feature_size: int = 28
    cen_hidden: int = 16
    head_bias: float = -2.19


PRESETS = {
    "desk": NetworkConfig(),
    "full": NetworkConfig(input_size=224, depth=4, base_channels=64),
}


@dataclass
class NetworkGraph:
    config: NetworkConfig
    layers: list = field(default_factory=list)
    skip_edges: list = field(default_factory=list)
    head_ids: list = field(default_factory=list)
    last_outputs: list = None

    # -- topology queries -------------------------------------------------------
    @property
    def stacks(self):
        return self.config.stacks

    @property
    def depth(self):
        return self.config.depth

    def layer(self, layer_id):
        return self.layers[layer_id]

    def by_kind(self, kind):
        return [l for l in self.layers if l.kind == kind]

    def sp_layers(self):
        return self.by_kind("conv-block")

    def conv_layers(self):
        return [l for l in self.layers if l.kind in CONV_KINDS]

    def parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def cen_parameters(self):
        out = {}
        for layer in self.sp_layers():
            out.update(layer.module.cen_parameters())
        return out

    def num_params(self):
        return int(sum(p.size for p in self.parameters().values()))

    def all_committed(self):
        return all(l.module.is_committed for l in self.sp_layers())

    def refresh_channels(self):
        """Recompute c_in/c_out of every node from the kernels (after pruning)."""
        for layer in self.layers:
            if layer.kind == "input":
                continue
            if layer.kind in CONV_KINDS:
                ks = layer.kernels
                layer.c_out = ks[0].c_out
                layer.c_in = ks[0].c_in
            else:
                src = [self.layers[i].c_out for i in layer.inputs]
                if len(set(src)) != 1:
                    raise ContractError(f"layer {layer.id} ({layer.kind}) operands disagree: {src}")
                layer.c_in = layer.c_out = src[0]
        for layer in self.layers:
            if layer.kind not in CONV_KINDS:
                continue
            expected = sum(self.layers[i].c_out for i in layer.inputs)
            if layer.kind == "remap":
                expected = len(layer.inputs)
            if expected != layer.c_in:
                raise ContractError(
                    f"layer {layer.id}: consumes {expected} channels but kernel expects {layer.c_in}"
                )

    # -- evaluation -------------------------------------------------------------
    def forward(self, images, train_cen=True):
        """Run every stack; returns one :class:`HeatmapTriple` per stack.

        ``train_cen=False`` evaluates the CEN without recording gradients, so
        the mixing weights act as constants (warm-up and evaluation).
        """
        if not isinstance(images, T.Tensor):
            images = T.Tensor(np.asarray(images))
        if images.ndim != 4 or images.shape[1] != 1:
            raise ConfigError(f"expected images of shape [B,1,H,W], got {images.shape}")
        div = 2 ** self.depth
        H, W = images.shape[2:]
        if H % div or W % div:
            raise ConfigError(f"input {H}x{W} not divisible by 2^depth = {div}")
        vals = {}
        probs = {}
        for layer in self.layers:
            k = layer.kind
            if k == "input":
                out = images
            elif k == "stem":
                out = T.relu(layer.kernel(vals[layer.inputs[0]]))
            elif k == "conv-block":
                out = T.relu(layer.module.forward(vals[layer.inputs[0]], train_cen=train_cen))
            elif k == "pool":
                out = T.maxpool2x2(vals[layer.inputs[0]])
            elif k == "upsample":
                out = T.upsample_nearest2x(vals[layer.inputs[0]])
            elif k in ("skip-add", "merge"):
                out = vals[layer.inputs[0]] + vals[layer.inputs[1]]
            elif k == "head":
                out = layer.kernel(vals[layer.inputs[0]])
                probs[layer.id] = T.sigmoid(out)
            elif k == "remap":
                out = layer.kernel(T.concat([probs[i] for i in layer.inputs], axis=1))
            else:
                raise ContractError(f"unknown layer kind {k!r}")
            vals[layer.id] = out
        outputs = [HeatmapTriple(*(probs[i] for i in ids)) for ids in self.head_ids]
        self.last_outputs = outputs
        return outputs

    __call__ = forward

    def intermediate_heads(self, stack_index):
        if not 0 <= stack_index < self.stacks:
            raise IndexError(f"stack index {stack_index} out of range for {self.stacks} stacks")
        if self.last_outputs is None:
            raise ContractError("no forward pass has been run yet")
        return self.last_outputs[stack_index]

    def last_alphas(self):
        return [l.module.last_alpha for l in self.sp_layers()
                if not l.module.is_committed and l.module.last_alpha is not None]


def build_network(config=None, rng=None, dtype=np.float32, **overrides):
    """Construct the hourglass graph described by ``config``."""
    cfg = config or NetworkConfig()
    if overrides:
        cfg = NetworkConfig(**{**cfg.__dict__, **overrides})
    if cfg.depth < 1:
        raise ConfigError("depth must be >= 1")
    if cfg.stacks not in (1, 2):
        raise ConfigError("stack count must be 1 or 2")
    if cfg.base_channels < 1:
        raise ConfigError("base_channels must be positive")
    div = 2 ** cfg.depth
    if cfg.input_size % div:
        raise ConfigError(f"input size {cfg.input_size} not divisible by 2^{cfg.depth}")
    if cfg.input_size // div < 4:
        raise ConfigError(f"deepest feature {cfg.input_size // div} is smaller than 4x4")
    rng = rng if rng is not None else np.random.default_rng(0)
    C = cfg.base_channels
    net = NetworkGraph(config=cfg)

    def add(kind, inputs, c_in, c_out, size, **kw):
        layer = LayerSpec(len(net.layers), kind, tuple(inputs), c_in, c_out, size, **kw)
        net.layers.append(layer)
        return layer.id

    def block(x, size, stack):
        lid = len(net.layers)
        specs = candidate_specs(cfg.dilations, size, cfg.large_feature_size)
        mod = SelectModule.build(C, C, specs, rng, hidden=cfg.cen_hidden, dtype=dtype, name=f"L{lid}")
        return add("conv-block", [x], C, C, size, stack=stack, module=mod)

    def hourglass(level, x, size, stack):
        up1 = block(x, size, stack)
        pooled = add("pool", [x], C, C, size // 2, stack=stack)
        low1 = block(pooled, size // 2, stack)
        if level > 1:
            low2 = hourglass(level - 1, low1, size // 2, stack)
        else:
            low2 = block(low1, size // 2, stack)
        low3 = block(low2, size // 2, stack)
        up2 = add("upsample", [low3], C, C, size, stack=stack)
        merged = add("skip-add", [up1, up2], C, C, size, stack=stack)
        net.skip_edges.append((up1, merged))
        return merged

    S = cfg.input_size
    x = add("input", [], 0, 1, S)
    stem_id = len(net.layers)
    x = add("stem", [x], 1, C, S, kernel=he_kernel(rng, 1, C, 3, 1, dtype, name=f"L{stem_id}"))
    for s in range(cfg.stacks):
        feat = hourglass(cfg.depth, x, S, s)
        ids = []
        for h in HEAD_NAMES:
            lid = len(net.layers)
            kern = he_kernel(rng, C, 1, 1, 1, dtype, name=f"L{lid}")
            kern.bias.data[:] = cfg.head_bias
            ids.append(add("head", [feat], C, 1, S, stack=s, kernel=kern, head=h))
        net.head_ids.append(tuple(ids))
        if s < cfg.stacks - 1:
            lid = len(net.layers)
            kern = he_kernel(rng, 3, C, 1, 1, dtype, name=f"L{lid}")
            remap = add("remap", ids, 3, C, S, stack=s, kernel=kern)
            x = add("merge", [feat, remap], C, C, S, stack=s)
    return net


def zero_weights(net):
    """Set every weight to zero, keep biases (test helper and ablations)."""
    for name, p in net.parameters().items():
        if name.endswith(".w") or ".cen.w" in name:
            p.data[...] = 0


def summarize(net):
    rows = []
    for l in net.layers:
        dil = l.dilation if l.dilation is not None else "-"
        ks = ",".join(k.label for k in l.kernels) or "-"
        rows.append(f"{l.id:>3} {l.kind:<10} in={l.inputs!s:<10} {l.c_in:>3}->{l.c_out:<3} "
                    f"size={l.size:<4} kernels={ks} dilation={dil}")
    return "\n".join(rows)
