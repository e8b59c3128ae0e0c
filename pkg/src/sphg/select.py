"""Kernel selection: parallel candidate convolutions mixed by a small CEN.

A :class:`SelectModule` holds K candidate kernels with different receptive
fields. While uncommitted its output is the alpha-weighted sum of the
candidate outputs, where alpha is a softmax produced by the contribution
evaluation network (CEN) from per-candidate weight statistics. Once
committed only the winning kernel survives and the module is a plain
convolution.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class ConvKernel:
    weight: Tensor
    bias: Tensor
    dilation: int = 1
    stride: int = 1

    @property
    def k(self):
        return self.weight.shape[-1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def receptive_field(self):
        return T.receptive_field(self.k, self.dilation)

    @property
    def padding(self):
        return T.same_padding(self.k, self.dilation)

    @property
    def label(self):
        return f"k{self.k}d{self.dilation}"

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.dilation, self.stride)

    def num_params(self):
        return self.weight.size + self.bias.size


def he_kernel(rng, c_in, c_out, k, dilation=1, dtype=np.float32, name=""):
    std = np.sqrt(2.0 / (c_in * k * k))
    w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return ConvKernel(T.parameter(w, name + ".w"), T.parameter(b, name + ".b"), dilation)


def candidate_specs(dilations, feature_size, large_feature_size=28):
    """(kernel size, dilation) per candidate for a layer at ``feature_size``.

    Small feature maps use 3x3 kernels with the given dilations. Feature maps
    of at least ``large_feature_size`` use undilated kernels with the same
    receptive field instead (a dilation-2 3x3 becomes a standard 5x5).
    """
    if not dilations:
        raise ConfigError("at least one candidate dilation is required")
    if feature_size >= large_feature_size:
        return [(2 * d + 1, 1) for d in dilations]
    return [(3, d) for d in dilations]


class SelectModule:
    """Select half of the SP block (also holds ``SelectState``)."""

    def __init__(self, candidates, hidden=16, rng=None, dtype=np.float32, name="sel"):
        if not candidates:
            raise ConfigError("SelectModule needs at least one candidate")
        shapes = {(c.c_out, c.c_in) for c in candidates}
        if len(shapes) != 1:
            raise ConfigError(f"candidates disagree on channel counts: {shapes}")
        self.name = name
        self.candidates = list(candidates)
        self.hidden = hidden
        self.committed = None
        self.last_alpha = None
        K = len(self.candidates)
        self.alpha_sum = np.zeros(K)
        self.alpha_count = 0
        self.cen = None
        if K > 1:
            rng = rng if rng is not None else np.random.default_rng(0)
            w1 = (rng.standard_normal((hidden, 2 * K)) * np.sqrt(2.0 / (2 * K))).astype(dtype)
            self.cen = {
                "w1": T.parameter(w1, name + ".cen.w1"),
                "b1": T.parameter(np.zeros(hidden, dtype), name + ".cen.b1"),
                "w2": T.parameter(np.zeros((K, hidden), dtype), name + ".cen.w2"),
                "b2": T.parameter(np.zeros(K, dtype), name + ".cen.b2"),
            }
        else:
            self.committed = 0

    @classmethod
    def build(cls, c_in, c_out, specs, rng, hidden=16, dtype=np.float32, name="sel"):
        cands = [
            he_kernel(rng, c_in, c_out, k, d, dtype, name=f"{name}.c{i}")
            for i, (k, d) in enumerate(specs)
        ]
        return cls(cands, hidden=hidden, rng=rng, dtype=dtype, name=name)

    # -- state ----------------------------------------------------------------
    @property
    def is_committed(self):
        return self.committed is not None

    @property
    def kernel(self):
        if not self.is_committed:
            raise ContractError(f"{self.name}: no kernel committed yet")
        return self.candidates[0]

    @property
    def c_in(self):
        return self.candidates[0].c_in

    @property
    def c_out(self):
        return self.candidates[0].c_out

    def parameters(self):
        out = {}
        for c in self.candidates:
            out[c.weight.name] = c.weight
            out[c.bias.name] = c.bias
        if self.cen is not None:
            for p in self.cen.values():
                out[p.name] = p
        return out

    def cen_parameters(self):
        return {} if self.cen is None else {p.name: p for p in self.cen.values()}

    # -- CEN ------------------------------------------------------------------
    def weight_stats(self):
        parts = []
        for c in self.candidates:
            w = T.reshape(c.weight, (-1,))
            mu = T.mean(w)
            centered = w - mu
            std = T.sqrt(T.mean(centered * centered) + 1e-12)
            parts += [T.reshape(mu, (1,)), T.reshape(std, (1,))]
        return T.concat(parts, axis=0)

    def cen_forward(self, detach=False):
        """alpha = softmax(FC(ReLU(FC(stats)))) over the candidates."""
        if self.is_committed:
            raise ContractError(f"{self.name}: CEN is discarded after commit")
        if detach:
            with T.no_grad():
                return self._cen(self.weight_stats())
        return self._cen(self.weight_stats())

    def _cen(self, stats):
        c = self.cen
        h = T.relu(T.dense(T.reshape(stats, (1, -1)), c["w1"], c["b1"]))
        logits = T.dense(h, c["w2"], c["b2"])
        return T.reshape(T.softmax_lastdim(logits), (-1,))

    # -- forward --------------------------------------------------------------
    def forward(self, x, train_cen=True):
        if self.is_committed:
            return self.candidates[0](x)
        alpha = self.cen_forward(detach=not train_cen)
        self.last_alpha = alpha
        out = None
        for i, cand in enumerate(self.candidates):
            term = cand(x) * T.index(alpha, i)
            out = term if out is None else out + term
        return out

    __call__ = forward

    # -- selection bookkeeping ------------------------------------------------
    def reset_history(self):
        self.alpha_sum = np.zeros(len(self.candidates))
        self.alpha_count = 0

    def record_alpha(self, alpha=None):
        alpha = self.last_alpha if alpha is None else alpha
        if alpha is None:
            return
        a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
        self.alpha_sum = self.alpha_sum + a.astype(np.float64)
        self.alpha_count += 1

    def alpha_means(self):
        if self.alpha_count == 0:
            return None
        return self.alpha_sum / self.alpha_count

    def commit(self):
        """Keep only the candidate with the largest mean alpha; drop the CEN."""
        if self.is_committed:
            return self.committed
        means = self.alpha_means()
        if means is None:
            raise ContractError(f"{self.name}: cannot commit with an empty alpha history")
        winner = int(np.argmax(means))
        self.commit_to(winner)
        return winner

    def commit_to(self, winner):
        self.candidates = [self.candidates[winner]]
        self.committed = winner
        self.cen = None
        self.last_alpha = None


def commit_selection(state):
    """Functional alias used by the pipeline; returns the winning index."""
    return state.commit()


def select_forward(state, x):
    return state.forward(x)


def cen_regularizer(alphas):
    """Sum over layers of -log(sum_i alpha_i^2); zero iff every alpha is one-hot."""
    total = None
    for a in alphas:
        term = -T.log(T.tsum(a * a))
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total


def selection_report(rows):
    """Render (layer_id, labels, alpha_means, winner_label) rows as a text table."""
    lines = [f"{'layer':>5}  {'candidates':<16}  {'alpha means':<24}  winner"]
    for layer_id, labels, means, winner in rows:
        m = " ".join(f"{x:.4f}" for x in means) if means is not None else "-"
        lines.append(f"{layer_id:>5}  {','.join(labels):<16}  {m:<24}  {winner}")
    return "\n".join(lines) + "\n"
