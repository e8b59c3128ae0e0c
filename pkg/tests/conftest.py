import numpy as np
import pytest

from sphg import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64(rng):
    """Factory for float64 tensors with gradients enabled."""
    def make(*shape, scale=1.0):
        return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
    return make


def naive_conv2d(x, w, b, dilation):
    """Six-loop 'same' convolution used as an independent oracle."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((B, O, H, W))
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, c, u, v] * xp[n, c, i + u * dilation, j + v * dilation]
                    out[n, o, i, j] = acc
    return out


TINY = {
    "network.input_size": 32, "network.depth": 2, "network.base_channels": 4,
    "scene.width_min": 9.0, "scene.width_max": 12.0, "scene.max_slots": 1,
    "slot.d_min": 6.0, "slot.d_max": 16.0, "slot.nms_radius": 3.0, "slot.corridor": 2.0,
    "data.corner_sigma": 1.0, "train.batch_size": 8,
    "schedule.warmup_epochs": 1, "schedule.cen_epochs": 1, "select.epochs_per_layer": 1,
    "schedule.prune_epochs": 5, "schedule.finetune_epochs": 1, "prune.global_count": 6,
    "schedule.tiers": (1.0, 0.6), "schedule.deploy_tier": 0.6, "prune.min_ratio": 0.3,
}


def tiny_config(**extra):
    from sphg.config import Config

    values = dict(TINY)
    values.update({k.replace("__", "."): v for k, v in extra.items()})
    return Config(values)


@pytest.fixture(scope="session")
def tiny_data():
    from sphg.synth import Dataset, make_scenes

    cfg = tiny_config()
    scenes = make_scenes(24, seed=9, params=cfg.scene_params())
    kw = dict(corner_sigma=cfg["data.corner_sigma"])
    return Dataset.from_scenes(scenes[:16], **kw), Dataset.from_scenes(scenes[16:], **kw)


# -- acceptance reporting ------------------------------------------------------------
ACCEPTANCE_RESULTS = {}


def record_criterion(number, title, passed, detail):
    """Remember one acceptance outcome; printed as a single line at session end."""
    ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {title} ({detail})")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{n:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
