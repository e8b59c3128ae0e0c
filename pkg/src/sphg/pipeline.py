"""Staged training driver: warm-up, CEN pre-training, per-layer selection,
pruning with tier snapshots, and per-tier fine-tuning.

The schedule is flattened into a list of epoch tasks. The run directory
holds ``latest.ckpt`` (network, optimizer, RNG and the index of the next
task), so an interrupted run resumes exactly where it stopped.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointState, deserialize_checkpoint, load_checkpoint, serialize_checkpoint
from .errors import ContractError, MissingInputError, NumericError, SPHGError
from .losses import STAGE_TERMS, total_loss
from .metrics import (detection_accuracy, localization_error, match_points,
                      miss_rate_at_fppi, miss_rate_fppi_curve, precision_recall)
from .network import build_network
from .optim import Adam
from .prune import prune_step
from .select import selection_report
from .slots import find_peaks, infer_slots, slot_matches
from .synth import Dataset, read_split

log = logging.getLogger(__name__)

STAGE_ORDER = ("warmup", "cen", "select", "prune", "finetune")
PHASES = {"train": ("warmup", "cen"), "select": ("select",), "prune": ("prune",), "finetune": ("finetune",)}
CURVE_LEVELS = (0.9, 0.8, 0.7, 0.5, 0.3)

METRIC_COLUMNS = ("task", "stage", "epoch", "layer", "tier", "params", "ratio", "loss",
                  "corners", "entry", "separating", "cen", "l1",
                  "precision", "recall", "accuracy", "err_px", "err_px_std")


@dataclass
class StageSchedule:
    warmup: int = 5
    cen: int = 10
    select_per_layer: int = 2
    prune: int = 30
    finetune: int = 15
    tiers: tuple = (1.0, 0.6, 0.4, 0.25)
    min_ratio: float = 0.2

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["schedule.warmup_epochs"], cfg["schedule.cen_epochs"],
                   cfg["select.epochs_per_layer"], cfg["schedule.prune_epochs"],
                   cfg["schedule.finetune_epochs"], tuple(sorted(cfg["schedule.tiers"], reverse=True)),
                   cfg["prune.min_ratio"])

    def tasks(self, sp_layer_ids):
        """Flattened epoch tasks; each is a dict with stage, epoch and extras."""
        out = [dict(stage="warmup", epoch=e) for e in range(self.warmup)]
        out += [dict(stage="cen", epoch=e) for e in range(self.cen)]
        for lid in sp_layer_ids:
            out += [dict(stage="select", epoch=e, layer=lid, last=e == self.select_per_layer - 1)
                    for e in range(self.select_per_layer)]
        out += [dict(stage="prune", epoch=e) for e in range(self.prune)]
        for tier in self.tiers:
            out += [dict(stage="finetune", epoch=e, tier=tier) for e in range(self.finetune)]
        return out


# -- evaluation ---------------------------------------------------------------------
def predict_heatmaps(net, images, batch_size=16):
    """Final-stack heatmaps as float64 [N, 3, H, W] (corners, entry, separating)."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            tr = net.forward(T.Tensor(np.asarray(images[s:s + batch_size], dtype=np.float32)),
                             train_cen=False)[-1]
            out.append(np.concatenate([t.data for t in tr.as_tuple()], axis=1).astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, 3, 0, 0))


def evaluate_heatmaps(heatmaps, gts, cfg, curve=False, slots=False):
    """Corner (and optionally slot) metrics for predicted heatmaps against ground truth."""
    scfg = cfg.slot_config()
    delta, cm = cfg["eval.delta_px"], cfg["eval.cm_per_px"]
    low = 0.02 if curve else scfg.peak_threshold
    total = match_points(np.zeros((0, 2)), np.zeros((0, 2)), delta, cm)
    dets, gt_pts = [], []
    slot_tp = slot_fp = slot_fn = 0
    for hm, gt in zip(heatmaps, gts):
        peaks = find_peaks(hm[0], low, scfg.nms_radius)
        scored = np.array([(p.x, p.y, p.score) for p in peaks]).reshape(-1, 3)
        dets.append(scored)
        gt_pts.append(gt.corners)
        kept = scored[scored[:, 2] >= scfg.peak_threshold, :2]
        total = total + match_points(gt.corners, kept, delta, cm)
        if slots:
            _, found = infer_slots(hm[0], hm[1], hm[2], scfg)
            tp, fp, fn = match_slots(gt.slots, found, delta)
            slot_tp, slot_fp, slot_fn = slot_tp + tp, slot_fp + fp, slot_fn + fn
    p, r = precision_recall(total)
    err = localization_error(total, unit="px")
    res = {
        "precision": p, "recall": r, "accuracy": detection_accuracy(total),
        "tp": total.tp, "fp": total.fp, "fn": total.fn,
        "err_px": err[0] if err else float("nan"), "err_px_std": err[1] if err else float("nan"),
        "err_cm": err[0] * cm if err else float("nan"), "err_cm_std": err[1] * cm if err else float("nan"),
    }
    if curve:
        c = miss_rate_fppi_curve(gt_pts, dets, delta)
        res["curve"] = c
        res["miss_rate_at_fppi"] = miss_rate_at_fppi(c, cfg["eval.fppi"])
    if slots:
        sp = slot_tp / (slot_tp + slot_fp) if slot_tp + slot_fp else (1.0 if slot_fn == 0 else 0.0)
        sr = slot_tp / (slot_tp + slot_fn) if slot_tp + slot_fn else 1.0
        res.update(slot_tp=slot_tp, slot_fp=slot_fp, slot_fn=slot_fn, slot_precision=sp, slot_recall=sr)
    return res


def match_slots(gt_slots, found, delta_px=1.5):
    """Greedy one-to-one slot matching; returns (tp, fp, fn)."""
    used = set()
    tp = 0
    for g in gt_slots:
        gt = (g.p1, g.p2, g.direction)
        for j, det in enumerate(found):
            if j not in used and slot_matches(gt, det, delta_px):
                used.add(j)
                tp += 1
                break
    return tp, len(found) - tp, len(gt_slots) - tp


def evaluate(net, dataset, cfg, curve=False, slots=False):
    return evaluate_heatmaps(predict_heatmaps(net, dataset.images), dataset.gts, cfg, curve, slots)


def load_datasets(cfg, root=None):
    root = Path(root or cfg["data.dir"])
    train_idx, val_idx = read_split(root)
    kw = dict(corner_sigma=cfg["data.corner_sigma"], line_sigma=cfg["data.line_sigma"])
    return Dataset.from_dir(root, train_idx, **kw), Dataset.from_dir(root, val_idx, **kw)


# -- training -----------------------------------------------------------------------
def check_gating(net, stage):
    """CEN parameters must receive exactly zero gradient while their term is off."""
    use_cen, _ = STAGE_TERMS[stage]
    if not use_cen:
        for name, p in net.cen_parameters().items():
            if p.grad is not None and np.any(p.grad != 0):
                raise ContractError(f"{stage}: CEN parameter {name} received a gradient")


def train_epoch(net, opt, data, stage, weights, rng, batch_size, record_layer=None):
    """One pass over ``data`` in a shuffled order; returns mean loss parts."""
    order = rng.permutation(len(data))
    sums = {}
    n = 0
    for s in range(0, len(order), batch_size):
        imgs, tg = data.batch(order[s:s + batch_size])
        outs = net.forward(T.Tensor(imgs), train_cen=stage != "warmup")
        loss, parts = total_loss(outs, tg, net, stage, weights)
        if not np.isfinite(parts["total"]):
            raise NumericError(f"non-finite loss {parts['total']}")
        params = net.parameters()
        opt.zero_grad(params)
        loss.backward()
        check_gating(net, stage)
        opt.step(params)
        if record_layer is not None:
            record_layer.module.record_alpha()
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v
        n += 1
    return {k: v / max(n, 1) for k, v in sums.items()}


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "-" if v is None else str(v)


def _with_context(exc, stage, epoch):
    msg = f"stage {stage} epoch {epoch}: {exc}"
    try:
        new = type(exc)(msg)
    except TypeError:
        exc.args = (msg,) + tuple(exc.args[1:])
        return exc
    return new


class PipelineRun:
    """State of one run directory; see :func:`run_pipeline`."""

    def __init__(self, cfg, out_dir, train, val):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.train, self.val = train, val
        self.schedule = StageSchedule.from_config(cfg)
        self.weights = cfg.loss_weights()
        self.batch_size = cfg["train.batch_size"]
        ckpt = self.out / "latest.ckpt"
        if ckpt.exists():
            st = load_checkpoint(ckpt)
            self.net, self.opt, meta = st.net, st.optimizer, st.meta
            if meta.get("config") != cfg.dump():
                raise ContractError(f"{ckpt} was written with a different configuration")
            self.cursor = meta["cursor"]
            self.rng = np.random.default_rng()
            self.rng.bit_generator.state = meta["rng"]
            self.state = meta["state"]
        else:
            self.net = build_network(cfg.network(), rng=np.random.default_rng([cfg["seed"], 7]))
            self.opt = Adam(cfg["optim.lr"], cfg["optim.beta1"], cfg["optim.beta2"], cfg["optim.eps"])
            self.cursor = 0
            self.rng = np.random.default_rng([cfg["seed"], 11])
            self.state = {"baseline_params": None, "levels_done": [], "tiers": {}, "best": None,
                          "selection": [], "stage_log": []}
            for name in ("metrics.tsv", "prune_log.txt", "selection.txt", "stages.log"):
                (self.out / name).unlink(missing_ok=True)
            self._append("metrics.tsv", "\t".join(METRIC_COLUMNS))
        if "sp_ids" not in self.state:
            self.state["sp_ids"] = [l.id for l in self.net.sp_layers() if not l.module.is_committed]
        self.tasks = self.schedule.tasks(self.state["sp_ids"])

    # -- bookkeeping ------------------------------------------------------------
    def _append(self, name, line):
        with open(self.out / name, "a") as f:
            f.write(line + "\n")

    def _save(self, path, net=None, opt=None, meta=None):
        net = net or self.net
        meta = dict(meta or {})
        base = self.state["baseline_params"]
        meta.setdefault("baseline_params", base)
        meta.setdefault("ratio", net.num_params() / base if base else 1.0)
        st = CheckpointState(net, opt if opt is not None else self.opt, meta)
        data = serialize_checkpoint(st)
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return data

    def _checkpoint(self):
        meta = {"config": self.cfg.dump(), "cursor": self.cursor, "rng": self.rng.bit_generator.state,
                "state": self.state}
        self._save(self.out / "latest.ckpt", meta=meta)
        if self.cfg["checkpoint.keep_all"]:
            self._save(self.out / f"task_{self.cursor:04d}.ckpt", meta=meta)

    def _log_stage(self, text):
        self.state["stage_log"].append(text)
        self._append("stages.log", text)
        log.info(text)

    def _ratio(self):
        base = self.state["baseline_params"]
        return self.net.num_params() / base if base else 1.0

    # -- run ----------------------------------------------------------------------
    def run(self, until=None, max_tasks=None):
        """Execute pending tasks, stopping after stage ``until`` or ``max_tasks`` tasks."""
        last = STAGE_ORDER.index(until) if until else len(STAGE_ORDER) - 1
        done = 0
        while self.cursor < len(self.tasks):
            task = self.tasks[self.cursor]
            if STAGE_ORDER.index(task["stage"]) > last or (max_tasks is not None and done >= max_tasks):
                break
            try:
                self._run_task(task)
            except SPHGError as exc:
                raise _with_context(exc, task["stage"], task["epoch"]) from exc
            self.cursor += 1
            done += 1
            self._checkpoint()
        if self.cursor >= len(self.tasks):
            self._finish()
        return self.cursor >= len(self.tasks)

    def _run_task(self, task):
        stage, epoch = task["stage"], task["epoch"]
        prev = self.tasks[self.cursor - 1]["stage"] if self.cursor else None
        if stage != prev:
            self._log_stage(f"enter {stage} at task {self.cursor}")
            if stage == "prune" or (stage == "finetune" and prev != "prune" and
                                    self.state["baseline_params"] is None):
                self._enter_prune()
        record = None
        if stage == "select":
            layer = self.net.layers[task["layer"]]
            if layer.module.is_committed:
                return
            if epoch == 0:
                layer.module.reset_history()
            record = layer
        if stage == "prune" and self._ratio() <= self.schedule.min_ratio + 1e-12:
            return
        if stage == "finetune":
            if not self._enter_finetune(task):
                return

        t0 = time.perf_counter()
        parts = train_epoch(self.net, self.opt, self.train, stage, self.weights, self.rng,
                            self.batch_size, record_layer=record)
        if record is not None and task.get("last"):
            means = record.module.alpha_means()
            labels = [k.label for k in record.module.candidates]
            winner = record.module.commit()
            self.opt.prune_missing(self.net.parameters())
            row = [record.id, labels, means.tolist(), labels[winner]]
            self.state["selection"].append(row)
            self._append("selection.txt", f"layer={record.id} candidates={','.join(labels)} "
                         f"alpha_means={' '.join(f'{m:.6f}' for m in means)} winner={labels[winner]}")
            if self.net.all_committed():
                self._log_stage(f"all {len(self.state['sp_ids'])} SP layers committed")
        if stage == "prune":
            self._prune_after_epoch(epoch)
        metrics = evaluate(self.net, self.val, self.cfg)
        self._log_metrics(task, parts, metrics)
        if stage == "finetune":
            self._keep_best(task, metrics)
        log.info("task %d %s epoch %d loss %.4f P %.3f R %.3f (%.1fs)", self.cursor, stage, epoch,
                 parts.get("total", float("nan")), metrics["precision"], metrics["recall"],
                 time.perf_counter() - t0)

    def _log_metrics(self, task, parts, m):
        row = dict(task=self.cursor, stage=task["stage"], epoch=task["epoch"], layer=task.get("layer"),
                   tier=task.get("tier"), params=self.net.num_params(), ratio=self._ratio(),
                   loss=parts.get("total"), **{k: parts.get(k) for k in ("corners", "entry", "separating",
                                                                          "cen", "l1")},
                   **{k: m[k] for k in ("precision", "recall", "accuracy", "err_px", "err_px_std")})
        self._append("metrics.tsv", "\t".join(_fmt(row[c]) for c in METRIC_COLUMNS))

    # -- pruning --------------------------------------------------------------------
    def _levels(self):
        lv = set(self.schedule.tiers) | set(CURVE_LEVELS) | {self.schedule.min_ratio}
        return sorted((x for x in lv if x < 1.0 and x >= self.schedule.min_ratio), reverse=True)

    def _enter_prune(self):
        if not self.net.all_committed():
            raise ContractError("pruning needs every SP layer committed")
        if self.state["baseline_params"] is None:
            self.state["baseline_params"] = self.net.num_params()
            self._snapshot(1.0)
            m = evaluate(self.net, self.val, self.cfg)
            self._append("prune_curve.tsv", "ratio\tremoved\tparams\taccuracy\tprecision\trecall")
            self._curve_row(m)

    def _curve_row(self, m):
        r = self._ratio()
        self._append("prune_curve.tsv", f"{r:.6f}\t{1 - r:.6f}\t{self.net.num_params()}\t"
                     f"{m['accuracy']:.6f}\t{m['precision']:.6f}\t{m['recall']:.6f}")

    def _snapshot(self, tier):
        path = self.out / f"tier_{tier:.2f}.ckpt"
        self._save(path, opt=self.opt, meta={"tier": tier, "ratio": self._ratio()})
        self.state["tiers"][f"{tier:.2f}"] = {"path": path.name, "params": self.net.num_params(),
                                              "ratio": self._ratio()}
        self._log_stage(f"tier {tier:.2f} snapshot at {self.net.num_params()} params "
                        f"(ratio {self._ratio():.4f})")

    def _prune_after_epoch(self, epoch):
        base = self.state["baseline_params"]
        pending = [lv for lv in self._levels() if lv not in self.state["levels_done"]]
        if not pending:
            return
        target = pending[0]
        rep = prune_step(self.net, layer_threshold=self.cfg["prune.layer_threshold"],
                         global_count=self.cfg["prune.global_count"], optimizer=self.opt,
                         stop_below=int(np.floor(target * base)))
        self._append("prune_log.txt", f"epoch={epoch} ratio={self._ratio():.6f} " + rep.lines())
        reached = [lv for lv in pending if self._ratio() <= lv + 1e-12]
        for lv in reached:
            self.state["levels_done"].append(lv)
            if lv in self.schedule.tiers:
                self._snapshot(lv)
        if reached:
            self._curve_row(evaluate(self.net, self.val, self.cfg))
        if not rep.removed:
            self._log_stage(f"prune epoch {epoch}: nothing removable")

    # -- fine-tuning ------------------------------------------------------------------
    def _enter_finetune(self, task):
        key = f"{task['tier']:.2f}"
        info = self.state["tiers"].get(key)
        if info is None:
            if task["epoch"] == 0:
                self._log_stage(f"tier {key} never reached; no fine-tune")
            return False
        if task["epoch"] == 0:
            st = load_checkpoint(self.out / info["path"])
            self.net, self.opt = st.net, st.optimizer
            self.state["best"] = None
            self._log_stage(f"fine-tune tier {key} from {info['params']} params")
        return True

    def _keep_best(self, task, m):
        key = (m["precision"], m["recall"])
        best = self.state["best"]
        if best is None or key > tuple(best["key"]):
            tier = f"{task['tier']:.2f}"
            self.state["best"] = {"key": list(key), "epoch": task["epoch"], "tier": tier}
            self._save(self.out / f"best_tier_{tier}.ckpt", meta={"tier": task["tier"], "epoch": task["epoch"],
                                                                   "precision": m["precision"],
                                                                   "recall": m["recall"]})
            self.state["tiers"][tier]["best"] = dict(self.state["best"], precision=m["precision"],
                                                     recall=m["recall"])

    def _finish(self):
        if self.state["baseline_params"] is None and self.net.all_committed():
            self._enter_prune()
        deploy = f"{self.cfg['schedule.deploy_tier']:.2f}"
        cands = [deploy] + sorted(self.state["tiers"], reverse=True)
        src = None
        for key in cands:
            for name in (f"best_tier_{key}.ckpt", f"tier_{key}.ckpt"):
                if (self.out / name).exists():
                    src = self.out / name
                    break
            if src:
                break
        if src is None:
            src = self.out / "latest.ckpt"
        data = src.read_bytes()
        (self.out / "final.ckpt").write_bytes(data)
        if self.state["selection"]:
            rows = [(r[0], r[1], r[2], r[3]) for r in self.state["selection"]]
            (self.out / "selection_report.txt").write_text(selection_report(rows))
        summary = {"final_source": src.name, "tiers": self.state["tiers"],
                   "baseline_params": self.state["baseline_params"], "tasks": len(self.tasks)}
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg, out_dir, train=None, val=None, until=None, max_tasks=None, single_threaded=True):
    """Run (or resume) the full schedule in ``out_dir``.

    Returns the :class:`PipelineRun`; ``until`` stops after a stage and
    ``max_tasks`` after a number of epoch tasks (used to test resuming).
    """
    if train is None or val is None:
        root = Path(cfg["data.dir"])
        if not (root / "split.txt").exists():
            raise MissingInputError(f"no dataset at {root}; run gen-data first")
        train, val = load_datasets(cfg, root)
    ctx = T.single_threaded() if single_threaded else _nullctx()
    with ctx:
        run = PipelineRun(cfg, out_dir, train, val)
        run.run(until=until, max_tasks=max_tasks)
    return run


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def read_metrics(path):
    """Parse metrics.tsv into a list of dicts (strings kept as written)."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, l.split("\t"))) for l in lines[1:]]


def load_network(path):
    return load_checkpoint(path).net


def roundtrip_bytes(data):
    return serialize_checkpoint(deserialize_checkpoint(data))
