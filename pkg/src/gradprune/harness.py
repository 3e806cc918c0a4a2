"""Experiment driver: train -> score -> partition -> prune, epoch by epoch.

Two modes share one loop:

  PGP  - after the training epoch, the same batches are swept once more
         without parameter updates and the criterion is accumulated from
         those gradients (batch-gradient flavour; two passes per epoch).
  RPGP - the criterion is accumulated from the live training gradients
         during the single training epoch.

Each epoch: train (and sweep), evaluate, prune, audit, evaluate again. The
test error is therefore logged both before and after the epoch's pruning
event. Structural state (weights, gradients, momentum, batchnorm, consumer
input channels) moves in lockstep, and the shape and soft-zero audits run
after every pruning event.

Report files are bit-reproducible given the config and seeds; wall-clock
timings go to a separate sidecar file excluded from that contract.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ConfigError, RunConfig
from .layers import EVAL, SWEEP, TRAIN, softmax_cross_entropy
from .models import MODEL_BUILDERS, ModelGraph, propagate_prune
from .optim import SgdMomentum
from .pruning import (GRADIENT_CRITERIA, CriterionAccumulator, PruneSchedule,
                      audit_lockstep, audit_soft_zero, count_flops,
                      count_params, decay_ratio, score_filters,
                      select_partition, weak_count)

REPORT_SCHEMA_VERSION = 1


@dataclass
class EpochReport:
    epoch: int
    p_t: float
    train_loss: float
    error_pre: float
    error_post: float
    params: int
    flops: int
    layer_counts: dict  # conv name -> {"live": int, "soft": int, "hard": int}
    warnings: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_record(self):
        return {
            "epoch": self.epoch,
            "p_t": self.p_t,
            "train_loss": self.train_loss,
            "error_pre": self.error_pre,
            "error_post": self.error_post,
            "params": self.params,
            "flops": self.flops,
            "layer_counts": self.layer_counts,
            "warnings": list(self.warnings),
        }


@dataclass
class RunResult:
    graph: ModelGraph
    opt: SgdMomentum
    reports: list
    finetune_reports: list
    plans: list  # per epoch: list of PrunePlan records
    best_error: float
    config: RunConfig


def _np_dtype(name):
    return np.float64 if name == "float64" else np.float32


def build_model(cfg: RunConfig, rng) -> ModelGraph:
    m = cfg["model"]
    kwargs = dict(rng=rng, num_classes=m["num_classes"], in_channels=m["in_channels"],
                  image_size=m["image_size"], dtype=_np_dtype(cfg["run"]["dtype"]))
    if m["widths"]:
        kwargs["widths"] = tuple(m["widths"])
    if m["name"] == "small_resnet":
        kwargs["strategy"] = m["resnet_strategy"]
    return MODEL_BUILDERS[m["name"]](**kwargs)


def load_datasets(cfg: RunConfig):
    d = cfg["dataset"]
    dtype = _np_dtype(cfg["run"]["dtype"])
    kind = d["kind"]
    if kind == "mnist":
        train = data_mod.load_mnist_idx(d["train_images"], d["train_labels"], dtype=dtype)
        test = data_mod.load_mnist_idx(d["test_images"], d["test_labels"], dtype=dtype)
    elif kind == "cifar10":
        train = data_mod.load_cifar10_bin(d["train_files"], dtype=dtype)
        test = data_mod.load_cifar10_bin(d["test_files"], dtype=dtype)
    else:
        m = cfg["model"]
        train = data_mod.synth_dataset(d["synth_seed"], d["synth_n"],
                                       num_classes=m["num_classes"],
                                       image_size=m["image_size"],
                                       channels=m["in_channels"], dtype=dtype)
        test = data_mod.synth_dataset(d["synth_seed"] + 1, d["synth_test_n"],
                                      num_classes=m["num_classes"],
                                      image_size=m["image_size"],
                                      channels=m["in_channels"], dtype=dtype)
    if d["train_limit"]:
        train = train.subset(d["train_limit"])
    if d["test_limit"]:
        test = test.subset(d["test_limit"])
    if d["standardize"]:
        train = data_mod.standardize(train, d["mean"], d["std"])
        test = data_mod.standardize(test, d["mean"], d["std"])
    return train, test


def evaluate(graph: ModelGraph, ds, batch_size=256) -> float:
    """Classification error in percent, batchnorm in eval mode."""
    wrong = 0
    bs = min(batch_size, len(ds))
    for x, y in data_mod.batch_iter(ds, bs):
        logits = graph.forward(x, mode=EVAL)
        wrong += int((logits.argmax(axis=1) != y).sum())
    return 100.0 * wrong / len(ds)


def _epoch_pass(graph, opt, train_ds, cfg, epoch, update, acc, bn_mode):
    """One sweep over the training set in a fixed per-epoch order."""
    run = cfg["run"]
    d = cfg["dataset"]
    losses = []
    aug_rng = np.random.default_rng([run["shuffle_seed"], epoch, 77]) if d["augment"] else None
    for x, y in data_mod.batch_iter(train_ds, run["batch_size"],
                                    shuffle_seed=[run["shuffle_seed"], epoch],
                                    drop_last=True):
        if aug_rng is not None:
            x = data_mod.augment_flip_crop(x, aug_rng)
        graph.zero_grads()
        logits = graph.forward(x, mode=bn_mode)
        loss, grad = softmax_cross_entropy(logits, y)
        graph.backward(grad)
        if acc is not None:
            acc.observe()
        if update:
            opt.step(graph.param_arrays(), graph.grad_arrays())
        losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")


def _layer_counts(graph):
    counts = {}
    for name, layer in graph.conv_items():
        soft = int(layer.soft_idx.size)
        counts[name] = {
            "live": layer.n_out - soft,
            "soft": soft,
            "hard": layer.original_n_out - layer.n_out,
        }
    return counts


def _prune_epoch(graph, opt, acc, schedule, p_t, epoch, record_scores):
    """Score, partition and prune every prunable unit in graph order."""
    plans, warnings = [], []
    for _, layer in graph.conv_items():
        # rows zeroed in earlier epochs have been training since; only this
        # phase's soft set counts as currently zeroed
        layer.soft_idx = np.zeros(0, dtype=np.intp)
    for unit in graph.units:
        if not unit.prunable:
            continue
        original_n, current_n = graph.unit_counts(unit)
        n_wc = weak_count(original_n, p_t)
        already = original_n - current_n
        if n_wc - already <= 0:
            continue
        scores = np.zeros(current_n)
        for cname in unit.convs:
            scores += score_filters(graph.layers[cname], acc, schedule.criterion)
        plan = select_partition(scores, n_wc, already, schedule.remove_ratio,
                                unit=unit.name, epoch=epoch)
        if plan.clamped:
            warnings.append(f"unit '{unit.name}': selection clamped to keep one live filter")
        if plan.hard.size or plan.soft.size:
            propagate_prune(graph, unit.name, plan, opt=opt, acc=acc)
            if not record_scores:
                plan.scores = None
            plans.append(plan)
    return plans, warnings


def run(cfg: RunConfig) -> RunResult:
    """Execute a full scheduled run per the config; returns all reports."""
    sched = PruneSchedule(
        t_prune=cfg["schedule"]["t_prune"],
        total_epochs=cfg["schedule"]["epochs"],
        remove_ratio=cfg["schedule"]["remove_ratio"],
        criterion=cfg["schedule"]["criterion"],
        mode=cfg["schedule"]["mode"],
    )
    if sched.mode == "RPGP" and sched.criterion == "TAYLOR":
        # legal, but every conv output is retained for the criterion
        mem_note = "TAYLOR under RPGP stores per-batch activations on every conv"
    else:
        mem_note = None
    rng = np.random.default_rng(cfg["run"]["init_seed"])
    graph = build_model(cfg, rng)
    train_ds, test_ds = load_datasets(cfg)
    input_chw = train_ds.images.shape[1:]
    opt = SgdMomentum(cfg["optim"]["alpha"], cfg["optim"]["beta"],
                      cfg["optim"]["weight_decay"])
    for name, layer, p in graph.named_params():
        opt.register(name, getattr(layer, p))

    need_taylor = sched.criterion == "TAYLOR"
    eval_bs = cfg["run"]["eval_batch_size"]
    reports, all_plans = [], []
    prev_params = prev_flops = None
    for t in range(1, sched.total_epochs + 1):
        if t in cfg["optim"]["lr_decay_epochs"]:
            opt.alpha /= cfg["optim"]["lr_decay_factor"]
        t0 = time.perf_counter()
        warnings = [mem_note] if (mem_note and t == 1) else []
        p_t = decay_ratio(t, sched)
        # gradient statistics are only worth collecting on epochs where some
        # unit will actually select new weak filters
        selecting = False
        for u in graph.units:
            if u.prunable:
                orig, cur = graph.unit_counts(u)
                if weak_count(orig, p_t) > orig - cur:
                    selecting = True
                    break
        need_acc = selecting and sched.criterion in GRADIENT_CRITERIA
        if sched.mode == "RPGP":
            acc = CriterionAccumulator(graph.conv_items(), taylor=need_taylor) \
                if need_acc else None
            train_loss = _epoch_pass(graph, opt, train_ds, cfg, t, update=True,
                                     acc=acc, bn_mode=TRAIN)
        else:
            train_loss = _epoch_pass(graph, opt, train_ds, cfg, t, update=True,
                                     acc=None, bn_mode=TRAIN)
            acc = None
            if need_acc:
                acc = CriterionAccumulator(graph.conv_items(), taylor=need_taylor)
                _epoch_pass(graph, opt, train_ds, cfg, t, update=False,
                            acc=acc, bn_mode=SWEEP)
        error_pre = evaluate(graph, test_ds, eval_bs)
        plans, prune_warnings = _prune_epoch(graph, opt, acc, sched, p_t, t,
                                             cfg["run"]["record_scores"])
        if acc is not None:
            acc.release()
        warnings += prune_warnings
        graph.audit_wiring(input_chw)
        audit_lockstep(graph, opt)
        audit_soft_zero(graph, opt)
        error_post = evaluate(graph, test_ds, eval_bs)
        params = count_params(graph)
        flops = count_flops(graph, input_chw)
        if prev_params is not None and sched.remove_ratio > 0:
            if params > prev_params or flops > prev_flops:
                raise AssertionError(
                    f"complexity grew at epoch {t}: params {prev_params}->{params}, "
                    f"flops {prev_flops}->{flops}")
        prev_params, prev_flops = params, flops
        reports.append(EpochReport(
            epoch=t, p_t=p_t, train_loss=train_loss, error_pre=error_pre,
            error_post=error_post, params=params, flops=flops,
            layer_counts=_layer_counts(graph), warnings=warnings,
            wall_time=time.perf_counter() - t0))
        all_plans.append([p.to_record() for p in plans])

    ft_reports = []
    best = min((r.error_post for r in reports), default=100.0)
    if cfg["run"]["finetune_epochs"]:
        ft_reports, best_ft = finetune(graph, opt, train_ds, test_ds, cfg,
                                       epochs=cfg["run"]["finetune_epochs"],
                                       start_epoch=sched.total_epochs + 1)
        best = min(best, best_ft)
    return RunResult(graph, opt, reports, ft_reports, all_plans, best, cfg)


def run_pgp(cfg: RunConfig) -> RunResult:
    if cfg["schedule"]["mode"] != "PGP":
        raise ConfigError("run_pgp requires schedule mode PGP")
    return run(cfg)


def run_rpgp(cfg: RunConfig) -> RunResult:
    if cfg["schedule"]["mode"] != "RPGP":
        raise ConfigError("run_rpgp requires schedule mode RPGP")
    return run(cfg)


def finetune(graph, opt, train_ds, test_ds, cfg, epochs, start_epoch=1):
    """Plain training with the schedule finished; structure never changes."""
    input_chw = train_ds.images.shape[1:]
    params = count_params(graph)
    flops = count_flops(graph, input_chw)
    reports = []
    best = 100.0
    for i in range(epochs):
        t = start_epoch + i
        t0 = time.perf_counter()
        train_loss = _epoch_pass(graph, opt, train_ds, cfg, t, update=True,
                                 acc=None, bn_mode=TRAIN)
        err = evaluate(graph, test_ds, cfg["run"]["eval_batch_size"])
        best = min(best, err)
        reports.append(EpochReport(
            epoch=t, p_t=float("nan"), train_loss=train_loss, error_pre=err,
            error_post=err, params=params, flops=flops,
            layer_counts=_layer_counts(graph),
            wall_time=time.perf_counter() - t0))
    return reports, best


# -- run directory output -------------------------------------------------------

def write_run_outputs(result: RunResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ("epoch\tp_t\ttrain_loss\terror_pre\terror_post\tparams\tflops\t"
              "live_per_layer\twarnings")
    lines = [header]
    for r in result.reports + result.finetune_reports:
        live = ",".join(f"{n}:{c['live']}" for n, c in r.layer_counts.items())
        lines.append("\t".join([
            str(r.epoch), repr(r.p_t), repr(r.train_loss), repr(r.error_pre),
            repr(r.error_post), str(r.params), str(r.flops), live,
            ";".join(r.warnings)]))
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": result.config.to_dict(),
        "epochs": [r.to_record() for r in result.reports],
        "finetune_epochs": [r.to_record() for r in result.finetune_reports],
        "plans": result.plans,
        "best_error": result.best_error,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    timings = [f"{r.epoch}\t{r.wall_time:.3f}" for r in result.reports + result.finetune_reports]
    (out / "timing.txt").write_text("\n".join(timings) + "\n")


def verify_run_dir(run_dir):
    """Structurally replay a saved run log and re-audit every epoch.

    The model is rebuilt from the config echo, the logged pruning plans are
    re-applied epoch by epoch, and the recomputed complexity, per-layer
    counts, schedule values and lockstep audits are compared against the
    log. Returns a list of problem strings; empty means consistent.
    """
    from . import models as models_mod
    from .pruning import AuditError, PrunePlan

    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise ConfigError(f"no summary.json under {run_dir}")
    summary = json.loads(path.read_text())
    problems = []
    cfg = RunConfig(summary["config"])
    sched = PruneSchedule(
        t_prune=cfg["schedule"]["t_prune"], total_epochs=cfg["schedule"]["epochs"],
        remove_ratio=cfg["schedule"]["remove_ratio"],
        criterion=cfg["schedule"]["criterion"], mode=cfg["schedule"]["mode"])
    epochs = summary["epochs"]
    plans = summary["plans"]
    if len(plans) != len(epochs):
        problems.append(f"{len(epochs)} epoch records but {len(plans)} plan lists")
        return problems
    graph = build_model(cfg, np.random.default_rng(cfg["run"]["init_seed"]))
    opt = SgdMomentum(cfg["optim"]["alpha"], cfg["optim"]["beta"])
    for name, layer, p in graph.named_params():
        opt.register(name, getattr(layer, p))
    chw = (cfg["model"]["in_channels"], cfg["model"]["image_size"],
           cfg["model"]["image_size"])
    for rec, epoch_plans in zip(epochs, plans):
        t = rec["epoch"]
        expect = decay_ratio(t, sched)
        if abs(rec["p_t"] - expect) > 1e-12:
            problems.append(f"epoch {t}: recorded p_t {rec['p_t']} vs schedule {expect}")
        for _, layer in graph.conv_items():
            layer.soft_idx = np.zeros(0, dtype=np.intp)
        for plan_rec in epoch_plans:
            plan = PrunePlan(
                unit=plan_rec["unit"], epoch=t,
                hard=np.asarray(plan_rec["hard"], dtype=np.intp),
                soft=np.asarray(plan_rec["soft"], dtype=np.intp),
                n_wc=plan_rec["n_wc"])
            try:
                models_mod.propagate_prune(graph, plan.unit, plan, opt=opt)
            except (ValueError, KeyError) as e:
                problems.append(f"epoch {t} unit {plan.unit}: replay failed: {e}")
        try:
            graph.audit_wiring(chw)
            audit_lockstep(graph, opt)
            audit_soft_zero(graph, opt)
        except AuditError as e:
            problems.append(f"epoch {t}: {e}")
        params, flops = count_params(graph), count_flops(graph, chw)
        if rec["params"] != params:
            problems.append(f"epoch {t}: logged params {rec['params']}, replay gives {params}")
        if rec["flops"] != flops:
            problems.append(f"epoch {t}: logged flops {rec['flops']}, replay gives {flops}")
        replayed = _layer_counts(graph)
        for name, c in rec["layer_counts"].items():
            if name not in replayed:
                problems.append(f"epoch {t}: unknown layer '{name}' in log")
            elif c != replayed[name]:
                problems.append(
                    f"epoch {t} layer {name}: logged counts {c}, replay gives {replayed[name]}")
    return problems
