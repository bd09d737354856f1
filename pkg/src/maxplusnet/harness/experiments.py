"""Desk-scale experiments on synthetic data.

Each ``run_*`` function is pure: it returns an :class:`ExperimentResult`
(summary, tables, models) without touching the filesystem, and every random
draw comes from streams spawned off ``cfg.seed``. :func:`run_experiment`
writes the result to disk.
"""

from __future__ import annotations

import os
import statistics
from dataclasses import dataclass, field

import numpy as np

from .. import chain
from ..bderiv import support_sets_wrt_params
from ..chain import DenseDilation, LayerStack, Linear, SquaredErrorLoss, StepPolicy
from ..descent import message_candidate, message_quality_audit
from ..maxplus import maxplus_matmul
from ..oracle import SeededSampler
from .config import TASKS, ConfigError, ExperimentConfig, InitSpec
from .metrics import MetricsRow, Table, metrics_table, summary_json, write_text

# stream keys under the run seed
DATA, INIT, ORDER, TEACHER = 0, 1, 2, 3


@dataclass
class ExperimentResult:
    task: str
    summary: dict
    tables: dict[str, Table] = field(default_factory=dict)
    models: dict[str, LayerStack] = field(default_factory=dict)


def policy_from(cfg: ExperimentConfig) -> StepPolicy:
    return StepPolicy(
        eta_max=cfg.eta_max,
        classical_lr=cfg.classical_lr,
        loss_aware=cfg.loss_aware,
        tie_tol=cfg.tie_tol,
        unit_on_degenerate=cfg.unit_on_degenerate,
    )


def init_weights(spec: InitSpec, shape, sampler: SeededSampler) -> np.ndarray:
    if spec.mode == "zeros":
        return np.zeros(shape)
    if spec.mode == "uniform":
        return sampler.uniform(spec.a, spec.b, shape)
    return sampler.normal(shape, scale=spec.sigma)


def dilation_batch(W, X) -> np.ndarray:
    return (W[None, :, :] + X[:, None, :]).max(axis=2)


def _dead_count(stack: LayerStack) -> int:
    total = 0
    for k, layer in enumerate(stack.layers):
        if isinstance(layer, DenseDilation):
            seen = stack.ever_support.get(k)
            total += layer.W.size if seen is None else int((~seen).sum())
    return total


def _row_from_report(run: str, t: int, i: int, rep: chain.StepReport, data_loss, dead) -> MetricsRow:
    return MetricsRow(
        run=run,
        step=t,
        sample=i,
        loss=rep.loss_before,
        loss_after=rep.loss_after,
        data_loss=data_loss,
        gains=rep.gains[:-1],
        vu=rep.vu[1:],
        steps=rep.steps[:-1],
        dead_weights=dead,
        param_violations=sum(rep.param_violations),
        message_violations=sum(rep.message_violations),
        propagation_violations=sum(rep.propagation_violations),
    )


def _check(cfg: ExperimentConfig, task: str):
    if cfg.task != task:
        raise ConfigError(f"expected task {task!r}, got {cfg.task!r}", field="task")


# recover-dilation

def _recover_once(cfg: ExperimentConfig, seed: int, init: InitSpec, W0=None, run: str = "main", track: bool = True):
    root = SeededSampler(seed)
    data, init_s, order = root.spawn(DATA), root.spawn(INIT), root.spawn(ORDER)
    n, m = cfg.dims.n, cfg.dims.m
    W_star = data.uniform(-1.0, 1.0, (m, n))
    X = data.uniform(0.0, 1.0, (cfg.samples, n))
    Y = dilation_batch(W_star, X)
    W_init = np.array(W0, dtype=np.float64) if W0 is not None else init_weights(init, (m, n), init_s)
    if W_init.shape != (m, n):
        raise ConfigError(f"initial weights have shape {W_init.shape}, expected {(m, n)}", field="dims")
    stack = LayerStack([DenseDilation(W_init.copy()), SquaredErrorLoss(np.zeros(m))])
    layer = stack.layers[0]
    policy = policy_from(cfg)

    def data_loss():
        r = dilation_batch(layer.W, X) - Y
        return float((r * r).sum(axis=1).mean())

    initial = data_loss()
    rows: list[MetricsRow] = []
    prev = initial
    step_ok = data_ok = 0
    for t in range(cfg.steps):
        if cfg.batch:
            idx = order.integers(0, cfg.samples, cfg.batch)
            before, after = chain.train_step_batch(stack, X[idx], Y[idx], policy)
            cur = data_loss() if track or t == cfg.steps - 1 else None
            row = MetricsRow(run=run, step=t, sample=-1, loss=before, loss_after=after,
                             data_loss=cur, dead_weights=_dead_count(stack))
        else:
            i = int(order.integers(0, cfg.samples))
            rep = chain.train_step(stack, X[i], Y[i], policy)
            before, after = rep.loss_before, rep.loss_after
            cur = data_loss() if track or t == cfg.steps - 1 else None
            row = _row_from_report(run, t, i, rep, cur, _dead_count(stack))
        step_ok += after <= before
        if cur is not None:
            data_ok += cur <= prev
            prev = cur
        rows.append(row)
    stack.set_target(np.zeros(m))
    seen = stack.ever_support.get(0, np.zeros((m, n), dtype=bool))
    diff = np.abs(layer.W - W_star)
    summary = {
        "seed": seed,
        "init": init.label() if W0 is None else "given",
        "dims": {"n": n, "m": m},
        "samples": cfg.samples,
        "steps": cfg.steps,
        "batch": cfg.batch,
        "eta_max": cfg.eta_max,
        "initial_loss": initial,
        "final_loss": prev,
        "loss_ratio": prev / initial if initial > 0 else 0.0,
        "step_nonincreasing_fraction": step_ok / cfg.steps,
        "data_nonincreasing_fraction": data_ok / cfg.steps if track else None,
        "dead_weights": int((~seen).sum()),
        "dead_weights_unchanged": bool(np.array_equal(layer.W[~seen], W_init[~seen])),
        "weight_error_sup_supported": float(diff[seen].max()) if seen.any() else 0.0,
        "weight_error_sup_all": float(diff.max()),
    }
    return rows, summary, stack


def run_recover_dilation(cfg: ExperimentConfig, W0=None) -> ExperimentResult:
    """Learn a hidden dense dilation ``W*`` (entries in [-1, 1]) from inputs in ``[0, 1]^n``.

    ``W0`` overrides the configured initialization.
    """
    _check(cfg, "recover-dilation")
    rows, summary, stack = _recover_once(cfg, cfg.seed, cfg.init, W0)
    summary["task"] = cfg.task
    return ExperimentResult(cfg.task, summary, {cfg.output.metrics: metrics_table(rows)}, {cfg.output.model: stack})


def run_init_study(cfg: ExperimentConfig) -> ExperimentResult:
    """Dead-weight counts of the configured initialization against zero init, over ``cfg.seeds`` seeds.

    Both runs of a seed see the same data and the same sample order.
    """
    _check(cfg, "init-study")
    zeros = InitSpec("zeros")
    rows, per_seed = [], []
    for s in range(cfg.seed, cfg.seed + cfg.seeds):
        r0, s0, _ = _recover_once(cfg, s, zeros, run=f"seed={s}/zeros", track=False)
        r1, s1, _ = _recover_once(cfg, s, cfg.init, run=f"seed={s}/{cfg.init.label()}", track=False)
        rows += r0 + r1
        per_seed.append({
            "seed": s,
            "dead_zeros": s0["dead_weights"],
            "dead_other": s1["dead_weights"],
            "unchanged": s0["dead_weights_unchanged"] and s1["dead_weights_unchanged"],
            "loss_ratio_zeros": s0["loss_ratio"],
            "loss_ratio_other": s1["loss_ratio"],
        })
    wins = sum(r["dead_other"] > r["dead_zeros"] for r in per_seed)
    summary = {
        "task": cfg.task,
        "init": cfg.init.label(),
        "steps": cfg.steps,
        "seeds": cfg.seeds,
        "per_seed": per_seed,
        "strictly_more_dead": wins,
        "strictly_more_dead_fraction": wins / cfg.seeds,
        "dead_weights_unchanged": all(r["unchanged"] for r in per_seed),
    }
    return ExperimentResult(cfg.task, summary, {cfg.output.metrics: metrics_table(rows)})


# maxplus-factorize

def _violation_rate(rows: list[MetricsRow], layers: int) -> float:
    bad = sum(r.param_violations + r.message_violations + r.propagation_violations for r in rows)
    return bad / max(1, len(rows) * layers)


def run_maxplus_factorize(cfg: ExperimentConfig, A0=None, B0=None, hidden=None) -> ExperimentResult:
    """Train ``delta_A o delta_B`` (A is m x p, B is p x n) against a hidden ``delta_C``.

    ``hidden`` is an optional ``(A*, B*)`` pair; by default both factors are
    drawn uniformly from [-1, 1] and ``C = A* (max,+) B*``.
    """
    _check(cfg, "maxplus-factorize")
    root = SeededSampler(cfg.seed)
    data, init_s, order = root.spawn(DATA), root.spawn(INIT), root.spawn(ORDER)
    n, m, p = cfg.dims.n, cfg.dims.m, cfg.dims.p
    if hidden is None:
        A_star, B_star = data.uniform(-1.0, 1.0, (m, p)), data.uniform(-1.0, 1.0, (p, n))
    else:
        A_star, B_star = (np.asarray(h, dtype=np.float64) for h in hidden)
    C = maxplus_matmul(A_star, B_star)
    X = data.uniform(0.0, 1.0, (cfg.samples, n))
    Y = dilation_batch(C, X)
    A = np.array(A0, dtype=np.float64) if A0 is not None else init_weights(cfg.init, (m, p), init_s)
    B = np.array(B0, dtype=np.float64) if B0 is not None else init_weights(cfg.init, (p, n), init_s)
    stack = LayerStack([DenseDilation(B), DenseDilation(A), SquaredErrorLoss(np.zeros(m))])
    policy = policy_from(cfg)

    def data_loss():
        r = dilation_batch(stack.layers[1].W, dilation_batch(stack.layers[0].W, X)) - Y
        return float((r * r).sum(axis=1).mean())

    initial = data_loss()
    rows = []
    for t in range(cfg.steps):
        if cfg.batch:
            idx = order.integers(0, cfg.samples, cfg.batch)
            before, after = chain.train_step_batch(stack, X[idx], Y[idx], policy)
            rows.append(MetricsRow("main", t, -1, before, after, data_loss(), dead_weights=_dead_count(stack)))
        else:
            i = int(order.integers(0, cfg.samples))
            rep = chain.train_step(stack, X[i], Y[i], policy)
            rows.append(_row_from_report("main", t, i, rep, data_loss(), _dead_count(stack)))
    stack.set_target(np.zeros(m))
    final = rows[-1].data_loss
    summary = {
        "task": cfg.task,
        "seed": cfg.seed,
        "dims": {"n": n, "m": m, "p": p},
        "initial_loss": initial,
        "final_loss": final,
        "loss_ratio": final / initial if initial > 0 else 0.0,
        "violation_rate": _violation_rate(rows, 2) if not cfg.batch else None,
        "learned_product": maxplus_matmul(stack.layers[1].W, stack.layers[0].W).tolist(),
        "hidden_product": C.tolist(),
    }
    return ExperimentResult(cfg.task, summary, {cfg.output.metrics: metrics_table(rows)}, {cfg.output.model: stack})


# layer-position

def _position_stacks(cfg: ExperimentConfig, init_s: SeededSampler):
    n, m = cfg.dims.n, cfg.dims.m
    early = LayerStack([
        DenseDilation(init_weights(cfg.init, (m, n), init_s)),
        Linear(init_s.normal((m, m), scale=1.0 / np.sqrt(m)), np.zeros(m)),
        SquaredErrorLoss(np.zeros(m)),
    ])
    late = LayerStack([
        Linear(init_s.normal((m, n), scale=1.0 / np.sqrt(n)), np.zeros(m)),
        DenseDilation(init_weights(cfg.init, (m, m), init_s)),
        SquaredErrorLoss(np.zeros(m)),
    ])
    return {"early": early, "late": late}


def _layer_counts(reports: list[chain.StepReport], L: int) -> dict:
    out = {}
    for kind in ("param_violations", "message_violations", "propagation_violations"):
        out[kind] = [sum(bool(getattr(r, kind)[k]) for r in reports) for k in range(L)]
    return out


def run_layer_position(cfg: ExperimentConfig) -> ExperimentResult:
    """Dilation before a linear layer against the reverse order, on one teacher and data stream.

    The teacher is ``x -> delta_{W*}(x) + M x / sqrt(n)``; it is repeated for
    ``cfg.seeds`` consecutive seeds and the medians of the final losses are
    reported.
    """
    _check(cfg, "layer-position")
    n, m = cfg.dims.n, cfg.dims.m
    policy = policy_from(cfg)
    rows, per_seed = [], []
    for s in range(cfg.seed, cfg.seed + cfg.seeds):
        root = SeededSampler(s)
        data, teacher = root.spawn(DATA), root.spawn(TEACHER)
        W_star = teacher.uniform(-1.0, 1.0, (m, n))
        M = teacher.normal((m, n))
        X = data.uniform(0.0, 1.0, (cfg.samples, n))
        Y = dilation_batch(W_star, X) + X @ M.T / np.sqrt(n)
        entry = {"seed": s}
        for name, stack in _position_stacks(cfg, root.spawn(INIT)).items():
            order = root.spawn(ORDER)
            reports = []

            def data_loss():
                total = 0.0
                for x, y in zip(X, Y):
                    stack.set_target(y)
                    total += float(chain.forward(stack, x)[0])
                return total / len(X)

            initial = data_loss()
            for t in range(cfg.steps):
                i = int(order.integers(0, cfg.samples))
                rep = chain.train_step(stack, X[i], Y[i], policy)
                reports.append(rep)
                rows.append(_row_from_report(f"seed={s}/{name}", t, i, rep, None, _dead_count(stack)))
            final = data_loss()
            entry[name] = {
                "initial_loss": initial,
                "final_loss": final,
                "morph_layer": 0 if name == "early" else 1,
                "violations": _layer_counts(reports, len(stack.layers)),
            }
        per_seed.append(entry)
    summary = {
        "task": cfg.task,
        "dims": {"n": n, "m": m},
        "steps": cfg.steps,
        "seeds": cfg.seeds,
        "per_seed": per_seed,
        "median_final_loss": {
            name: statistics.median(e[name]["final_loss"] for e in per_seed) for name in ("early", "late")
        },
        "early_morph_param_violations": sum(e["early"]["violations"]["param_violations"][0] for e in per_seed),
    }
    return ExperimentResult(cfg.task, summary, {cfg.output.metrics: metrics_table(rows)})


# message-audit

AUDIT_COLUMNS = ("population", "instance", "max_tie", "degenerate", "cond2", "inner", "cond3_violations", "samples")
POPULATIONS = ("no-ties", "ties", "degenerate")


def _grid(sampler: SeededSampler, lo: int, hi: int, shape) -> np.ndarray:
    # multiples of 1/64: sums and differences stay exact in float64
    return sampler.integers(lo, hi, shape) / 64.0


def _balanced_message(m: int, sampler: SeededSampler) -> np.ndarray:
    """Unit vector with exactly zero sum: entries are +-a or +-2a."""
    s = [1.0, -1.0] * (m // 2)
    if m % 2:
        s = s[:-2] + [1.0, 1.0, -2.0] if m >= 3 else None
    s = np.array(s) * np.where(sampler.integers(0, 2) == 1, 1.0, -1.0)
    s = s[sampler.rng.permutation(m)]
    return s / np.linalg.norm(s)


def audit_instance(population: str, m: int, n: int, sampler: SeededSampler, min_ties=2, max_ties=4):
    """Draw ``(W, x, u)`` for one audit population."""
    if population == "no-ties":
        while True:
            W = sampler.uniform(-1.0, 1.0, (m, n))
            x = sampler.uniform(0.0, 1.0, n)
            if support_sets_wrt_params(W, x).is_singleton():
                break
        u = sampler.normal(m)
    elif population == "ties":
        W = _grid(sampler, -64, 65, (m, n))
        x = _grid(sampler, 0, 65, n)
        top = (W + x).max(axis=1) + 1.0 / 64
        hi = min(max_ties, n)
        for i in range(m):
            t = int(sampler.integers(min_ties, hi + 1))
            cols = sampler.rng.choice(n, size=t, replace=False)
            W[i, cols] = top[i] - x[cols]
        u = sampler.normal(m)
    elif population == "degenerate":
        W = sampler.uniform(-1.0, 0.0, (m, n))
        W[:, 0] = 2.0
        x = sampler.uniform(0.0, 1.0, n)
        return W, x, _balanced_message(m, sampler)
    else:
        raise ValueError(f"unknown population {population!r}")
    return W, x, u / np.linalg.norm(u)


def run_message_audit(cfg: ExperimentConfig) -> ExperimentResult:
    """Audit the ``E^T u`` message on tie-free, tied and degenerate populations."""
    _check(cfg, "message-audit")
    m, n = cfg.dims.m, cfg.dims.n
    a = cfg.audit
    if n < a.min_ties:
        raise ConfigError(f"dims.n = {n} cannot hold ties of multiplicity {a.min_ties}", field="dims.n")
    if n < 2 or m < 2:
        raise ConfigError("the audit needs n >= 2 and m >= 2", field="dims")
    root = SeededSampler(cfg.seed)
    rows, stats = [], {}
    for pi, pop in enumerate(POPULATIONS):
        recs = []
        for k in range(a.instances):
            s = root.spawn(1000 * (pi + 1) + k)
            W, x, u = audit_instance(pop, m, n, s, a.min_ties, a.max_ties)
            J = support_sets_wrt_params(W, x, cfg.tie_tol)
            h = message_candidate(J, u)
            rep = message_quality_audit(J, u, h, samples=a.samples, rng=s.rng)
            recs.append(rep)
            rows.append((pop, k, int(J.sizes.max()), rep.degenerate, rep.cond2, rep.inner,
                         rep.cond3_violations, rep.samples))
        live = [r for r in recs if not r.degenerate]
        total = sum(r.samples for r in live)
        stats[pop] = {
            "instances": len(recs),
            "degenerate_rate": (len(recs) - len(live)) / len(recs),
            "cond2_violation_rate": sum(not r.cond2 for r in live) / len(live) if live else 0.0,
            "cond3_violation_rate": sum(r.cond3_violations for r in live) / total if total else 0.0,
            "instances_with_cond3_violation": sum(r.cond3_violations > 0 for r in live),
            "cond3_violations": sum(r.cond3_violations for r in live),
        }
    summary = {"task": cfg.task, "seed": cfg.seed, "dims": {"n": n, "m": m},
               "samples_per_instance": a.samples, "populations": stats}
    return ExperimentResult(cfg.task, summary, {cfg.output.metrics: Table(AUDIT_COLUMNS, rows)})


RUNNERS = {
    "recover-dilation": run_recover_dilation,
    "maxplus-factorize": run_maxplus_factorize,
    "layer-position": run_layer_position,
    "init-study": run_init_study,
    "message-audit": run_message_audit,
}
assert tuple(RUNNERS) == TASKS


def write_result(result: ExperimentResult, cfg: ExperimentConfig, out_dir: str) -> list[str]:
    paths = []
    for name, table in result.tables.items():
        paths.append(os.path.join(out_dir, name))
        write_text(paths[-1], table.to_csv())
    for name, stack in result.models.items():
        paths.append(os.path.join(out_dir, name))
        write_text(paths[-1], stack.to_json() + "\n")
    paths.append(os.path.join(out_dir, cfg.output.summary))
    write_text(paths[-1], summary_json({"config": cfg.to_dict() | {"output": None}, **result.summary}))
    return paths


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> tuple[ExperimentResult, list[str]]:
    result = RUNNERS[cfg.task](cfg)
    return result, write_result(result, cfg, out_dir or cfg.out_dir())
