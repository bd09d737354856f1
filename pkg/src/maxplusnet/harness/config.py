"""Experiment configuration: a YAML document validated into :class:`ExperimentConfig`.

Every key is optional; the defaults below are the documented schema. Errors
name the offending field and, when the document came from text, its line.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field

import yaml

TASKS = ("recover-dilation", "maxplus-factorize", "layer-position", "init-study", "message-audit")
INIT_MODES = ("zeros", "uniform", "gaussian")
MAX_DIM = 64
OUT_DIR_ENV = "MAXPLUSNET_OUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` and ``line`` locate the problem when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class InitSpec:
    mode: str = "zeros"
    a: float = -2.0
    b: float = -1.0
    sigma: float = 0.1

    def label(self) -> str:
        if self.mode == "uniform":
            return f"uniform({self.a:g},{self.b:g})"
        if self.mode == "gaussian":
            return f"gaussian({self.sigma:g})"
        return "zeros"


@dataclass(frozen=True)
class Dims:
    n: int = 8
    m: int = 8
    p: int = 4


@dataclass(frozen=True)
class AuditSpec:
    instances: int = 100
    samples: int = 10_000
    min_ties: int = 2
    max_ties: int = 4


@dataclass(frozen=True)
class OutputSpec:
    dir: str | None = None
    metrics: str = "metrics.csv"
    summary: str = "summary.json"
    model: str = "model.json"


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "recover-dilation"
    seed: int = 0
    dims: Dims = field(default_factory=Dims)
    samples: int = 500
    steps: int = 2000
    eta_max: float = 1.0
    init: InitSpec = field(default_factory=InitSpec)
    tie_tol: float = 0.0
    batch: int = 0
    classical_lr: float = 0.05
    loss_aware: bool = True
    unit_on_degenerate: bool = False
    seeds: int = 1
    audit: AuditSpec = field(default_factory=AuditSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def out_dir(self) -> str:
        """Configured directory, else ``$MAXPLUSNET_OUT_DIR``, else ``./out``."""
        return self.output.dir or os.environ.get(OUT_DIR_ENV) or "out"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_INIT_RE = re.compile(r"^\s*(zeros|uniform|gaussian)\s*(?:\(([^)]*)\))?\s*$")


def _line_map(text: str) -> dict:
    """Dotted key path -> 1-based line of its value, from the YAML node tree."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


class _Reader:
    def __init__(self, data: dict, lines: dict):
        self.data = data
        self.lines = lines

    def fail(self, key: str, msg: str):
        raise ConfigError(msg, field=key, line=self.lines.get(key))

    def section(self, key: str, allowed: set) -> dict:
        val = self.data.get(key, {})
        if val is None:
            val = {}
        if not isinstance(val, dict):
            self.fail(key, "expected a mapping")
        for k in val:
            if k not in allowed:
                self.fail(f"{key}.{k}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return val

    def integer(self, key: str, val, lo: int, hi: int | None = None) -> int:
        if isinstance(val, bool) or not isinstance(val, int):
            self.fail(key, f"expected an integer, got {val!r}")
        if val < lo or (hi is not None and val > hi):
            rng = f"in [{lo}, {hi}]" if hi is not None else f">= {lo}"
            self.fail(key, f"must be {rng}, got {val}")
        return int(val)

    def real(self, key: str, val, lo: float | None = None, strict: bool = False) -> float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(key, f"expected a number, got {val!r}")
        val = float(val)
        if val != val or val in (float("inf"), float("-inf")):
            self.fail(key, "must be finite")
        if lo is not None and (val <= lo if strict else val < lo):
            self.fail(key, f"must be {'>' if strict else '>='} {lo:g}, got {val:g}")
        return val

    def boolean(self, key: str, val) -> bool:
        if not isinstance(val, bool):
            self.fail(key, f"expected true or false, got {val!r}")
        return val

    def text(self, key: str, val) -> str:
        if not isinstance(val, str) or not val:
            self.fail(key, f"expected a non-empty string, got {val!r}")
        return val


def _parse_init(r: _Reader, val) -> InitSpec:
    if isinstance(val, str):
        mt = _INIT_RE.match(val)
        if not mt:
            r.fail("init", f"expected zeros, uniform(a,b) or gaussian(sigma), got {val!r}")
        mode, args = mt.group(1), mt.group(2)
        nums = []
        if args is not None and args.strip():
            try:
                nums = [float(s) for s in args.split(",")]
            except ValueError:
                r.fail("init", f"bad arguments in {val!r}")
        expected = {"zeros": (0,), "uniform": (0, 2), "gaussian": (0, 1)}[mode]
        if len(nums) not in expected:
            r.fail("init", f"{mode} takes {' or '.join(map(str, expected))} arguments, got {len(nums)}")
        spec = InitSpec(mode=mode)
        if mode == "uniform" and nums:
            spec = dataclasses.replace(spec, a=nums[0], b=nums[1])
        if mode == "gaussian" and nums:
            spec = dataclasses.replace(spec, sigma=nums[0])
    elif isinstance(val, dict):
        sec = r.section("init", {"mode", "a", "b", "sigma"})
        d = InitSpec()
        mode = sec.get("mode", d.mode)
        if mode not in INIT_MODES:
            r.fail("init.mode", f"must be one of {', '.join(INIT_MODES)}, got {mode!r}")
        spec = InitSpec(
            mode=mode,
            a=r.real("init.a", sec.get("a", d.a)),
            b=r.real("init.b", sec.get("b", d.b)),
            sigma=r.real("init.sigma", sec.get("sigma", d.sigma), 0.0),
        )
    else:
        r.fail("init", "expected a string or a mapping")
    if spec.mode == "uniform" and not spec.a <= spec.b:
        r.fail("init", f"uniform bounds must satisfy a <= b, got ({spec.a:g}, {spec.b:g})")
    return spec


def parse_config(data, lines: dict | None = None) -> ExperimentConfig:
    """Validate a plain mapping (as loaded from YAML) into a config."""
    lines = lines or {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    r = _Reader(data, lines)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for k in data:
        if k not in top:
            r.fail(str(k), f"unknown key (allowed: {', '.join(sorted(top))})")
    d = ExperimentConfig()
    task = data.get("task", d.task)
    if task not in TASKS:
        r.fail("task", f"must be one of {', '.join(TASKS)}, got {task!r}")

    dsec = r.section("dims", {"n", "m", "p"})
    dims = Dims(**{k: r.integer(f"dims.{k}", dsec.get(k, getattr(Dims(), k)), 1, MAX_DIM) for k in ("n", "m", "p")})
    asec = r.section("audit", {"instances", "samples", "min_ties", "max_ties"})
    da = AuditSpec()
    audit = AuditSpec(
        instances=r.integer("audit.instances", asec.get("instances", da.instances), 1),
        samples=r.integer("audit.samples", asec.get("samples", da.samples), 1),
        min_ties=r.integer("audit.min_ties", asec.get("min_ties", da.min_ties), 2, MAX_DIM),
        max_ties=r.integer("audit.max_ties", asec.get("max_ties", da.max_ties), 2, MAX_DIM),
    )
    if audit.min_ties > audit.max_ties:
        r.fail("audit.max_ties", "must be >= audit.min_ties")
    osec = r.section("output", {"dir", "metrics", "summary", "model"})
    do = OutputSpec()
    output = OutputSpec(
        dir=None if osec.get("dir") is None else r.text("output.dir", osec["dir"]),
        metrics=r.text("output.metrics", osec.get("metrics", do.metrics)),
        summary=r.text("output.summary", osec.get("summary", do.summary)),
        model=r.text("output.model", osec.get("model", do.model)),
    )
    return ExperimentConfig(
        task=task,
        seed=r.integer("seed", data.get("seed", d.seed), 0),
        dims=dims,
        samples=r.integer("samples", data.get("samples", d.samples), 1),
        steps=r.integer("steps", data.get("steps", d.steps), 1),
        eta_max=r.real("eta_max", data.get("eta_max", d.eta_max), 0.0, strict=True),
        init=_parse_init(r, data.get("init", d.init.mode)),
        tie_tol=r.real("tie_tol", data.get("tie_tol", d.tie_tol), 0.0),
        batch=r.integer("batch", data.get("batch", d.batch), 0),
        classical_lr=r.real("classical_lr", data.get("classical_lr", d.classical_lr), 0.0, strict=True),
        loss_aware=r.boolean("loss_aware", data.get("loss_aware", d.loss_aware)),
        unit_on_degenerate=r.boolean("unit_on_degenerate", data.get("unit_on_degenerate", d.unit_on_degenerate)),
        seeds=r.integer("seeds", data.get("seeds", d.seeds), 1),
        audit=audit,
        output=output,
    )


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"malformed YAML: {problem}", line=None if mark is None else mark.line + 1) from None
    return parse_config(data, _line_map(text))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", field=str(path)) from None
    return loads_config(text)
