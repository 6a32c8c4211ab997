"""Experiment harness: plan files, the unlearning matrix, reports and plots.

A plan is an INI file::

    [plan]
    scenario = class-wise        ; class-wise | random | backdoor
    methods = ft, ga, l1
    sparsities = 0, 0.9
    pruning = omp                ; omp | synflow | random | imp
    seeds = 0-9                  ; list or inclusive range
    output = runs/fig3
    workers = 1

    [data]       classes, per_class, test_per_class, dim, separation, noise,
                 forget_class, forget_fraction, poison_ratio,
                 trigger_magnitude, target
    [model]      kind (mlp | linear), hidden (comma list)
    [train]      lr, epochs, batch_size, momentum, weight_decay
    [retune]     lr, epochs  (prune-first retune on the full training set)
    [method.NAME] per-method overrides, see ``METHOD_KEYS``

Unknown sections or keys are configuration errors (exit code 2). Relative
output paths resolve under ``$SPARSEMU_OUT`` when it is set.

Per seed the harness trains a dense model; for each sparsity level it builds
a mask and retunes the masked model on the full data (the prune-first
original model), then runs every method plus a Retrain baseline on that
mask. Everything written to CSV is a pure function of the plan; wall-clock
run times go to ``timings.csv`` only.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit, nnet, scenarios, sparsify, theory, unlearn
from .influence import IhvpConfig
from .nnet import Dataset, ModelSpec, TrainConfig
from .scenarios import BackdoorSpec, ForgetSplit

log = logging.getLogger("sparsemu")

OUT_ENV = "SPARSEMU_OUT"
EXIT_OK, EXIT_CELL_FAILURE, EXIT_CONFIG = 0, 1, 2

SCENARIOS = ("class-wise", "random", "backdoor")
PRUNERS = ("omp", "synflow", "random", "imp")

REPORT_COLUMNS = ("method", "sparsity", "scenario", "seed", "ua", "mia_efficacy",
                  "mia_privacy", "ra", "ta", "rte_s", "disparity_avg", "asr", "sa")
# rte_s is wall-clock and lives in timings.csv so that reports.csv is reproducible
METRIC_COLUMNS = tuple(c for c in REPORT_COLUMNS if c != "rte_s")
TIMING_COLUMNS = ("method", "sparsity", "scenario", "seed", "rte_s")
SUMMARY_METRICS = ("ua", "mia_efficacy", "mia_privacy", "ra", "ta", "asr", "sa")

DATA_DEFAULTS = {"classes": 4, "per_class": 100, "test_per_class": 100, "dim": 20,
                 "separation": 3.0, "noise": 1.0, "forget_class": 0, "forget_fraction": 0.1,
                 "poison_ratio": 0.1, "trigger_magnitude": 4.0, "target": 0}
MODEL_DEFAULTS = {"kind": "mlp", "hidden": (64,)}
TRAIN_DEFAULTS = {"lr": 0.05, "epochs": 30, "batch_size": 32, "momentum": 0.9,
                  "weight_decay": 5e-4}
RETUNE_DEFAULTS = {"lr": 0.05, "epochs": 20}
PLAN_KEYS = {"scenario", "methods", "sparsities", "pruning", "prune_all", "imp_rounds",
             "seeds", "output", "workers"}
METHOD_KEYS = {"epochs", "lr", "batch_size", "momentum", "weight_decay", "ff_noise",
               "ff_damping", "gamma", "scheduler", "ga_loss_limit", "solver", "damping",
               "curvature", "cg_tol", "cg_max_iter", "woodfisher_batch"}
_IHVP_KEYS = {"solver", "damping", "curvature", "cg_tol", "cg_max_iter", "woodfisher_batch"}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------------- plan


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: str
    methods: tuple[str, ...]
    sparsities: tuple[float, ...]
    seeds: tuple[int, ...]
    pruning: str = "omp"
    prune_all: bool = False
    imp_rounds: int | None = None
    output: str | None = None
    workers: int = 1
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: dict = field(default_factory=lambda: dict(TRAIN_DEFAULTS))
    retune: dict = field(default_factory=lambda: dict(RETUNE_DEFAULTS))
    method_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not self.methods:
            raise ConfigError("plan needs at least one method")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if not self.sparsities:
            raise ConfigError("plan needs at least one sparsity level")
        for m in self.methods:
            if m not in unlearn.METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods")
        for s in self.sparsities:
            if not 0.0 <= s < 1.0:
                raise ConfigError(f"sparsity {s} outside [0, 1)")
        if self.pruning not in PRUNERS:
            raise ConfigError(f"unknown pruning method {self.pruning!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for m in self.method_options:
            if m not in unlearn.METHODS:
                raise ConfigError(f"options given for unknown method {m!r}")

    def model_spec(self) -> ModelSpec:
        hidden = tuple(self.model["hidden"]) if self.model["kind"] == "mlp" else ()
        return ModelSpec(self.model["kind"], int(self.data["dim"]), int(self.data["classes"]),
                         hidden)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=float(t["lr"]), epochs=int(t["epochs"]),
                           batch_size=int(t["batch_size"]), seed=int(seed),
                           momentum=float(t["momentum"]), weight_decay=float(t["weight_decay"]))

    def retune_config(self, seed: int) -> TrainConfig:
        return self.train_config(seed).replace(lr=float(self.retune["lr"]),
                                               epochs=int(self.retune["epochs"]))

    def backdoor(self) -> BackdoorSpec:
        d = self.data
        return BackdoorSpec(int(d["target"]), float(d["poison_ratio"]),
                            float(d["trigger_magnitude"]))

    def unlearn_config(self, method: str, seed: int) -> UnlearnSettings:
        """Method settings; training-recipe fields fall back to ``[train]``."""
        opts = dict(self.method_options.get(method, {}))
        t = self.train
        kw: dict = {"seed": int(seed), "batch_size": int(opts.pop("batch_size", t["batch_size"])),
                    "momentum": float(opts.pop("momentum", t["momentum"])),
                    "weight_decay": float(opts.pop("weight_decay", t["weight_decay"]))}
        if method == "retrain":
            kw["epochs"] = int(opts.pop("epochs", t["epochs"]))
            kw["lr"] = float(opts.pop("lr", t["lr"]))
        ihvp_kw = {k: opts.pop(k) for k in list(opts) if k in _IHVP_KEYS}
        if method == "iu":
            base = {"solver": "woodfisher", "damping": 1e-3}
            base.update(ihvp_kw)
            kw["ihvp"] = IhvpConfig(**base)
        elif ihvp_kw:
            raise ConfigError(f"{sorted(ihvp_kw)} only apply to iu")
        search_ff = False
        if method == "ff":
            noise = opts.pop("ff_noise", "search")
            if noise == "search":
                search_ff = True
                noise = 0.0
            kw["ff_noise"] = float(noise)
        kw.update(opts)
        try:
            cfg = unlearn.UnlearnConfig(method, **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[method.{method}]: {e}") from None
        return UnlearnSettings(cfg, search_ff)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = {**self.model, "hidden": list(self.model["hidden"])}
        return d


@dataclass(frozen=True)
class UnlearnSettings:
    config: unlearn.UnlearnConfig
    search_ff_noise: bool = False


def _split_list(text: str) -> list[str]:
    return [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]


def _parse_seeds(text: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in _split_list(text):
        if re.fullmatch(r"\d+-\d+", part):
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in _split_list(value))
    return value.strip()


def _section(cp, name: str, defaults: dict) -> dict:
    out = dict(defaults)
    if not cp.has_section(name):
        return out
    for key, value in cp.items(name):
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        try:
            out[key] = _coerce(value, defaults[key])
        except ValueError as e:
            raise ConfigError(f"[{name}] {key}: {e}") from None
    return out


def _method_value(key: str, value: str):
    if key in ("scheduler", "solver", "curvature") or (key == "ff_noise" and value.strip() == "search"):
        return value.strip()
    if key in ("epochs", "batch_size", "cg_max_iter", "woodfisher_batch"):
        return int(value)
    return float(value)


def parse_plan(text: str) -> ExperimentPlan:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    known = {"plan", "data", "model", "train", "retune"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("method."):
            raise ConfigError(f"unknown section [{sec}]")
    if not cp.has_section("plan"):
        raise ConfigError("missing [plan] section")
    p = dict(cp.items("plan"))
    for key in p:
        if key not in PLAN_KEYS:
            raise ConfigError(f"unknown key {key!r} in [plan]")
    for key in ("scenario", "methods", "seeds"):
        if key not in p:
            raise ConfigError(f"[plan] needs {key!r}")
    method_options = {}
    for sec in cp.sections():
        if sec.startswith("method."):
            name = sec[len("method."):]
            opts = {}
            for key, value in cp.items(sec):
                if key not in METHOD_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                try:
                    opts[key] = _method_value(key, value)
                except ValueError as e:
                    raise ConfigError(f"[{sec}] {key}: {e}") from None
            method_options[name] = opts
    try:
        plan = ExperimentPlan(
            scenario=p["scenario"].strip(),
            methods=tuple(_split_list(p["methods"])),
            sparsities=tuple(float(s) for s in _split_list(p.get("sparsities", "0"))),
            seeds=_parse_seeds(p["seeds"]),
            pruning=p.get("pruning", "omp").strip(),
            prune_all=_coerce(p.get("prune_all", "false"), False),
            imp_rounds=int(p["imp_rounds"]) if "imp_rounds" in p else None,
            output=p.get("output"),
            workers=int(p.get("workers", "1")),
            data=_section(cp, "data", DATA_DEFAULTS),
            model=_section(cp, "model", MODEL_DEFAULTS),
            train=_section(cp, "train", TRAIN_DEFAULTS),
            retune=_section(cp, "retune", RETUNE_DEFAULTS),
            method_options=method_options,
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    try:
        plan.model_spec()
        for m in plan.methods:
            plan.unlearn_config(m, plan.seeds[0])
        plan.unlearn_config("retrain", plan.seeds[0])
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return plan


def load_plan(path) -> ExperimentPlan:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read plan: {e}") from None
    return parse_plan(text)


def output_dir(path: str | None, default: str = "sparsemu-out") -> Path:
    p = Path(path or default)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# ------------------------------------------------------------------ experiment


@dataclass
class CellFailure:
    seed: int
    sparsity: float
    method: str
    error: str


@dataclass
class PlanResult:
    reports: list[evalkit.UnlearnReport]
    failures: list[CellFailure]

    @property
    def exit_code(self) -> int:
        return EXIT_CELL_FAILURE if self.failures else EXIT_OK


def build_data(plan: ExperimentPlan, seed: int) -> tuple[Dataset, Dataset, ForgetSplit]:
    d = plan.data
    train, test = scenarios.make_blobs(int(d["classes"]), int(d["per_class"]), int(d["dim"]),
                                       float(d["separation"]), int(seed),
                                       test_per_class=int(d["test_per_class"]),
                                       noise=float(d["noise"]))
    if plan.scenario == "class-wise":
        split = scenarios.class_wise_split(train, int(d["forget_class"]))
    elif plan.scenario == "random":
        split = scenarios.random_split(train, float(d["forget_fraction"]), int(seed))
    else:
        train, split = scenarios.poison(train, plan.backdoor(), int(seed))
    return train, test, split


def build_mask(plan: ExperimentPlan, model: ModelSpec, theta_dense, data: Dataset, s: float,
               seed: int) -> sparsify.SparsityMask:
    if plan.pruning == "omp":
        return sparsify.omp(model, theta_dense, s, plan.prune_all)
    if plan.pruning == "synflow":
        return sparsify.synflow(model, nnet.init_params(model, seed), s, prune_all=plan.prune_all)
    if plan.pruning == "random":
        return sparsify.random_mask(model, s, seed, plan.prune_all)
    rounds = plan.imp_rounds
    if rounds is None:
        rounds = max(1, math.ceil(math.log(1.0 - s) / math.log(0.8) - 1e-9)) if s > 0 else 1
    return sparsify.imp(model, data, s, rounds, plan.train_config(seed), prune_all=plan.prune_all)


def original_model(plan: ExperimentPlan, model: ModelSpec, theta_dense, data: Dataset, s: float,
                   seed: int):
    """(mask, theta_o) for one sparsity level; s = 0 returns the dense model."""
    if s == 0.0:
        return None, theta_dense
    mask = build_mask(plan, model, theta_dense, data, s, seed)
    theta, _ = nnet.train(model, sparsify.apply_mask(theta_dense, mask), data,
                          plan.retune_config(seed), mask.as_float)
    return mask, theta


def _run_method(plan, model, method, theta_o, train, test, split, mask, seed, s):
    st = plan.unlearn_config(method, seed)
    cfg = st.config
    if st.search_ff_noise:
        cfg = cfg.replace(ff_noise=unlearn.search_ff_noise(model, theta_o, train, split, cfg, mask))
    t0 = time.perf_counter()
    out = unlearn.unlearn(model, theta_o, train, split, cfg, mask)
    rte = max(time.perf_counter() - t0, 1e-9)
    rep = evalkit.evaluate(model, out.theta, train, test, split, method=method, sparsity=float(s),
                           seed=int(seed), rte_s=rte)
    if plan.scenario == "backdoor":
        rep.asr = scenarios.asr(model, out.theta, test, plan.backdoor())
        rep.sa = scenarios.standard_accuracy(model, out.theta, test)
    rep.diagnostics = _jsonable(out.diagnostics)
    return rep


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def run_seed(plan: ExperimentPlan, seed: int) -> tuple[list, list]:
    """All cells of one seed; failures are recorded, never raised."""
    reports: list[evalkit.UnlearnReport] = []
    failures: list[CellFailure] = []
    model = plan.model_spec()
    try:
        train, test, split = build_data(plan, seed)
        dense, _ = nnet.train(model, nnet.init_params(model, seed), train, plan.train_config(seed))
    except Exception as e:  # noqa: BLE001 - a broken seed fails all of its cells
        for s in plan.sparsities:
            for m in _cell_methods(plan):
                failures.append(CellFailure(seed, s, m, f"{type(e).__name__}: {e}"))
        return reports, failures
    for s in plan.sparsities:
        try:
            mask, theta_o = original_model(plan, model, dense, train, s, seed)
        except Exception as e:  # noqa: BLE001
            for m in _cell_methods(plan):
                failures.append(CellFailure(seed, s, m, f"{type(e).__name__}: {e}"))
            continue
        cell = []
        for m in _cell_methods(plan):
            try:
                cell.append(_run_method(plan, model, m, theta_o, train, test, split, mask, seed, s))
            except Exception as e:  # noqa: BLE001
                log.warning("cell seed=%s sparsity=%s method=%s failed: %s", seed, s, m, e)
                failures.append(CellFailure(seed, s, m, f"{type(e).__name__}: {e}"))
        base = [r for r in cell if r.method == "retrain"]
        for r in cell:
            if base:
                r.disparity_avg = evalkit.disparity_average(r, base[0])
        reports.extend(cell)
    return reports, failures


def _cell_methods(plan: ExperimentPlan) -> tuple[str, ...]:
    return plan.methods if "retrain" in plan.methods else ("retrain",) + plan.methods


def _sort_key(r):
    return (r.seed, r.sparsity, unlearn.METHODS.index(r.method))


def run_plan(plan: ExperimentPlan, output: Path | str | None = None,
             workers: int | None = None) -> PlanResult:
    """Run every (seed, sparsity, method) cell; optionally write the bundle."""
    workers = plan.workers if workers is None else workers
    seeds = list(plan.seeds)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as ex:
            parts = list(ex.map(run_seed, [plan] * len(seeds), seeds))
    else:
        parts = [run_seed(plan, s) for s in seeds]
    reports = sorted((r for p in parts for r in p[0]), key=_sort_key)
    failures = sorted((f for p in parts for f in p[1]),
                      key=lambda f: (f.seed, f.sparsity, unlearn.METHODS.index(f.method)))
    result = PlanResult(reports, failures)
    if output is not None:
        write_bundle(Path(output), plan, result)
    return result


# --------------------------------------------------------------------- summary


def _get(r, name):
    return r.get(name) if isinstance(r, dict) else getattr(r, name, None)


def summarize(reports) -> list[dict]:
    """Per (scenario, method, sparsity) mean and population std of every metric.

    Gap columns are absolute differences of the cell means from the Retrain
    cell with the same scenario and sparsity; ``disparity_avg`` averages them.
    """
    cells: dict[tuple, list] = {}
    for r in reports:
        key = (_get(r, "scenario"), _get(r, "method"), float(_get(r, "sparsity")))
        cells.setdefault(key, []).append(r)
    if not cells:
        raise ValueError("no reports to summarize")
    means = {}
    rows = []
    for key in sorted(cells, key=lambda k: (k[0], k[2], unlearn.METHODS.index(k[1])
                                            if k[1] in unlearn.METHODS else len(unlearn.METHODS))):
        rs = cells[key]
        row = {"scenario": key[0], "method": key[1], "sparsity": key[2], "n": len(rs)}
        for m in SUMMARY_METRICS + ("rte_s",):
            vals = [_get(r, m) for r in rs]
            if any(v is None for v in vals):
                continue
            arr = np.asarray(vals, dtype=np.float64)
            row[f"{m}_mean"] = float(arr.mean())
            row[f"{m}_std"] = float(arr.std())
        means[key] = row
        rows.append(row)
    for row in rows:
        base = means.get((row["scenario"], "retrain", row["sparsity"]))
        if base is None:
            raise ValueError(f"no Retrain baseline for scenario={row['scenario']} "
                             f"sparsity={row['sparsity']}")
        gaps = [abs(row[f"{m}_mean"] - base[f"{m}_mean"]) for m in evalkit.GAP_METRICS]
        for m, g in zip(evalkit.GAP_METRICS, gaps):
            row[f"gap_{m}"] = g
        row["disparity_avg"] = float(sum(gaps) / len(gaps))
    return rows


# ---------------------------------------------------------------------- output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(_get(r, c)) for c in columns])


def summary_columns(rows: list[dict], with_time: bool = False) -> list[str]:
    cols = ["scenario", "method", "sparsity", "n"]
    for m in SUMMARY_METRICS + (("rte_s",) if with_time else ()):
        if any(f"{m}_mean" in r for r in rows):
            cols += [f"{m}_mean", f"{m}_std"]
    cols += [f"gap_{m}" for m in evalkit.GAP_METRICS] + ["disparity_avg"]
    return cols


def write_bundle(out: Path, plan: ExperimentPlan, result: PlanResult) -> None:
    """reports.csv, summary.csv, radar.csv, timings.csv, failures.csv, bundle.json, SVG."""
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "reports.csv", METRIC_COLUMNS, result.reports)
    _write_csv(out / "timings.csv", TIMING_COLUMNS, result.reports)
    _write_csv(out / "failures.csv", ("seed", "sparsity", "method", "error"),
               [asdict(f) for f in result.failures])
    rows: list[dict] = []
    if result.reports:
        try:
            rows = summarize(result.reports)
        except ValueError as e:
            log.warning("no summary: %s", e)
    if rows:
        _write_csv(out / "summary.csv", summary_columns(rows), rows)
        _write_radar(out / "radar.csv", rows)
        (out / "ua_vs_sparsity.svg").write_text(line_chart_svg(rows, "ua_mean", "UA"))
    bundle = {"plan": plan.to_dict(), "reports": [_jsonable(r.to_dict()) for r in result.reports],
              "summary": rows, "failures": [asdict(f) for f in result.failures],
              "exit_code": result.exit_code}
    (out / "bundle.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")


def _write_radar(path: Path, rows: list[dict]) -> None:
    """Long-format radar data: one line per (method, sparsity, axis)."""
    recs = []
    for r in rows:
        for m in evalkit.GAP_METRICS:
            recs.append({"scenario": r["scenario"], "method": r["method"],
                         "sparsity": r["sparsity"], "axis": m, "value": r[f"{m}_mean"],
                         "gap": r[f"gap_{m}"]})
    _write_csv(path, ("scenario", "method", "sparsity", "axis", "value", "gap"), recs)


_COLORS = ("#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b")


def line_chart_svg(rows: list[dict], key: str, label: str, width: int = 480,
                   height: int = 320) -> str:
    """Static line chart of ``key`` against sparsity, one line per method."""
    pad = 48
    xs = sorted({r["sparsity"] for r in rows})
    xmin, xmax = xs[0], xs[-1] if xs[-1] > xs[0] else xs[0] + 1.0

    def px(x):
        return pad + (x - xmin) / (xmax - xmin) * (width - 2 * pad)

    def py(y):
        return height - pad - y / 100.0 * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">sparsity</text>',
             f'<text x="14" y="{height / 2:.1f}" font-size="12" transform="rotate(-90 14 {height / 2:.1f})" '
             f'text-anchor="middle">{label}</text>']
    for x in xs:
        parts.append(f'<text x="{px(x):.1f}" y="{height - pad + 16}" text-anchor="middle" '
                     f'font-size="10">{x:g}</text>')
    methods = [m for m in unlearn.METHODS if any(r["method"] == m for r in rows)]
    for i, m in enumerate(methods):
        pts = sorted((r["sparsity"], r[key]) for r in rows if r["method"] == m and key in r)
        color = _COLORS[i % len(_COLORS)]
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="11" '
                     f'fill="{color}">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ------------------------------------------------------------------------ verbs


def _cmd_plan(args) -> int:
    plan = load_plan(args.config)
    out = output_dir(args.out or plan.output)
    result = run_plan(plan, out, args.workers)
    for f in result.failures:
        print(f"FAILED seed={f.seed} sparsity={f.sparsity} method={f.method}: {f.error}",
              file=sys.stderr)
    print(f"{len(result.reports)} reports, {len(result.failures)} failures -> {out}")
    return result.exit_code


def _cmd_train(args) -> int:
    plan = load_plan(args.config)
    model = plan.model_spec()
    train, _, _ = build_data(plan, args.seed)
    res = nnet.sgd(model, nnet.init_params(model, args.seed), train, plan.train_config(args.seed))
    path = output_dir(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    nnet.save_checkpoint(path, model, res.theta, seed=args.seed, steps=res.steps)
    print(f"trained {res.steps} steps, loss {res.last_loss:.4g} -> {path}")
    return EXIT_OK


def _cmd_prune(args) -> int:
    plan = load_plan(args.config)
    model, theta, header = nnet.load_checkpoint(args.checkpoint)
    if model != plan.model_spec():
        raise ConfigError("checkpoint does not match the plan's model")
    seed = header.get("seed") or 0
    train, _, _ = build_data(plan, seed)
    p = plan if args.method is None else _with(plan, pruning=args.method)
    if args.prune_all:
        p = _with(p, prune_all=True)
    mask = build_mask(p, model, theta, train, args.sparsity, seed)
    path = output_dir(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    sparsify.save_mask(path, mask, model)
    msg = f"{mask.method} mask, {mask.n_pruned} pruned -> {path}"
    if args.retune_out:
        th, _ = nnet.train(model, sparsify.apply_mask(theta, mask), train, plan.retune_config(seed),
                           mask.as_float)
        rpath = output_dir(args.retune_out)
        nnet.save_checkpoint(rpath, model, th, seed=seed, extra={"sparsity": args.sparsity})
        msg += f"; retuned model -> {rpath}"
    print(msg)
    return EXIT_OK


def _with(plan: ExperimentPlan, **kw) -> ExperimentPlan:
    from dataclasses import replace

    return replace(plan, **kw)


def _cmd_unlearn(args) -> int:
    plan = load_plan(args.config)
    model, theta, header = nnet.load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else (header.get("seed") or 0)
    train, _, split = build_data(plan, seed)
    mask = sparsify.load_mask(args.mask, model) if args.mask else None
    st = plan.unlearn_config(args.method, seed)
    cfg = st.config
    if st.search_ff_noise:
        cfg = cfg.replace(ff_noise=unlearn.search_ff_noise(model, theta, train, split, cfg, mask))
    out = unlearn.unlearn(model, theta, train, split, cfg, mask)
    path = output_dir(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    sp = float(mask.sparsity) if mask is not None else 0.0
    nnet.save_checkpoint(path, model, out.theta, seed=seed,
                         extra={"method": args.method, "rte_s": out.seconds, "sparsity": sp})
    print(f"{args.method}: {out.seconds:.3f}s -> {path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    plan = load_plan(args.config)
    model, theta, header = nnet.load_checkpoint(args.checkpoint)
    extra = header.get("extra") or {}
    seed = args.seed if args.seed is not None else (header.get("seed") or 0)
    train, test, split = build_data(plan, seed)
    rep = evalkit.evaluate(model, theta, train, test, split,
                           method=extra.get("method", "retrain"),
                           sparsity=float(extra.get("sparsity", 0.0)), seed=int(seed),
                           rte_s=float(extra.get("rte_s", 1e-9)) or 1e-9)
    if plan.scenario == "backdoor":
        rep.asr = scenarios.asr(model, theta, test, plan.backdoor())
        rep.sa = scenarios.standard_accuracy(model, theta, test)
    print(json.dumps(_jsonable(rep.to_dict()), indent=2, sort_keys=True))
    return EXIT_OK


def _floats(text: str) -> list[float]:
    return [float(v) for v in _split_list(text)]


def theory_setup(task: str, n: int, dim: int, seed: int, classes: int = 2):
    """Small convex instance for the bound sweep: logistic or ridge regression."""
    if task == "regress":
        rng = np.random.default_rng([seed, 3])
        X = rng.normal(size=(n, dim))
        w = rng.normal(size=dim)
        y = X @ w + 0.1 * rng.normal(size=n)
        return ModelSpec("linear", dim, 1, task="regress"), Dataset(X, y)
    train, _ = scenarios.make_blobs(classes, n // classes, dim, 2.0, seed, test_per_class=0)
    return ModelSpec("linear", dim, classes), train


def _cmd_theory(args) -> int:
    model, data = theory_setup(args.task, args.n, args.dim, args.data_seed)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      weight_decay=args.weight_decay)
    seeds = list(range(args.seeds))
    reps = theory.sparsity_sweep(model, data, _floats(args.sparsities), seeds, cfg,
                                 prune_all=args.prune_all)
    path = output_dir(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    theory.write_bound_csv(path, reps)
    summ = theory.sweep_summary(reps)
    for s, row in summ.items():
        print(f"sparsity {s:g}: error {row['mean_error']:.4e}  bound {row['mean_bound']:.4e}  "
              f"sigma {row['mean_sigma']:.4f}")
    levels = sorted(summ)
    rho = theory.spearman(levels, [summ[s]["mean_error"] for s in levels])
    print(f"spearman(sparsity, error) = {rho:.3f} -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsemu", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("plan", help="run a full experiment plan")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides [plan] output)")
    p.add_argument("--workers", type=int)
    p.set_defaults(fn=_cmd_plan)

    p = sub.add_parser("train", help="train the dense model of one seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("prune", help="compute a mask for a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--method", choices=PRUNERS)
    p.add_argument("--prune-all", action="store_true", help="also prune the classifier layer")
    p.add_argument("--out", required=True, help="mask path")
    p.add_argument("--retune-out", help="also retune the masked model and save it here")
    p.set_defaults(fn=_cmd_prune)

    p = sub.add_parser("unlearn", help="scrub the plan's forgetting set from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=unlearn.METHODS, required=True)
    p.add_argument("--mask")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_unlearn)

    p = sub.add_parser("eval", help="print the metrics of a checkpoint as JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("theory-sweep", help="measured unlearning error vs the sparse bound")
    p.add_argument("--task", choices=("classify", "regress"), default="classify")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--sparsities", default="0,0.5,0.9")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=1, help="1 = one sample per step")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--prune-all", action="store_true")
    p.add_argument("--out", default="theory.csv")
    p.set_defaults(fn=_cmd_theory)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
