"""Configuration-driven experiment runner.

A YAML config names a model snapshot, dataset files, method specs and
scenario grid; ``run_matrix`` quantizes a fresh copy of the model per
(method, bits) cell, evaluates every requested metric at every shot
count, and always emits FP 16/16 baseline rows first.  Cell failures
become failed rows (the run continues), mirroring benchmark tables
whose unusable calibration sets show up as "-" cells.

Calibration is carved once per dataset with the configured policy, so
a scenario (calib=A, test=B) pairs A's calibration split with B's
carved-out evaluation remainder; every scenario testing on B sees the
same items.

Reports exclude wall_time (it is kept in the results files), so a
rerun with equal provenance produces byte-identical report bytes.
"""

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import formats
from .calibration import (
    SHIFT_KINDS,
    CalibrationPolicy,
    ScenarioSpec,
    build_calibration_set,
    enumerate_scenarios,
)
from .errors import ConfigValidationError, MqntError
from .evaluation import PromptTemplate, mc_accuracy, perplexity
from .grids import ACT_BITS, WEIGHT_BITS
from .quantizers import METHODS, MethodSpec, compose_quantize

BASELINE_METHOD = "fp16"
_METRICS = ("ppl", "accuracy")
_NORMALIZATIONS = ("sum", "per_token")


@dataclass
class RunResult:
    method: str
    w_bits: int
    a_bits: int
    calib_id: str
    test_id: str
    shift: str
    iid: bool
    shots: int
    metric: str
    value: object = None
    n_items: int = 0
    status: str = "ok"
    reason: str = ""
    wall_time: float = 0.0
    provenance: str = ""

    def sort_key(self):
        return (
            self.shift, self.test_id, self.calib_id,
            0 if self.method == BASELINE_METHOD else 1,
            self.method, self.w_bits, self.a_bits, self.shots, self.metric,
        )

    def to_dict(self):
        return {
            "method": self.method, "w_bits": self.w_bits, "a_bits": self.a_bits,
            "calib_id": self.calib_id, "test_id": self.test_id,
            "shift": self.shift, "iid": self.iid, "shots": self.shots,
            "metric": self.metric, "value": self.value, "n_items": self.n_items,
            "status": self.status, "reason": self.reason,
            "wall_time": self.wall_time, "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EvalSettings:
    metrics: list = field(default_factory=lambda: ["accuracy"])
    normalization: str = "per_token"
    context_len: object = None
    shots: list = field(default_factory=lambda: [0])
    max_items: object = None


@dataclass
class RunConfig:
    model_path: str
    dataset_paths: list
    methods: list
    scenario_grid: list = field(default_factory=list)   # shift kinds
    scenario_list: list = field(default_factory=list)   # explicit dicts
    eval: EvalSettings = field(default_factory=EvalSettings)
    calibration: CalibrationPolicy = field(default_factory=CalibrationPolicy)
    output_dir: str = "out"
    seed: int = 42
    raw: dict = field(default_factory=dict, repr=False)


def provenance_hash(cfg):
    """First 8 bytes of sha256 over the canonical config + seed."""
    doc = json.dumps({"config": cfg.raw, "seed": cfg.seed},
                     sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:16]


# ----------------------------------------------------------- validation

def _check_methods(raw_methods, problems):
    methods = []
    if not isinstance(raw_methods, list) or not raw_methods:
        problems.append("methods: must be a nonempty list")
        return methods
    allowed = {"method", "w_bits", "a_bits", "group_size", "scheme",
               "sequential_mode", "method_params"}
    for i, entry in enumerate(raw_methods):
        if not isinstance(entry, dict) or "method" not in entry:
            problems.append(f"methods[{i}]: needs a 'method' name")
            continue
        unknown = sorted(set(entry) - allowed)
        if unknown:
            problems.append(f"methods[{i}]: unknown keys {unknown}")
            continue
        name = entry["method"]
        if name not in METHODS:
            problems.append(f"methods[{i}].method: unknown method {name!r}")
            continue
        if "w_bits" in entry and entry["w_bits"] not in WEIGHT_BITS:
            problems.append(
                f"methods[{i}].w_bits: {entry['w_bits']} not in {sorted(WEIGHT_BITS)}")
            continue
        if "a_bits" in entry and entry["a_bits"] not in ACT_BITS:
            problems.append(
                f"methods[{i}].a_bits: {entry['a_bits']} not in {sorted(ACT_BITS)}")
            continue
        try:
            methods.append(MethodSpec.from_dict(entry))
        except (ValueError, TypeError) as e:
            problems.append(f"methods[{i}]: {e}")
    return methods


def _check_scenarios(raw, problems):
    grid, explicit = [], []
    if raw is None:
        grid = ["cross_dataset"]
        return grid, explicit
    if isinstance(raw, dict):
        kinds = raw.get("grid", [])
        if not kinds:
            problems.append("scenarios.grid: must name at least one shift kind")
        for k in kinds:
            if k not in SHIFT_KINDS:
                problems.append(f"scenarios.grid: unknown shift kind {k!r}")
            else:
                grid.append(k)
        return grid, explicit
    if isinstance(raw, list):
        if not raw:
            problems.append("scenarios: must be nonempty")
        for i, s in enumerate(raw):
            if not isinstance(s, dict) or "calib" not in s or "test" not in s:
                problems.append(f"scenarios[{i}]: needs 'calib' and 'test' dataset ids")
                continue
            shift = s.get("shift", "iid" if s["calib"] == s["test"] else "cross_dataset")
            if shift not in SHIFT_KINDS:
                problems.append(f"scenarios[{i}].shift: unknown shift kind {shift!r}")
                continue
            explicit.append({"calib": s["calib"], "test": s["test"], "shift": shift})
        return grid, explicit
    problems.append("scenarios: must be a list or a {grid: [...]} mapping")
    return grid, explicit


def _check_eval(raw, problems):
    ev = EvalSettings()
    if raw is None:
        return ev
    if not isinstance(raw, dict):
        problems.append("eval: must be a mapping")
        return ev
    metrics = raw.get("metrics", ev.metrics)
    if not isinstance(metrics, list) or not metrics:
        problems.append("eval.metrics: must be a nonempty list")
    else:
        for m in metrics:
            if m not in _METRICS:
                problems.append(f"eval.metrics: unknown metric {m!r}")
        ev.metrics = [m for m in metrics if m in _METRICS]
    norm = raw.get("normalization", ev.normalization)
    if norm not in _NORMALIZATIONS:
        problems.append(f"eval.normalization: {norm!r} not in {_NORMALIZATIONS}")
    else:
        ev.normalization = norm
    cl = raw.get("context_len")
    if cl is not None:
        if not isinstance(cl, int) or cl < 2:
            problems.append("eval.context_len: must be an integer >= 2")
        else:
            ev.context_len = cl
    shots = raw.get("shots", ev.shots)
    if not isinstance(shots, list) or not shots or not all(
            isinstance(s, int) and s >= 0 for s in shots):
        problems.append("eval.shots: must be a nonempty list of integers >= 0")
    else:
        ev.shots = shots
    mi = raw.get("max_items")
    if mi is not None:
        if not isinstance(mi, int) or mi < 1:
            problems.append("eval.max_items: must be an integer >= 1")
        else:
            ev.max_items = mi
    return ev


def _check_calibration(raw, seed, problems):
    policy = CalibrationPolicy(seed=seed)
    if raw is None:
        return policy
    if not isinstance(raw, dict):
        problems.append("calibration: must be a mapping")
        return policy
    try:
        policy = CalibrationPolicy(
            mode=raw.get("mode", "carve_from_test"),
            n=raw.get("n", 128),
            reserve=raw.get("reserve", 300),
            seed=raw.get("seed", seed),
        )
    except ValueError as e:
        problems.append(f"calibration: {e}")
    return policy


def validate_config(text, base_dir="."):
    """Parse and validate a YAML config; every violation is reported."""
    problems = []
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigValidationError([f"config is not valid YAML: {e}"])
    if not isinstance(raw, dict):
        raise ConfigValidationError(["config must be a YAML mapping"])

    seed = raw.get("seed", 42)
    if not isinstance(seed, int):
        problems.append("seed: must be an integer")
        seed = 42

    model_path = raw.get("model")
    if not model_path:
        problems.append("model: required")
    else:
        model_path = os.path.join(base_dir, str(model_path))
        if not os.path.exists(model_path):
            problems.append(f"model: file not found: {model_path}")

    dataset_paths = []
    raw_ds = raw.get("datasets")
    if not isinstance(raw_ds, list) or not raw_ds:
        problems.append("datasets: must be a nonempty list of paths")
    else:
        for p in raw_ds:
            full = os.path.join(base_dir, str(p))
            if not os.path.exists(full):
                problems.append(f"datasets: file not found: {full}")
            dataset_paths.append(full)

    methods = _check_methods(raw.get("methods"), problems)
    grid, explicit = _check_scenarios(raw.get("scenarios"), problems)
    ev = _check_eval(raw.get("eval"), problems)
    policy = _check_calibration(raw.get("calibration"), seed, problems)

    output_dir = os.path.join(base_dir, str(raw.get("output_dir", "out")))

    if problems:
        raise ConfigValidationError(problems)
    return RunConfig(
        model_path=model_path, dataset_paths=dataset_paths, methods=methods,
        scenario_grid=grid, scenario_list=explicit, eval=ev,
        calibration=policy, output_dir=output_dir, seed=seed, raw=raw,
    )


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return validate_config(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


# ------------------------------------------------------------ run matrix

def _scenario_key(s):
    return (
        s.calib_source.dataset_id, s.calib_source.subject_tag,
        s.test_source.dataset_id, s.test_source.subject_tag, s.shift,
    )


def _source_key(handle):
    return (handle.dataset_id, handle.subject_tag)


def _build_scenarios(cfg, handles):
    by_id = {h.dataset_id: h for h in handles}
    scenarios = []
    if cfg.scenario_grid:
        scenarios.extend(enumerate_scenarios(handles, cfg.scenario_grid))
    for s in cfg.scenario_list:
        missing = [i for i in (s["calib"], s["test"]) if i not in by_id]
        if missing:
            raise ConfigValidationError(
                [f"scenario names unknown dataset id {i!r}" for i in missing])
        scenarios.append(ScenarioSpec(by_id[s["calib"]], by_id[s["test"]], s["shift"]))
    # the row key (method, bits, scenario, shots, metric) must be unique
    seen, unique = set(), []
    for s in scenarios:
        k = _scenario_key(s)
        if k not in seen:
            seen.add(k)
            unique.append(s)
    return unique


def _evaluate(model, test_handle, metric, shots, ev):
    """One metric on one test source; returns (value, n_items)."""
    records = test_handle.records
    if ev.max_items is not None:
        records = records[: ev.max_items]
    if metric == "ppl":
        stream = np.concatenate([r.tokens for r in records])
        mv = perplexity(model, stream, context_len=ev.context_len)
        return mv.value, mv.n_items
    if not test_handle.choices:
        raise MqntError(f"dataset {test_handle.dataset_id} has no choices; cannot score accuracy")
    template = PromptTemplate.load(test_handle.task)
    mv = mc_accuracy(
        model, records, template, test_handle.choices,
        shots=shots, exemplars=test_handle.exemplar_pool,
        normalization=ev.normalization, context_len=ev.context_len,
    )
    return mv.value, mv.n_items


def _metric_shot_pairs(ev):
    # ppl does not depend on exemplar count; emit it once at shots=0
    pairs = []
    for metric in ev.metrics:
        if metric == "ppl":
            pairs.append((metric, 0))
        else:
            pairs.extend((metric, s) for s in ev.shots)
    return pairs


def run_matrix(cfg):
    """Execute the full (method x bits x scenario x shots x metric) grid."""
    base_model = formats.load_model(cfg.model_path)
    handles = [formats.load_dataset(p) for p in cfg.dataset_paths]
    scenarios = _build_scenarios(cfg, handles)
    prov = provenance_hash(cfg)
    pairs = _metric_shot_pairs(cfg.eval)

    # carve each source once: calibration set + held-out remainder
    carved = {}
    carve_errors = {}
    for s in scenarios:
        for h in (s.calib_source, s.test_source):
            key = _source_key(h)
            if key in carved or key in carve_errors:
                continue
            try:
                carved[key] = build_calibration_set(h, cfg.calibration)
            except MqntError as e:
                carve_errors[key] = f"{type(e).__name__}: {e}"

    def scenario_fields(s):
        return {
            "calib_id": s.calib_source.dataset_id, "test_id": s.test_source.dataset_id,
            "shift": s.shift, "iid": s.shift == "iid", "provenance": prov,
        }

    results = []

    # FP baselines, one evaluation per distinct test source, rows per scenario
    baseline_cache = {}
    for s in scenarios:
        key = _source_key(s.test_source)
        if key in baseline_cache:
            continue
        rows = {}
        t0 = time.perf_counter()
        if key in carve_errors:
            for metric, shot in pairs:
                rows[(metric, shot)] = (None, 0, "failed", carve_errors[key])
        else:
            remainder = carved[key][1]
            for metric, shot in pairs:
                try:
                    value, n = _evaluate(base_model, remainder, metric, shot, cfg.eval)
                    rows[(metric, shot)] = (value, n, "ok", "")
                except (MqntError, ValueError) as e:
                    rows[(metric, shot)] = (None, 0, "failed", f"{type(e).__name__}: {e}")
        baseline_cache[key] = (rows, time.perf_counter() - t0)
    for s in scenarios:
        rows, elapsed = baseline_cache[_source_key(s.test_source)]
        for (metric, shot), (value, n, status, reason) in rows.items():
            results.append(RunResult(
                method=BASELINE_METHOD, w_bits=16, a_bits=16, shots=shot,
                metric=metric, value=value, n_items=n, status=status,
                reason=reason, wall_time=elapsed, **scenario_fields(s)))

    def run_cell(s, spec):
        out = []
        t0 = time.perf_counter()
        base = {
            "method": spec.method, "w_bits": spec.cfg.w_bits,
            "a_bits": spec.cfg.a_bits, **scenario_fields(s),
        }
        calib_key = _source_key(s.calib_source)
        test_key = _source_key(s.test_source)
        reason = carve_errors.get(calib_key) or carve_errors.get(test_key)
        model = None
        if reason is None:
            calib_set = carved[calib_key][0]
            try:
                model = base_model.copy()
                compose_quantize(model, calib_set.sequences, spec)
            except (MqntError, ValueError) as e:
                reason = f"{type(e).__name__}: {e}"
        if reason is not None:
            elapsed = time.perf_counter() - t0
            return [RunResult(shots=shot, metric=metric, status="failed",
                              reason=reason, wall_time=elapsed, **base)
                    for metric, shot in pairs]
        remainder = carved[test_key][1]
        for metric, shot in pairs:
            try:
                value, n = _evaluate(model, remainder, metric, shot, cfg.eval)
                out.append(RunResult(shots=shot, metric=metric, value=value,
                                     n_items=n, **base))
            except (MqntError, ValueError) as e:
                out.append(RunResult(shots=shot, metric=metric, status="failed",
                                     reason=f"{type(e).__name__}: {e}", **base))
        elapsed = time.perf_counter() - t0
        for r in out:
            r.wall_time = elapsed
        return out

    cells = [(s, spec) for s in scenarios for spec in cfg.methods]
    workers = int(os.environ.get("MQNT_WORKERS", "0")) or min(4, os.cpu_count() or 1)
    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(lambda c: run_cell(*c), cells):
                results.extend(rows)
    else:
        for c in cells:
            results.extend(run_cell(*c))

    results.sort(key=RunResult.sort_key)
    return results


def expected_row_count(n_methods, n_scenarios, n_shots, n_acc_metrics, n_ppl_metrics=0):
    """Row-count law for a full grid: (methods + baseline) x scenarios x
    (accuracy metrics x shot settings + ppl metrics)."""
    per_cell = n_acc_metrics * n_shots + n_ppl_metrics
    return (n_methods + 1) * n_scenarios * per_cell


# --------------------------------------------------------------- reports

_REPORT_COLUMNS = tuple(c for c in formats.RESULT_COLUMNS if c != "wall_time")


def _fmt_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(results, format="csv"):
    """Deterministic report bytes; wall_time never appears."""
    if not results:
        raise ValueError("no results to report")
    rows = sorted(results, key=RunResult.sort_key)
    if format == "csv":
        lines = [",".join(_REPORT_COLUMNS)]
        for r in rows:
            d = r.to_dict()
            cells = []
            for c in _REPORT_COLUMNS:
                text = _fmt_value(d[c]) if not isinstance(d[c], bool) else ("true" if d[c] else "false")
                if any(ch in text for ch in ",\"\n"):
                    text = '"' + text.replace('"', '""') + '"'
                cells.append(text)
            lines.append(",".join(cells))
        return ("\n".join(lines) + "\n").encode("utf-8")
    if format == "json":
        docs = []
        for r in rows:
            d = r.to_dict()
            d.pop("wall_time")
            docs.append(d)
        return (json.dumps({"results": docs}, sort_keys=True,
                           separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")
    if format == "markdown_table":
        return _markdown_report(rows)
    raise ValueError(f"unknown report format {format!r}")


def _markdown_report(rows):
    """Pivot: one table per (metric, method, bits, shots); test datasets
    down, calibration datasets across, iid cells tagged, per-row max in
    bold (all tied cells bolded)."""
    groups = {}
    for r in rows:
        if r.status != "ok":
            continue
        groups.setdefault((r.metric, r.method, r.w_bits, r.a_bits, r.shots), []).append(r)
    out = []
    for key in sorted(groups):
        metric, method, w_bits, a_bits, shots = key
        grows = groups[key]
        calib_ids = sorted({g.calib_id for g in grows})
        test_ids = sorted({g.test_id for g in grows})
        cell = {(g.test_id, g.calib_id): g for g in grows}
        out.append(f"## {metric} / {method} W{w_bits}A{a_bits} ({shots}-shot)\n")
        out.append("| test \\ calib | " + " | ".join(calib_ids) + " |")
        out.append("|" + "---|" * (len(calib_ids) + 1))
        for tid in test_ids:
            vals = {cid: cell.get((tid, cid)) for cid in calib_ids}
            present = [g.value for g in vals.values() if g is not None]
            best = max(present) if present else None
            line = [tid]
            for cid in calib_ids:
                g = vals[cid]
                if g is None:
                    line.append("")
                    continue
                text = f"{g.value:.6g}"
                if best is not None and g.value == best:
                    text = f"**{text}**"
                if g.iid:
                    text += " (iid)"
                line.append(text)
            out.append("| " + " | ".join(line) + " |")
        out.append("")
    return ("\n".join(out) + "\n").encode("utf-8")
