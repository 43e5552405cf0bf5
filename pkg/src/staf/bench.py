"""Monte Carlo experiment harness.

Every experiment takes an :class:`ExperimentSpec` and returns a
:class:`ResultTable` of ``(grid_point, statistic, value, spread, trials)``
rows. Randomness for trial ``t`` at grid index ``g`` comes from
``SeedSequence(spec.seed, spawn_key=(g, t))``, so tables are identical for a
given spec no matter how trials are scheduled across workers.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import cdp
from .core import (
    DivergenceError, Field, Iterate, NumericalError, gen_gaussian_sensing,
    gen_gaussian_signal, measure, relative_error,
)
from .initialization import (
    VrOpiConfig, eigen_report, init_orthogonality_promoting, power_method,
    select_index_set, vr_opi,
)
from .refine import SUCCESS_THRESHOLD, RunTrace, SolverConfig, StepRule, run_staf

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KINDS = ("success-rate", "trace", "eigengap", "init-race", "noise", "cdp-image")

DEFAULT_GRIDS = {
    "success-rate": [round(1.0 + 0.5 * i, 10) for i in range(13)],
    "trace": [5.0],
    "eigengap": [round(1.0 + 0.2 * i, 10) for i in range(26)],
    "init-race": [2.0],
    "noise": [0.1],
    "cdp-image": [8.0],
}


@dataclass
class ExperimentSpec:
    """Everything needed to replay an experiment.

    ``grid`` holds ``m/n`` ratios, except for ``noise`` (noise levels sigma,
    at ``m_over_n``) and ``cdp-image`` (mask counts K).
    """

    kind: str
    grid: list = field(default_factory=list)
    n: int = 100
    trials: int = 50
    field: str = "real"
    step_rule: Optional[str] = None
    sampling: Optional[str] = None
    gamma: float = 0.7
    mu: Optional[float] = None
    passes: float = 1000.0
    target_rel_err: Optional[float] = None
    init_solver: str = "vr_opi"
    init_passes: int = 100
    init_fraction: float = 1.0 / 6.0
    eta: float = 1.0
    m_over_n: float = 5.0
    sigma: float = 0.0
    image: Optional[str] = None
    image_size: int = 64
    image_out: Optional[str] = None
    seed: int = 0
    workers: int = 1
    out: Optional[str] = None
    format: str = "csv"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.grid:
            self.grid = list(DEFAULT_GRIDS[self.kind])
        self.grid = [float(g) for g in self.grid]
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        Field(self.field)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def solver_config(self, step_rule: Optional[str] = None, target: float = 0.0,
                      seed=None) -> SolverConfig:
        return SolverConfig(
            gamma=self.gamma,
            step_rule=step_rule or self.step_rule or StepRule.KACZMARZ,
            mu=self.mu,
            sampling=self.sampling,
            max_passes=self.passes,
            target_rel_err=target,
            seed=seed,
        )


@dataclass(frozen=True)
class Row:
    grid_point: float
    statistic: str
    value: float
    spread: float
    trials: int


COLUMNS = ("grid_point", "statistic", "value", "spread", "trials")


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    spec: Optional[ExperimentSpec] = None
    extra: dict = field(default_factory=dict)

    def add(self, grid_point, statistic, value, spread=float("nan"), trials=0) -> None:
        self.rows.append(Row(float(grid_point), str(statistic), float(value),
                             float(spread), int(trials)))

    def get(self, grid_point, statistic) -> Row:
        for r in self.rows:
            if r.statistic == statistic and r.grid_point == float(grid_point):
                return r
        raise KeyError((grid_point, statistic))

    def series(self, statistic) -> tuple[np.ndarray, np.ndarray]:
        pts = [(r.grid_point, r.value) for r in self.rows if r.statistic == statistic]
        pts.sort()
        return np.array([p for p, _ in pts]), np.array([v for _, v in pts])

    def statistics(self) -> list:
        return sorted({r.statistic for r in self.rows})


# --- output -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(v, ".17g")


def table_to_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in table.rows:
        w.writerow([_fmt(r.grid_point), r.statistic, _fmt(r.value), _fmt(r.spread), r.trials])
    return buf.getvalue()


def table_to_json(table: ResultTable) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "spec": None if table.spec is None else table.spec.to_dict(),
        "extra": table.extra,
        "columns": list(COLUMNS),
        "rows": [dataclasses.asdict(r) for r in table.rows],
    }
    return json.dumps(doc, indent=1, allow_nan=True)


def emit(table: ResultTable, fmt: str = "csv", path=None) -> str:
    """Serialise ``table`` as CSV or JSON; write it to ``path`` when given."""
    fmt = fmt.lower()
    if fmt == "csv":
        text = table_to_csv(table)
    elif fmt == "json":
        text = table_to_json(table)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write results to {path}: {exc}") from exc
    return text


def load_table(path) -> ResultTable:
    p = Path(path)
    text = p.read_text()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        spec = None if doc.get("spec") is None else ExperimentSpec.from_dict(doc["spec"])
        rows = [Row(**r) for r in doc["rows"]]
        return ResultTable(rows, spec, doc.get("extra", {}))
    reader = csv.DictReader(io.StringIO(text))
    rows = [Row(float(r["grid_point"]), r["statistic"], float(r["value"]),
                float(r["spread"]), int(r["trials"])) for r in reader]
    return ResultTable(rows)


# --- plumbing ---------------------------------------------------------------

def trial_seed(base: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(base, spawn_key=tuple(int(k) for k in key))


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _iqr(a) -> float:
    with np.errstate(invalid="ignore"):
        q1, q3 = np.quantile(a, [0.25, 0.75])
        return float(q3 - q1)


def _pad(traces: Iterable[list], length: int) -> np.ndarray:
    out = np.empty((0, length))
    rows = []
    for t in traces:
        t = list(t)
        if len(t) < length:
            t = t + [t[-1]] * (length - len(t))
        rows.append(t[:length])
    return np.array(rows) if rows else out


def passes_to(trace: Sequence[float], threshold: float) -> float:
    """First pass index whose relative error is below ``threshold`` (inf if never)."""
    for p, e in enumerate(trace):
        if e < threshold:
            return float(p)
    return math.inf


@dataclass
class Instance:
    x: np.ndarray
    ens: object
    meas: object
    z0: Iterate
    refine_seed: np.random.SeedSequence


def make_instance(spec: ExperimentSpec, m_over_n: float, sigma: float,
                  ss: np.random.SeedSequence) -> Instance:
    """Draw signal, sensing vectors and data, and compute the initial iterate."""
    s_sig, s_ens, s_noise, s_init, s_ref = ss.spawn(5)
    n = spec.n
    m = max(1, int(round(m_over_n * n)))
    x = gen_gaussian_signal(n, spec.field, s_sig)
    ens = gen_gaussian_sensing(m, n, spec.field, s_ens)
    meas = measure(ens, x, sigma, s_noise)
    size = max(1, min(m, math.ceil(spec.init_fraction * m - 1e-9)))
    if spec.init_solver == "truth":
        z0 = Iterate(x.entries)
    elif spec.init_solver == "power":
        z0 = init_orthogonality_promoting(ens, meas, "power", size, iters=spec.init_passes, seed=s_init)
    else:
        cfg = VrOpiConfig(eta=spec.eta, epochs=max(1, spec.init_passes // 2), seed=s_init)
        z0 = init_orthogonality_promoting(ens, meas, "vr_opi", size, vr=cfg, seed=s_init)
    return Instance(x.entries, ens, meas, z0, s_ref)


def _refine(spec: ExperimentSpec, inst: Instance, rule: str, target: float) -> Optional[RunTrace]:
    cfg = spec.solver_config(rule, target, seed=np.random.default_rng(inst.refine_seed))
    try:
        return run_staf(inst.ens, inst.meas, inst.z0, cfg, truth=inst.x)
    except (DivergenceError, NumericalError) as exc:
        log.warning("trial diverged: %s", exc)
        return None


def _log_config(spec: ExperimentSpec, rules: Sequence[str]) -> dict:
    n = spec.n
    fld = Field(spec.field)
    resolved = {r: spec.solver_config(r).resolved(n, fld).to_dict() for r in rules}
    for r, c in resolved.items():
        log.info("%s: resolved solver config [%s] %s", spec.kind, r, c)
    return resolved


# --- experiments ------------------------------------------------------------

def run_success_rate(spec: ExperimentSpec) -> ResultTable:
    """Fraction of trials reaching relative error below 1e-5, per m/n."""
    if spec.kind != "success-rate":
        raise ValueError("spec.kind must be 'success-rate'")
    rule = spec.step_rule or StepRule.KACZMARZ.value
    target = SUCCESS_THRESHOLD if spec.target_rel_err is None else spec.target_rel_err
    table = ResultTable(spec=spec)
    table.extra["resolved_config"] = _log_config(spec, [rule])

    for g, ratio in enumerate(spec.grid):
        def trial(t, g=g, ratio=ratio):
            inst = make_instance(spec, ratio, spec.sigma, trial_seed(spec.seed, g, t))
            tr = _refine(spec, inst, rule, target)
            if tr is None:
                return False, math.inf, math.inf
            return tr.success, tr.rel_err_per_pass[-1], tr.passes_used

        res = _map(trial, list(range(spec.trials)), spec.workers)
        ok = np.array([r[0] for r in res], dtype=float)
        errs = np.array([r[1] for r in res])
        passes = np.array([r[2] for r in res])
        k = spec.trials
        rate = float(ok.mean())
        table.add(ratio, "success_rate", rate, math.sqrt(rate * (1 - rate) / k), k)
        table.add(ratio, "median_rel_err", float(np.median(errs)), _iqr(errs), k)
        table.add(ratio, "median_passes", float(np.median(passes)), _iqr(passes), k)
        log.info("success-rate m/n=%g: %.3f", ratio, rate)
    return table


def _trace_experiment(spec: ExperimentSpec, points: list, rules: list) -> ResultTable:
    table = ResultTable(spec=spec)
    table.extra["resolved_config"] = _log_config(spec, rules)
    target = 0.0 if spec.target_rel_err is None else spec.target_rel_err
    length = int(math.ceil(spec.passes)) + 1
    for g, (label, ratio, sigma) in enumerate(points):
        def trial(t, g=g, ratio=ratio, sigma=sigma):
            inst = make_instance(spec, ratio, sigma, trial_seed(spec.seed, g, t))
            return {r: _refine(spec, inst, r, target) for r in rules}

        res = _map(trial, list(range(spec.trials)), spec.workers)
        for rule in rules:
            runs = [r[rule] for r in res]
            traces = [tr.rel_err_per_pass if tr is not None else [math.inf] for tr in runs]
            T = _pad(traces, length)
            k = T.shape[0]
            name = f"{rule}@{label}"
            med = np.median(T, axis=0)
            q1, q3 = np.quantile(T, [0.25, 0.75], axis=0)
            for p in range(length):
                table.add(p, f"{name}.median", med[p], q3[p] - q1[p], k)
                table.add(p, f"{name}.q25", q1[p], float("nan"), k)
                table.add(p, f"{name}.q75", q3[p], float("nan"), k)
            finals = T[:, -1]
            hits = np.array([passes_to(t, SUCCESS_THRESHOLD) for t in traces])
            tail = max(0, length - 101)
            plateau = np.abs(T[:, -1] - T[:, tail]) / np.where(T[:, tail] > 0, T[:, tail], 1.0)
            table.add(length - 1, f"{name}.final_median", float(np.median(finals)), _iqr(finals), k)
            table.add(length - 1, f"{name}.passes_to_1e-5_median", float(np.median(hits)),
                      float("nan"), k)
            table.add(length - 1, f"{name}.plateau_change_median", float(np.median(plateau)),
                      float("nan"), k)
    return table


def run_convergence_trace(spec: ExperimentSpec) -> ResultTable:
    """Median and quartiles of relative error per pass, for each step rule."""
    if spec.kind != "trace":
        raise ValueError("spec.kind must be 'trace'")
    rules = [spec.step_rule] if spec.step_rule else ["constant", "kaczmarz"]
    points = [(f"m/n={r:g}", r, spec.sigma) for r in spec.grid]
    return _trace_experiment(spec, points, rules)


def run_noise(spec: ExperimentSpec) -> ResultTable:
    """Relative-error traces under additive amplitude noise, one series per sigma."""
    if spec.kind != "noise":
        raise ValueError("spec.kind must be 'noise'")
    rules = [spec.step_rule] if spec.step_rule else ["constant", "kaczmarz"]
    points = [(f"sigma={s:g}", spec.m_over_n, s) for s in spec.grid]
    return _trace_experiment(spec, points, rules)


def run_eigengap_sweep(spec: ExperimentSpec) -> ResultTable:
    """Mean and spread of the normalised eigengap of the initialization matrix."""
    if spec.kind != "eigengap":
        raise ValueError("spec.kind must be 'eigengap'")
    table = ResultTable(spec=spec)
    for g, ratio in enumerate(spec.grid):
        def trial(t, g=g, ratio=ratio):
            s_sig, s_ens = trial_seed(spec.seed, g, t).spawn(2)
            n = spec.n
            m = max(1, int(round(ratio * n)))
            x = gen_gaussian_signal(n, spec.field, s_sig)
            ens = gen_gaussian_sensing(m, n, spec.field, s_ens)
            meas = measure(ens, x)
            size = max(1, min(m, math.ceil(spec.init_fraction * m - 1e-9)))
            rep = eigen_report(select_index_set(meas, ens, size))
            return rep.delta if rep.defined else math.nan, rep.lambda1, rep.lambda2

        res = np.array(_map(trial, list(range(spec.trials)), spec.workers), dtype=float)
        k = spec.trials
        table.add(ratio, "delta", float(np.nanmean(res[:, 0])), float(np.nanstd(res[:, 0])), k)
        table.add(ratio, "lambda1", float(res[:, 1].mean()), float(res[:, 1].std()), k)
        table.add(ratio, "lambda2", float(res[:, 2].mean()), float(res[:, 2].std()), k)
    return table


def init_race_instance(spec: ExperimentSpec, ratio: float, ss: np.random.SeedSequence) -> dict:
    """Power method versus the variance-reduced solver on one instance.

    Returns per-pass errors for both solvers under two metrics: the Rayleigh
    quotient gap ``1 - u^H Y u / lambda1`` and the angle ``1 - |<u, v1>|^2``.
    """
    s_sig, s_ens, s_start, s_vr = ss.spawn(4)
    n = spec.n
    m = max(1, int(round(ratio * n)))
    x = gen_gaussian_signal(n, spec.field, s_sig)
    ens = gen_gaussian_sensing(m, n, spec.field, s_ens)
    meas = measure(ens, x)
    size = max(1, min(m, math.ceil(spec.init_fraction * m - 1e-9)))
    prob = select_index_set(meas, ens, size)
    rep = eigen_report(prob)
    v1 = rep.v1
    u0 = np.random.default_rng(s_start).standard_normal(n)
    if prob.is_complex:
        u0 = u0 + 1j * np.random.default_rng(s_start.spawn(1)[0]).standard_normal(n)
    u0 /= np.linalg.norm(u0)

    def metrics(u):
        ray = float(np.linalg.norm(prob.conj_rows @ u) ** 2 / prob.size)
        return max(1.0 - ray / rep.lambda1, 0.0), max(1.0 - abs(np.vdot(v1, u)) ** 2, 0.0)

    out = {"delta": rep.delta, "power": [], "vr_opi": []}
    power_method(prob, spec.init_passes, u0=u0,
                 callback=lambda u, p: out["power"].append((p, *metrics(u))))
    cfg = VrOpiConfig(eta=spec.eta, epochs=max(1, spec.init_passes // 2), seed=s_vr)
    vr_opi(prob, cfg, u0=u0, callback=lambda u, p: out["vr_opi"].append((p, *metrics(u))))
    return out


def run_init_race(spec: ExperimentSpec) -> ResultTable:
    """Per-pass eigenvector error for the two initialization solvers."""
    if spec.kind != "init-race":
        raise ValueError("spec.kind must be 'init-race'")
    table = ResultTable(spec=spec)
    floor = 1e-16
    for g, ratio in enumerate(spec.grid):
        res = _map(lambda t: init_race_instance(spec, ratio, trial_seed(spec.seed, g, t)),
                   list(range(spec.trials)), spec.workers)
        k = len(res)
        for solver in ("power", "vr_opi"):
            passes = [p for p, _, _ in res[0][solver]]
            ray = np.array([[e for _, e, _ in r[solver]] for r in res])
            ang = np.array([[a for _, _, a in r[solver]] for r in res])
            lr = np.log10(np.maximum(ray, floor))
            la = np.log10(np.maximum(ang, floor))
            for j, p in enumerate(passes):
                table.add(p, f"{solver}@m/n={ratio:g}.log10_rayleigh_gap_median",
                          float(np.median(lr[:, j])), _iqr(lr[:, j]), k)
                table.add(p, f"{solver}@m/n={ratio:g}.log10_angle_err_median",
                          float(np.median(la[:, j])), _iqr(la[:, j]), k)
            hits = []
            for row in ang:
                idx = np.nonzero(row <= 1e-6)[0]
                hits.append(passes[idx[0]] if idx.size else math.inf)
            table.add(ratio, f"{solver}.passes_to_1e-6_median", float(np.median(hits)), float("nan"), k)
        deltas = np.array([r["delta"] for r in res], dtype=float)
        table.add(ratio, "delta", float(deltas.mean()), float(deltas.std()), k)
    return table


# --- coded diffraction images -----------------------------------------------

def gradient_image(size: int = 64) -> np.ndarray:
    """Smooth synthetic RGB test image, ``uint8`` of shape ``(size, size, 3)``."""
    t = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    r = 255 * xx
    g = 255 * yy
    b = 20 + 200 * (0.5 + 0.5 * np.sin(3 * np.pi * xx * yy))
    return np.clip(np.rint(np.stack([r, g, b], axis=-1)), 0, 255).astype(np.uint8)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(arr: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def to_display(z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Global-phase-corrected real part of ``z``, rounded into ``[0, 255]``."""
    from .core import align_phase

    return np.clip(np.rint(align_phase(z, x).real), 0, 255).astype(np.uint8)


def recover_channel(x: np.ndarray, K: int, ss: np.random.SeedSequence, spec: ExperimentSpec):
    s_mask, s_init, s_ref = ss.spawn(3)
    xv = np.asarray(x, dtype=np.complex128)
    masks = cdp.gen_masks(xv.size, K, s_mask)
    meas = cdp.cdp_forward(xv, masks)
    z0 = cdp.cdp_init(masks, meas, spec.init_solver if spec.init_solver != "truth" else "vr_opi",
                      size=math.ceil(spec.init_fraction * xv.size * K - 1e-9),
                      passes=spec.init_passes, eta=spec.eta, seed=s_init)
    if spec.init_solver == "truth":
        z0 = Iterate(xv)
    target = SUCCESS_THRESHOLD if spec.target_rel_err is None else spec.target_rel_err
    mu = 1.0 if spec.mu is None else spec.mu
    try:
        tr = cdp.run_block_staf(masks, meas, z0, mu=mu, gamma=spec.gamma,
                                max_passes=int(spec.passes), target_rel_err=target,
                                truth=xv, seed=s_ref)
    except (DivergenceError, NumericalError) as exc:
        log.warning("cdp channel diverged: %s", exc)
        return None, math.inf, math.inf, relative_error(z0, xv)
    return tr.final.z, tr.rel_err_per_pass[-1], tr.passes_used, tr.rel_err_per_pass[0]


def run_cdp_image(spec: ExperimentSpec) -> ResultTable:
    """Per-channel CDP recovery of an RGB image; writes the first trial's result as PNG."""
    if spec.kind != "cdp-image":
        raise ValueError("spec.kind must be 'cdp-image'")
    img = read_png(spec.image) if spec.image else gradient_image(spec.image_size)
    h, w, _ = img.shape
    channels = [img[:, :, c].reshape(-1).astype(np.float64) for c in range(3)]
    table = ResultTable(spec=spec)
    table.extra["image_shape"] = [h, w, 3]
    for g, Kf in enumerate(spec.grid):
        K = int(Kf)

        def trial(t, g=g, K=K):
            return [recover_channel(channels[c], K, trial_seed(spec.seed, g, t, c), spec)
                    for c in range(3)]

        res = _map(trial, list(range(spec.trials)), spec.workers)
        k = len(res)
        all_ok = []
        for c in range(3):
            errs = np.array([r[c][1] for r in res])
            passes = np.array([r[c][2] for r in res])
            init_errs = np.array([r[c][3] for r in res])
            table.add(K, f"channel{c}.rel_err_median", float(np.median(errs)), _iqr(errs), k)
            table.add(K, f"channel{c}.rel_err_max", float(np.max(errs)), float("nan"), k)
            table.add(K, f"channel{c}.init_rel_err_median", float(np.median(init_errs)),
                      _iqr(init_errs), k)
            table.add(K, f"channel{c}.passes_median", float(np.median(passes)), _iqr(passes), k)
            table.add(K, f"channel{c}.success_rate", float(np.mean(errs < SUCCESS_THRESHOLD)),
                      float("nan"), k)
        for r in res:
            all_ok.append(all(ch[1] < SUCCESS_THRESHOLD for ch in r))
        table.add(K, "all_channels.success_rate", float(np.mean(all_ok)), float("nan"), k)

        out_png = spec.image_out
        if out_png is None and spec.out:
            out_png = str(Path(spec.out).with_suffix("")) + f"_K{K}.png"
        if out_png is not None:
            rec = np.zeros_like(img)
            for c in range(3):
                z = res[0][c][0]
                if z is not None:
                    rec[:, :, c] = to_display(z, channels[c]).reshape(h, w)
            write_png(rec, out_png)
            table.extra.setdefault("recovered_images", []).append(out_png)
    return table


RUNNERS = {
    "success-rate": run_success_rate,
    "trace": run_convergence_trace,
    "eigengap": run_eigengap_sweep,
    "init-race": run_init_race,
    "noise": run_noise,
    "cdp-image": run_cdp_image,
}


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    return RUNNERS[spec.kind](spec)
