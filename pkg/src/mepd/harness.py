"""Monte Carlo symbol-error-rate engine and experiment drivers.

Vectors are simulated in fixed-size work batches. Batch ``j`` at SNR ``s``
draws everything from ``substream(seed, snr_key(s), j)``, and stop rules are
checked on the in-order running totals after each batch, so a run gives
the same counts for any number of worker processes.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from statistics import NormalDist

import numpy as np

from .channel import ChannelConfig, gen_correlated, gen_iid_rayleigh, gen_noise, gen_symbols, substream
from .detect import (
    MepdParams,
    detect_epd,
    detect_lmmse,
    detect_mepd,
    detect_ml,
    detect_mmse_sic,
)
from .learn import ParamTable, fmt_number, lookup, snr_key
from .model import (
    ConfigurationError,
    build_constellation,
    hard_decision,
    modulation_order,
    real_matrix,
    real_vector,
    snr_to_complex_noise_power,
    symbol_errors,
)

log = logging.getLogger(__name__)

DETECTORS = ("lmmse", "mmse-sic", "epd", "mepd", "ml")
CSV_HEADER = ["snr_db", "symbols_tested", "symbol_errors", "ser", "trial_failures", "wall_time_s"]


def parse_channel(spec: str | None) -> float | None:
    """``"iid"`` -> None, ``"corr:K"`` -> K."""
    if spec is None or spec == "iid":
        return None
    if spec.startswith("corr:"):
        try:
            K = float(spec[5:])
        except ValueError:
            raise ConfigurationError(f"bad channel spec {spec!r}") from None
        if K < 1:
            raise ConfigurationError("condition number must be >= 1")
        return K
    raise ConfigurationError(f"unknown channel kind {spec!r}")


@dataclass
class SimConfig:
    n_t: int
    n_r: int
    modulation: int | str = 16
    detector: str = "epd"
    iters: int = 5
    params: MepdParams | ParamTable | None = None
    snrs: tuple = ()
    channel: str = "iid"
    max_errors: int = 2000
    max_pairs: int = 100_000
    seed: int = 0
    workers: int = 1
    batch_size: int = 100
    snr_devi: float = 0.0
    normalize: str | None = None

    def __post_init__(self):
        self.modulation = modulation_order(self.modulation)
        if self.detector not in DETECTORS:
            raise ConfigurationError(f"unknown detector {self.detector!r}")
        if self.max_errors < 1 or self.max_pairs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigurationError("stop rules, batch size and workers must be positive")
        if self.iters < 1:
            raise ConfigurationError("iters must be >= 1")
        self.snrs = tuple(sorted(float(s) for s in self.snrs))
        self.correlation = parse_channel(self.channel)
        ChannelConfig(self.n_t, self.n_r, self.correlation, self.seed, self.normalize)

    def echo(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "params"}
        if isinstance(self.params, MepdParams):
            d["params"] = repr(self.params)
        elif isinstance(self.params, ParamTable):
            d["params"] = f"table({len(self.params)} records, L={self.params.L})"
        return d


@dataclass
class SerPoint:
    snr_db: float
    symbols_tested: int
    symbol_errors: int
    ser: float
    trial_failures: int
    wall_time: float = 0.0

    def counts(self) -> tuple:
        """Everything except the wall time."""
        return (self.snr_db, self.symbols_tested, self.symbol_errors, self.ser, self.trial_failures)

    def interval(self, confidence: float = 0.95) -> tuple[float, float]:
        return wilson_interval(self.symbol_errors, self.symbols_tested, confidence)


@dataclass
class SerCurve:
    config: dict = field(default_factory=dict)
    points: list[SerPoint] = field(default_factory=list)

    @property
    def snrs(self):
        return [p.snr_db for p in self.points]

    @property
    def sers(self):
        return [p.ser for p in self.points]

    def at(self, snr_db: float) -> SerPoint:
        for p in self.points:
            if p.snr_db == snr_db:
                return p
        raise KeyError(snr_db)


# --- statistics ----------------------------------------------------------------


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        return 0.0, 1.0
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = k / n
    den = 1 + z * z / n
    center = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    # rounding can push a bound past p itself at k = 0 or k = n
    return max(0.0, min(p, center - half)), min(1.0, max(p, center + half))


def separated_below(a: SerPoint, b: SerPoint, confidence: float = 0.95) -> bool:
    """True when ``a``'s interval lies entirely below ``b``'s."""
    return a.interval(confidence)[1] < b.interval(confidence)[0]


def snr_at_ser(curve: SerCurve, target: float = 1e-2) -> float:
    """SNR where the curve crosses ``target``, interpolating log10(SER) linearly in dB.

    NaN if the curve does not bracket the target.
    """
    pts = [p for p in curve.points if p.ser > 0]
    for a, b in zip(pts, pts[1:]):
        if (a.ser - target) * (b.ser - target) <= 0 and a.ser != b.ser:
            la, lb, lt = math.log10(a.ser), math.log10(b.ser), math.log10(target)
            return a.snr_db + (lt - la) * (b.snr_db - a.snr_db) / (lb - la)
    return math.nan


# --- detector dispatch ---------------------------------------------------------


def mismatch_keys(table: ParamTable, cfg: SimConfig, snr_db: float) -> list[float]:
    """Grid keys loaded with equal probability under an SNR deviation of ``snr_devi``.

    ``floor(devi / 2)`` neighbours on each side of the matched key (2 dB grid).
    """
    keys = table.snr_keys(cfg.n_t, cfg.n_r, cfg.modulation)
    if not keys:
        raise ConfigurationError("parameter table has no records for this configuration")
    center = min(range(len(keys)), key=lambda i: (abs(keys[i] - snr_db), keys[i]))
    m = int(math.floor(cfg.snr_devi / 2))
    lo, hi = center - m, center + m
    if lo < 0 or hi >= len(keys):
        raise ConfigurationError(
            f"table keys {keys} do not cover {2 * m + 1} records around {snr_db} dB"
        )
    return keys[lo : hi + 1]


def _detect(cfg: SimConfig, const, snr_db, H, y, nv, rng):
    det = cfg.detector
    if det == "lmmse":
        return detect_lmmse(H, y, nv, const)
    if det == "mmse-sic":
        return detect_mmse_sic(H, y, nv, const)
    if det == "ml":
        return detect_ml(H, y, const)
    if det == "epd":
        return detect_epd(H, y, nv, const, cfg.iters)
    # mepd
    src = cfg.params
    if src is None:
        return detect_mepd(H, y, nv, const, MepdParams.mepd_point(cfg.iters, const))
    if isinstance(src, MepdParams):
        return detect_mepd(H, y, nv, const, src)
    if cfg.snr_devi <= 0:
        return detect_mepd(H, y, nv, const, lookup(src, cfg.n_t, cfg.n_r, cfg.modulation, snr_db))
    keys = mismatch_keys(src, cfg, snr_db)
    pick = rng.integers(0, len(keys), size=H.shape[0])
    out = np.empty((H.shape[0], H.shape[-1]))
    for i, k in enumerate(keys):
        rows = pick == i
        if rows.any():
            params = src.get(cfg.n_t, cfg.n_r, cfg.modulation, k)
            out[rows] = detect_mepd(H[rows], y[rows], nv, const, params)
    return out


def simulate_batch(cfg: SimConfig, snr_db: float, index: int, size: int) -> tuple[int, int]:
    """Simulate one work batch; returns ``(symbol_errors, trial_failures)``."""
    const = build_constellation(cfg.modulation)
    rng = substream(cfg.seed, snr_key(snr_db), index)
    ch = ChannelConfig(cfg.n_t, cfg.n_r, cfg.correlation, cfg.seed, cfg.normalize)
    H_bar = gen_iid_rayleigh(ch, rng, size)
    if cfg.correlation is not None:
        H_bar = gen_correlated(ch, H_bar, cfg.correlation)
    x_bar = gen_symbols(cfg.n_t, const, rng, size)
    npc = float(snr_to_complex_noise_power(snr_db, cfg.n_t, const.energy_complex))
    n_bar = gen_noise(cfg.n_r, npc, rng, size)
    y_bar = np.einsum("bij,bj->bi", H_bar, x_bar) + n_bar
    H = real_matrix(H_bar)
    x = real_vector(x_bar)
    y = real_vector(y_bar)
    x_hat = _detect(cfg, const, snr_db, H, y, 0.5 * npc, rng)
    failed = ~np.isfinite(x_hat).all(axis=1)
    decided, _ = hard_decision(np.where(failed[:, None], 0.0, x_hat), const)
    errs = symbol_errors(decided, x)
    errs[failed] = cfg.n_t
    return int(errs.sum()), int(failed.sum())


def _batch_sizes(cfg: SimConfig):
    j = 0
    done = 0
    while done < cfg.max_pairs:
        size = min(cfg.batch_size, cfg.max_pairs - done)
        yield j, size
        done += size
        j += 1


def run_ser(cfg: SimConfig, snr_db: float, pool: ProcessPoolExecutor | None = None) -> SerPoint:
    """Simulate until ``max_errors`` symbol errors or ``max_pairs`` vectors, checked per batch."""
    t0 = time.perf_counter()
    errors = failures = vectors = 0
    batches = _batch_sizes(cfg)
    if pool is None and cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as own:
            return run_ser(cfg, snr_db, own)
    stop = False
    while not stop:
        if pool is None:
            todo = [next(batches, None)]
            todo = [b for b in todo if b is not None]
            results = [simulate_batch(cfg, snr_db, j, size) for j, size in todo]
        else:
            todo = [b for b in (next(batches, None) for _ in range(2 * cfg.workers)) if b is not None]
            futures = [pool.submit(simulate_batch, cfg, snr_db, j, size) for j, size in todo]
            results = [f.result() for f in futures]
        if not todo:
            break
        for (j, size), (e, f) in zip(todo, results):
            errors += e
            failures += f
            vectors += size
            if errors >= cfg.max_errors:
                stop = True
                break
    symbols = vectors * cfg.n_t
    ser = errors / symbols if symbols else 0.0
    point = SerPoint(float(snr_db), symbols, errors, ser, failures, time.perf_counter() - t0)
    log.info("%s %gdB: %d/%d ser=%.4g", cfg.detector, snr_db, errors, symbols, ser)
    return point


def sweep(cfg: SimConfig) -> SerCurve:
    curve = SerCurve(cfg.echo())
    if not cfg.snrs:
        return curve
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            curve.points = [run_ser(cfg, s, pool) for s in cfg.snrs]
    else:
        curve.points = [run_ser(cfg, s) for s in cfg.snrs]
    return curve


@dataclass
class LayerSweep:
    snr_db: float
    points: list[tuple[int, SerPoint]] = field(default_factory=list)

    def at(self, layers: int) -> SerPoint:
        return dict(self.points)[layers]


def layer_sweep(cfg: SimConfig, layers=range(1, 9), params_by_layers: dict | None = None) -> LayerSweep:
    """SER at a single SNR (``cfg.snrs[0]``) versus the iteration/layer count.

    For MEPD, ``params_by_layers`` maps ``L`` to trained parameters (or a
    table); missing entries run the untrained mEPD point.
    """
    if len(cfg.snrs) != 1:
        raise ConfigurationError("layer sweep needs exactly one SNR")
    snr = cfg.snrs[0]
    out = LayerSweep(snr)
    for L in layers:
        params = (params_by_layers or {}).get(L) if cfg.detector == "mepd" else None
        sub = replace(cfg, iters=L, params=params)
        out.points.append((L, run_ser(sub, snr)))
    return out


def mismatch_experiment(cfg: SimConfig, snr_devi: float) -> SerCurve:
    """MEPD with parameters loaded from ``floor(devi/2)`` neighbouring grid keys at random."""
    if cfg.detector != "mepd" or not isinstance(cfg.params, ParamTable):
        raise ConfigurationError("mismatch experiment needs detector 'mepd' with a parameter table")
    if snr_devi < 0:
        raise ConfigurationError("snr_devi must be non-negative")
    for s in cfg.snrs:  # fail early on missing keys
        mismatch_keys(cfg.params, replace(cfg, snr_devi=snr_devi), s)
    return sweep(replace(cfg, snr_devi=snr_devi))


def correlated_experiment(cfg: SimConfig, K_list, iid_table: ParamTable,
                          corr_tables: dict | None = None) -> dict:
    """EPD, MEPD with i.i.d.-trained parameters and (optionally) MEPD-C per condition number.

    Returns ``{K: {"epd": curve, "mepd": curve, "mepd-c": curve}}``.
    """
    out = {}
    for K in K_list:
        base = replace(cfg, channel=f"corr:{fmt_number(K)}")
        res = {
            "epd": sweep(replace(base, detector="epd", params=None)),
            "mepd": sweep(replace(base, detector="mepd", params=iid_table)),
        }
        if corr_tables and K in corr_tables:
            res["mepd-c"] = sweep(replace(base, detector="mepd", params=corr_tables[K]))
        out[K] = res
    return out


# --- CSV -------------------------------------------------------------------------


def emit_csv(curve: SerCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in curve.points:
            w.writerow([fmt_number(p.snr_db), p.symbols_tested, p.symbol_errors,
                        fmt_number(p.ser), p.trial_failures, fmt_number(p.wall_time)])


def read_csv(path) -> SerCurve:
    curve = SerCurve()
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in r:
            curve.points.append(SerPoint(float(row[0]), int(row[1]), int(row[2]), float(row[3]),
                                         int(row[4]), float(row[5])))
    return curve


def emit_layer_csv(result: LayerSweep, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layers"] + CSV_HEADER)
        for L, p in result.points:
            w.writerow([L, fmt_number(p.snr_db), p.symbols_tested, p.symbol_errors,
                        fmt_number(p.ser), p.trial_failures, fmt_number(p.wall_time)])
