"""Offline optimisation of the MEPD layer parameters and the parameter table.

The unfolded detector has only ``2L + 1`` scalars, so gradients of the mean
squared estimation error are taken by central finite differences on a
common batch, followed by Adam steps.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, gen_correlated, gen_iid_rayleigh, gen_noise, gen_symbols, substream
from .detect import (
    VARIANCE_FLOOR,
    MepdParams,
    _cavity,
    _posterior,
    gram,
    mepd_update,
    moment_match,
    run_ep,
)
from .model import (
    ConfigurationError,
    Constellation,
    build_constellation,
    hard_decision,
    modulation_order,
    real_matrix,
    real_vector,
    snr_to_complex_noise_power,
    symbol_errors,
)

log = logging.getLogger(__name__)

# substream tags
_TRAIN_STREAM = 1
_VALID_STREAM = 2


def snr_key(snr_db: float) -> int:
    """Integer tag for an SNR value (milli-dB) used to derive RNG substreams."""
    return int(round(float(snr_db) * 1000)) + 1_000_000


def fmt_number(v) -> str:
    """Shortest text that parses back to the same value; integral floats print bare."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


# --- data --------------------------------------------------------------------


@dataclass
class Batch:
    """Real-valued training/validation pairs with their Gram data."""

    x: np.ndarray
    G: np.ndarray
    b: np.ndarray
    noise_power: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def make_batch(n_t: int, n_r: int, constellation: Constellation, snr_db, size: int,
               rng: np.random.Generator, correlation: float | None = None) -> Batch:
    """Draw ``size`` pairs. ``snr_db`` is a number or a ``(lo, hi)`` range sampled uniformly per pair."""
    if isinstance(snr_db, tuple):
        snr = rng.uniform(snr_db[0], snr_db[1], size=size)
    else:
        snr = np.full(size, float(snr_db))
    cfg = ChannelConfig(n_t, n_r, correlation)
    H_bar = gen_iid_rayleigh(cfg, rng, size)
    if correlation is not None:
        H_bar = gen_correlated(cfg, H_bar, correlation)
    x_bar = gen_symbols(n_t, constellation, rng, size)
    npc = snr_to_complex_noise_power(snr, n_t, constellation.energy_complex)
    n_bar = gen_noise(n_r, npc, rng, size)
    y_bar = np.einsum("bij,bj->bi", H_bar, x_bar) + n_bar
    H = real_matrix(H_bar)
    nv = 0.5 * npc
    G, b = gram(H, real_vector(y_bar), nv)
    return Batch(real_vector(x_bar), G, b, nv)


# --- loss and gradients ------------------------------------------------------


def l2_loss(x, x_hat) -> float:
    """Mean over the batch of the squared estimation error norm."""
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape or x.size == 0:
        raise ValueError("need a nonempty batch of matching shapes")
    if x.ndim == 1:
        x, x_hat = x[None], x_hat[None]
    return float(np.mean(np.sum((x - x_hat) ** 2, axis=-1)))


def perturbation_steps(p: np.ndarray, rel_delta: float, floor: float = 1e-2) -> np.ndarray:
    return rel_delta * np.maximum(np.abs(p), floor)


def central_difference(f, p, steps) -> np.ndarray:
    """Generic central-difference gradient of ``f`` at ``p``."""
    p = np.asarray(p, dtype=float)
    g = np.empty_like(p)
    for k in range(p.size):
        e = np.zeros_like(p)
        e[k] = steps[k]
        g[k] = (f(p + e) - f(p - e)) / (2.0 * steps[k])
    return g


def forward(params: MepdParams, batch: Batch, constellation: Constellation,
            variance_floor: float = VARIANCE_FLOOR) -> np.ndarray:
    return run_ep(batch.G, batch.b, constellation.real_pam, params.lambda_init,
                  params.alpha, params.beta, params.L, rule="mepd", variance_floor=variance_floor)


def batch_loss(params: MepdParams, batch: Batch, constellation: Constellation,
               variance_floor: float = VARIANCE_FLOOR) -> float:
    u = forward(params, batch, constellation, variance_floor)
    return l2_loss(batch.x, u)


@dataclass
class GradientEstimate:
    grad: np.ndarray
    loss: float
    valid: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.valid)) and math.isfinite(self.loss)


def _loss_rows(x, u):
    return np.sum((x - u) ** 2, axis=-1)


def estimate_gradient(params: MepdParams, batch: Batch, constellation: Constellation,
                      rel_delta: float = 1e-3, variance_floor: float = VARIANCE_FLOOR) -> GradientEstimate:
    """Central differences over ``(lambda, alpha_1..L, beta_1..L)`` on one batch.

    Numerically the same as perturbing each parameter and re-running the
    whole detector; layers that a perturbation cannot reach are reused
    from the unperturbed pass.
    """
    L = params.L
    pam = constellation.real_pam
    p = params.to_vector()
    steps = perturbation_steps(p, rel_delta)
    B, N = batch.b.shape
    x = batch.x

    # unperturbed pass, keeping what later perturbations restart from
    lam = np.full((B, N), params.lambda_init)
    gamma = np.zeros((B, N))
    cache = []
    alive = np.ones(B, dtype=bool)
    u = None
    for t in range(L):
        s, u, ok = _posterior(batch.G, batch.b, lam, gamma)
        alive &= ok
        if t == L - 1:
            break
        m, eps2 = _cavity(u, s, lam, gamma)
        up, sp = moment_match(m, eps2, params.alpha[t], pam, variance_floor)
        cache.append((lam, gamma, u, s, m, eps2, up, sp))
        lam, gamma = mepd_update(lam, gamma, up, sp, u, s, params.beta[t])
    base_loss = float(np.mean(_loss_rows(x, u))) if alive.all() else math.nan

    grad = np.zeros(p.size)
    valid = np.ones(p.size, dtype=bool)

    def finish(k, u_plus, u_minus):
        lp = np.mean(_loss_rows(x, u_plus))
        lm = np.mean(_loss_rows(x, u_minus))
        if math.isfinite(lp) and math.isfinite(lm):
            grad[k] = (lp - lm) / (2.0 * steps[k])
        else:
            valid[k] = False

    # lambda moves every layer: two full passes stacked together
    G2 = np.concatenate([batch.G, batch.G])
    b2 = np.concatenate([batch.b, batch.b])
    lam0 = np.concatenate([np.full((B, N), params.lambda_init + steps[0]),
                           np.full((B, N), params.lambda_init - steps[0])])
    u2 = run_ep(G2, b2, pam, None, params.alpha, params.beta, L, rule="mepd",
                variance_floor=variance_floor, start=(lam0, np.zeros((2 * B, N))))
    finish(0, u2[:B], u2[B:])

    # alpha_t / beta_t only change the update leaving layer t
    G4 = np.concatenate([batch.G] * 4)
    b4 = np.concatenate([batch.b] * 4)
    for t in range(L):
        ka, kb = 1 + t, 1 + L + t
        if t == L - 1:
            # last-layer updates are discarded; the output cannot move
            grad[ka] = grad[kb] = 0.0
            continue
        lam_t, gamma_t, e, s, m, eps2, up, sp = cache[t]
        starts_lam, starts_gamma = [], []
        for a in (params.alpha[t] + steps[ka], params.alpha[t] - steps[ka]):
            up_a, sp_a = moment_match(m, eps2, a, pam, variance_floor)
            ln, gn = mepd_update(lam_t, gamma_t, up_a, sp_a, e, s, params.beta[t])
            starts_lam.append(ln)
            starts_gamma.append(gn)
        for bt in (params.beta[t] + steps[kb], params.beta[t] - steps[kb]):
            ln, gn = mepd_update(lam_t, gamma_t, up, sp, e, s, bt)
            starts_lam.append(ln)
            starts_gamma.append(gn)
        rest = L - t - 1
        u4 = run_ep(G4, b4, pam, None, params.alpha[t + 1:], params.beta[t + 1:], rest,
                    rule="mepd", variance_floor=variance_floor,
                    start=(np.concatenate(starts_lam), np.concatenate(starts_gamma)))
        finish(ka, u4[:B], u4[B:2 * B])
        finish(kb, u4[2 * B:3 * B], u4[3 * B:])
    return GradientEstimate(grad, base_loss, valid)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(p)
            self.v = np.zeros_like(p)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_t: int
    n_r: int
    modulation: int | str = 16
    snr_db: float | tuple[float, float] = 20.0
    layers: int = 5
    epochs: int = 25
    pairs_per_epoch: int = 10_000
    batch_size: int = 500
    learning_rate: float = 1e-4
    lr_decay: float = 0.99
    seed: int = 0
    correlation: float | None = None
    rel_delta: float = 1e-3
    validate_every: int = 5
    validation_pairs: int = 2000
    variance_floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        self.modulation = modulation_order(self.modulation)
        if isinstance(self.snr_db, (list, tuple)):
            lo, hi = (float(v) for v in self.snr_db)
            if hi < lo:
                raise ConfigurationError("empty SNR range")
            self.snr_db = (lo, hi)
        for name in ("layers", "pairs_per_epoch", "batch_size", "validate_every", "validation_pairs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ConfigurationError("epochs and learning_rate must be non-negative")

    @property
    def constellation(self) -> Constellation:
        return build_constellation(self.modulation)

    @property
    def stream_key(self) -> int:
        if isinstance(self.snr_db, tuple):
            return snr_key(self.snr_db[0]) * 7 + snr_key(self.snr_db[1])
        return snr_key(self.snr_db)


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    validation: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, ser, loss)
    params: MepdParams | None = None
    best_epoch: int = 0
    skipped_steps: int = 0
    diverged: bool = False
    wall_time: float = 0.0


def validation_batch(cfg: TrainConfig) -> Batch:
    rng = substream(cfg.seed, _VALID_STREAM, cfg.stream_key)
    return make_batch(cfg.n_t, cfg.n_r, cfg.constellation, cfg.snr_db, cfg.validation_pairs, rng, cfg.correlation)


def evaluate(params: MepdParams, batch: Batch, constellation: Constellation,
             variance_floor: float = VARIANCE_FLOOR) -> tuple[float, float]:
    """``(SER, l2 loss)`` of MEPD on a batch; failed trials count as all wrong."""
    u = forward(params, batch, constellation, variance_floor)
    failed = ~np.isfinite(u).all(axis=1)
    decided, _ = hard_decision(np.where(failed[:, None], 0.0, u), constellation)
    errs = symbol_errors(decided, batch.x)
    n_t = batch.x.shape[1] // 2
    errs[failed] = n_t
    loss = float(np.mean(_loss_rows(batch.x[~failed], u[~failed]))) if (~failed).any() else math.inf
    return float(errs.sum()) / (len(batch) * n_t), loss


def train(cfg: TrainConfig) -> TrainReport:
    """Fit MEPD parameters for one configuration, starting from the mEPD point.

    Returns the parameters with the best validation ``(SER, loss)`` among the
    starting point and the checkpoints taken every ``validate_every`` epochs.
    """
    t0 = time.perf_counter()
    const = cfg.constellation
    L = cfg.layers
    params = MepdParams.mepd_point(L, const)
    report = TrainReport()
    valid = validation_batch(cfg)
    ser, loss = evaluate(params, valid, const, cfg.variance_floor)
    report.validation.append((0, ser, loss))
    best = (ser, loss)
    report.params = params
    opt = Adam(cfg.learning_rate)
    p = params.to_vector()
    n_batches = max(1, cfg.pairs_per_epoch // cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.learning_rate * cfg.lr_decay ** (epoch - 1)
        losses = []
        for j in range(n_batches):
            rng = substream(cfg.seed, _TRAIN_STREAM, cfg.stream_key, epoch, j)
            size = min(cfg.batch_size, cfg.pairs_per_epoch - j * cfg.batch_size)
            batch = make_batch(cfg.n_t, cfg.n_r, const, cfg.snr_db, size, rng, cfg.correlation)
            est = estimate_gradient(MepdParams.from_vector(p, L), batch, const, cfg.rel_delta, cfg.variance_floor)
            if not est.ok:
                report.skipped_steps += 1
                if math.isfinite(est.loss):
                    losses.append(est.loss)
                continue
            losses.append(est.loss)
            p = opt.step(p, est.grad)
            p[0] = max(p[0], 1e-6)
        epoch_loss = float(np.mean(losses)) if losses else math.nan
        report.epoch_loss.append(epoch_loss)
        if not math.isfinite(epoch_loss):
            log.warning("training diverged at epoch %d", epoch)
            report.diverged = True
            break
        if epoch % cfg.validate_every == 0 or epoch == cfg.epochs:
            cand = MepdParams.from_vector(p, L)
            ser, loss = evaluate(cand, valid, const, cfg.variance_floor)
            report.validation.append((epoch, ser, loss))
            log.info("snr=%s epoch %d loss %.5g val ser %.4g", cfg.snr_db, epoch, epoch_loss, ser)
            if (ser, loss) < best:
                best = (ser, loss)
                report.params = cand
                report.best_epoch = epoch
    report.wall_time = time.perf_counter() - t0
    return report


# --- parameter table -------------------------------------------------------------

TABLE_VERSION = "v1"


class TableFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TableKey:
    n_t: int
    n_r: int
    order: int
    snr_db: float


class ParamTable:
    """Trained parameters keyed by ``(n_t, n_r, order, snr_db)``; all records share ``L``."""

    def __init__(self, records: dict | None = None):
        self._records: dict[TableKey, MepdParams] = {}
        self.L: int | None = None
        for key, params in (records or {}).items():
            self.add(*key, params)

    def add(self, n_t: int, n_r: int, order, snr_db: float, params: MepdParams):
        key = TableKey(int(n_t), int(n_r), modulation_order(order), float(snr_db))
        if self.L is None:
            self.L = params.L
        elif params.L != self.L:
            raise ConfigurationError(f"table holds L={self.L}, got L={params.L}")
        if key in self._records:
            raise ConfigurationError(f"duplicate table key {key}")
        self._records[key] = params

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(sorted(self._records.items(), key=lambda kv: (kv[0].n_t, kv[0].n_r, kv[0].order, kv[0].snr_db)))

    def __eq__(self, other):
        return isinstance(other, ParamTable) and self.L == other.L and self._records == other._records

    def snr_keys(self, n_t: int, n_r: int, order) -> list[float]:
        order = modulation_order(order)
        return sorted(k.snr_db for k in self._records if (k.n_t, k.n_r, k.order) == (n_t, n_r, order))

    def get(self, n_t: int, n_r: int, order, snr_db: float) -> MepdParams:
        key = TableKey(int(n_t), int(n_r), modulation_order(order), float(snr_db))
        try:
            return self._records[key]
        except KeyError:
            raise ConfigurationError(f"no table record for {key}") from None


def lookup(table: ParamTable, n_t: int, n_r: int, modulation, estimated_snr_db: float) -> MepdParams:
    """Record whose SNR is nearest to the estimate; midpoints resolve to the lower SNR."""
    keys = table.snr_keys(n_t, n_r, modulation)
    if not keys:
        raise ConfigurationError(f"no records for {n_t}x{n_r} {modulation}")
    best = min(keys, key=lambda k: (abs(k - estimated_snr_db), k))
    return table.get(n_t, n_r, modulation, best)


def save_table(table: ParamTable, path) -> None:
    lines = [f"mepdparams {TABLE_VERSION} L={table.L if table.L is not None else 0}"]
    for key, p in table:
        fields = [key.n_t, key.n_r, key.order, key.snr_db, p.lambda_init, *p.alpha, *p.beta]
        lines.append(",".join(fmt_number(v) for v in fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path) -> ParamTable:
    text = Path(path).read_text().splitlines()
    if not text:
        raise TableFormatError(f"{path}:1: empty file")
    head = text[0].split()
    if len(head) != 3 or head[0] != "mepdparams" or not head[2].startswith("L="):
        raise TableFormatError(f"{path}:1: bad header {text[0]!r}")
    if head[1] != TABLE_VERSION:
        raise TableFormatError(f"{path}:1: unsupported table version {head[1]!r}")
    try:
        L = int(head[2][2:])
    except ValueError:
        raise TableFormatError(f"{path}:1: bad layer count {head[2]!r}") from None
    table = ParamTable()
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5 + 2 * L:
            raise TableFormatError(f"{path}:{lineno}: expected {5 + 2 * L} fields, got {len(parts)}")
        try:
            n_t, n_r, order = (int(v) for v in parts[:3])
            vals = [float(v) for v in parts[3:]]
            params = MepdParams(vals[2:2 + L], vals[2 + L:], vals[1])
            table.add(n_t, n_r, order, vals[0], params)
        except (ValueError, ConfigurationError) as exc:
            raise TableFormatError(f"{path}:{lineno}: {exc}") from None
    if table.L is None:
        table.L = L
    return table


def train_table(base: TrainConfig, snrs, allinone: bool = False, table: ParamTable | None = None) -> tuple[ParamTable, dict]:
    """Train one record per SNR (or one shared ALLINONE record stored under every SNR)."""
    table = table if table is not None else ParamTable()
    reports = {}
    snrs = [float(s) for s in snrs]
    if allinone:
        cfg = replace(base, snr_db=(min(snrs), max(snrs)))
        rep = train(cfg)
        for s in snrs:
            table.add(base.n_t, base.n_r, base.modulation, s, rep.params)
            reports[s] = rep
        return table, reports
    for s in snrs:
        rep = train(replace(base, snr_db=s))
        table.add(base.n_t, base.n_r, base.modulation, s, rep.params)
        reports[s] = rep
    return table, reports
