"""Monte Carlo ensemble orchestration.

``run_ensemble`` executes R independent seeded runs of the pipeline
(signal generator, LMS filter bank, combiner), averages the resulting
curves, and optionally drives the moment recursions of
:mod:`bregmix.transient` with moments estimated from the same ensemble
(or from a separate calibration ensemble).

Determinism: every run owns rng streams keyed on ``(seed, run_index,
role)``; runs are processed in fixed blocks of :data:`BLOCK_RUNS` and the
block partials are combined in block order, so the output is bit-identical
whether blocks execute serially or in a process pool.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mixture, signal_model, transient
from .exceptions import (
    ConfigError,
    DegenerateMomentError,
    EnsembleDivergedError,
)

__all__ = [
    "BLOCK_RUNS",
    "ConstituentSpec",
    "CurveSet",
    "ExperimentConfig",
    "MixtureSpec",
    "OutputSpec",
    "SignalSpec",
    "TheorySpec",
    "draw_constituent_mus",
    "effective_weight_series",
    "final_window_mean",
    "iterations_to_90pct",
    "linearization_diagnostic",
    "quotient_diagnostic",
    "resolve",
    "run_ensemble",
    "run_streams",
    "run_theory",
]

# Runs per block.  Fixed so that the reduction tree does not depend on the
# worker count; changing it changes output bytes.
BLOCK_RUNS = 64

_ROLE_CONSTITUENT_MU = 0
_ROLE_REGRESSOR = 1
_ROLE_NOISE = 2
_ROLE_CALIB_REGRESSOR = 3
_ROLE_CALIB_NOISE = 4

_DIVERGED_FRACTION_LIMIT = 0.10


# ---------------------------------------------------------------------------
# Configuration schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstituentSpec:
    """Step size of one LMS constituent: fixed ``mu`` or a ``mu_range``."""

    mu: float | None = None
    mu_range: tuple[float, float] | None = None


@dataclass(frozen=True)
class SignalSpec:
    w_o: tuple[float, ...] = ()
    noise_variance: float = 0.0
    tau: float | None = None
    snr_db: float | None = None


@dataclass(frozen=True)
class MixtureSpec:
    algorithm: str = ""
    mu: float = 0.0
    u: float | None = None
    use_linearized: bool = False


@dataclass(frozen=True)
class TheorySpec:
    enabled: bool = False
    moment_runs: int | None = None


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "out"
    decimation: int = 10
    # 1-indexed (i, j) entries of the weight second moment; None = diagonal
    moment_entries: tuple[tuple[int, int], ...] | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    runs: int = 200
    horizon: int = 20000
    signal: SignalSpec = field(default_factory=SignalSpec)
    constituents: tuple[ConstituentSpec, ...] = ()
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    theory: TheorySpec = field(default_factory=TheorySpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        return _config_from_dict(raw)

    def to_dict(self) -> dict:
        return _config_to_dict(self)


def _err(errors, path, message):
    errors.append((path, message))


def _take(raw: dict, path: str, errors, known: set[str]):
    for key in raw:
        if key not in known:
            _err(errors, f"{path}.{key}" if path else key, "unknown key")


def _get_number(raw, key, path, errors, *, required=False, integer=False,
                minimum=None, exclusive_minimum=None, default=None):
    if key not in raw:
        if required:
            _err(errors, f"{path}{key}", "missing required field")
        return default
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _err(errors, f"{path}{key}", "must be a number")
        return default
    if integer and int(v) != v:
        _err(errors, f"{path}{key}", "must be an integer")
        return default
    if minimum is not None and v < minimum:
        _err(errors, f"{path}{key}", f"must be >= {minimum}")
        return default
    if exclusive_minimum is not None and v <= exclusive_minimum:
        _err(errors, f"{path}{key}", f"must be > {exclusive_minimum}")
        return default
    return int(v) if integer else float(v)


def _config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a JSON object")])
    errors: list[tuple[str, str]] = []
    _take(raw, "", errors,
          {"seed", "runs", "horizon", "signal", "constituents", "mixture",
           "theory", "output"})

    seed = _get_number(raw, "seed", "", errors, required=True, integer=True,
                       minimum=0, default=0)
    runs = _get_number(raw, "runs", "", errors, integer=True, minimum=1,
                       default=200)
    horizon = _get_number(raw, "horizon", "", errors, integer=True, minimum=1,
                          default=20000)

    # signal
    sig_raw = raw.get("signal")
    signal = SignalSpec()
    if not isinstance(sig_raw, dict):
        _err(errors, "signal", "missing or not an object")
    else:
        _take(sig_raw, "signal", errors,
              {"w_o", "noise_variance", "tau", "snr_db", "filter_order"})
        w_o = sig_raw.get("w_o")
        if (not isinstance(w_o, list) or len(w_o) == 0
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                           for v in w_o)):
            _err(errors, "signal.w_o", "must be a non-empty array of numbers")
            w_o = [1.0]
        order = _get_number(sig_raw, "filter_order", "signal.", errors,
                            integer=True, minimum=1)
        if order is not None and order != len(w_o):
            _err(errors, "signal.filter_order", "must equal the length of w_o")
        noise_variance = _get_number(sig_raw, "noise_variance", "signal.",
                                     errors, required=True, minimum=0.0,
                                     default=0.0)
        tau = _get_number(sig_raw, "tau", "signal.", errors,
                          exclusive_minimum=0.0)
        snr = _get_number(sig_raw, "snr_db", "signal.", errors)
        if ("tau" in sig_raw) == ("snr_db" in sig_raw):
            _err(errors, "signal", "exactly one of tau or snr_db is required")
        if snr is not None and noise_variance == 0.0:
            _err(errors, "signal.snr_db", "requires noise_variance > 0")
        signal = SignalSpec(w_o=tuple(float(v) for v in w_o),
                            noise_variance=float(noise_variance),
                            tau=tau, snr_db=snr)

    # constituents
    con_raw = raw.get("constituents")
    constituents: list[ConstituentSpec] = []
    if not isinstance(con_raw, list) or len(con_raw) < 2:
        _err(errors, "constituents", "must be an array of at least 2 entries")
    else:
        for i, entry in enumerate(con_raw):
            path = f"constituents[{i}]"
            if not isinstance(entry, dict):
                _err(errors, path, "must be an object")
                continue
            _take(entry, path, errors, {"mu", "mu_range"})
            mu = _get_number(entry, "mu", path + ".", errors,
                             exclusive_minimum=0.0)
            mu_range = entry.get("mu_range")
            if ("mu" in entry) == ("mu_range" in entry):
                _err(errors, path, "exactly one of mu or mu_range is required")
                continue
            if mu_range is not None:
                ok = (isinstance(mu_range, list) and len(mu_range) == 2
                      and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                              for v in mu_range)
                      and 0 < mu_range[0] <= mu_range[1])
                if not ok:
                    _err(errors, path + ".mu_range",
                         "must be [lo, hi] with 0 < lo <= hi")
                    continue
                constituents.append(ConstituentSpec(
                    mu_range=(float(mu_range[0]), float(mu_range[1]))))
            elif mu is not None:
                constituents.append(ConstituentSpec(mu=mu))

    # mixture
    mix_raw = raw.get("mixture")
    mix = MixtureSpec()
    if not isinstance(mix_raw, dict):
        _err(errors, "mixture", "missing or not an object")
    else:
        _take(mix_raw, "mixture", errors,
              {"algorithm", "mu", "u", "use_linearized"})
        algorithm = mix_raw.get("algorithm")
        if algorithm not in mixture.ALGORITHMS:
            _err(errors, "mixture.algorithm",
                 f"must be one of {', '.join(mixture.ALGORITHMS)}")
            algorithm = "affine_egu"
        mu = _get_number(mix_raw, "mu", "mixture.", errors, required=True,
                         exclusive_minimum=0.0, default=1.0)
        is_eg = algorithm.endswith("_eg")
        u = None
        if "u" in mix_raw:
            if not is_eg:
                _err(errors, "mixture.u",
                     "only EG algorithms take a total mass u")
            u = _get_number(mix_raw, "u", "mixture.", errors)
            if u is not None and u < 1:
                _err(errors, "mixture.u", "u must be >= 1")
        elif is_eg:
            _err(errors, "mixture.u", f"required for algorithm '{algorithm}'")
        use_lin = mix_raw.get("use_linearized", False)
        if not isinstance(use_lin, bool):
            _err(errors, "mixture.use_linearized", "must be a boolean")
            use_lin = False
        if use_lin and algorithm.endswith("_lms"):
            _err(errors, "mixture.use_linearized",
                 "LMS has no linearized variant")
        mix = MixtureSpec(algorithm=algorithm, mu=mu if mu else 1.0,
                          u=u, use_linearized=use_lin)

    # theory
    theo_raw = raw.get("theory", {})
    theory = TheorySpec()
    if not isinstance(theo_raw, dict):
        _err(errors, "theory", "must be an object")
    else:
        _take(theo_raw, "theory", errors, {"enabled", "moment_runs"})
        enabled = theo_raw.get("enabled", False)
        if not isinstance(enabled, bool):
            _err(errors, "theory.enabled", "must be a boolean")
            enabled = False
        moment_runs = _get_number(theo_raw, "moment_runs", "theory.", errors,
                                  integer=True, minimum=2)
        if enabled and mix.algorithm.endswith("_lms"):
            _err(errors, "theory.enabled",
                 "moment recursions are defined for EGU/EG combiners only")
        if enabled and moment_runs is None and runs is not None and runs < 2:
            _err(errors, "theory.enabled",
                 "needs runs >= 2 (or theory.moment_runs) to estimate moments")
        theory = TheorySpec(enabled=enabled, moment_runs=moment_runs)

    # output
    out_raw = raw.get("output", {})
    output = OutputSpec()
    if not isinstance(out_raw, dict):
        _err(errors, "output", "must be an object")
    else:
        _take(out_raw, "output", errors,
              {"directory", "decimation", "moment_entries"})
        directory = out_raw.get("directory", "out")
        if not isinstance(directory, str) or not directory:
            _err(errors, "output.directory", "must be a non-empty string")
            directory = "out"
        decimation = _get_number(out_raw, "decimation", "output.", errors,
                                 integer=True, minimum=1, default=10)
        entries = out_raw.get("moment_entries")
        parsed_entries = None
        if entries is not None:
            ok = isinstance(entries, list) and all(
                isinstance(p, list) and len(p) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) and v >= 1
                        for v in p)
                for p in entries)
            if not ok:
                _err(errors, "output.moment_entries",
                     "must be an array of [i, j] pairs with 1-based indices")
            else:
                parsed_entries = tuple((int(i), int(j)) for i, j in entries)
        output = OutputSpec(directory=directory, decimation=decimation,
                            moment_entries=parsed_entries)

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(seed=seed, runs=runs, horizon=horizon,
                            signal=signal, constituents=tuple(constituents),
                            mixture=mix, theory=theory, output=output)


def _config_to_dict(cfg: ExperimentConfig) -> dict:
    signal: dict = {"w_o": list(cfg.signal.w_o),
                    "noise_variance": cfg.signal.noise_variance}
    if cfg.signal.tau is not None:
        signal["tau"] = cfg.signal.tau
    if cfg.signal.snr_db is not None:
        signal["snr_db"] = cfg.signal.snr_db
    constituents = []
    for c in cfg.constituents:
        constituents.append({"mu": c.mu} if c.mu is not None
                            else {"mu_range": list(c.mu_range)})
    mix: dict = {"algorithm": cfg.mixture.algorithm, "mu": cfg.mixture.mu}
    if cfg.mixture.u is not None:
        mix["u"] = cfg.mixture.u
    if cfg.mixture.use_linearized:
        mix["use_linearized"] = True
    out: dict = {"directory": cfg.output.directory,
                 "decimation": cfg.output.decimation}
    if cfg.output.moment_entries is not None:
        out["moment_entries"] = [list(p) for p in cfg.output.moment_entries]
    d = {"seed": cfg.seed, "runs": cfg.runs, "horizon": cfg.horizon,
         "signal": signal, "constituents": constituents, "mixture": mix,
         "output": out}
    if cfg.theory.enabled or cfg.theory.moment_runs is not None:
        theo: dict = {"enabled": cfg.theory.enabled}
        if cfg.theory.moment_runs is not None:
            theo["moment_runs"] = cfg.theory.moment_runs
        d["theory"] = theo
    return d


# ---------------------------------------------------------------------------
# Resolution: draw constituent step sizes, fix tau, expand defaults
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResolvedExperiment:
    config: ExperimentConfig
    tau: float
    constituent_mus: tuple[float, ...]

    @property
    def m(self) -> int:
        return len(self.constituent_mus)

    @property
    def filter_order(self) -> int:
        return len(self.config.signal.w_o)

    @property
    def base_dim(self) -> int:
        # dimension of the combiner regressor (delta or x)
        return self.m - 1 if self.config.mixture.algorithm.startswith("affine") else self.m

    @property
    def weight_dim(self) -> int:
        # length of the tracked weight vector (augmented for EGU/EG)
        if self.config.mixture.algorithm.endswith("_lms"):
            return self.base_dim
        return 2 * self.base_dim

    @property
    def moment_entries(self) -> tuple[tuple[int, int], ...]:
        entries = self.config.output.moment_entries
        if entries is None:
            return tuple((i, i) for i in range(1, self.weight_dim + 1))
        return entries

    def signal_config(self) -> signal_model.SignalModelConfig:
        return signal_model.SignalModelConfig(
            w_o=np.asarray(self.config.signal.w_o),
            tau=self.tau,
            noise_variance=self.config.signal.noise_variance,
        )

    def initial_mixture_state(self):
        mix = self.config.mixture
        return mixture.initial_state(mix.algorithm, self.m, mix.mu, mix.u)


def run_streams(seed: int, run_index: int, calib: bool = False):
    """Independent (regressor, noise) generators for one run."""
    r_role = _ROLE_CALIB_REGRESSOR if calib else _ROLE_REGRESSOR
    n_role = _ROLE_CALIB_NOISE if calib else _ROLE_NOISE
    reg = np.random.default_rng(np.random.SeedSequence((seed, run_index, r_role)))
    noi = np.random.default_rng(np.random.SeedSequence((seed, run_index, n_role)))
    return reg, noi


def draw_constituent_mus(config: ExperimentConfig) -> tuple[float, ...]:
    """Resolve every mu_range to a value, drawn once from the experiment seed."""
    rng = np.random.default_rng(
        np.random.SeedSequence((config.seed, 0, _ROLE_CONSTITUENT_MU)))
    mus = []
    for c in config.constituents:
        if c.mu is not None:
            mus.append(c.mu)
        else:
            lo, hi = c.mu_range
            mus.append(float(rng.uniform(lo, hi)))
    return tuple(mus)


def resolve(config: ExperimentConfig) -> ResolvedExperiment:
    sig = config.signal
    if sig.tau is not None:
        tau = sig.tau
    else:
        tau = signal_model.tau_for_snr_db(np.asarray(sig.w_o),
                                          sig.noise_variance, sig.snr_db)
    res = ResolvedExperiment(config=config, tau=tau,
                             constituent_mus=draw_constituent_mus(config))
    k = res.weight_dim
    for i, j in res.moment_entries:
        if not (1 <= i <= k and 1 <= j <= k):
            raise ConfigError([("output.moment_entries",
                                f"entry ({i}, {j}) out of range 1..{k}")])
    return res


def resolved_config_dict(res: ResolvedExperiment) -> dict:
    """Config echo with tau fixed and drawn step sizes substituted in.

    The echo is itself a valid configuration and reproduces the outputs.
    """
    d = _config_to_dict(res.config)
    d["signal"].pop("snr_db", None)
    d["signal"]["tau"] = res.tau
    d["constituents"] = [{"mu": mu} for mu in res.constituent_mus]
    return d


# ---------------------------------------------------------------------------
# Block execution
# ---------------------------------------------------------------------------

@dataclass
class _BlockPartial:
    included: int
    diverged: int
    e2: np.ndarray
    ec2: np.ndarray
    wa: np.ndarray
    wa_diag: np.ndarray
    wa_cross: np.ndarray
    sat: np.ndarray
    lin: np.ndarray | None
    quot_ratio1: np.ndarray | None
    quot_num1: np.ndarray | None
    quot_den: np.ndarray | None
    base_outer: np.ndarray | None
    base_gamma: np.ndarray | None
    d: np.ndarray | None


def _block_pass(res: ResolvedExperiment, A, Y, include, collect_moments):
    """One vectorized pass over a block of runs.

    ``A`` has shape (B, T, filter_order) and ``Y`` shape (B, T).  ``include``
    is a boolean run mask (None means all); excluded runs still evolve but
    contribute nothing to the sums.  Returns the partial sums and the mask
    of runs that produced non-finite state.
    """
    B, T, _ = A.shape
    cfg = res.config
    alg = cfg.mixture.algorithm
    mu = cfg.mixture.mu
    u = cfg.mixture.u
    lin_step = cfg.mixture.use_linearized
    affine = alg.startswith("affine")
    is_eg = alg.endswith("_eg")
    is_lms = alg.endswith("_lms")
    m = res.m
    mb = res.base_dim
    k = res.weight_dim

    init = res.initial_mixture_state()
    if is_lms:
        H1 = np.tile(init.weights, (B, 1))
        H2 = None
    elif affine:
        H1 = np.tile(init.lambda1, (B, 1))
        H2 = np.tile(init.lambda2, (B, 1))
    else:
        H1 = np.tile(init.w1, (B, 1))
        H2 = np.tile(init.w2, (B, 1))

    Wb = np.zeros((B, m, res.filter_order))
    mus_col = np.asarray(res.constituent_mus)[None, :, None]

    include_all = include is None
    if include_all:
        inc = None

        def rsum(v):
            return v.sum(axis=0)
    else:
        inc = include

        def rsum(v):
            if v.ndim == 1:
                return np.where(inc, v, 0.0).sum(axis=0)
            return np.where(inc[:, None], v, 0.0).sum(axis=0)

    cross = _cross_pairs(res)

    acc_e2 = np.empty(T)
    acc_ec2 = np.empty((T, m))
    acc_wa = np.empty((T, k))
    acc_diag = np.empty((T, k))
    acc_cross = np.empty((T, len(cross)))
    acc_sat = np.zeros(T, dtype=np.int64)
    acc_lin = None if is_lms else np.empty(T)
    acc_ratio1 = np.empty(T) if is_eg else None
    acc_num1 = np.empty(T) if is_eg else None
    acc_den = np.empty(T) if is_eg else None

    if collect_moments:
        D_rec = np.empty((B, T, mb))
        xm_rec = np.empty((B, T)) if affine else None
    tot_e2 = np.zeros(B)  # sticky non-finite sentinel per run

    def column(Ha, Hb, idx):
        if Hb is None:
            return Ha[:, idx]
        return Ha[:, idx] if idx < mb else Hb[:, idx - mb]

    with np.errstate(all="ignore"):
        for t in range(T):
            a_t = A[:, t, :]
            y_t = Y[:, t]
            x = np.matmul(Wb, a_t[:, :, None])[:, :, 0]
            ec = y_t[:, None] - x
            base = x[:, : m - 1] - x[:, m - 1:m] if affine else x
            sw = H1 - H2 if not is_lms else H1
            dot = (sw * base).sum(axis=1)
            if is_eg:
                # EG states are defined up to scale; error uses mass u
                total0 = H1.sum(axis=1) + H2.sum(axis=1)
                signed = (u / total0) * dot
            else:
                total0 = None
                signed = dot
            pred = x[:, m - 1] + signed if affine else signed
            e = y_t - pred

            e2v = e * e
            acc_e2[t] = rsum(e2v)
            tot_e2 += e2v
            acc_ec2[t] = rsum(ec * ec)
            if is_lms:
                acc_wa[t] = rsum(H1)
                acc_diag[t] = rsum(H1 * H1)
            else:
                acc_wa[t, :mb] = rsum(H1)
                acc_wa[t, mb:] = rsum(H2)
                acc_diag[t, :mb] = rsum(H1 * H1)
                acc_diag[t, mb:] = rsum(H2 * H2)
            for ci, (i0, j0) in enumerate(cross):
                acc_cross[t, ci] = rsum(column(H1, H2, i0) * column(H1, H2, j0))

            if collect_moments:
                D_rec[:, t, :] = base
                if affine:
                    xm_rec[:, t] = x[:, m - 1]

            if is_lms:
                H1 = H1 + mu * e[:, None] * base
            else:
                z = mu * e[:, None] * base
                z1 = z[:, 0]
                expz1 = np.exp(z1)
                acc_lin[t] = rsum((expz1 - 1.0 - z1) ** 2
                                  / np.abs(expz1 * (1.0 + z1)))
                if is_eg:
                    den = total0 + mu * e * dot
                    num1 = H1[:, 0] * (1.0 + z1)
                    acc_ratio1[t] = rsum(num1 / den)
                    acc_num1[t] = rsum(num1)
                    acc_den[t] = rsum(den)
                zc = np.clip(z, -mixture.EXP_CLAMP, mixture.EXP_CLAMP)
                sat_runs = (zc != z).any(axis=1)
                if include_all:
                    acc_sat[t] = np.count_nonzero(sat_runs)
                else:
                    acc_sat[t] = np.count_nonzero(sat_runs & inc)
                if lin_step:
                    H1 = H1 * (1.0 + z)
                    H2 = H2 * (1.0 - z)
                else:
                    H1 = H1 * np.exp(zc)
                    H2 = H2 * np.exp(-zc)
                if is_eg:
                    scale = u / (H1.sum(axis=1) + H2.sum(axis=1))
                    H1 = H1 * scale[:, None]
                    H2 = H2 * scale[:, None]

            Wb += mus_col * (ec[:, :, None] * a_t[:, None, :])

        ok = np.isfinite(tot_e2) & np.isfinite(Wb).all(axis=(1, 2))
        ok &= np.isfinite(H1).all(axis=1)
        if H2 is not None:
            ok &= np.isfinite(H2).all(axis=1)
        if not is_lms and not lin_step:
            # exact multiplicative updates must keep weights positive
            ok &= (H1 > 0).all(axis=1) & (H2 > 0).all(axis=1)

        base_outer = base_gamma = d_sum = None
        if collect_moments:
            yterm = Y - xm_rec if affine else Y
            if include_all:
                Dm = D_rec
                ym = yterm
            else:
                Dm = np.where(inc[:, None, None], D_rec, 0.0)
                ym = np.where(inc[:, None], yterm, 0.0)
            base_outer = np.einsum("rti,rtj->tij", Dm, Dm)
            base_gamma = np.einsum("rti,rt->ti", Dm, ym)
            d_sum = (ym * ym).sum(axis=0)

    diverged_mask = ~ok
    partial = _BlockPartial(
        included=B if include_all else int(np.count_nonzero(inc)),
        diverged=0,
        e2=acc_e2, ec2=acc_ec2, wa=acc_wa, wa_diag=acc_diag,
        wa_cross=acc_cross, sat=acc_sat, lin=acc_lin,
        quot_ratio1=acc_ratio1, quot_num1=acc_num1, quot_den=acc_den,
        base_outer=base_outer, base_gamma=base_gamma, d=d_sum,
    )
    return partial, diverged_mask


def _run_block(res: ResolvedExperiment, lo: int, hi: int, calib: bool,
               collect_moments: bool) -> _BlockPartial:
    B = hi - lo
    T = res.config.horizon
    sig = res.signal_config()
    A = np.empty((B, T, res.filter_order))
    Y = np.empty((B, T))
    for r in range(B):
        reg, noi = run_streams(res.config.seed, lo + r, calib=calib)
        A[r], Y[r] = signal_model.generate_block(sig, reg, noi, T)

    partial, diverged = _block_pass(res, A, Y, None, collect_moments)
    if diverged.any():
        # excluded runs evolve identically; only the sums change, so a
        # single masked re-run is exact
        partial, _ = _block_pass(res, A, Y, ~diverged, collect_moments)
        partial.diverged = int(np.count_nonzero(diverged))
        partial.included = B - partial.diverged
    return partial


def _run_block_args(args):
    return _run_block(*args)


def _worker_count(requested: int | None, n_blocks: int) -> int:
    if requested is None:
        envval = os.environ.get("BREGMIX_THREADS", "").strip()
        if envval:
            try:
                requested = int(envval)
            except ValueError:
                raise ConfigError([("BREGMIX_THREADS",
                                    "must be a non-negative integer")]) from None
            if requested < 0:
                raise ConfigError([("BREGMIX_THREADS",
                                    "must be a non-negative integer")])
        else:
            requested = 0
    if requested == 0:
        requested = os.cpu_count() or 1
    return max(1, min(requested, n_blocks))


def _collect_blocks(res: ResolvedExperiment, runs: int, calib: bool,
                    collect_moments: bool, workers: int | None):
    bounds = [(lo, min(lo + BLOCK_RUNS, runs))
              for lo in range(0, runs, BLOCK_RUNS)]
    n_workers = _worker_count(workers, len(bounds))
    args = [(res, lo, hi, calib, collect_moments) for lo, hi in bounds]
    if n_workers == 1:
        partials = [_run_block(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            partials = list(pool.map(_run_block_args, args))
    return partials


def _sum_field(partials, name):
    arrays = [getattr(p, name) for p in partials]
    if arrays[0] is None:
        return None
    total = arrays[0].copy()
    for arr in arrays[1:]:
        total += arr
    return total


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

@dataclass
class CurveSet:
    """Decimated ensemble averages plus optional theory counterparts.

    All series share ``len(t)`` rows.  MSE-like series hold window means;
    weight series hold end-of-window values; ``saturation`` holds window
    sums of clamped-step counts across runs.
    """

    t: np.ndarray
    mse_mixture: np.ndarray
    mse_constituents: np.ndarray
    weights_mean: np.ndarray
    moment_labels: tuple[tuple[int, int], ...]
    moments_empirical: np.ndarray
    lin_diag: np.ndarray
    quot_diag: np.ndarray
    saturation: np.ndarray
    theory_weights_mean: np.ndarray | None
    theory_moments: np.ndarray | None
    theory_mse: np.ndarray | None
    resolved: dict
    algorithm: str
    diverged_runs: int
    included_runs: int
    initial_weights: np.ndarray
    moment_estimates: transient.MomentEstimates | None = None
    theory_full: transient.TheoreticalMoments | None = None


def _window_bounds(T: int, dec: int):
    starts = np.arange(0, T, dec)
    ends = np.minimum(starts + dec, T)
    return starts, ends


def _window_mean(series: np.ndarray, starts, ends) -> np.ndarray:
    csum = np.cumsum(series, axis=0)
    zero = np.zeros((1,) + series.shape[1:])
    csum = np.concatenate([zero, csum], axis=0)
    widths = (ends - starts).reshape((-1,) + (1,) * (series.ndim - 1))
    return (csum[ends] - csum[starts]) / widths


def _window_last(series: np.ndarray, ends) -> np.ndarray:
    return series[ends - 1]


def _window_sum(series: np.ndarray, starts, ends) -> np.ndarray:
    csum = np.cumsum(series, axis=0)
    zero = np.zeros((1,) + series.shape[1:], dtype=series.dtype)
    csum = np.concatenate([zero, csum], axis=0)
    return csum[ends] - csum[starts]


def run_theory(res: ResolvedExperiment,
               moments: transient.MomentEstimates) -> transient.TheoreticalMoments:
    """Evolve the mean/second-moment recursions over the moment horizon."""
    cfg = res.config.mixture
    if cfg.algorithm.endswith("_lms"):
        raise ConfigError([("theory.enabled",
                            "moment recursions are defined for EGU/EG combiners only")])
    T = moments.horizon
    k = moments.dim
    q = mixture.augmented_weights(res.initial_mixture_state())
    if q.shape != (k,):
        raise ValueError("moment dimension does not match the combiner")
    Q = np.outer(q, q)
    q_traj = np.empty((T, k))
    Q_traj = np.empty((T, k, k))
    is_eg = cfg.algorithm.endswith("_eg")
    for t in range(T):
        q_traj[t] = q
        Q_traj[t] = Q
        if t == T - 1:
            break
        gamma_t = moments.gamma[t]
        Gamma_t = moments.Gamma[t]
        try:
            if is_eg:
                q_next = transient.eg_mean_step(q, Q, gamma_t, Gamma_t,
                                                cfg.u, cfg.mu)
                Q_next = transient.eg_second_moment_step(q, Q, gamma_t, Gamma_t,
                                                         cfg.u, cfg.mu)
                q, Q = q_next, Q_next
            else:
                q, Q = transient.egu_moment_step(q, Q, gamma_t, Gamma_t, cfg.mu)
        except DegenerateMomentError as exc:
            raise DegenerateMomentError(str(exc), t=t) from None
    return transient.TheoreticalMoments(q_a=q_traj, Q_a=Q_traj)


def run_ensemble(config: ExperimentConfig,
                 workers: int | None = None) -> CurveSet:
    """Execute the full Monte Carlo experiment described by ``config``."""
    res = resolve(config)
    T = config.horizon
    runs = config.runs
    use_main_moments = config.theory.enabled and config.theory.moment_runs is None

    partials = _collect_blocks(res, runs, calib=False,
                               collect_moments=use_main_moments,
                               workers=workers)
    diverged = sum(p.diverged for p in partials)
    included = sum(p.included for p in partials)
    if diverged > _DIVERGED_FRACTION_LIMIT * runs:
        raise EnsembleDivergedError(diverged, runs)

    n = float(included)
    mse = _sum_field(partials, "e2") / n
    mse_c = _sum_field(partials, "ec2") / n
    wa_mean = _sum_field(partials, "wa") / n
    diag_mean = _sum_field(partials, "wa_diag") / n
    cross_sum = _sum_field(partials, "wa_cross")
    sat = _sum_field(partials, "sat")

    alg = config.mixture.algorithm
    is_lms = alg.endswith("_lms")
    is_eg = alg.endswith("_eg")

    if is_lms:
        lin = np.full(T, np.nan)
    else:
        lin = _sum_field(partials, "lin") / n
    if is_eg:
        v1 = config.mixture.u * (_sum_field(partials, "quot_ratio1") / n)
        v2 = (config.mixture.u * (_sum_field(partials, "quot_num1") / n)
              / (_sum_field(partials, "quot_den") / n))
        with np.errstate(all="ignore"):
            quot = (v1 - v2) ** 2 / np.abs(v1 * v2)
    else:
        quot = np.full(T, np.nan)

    # requested second-moment entries in order, from diag / cross sums
    cross_index = {pair: ci for ci, pair in enumerate(_cross_pairs(res))}
    sel = res.moment_entries
    moments_emp = np.empty((T, len(sel)))
    for col, (i, j) in enumerate(sel):
        if i == j:
            moments_emp[:, col] = diag_mean[:, i - 1]
        else:
            key = (min(i, j) - 1, max(i, j) - 1)
            moments_emp[:, col] = cross_sum[:, cross_index[key]] / n

    # input moments for the theory recursions
    moment_estimates = None
    theory_full = None
    theory_mse_full = None
    if config.theory.enabled:
        if use_main_moments:
            mp = partials
            n_mom = n
        else:
            mp = _collect_blocks(res, config.theory.moment_runs, calib=True,
                                 collect_moments=True, workers=workers)
            mom_div = sum(p.diverged for p in mp)
            if mom_div > _DIVERGED_FRACTION_LIMIT * config.theory.moment_runs:
                raise EnsembleDivergedError(mom_div, config.theory.moment_runs)
            n_mom = float(sum(p.included for p in mp))
        S = _sum_field(mp, "base_outer") / n_mom
        g = _sum_field(mp, "base_gamma") / n_mom
        d = _sum_field(mp, "d") / n_mom
        gamma_aug = np.concatenate([g, -g], axis=1)
        Gamma_aug = np.block([[S, -S], [-S, S]])
        moment_estimates = transient.MomentEstimates(gamma=gamma_aug,
                                                     Gamma=Gamma_aug, d=d)
        theory_full = run_theory(res, moment_estimates)
        theory_mse_full = np.array([
            transient.mse_evolution(theory_full.q_a[t], theory_full.Q_a[t],
                                    gamma_aug[t], Gamma_aug[t], d[t])
            for t in range(T)
        ])

    # decimation
    starts, ends = _window_bounds(T, config.output.decimation)
    t_idx = ends - 1
    curves = CurveSet(
        t=t_idx,
        mse_mixture=_window_mean(mse, starts, ends),
        mse_constituents=_window_mean(mse_c, starts, ends),
        weights_mean=_window_last(wa_mean, ends),
        moment_labels=sel,
        moments_empirical=_window_last(moments_emp, ends),
        lin_diag=_window_mean(lin, starts, ends),
        quot_diag=_window_mean(quot, starts, ends),
        saturation=_window_sum(sat, starts, ends),
        theory_weights_mean=None,
        theory_moments=None,
        theory_mse=None,
        resolved=resolved_config_dict(res),
        algorithm=alg,
        diverged_runs=diverged,
        included_runs=included,
        initial_weights=mixture.augmented_weights(res.initial_mixture_state()),
        moment_estimates=moment_estimates,
        theory_full=theory_full,
    )
    if theory_full is not None:
        curves.theory_weights_mean = _window_last(theory_full.q_a, ends)
        th_mom = np.empty((T, len(sel)))
        for col, (i, j) in enumerate(sel):
            th_mom[:, col] = theory_full.Q_a[:, i - 1, j - 1]
        curves.theory_moments = _window_last(th_mom, ends)
        curves.theory_mse = _window_mean(theory_mse_full, starts, ends)
    return curves


def _cross_pairs(res: ResolvedExperiment):
    # canonical 0-based (lo, hi) pairs for the requested off-diagonal entries
    cross = {(min(i, j) - 1, max(i, j) - 1)
             for i, j in res.moment_entries if i != j}
    return sorted(cross)


# ---------------------------------------------------------------------------
# Assumption diagnostics (single-sample and ensemble forms)
# ---------------------------------------------------------------------------

def _state_error_and_base(state, x, y):
    x = np.asarray(x, dtype=float)
    if isinstance(state, mixture.AffineMixtureState):
        base = x[:-1] - x[-1]
        signed = float((state.lambda1 - state.lambda2) @ base)
        total = float(state.lambda1.sum() + state.lambda2.sum())
        if state.u is not None:
            signed *= state.u / total
        pred = x[-1] + signed
        return y - pred, base, total
    if isinstance(state, mixture.UnconstrainedMixtureState):
        signed = float((state.w1 - state.w2) @ x)
        total = float(state.w1.sum() + state.w2.sum())
        if state.u is not None:
            signed *= state.u / total
        return y - signed, x, total
    raise ValueError("requires an EGU/EG combiner state")


def linearization_diagnostic(state, x, y, mu) -> float:
    """Normalized squared gap between ``exp(z)`` and ``1 + z`` for the first
    coordinate, with ``z = mu * e * r1`` and ``r1`` the first combiner
    regressor coordinate."""
    e, base, _ = _state_error_and_base(state, x, y)
    z = mu * e * base[0]
    a = np.exp(z)
    b = 1.0 + z
    return float((a - b) ** 2 / np.sqrt(a * a * b * b))


def quotient_diagnostic(states, xs, ys) -> float:
    """First-coordinate gap between the ensemble mean of the normalized
    update quotient and the quotient of the ensemble means."""
    states = list(states)
    if len(states) < 2:
        raise ValueError("quotient diagnostic needs at least two runs")
    ratios = []
    nums = []
    dens = []
    u = None
    for state, x, y in zip(states, xs, ys):
        if getattr(state, "u", None) is None:
            raise ValueError("quotient diagnostic requires EG states")
        u = state.u
        e, base, total = _state_error_and_base(state, x, y)
        h1 = state.lambda1 if isinstance(state, mixture.AffineMixtureState) else state.w1
        h2 = state.lambda2 if isinstance(state, mixture.AffineMixtureState) else state.w2
        dot = float((h1 - h2) @ base)
        z1 = state.mu * e * base[0]
        num1 = h1[0] * (1.0 + z1)
        den = total + state.mu * e * dot
        ratios.append(num1 / den)
        nums.append(num1)
        dens.append(den)
    v1 = u * float(np.mean(ratios))
    mean_den = float(np.mean(dens))
    if abs(mean_den) < 1e-300:
        raise DegenerateMomentError("quotient denominator degenerate")
    v2 = u * float(np.mean(nums)) / mean_den
    norm = abs(v1 * v2)
    if norm < 1e-300:
        raise DegenerateMomentError("quotient diagnostic degenerate")
    return float((v1 - v2) ** 2 / norm)


# ---------------------------------------------------------------------------
# Curve summaries used by compare and the acceptance suite
# ---------------------------------------------------------------------------

def effective_weight_series(curves: CurveSet, index: int = 0) -> np.ndarray:
    """Mean effective combination weight of constituent ``index`` over time."""
    alg = curves.algorithm
    wm = curves.weights_mean
    k = wm.shape[1]
    if alg.endswith("_lms"):
        if alg.startswith("affine") and index == k:
            return 1.0 - wm.sum(axis=1)
        return wm[:, index]
    half = k // 2
    if alg.startswith("affine") and index == half:
        signed = wm[:, :half] - wm[:, half:]
        return 1.0 - signed.sum(axis=1)
    return wm[:, index] - wm[:, half + index]


def final_window_mean(series: np.ndarray, fraction: float = 0.1) -> float:
    n = len(series)
    w = max(1, int(round(n * fraction)))
    return float(np.mean(series[n - w:]))


def iterations_to_90pct(curves: CurveSet, index: int = 0) -> int:
    """First reported t at which the mean effective weight of constituent
    ``index`` has covered 90% of the distance from its initial to its
    final-window value."""
    series = effective_weight_series(curves, index)
    start = series[0]
    target = final_window_mean(series)
    threshold = start + 0.9 * (target - start)
    if target >= start:
        hits = np.nonzero(series >= threshold)[0]
    else:
        hits = np.nonzero(series <= threshold)[0]
    if len(hits) == 0:
        return int(curves.t[-1])
    return int(curves.t[hits[0]])
