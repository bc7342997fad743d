"""Acceptance suite.

Each test prints one PASS/FAIL line per criterion (run with ``-s`` to see
them as they execute).  The heavy Monte Carlo ensembles are session-scoped
fixtures shared across criteria.

Summary of the scenarios:

* sparse10: ten LMS constituents over a seventh-order system, two slow
  filters (mu = 0.002) and eight fast ones (mu in [0.1, 0.11]); the optimal
  combination is sparse ([0.5, 0, 0, 0, 0, 0.5, 0, ...]).
* two_filter: two LMS constituents (mu = 0.002 / 0.1) whose optimal
  combination is approximately [1, 0]; used for the moment-recursion
  (theory) checks at SNR = 1 dB.
"""

import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from bregmix import harness, mixture, transient

W_O = [0.25, -0.47, -0.37, 0.045, -0.18, 0.78, 0.147]
SEED = 20240817


def _criterion(tag, ok, detail):
    line = f"[criterion {tag}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


def _sparse10_config(algorithm, mu, u=None, snr=-10.0, runs=200):
    mix = {"algorithm": algorithm, "mu": mu}
    if u is not None:
        mix["u"] = u
    return harness.ExperimentConfig.from_dict({
        "seed": SEED, "runs": runs, "horizon": 20000,
        "signal": {"w_o": W_O, "noise_variance": 0.3, "snr_db": snr},
        "constituents": ([{"mu": 0.002}] + [{"mu_range": [0.1, 0.11]}] * 4
                         + [{"mu": 0.002}] + [{"mu_range": [0.1, 0.11]}] * 4),
        "mixture": mix,
        "output": {"decimation": 1},
    })


def _two_filter_config(algorithm, mu, u=None, entries=None, runs=500):
    mix = {"algorithm": algorithm, "mu": mu}
    if u is not None:
        mix["u"] = u
    return harness.ExperimentConfig.from_dict({
        "seed": SEED + 1, "runs": runs, "horizon": 5000,
        "signal": {"w_o": W_O, "noise_variance": 0.3, "snr_db": 1.0},
        "constituents": [{"mu": 0.002}, {"mu": 0.1}],
        "mixture": mix,
        "theory": {"enabled": True},
        "output": {"decimation": 1,
                   "moment_entries": entries or [[1, 1], [1, 2], [2, 3], [3, 4]]},
    })


@pytest.fixture(scope="session")
def sparse10_eg():
    return harness.run_ensemble(_sparse10_config("affine_eg", 0.0008, u=500))


@pytest.fixture(scope="session")
def sparse10_lms():
    return harness.run_ensemble(_sparse10_config("affine_lms", 0.005))


@pytest.fixture(scope="session")
def fig4(request):
    cases = {}
    for snr, eg_mu, eg_u in ((-5.0, 0.0005, 500), (5.0, 0.002, 100)):
        for alg, mu, u in (("affine_eg", eg_mu, eg_u),
                           ("affine_egu", 0.005, None),
                           ("affine_lms", 0.005, None)):
            cases[(snr, alg)] = harness.run_ensemble(
                _sparse10_config(alg, mu, u=u, snr=snr))
    return cases


@pytest.fixture(scope="session")
def two_filter_egu():
    return harness.run_ensemble(_two_filter_config("unconstrained_egu", 0.01))


@pytest.fixture(scope="session")
def two_filter_eg():
    return harness.run_ensemble(
        _two_filter_config("unconstrained_eg", 0.01, u=3,
                           entries=[[2, 2], [1, 2], [2, 3], [2, 4]]))


def _iters_to_90pct_of_final(curves, index=0):
    series = harness.effective_weight_series(curves, index)
    final = harness.final_window_mean(series)
    hits = np.nonzero(series >= 0.9 * final)[0]
    return int(curves.t[hits[0]]) if len(hits) else int(curves.t[-1])


def _rel_rms(theory, empirical):
    return float(np.linalg.norm(theory - empirical)
                 / np.linalg.norm(empirical))


# ---------------------------------------------------------------------------
# 1. sparse-mixture convergence of the first combination weight to 0.5
# ---------------------------------------------------------------------------

def test_criterion_1_sparse_mixture_convergence(sparse10_eg):
    w1 = harness.effective_weight_series(sparse10_eg, 0)
    final = harness.final_window_mean(w1)
    _criterion(1, 0.45 <= final <= 0.55,
               f"final-window mean of first combination weight = {final:.4f} "
               f"(target [0.45, 0.55])")


# ---------------------------------------------------------------------------
# 2. EG reaches 90% of its final first weight in fewer iterations than LMS
# ---------------------------------------------------------------------------

def test_criterion_2_eg_faster_than_lms(sparse10_eg, sparse10_lms):
    it_eg = _iters_to_90pct_of_final(sparse10_eg)
    it_lms = _iters_to_90pct_of_final(sparse10_lms)
    _criterion(2, it_eg < it_lms,
               f"iterations to 90% of final weight: EG {it_eg} vs LMS {it_lms}")


# ---------------------------------------------------------------------------
# 3. EGU and LMS perform similarly in both comparison configurations
# ---------------------------------------------------------------------------

def test_criterion_3_egu_similar_to_lms(fig4):
    all_ok = True
    details = []
    for snr in (-5.0, 5.0):
        egu = fig4[(snr, "affine_egu")]
        lms = fig4[(snr, "affine_lms")]
        mse_egu = harness.final_window_mean(egu.mse_mixture)
        mse_lms = harness.final_window_mean(lms.mse_mixture)
        mse_ok = abs(mse_egu - mse_lms) <= 0.05 * mse_lms
        it_egu = _iters_to_90pct_of_final(egu)
        it_lms = _iters_to_90pct_of_final(lms)
        it_ok = abs(it_egu - it_lms) <= 0.25 * max(it_egu, it_lms)
        all_ok = all_ok and mse_ok and it_ok
        details.append(
            f"SNR{snr:+.0f}: final MSE {mse_egu:.5f}/{mse_lms:.5f} "
            f"({'ok' if mse_ok else 'MISMATCH'}), iterations {it_egu}/{it_lms} "
            f"({'ok' if it_ok else 'MISMATCH'})")
    # the EG member of each trio converges fastest, as in the comparison plots
    for snr in (-5.0, 5.0):
        it_eg = _iters_to_90pct_of_final(fig4[(snr, "affine_eg")])
        others = [_iters_to_90pct_of_final(fig4[(snr, a)])
                  for a in ("affine_egu", "affine_lms")]
        eg_ok = it_eg < min(others)
        all_ok = all_ok and eg_ok
        details.append(f"SNR{snr:+.0f}: EG fastest "
                       f"({it_eg} vs {min(others)}: {'ok' if eg_ok else 'NO'})")
    _criterion(3, all_ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 4/5. moment recursions track the ensemble for the two-filter setup
# ---------------------------------------------------------------------------

def _check_theory_tracking(tag, curves):
    ok = True
    details = []
    k = curves.weights_mean.shape[1]
    for i in range(k):
        dev = _rel_rms(curves.theory_weights_mean[:, i],
                       curves.weights_mean[:, i])
        ok = ok and dev <= 0.10
        details.append(f"qa_{i + 1}:{dev:.3%}")
    for col, (i, j) in enumerate(curves.moment_labels):
        dev = _rel_rms(curves.theory_moments[:, col],
                       curves.moments_empirical[:, col])
        ok = ok and dev <= 0.15
        details.append(f"Qa_{i}_{j}:{dev:.3%}")
    _criterion(tag, ok,
               "relative RMS theory vs ensemble (limits 10% / 15%): "
               + ", ".join(details))


def test_criterion_4_theory_tracks_egu(two_filter_egu):
    _check_theory_tracking(4, two_filter_egu)


def test_criterion_5_theory_tracks_eg(two_filter_eg):
    _check_theory_tracking(5, two_filter_eg)


# ---------------------------------------------------------------------------
# 6. linearization diagnostic: small throughout, and its scaling under
#    a halved step size
# ---------------------------------------------------------------------------

def test_criterion_6a_linearization_small(sparse10_eg, two_filter_egu,
                                          two_filter_eg):
    worst = max(float(np.nanmax(c.lin_diag))
                for c in (sparse10_eg, two_filter_egu, two_filter_eg))
    _criterion("6a", worst <= 1e-3,
               f"max linearization diagnostic across configurations = {worst:.3e}")


def test_criterion_6b_mu_halving_factor(two_filter_egu):
    half = harness.run_ensemble(_two_filter_config("unconstrained_egu", 0.005))
    avg_full = float(np.nanmean(two_filter_egu.lin_diag))
    avg_half = float(np.nanmean(half.lin_diag))
    factor = avg_full / avg_half
    # stated bracket is [3.0, 5.0]; the diagnostic's numerator is a squared
    # second-order gap, so the measured factor sits near 16 (see ledger)
    _criterion("6b", 3.0 <= factor <= 5.0,
               f"time-average scaling factor under halved mu = {factor:.2f} "
               f"(stated bracket [3.0, 5.0])")


# ---------------------------------------------------------------------------
# 7. closed-form steps minimize the linearized entropy-penalized objective
# ---------------------------------------------------------------------------

def _numeric_coordinate_minimum(z0, grad, mu):
    def objective(zv):
        return zv * math.log(zv / z0) + z0 - zv + mu * grad * zv

    res = minimize_scalar(objective,
                          bounds=(z0 * math.exp(-2.0), z0 * math.exp(2.0)),
                          method="bounded", options={"xatol": 1e-14 * z0})
    return res.x


def test_criterion_7_minimizer_oracle():
    rng = np.random.default_rng(SEED + 7)
    m = 3
    worst = 0.0
    for case in range(1000):
        algorithm = ("affine_egu", "affine_eg", "unconstrained_egu",
                     "unconstrained_eg")[case % 4]
        affine = algorithm.startswith("affine")
        is_eg = algorithm.endswith("_eg")
        mu = float(rng.uniform(1e-4, 1e-2))
        u = float(rng.uniform(1.0, 4.0)) if is_eg else None
        k = m - 1 if affine else m
        h1 = rng.uniform(0.05, 2.0, k)
        h2 = rng.uniform(0.05, 2.0, k)
        if is_eg:
            scale = u / (h1.sum() + h2.sum())
            h1 *= scale
            h2 *= scale
        if affine:
            state = mixture.AffineMixtureState(lambda1=h1, lambda2=h2, mu=mu, u=u)
        else:
            state = mixture.UnconstrainedMixtureState(w1=h1, w2=h2, mu=mu, u=u)
        x = rng.standard_normal(m)
        y = float(rng.standard_normal())
        step = mixture.step_function(algorithm)(state, x, y)
        e = step.error
        base = x[:-1] - x[-1] if affine else x
        grads = np.concatenate([-e * base, e * base])
        old = np.concatenate([h1, h2])
        stars = np.array([_numeric_coordinate_minimum(old[i], grads[i], mu)
                          for i in range(2 * k)])
        if is_eg:
            stars *= u / stars.sum()
        new = mixture.augmented_weights(step.next_state)
        worst = max(worst, float(np.max(np.abs(new - stars) / np.abs(stars))))
    _criterion(7, worst <= 1e-6,
               f"1000 random draws, worst per-coordinate relative gap to the "
               f"numerical minimizer = {worst:.2e}")


# ---------------------------------------------------------------------------
# 8. invariant suite
# ---------------------------------------------------------------------------

def test_criterion_8_invariants():
    rng = np.random.default_rng(SEED + 8)
    ok = True
    notes = []

    # positivity and EG mass conservation along random trajectories
    mass_drift = 0.0
    for algorithm, u in (("affine_egu", None), ("affine_eg", 2.5),
                         ("unconstrained_egu", None), ("unconstrained_eg", 1.5)):
        state = mixture.initial_state(algorithm, 4, 0.05, u=u)
        step = mixture.step_function(algorithm)
        for _ in range(300):
            state = step(state, rng.standard_normal(4),
                         float(rng.standard_normal())).next_state
            wa = mixture.augmented_weights(state)
            if not np.all(wa > 0):
                ok = False
                notes.append(f"{algorithm}: positivity violated")
                break
            if u is not None:
                mass_drift = max(mass_drift, abs(wa.sum() - u) / u)
    if mass_drift > 1e-12:
        ok = False
    notes.append(f"EG mass drift {mass_drift:.2e}")

    # affine effective weights sum to one
    worst_sum = 0.0
    for _ in range(200):
        s = mixture.AffineMixtureState(lambda1=rng.uniform(0.01, 2.0, 5),
                                       lambda2=rng.uniform(0.01, 2.0, 5),
                                       mu=0.01)
        worst_sum = max(worst_sum,
                        abs(mixture.affine_effective_weights(s).sum() - 1.0))
    if worst_sum > 1e-12:
        ok = False
    notes.append(f"affine sum gap {worst_sum:.2e}")

    # EG scale invariance of the post-step state
    worst_scale = 0.0
    for c in (1e-4, 0.1, 10.0, 1e4):
        l1 = rng.uniform(0.1, 1.0, 3)
        l2 = rng.uniform(0.1, 1.0, 3)
        x = rng.standard_normal(4)
        y = float(rng.standard_normal())
        a = mixture.affine_eg_step(
            mixture.AffineMixtureState(lambda1=l1, lambda2=l2, mu=0.02, u=2.0), x, y)
        b = mixture.affine_eg_step(
            mixture.AffineMixtureState(lambda1=c * l1, lambda2=c * l2, mu=0.02,
                                       u=2.0), x, y)
        va = mixture.augmented_weights(a.next_state)
        vb = mixture.augmented_weights(b.next_state)
        worst_scale = max(worst_scale, float(np.max(np.abs(va - vb) / va)))
    if worst_scale > 1e-12:
        ok = False
    notes.append(f"EG scale-invariance gap {worst_scale:.2e}")

    # mu = 0 fixed points of all recursions
    q = rng.uniform(0.1, 1.0, 4)
    Q = np.outer(q, q) + 0.1 * np.eye(4)
    g = rng.standard_normal(4)
    G = np.eye(4) * 0.5
    q2, Q2 = transient.egu_moment_step(q, Q, g, G, mu=0.0)
    fixed = np.array_equal(q2, q) and np.allclose(Q2, Q, rtol=1e-15)
    u_mass = float(q.sum())
    q3 = transient.eg_mean_step(q, Q, g, G, u=u_mass, mu=0.0)
    fixed = fixed and np.allclose(q3, q, rtol=1e-12)
    u_sq = math.sqrt(float(np.ones(4) @ Q @ np.ones(4)))
    Q3 = transient.eg_second_moment_step(q, Q, g, G, u=u_sq, mu=0.0)
    fixed = fixed and np.allclose(Q3, Q, rtol=1e-12)
    if not fixed:
        ok = False
    notes.append(f"mu=0 fixed points {'hold' if fixed else 'BROKEN'}")

    # empirical covariance diagonals from a real ensemble
    cfg = harness.ExperimentConfig.from_dict({
        "seed": SEED + 9, "runs": 32, "horizon": 300,
        "signal": {"w_o": [0.5, -0.3, 0.2], "noise_variance": 0.1, "tau": 1.0},
        "constituents": [{"mu": 0.05}, {"mu": 0.1}, {"mu": 0.02}],
        "mixture": {"algorithm": "unconstrained_eg", "mu": 0.02, "u": 2.0},
        "output": {"decimation": 1},
    })
    curves = harness.run_ensemble(cfg)
    min_var = np.inf
    for col, (i, j) in enumerate(curves.moment_labels):
        var = curves.moments_empirical[:, col] - curves.weights_mean[:, i - 1]**2
        min_var = min(min_var, float(var.min()))
    if min_var < -1e-10:
        ok = False
    notes.append(f"min empirical variance {min_var:.2e}")

    _criterion(8, ok, "; ".join(notes))


# ---------------------------------------------------------------------------
# 9. mean-convergence condition and the optimum combination
# ---------------------------------------------------------------------------

def test_criterion_9_mean_convergence(two_filter_egu):
    curves = two_filter_egu
    moments = curves.moment_estimates
    m = 2
    T = moments.horizon
    radii = np.empty(T)
    for t in range(T):
        gamma_base = moments.Gamma[t][:m, :m]
        radii[t] = transient.convergence_condition(curves.weights_mean[t],
                                                   gamma_base,
                                                   0.01)
    # startup boundary: at t=0 the zero-initialized constituents output
    # nothing, and at t=1 every filter weight vector is proportional to
    # y(0)a(0), so the regressor moment matrix is rank deficient and the
    # contraction factor equals one in the unexcited direction; the
    # condition is informative from t=2 onwards
    boundary_ok = bool(np.all(radii[:2] <= 1.0 + 1e-12))
    interior_ok = bool(np.all(radii[2:] < 1.0))

    R = moments.Gamma[T - 1][:m, :m]
    p = moments.gamma[T - 1][:m]
    sol = transient.optimum_weights(R, p)
    w_final = harness.effective_weight_series(curves, 0)[-1]
    gap = abs(w_final - sol.w0[0])
    w0_ok = gap <= 0.1
    _criterion(9, boundary_ok and interior_ok and w0_ok,
               f"radius(0..1)={np.round(radii[:2], 9).tolist()}, "
               f"max radius(t>=2)={radii[2:].max():.8f}, "
               f"w0={np.round(sol.w0, 3).tolist()}, "
               f"|E[w1](T) - w0_1|={gap:.4f} (limit 0.1)")


# ---------------------------------------------------------------------------
# 10. byte-for-byte determinism, serial vs parallel
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    from bregmix import cli

    cfg = harness.ExperimentConfig.from_dict({
        "seed": SEED + 10, "runs": harness.BLOCK_RUNS + 6, "horizon": 400,
        "signal": {"w_o": W_O, "noise_variance": 0.3, "snr_db": 1.0},
        "constituents": [{"mu": 0.002}, {"mu_range": [0.1, 0.11]}],
        "mixture": {"algorithm": "unconstrained_egu", "mu": 0.01},
        "theory": {"enabled": True},
        "output": {"decimation": 10},
    })
    names = ("mse.csv", "weights_mean.csv", "weights_moment.csv",
             "diagnostics.csv")
    payloads = []
    for label, workers in (("serial", 1), ("parallel", 3), ("again", 1)):
        outdir = tmp_path / label
        cli.write_curves(harness.run_ensemble(cfg, workers=workers), outdir)
        payloads.append({n: (outdir / n).read_bytes() for n in names})
    identical = all(payloads[0] == other for other in payloads[1:])
    _criterion(10, identical,
               "CSV artifacts identical across serial, parallel and repeated "
               "execution")
