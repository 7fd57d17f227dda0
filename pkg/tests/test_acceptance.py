"""Acceptance criteria 1-11, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see lines as they are
produced; the terminal summary repeats them in order. Criteria that are not
attained at desk scale are strict expected failures: they still print FAIL,
and the suite breaks if one starts passing without the marker being removed.
"""
import hashlib
import time

import numpy as np
import pytest

from himvi.abc import AbcConfig, mcmc_abc, normal_normal_problem, rejection_abc, smc_abc
from himvi.experiments import (
    classify,
    lv_recovery,
    normal_normal_recovery,
    sequence_experiment,
    stability_experiment,
)
from himvi.lfvi import LfviConfig, lfvi_fit, surrogate_gradients
from himvi.models import NormalNormalModel
from himvi.ndcore import AdamState, RngStream, Tape, grad, ops
from himvi.ratio import make_ratio_estimator, ratio_loss, ratio_train_step
from himvi.variational import make_global_approx

TITLES = {
    1: "gradient correctness",
    2: "ratio oracle recovery",
    3: "conjugate correctness",
    4: "ABC oracle equivalence",
    5: "Lotka-Volterra recovery",
    6: "ratio stability",
    7: "scalability",
    8: "point-mass reduction",
    9: "classifier analogue",
    10: "sequence validity",
    11: "determinism",
}
REPORT = {}
RERUNS = {}

pytestmark = pytest.mark.slow


def record(n, ok, detail):
    REPORT.setdefault(n, []).append((bool(ok), detail))
    print(f"\n[{'PASS' if ok else 'FAIL'}] {n}. {TITLES[n]}: {detail}")


def summary_lines():
    lines = []
    for n, title in TITLES.items():
        parts = REPORT.get(n)
        if not parts:
            lines.append(f"[NOT RUN] {n}. {title}")
            continue
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        lines.append(f"[{status}] {n}. {title}: " + " | ".join(d for _, d in parts))
    return lines


def fingerprint(value) -> str:
    """Digest of a result built from arrays, numbers, strings, lists and dicts."""
    h = hashlib.sha256()

    def feed(v):
        if isinstance(v, dict):
            for k in sorted(v):
                h.update(str(k).encode())
                feed(v[k])
        elif isinstance(v, str):
            h.update(v.encode() + b"\0")
        elif isinstance(v, (list, tuple)) and any(isinstance(i, str) or not np.isscalar(i) for i in v):
            for item in v:
                feed(item)
        else:
            h.update(np.ascontiguousarray(np.asarray(v, dtype=np.float64)).tobytes())

    feed(value)
    return h.hexdigest()


def register(n, fn, value):
    """Remember a fingerprinted run so criterion 11 can repeat it."""
    RERUNS.setdefault(n, (fn, fingerprint(value)))


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


# ------------------------------------------------------------ 1


def _gradient_error(seed, loss):
    rng = RngStream(seed).child(1)
    depth = int(rng.integers(1, 4))
    hidden = tuple(int(h) for h in rng.integers(2, 9, size=depth))
    dx, dz, db = (int(v) for v in rng.integers(1, 4, size=3))
    est = make_ratio_estimator(rng, dx, dz, db, hidden=hidden, init="standard")
    xp, xq = rng.normal(size=(8, dx + dz + db)), rng.normal(size=(8, dx + dz + db))
    est = est.with_stats(np.concatenate([xp, xq]))
    tape = Tape()
    pv = tape.vars(est.params)
    g = grad(tape, ratio_loss(est, xp, xq, loss, pv), pv)
    analytic, numeric = [], []
    h = 1e-6
    for k, v in est.params.items():
        for idx in np.ndindex(v.shape):
            plus = {kk: vv.copy() for kk, vv in est.params.items()}
            minus = {kk: vv.copy() for kk, vv in est.params.items()}
            plus[k][idx] += h
            minus[k][idx] -= h
            numeric.append((float(ratio_loss(est, xp, xq, loss, plus)) - float(ratio_loss(est, xp, xq, loss, minus))) / (2 * h))
            analytic.append(g[k][idx])
    a, f = np.array(analytic), np.array(numeric)
    return np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-12)


def test_c01_gradient_correctness():
    with Timer() as t:
        worst = {loss: max(_gradient_error(seed, loss) for seed in range(100)) for loss in ("log", "hinge")}
    ok = max(worst.values()) < 1e-4 and t.seconds < 30
    record(1, ok, f"worst relative error log {worst['log']:.1e}, hinge {worst['hinge']:.1e} (< 1e-4) over 100 MLPs in {t.seconds:.0f} s (< 30 s)")
    assert ok


# ------------------------------------------------------------ 2


def _ratio_oracle(seed=2):
    rng = RngStream(seed)
    est = make_ratio_estimator(rng, 1, 0, 0, hidden=())
    opt = AdamState(learning_rate=1e-2)
    for _ in range(5000):
        xp, xq = rng.normal(1.0, 1.0, size=(256, 1)), rng.normal(size=(256, 1))
        est, opt, _, _ = ratio_train_step(est, xp, xq, "log", opt)
    r0, r1 = np.asarray(est.logits(np.array([[0.0], [1.0]])))
    return float(r1 - r0), float(r0)


def test_c02_ratio_oracle_recovery():
    with Timer() as t:
        slope, intercept = _ratio_oracle()
    register(2, _ratio_oracle, (slope, intercept))
    ok = abs(slope - 1) <= 0.1 and abs(intercept + 0.5) <= 0.1 and t.seconds < 120
    record(2, ok, f"slope {slope:.3f} (1 +- 0.1), intercept {intercept:.3f} (-0.5 +- 0.1) in {t.seconds:.0f} s (< 120 s)")
    assert ok


# ------------------------------------------------------------ 3


def _conjugate(loss):
    hits, details = 0, []
    with Timer() as t:
        for seed in range(5):
            r = normal_normal_recovery(seed, loss=loss)
            good = abs(r["mean"] - r["exact_mean"]) <= 0.15 and abs(r["std"] / r["exact_std"] - 1) <= 0.25
            hits += good
            details.append(f"{r['mean'] - r['exact_mean']:+.3f}/{r['std'] / r['exact_std']:.2f}")
            if seed == 0:
                register(3, lambda loss=loss: normal_normal_recovery(0, loss=loss), r)
    ok = hits >= 4 and t.seconds < 300
    record(3, ok, f"{loss} loss {hits}/5 seeds (need 4) [mean error/std ratio {', '.join(details)}] in {t.seconds:.0f} s (< 300 s)")
    return ok


def test_c03_conjugate_log_loss():
    assert _conjugate("log")


@pytest.mark.xfail(strict=True, reason="the hinge loss optimum is a clipped sign of the log ratio, whose beta-gradient vanishes")
def test_c03_conjugate_hinge_loss():
    assert _conjugate("hinge")


# ------------------------------------------------------------ 4


ABC_SETTINGS = {
    "rejection": (rejection_abc, AbcConfig(tolerance=0.05, n_simulations=100_000)),
    "mcmc": (mcmc_abc, AbcConfig(tolerance=0.05, n_simulations=10_000, burn_in=2000, proposal_std=0.5, n_chains=16)),
    "smc": (smc_abc, AbcConfig(schedule=(1.0, 0.3, 0.05), n_simulations=20_000, population_size=1000)),
}


def _abc_mean(name, seed=0):
    sampler, cfg = ABC_SETTINGS[name]
    res = sampler(normal_normal_problem(NormalNormalModel(), np.array([[1.0]])), cfg, RngStream(seed))
    return float(np.average(res.samples[:, 0], weights=res.weights))


def test_c04_abc_oracle_equivalence():
    with Timer() as t:
        means = {name: _abc_mean(name) for name in ABC_SETTINGS}
    register(4, lambda: _abc_mean("smc"), means["smc"])
    ok = all(abs(m - 0.5) <= 0.07 for m in means.values()) and t.seconds < 300
    shown = ", ".join(f"{k} {v:.3f}" for k, v in means.items())
    record(4, ok, f"posterior means {shown} (0.5 +- 0.07) in {t.seconds:.0f} s (< 300 s)")
    assert ok


# ------------------------------------------------------------ 5


@pytest.mark.xfail(strict=True, reason="mean-field q cannot represent the beta1-beta2 ridge and is overconfident along it")
def test_c05_lotka_volterra_recovery():
    covered, rows = 0, []
    with Timer() as t:
        for seed in range(5):
            r = lv_recovery(seed)
            hit = all(r["metrics"]["ci95_contains"])
            covered += hit
            contraction = np.exp(r["log_scale"]) / r["prior_scale"]
            rows.append(f"seed {seed}: {''.join('y' if c else 'n' for c in r['metrics']['ci95_contains'])} sd/prior {np.round(contraction, 2).tolist()}")
            if seed == 0:
                register(5, lambda: lv_recovery(0)["fit"].q_global.params["loc"], r["fit"].q_global.params["loc"])
    ok = covered >= 3 and t.seconds <= 1800
    record(5, ok, f"{covered}/5 seeds cover all 3 dims (need 3) [{'; '.join(rows)}] in {t.seconds:.0f} s (<= 1800 s)")
    assert ok


# ------------------------------------------------------------ 6


def test_c06_ratio_stability():
    fast, above, rows = 0, 0, []
    with Timer() as t:
        for seed in range(5):
            c = stability_experiment("posterior", seed=seed, n_iterations=1000)
            b = stability_experiment("random", seed=seed, n_iterations=5000)
            v = c.variances
            first = next((it for it, x in zip(c.iterations, v) if x <= 0.1 * v[0]), None)
            c_term, b_term = np.median(v[-5:]), np.median(b.variances[-5:])
            fast += first is not None and first <= 500
            above += b_term > c_term
            rows.append(f"seed {seed}: (c) <=10% at {first}, (b) {b_term:.0f} vs (c) {c_term:.0f}")
            if seed == 0:
                register(6, lambda: stability_experiment("posterior", seed=0, n_iterations=1000).samples, c.samples)
    ok = fast >= 3 and above >= 3 and t.seconds < 600
    record(6, ok, f"(c) within 500 steps on {fast}/5 seeds, (b) above (c) on {above}/5 (majority) [{'; '.join(rows)}] in {t.seconds:.0f} s (< 600 s)")
    assert ok


# ------------------------------------------------------------ 7


def _scaling_fit(N):
    model = NormalNormalModel()
    x, _ = model.generate(RngStream(0), N)
    return lfvi_fit(model, x, LfviConfig(n_iterations=300, batch_size=64, seed=0))


def test_c07_scalability():
    with Timer() as t:
        small, large = _scaling_fit(1000), _scaling_fit(100_000)
    a, b = np.median(small.wall_ms), np.median(large.wall_ms)
    register(7, lambda: _scaling_fit(1000).q_global.params["loc"], small.q_global.params["loc"])
    ratio = max(a, b) / min(a, b)
    ok = ratio < 2 and t.seconds < 600
    record(7, ok, f"median iteration {a:.2f} ms at N=1e3 vs {b:.2f} ms at N=1e5, ratio {ratio:.2f} (< 2) in {t.seconds:.0f} s (< 600 s)")
    assert ok


# ------------------------------------------------------------ 8


class _FlatNormalModel(NormalNormalModel):
    flat_prior = True


def test_c08_point_mass_reduction():
    model = _FlatNormalModel()
    x, _ = model.generate(RngStream(4), 16)
    est = make_ratio_estimator(RngStream(5), 1, 0, 1, init="standard").with_stats(np.c_[x, np.ones(16)])
    q = make_global_approx("point_mass", 1, value=[0.3])
    hashes = (q.hash(), est.hash())
    value, g = surrogate_gradients(model, q, None, est, x, 16, RngStream(6))
    tape = Tape()
    lam = tape.var(np.array([0.3]))
    direct = ops.sum(est.logits(ops.concat([x, ops.broadcast_to(ops.reshape(lam, (1, 1)), (16, 1))], axis=1)))
    (expected,) = grad(tape, direct, [lam])
    err = max(abs(value - float(direct.value)), float(np.max(np.abs(g[("global", "value")] - expected))))
    unchanged = hashes == (q.hash(), est.hash())
    ok = err <= 1e-10 and unchanged
    record(8, ok, f"max |difference| {err:.1e} (<= 1e-10), parameter hashes unchanged: {unchanged}")
    assert ok


# ------------------------------------------------------------ 9


def test_c09_classifier_analogue():
    with Timer() as t:
        vi = {name: classify(name, "gan", "vi") for name in ("pima", "crabs")}
        mp = {name: classify(name, "gan", "map") for name in ("pima", "crabs")}
    register(9, lambda: classify("crabs", "gan", "vi")["test_error"], vi["crabs"]["test_error"])
    bnn = {name: classify(name, "bnn", "vi")["test_error"] for name in ("pima", "crabs")}
    map_ok = all(not r["diverged"] and np.isfinite(r["test_error"]) for r in mp.values())
    ok = vi["pima"]["test_error"] <= 0.30 and vi["crabs"]["test_error"] <= 0.15 and map_ok and t.seconds < 900
    record(
        9,
        ok,
        f"GAN+VI test error pima {vi['pima']['test_error']:.3f} (<= 0.30), crabs {vi['crabs']['test_error']:.3f} (<= 0.15); "
        f"GAN+MAP completed {map_ok} (pima {mp['pima']['test_error']:.3f}, crabs {mp['crabs']['test_error']:.3f}); "
        f"BNN+VI baseline pima {bnn['pima']:.3f}, crabs {bnn['crabs']:.3f}; {t.seconds:.0f} s (< 900 s)",
    )
    assert ok


# ------------------------------------------------------------ 10


def test_c10_sequence_validity():
    with Timer() as t:
        r = sequence_experiment(seed=0)
    register(10, lambda: sequence_experiment(seed=0)["samples"], r["samples"])
    ok = r["validity_rate"] > r["untrained_validity_rate"] and t.seconds <= 1800
    top = ", ".join(f"{s!r} x{c}" for s, c in r["most_common"][:3])
    record(
        10,
        ok,
        f"validity {r['validity_rate']:.3f} trained vs {r['untrained_validity_rate']:.3f} untrained over 500 samples; "
        f"{r['distinct_samples']} distinct ({top}) in {t.seconds:.0f} s (<= 1800 s)",
    )
    assert ok


# ------------------------------------------------------------ 11


FALLBACKS = {
    2: _ratio_oracle,
    3: lambda: normal_normal_recovery(0, loss="log"),
    4: lambda: _abc_mean("smc"),
    6: lambda: stability_experiment("posterior", seed=0, n_iterations=300).samples,
    7: lambda: _scaling_fit(1000).q_global.params["loc"],
    9: lambda: classify("crabs", "gan", "vi", n_iterations=300)["test_error"],
    10: lambda: sequence_experiment(seed=0, n_iterations=100, ratio_warmup=20, n_train=200, n_samples=100)["samples"],
}


def test_c11_determinism():
    results = []
    with Timer() as t:
        for n in range(2, 11):
            if n == 8:
                continue  # no randomness beyond fixed seeds; covered by 8 itself
            if n in RERUNS:
                fn, first = RERUNS[n]
            elif n in FALLBACKS:
                fn = FALLBACKS[n]
                first = fingerprint(fn())
            else:
                continue  # 5 is only fingerprinted when its full run happened
            results.append((n, first == fingerprint(fn())))
    ok = all(same for _, same in results)
    shown = ", ".join(f"{n}:{'same' if s else 'DIFFERENT'}" for n, s in results)
    record(11, ok, f"repeat runs bitwise identical per criterion [{shown}] in {t.seconds:.0f} s")
    assert ok
