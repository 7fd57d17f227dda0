"""End-to-end experiments shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
import time
from collections import Counter
from importlib.resources import files

import numpy as np

from .abc import AbcConfig, lv_problem, mcmc_abc, normal_normal_problem, rejection_abc, smc_abc
from .diagnostics import noise_invert, posterior_metrics, ratio_stability
from .lfvi import LfviConfig, init_state, lfvi_fit
from .models import (
    BayesianGanClassifier,
    BayesianNNClassifier,
    LognormalPrior,
    LotkaVolterraConfig,
    LotkaVolterraModel,
    NormalNormalModel,
    StochasticRnnModel,
    cfg_sample,
    decode,
    encode,
    linreg_model,
    predictive_label,
    read_classification_csv,
    validity_rate,
)
from .ndcore import AdamState, RngStream, Tape, adam_step, grad, init_mlp, mlp_apply, ops
from .variational import global_sample, make_global_approx, posterior_draws

log = logging.getLogger(__name__)

DATASETS = ("pima", "crabs")
ABC_METHODS = {"rejection-abc": rejection_abc, "mcmc-abc": mcmc_abc, "smc-abc": smc_abc}

# LFVI settings each experiment uses unless overridden
LFVI_PRESETS = {
    "normal-normal": {"n_iterations": 3000, "batch_size": 100},
    "linear-regression": {"n_iterations": 3000, "batch_size": 50},
    "lotka-volterra": {"n_iterations": 3000, "batch_size": 1, "data_jitter": 1.0},
    "classify": {"n_iterations": 3000, "batch_size": 64},
    "seq": {
        "n_iterations": 1000,
        "batch_size": 64,
        "global_family": "point_mass",
        "local_uses_beta": False,
        "global_lr": 1e-3,
        "ratio_warmup": 200,
        "point_mass_jitter": 0.05,
    },
    "stability": {"n_iterations": 5000, "batch_size": 50, "init": "standard", "ratio_lr": 1e-2},
}


def lfvi_config(preset: str, seed: int, **overrides) -> LfviConfig:
    return LfviConfig(**{**LFVI_PRESETS[preset], "seed": seed, **overrides})


# ------------------------------------------------------------ posterior inference


def lv_model(beta=None, prior_loc=None, prior_scale=None, **config) -> LotkaVolterraModel:
    cfg = LotkaVolterraConfig(**({"beta": tuple(beta)} if beta is not None else {}), **config)
    prior = LognormalPrior(
        **({"loc": tuple(prior_loc)} if prior_loc is not None else {}),
        **({"scale": tuple(prior_scale)} if prior_scale is not None else {}),
    )
    return LotkaVolterraModel(config=cfg, prior=prior)


def observed_data(model, seed: int, n: int, true_beta=None):
    """Simulated observations and the parameters that produced them, on stream ``seed -> 7``."""
    rng = RngStream(seed).child(7)
    if isinstance(model, LotkaVolterraModel):
        beta = np.array(model.config.beta if true_beta is None else true_beta, dtype=np.float64)
        x, _ = model.simulate(beta[None], None, rng)
        return x, beta
    if true_beta is None:
        return model.generate(rng, n)
    return model.generate(rng, n, beta=np.asarray(true_beta, dtype=np.float64))


def infer_lfvi(model, data, true_beta, cfg: LfviConfig, n_posterior=1000, run_log=None) -> dict:
    t0 = time.perf_counter()
    res = lfvi_fit(model, data, cfg, run_log=run_log)
    betas, log_q = posterior_draws(res.q_global, RngStream(cfg.seed).child(5), n_posterior)
    out = {
        "fit": res,
        "samples": betas,
        "log_q": log_q,
        "diverged": res.diverged,
        "seconds": time.perf_counter() - t0,
    }
    if true_beta is not None and not res.q_global.is_point_mass and not res.diverged:
        out["metrics"] = posterior_metrics(true_beta, q=res.q_global)
    return out


def abc_problem(model, data):
    if isinstance(model, LotkaVolterraModel):
        return lv_problem(model, data[0])
    if isinstance(model, NormalNormalModel):
        return normal_normal_problem(model, data)
    raise ValueError(f"no ABC summaries defined for model {model.name!r}")


def infer_abc(model, data, true_beta, method: str, cfg: AbcConfig, seed: int) -> dict:
    t0 = time.perf_counter()
    res = ABC_METHODS[method](abc_problem(model, data), cfg, RngStream(seed).child(6))
    out = {"result": res, "seconds": time.perf_counter() - t0}
    if true_beta is not None:
        idx = RngStream(seed).child(5).choice(len(res.samples), size=min(len(res.samples), 10_000), p=res.weights / res.weights.sum())
        draws = res.samples[idx]
        out["metrics"] = posterior_metrics(true_beta, samples=draws) if len(draws) >= 100 else None
    return out


def lv_recovery(seed: int, **lfvi_overrides) -> dict:
    """One replicate of the predator-prey recovery experiment at the package defaults."""
    model = lv_model()
    data, beta = observed_data(model, seed, 1)
    out = infer_lfvi(model, data, beta, lfvi_config("lotka-volterra", seed, **lfvi_overrides), n_posterior=10)
    q = out["fit"].q_global
    out["true_beta"] = beta
    out["log_scale"] = q.params["log_scale"].copy()
    out["prior_scale"] = np.asarray(model.prior.scale, dtype=np.float64)
    return out


def normal_normal_recovery(seed: int, loss="log", n=100, **lfvi_overrides) -> dict:
    """LFVI against the conjugate posterior; returns fitted and exact moments."""
    model = NormalNormalModel()
    data, beta = model.generate(RngStream(100 + seed), n)
    mean, var = model.posterior(data)
    res = lfvi_fit(model, data, lfvi_config("normal-normal", seed, loss=loss, **lfvi_overrides))
    mu, sd = res.q_global.mean_std()
    return {"mean": float(mu[0]), "std": float(sd[0]), "exact_mean": float(mean[0]), "exact_std": float(np.sqrt(var[0, 0]))}


# ------------------------------------------------------------ classification


def load_dataset(name=None, train_path=None, test_path=None):
    """Train/test features standardized by training statistics, labels in {-1, +1}."""
    if name is not None:
        if name not in DATASETS:
            raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
        root = files("himvi") / "data"
        train_path, test_path = root / f"{name}_train.csv", root / f"{name}_test.csv"
    Xtr, ytr = read_classification_csv(train_path)
    Xte, yte = read_classification_csv(test_path)
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (Xtr - mu) / sd, ytr, (Xte - mu) / sd, yte


def fit_bnn(model: BayesianNNClassifier, X, y, inference: str, n_iterations=3000, batch_size=64, lr=1e-2, seed=0):
    """Mean-field VI (``"vi"``) or MAP (``"map"``) for the Bernoulli-likelihood network.

    Returns the final mean-field approximation or point estimate.
    """
    rng = RngStream(seed)
    start = model.layout.flatten(init_mlp(rng.child(0), [model.feature_dim_in, model.hidden, 1], layer_norm=model.layer_norm))
    kind = "meanfield_normal" if inference == "vi" else "point_mass"
    if inference == "vi":
        q = make_global_approx(kind, model.global_dim, loc=start, log_scale=-3.0)
    elif inference == "map":
        q = make_global_approx(kind, model.global_dim, value=start)
    else:
        raise ValueError(f"inference must be 'vi' or 'map', got {inference!r}")
    N = len(X)
    opt = AdamState(learning_rate=lr)
    params = q.params
    for it in range(n_iterations):
        step = rng.child(1, it)
        idx = step.choice(N, size=min(batch_size, N), replace=False)
        tape = Tape()
        pv = tape.vars(params)
        theta, log_q = global_sample(q, step, params=pv)
        lik = ops.mul(model.loglik(theta, X[idx], y[idx]), N / len(idx))
        objective = ops.add(model.prior_logpdf(theta), lik)
        if log_q is not None:
            objective = ops.sub(objective, log_q)
        grads = grad(tape, objective, pv)
        opt, params, _ = adam_step(opt, {k: -g for k, g in grads.items()}, params)
    return q.with_params(params)


def classify(dataset=None, model_kind="gan", inference="vi", seed=0, hidden=16, layer_norm=True,
             n_predictive=20, train_path=None, test_path=None, **lfvi_overrides) -> dict:
    """Train on the training split and report test error of the predictive majority vote."""
    Xtr, ytr, Xte, yte = load_dataset(dataset, train_path, test_path)
    t0 = time.perf_counter()
    rng = RngStream(seed).child(8)
    if model_kind == "gan":
        model = BayesianGanClassifier(feature_dim_in=Xtr.shape[1], hidden=hidden, layer_norm=layer_norm)
        family = {"vi": "meanfield_normal", "map": "point_mass"}[inference]
        res = lfvi_fit(model, np.c_[Xtr, ytr], lfvi_config("classify", seed, global_family=family, **lfvi_overrides))
        thetas, _ = posterior_draws(res.q_global, rng.child(0), n_predictive)
        labels, _ = predictive_label(model, thetas, Xte, 5, rng.child(1))
        train_labels, _ = predictive_label(model, thetas, Xtr, 5, rng.child(1))
        diverged = res.diverged
    elif model_kind == "bnn":
        model = BayesianNNClassifier(feature_dim_in=Xtr.shape[1], hidden=hidden, layer_norm=layer_norm)
        cfg = lfvi_config("classify", seed, **lfvi_overrides)
        q = fit_bnn(model, Xtr, ytr, inference, cfg.n_iterations, cfg.batch_size, cfg.global_lr, seed)
        thetas, _ = posterior_draws(q, rng.child(0), n_predictive)
        labels, _ = model.predict(thetas, Xte)
        train_labels, _ = model.predict(thetas, Xtr)
        diverged = not np.all(np.isfinite(thetas))
    else:
        raise ValueError(f"model must be 'gan' or 'bnn', got {model_kind!r}")
    return {
        "test_error": float(np.mean(labels != yte)),
        "train_error": float(np.mean(train_labels != ytr)),
        "n_train": len(ytr),
        "n_test": len(yte),
        "diverged": bool(diverged),
        "seconds": time.perf_counter() - t0,
    }


# ------------------------------------------------------------ sequences


def grammar_corpus(model: StochasticRnnModel, n: int, seed: int) -> np.ndarray:
    rng = RngStream(seed)
    ids = np.stack([encode(cfg_sample(rng.child(i), model.max_len), model.max_len) for i in range(n)])
    return model.rows_from_ids(ids)


def sequence_experiment(seed=0, corpus_seed=42, n_train=1000, n_samples=500, hidden_dim=16, noise_z=4, noise_x=4, max_len=15,
                        **lfvi_overrides) -> dict:
    """Variational EM on grammar sequences; validity of generated samples before and after."""
    model = StochasticRnnModel(hidden_dim=hidden_dim, noise_z=noise_z, noise_x=noise_x, max_len=max_len)
    data = grammar_corpus(model, n_train, corpus_seed)
    cfg = lfvi_config("seq", seed, **lfvi_overrides)
    t0 = time.perf_counter()
    res = lfvi_fit(model, data, cfg)
    start = init_state(model, data, cfg, RngStream(seed).child(0))[0].params["value"]
    sample_rng = RngStream(seed).child(10)
    trained = res.q_global.params["value"]
    eps = sample_rng.normal(size=(n_samples, model.max_len, model.noise_z + model.noise_x))
    ids, _ = model._run(trained, eps)
    samples = [decode(row) for row in ids]
    return {
        "validity_rate": validity_rate(model, trained, sample_rng.child(1), n_samples),
        "untrained_validity_rate": validity_rate(model, start, sample_rng.child(1), n_samples),
        "distinct_samples": len(set(samples)),
        "most_common": Counter(samples).most_common(5),
        "samples": samples,
        "diverged": res.diverged,
        "seconds": time.perf_counter() - t0,
    }


# ------------------------------------------------------------ stability


def stability_experiment(regime: str, seed=0, n_iterations=None, checkpoint_every=100, n_draws=32, n=50, data_seed=0,
                         **lfvi_overrides):
    """Ratio-error trace on a fixed linear-regression dataset; ``seed`` drives the fit only."""
    model, data, _ = linreg_model(n=n, rng=RngStream(data_seed))
    overrides = {**lfvi_overrides, "batch_size": min(n, LFVI_PRESETS["stability"]["batch_size"])}
    if n_iterations is not None:
        overrides["n_iterations"] = n_iterations
    cfg = lfvi_config("stability", seed, **overrides)
    return ratio_stability(model, data, regime, cfg, checkpoint_every=checkpoint_every, n_draws=n_draws)


def noise_inversion_experiment(seed=0, n_problems=20, dim=3, width=32, bias_shift=1.0, max_iters=20_000, tol=1e-6) -> list:
    """Recover the noise behind outputs of random ReLU simulators; one record per simulator."""
    rows = []
    for k in range(n_problems):
        rng = RngStream(seed).child(11, k)
        params = init_mlp(rng.child(0), [dim, width, dim], init="standard")
        params["b0"] = params["b0"] + bias_shift

        def g(e, params=params):
            return ops.reshape(mlp_apply(params, ops.reshape(e, (1, dim))), (dim,))

        eps_true = rng.child(1).normal(size=dim)
        res = noise_invert(g, np.asarray(g(eps_true)), np.zeros(dim), max_iters=max_iters, tol=tol)
        rows.append({
            "problem": k,
            "converged": res.converged,
            "residual": res.residual,
            "iterations": res.iterations,
            "eps_error": float(np.linalg.norm(res.eps - eps_true)),
        })
    return rows


__all__ = [
    "classify",
    "fit_bnn",
    "infer_abc",
    "infer_lfvi",
    "lfvi_config",
    "load_dataset",
    "lv_model",
    "lv_recovery",
    "noise_inversion_experiment",
    "normal_normal_recovery",
    "observed_data",
    "sequence_experiment",
    "stability_experiment",
]
