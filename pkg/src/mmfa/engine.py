"""EM driver: parallel per-modality updates synchronized by a score step.

One iteration runs, in order: the exact Gaussian posterior and noise
updates, the variational multinomial posterior and expansion-point
updates for each categorical block, then one quadratic-program solve per
instance that fuses all modality contributions into new scores. Every
block update is an exact coordinate-ascent step on the same surrogate
objective, so the tracked objective never decreases.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import gaussian as gmod
from . import multinomial as mmod
from .errors import DimensionMismatch, MmfaError, NumericalError
from .model import FittedModel, ModelSpec
from .multinomial import MultinomialState

NONNEG_KKT_TOL = 1e-8
NONNEG_MAX_ITERS = 20_000


def _prior_multinomial_state(n_categories, k, p):
    eye = np.eye(k)
    return MultinomialState(
        n_categories=n_categories,
        precision=eye.copy(),
        precision_inv=eye.copy(),
        cross_cov=np.zeros((k, k)),
        loading_mean=np.zeros((k, n_categories - 1)),
        expansion=np.zeros((p, n_categories - 1)),
    )


def _objective(data, spec, C, gauss_state, noise_variance, cat_states):
    total = 0.0
    if data.gaussian is not None:
        total += gmod.gaussian_elbo_terms(
            gauss_state,
            noise_variance,
            C,
            data.gaussian,
            data.mask,
            spec.alpha,
            spec.beta,
        )
    for state, block in zip(cat_states, data.categoricals):
        total += mmod.multinomial_elbo_terms(state, block, C)
    lam = spec.effective_ridge
    if lam > 0:
        total -= 0.5 * lam * float(np.sum(C**2))
    return float(total)


def surrogate_objective(model, data):
    """Surrogate objective of a fitted model on a dataset.

    The exact Gaussian evidence terms plus the bounded multinomial terms,
    each with their prior and posterior-entropy parts, minus the ridge
    penalty when that score mode is active. Deterministic given the model
    state; this is the quantity whose trace :func:`fit` records.
    """
    model.check_compatible(data)
    return _objective(
        data,
        model.spec,
        model.scores,
        model.gaussian,
        model.noise_variance,
        model.categoricals,
    )


def solve_scores_batch(H, rho, mode, ridge_weight, warm_start=None):
    """Solve every instance's score quadratic program.

    H: (P, K, K) symmetric PSD stack, rho: (P, K). Modes:
      unconstrained - SPD solve of H c = rho
      ridge         - SPD solve of (H + ridge I) c = rho
      nonnegative   - projected gradient on the constrained QP, converged
                      when the componentwise KKT residual drops below 1e-8
    Returns scores of shape (P, K).
    """
    H = np.asarray(H, dtype=float)
    rho = np.asarray(rho, dtype=float)
    p, k = rho.shape
    if mode == "nonnegative":
        return _nonneg_qp_batch(H, rho, warm_start)
    lam = ridge_weight if mode == "ridge" else 0.0
    system = H + lam * np.eye(k)
    try:
        np.linalg.cholesky(system)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "singular score system; add ridge regularization (score_update='ridge')"
        ) from exc
    return np.linalg.solve(system, rho[..., None])[..., 0]


def _nonneg_qp_batch(H, rho, warm_start):
    p, k = rho.shape
    c = np.zeros((p, k)) if warm_start is None else np.maximum(warm_start, 0.0)
    evals = np.linalg.eigvalsh(H)
    lipschitz = np.maximum(evals[:, -1], 1e-12)[:, None]
    for _ in range(NONNEG_MAX_ITERS):
        grad = np.einsum("pkl,pl->pk", H, c) - rho
        kkt = np.abs(np.minimum(c, grad)).max()
        if kkt < NONNEG_KKT_TOL:
            break
        c = np.maximum(c - grad / lipschitz, 0.0)
    else:
        raise NumericalError("nonnegative score solver failed to reach KKT tolerance")
    return c


def update_scores(H, rho, mode="unconstrained", ridge_weight=0.0, warm_start=None):
    """Single-instance score update; see :func:`solve_scores_batch`."""
    H = np.asarray(H, dtype=float)
    rho = np.asarray(rho, dtype=float)
    warm = None if warm_start is None else np.asarray(warm_start, dtype=float)[None]
    return solve_scores_batch(
        H[None], rho[None], mode, ridge_weight, warm_start=warm
    )[0]


def _gaussian_sweep(data, spec, C, sigma2):
    state = gmod.gaussian_e_step(C, sigma2, data.gaussian, data.mask)
    sigma2 = gmod.gaussian_m_step(
        state, C, data.gaussian, data.mask, spec.alpha, spec.beta
    )
    return state, sigma2


def _categorical_sweep(block, C, expansion):
    ztilde = mmod.adjusted_counts(
        block.counts, block.trials, expansion, block.n_categories
    )
    state = mmod.multinomial_e_step(C, block.trials, ztilde, block.n_categories)
    state.expansion = mmod.psi_update(state.loading_mean, C)
    return state


def fit(data, spec, callback=None, n_threads=1):
    """Fit the factor model to a heterogeneous dataset.

    Iterates until the relative change of the surrogate objective falls
    below spec.tol or spec.max_iters is reached. An infinite tol runs
    exactly one iteration and reports converged=False, which is useful
    for smoke tests.

    callback, if given, is invoked after every iteration as
    callback(iteration, snapshot) where snapshot is a FittedModel sharing
    the live state arrays (copy anything kept beyond the call).
    """
    if not isinstance(spec, ModelSpec):
        raise TypeError("spec must be a ModelSpec")
    data.validate()
    data.require_covered_features()
    spec.check_data(data)
    spec.warn_if_factor_heavy(data.n_gaussian, data.category_counts)

    k, p = spec.n_factors, data.n_instances
    rng = np.random.default_rng(spec.seed)
    C = 0.1 * rng.standard_normal((k, p))

    gauss_state = None
    sigma2 = None
    if data.gaussian is not None:
        d1 = data.n_gaussian
        gauss_state = gmod.GaussianState(
            mean=np.zeros((d1, k)),
            cov=np.broadcast_to(np.eye(k), (d1, k, k)).copy(),
        )
        sigma2 = np.full(
            (p, d1), gmod.prior_mode_variance(spec.alpha, spec.beta)
        )
    cat_states = [
        _prior_multinomial_state(b.n_categories, k, p) for b in data.categoricals
    ]

    trace = [_objective(data, spec, C, gauss_state, sigma2, cat_states)]
    seconds = []
    stopped_early = False
    iterations = 0
    pool = None
    if n_threads and n_threads > 1:
        pool = ThreadPoolExecutor(max_workers=n_threads)
    try:
        for iteration in range(1, spec.max_iters + 1):
            start = time.perf_counter()
            try:
                tasks = []
                if data.gaussian is not None:
                    tasks.append(("g", lambda: _gaussian_sweep(data, spec, C, sigma2)))
                for m, block in enumerate(data.categoricals):
                    tasks.append(
                        (
                            m,
                            lambda block=block, m=m: _categorical_sweep(
                                block, C, cat_states[m].expansion
                            ),
                        )
                    )
                if pool is not None and len(tasks) > 1:
                    results = list(pool.map(lambda t: (t[0], t[1]()), tasks))
                else:
                    results = [(key, fn()) for key, fn in tasks]
                for key, value in results:
                    if key == "g":
                        gauss_state, sigma2 = value
                    else:
                        cat_states[key] = value

                H = np.zeros((p, k, k))
                rho = np.zeros((p, k))
                if data.gaussian is not None:
                    Hg, rg = gmod.gaussian_score_terms(
                        gauss_state, sigma2, data.gaussian, data.mask
                    )
                    H += Hg
                    rho += rg
                for state, block in zip(cat_states, data.categoricals):
                    ztilde = mmod.adjusted_counts(
                        block.counts, block.trials, state.expansion,
                        block.n_categories,
                    )
                    Hm, rm = mmod.multinomial_score_terms(
                        state, ztilde, block.trials
                    )
                    H += Hm
                    rho += rm
                C = solve_scores_batch(
                    H, rho, spec.score_update, spec.ridge_weight, warm_start=C.T
                ).T
            except NumericalError as exc:
                raise NumericalError(f"iteration {iteration}: {exc}") from exc

            objective = _objective(data, spec, C, gauss_state, sigma2, cat_states)
            seconds.append(time.perf_counter() - start)
            trace.append(objective)
            iterations = iteration
            if callback is not None:
                callback(
                    iteration,
                    FittedModel(
                        spec=spec,
                        scores=C,
                        gaussian=gauss_state,
                        noise_variance=sigma2,
                        categoricals=cat_states,
                        objective_trace=trace.copy(),
                        iterations_run=iteration,
                        converged=False,
                    ),
                )
            previous = trace[-2]
            rel_change = abs(objective - previous) / max(abs(previous), 1e-12)
            if rel_change < spec.tol:
                stopped_early = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    return FittedModel(
        spec=spec,
        scores=C,
        gaussian=gauss_state,
        noise_variance=sigma2,
        categoricals=cat_states,
        objective_trace=trace,
        iterations_run=iterations,
        converged=stopped_early and math.isfinite(spec.tol),
        iteration_seconds=seconds,
    )


def select_k(data, k_candidates, spec, holdout_fraction=0.2):
    """Pick the factor count by BIC with a held-out predictive likelihood.

    Splits instances once (seeded by spec.seed), fits every candidate on
    the training fold, and scores the held-out fold with the predictive
    log-likelihood. The parameter count follows the model's nonparametric
    accounting: one score vector and one noise-variance row per training
    instance. Returns (best_k, table) where the table has one dict per
    candidate; ties break toward the smaller candidate.
    """
    from .inference import predictive_log_likelihood

    candidates = sorted(set(int(c) for c in k_candidates))
    if not candidates:
        raise ValueError("k_candidates must be nonempty")
    p = data.n_instances
    if p < 2:
        raise DimensionMismatch("need at least two instances to hold out a fold")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(p)
    n_hold = min(max(1, int(round(holdout_fraction * p))), p - 1)
    holdout = data.subset(perm[:n_hold])
    training = data.subset(perm[n_hold:])
    n_train = training.n_instances

    table = []
    for k in candidates:
        spec_k = replace(spec, n_factors=k)
        try:
            model = fit(training, spec_k)
            loglik = predictive_log_likelihood(model, holdout)
        except MmfaError as exc:
            raise type(exc)(f"candidate n_factors={k}: {exc}") from exc
        n_params = n_train * k + n_train * data.n_gaussian
        bic = n_params * math.log(n_train) - 2.0 * loglik
        table.append(
            {
                "n_factors": k,
                "bic": float(bic),
                "holdout_loglik": float(loglik),
                "n_params": n_params,
            }
        )
    best = min(table, key=lambda row: (row["bic"], row["n_factors"]))
    return best["n_factors"], table
