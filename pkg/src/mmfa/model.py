"""Model specification, fitted-model container, and on-disk format.

Small models are stored as a single JSON document; once the total matrix
payload crosses a threshold the matrices move to a sidecar binary file of
raw little-endian float64 values in column-major order, referenced by
offset from the JSON manifest. Both forms round-trip bit exactly.
"""

import json
import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DimensionMismatch, SchemaError
from .gaussian import GaussianState
from .multinomial import MultinomialState

MODEL_SCHEMA_VERSION = 1
INLINE_ELEMENT_LIMIT = 100_000

SCORE_UPDATE_MODES = ("unconstrained", "ridge", "nonnegative")


@dataclass
class ModelSpec:
    """Everything needed to reproduce a fit on compatible data.

    score_update selects how the per-instance quadratic program is
    solved: a plain SPD solve, a ridge-regularized solve, or a
    nonnegativity-constrained solve. n_gaussian and n_categories, when
    given, pin the expected data dimensions; fitting data of any other
    shape is then rejected.
    """

    n_factors: int
    alpha: float = 1.0
    beta: float = 0.1
    score_update: str = "ridge"
    ridge_weight: float = 1e-6
    tol: float = 1e-6
    max_iters: int = 500
    seed: int = 0
    n_gaussian: int = None
    n_categories: tuple = None

    def __post_init__(self):
        if self.n_factors < 1:
            raise ValueError("n_factors must be at least 1")
        if self.n_categories is not None:
            self.n_categories = tuple(int(d) for d in self.n_categories)
        if self.score_update not in SCORE_UPDATE_MODES:
            raise ValueError(f"score_update must be one of {SCORE_UPDATE_MODES}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.ridge_weight < 0:
            raise ValueError("ridge_weight must be nonnegative")

    @property
    def effective_ridge(self):
        return self.ridge_weight if self.score_update == "ridge" else 0.0

    def check_data(self, data):
        if self.n_gaussian is not None and data.n_gaussian != self.n_gaussian:
            raise DimensionMismatch(
                f"spec expects {self.n_gaussian} gaussian features, "
                f"data has {data.n_gaussian}"
            )
        if (
            self.n_categories is not None
            and tuple(data.category_counts) != self.n_categories
        ):
            raise DimensionMismatch(
                f"spec expects categorical dims {list(self.n_categories)}, "
                f"data has {data.category_counts}"
            )

    def warn_if_factor_heavy(self, d1, d2s):
        dims = [d for d in [d1, *d2s] if d > 0]
        if dims and self.n_factors >= min(dims):
            warnings.warn(
                f"n_factors={self.n_factors} is not smaller than the smallest "
                f"modality dimension {min(dims)}; the factorization may be "
                "underdetermined",
                stacklevel=3,
            )


@dataclass
class FittedModel:
    """Converged states of one fit plus the objective trace.

    objective_trace[0] is the surrogate objective of the freshly
    initialized state; one entry per EM iteration follows. The trace is
    non-decreasing up to rounding because every update is an exact
    coordinate-ascent step on the tracked objective.
    """

    spec: ModelSpec
    scores: np.ndarray  # (K, P)
    gaussian: GaussianState = None
    noise_variance: np.ndarray = None  # (P, D1)
    categoricals: list = field(default_factory=list)  # list[MultinomialState]
    objective_trace: list = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    iteration_seconds: list = field(default_factory=list)

    @property
    def n_factors(self):
        return self.scores.shape[0]

    @property
    def n_instances(self):
        return self.scores.shape[1]

    @property
    def n_gaussian(self):
        return 0 if self.gaussian is None else self.gaussian.n_features

    @property
    def category_counts(self):
        return [s.n_categories for s in self.categoricals]

    def check_compatible(self, data):
        if data.n_gaussian != self.n_gaussian:
            raise DimensionMismatch(
                f"model has {self.n_gaussian} gaussian features, "
                f"data has {data.n_gaussian}"
            )
        if data.category_counts != self.category_counts:
            raise DimensionMismatch(
                f"model categorical dims {self.category_counts}, "
                f"data {data.category_counts}"
            )


def _collect_arrays(model):
    arrays = {"scores": model.scores}
    if model.gaussian is not None:
        arrays["gaussian_mean"] = model.gaussian.mean
        arrays["gaussian_cov"] = model.gaussian.cov
        arrays["noise_variance"] = model.noise_variance
    for m, state in enumerate(model.categoricals):
        arrays[f"cat{m}_precision"] = state.precision
        arrays[f"cat{m}_precision_inv"] = state.precision_inv
        arrays[f"cat{m}_cross_cov"] = state.cross_cov
        arrays[f"cat{m}_loading_mean"] = state.loading_mean
        arrays[f"cat{m}_expansion"] = state.expansion
    return arrays


def save_model(model, path):
    """Write a fitted model; see module docstring for the format."""
    arrays = _collect_arrays(model)
    total = sum(a.size for a in arrays.values())
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "spec": asdict(model.spec),
        "n_category_list": model.category_counts,
        "iterations_run": model.iterations_run,
        "converged": model.converged,
        "objective_trace": list(map(float, model.objective_trace)),
        "arrays": {},
    }
    blob_path = None
    if total > INLINE_ELEMENT_LIMIT:
        blob_path = os.fspath(path) + ".bin"
        doc["blob"] = os.path.basename(blob_path)
        offset = 0
        with open(blob_path, "wb") as fh:
            for name in sorted(arrays):
                arr = np.asarray(arrays[name], dtype="<f8")
                fh.write(arr.tobytes(order="F"))
                doc["arrays"][name] = {
                    "shape": list(arr.shape),
                    "offset": offset,
                }
                offset += arr.size * 8
    else:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=float)
            doc["arrays"][name] = {
                "shape": list(arr.shape),
                "values": arr.ravel(order="F").tolist(),
            }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    return path


def _read_array(entry, blob):
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    if "values" in entry:
        flat = np.asarray(entry["values"], dtype=float)
    else:
        start = entry["offset"]
        flat = np.frombuffer(blob[start : start + count * 8], dtype="<f8")
    if flat.size != count:
        raise SchemaError("array payload does not match its declared shape")
    return flat.reshape(shape, order="F").copy()


def load_model(path):
    """Read a model written by :func:`save_model`.

    Raises :class:`SchemaError` for truncated or corrupt files and for
    schema versions this code does not understand.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"model file {path} is corrupt: {exc}") from exc
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise SchemaError(f"model file {path} lacks a schema version")
    if doc["schema_version"] != MODEL_SCHEMA_VERSION:
        raise SchemaError(
            f"model schema version {doc['schema_version']} is not supported "
            f"(expected {MODEL_SCHEMA_VERSION})"
        )
    blob = b""
    if "blob" in doc:
        blob_path = os.path.join(os.path.dirname(os.path.abspath(path)), doc["blob"])
        try:
            with open(blob_path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise SchemaError(f"model blob {blob_path} unreadable: {exc}") from exc
    try:
        arrays = {
            name: _read_array(entry, blob) for name, entry in doc["arrays"].items()
        }
        spec = ModelSpec(**doc["spec"])
        gaussian = None
        noise = None
        if "gaussian_mean" in arrays:
            gaussian = GaussianState(
                mean=arrays["gaussian_mean"], cov=arrays["gaussian_cov"]
            )
            noise = arrays["noise_variance"]
        categoricals = []
        for m, d2 in enumerate(doc["n_category_list"]):
            categoricals.append(
                MultinomialState(
                    n_categories=int(d2),
                    precision=arrays[f"cat{m}_precision"],
                    precision_inv=arrays[f"cat{m}_precision_inv"],
                    cross_cov=arrays[f"cat{m}_cross_cov"],
                    loading_mean=arrays[f"cat{m}_loading_mean"],
                    expansion=arrays[f"cat{m}_expansion"],
                )
            )
        return FittedModel(
            spec=spec,
            scores=arrays["scores"],
            gaussian=gaussian,
            noise_variance=noise,
            categoricals=categoricals,
            objective_trace=list(doc["objective_trace"]),
            iterations_run=int(doc["iterations_run"]),
            converged=bool(doc["converged"]),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise SchemaError(f"model file {path} is missing fields: {exc}") from exc
