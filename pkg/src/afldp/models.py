"""Convex models used by the trainer: binary logistic regression,
one-vs-rest linear SVM and a synthetic quadratic with known constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels

KINDS = ("logistic", "svm", "quadratic")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Read-only feature matrix with integer labels.

    For the quadratic model each row is a zero-mean gradient perturbation
    rather than an input example.
    """

    features: np.ndarray
    labels: np.ndarray
    name: str = "data"

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ModelError(f"features {X.shape} and labels {y.shape} do not match")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "_signs", None)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def signs(self) -> np.ndarray:
        """Labels mapped to +/-1 (label 0 -> -1), cached."""
        if self._signs is None:
            s = np.where(self.labels > 0, 1.0, -1.0)
            s.setflags(write=False)
            object.__setattr__(self, "_signs", s)
        return self._signs

    def __getitem__(self, i) -> Sample:
        return Sample(self.features[i], int(self.labels[i]))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.features[index], self.labels[index], self.name)

    def shard(self, k: int, K: int) -> "Dataset":
        """Round-robin partition ``k`` of ``K``."""
        if not 0 <= k < K:
            raise ModelError(f"shard {k} outside [0, {K})")
        return self.subset(np.arange(k, len(self), K))

    @classmethod
    def from_samples(cls, samples, name="data"):
        samples = list(samples)
        X = np.array([s.features for s in samples], dtype=float)
        y = np.array([s.label for s in samples], dtype=np.int64)
        return cls(X, y, name)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    kind: str
    dim: int
    num_classes: int = 2
    reg_lambda: float = 1e-4
    smoothness_L: float = 10.0
    grad_bound_G: float = 1.0
    sample_variance_sigma2: float = 900.0
    radius_R: float = 10.0
    hessian: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.dim < 1:
            raise ModelError("dim must be positive")
        if self.reg_lambda < 0:
            raise ModelError("reg_lambda must be nonnegative")
        consts = (self.smoothness_L, self.grad_bound_G, self.sample_variance_sigma2, self.radius_R)
        if not all(math.isfinite(c) for c in consts) or self.smoothness_L <= 0:
            raise ModelError("model constants must be finite with L > 0")
        if self.kind == "quadratic":
            if self.hessian is None:
                raise ModelError("quadratic model needs a hessian")
            A = np.ascontiguousarray(self.hessian, dtype=np.float64)
            if A.shape != (self.dim, self.dim):
                raise ModelError(f"hessian shape {A.shape} != ({self.dim}, {self.dim})")
            A.setflags(write=False)
            object.__setattr__(self, "hessian", A)
        if self.kind == "logistic" and self.num_classes != 2:
            raise ModelError("logistic regression is binary")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sample_variance_sigma2)

    @property
    def n_params(self) -> int:
        return self.dim * self.num_classes if self.kind == "svm" else self.dim

    def with_constants(self, **kw) -> "ModelSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class MiniBatch:
    data: Dataset
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def samples(self):
        return [self.data[i] for i in self.indices]


def _check(spec: ModelSpec, x: np.ndarray, data: Dataset):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (spec.n_params,):
        raise ModelError(f"parameter shape {x.shape} != ({spec.n_params},)")
    if data.dim != spec.dim:
        raise ModelError(f"data dimension {data.dim} != model dimension {spec.dim}")
    return x


def sample_batch(data: Dataset, b: int, rng: np.random.Generator) -> MiniBatch:
    """``b`` uniform draws with replacement."""
    if b < 1:
        raise ModelError("batch size must be >= 1")
    if len(data) == 0:
        raise ModelError("cannot sample from an empty dataset")
    return MiniBatch(data, rng.integers(0, len(data), size=b, dtype=np.int64))


def batch_gradient(spec: ModelSpec, x: np.ndarray, data: Dataset, idx: np.ndarray,
                   out: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean gradient over rows ``idx`` of ``data`` plus the L2 term."""
    if len(idx) == 0:
        raise ModelError("empty batch")
    if x.shape != (spec.n_params,) or data.dim != spec.dim:
        raise ModelError(f"parameters {x.shape} / data dim {data.dim} do not fit the "
                         f"{spec.kind} model ({spec.n_params} params, dim {spec.dim})")
    if out is None:
        out = np.empty(spec.n_params)
    if spec.kind == "logistic":
        kernels.logistic_batch_grad(data.features, data.signs, idx, x, spec.reg_lambda, out)
    elif spec.kind == "svm":
        kernels.hinge_batch_grad(data.features, data.labels, idx, x, spec.num_classes,
                                 spec.reg_lambda, out)
    else:
        kernels.quadratic_batch_grad(spec.hessian, data.features, idx, x, out)
    return out


def gradient(spec: ModelSpec, x, batch: MiniBatch) -> np.ndarray:
    x = _check(spec, x, batch.data)
    return batch_gradient(spec, x, batch.data, np.ascontiguousarray(batch.indices, dtype=np.int64))


def per_sample_gradients(spec: ModelSpec, x, data: Dataset) -> np.ndarray:
    """Gradient of each sample's loss (including the L2 term), one per row."""
    x = _check(spec, x, data)
    X = data.features
    if spec.kind == "logistic":
        y = data.signs
        s = -y * 0.5 * (1.0 + np.tanh(-0.5 * y * (X @ x)))
        return s[:, None] * X + spec.reg_lambda * x
    if spec.kind == "svm":
        W = x.reshape(spec.num_classes, spec.dim)
        ysign = np.where(data.labels[:, None] == np.arange(spec.num_classes), 1.0, -1.0)
        coef = np.where(ysign * (X @ W.T) < 1.0, -ysign, 0.0)
        G = coef[:, :, None] * X[:, None, :]
        return G.reshape(len(data), -1) + spec.reg_lambda * x
    return (spec.hessian @ x)[None, :] + X


def full_gradient(spec: ModelSpec, x, data: Dataset) -> np.ndarray:
    """Gradient of the empirical objective ``loss(spec, x, data)``."""
    x = _check(spec, x, data)
    X = data.features
    if spec.kind == "logistic":
        y = data.signs
        s = -y * 0.5 * (1.0 + np.tanh(-0.5 * y * (X @ x)))
        return (s @ X) / len(data) + spec.reg_lambda * x
    if spec.kind == "svm":
        W = x.reshape(spec.num_classes, spec.dim)
        ysign = np.where(data.labels[:, None] == np.arange(spec.num_classes), 1.0, -1.0)
        coef = np.where(ysign * (X @ W.T) < 1.0, -ysign, 0.0)
        return (coef.T @ X).ravel() / len(data) + spec.reg_lambda * x
    # perturbation rows average to zero by construction, but not to the bit
    return spec.hessian @ x + X.mean(axis=0)


def loss(spec: ModelSpec, x, data) -> float:
    """Mean per-sample loss plus ``reg_lambda / 2 * ||x||^2``."""
    if not isinstance(data, Dataset):
        data = Dataset.from_samples(data)
    if len(data) == 0:
        raise ModelError("empty data")
    x = _check(spec, x, data)
    X = data.features
    if spec.kind == "logistic":
        m = data.signs * (X @ x)
        value = float(np.mean(np.logaddexp(0.0, -m)))
    elif spec.kind == "svm":
        W = x.reshape(spec.num_classes, spec.dim)
        ysign = np.where(data.labels[:, None] == np.arange(spec.num_classes), 1.0, -1.0)
        value = float(np.mean(np.maximum(0.0, 1.0 - ysign * (X @ W.T)).sum(axis=1)))
    else:
        value = 0.5 * float(x @ spec.hessian @ x) + float(X.mean(axis=0) @ x)
    return value + 0.5 * spec.reg_lambda * float(x @ x)


def loss_and_grad_norm(spec: ModelSpec, x, data: Dataset):
    return loss(spec, x, data), float(np.linalg.norm(full_gradient(spec, x, data)))


def predict(spec: ModelSpec, x, features: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if spec.kind == "logistic":
        # score of class 1 is w.v, class 0 is 0; ties go to class 0
        return (features @ x > 0).astype(np.int64)
    if spec.kind == "svm":
        scores = features @ x.reshape(spec.num_classes, spec.dim).T
        return np.argmax(scores, axis=1)  # argmax picks the lowest index on ties
    raise ModelError("quadratic model has no classifier")


def predict_accuracy(spec: ModelSpec, x, test) -> float:
    if not isinstance(test, Dataset):
        test = Dataset.from_samples(test)
    if len(test) == 0:
        raise ModelError("empty test set")
    _check(spec, x, test)
    labels = test.labels if spec.kind == "svm" else (test.labels > 0).astype(np.int64)
    return float(np.mean(predict(spec, x, test.features) == labels))


def make_quadratic(dim: int, condition: float = 1.0, noise_sigma: float = 0.0,
                   n_samples: int = 1000, seed: int = 0):
    """Build ``f(x) = x'Ax / 2`` with eigenvalues spread over ``[1, condition]``.

    Stochastic gradients are ``A x + z_i`` where the rows ``z_i`` are centred
    and scaled so that their mean squared norm is exactly ``noise_sigma^2``.
    Returns ``(spec, dataset)``; ``x* = 0`` and ``f(x*) = 0``.
    """
    if dim < 1:
        raise ModelError("dim must be positive")
    if condition < 1:
        raise ModelError("condition must be >= 1")
    if noise_sigma < 0:
        raise ModelError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    if condition == 1.0:
        A = np.eye(dim)
    else:
        Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
        Q *= np.sign(np.diag(R))
        A = (Q * np.linspace(1.0, condition, dim)) @ Q.T
        A = 0.5 * (A + A.T)
    Z = rng.standard_normal((n_samples, dim))
    Z -= Z.mean(axis=0)
    if noise_sigma > 0:
        Z *= noise_sigma / math.sqrt(np.mean(np.sum(Z * Z, axis=1)))
    else:
        Z[:] = 0.0
    spec = ModelSpec(
        kind="quadratic", dim=dim, num_classes=1, reg_lambda=0.0,
        smoothness_L=float(condition), grad_bound_G=1.0,
        sample_variance_sigma2=float(noise_sigma) ** 2, radius_R=1.0, hessian=A,
    )
    return spec, Dataset(Z, np.zeros(n_samples, dtype=np.int64), "quadratic")


def max_sample_grad_norm(spec: ModelSpec, x, data: Dataset) -> float:
    """Largest per-sample gradient norm at ``x``."""
    return float(np.max(np.linalg.norm(per_sample_gradients(spec, x, data), axis=1)))


def default_grad_bound(spec: ModelSpec, x, data: Dataset) -> float:
    """A bound on per-sample gradient norms used when none is configured.

    Logistic: the sigmoid factor is at most one, so ``max ||v|| + lambda ||x||``.
    SVM: each class block contributes at most ``||v||``.  Quadratic: measured
    at ``x``.
    """
    x = np.asarray(x, dtype=float)
    row_norm = float(np.max(np.linalg.norm(data.features, axis=1))) if len(data) else 0.0
    if spec.kind == "logistic":
        return row_norm + spec.reg_lambda * float(np.linalg.norm(x))
    if spec.kind == "svm":
        return math.sqrt(spec.num_classes) * row_norm + spec.reg_lambda * float(np.linalg.norm(x))
    return max_sample_grad_norm(spec, x, data)


def gradient_spread(spec: ModelSpec, x, data: Dataset) -> float:
    """Root mean squared deviation of per-sample gradients from their mean at ``x``."""
    G = per_sample_gradients(spec, x, data)
    return float(np.sqrt(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1))))


def logistic_smoothness(data: Dataset, reg_lambda: float) -> float:
    return 0.25 * float(np.max(np.sum(data.features ** 2, axis=1))) + reg_lambda
