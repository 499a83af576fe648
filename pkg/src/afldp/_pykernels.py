"""Pure numpy implementations of the per-iteration kernels.

Every function writes into ``out`` (or ``x``) and returns it, mirroring the
compiled versions in ``_ckernels.pyx`` argument for argument.
"""

import numpy as np

BACKEND = "python"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_batch_grad(X, y, idx, w, lam, out):
    # y holds +/-1 labels
    Xb = X[idx]
    yb = y[idx]
    s = -yb * _sigmoid(-yb * (Xb @ w))
    np.multiply(w, lam, out=out)
    out += (s @ Xb) / len(idx)
    return out


def hinge_batch_grad(X, labels, idx, W, num_classes, lam, out):
    d = X.shape[1]
    Wm = W.reshape(num_classes, d)
    Xb = X[idx]
    scores = Xb @ Wm.T
    ysign = np.where(labels[idx][:, None] == np.arange(num_classes)[None, :], 1.0, -1.0)
    active = (ysign * scores) < 1.0
    coef = np.where(active, -ysign, 0.0)
    np.multiply(W, lam, out=out)
    out += (coef.T @ Xb).ravel() / len(idx)
    return out


def quadratic_batch_grad(A, Z, idx, x, out):
    np.dot(A, x, out=out)
    out += Z[idx].sum(axis=0) / len(idx)
    return out


def clip_and_perturb(g, clip_bound, direction, radius, out):
    """out = g / max(1, ||g|| / clip_bound) + radius * direction.

    ``clip_bound <= 0`` disables clipping.  Returns the pre-clip norm.
    """
    norm = float(np.sqrt(g @ g))
    scale = 1.0
    if clip_bound > 0.0 and norm > clip_bound:
        scale = clip_bound / norm
    np.multiply(g, scale, out=out)
    if radius != 0.0:
        out += radius * direction
    return norm


def sgd_step(x, gamma, payload):
    x -= gamma * payload
    return x
