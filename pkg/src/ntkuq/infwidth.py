"""End-of-training predictive posterior of infinite-width erf MLPs.

Three routes to the Gaussian posterior over test outputs:
  * closed form, when the train-train NTK block is well-conditioned;
  * iterated GD-map evolution with early stopping, otherwise;
  * the Bayesian variant, with the NTK replaced by the kernel.
"""

from dataclasses import dataclass
import json

import numpy as np
import scipy.linalg

from .errors import DivergenceError, IllConditionedError

__all__ = [
    "PredictivePosterior",
    "EarlyStopPolicy",
    "closed_form_posterior",
    "gd_evolve",
    "bayesian_posterior",
    "save_posterior_jsonl",
    "load_posterior_jsonl",
]

RCOND_LIMIT = 1e-12
VAR_CLAMP = 1e-9
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class PredictivePosterior:
    """Gaussian posterior over test-point outputs.

    mean has one column per output neuron; cov is shared across output
    columns and cross-output covariance is exactly zero.
    """

    mean: np.ndarray
    cov: np.ndarray
    method: str
    steps_used: int = 0

    def __post_init__(self):
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        if mean.shape[0] == 1 and mean.shape[1] > 1 and self.cov is not None:
            cov_n = np.asarray(self.cov).shape[0]
            if cov_n == mean.shape[1]:
                mean = mean.T
        object.__setattr__(self, "mean", mean)
        if self.cov is None:
            return
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("cov shape %s does not match %d test points" % (cov.shape, mean.shape[0]))
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10:
            raise ValueError("cov is not symmetric within 1e-10")
        cov = 0.5 * (cov + cov.T)
        d = np.diag(cov).copy()
        if np.any(d < -VAR_CLAMP):
            raise ValueError("cov diagonal below -%g" % VAR_CLAMP)
        neg = d < 0
        if np.any(neg):
            cov = cov.copy()
            cov[np.diag_indices_from(cov)] = np.where(neg, 0.0, d)
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)

    @property
    def n_test(self):
        return self.mean.shape[0]

    @property
    def n_out(self):
        return self.mean.shape[1]

    @property
    def var(self):
        if self.cov is None:
            return getattr(self, "diag_var")
        return np.diag(self.cov)


@dataclass(frozen=True)
class EarlyStopPolicy:
    """Validation-loss early stopping for the iterated GD map.

    validation_ids index into the test-side points handed to gd_evolve;
    patience is counted in checks, each check_every steps apart.
    """

    validation_ids: np.ndarray
    validation_labels: np.ndarray
    patience: int = 10
    check_every: int = 100
    max_steps: int = 10_000_000

    def __post_init__(self):
        object.__setattr__(self, "validation_ids", np.asarray(self.validation_ids, dtype=int))
        labels = np.atleast_2d(np.asarray(self.validation_labels, dtype=float))
        if labels.shape[0] != self.validation_ids.size:
            labels = labels.T
        object.__setattr__(self, "validation_labels", labels)
        if self.patience < 1 or self.check_every < 1:
            raise ValueError("patience and check_every must be >= 1")


def _as_label_matrix(labels, n_rows):
    y = np.asarray(labels, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != n_rows:
        raise ValueError("label rows (%d) do not match train size (%d)" % (y.shape[0], n_rows))
    if not np.all(np.isfinite(y)):
        raise ValueError("labels contain non-finite entries")
    return y


def _blocks(kp, train_ids, test_ids):
    tr = np.asarray(train_ids, dtype=int)
    te = np.asarray(test_ids, dtype=int)
    K = kp.K
    T = kp.Theta
    return (
        T[np.ix_(tr, tr)],
        T[np.ix_(tr, te)],
        K[np.ix_(tr, tr)],
        K[np.ix_(tr, te)],
        K[np.ix_(te, te)],
    )


def _check_conditioning(A, name):
    if A.shape[0] == 0:
        raise ValueError("empty training set")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or 1.0 / cond < RCOND_LIMIT:
        raise IllConditionedError(
            "%s reciprocal condition %.3g below %g; use the iterative GD path"
            % (name, 0.0 if not np.isfinite(cond) else 1.0 / cond, RCOND_LIMIT)
        )


def _posterior_from_blocks(M_A, M_B, K_A, K_B, K_BB, y, method):
    # T = M_A^{-1} M_B via a symmetric solve; explicit inverses avoided.
    T = scipy.linalg.solve(M_A, np.column_stack([M_B, K_B]), assume_a="sym")
    TM = T[:, : M_B.shape[1]]
    TK = T[:, M_B.shape[1] :]
    mean = TM.T @ y
    cov = K_BB - TM.T @ K_B - K_B.T @ TM + TM.T @ K_A @ TM
    cov = 0.5 * (cov + cov.T)
    return PredictivePosterior(mean=mean, cov=cov, method=method, steps_used=0)


def closed_form_posterior(kp, train_ids, test_ids, labels):
    """Closed-form limit of infinitely many GD steps (independent of eta).

    mean = Theta_B^T Theta_A^{-1} y; cov is the four-term expression
    combining kernel and NTK blocks.
    """
    Th_A, Th_B, K_A, K_B, K_BB = _blocks(kp, train_ids, test_ids)
    y = _as_label_matrix(labels, Th_A.shape[0])
    _check_conditioning(Th_A, "Theta_A")
    return _posterior_from_blocks(Th_A, Th_B, K_A, K_B, K_BB, y, "closed_form")


def bayesian_posterior(kp, train_ids, test_ids, labels):
    """Bayesian (last-layer-training) posterior: NTK replaced by the kernel.

    Substituting Theta -> K in the GD formulas reduces algebraically to
    the usual GP conditional, computed here in the substituted form.
    """
    _, _, K_A, K_B, K_BB = _blocks(kp, train_ids, test_ids)
    y = _as_label_matrix(labels, K_A.shape[0])
    _check_conditioning(K_A, "K_A")
    post = _posterior_from_blocks(K_A, K_B, K_A, K_B, K_BB, y, "bayesian")
    return post


def _validation_mean_loss(mean, cov, val_rows, val_labels):
    d = np.diag(cov)[val_rows]
    delta = val_labels - mean[val_rows]
    n_out = val_labels.shape[1]
    per_point = n_out * d + np.sum(delta * delta, axis=1)
    return float(np.sum(per_point) / (2.0 * val_rows.size * n_out))


def gd_evolve(kp, train_ids, test_ids, labels, eta=None, stop=None):
    """Evolve the joint output distribution under the linear GD map.

    Starts from mean 0 and covariance K over train and test points and
    applies z <- z - eta * Theta[:, A] (z_A - y) jointly; the covariance
    is conjugated by the linear part. Stops on the early-stop policy and
    returns the posterior over test points at the best-validation step.
    """
    tr = np.asarray(train_ids, dtype=int)
    te = np.asarray(test_ids, dtype=int)
    y = _as_label_matrix(labels, tr.size)
    joint = np.concatenate([tr, te])
    n = joint.size
    n_train = tr.size
    Theta_joint = kp.Theta[np.ix_(joint, joint)]
    K_joint = kp.K[np.ix_(joint, joint)]

    if eta is None:
        lam_max = float(np.max(np.linalg.eigvalsh(Theta_joint[:n_train, :n_train])))
        eta = 1.0 / lam_max
    if eta < 0:
        raise ValueError("eta must be >= 0")

    if stop is None:
        raise ValueError("gd_evolve requires an EarlyStopPolicy")
    val_rows = n_train + stop.validation_ids
    if np.any(stop.validation_ids < 0) or np.any(stop.validation_ids >= te.size):
        raise ValueError("validation ids must index into the test-side points")
    val_labels = stop.validation_labels
    if val_labels.shape[1] != y.shape[1]:
        raise ValueError("validation labels and train labels disagree on n_out")

    # One GD step: z <- M z + c with M = I - eta * Theta[:, A], acting on
    # the train columns only.
    M = np.eye(n)
    M[:, :n_train] -= eta * Theta_joint[:, :n_train]
    c = eta * (Theta_joint[:, :n_train] @ y)

    # Compose check_every steps into a single affine map so each check
    # costs one matrix triple product; the dynamics are unchanged.
    A = np.eye(n)
    b = np.zeros_like(c)
    for _ in range(stop.check_every):
        b = M @ b + c
        A = M @ A

    mean = np.zeros((n, y.shape[1]))
    cov = K_joint.copy()

    initial_val = _validation_mean_loss(mean, cov, val_rows, val_labels)
    best_val = initial_val
    best = (mean.copy(), cov.copy(), 0)
    bad_checks = 0
    step = 0
    while step < stop.max_steps:
        mean = A @ mean + b
        cov = A @ cov @ A.T
        step += stop.check_every
        val = _validation_mean_loss(mean, cov, val_rows, val_labels)
        if not np.isfinite(val) or val > DIVERGENCE_FACTOR * max(initial_val, 1e-300):
            raise DivergenceError(
                "validation loss %g exceeded %g x initial after %d steps (eta=%g too large)"
                % (val, DIVERGENCE_FACTOR, step, eta)
            )
        if val < best_val:
            best_val = val
            best = (mean.copy(), cov.copy(), step)
            bad_checks = 0
        else:
            bad_checks += 1
            if bad_checks >= stop.patience:
                break

    mean, cov, steps_used = best
    test_rows = np.arange(n_train, n)
    cov_test = cov[np.ix_(test_rows, test_rows)]
    cov_test = 0.5 * (cov_test + cov_test.T)
    return PredictivePosterior(
        mean=mean[test_rows], cov=cov_test, method="iterative", steps_used=steps_used
    )


def save_posterior_jsonl(post, path, ids=None):
    """One JSON record per test point: {id, mean[], var}."""
    if ids is None:
        ids = range(post.n_test)
    var = post.var
    with open(path, "w") as f:
        for row, pid in zip(range(post.n_test), ids):
            rec = {
                "id": int(pid),
                "mean": [float(v) for v in post.mean[row]],
                "var": float(var[row]),
            }
            f.write(json.dumps(rec) + "\n")


def load_posterior_jsonl(path, method="closed_form"):
    """Rebuild a diagonal-only posterior from the JSON-lines export.

    The full covariance is not stored in this format, so cov is None and
    operations needing off-diagonals must use the binary matrix export.
    """
    means, variances, ids = [], [], []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            ids.append(rec["id"])
            means.append(rec["mean"])
            variances.append(rec["var"])
    post = PredictivePosterior.__new__(PredictivePosterior)
    object.__setattr__(post, "mean", np.asarray(means, dtype=float))
    object.__setattr__(post, "cov", None)
    object.__setattr__(post, "method", method)
    object.__setattr__(post, "steps_used", 0)
    object.__setattr__(post, "diag_var", np.asarray(variances, dtype=float))
    return post, np.asarray(ids)
