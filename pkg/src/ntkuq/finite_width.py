"""Finite-width erf MLPs trained with the per-layer learning-rate tensor.

Networks use the critical initialization (zero biases, Gaussian weights
with variance 1/fan_in) so that wide networks reproduce the analytic
kernel statistics at initialization and follow the linearized GD
dynamics during training.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy.special import erf

from .errors import DivergenceError

__all__ = [
    "MlpState",
    "TrainConfig",
    "AdamState",
    "EnsembleRunRecord",
    "EnsembleSummary",
    "init_network",
    "forward",
    "mse_loss",
    "gd_epoch",
    "adam_epoch",
    "train_with_early_stopping",
    "run_ensemble",
]

_ERF_DERIV_COEF = 2.0 / math.sqrt(math.pi)


@dataclass
class MlpState:
    """Weights and biases of an erf MLP; layer ell has shape (n_ell, n_{ell-1})."""

    weights: list
    biases: list

    def copy(self):
        return MlpState(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    @property
    def depth(self):
        return len(self.weights)


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    lambda_b: float = 1.0
    lambda_w: float = 1.0
    optimizer: str = "full_batch_gd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    minibatch: int = 1000
    patience: int = 10_000
    max_epochs: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("full_batch_gd", "adam"):
            raise ValueError("unknown optimizer %r" % self.optimizer)


@dataclass
class AdamState:
    """First/second moment buffers and the step counter for Adam."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    t: int = 0

    @classmethod
    def zeros_like(cls, net):
        return cls(
            m_w=[np.zeros_like(w) for w in net.weights],
            v_w=[np.zeros_like(w) for w in net.weights],
            m_b=[np.zeros_like(b) for b in net.biases],
            v_b=[np.zeros_like(b) for b in net.biases],
        )


@dataclass(frozen=True)
class EnsembleRunRecord:
    seed: int
    final_test_loss: float
    best_val_loss: float
    epochs_run: int
    stop_reason: str


@dataclass(frozen=True)
class EnsembleSummary:
    records: list
    mu_L: float
    var_L: float
    eps_L: float
    eps_se: float
    n_ok: int
    n_diverged: int


def init_network(arch, seed):
    """Critically initialized MLP: zero biases, weight variance 1/fan_in."""
    rng = np.random.default_rng(seed)
    widths = [arch.input_dim] + [arch.hidden_width] * (arch.depth - 1) + [arch.n_out]
    weights, biases = [], []
    for ell in range(arch.depth):
        fan_in = widths[ell]
        weights.append(rng.standard_normal((widths[ell + 1], fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(widths[ell + 1]))
    return MlpState(weights=weights, biases=biases)


def _forward_trace(net, X):
    """Preactivations z^(1) .. z^(L) for each example, as (N, n_ell) arrays."""
    zs = []
    a = np.atleast_2d(np.asarray(X, dtype=float))
    for ell, (W, b) in enumerate(zip(net.weights, net.biases)):
        if a.shape[1] != W.shape[1]:
            raise ValueError(
                "layer %d expects %d inputs, got %d" % (ell + 1, W.shape[1], a.shape[1])
            )
        z = a @ W.T + b
        zs.append(z)
        a = erf(z)
    return zs


def forward(net, X):
    """Network outputs for a batch of inputs; linear readout at the top."""
    return _forward_trace(net, X)[-1]


def mse_loss(net, X, Y):
    """Training loss: 1/(n_out N) * sum over examples of half squared error."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    out = forward(net, X)
    if Y.shape != out.shape:
        raise ValueError("label shape %s does not match output %s" % (Y.shape, out.shape))
    n, n_out = out.shape
    return float(np.sum((out - Y) ** 2) / (2.0 * n_out * n))


def _gradients(net, X, Y):
    """Backprop gradients of mse_loss w.r.t. every weight and bias."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    zs = _forward_trace(net, X)
    n, n_out = zs[-1].shape
    grad_w = [None] * net.depth
    grad_b = [None] * net.depth
    # dL/dz^(L)
    delta = (zs[-1] - Y) / (n_out * n)
    for ell in range(net.depth - 1, -1, -1):
        a_prev = X if ell == 0 else erf(zs[ell - 1])
        grad_w[ell] = delta.T @ a_prev
        grad_b[ell] = np.sum(delta, axis=0)
        if ell > 0:
            dact = _ERF_DERIV_COEF * np.exp(-zs[ell - 1] ** 2)
            delta = (delta @ net.weights[ell]) * dact
    return grad_w, grad_b


def _bias_scale(lambda_b, layer_index):
    # Layer m >= 2 biases carry lambda_b/(m-1), matching the constant the
    # kernel/NTK recursion adds at each step; layer 1 carries lambda_b.
    return lambda_b / max(1, layer_index)


def gd_epoch(net, X, Y, cfg):
    """One full-batch GD step with the per-layer learning-rate tensor.

    Weights move with eta * lambda_w / fan_in; biases with the per-layer
    lambda_b scale consistent with the analytic NTK recursion.
    """
    grad_w, grad_b = _gradients(net, X, Y)
    for ell in range(net.depth):
        fan_in = net.weights[ell].shape[1]
        net.weights[ell] -= cfg.eta * (cfg.lambda_w / fan_in) * grad_w[ell]
        net.biases[ell] -= cfg.eta * _bias_scale(cfg.lambda_b, ell) * grad_b[ell]
    return net


def adam_epoch(net, X, Y, cfg, opt, rng):
    """One epoch of minibatched Adam over a seeded shuffle of the data.

    Plain Adam on all parameters; the learning-rate tensor is not applied.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = X.shape[0]
    batch = min(cfg.minibatch, n)
    order = rng.permutation(n)
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        grad_w, grad_b = _gradients(net, X[idx], Y[idx])
        opt.t += 1
        c1 = 1.0 - cfg.adam_beta1**opt.t
        c2 = 1.0 - cfg.adam_beta2**opt.t
        for ell in range(net.depth):
            for g, m, v, p in (
                (grad_w[ell], opt.m_w, opt.v_w, net.weights),
                (grad_b[ell], opt.m_b, opt.v_b, net.biases),
            ):
                m[ell] = cfg.adam_beta1 * m[ell] + (1.0 - cfg.adam_beta1) * g
                v[ell] = cfg.adam_beta2 * v[ell] + (1.0 - cfg.adam_beta2) * g * g
                p[ell] -= cfg.eta * (m[ell] / c1) / (np.sqrt(v[ell] / c2) + cfg.adam_eps)
    return net


def train_with_early_stopping(net, split, cfg, val_loss_fn=None):
    """Train until validation loss stalls for `patience` epochs.

    split is a dict with x_train/y_train/x_val/y_val/x_test/y_test.
    Best-validation parameters are restored before the single test-loss
    evaluation. val_loss_fn overrides the validation metric (test hook).
    """
    x_tr, y_tr = split["x_train"], split["y_train"]
    x_val, y_val = split["x_val"], split["y_val"]
    x_te, y_te = split["x_test"], split["y_test"]

    if val_loss_fn is None:
        val_loss_fn = lambda n_, epoch: mse_loss(n_, x_val, y_val)

    opt = AdamState.zeros_like(net) if cfg.optimizer == "adam" else None
    rng = np.random.default_rng(cfg.seed)

    initial_train = mse_loss(net, x_tr, y_tr)
    best_val = val_loss_fn(net, 0)
    best_params = net.copy()
    bad_epochs = 0
    stop_reason = "max_epochs"
    epoch = 0
    while epoch < cfg.max_epochs:
        if cfg.optimizer == "adam":
            adam_epoch(net, x_tr, y_tr, cfg, opt, rng)
        else:
            gd_epoch(net, x_tr, y_tr, cfg)
        epoch += 1
        train_loss = mse_loss(net, x_tr, y_tr)
        if not np.isfinite(train_loss) or train_loss > 1e6 * max(initial_train, 1e-300):
            stop_reason = "divergence"
            break
        val = val_loss_fn(net, epoch)
        if val < best_val:
            best_val = val
            best_params = net.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stop_reason = "patience"
                break

    if stop_reason == "divergence":
        return EnsembleRunRecord(
            seed=cfg.seed,
            final_test_loss=float("nan"),
            best_val_loss=float(best_val),
            epochs_run=epoch,
            stop_reason=stop_reason,
        )
    net.weights = best_params.weights
    net.biases = best_params.biases
    return EnsembleRunRecord(
        seed=cfg.seed,
        final_test_loss=mse_loss(net, x_te, y_te),
        best_val_loss=float(best_val),
        epochs_run=epoch,
        stop_reason=stop_reason,
    )


def _jackknife_eps_se(losses):
    n = losses.size
    if n < 3:
        return float("nan")
    eps_loo = np.empty(n)
    for i in range(n):
        rest = np.delete(losses, i)
        mu = rest.mean()
        sd = rest.std(ddof=1)
        eps_loo[i] = sd / mu if mu > 0 else np.nan
    center = np.mean(eps_loo)
    return float(np.sqrt((n - 1) / n * np.sum((eps_loo - center) ** 2)))


def run_ensemble(split, arch, cfg, n_members, base_seed):
    """Train n_members networks differing only in their init seed.

    Returns per-member records plus the sample mean/variance of the final
    test losses, the coefficient of variation and its jackknife SE.
    Diverged members are kept in the records but excluded from moments.
    """
    if n_members < 2:
        raise ValueError("an ensemble needs at least 2 members")
    records = []
    for i in range(n_members):
        seed = base_seed + i
        member_cfg = replace(cfg, seed=seed)
        net = init_network(arch, seed)
        records.append(train_with_early_stopping(net, split, member_cfg))

    ok = np.array(
        [r.final_test_loss for r in records if r.stop_reason != "divergence"]
    )
    n_diverged = len(records) - ok.size
    if ok.size >= 2:
        mu = float(np.mean(ok))
        var = float(np.var(ok, ddof=1))
        eps = float(np.sqrt(var) / mu) if mu > 0 else float("nan")
        eps_se = _jackknife_eps_se(ok)
    else:
        mu = var = eps = eps_se = float("nan")
    return EnsembleSummary(
        records=records,
        mu_L=mu,
        var_L=var,
        eps_L=eps,
        eps_se=eps_se,
        n_ok=int(ok.size),
        n_diverged=int(n_diverged),
    )
