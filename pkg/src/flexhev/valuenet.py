"""Small feed-forward networks approximating the cost-to-go, trained by backprop.

Inputs are scaled affinely from the state box to [-1, 1]; hidden layers use tanh;
the output layer is linear.
"""
from __future__ import annotations

import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

CHECKPOINT_VERSION = 1


class CorruptedModel(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, iteration: int, loss: float, step: int | None = None):
        super().__init__(msg)
        self.iteration = iteration
        self.loss = loss
        self.step = step


@dataclass(frozen=True)
class TrainingConfig:
    samples: int = 1024  # h, training states per step
    alpha: float = 1e-4  # stop when probe RMS change between iterates <= alpha (target units)
    iter_max: int = 1000
    lr: float = 0.01  # first-order optimisers only
    lr_decay: float = 0.999  # geometric, per iteration
    optimizer: str = "lbfgs"  # or "adam", "gd"
    batch_size: int | None = None  # None = full batch
    hidden: tuple = (32, 32)
    probe_size: int = 512
    seed: int = 0
    patience: int = 1  # consecutive below-alpha iterates required to stop
    refit_output: bool = True  # least-squares solve for the linear output layer after the optimiser

    def __post_init__(self):
        if self.samples < 1 or self.iter_max < 1 or not self.alpha > 0:
            raise ValueError("need samples >= 1, iter_max >= 1, alpha > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not (self.lr > 0 and 0 < self.lr_decay <= 1):
            raise ValueError("need lr > 0 and 0 < lr_decay <= 1")
        if self.optimizer not in ("lbfgs", "adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class ValueNet:
    """tanh MLP from a 3-D state to a scalar cost."""

    def __init__(self, weights, biases, in_lo, in_hi):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.in_lo = np.asarray(in_lo, dtype=float).copy()
        self.in_hi = np.asarray(in_hi, dtype=float).copy()
        self.in_lo.setflags(write=False)
        self.in_hi.setflags(write=False)
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("consecutive layers do not chain")

    @classmethod
    def initialize(cls, in_lo, in_hi, hidden=(32, 32), rng=None, n_in: int = 3) -> "ValueNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng() if rng is None else rng
        sizes = (n_in, *hidden, 1)
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / np.sqrt(a)
            ws.append(rng.uniform(-lim, lim, size=(a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs, in_lo, in_hi)

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def copy(self) -> "ValueNet":
        return ValueNet([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.in_lo, self.in_hi)

    def normalize(self, x) -> np.ndarray:
        return 2.0 * (np.asarray(x, dtype=float) - self.in_lo) / (self.in_hi - self.in_lo) - 1.0

    def outside_box(self, x) -> np.ndarray:
        """True where forward() would extrapolate beyond the normalisation box."""
        x = np.asarray(x, dtype=float)
        return np.any((x < self.in_lo) | (x > self.in_hi), axis=-1)

    def forward(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        h = self.normalize(np.atleast_2d(x))
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        out = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        if not np.all(np.isfinite(out)):
            self.check()
        return float(out[0]) if x.ndim == 1 else out

    __call__ = forward

    def check(self) -> None:
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise CorruptedModel("network holds non-finite parameters")

    # flat parameter view used by the optimiser and the gradient check
    def get_params(self) -> list:
        return [*self.weights, *self.biases]

    def set_params(self, params) -> None:
        n = len(self.weights)
        self.weights = [np.array(p, dtype=float) for p in params[:n]]
        self.biases = [np.array(p, dtype=float) for p in params[n:]]

    def save(self, path) -> None:
        arrays = {"version": np.array(CHECKPOINT_VERSION), "sizes": np.array(self.sizes),
                  "in_lo": self.in_lo, "in_hi": self.in_hi}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{i}"] = w
            arrays[f"b{i}"] = b
        with open(Path(path), "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ValueNet":
        try:
            with np.load(Path(path)) as z:
                if int(z["version"]) != CHECKPOINT_VERSION:
                    raise CorruptedModel(f"{path}: unsupported checkpoint version {int(z['version'])}")
                n = len(z["sizes"]) - 1
                net = cls([z[f"W{i}"] for i in range(n)], [z[f"b{i}"] for i in range(n)], z["in_lo"], z["in_hi"])
        except (ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
            if isinstance(exc, CorruptedModel):
                raise
            raise CorruptedModel(f"{path}: unreadable checkpoint ({exc})") from exc
        net.check()
        return net


def _forward_normalized(params, n_layers, z):
    """Forward pass on already-normalised inputs, keeping activations for backprop."""
    ws, bs = params[:n_layers], params[n_layers:]
    acts = [z]
    h = z
    for w, b in zip(ws[:-1], bs[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    return (h @ ws[-1] + bs[-1])[:, 0], acts


def _mse_and_grads(params, n_layers, z, y):
    out, acts = _forward_normalized(params, n_layers, z)
    err = out - y
    loss = float(np.mean(err**2))
    ws = params[:n_layers]
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = (2.0 / len(y)) * err[:, None]
    for i in range(n_layers - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ ws[i].T) * (1.0 - acts[i] ** 2)
    return loss, gw + gb


def loss_and_gradients(net: ValueNet, states, targets):
    """Mean squared error and its gradient w.r.t. [W0..WL, b0..bL]."""
    z = net.normalize(np.atleast_2d(states))
    return _mse_and_grads(net.get_params(), len(net.weights), z, np.atleast_1d(np.asarray(targets, float)))


@dataclass
class TrainResult:
    loss: float  # final MSE in target units
    iterations: int  # optimiser iterations attempted
    updates: int  # accepted updates
    converged: bool
    history: list = field(default_factory=list)  # loss after each accepted update


class _Progress:
    """Best iterate, loss history and the probe-distance stopping test shared by the optimisers."""

    def __init__(self, params, loss, probe_out, alpha_n, patience=1):
        self.best, self.best_loss = params, loss
        self.patience = patience
        self.quiet = 0  # consecutive iterates that moved less than alpha
        self.probe_out = probe_out
        self.alpha_n = alpha_n
        self.history: list = []
        self.updates = 0
        self.converged = False

    def accept(self, params, loss, probe_out) -> bool:
        """Record an accepted iterate; True once the model has stopped moving."""
        self.updates += 1
        if loss <= self.best_loss:
            self.best, self.best_loss = params, loss
        self.history.append(self.best_loss)
        change = float(np.sqrt(np.mean((probe_out - self.probe_out) ** 2)))
        self.probe_out = probe_out
        self.quiet = self.quiet + 1 if change <= self.alpha_n else 0
        self.converged = self.quiet >= self.patience
        return self.converged


def _run_lbfgs(state: _Progress, nl, z, yn, zp, iter_max) -> int:
    shapes = [p.shape for p in state.best]
    splits = np.cumsum([p.size for p in state.best])[:-1]

    def unpack(theta):
        return [a.reshape(sh) for a, sh in zip(np.split(theta, splits), shapes)]

    count = [0]

    def fun(theta):
        loss, g = _mse_and_grads(unpack(theta), nl, z, yn)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at iteration {count[0] + 1}", count[0] + 1, loss)
        return loss, np.concatenate([gi.ravel() for gi in g])

    def callback(intermediate_result):
        count[0] += 1
        params = unpack(intermediate_result.x.copy())
        if state.accept(params, float(intermediate_result.fun), _forward_normalized(params, nl, zp)[0]):
            raise StopIteration

    theta0 = np.concatenate([p.ravel() for p in state.best])
    minimize(fun, theta0, jac=True, method="L-BFGS-B", callback=callback,
             options={"maxiter": iter_max, "maxcor": 20, "ftol": 0.0, "gtol": 0.0})
    return count[0]


def _run_first_order(state: _Progress, grads, nl, z, yn, zp, config: TrainingConfig, rng) -> int:
    """Full-batch (or mini-batch) gradient descent or Adam with geometric step decay.

    Adam always steps; gd rejects a step that raises the loss and halves the step size.
    """
    params, loss = state.best, state.best_loss
    n = len(yn)
    minibatch = config.batch_size is not None and config.batch_size < n
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = config.lr
    it = 0
    for it in range(1, config.iter_max + 1):
        if minibatch:
            idx = rng.choice(n, size=config.batch_size, replace=False)
            _, g = _mse_and_grads(params, nl, z[idx], yn[idx])
        else:
            g = grads
        if config.optimizer == "adam":
            m = [b1 * a + (1 - b1) * gi for a, gi in zip(m, g)]
            v = [b2 * a + (1 - b2) * gi * gi for a, gi in zip(v, g)]
            cand = [p - lr * (mi / (1 - b1**it)) / (np.sqrt(vi / (1 - b2**it)) + eps)
                    for p, mi, vi in zip(params, m, v)]
        else:
            cand = [p - lr * gi for p, gi in zip(params, g)]
        new_loss, new_grads = _mse_and_grads(cand, nl, z, yn)
        if not np.isfinite(new_loss):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}", it, new_loss)
        lr *= config.lr_decay
        if config.optimizer == "gd" and new_loss > loss:
            lr *= 0.5
            continue
        params, loss, grads = cand, new_loss, new_grads
        if state.accept(params, loss, _forward_normalized(params, nl, zp)[0]):
            break
    return it


def _refit_output(params, loss, nl, z, yn):
    """Exact least-squares output layer on the final hidden features; kept only if it helps."""
    _, acts = _forward_normalized(params, nl, z)
    A = np.hstack([acts[-1], np.ones((len(yn), 1))])
    coef = np.linalg.lstsq(A, yn, rcond=None)[0]
    cand = [p.copy() for p in params]
    cand[nl - 1] = coef[:-1, None]
    cand[-1] = coef[-1:]
    new_loss = float(np.mean((A @ coef - yn) ** 2))
    return (cand, new_loss) if new_loss <= loss else (params, loss)


def train(net: ValueNet, states, targets, config: TrainingConfig = TrainingConfig(), probe=None,
          rng: np.random.Generator | None = None) -> tuple[ValueNet, TrainResult]:
    """Fit ``net`` to (states, targets) by backpropagation; returns a new net.

    ``lbfgs`` (default) runs full-batch L-BFGS on the backprop gradient; ``gd`` takes
    plain gradient steps and rejects any step that raises the loss; ``adam`` always
    steps.  In every case the returned net is the lowest-loss iterate and
    ``history`` is nonincreasing.  With ``refit_output`` the output layer is then
    re-solved by linear least squares on the last hidden layer.  Training stops once the RMS change of the output
    on ``probe`` between successive iterates is <= alpha, or after ``iter_max``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(y) < 1 or len(y) != len(states):
        raise ValueError("need one target per state and at least one sample")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    probe = states[: config.probe_size] if probe is None else np.atleast_2d(probe)

    # standardise targets, train the last layer in standardised units, fold back at the end
    mu = float(np.mean(y))
    sigma = float(np.std(y))
    sigma = sigma if sigma > 1e-12 * max(1.0, abs(mu)) else 1.0
    yn = (y - mu) / sigma
    nl = len(net.weights)
    params = [p.copy() for p in net.get_params()]
    params[nl - 1] = params[nl - 1] / sigma
    params[-1] = (params[-1] - mu) / sigma
    z = net.normalize(states)
    zp = net.normalize(probe)
    alpha_n = config.alpha / sigma

    loss, grads = _mse_and_grads(params, nl, z, yn)
    if not np.isfinite(loss):
        raise TrainingDiverged("initial loss is not finite", 0, loss)
    state = _Progress(params, loss, _forward_normalized(params, nl, zp)[0], alpha_n, config.patience)
    if config.optimizer == "lbfgs":
        it = _run_lbfgs(state, nl, z, yn, zp, config.iter_max)
    else:
        it = _run_first_order(state, grads, nl, z, yn, zp, config, rng)
    best, best_loss = state.best, state.best_loss
    if config.refit_output:
        best, best_loss = _refit_output(best, best_loss, nl, z, yn)
        state.history.append(best_loss)
    history = [h * sigma**2 for h in state.history]
    updates, converged = state.updates, state.converged

    best = [p.copy() for p in best]
    best[nl - 1] = best[nl - 1] * sigma
    best[-1] = best[-1] * sigma + mu
    out = ValueNet(best[:nl], best[nl:], net.in_lo, net.in_hi)
    return out, TrainResult(best_loss * sigma**2, it, updates, converged, history)


def squared_error_gradient(net: ValueNet, state, target: float = 0.0) -> list:
    """Analytic gradient of (phi(state) - target)^2 w.r.t. every parameter."""
    _, g = loss_and_gradients(net, np.atleast_2d(state), [target])
    return g


def numeric_gradient(net: ValueNet, state, target: float = 0.0, eps: float = 1e-5) -> list:
    """Central finite differences of (phi(state) - target)^2, one parameter at a time."""
    state = np.atleast_2d(np.asarray(state, dtype=float))
    params = [p.copy() for p in net.get_params()]
    probe = net.copy()
    out = []
    for pi, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            probe.set_params(params)
            fp = (probe.forward(state)[0] - target) ** 2
            p[idx] = orig - eps
            probe.set_params(params)
            fm = (probe.forward(state)[0] - target) ** 2
            p[idx] = orig
            g[idx] = (fp - fm) / (2.0 * eps)
        out.append(g)
    return out


def gradient_check(net: ValueNet, state, eps: float = 1e-5, target: float = 0.0) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    Relative error per parameter is |a - n| / max(|a| + |n|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    a = np.concatenate([g.ravel() for g in squared_error_gradient(net, state, target)])
    n = np.concatenate([g.ravel() for g in numeric_gradient(net, state, target, eps)])
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)))
