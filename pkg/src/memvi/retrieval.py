"""Iterative retrieval engines.

Single-step updates (``mchn_step``, ``gmm_step``, ``gmm_smooth_step``,
``precision_step``), the reconstruction-plus-prior gradient descent
(``bp_gmm_retrieve``), the predictive-coding network (``pc_gmm_retrieve``)
and a uniform ``retrieve`` dispatcher.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyMemoryError, NumericError, ShapeError
from .memory import (
    MCHN,
    BalancedGMM,
    PrecisionGMM,
    check_precision,
    grad_mchn_energy,
    log_prior_balanced,
    log_prior_precision,
    mchn_energy,
    precision_readout,
)
from .model import LayerStack, VaeModel, decode, encode, layer_forward, layer_vjp

ENGINES = ("mchn", "gmm", "gmm_smooth", "precision", "bp_gmm", "pc_gmm")
DEFAULT_BP_STEP = 0.05
DEFAULT_PC_STEP = 0.05


@dataclass
class RetrievalConfig:
    """Loop controls shared by every engine.

    ``step`` is the descent rate ``alpha``; ``None`` selects the engine
    default (the exact one-step form for ``mchn``/``gmm``/``precision``,
    ``sigma^2/10`` for ``gmm_smooth``, 0.05 for ``bp_gmm`` and ``pc_gmm``).
    ``init_mode`` is ``"auto"``, ``"query"``, ``"encoder"`` or an explicit
    initial latent vector.
    """

    max_iters: int = 200
    step: float | None = None
    prior_weight: float = 2.0
    tol: float = 1e-7
    init_mode: object = "auto"
    log_energy: bool = True
    keep_trajectory: bool = False
    trajectory_cap: int = 1000

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.tol < 0:
            raise ConfigError("tol must be >= 0")
        if self.step is not None and not self.step > 0:
            raise ConfigError("step must be positive")
        if self.prior_weight < 0:
            raise ConfigError("prior_weight must be >= 0")
        if isinstance(self.init_mode, str) and self.init_mode not in ("auto", "query", "encoder"):
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")
        if self.trajectory_cap < 2:
            raise ConfigError("trajectory_cap must be >= 2")


@dataclass
class RetrievalResult:
    z_final: np.ndarray
    energies: list
    iterations_used: int
    matched_index: int
    matched_distance: float
    converged: bool
    trajectory: list = field(default_factory=list)
    state: object = None  # final PcState for pc_gmm

    def __eq__(self, other):
        if not isinstance(other, RetrievalResult):
            return NotImplemented
        return (
            np.array_equal(self.z_final, other.z_final)
            and self.energies == other.energies
            and self.iterations_used == other.iterations_used
            and self.matched_index == other.matched_index
            and self.matched_distance == other.matched_distance
            and self.converged == other.converged
            and len(self.trajectory) == len(other.trajectory)
            and all(np.array_equal(a, b) for a, b in zip(self.trajectory, other.trajectory))
        )


class _Trajectory:
    """Keeps at most ``cap`` points by dropping every other point and doubling the stride."""

    def __init__(self, cap):
        self.cap = cap
        self.stride = 1
        self.points = []
        self.count = 0
        self.last = None

    def add(self, z):
        if self.count % self.stride == 0:
            self.points.append(z.copy())
            if len(self.points) > self.cap:
                self.points = self.points[::2]
                self.stride *= 2
        self.last = (self.count, z.copy())
        self.count += 1

    def finish(self):
        if self.last is not None and (self.last[0] % self.stride != 0):
            if len(self.points) >= self.cap:
                self.points[-1] = self.last[1]
            else:
                self.points.append(self.last[1])
        return self.points


def match(z, memory):
    """Nearest stored pattern ``(index, distance)``; lowest index wins ties."""
    d2 = kernels.sq_dists(z, memory.patterns)
    k = int(np.argmin(d2))
    return k, float(math.sqrt(d2[k]))


def _check(z, memory):
    if memory.N == 0:
        raise EmptyMemoryError()
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (memory.d,):
        raise ShapeError(f"latent has shape {z.shape}, memory has d={memory.d}")
    return z


# --------------------------------------------------------------------------
# single-step updates
# --------------------------------------------------------------------------

def mchn_step(z, memory, beta):
    """``softmax(beta z^T M) M^T``."""
    z = _check(z, memory)
    if not beta > 0:
        raise ConfigError("beta must be positive")
    return kernels.mchn_readout(z, memory.patterns, float(beta))[0]


def mchn_gradient_step(z, memory, beta, alpha):
    """Plain gradient step on the Hopfield energy; equals ``mchn_step`` when ``alpha = 1/beta``."""
    return np.asarray(z, dtype=np.float64) - alpha * grad_mchn_energy(z, memory, beta)


def gmm_step(z, memory, sigma):
    """``softmax(-|z - M|^2 / 2 sigma^2) M^T``."""
    z = _check(z, memory)
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    return kernels.gmm_readout(z, memory.patterns, float(sigma))[0]


def gmm_smooth_step(z, memory, sigma, alpha):
    """Damped variant: ``z + alpha/sigma^2 (gmm_step(z) - z)``."""
    z = _check(z, memory)
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    return z + (alpha / (sigma * sigma)) * (gmm_step(z, memory, sigma) - z)


def precision_step(z, memory, P):
    """Mahalanobis-weighted readout ``softmax(-1/2 (z-M)^T P (z-M)) M^T``."""
    return precision_readout(z, memory, P)


# --------------------------------------------------------------------------
# reconstruction + prior descent
# --------------------------------------------------------------------------

def _decoder_of(model):
    if isinstance(model, VaeModel):
        return model.decoder
    if isinstance(model, LayerStack):
        return model
    raise ConfigError("this engine requires a trained decoder model")


def _forward_with_vjp(stack, z, upstream_fn):
    preds, x_hat = decode(stack, z)
    g = upstream_fn(x_hat)
    up = g
    for l in range(stack.depth):
        h_in = preds[l + 1] if l + 1 < stack.depth else z
        up = layer_vjp(stack[l], h_in, up)
    return x_hat, g, up


def default_bp_step(prior, gamma):
    """0.05, reduced when the prior term alone would make that step unstable."""
    if isinstance(prior, BalancedGMM) and gamma > 0:
        return min(DEFAULT_BP_STEP, 0.5 * prior.sigma**2 / gamma)
    if isinstance(prior, MCHN) and gamma > 0:
        return min(DEFAULT_BP_STEP, 0.5 / (prior.beta * gamma))
    if isinstance(prior, PrecisionGMM) and gamma > 0:
        return min(DEFAULT_BP_STEP, 0.5 / (float(np.max(prior.precision)) * gamma))
    return DEFAULT_BP_STEP


def bp_gmm_loss_and_grad(x, decoder, memory, prior, gamma, z):
    """``L = |f(z) - x|^2 - gamma log p(z; M)`` and its gradient in ``z``."""
    z = _check(z, memory)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (decoder.output_dim,):
        raise ShapeError(f"observation shape {x.shape} does not match decoder output {decoder.output_dim}")
    _, r, back = _forward_with_vjp(decoder, z, lambda xh: xh - x)
    loss = float(r @ r)
    grad = 2.0 * back
    if gamma:
        loss -= gamma * prior.log_prob(z, memory)
        grad = grad - gamma * prior.grad_log_prob(z, memory)
    return loss, grad


def _initial_latent(query, memory, config, model, default):
    mode = config.init_mode
    if not isinstance(mode, str):
        z0 = np.asarray(mode, dtype=np.float64)
        if z0.shape != (memory.d,):
            raise ShapeError(f"explicit initial latent has shape {z0.shape}, memory has d={memory.d}")
        return z0.copy()
    if mode == "auto":
        mode = default
    if mode == "encoder":
        if not isinstance(model, VaeModel):
            raise ConfigError("init_mode 'encoder' requires a trained VAE model")
        mu, _ = encode(model, query)
        return mu
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (memory.d,):
        raise ShapeError(
            f"query of shape {q.shape} cannot initialize a latent of dim {memory.d}; "
            "use init_mode='encoder' with a model"
        )
    return q.copy()


def _finish(z, memory, energies, iters, converged, traj):
    k, dist = match(z, memory)
    return RetrievalResult(
        z_final=z,
        energies=energies,
        iterations_used=iters,
        matched_index=k,
        matched_distance=dist,
        converged=converged,
        trajectory=traj.finish() if traj is not None else [],
    )


def bp_gmm_retrieve(x, model, memory, prior, config=None):
    """Gradient descent on reconstruction error plus weighted negative log-prior.

    ``model`` is a :class:`VaeModel` (enables encoder initialization) or a bare
    decoder :class:`LayerStack`.
    """
    config = config or RetrievalConfig()
    if memory.N == 0:
        raise EmptyMemoryError()
    decoder = _decoder_of(model)
    default = "encoder" if isinstance(model, VaeModel) else "query"
    z = _initial_latent(x, memory, config, model, default)
    if z.shape != (decoder.input_dim,):
        raise ShapeError(f"decoder latent dim {decoder.input_dim} != memory dim {memory.d}")
    gamma = config.prior_weight
    alpha = config.step if config.step is not None else default_bp_step(prior, gamma)
    energies = []
    traj = _Trajectory(config.trajectory_cap) if config.keep_trajectory else None
    converged = False
    it = 0
    for it in range(1, int(config.max_iters) + 1):
        loss, grad = bp_gmm_loss_and_grad(x, decoder, memory, prior, gamma, z)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericError(f"non-finite BP-GMM loss at step {it - 1}: {loss}")
        if traj is not None:
            traj.add(z)
        if config.log_energy:
            energies.append(loss)
        delta = alpha * grad
        z = z - delta
        if float(np.max(np.abs(delta))) < config.tol:
            converged = True
            break
    if traj is not None:
        traj.add(z)
    if config.log_energy:
        loss, _ = bp_gmm_loss_and_grad(x, decoder, memory, prior, gamma, z)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite BP-GMM loss at step {it}: {loss}")
        energies.append(loss)
    return _finish(z, memory, energies, it, converged, traj)


# --------------------------------------------------------------------------
# predictive coding
# --------------------------------------------------------------------------

@dataclass
class PcState:
    """``h[0]`` is the clamped observation, ``h[L]`` the latent ``z``; ``eps[l] = h[l] - f_l(h[l+1])``."""

    h: list
    eps: list

    @property
    def z(self):
        return self.h[-1]

    def copy(self):
        return PcState([a.copy() for a in self.h], [a.copy() for a in self.eps])


def pc_errors(h, stack):
    return [h[l] - layer_forward(stack[l], h[l + 1]) for l in range(stack.depth)]


def pc_init_state(x, stack, z0):
    """Clamp ``x``, put ``z0`` on top and fill intermediate layers by the forward cascade."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (stack.output_dim,):
        raise ShapeError(f"observation shape {x.shape} does not match decoder output {stack.output_dim}")
    preds, _ = decode(stack, z0)
    h = [x.copy()] + [p.copy() for p in preds[1:]] + [np.array(z0, dtype=np.float64)]
    return PcState(h, pc_errors(h, stack))


def pc_energy(state, stack, memory, sigma):
    """Free energy ``sum_l 1/2 |eps_l|^2 - log p(z; M)`` of a state (errors recomputed)."""
    eps = pc_errors(state.h, stack)
    return 0.5 * sum(float(e @ e) for e in eps) - log_prior_balanced(state.z, memory, sigma)


def _prior_pull(z, memory, sigma, alpha):
    return (alpha / (sigma * sigma)) * (gmm_step(z, memory, sigma) - z)


def pc_step(state, stack, memory, sigma, alpha):
    """One synchronous iteration of the PC network; returns ``(new_state, max |update|)``."""
    L = stack.depth
    h = state.h
    eps = pc_errors(h, stack)
    new_h = [a.copy() for a in h]
    biggest = 0.0
    for l in range(1, L):
        upd = alpha * (layer_vjp(stack[l - 1], h[l], eps[l - 1]) - eps[l])
        new_h[l] = h[l] + upd
        biggest = max(biggest, float(np.max(np.abs(upd))))
    z = h[L]
    upd = alpha * layer_vjp(stack[L - 1], z, eps[L - 1]) + _prior_pull(z, memory, sigma, alpha)
    new_h[L] = z + upd
    biggest = max(biggest, float(np.max(np.abs(upd))))
    return PcState(new_h, pc_errors(new_h, stack)), biggest


def pc_fixed_prediction_step(state, stack, memory, sigma, alpha):
    """One PC sweep under the fixed-prediction assumption.

    Predictions ``f_l(h[l+1])`` and layer Jacobians are frozen at the state
    the sweep starts from. With predictions frozen, the intermediate error
    units relax to ``eps_l = J_{l-1}^T eps_{l-1}``; the sweep sets them to
    that equilibrium from the bottom up, then moves ``z`` with the relaxed
    top error and the memory prior.
    """
    L = stack.depth
    h = state.h
    preds = [layer_forward(stack[l], h[l + 1]) for l in range(L)]
    eps = [h[0] - preds[0]]
    for l in range(1, L):
        eps.append(layer_vjp(stack[l - 1], h[l], eps[l - 1]))
    new_h = [h[0].copy()] + [preds[l] + eps[l] for l in range(1, L)]
    z = h[L]
    new_h.append(z + alpha * layer_vjp(stack[L - 1], z, eps[L - 1]) + _prior_pull(z, memory, sigma, alpha))
    return PcState(new_h, eps)


def pc_gmm_retrieve(x, model, memory, sigma, config=None):
    """Run the PC network (predictions refreshed every iteration) until convergence.

    Stops when the largest update over all layers falls below ``config.tol``
    or after ``config.max_iters`` iterations. Energies are the free energy of
    each visited state.
    """
    config = config or RetrievalConfig()
    if memory.N == 0:
        raise EmptyMemoryError()
    stack = _decoder_of(model)
    default = "encoder" if isinstance(model, VaeModel) else "query"
    z0 = _initial_latent(x, memory, config, model, default)
    if z0.shape != (stack.input_dim,):
        raise ShapeError(f"decoder latent dim {stack.input_dim} != memory dim {memory.d}")
    alpha = config.step if config.step is not None else min(DEFAULT_PC_STEP, 0.5 * sigma * sigma)
    state = pc_init_state(x, stack, z0)
    energies = []
    traj = _Trajectory(config.trajectory_cap) if config.keep_trajectory else None
    converged = False
    it = 0
    for it in range(1, int(config.max_iters) + 1):
        if config.log_energy:
            e = pc_energy(state, stack, memory, sigma)
            if not math.isfinite(e):
                raise NumericError(f"non-finite PC free energy at step {it - 1}: {e}")
            energies.append(e)
        if traj is not None:
            traj.add(state.z)
        state, biggest = pc_step(state, stack, memory, sigma, alpha)
        if not math.isfinite(biggest):
            raise NumericError(f"non-finite PC update at step {it - 1}")
        if biggest < config.tol:
            converged = True
            break
    if config.log_energy:
        energies.append(pc_energy(state, stack, memory, sigma))
    if traj is not None:
        traj.add(state.z)
    result = _finish(state.z, memory, energies, it, converged, traj)
    result.state = state
    return result


# --------------------------------------------------------------------------
# dispatcher
# --------------------------------------------------------------------------

_REQUIRED_PRIOR = {
    "mchn": MCHN,
    "gmm": BalancedGMM,
    "gmm_smooth": BalancedGMM,
    "precision": PrecisionGMM,
    "pc_gmm": BalancedGMM,
}


def _latent_engine(engine, prior, config):
    """Return ``(step_fn, energy_fn)`` for the pure-memory engines."""
    if engine == "mchn":
        beta = prior.beta
        if config.step is None:
            return (lambda z, m: mchn_step(z, m, beta)), (lambda z, m: mchn_energy(z, m, beta))
        a = config.step
        return (lambda z, m: mchn_gradient_step(z, m, beta, a)), (lambda z, m: mchn_energy(z, m, beta))
    if engine in ("gmm", "gmm_smooth"):
        s = prior.sigma
        energy = lambda z, m: -log_prior_balanced(z, m, s)
        if engine == "gmm" and config.step is None:
            return (lambda z, m: gmm_step(z, m, s)), energy
        a = config.step if config.step is not None else s * s / 10.0
        return (lambda z, m: gmm_smooth_step(z, m, s, a)), energy
    if engine == "precision":
        P = prior.precision
        return (lambda z, m: precision_step(z, m, P)), (lambda z, m: -log_prior_precision(z, m, P))
    raise ConfigError(f"unknown engine {engine!r}")


def iterate(step_fn, energy_fn, z0, memory, config):
    z = np.array(z0, dtype=np.float64)
    energies = []
    traj = _Trajectory(config.trajectory_cap) if config.keep_trajectory else None
    converged = False
    it = 0
    for it in range(1, int(config.max_iters) + 1):
        if config.log_energy:
            energies.append(float(energy_fn(z, memory)))
        if traj is not None:
            traj.add(z)
        z_new = step_fn(z, memory)
        if not np.all(np.isfinite(z_new)):
            raise NumericError(f"non-finite latent at step {it}")
        moved = float(np.max(np.abs(z_new - z)))
        z = z_new
        if moved < config.tol:
            converged = True
            break
    if config.log_energy:
        energies.append(float(energy_fn(z, memory)))
    if traj is not None:
        traj.add(z)
    return _finish(z, memory, energies, it, converged, traj)


def retrieve(query, memory, prior, engine, config=None, model=None):
    """Run ``engine`` on ``query`` against ``memory`` under ``prior``.

    ``model`` (a :class:`VaeModel` or decoder :class:`LayerStack`) is needed by
    ``bp_gmm`` and ``pc_gmm``, and by any engine whose ``init_mode`` is
    ``"encoder"``.
    """
    config = config or RetrievalConfig()
    if engine not in ENGINES:
        raise ConfigError(f"unknown engine {engine!r}; choose from {', '.join(ENGINES)}")
    want = _REQUIRED_PRIOR.get(engine)
    if want is not None and not isinstance(prior, want):
        raise ConfigError(f"engine {engine!r} requires a {want.kind} prior, got {prior.kind}")
    if engine == "precision":
        check_precision(prior.precision, memory.d)
    if memory.N == 0:
        raise EmptyMemoryError()
    if engine == "bp_gmm":
        if model is None:
            raise ConfigError("engine 'bp_gmm' requires a trained decoder model")
        return bp_gmm_retrieve(query, model, memory, prior, config)
    if engine == "pc_gmm":
        if model is None:
            raise ConfigError("engine 'pc_gmm' requires a trained decoder model")
        return pc_gmm_retrieve(query, model, memory, prior.sigma, config)
    z0 = _initial_latent(query, memory, config, model, "query")
    step_fn, energy_fn = _latent_engine(engine, prior, config)
    return iterate(step_fn, energy_fn, z0, memory, config)
