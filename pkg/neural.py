# neural.py
"""
Recurrent Q-network FC -> GRU -> ReLU -> FC, written directly on numpy.

Forward pass, backpropagation through time over full episodes, Adam, and the
flat parameter vector used for federation. Everything runs in float64.
"""

import logging
from dataclasses import dataclass, fields

import numpy as np

logger = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Raised when an activation, loss or gradient stops being finite."""


@dataclass(frozen=True)
class Architecture:
    obs_dim: int = 12
    fc_dim: int = 64
    gru_dim: int = 64
    n_actions: int = 7

    @property
    def dims(self) -> tuple:
        return (self.obs_dim, self.fc_dim, self.gru_dim, self.n_actions)

    @classmethod
    def from_dims(cls, dims) -> "Architecture":
        dims = tuple(int(d) for d in dims)
        if len(dims) != 4 or min(dims) < 1:
            raise ValueError(f"architecture needs four positive layer dims, got {dims}")
        return cls(*dims)

    def shapes(self) -> dict:
        """Parameter name -> shape, in flattening order. Weights are (out, in)."""
        D, F, H, A = self.dims
        return {
            "fc1_w": (F, D), "fc1_b": (F,),
            "gru_wz": (H, F), "gru_uz": (H, H), "gru_bz": (H,),
            "gru_wr": (H, F), "gru_ur": (H, H), "gru_br": (H,),
            "gru_wh": (H, F), "gru_uh": (H, H), "gru_bh": (H,),
            "fc2_w": (A, H), "fc2_b": (A,),
        }

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for shape in self.shapes().values())


DEFAULT_ARCH = Architecture()


@dataclass
class QNetParams:
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    gru_wz: np.ndarray
    gru_uz: np.ndarray
    gru_bz: np.ndarray
    gru_wr: np.ndarray
    gru_ur: np.ndarray
    gru_br: np.ndarray
    gru_wh: np.ndarray
    gru_uh: np.ndarray
    gru_bh: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    @property
    def arch(self) -> Architecture:
        F, D = self.fc1_w.shape
        A, H = self.fc2_w.shape
        return Architecture(D, F, H, A)

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "QNetParams":
        return QNetParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros(cls, arch: Architecture = DEFAULT_ARCH) -> "QNetParams":
        return cls(**{k: np.zeros(shape) for k, shape in arch.shapes().items()})


def init_params(seed=None, arch: Architecture = DEFAULT_ARCH) -> QNetParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in arch.shapes().items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return QNetParams(**arrays)


def flatten(params: QNetParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays().values()])


def unflatten(vector, arch: Architecture = DEFAULT_ARCH) -> QNetParams:
    vec = np.asarray(vector, dtype=float)
    if vec.ndim != 1 or vec.size != arch.param_count:
        raise ValueError(f"parameter vector has {vec.size} values, architecture {arch.dims} needs {arch.param_count}")
    arrays = {}
    offset = 0
    for name, shape in arch.shapes().items():
        size = int(np.prod(shape))
        arrays[name] = vec[offset:offset + size].reshape(shape).copy()
        offset += size
    return QNetParams(**arrays)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _check_finite(what: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values in {what}")


def _cell(p: QNetParams, obs, h):
    x = obs @ p.fc1_w.T + p.fc1_b
    z = _sigmoid(x @ p.gru_wz.T + h @ p.gru_uz.T + p.gru_bz)
    r = _sigmoid(x @ p.gru_wr.T + h @ p.gru_ur.T + p.gru_br)
    rh = r * h
    c = np.tanh(x @ p.gru_wh.T + rh @ p.gru_uh.T + p.gru_bh)
    h_new = (1.0 - z) * h + z * c
    u = np.maximum(h_new, 0.0)
    q = u @ p.fc2_w.T + p.fc2_b
    return q, h_new, (obs, x, h, z, r, rh, c, h_new, u)


def initial_state(batch: int | None = None, arch: Architecture = DEFAULT_ARCH) -> np.ndarray:
    return np.zeros(arch.gru_dim if batch is None else (batch, arch.gru_dim))


def forward(params: QNetParams, observation, h):
    """
    One step. observation is (obs_dim,) or (batch, obs_dim); h matches.
    Returns (q, h_next).
    """
    q, h_new, _ = _cell(params, np.asarray(observation, dtype=float), np.asarray(h, dtype=float))
    _check_finite("forward pass", q, h_new)
    return q, h_new


def unroll(params: QNetParams, obs_seq, h0=None):
    """
    Run a (T, B, obs_dim) sequence from h0 (zeros by default).
    Returns q of shape (T, B, n_actions) and the per-step cache used by backprop.
    """
    obs_seq = np.asarray(obs_seq, dtype=float)
    T, B, _ = obs_seq.shape
    h = np.zeros((B, params.arch.gru_dim)) if h0 is None else np.asarray(h0, dtype=float)
    qs = np.empty((T, B, params.arch.n_actions))
    cache = []
    for t in range(T):
        qs[t], h, step_cache = _cell(params, obs_seq[t], h)
        cache.append(step_cache)
    _check_finite("unrolled forward pass", qs)
    return qs, cache


def bptt_gradients(params: QNetParams, obs_seq, actions, targets):
    """
    Mean squared TD error over every (slot, episode) pair, at the taken action,
    backpropagated through the full recurrence from a zero hidden state.

    obs_seq (T, B, obs_dim), actions (T, B) int, targets (T, B).
    Returns (loss, gradients as QNetParams).
    """
    actions = np.asarray(actions, dtype=int)
    targets = np.asarray(targets, dtype=float)
    _check_finite("TD targets", targets)

    qs, cache = unroll(params, obs_seq)
    T, B, _ = qs.shape
    taken = np.take_along_axis(qs, actions[..., None], axis=2)[..., 0]
    err = taken - targets
    loss = float(np.mean(err * err))

    dq = np.zeros_like(qs)
    np.put_along_axis(dq, actions[..., None], (2.0 * err / (T * B))[..., None], axis=2)

    g = QNetParams.zeros(params.arch)
    dh_next = np.zeros((B, params.arch.gru_dim))
    for t in reversed(range(T)):
        obs, x, h, z, r, rh, c, h_new, u = cache[t]
        dq_t = dq[t]
        g.fc2_w += dq_t.T @ u
        g.fc2_b += dq_t.sum(axis=0)

        dh_new = dh_next + (dq_t @ params.fc2_w) * (h_new > 0)
        dz = dh_new * (c - h)
        dc = dh_new * z
        dh = dh_new * (1.0 - z)

        dac = dc * (1.0 - c * c)
        g.gru_wh += dac.T @ x
        g.gru_uh += dac.T @ rh
        g.gru_bh += dac.sum(axis=0)

        drh = dac @ params.gru_uh
        dr = drh * h
        dh += drh * r

        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        g.gru_wr += dar.T @ x
        g.gru_ur += dar.T @ h
        g.gru_br += dar.sum(axis=0)
        g.gru_wz += daz.T @ x
        g.gru_uz += daz.T @ h
        g.gru_bz += daz.sum(axis=0)

        dx = daz @ params.gru_wz + dar @ params.gru_wr + dac @ params.gru_wh
        dh += daz @ params.gru_uz + dar @ params.gru_ur
        g.fc1_w += dx.T @ obs
        g.fc1_b += dx.sum(axis=0)
        dh_next = dh

    if not np.isfinite(loss):
        raise NumericalError(f"non-finite TD loss {loss}")
    _check_finite("BPTT gradients", *g.arrays().values())
    return loss, g


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(params: QNetParams, grads: QNetParams, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with bias correction. Returns (new params, new state); inputs are not modified."""
    theta = flatten(params)
    g = flatten(grads)
    if g.shape != theta.shape or state.m.shape != theta.shape or state.v.shape != theta.shape:
        raise ValueError(f"shape mismatch: params {theta.shape}, grads {g.shape}, moments {state.m.shape}")

    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return unflatten(theta, params.arch), AdamState(m=m, v=v, t=t)
