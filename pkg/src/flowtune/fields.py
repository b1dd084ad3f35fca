"""Time-dependent vector fields: trainable MLP, structured residual, analytic oracles.

All trainable fields are written with `Tensor` ops so solver unrolling and
loss gradients come from the same tape.  Plain-numpy evaluation goes through
`velocity`, which wraps the tensor path under `no_grad`.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .autodiff import ParamStore, Tensor, concat, no_grad
from .linalg import sym_eig_max
from .rng import Rng

CHECKPOINT_FORMAT_VERSION = 1


class FieldEvalError(RuntimeError):
    pass


def _check_finite(kind: str, t, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise FieldEvalError(f"{kind} field produced non-finite output at t={t}")


# --------------------------------------------------------------------------
# activations admissible for the structured residual field.  Each entry is
# sign-matched (s*f(s) > 0 for s != 0), continuous, strictly increasing, and
# carries a closed-form antiderivative for Lyapunov evaluation.
# --------------------------------------------------------------------------

class Tanh:
    name = "tanh"
    slope = None
    lipschitz = 1.0

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return np.tanh(s)

    def tensor(self, s: Tensor) -> Tensor:
        return s.tanh()

    def integral(self, w: np.ndarray) -> np.ndarray:
        """Integral of the activation from 0 to w: log cosh(w)."""
        w = np.asarray(w, dtype=np.float64)
        return np.abs(w) + np.log1p(np.exp(-2.0 * np.abs(w))) - math.log(2.0)


class LeakyRelu:
    name = "leaky_relu"

    def __init__(self, slope: float):
        if slope <= 0:
            raise ValueError("leaky_relu slope must be > 0 to stay sign-matched")
        self.slope = float(slope)
        self.lipschitz = max(1.0, self.slope)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return np.where(s > 0, s, self.slope * s)

    def tensor(self, s: Tensor) -> Tensor:
        return s.leaky_relu(self.slope)

    def integral(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        return np.where(w > 0, 0.5 * w * w, 0.5 * self.slope * w * w)


def make_activation(name: str, slope: float | None = None):
    if name == "tanh":
        return Tanh()
    if name == "leaky_relu":
        return LeakyRelu(0.1 if slope is None else slope)
    raise ValueError(f"activation {name!r} not in the admissible menu")


# --------------------------------------------------------------------------
# trainable MLP field
# --------------------------------------------------------------------------

def time_features(t, count: int) -> np.ndarray:
    """Sinusoidal embedding of time: [t, sin/cos at dyadic frequencies]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    cols = [t]
    for k in range(count // 2):
        w = math.pi * (2.0 ** k)
        cols.append(np.sin(w * t))
        cols.append(np.cos(w * t))
    return np.stack(cols, axis=1)


class MlpField:
    """MLP velocity field v(t, x) with tanh hidden layers.

    Input layout is [x, t, sinusoidal features of t]; output has the state
    dimension.
    """

    kind = "mlp"

    def __init__(self, dim: int, hidden: tuple[int, ...] = (64, 64),
                 time_feature_count: int = 8, rng: Rng | None = None,
                 init: str = "normal"):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_feature_count = int(time_feature_count)
        self.params = ParamStore()
        widths = [self.dim + 1 + self.time_feature_count, *self.hidden, self.dim]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if init == "zeros" or rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)
            self.params.add(f"w{i}", w)
            self.params.add(f"b{i}", np.zeros(fan_out))
        self.n_layers = len(widths) - 1

    def forward(self, t, x: Tensor) -> Tensor:
        feats = time_features(t, self.time_feature_count)
        if feats.shape[0] == 1 and x.data.shape[0] > 1:
            feats = np.broadcast_to(feats, (x.data.shape[0], feats.shape[1]))
        h = concat([x, Tensor(feats)], axis=1)
        for i in range(self.n_layers):
            h = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = h.tanh()
        _check_finite(self.kind, t, h.data)
        return h

    def velocity(self, t, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(t, Tensor(np.atleast_2d(x))).data

    def meta(self) -> dict:
        return {"dim": self.dim, "hidden": list(self.hidden),
                "time_feature_count": self.time_feature_count}

    @classmethod
    def from_meta(cls, meta: dict) -> "MlpField":
        return cls(meta["dim"], tuple(meta["hidden"]), meta["time_feature_count"])


# --------------------------------------------------------------------------
# structured residual field: A0 x + sum_j A_j f_j(W_j x) + g(u)
# --------------------------------------------------------------------------

class ControlSynthField:
    """Residual dynamics with sign-matched nonlinear blocks and an affine input map.

    The conditioning vector u is bound per trajectory (the handoff state of
    the pretrained flow); `bound(u)` returns a solver-ready view.
    """

    kind = "controlsynth"

    def __init__(self, dim: int, block_dims: tuple[int, ...] = (16,),
                 activations=("tanh",), slopes=(None,), cond_dim: int | None = None,
                 rng: Rng | None = None, init: str = "default"):
        self.dim = int(dim)
        self.block_dims = tuple(int(k) for k in block_dims)
        self.cond_dim = self.dim if cond_dim is None else int(cond_dim)
        if len(activations) != len(self.block_dims):
            raise ValueError("one activation per nonlinear block required")
        self.activations = [make_activation(a, s) for a, s in zip(activations, slopes)]
        self.params = ParamStore()
        # zero A0/A_j/g start: the residual stage is exactly the identity until
        # trained, so stacking it never degrades the base reconstruction
        self.params.add("A0", np.zeros((self.dim, self.dim)))
        for j, k in enumerate(self.block_dims):
            self.params.add(f"A{j + 1}", np.zeros((self.dim, k)))
            if init == "zeros" or rng is None:
                w = np.zeros((k, self.dim))
            else:
                w = rng.normal((k, self.dim)) / math.sqrt(self.dim)
            self.params.add(f"W{j + 1}", w)
        self.params.add("G", np.zeros((self.dim, self.cond_dim)))
        self.params.add("g_bias", np.zeros(self.dim))

    @classmethod
    def zeros(cls, dim: int, block_dims: tuple[int, ...] = (16,),
              activations=("tanh",), slopes=(None,), cond_dim: int | None = None):
        return cls(dim, block_dims, activations, slopes, cond_dim, init="zeros")

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims)

    def matrices(self) -> dict[str, np.ndarray]:
        out = {"A0": self.params["A0"].data}
        for j in range(1, self.n_blocks + 1):
            out[f"A{j}"] = self.params[f"A{j}"].data
            out[f"W{j}"] = self.params[f"W{j}"].data
        return out

    def forward(self, t, x: Tensor, u: Tensor | np.ndarray | None = None) -> Tensor:
        out = x @ _transpose(self.params["A0"])
        for j, act in enumerate(self.activations, start=1):
            pre = x @ _transpose(self.params[f"W{j}"])
            out = out + act.tensor(pre) @ _transpose(self.params[f"A{j}"])
        if u is not None:
            u_t = u if isinstance(u, Tensor) else Tensor(np.atleast_2d(u))
            out = out + u_t @ _transpose(self.params["G"])
        out = out + self.params["g_bias"]
        _check_finite(self.kind, t, out.data)
        return out

    def velocity(self, t, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        with no_grad():
            return self.forward(t, Tensor(np.atleast_2d(x)), u).data

    def bound(self, u: np.ndarray) -> "BoundField":
        return BoundField(self, u)

    def meta(self) -> dict:
        return {"dim": self.dim, "block_dims": list(self.block_dims),
                "activations": [a.name for a in self.activations],
                "slopes": [a.slope for a in self.activations],
                "cond_dim": self.cond_dim}

    @classmethod
    def from_meta(cls, meta: dict) -> "ControlSynthField":
        return cls(meta["dim"], tuple(meta["block_dims"]), meta["activations"],
                   meta["slopes"], meta["cond_dim"])


def _transpose(p: Tensor) -> Tensor:
    t = Tensor._result(p.data.T, (p,), lambda g: (g.T,))
    return t


class BoundField:
    """A conditioned view of a residual field with u fixed per trajectory."""

    def __init__(self, base: ControlSynthField, u: np.ndarray):
        self.base = base
        self.u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        self.kind = base.kind
        self.params = base.params

    def forward(self, t, x: Tensor) -> Tensor:
        return self.base.forward(t, x, self.u)

    def velocity(self, t, x: np.ndarray) -> np.ndarray:
        return self.base.velocity(t, x, self.u)


# --------------------------------------------------------------------------
# analytic fields with known flows, Lipschitz constants and curvature bounds
# --------------------------------------------------------------------------

class ConstantField:
    kind = "constant"

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)
        self.dim = self.c.shape[0]

    def velocity(self, t, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(self.c, x.shape).copy()

    def exact_flow(self, x0: np.ndarray, t0: float, t1: float) -> np.ndarray:
        return np.asarray(x0, dtype=np.float64) + (t1 - t0) * self.c

    def lipschitz_bound(self) -> float:
        return 0.0

    def curvature_bound(self, x0: np.ndarray, t_end: float) -> float:
        return 0.0


class LinearField:
    """v(t, x) = A x.  Exact flow via the matrix exponential."""

    kind = "linear"

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        self.dim = self.a.shape[0]
        self.is_diagonal = np.allclose(self.a, np.diag(np.diag(self.a)), atol=0.0)

    def velocity(self, t, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.a.T

    def exact_flow(self, x0: np.ndarray, t0: float, t1: float) -> np.ndarray:
        from scipy.linalg import expm
        x0 = np.asarray(x0, dtype=np.float64)
        if self.is_diagonal:
            return x0 * np.exp(np.diag(self.a) * (t1 - t0))
        return x0 @ expm(self.a * (t1 - t0)).T

    def lipschitz_bound(self) -> float:
        return math.sqrt(max(sym_eig_max(self.a.T @ self.a), 0.0))

    def curvature_bound(self, x0: np.ndarray, t_end: float) -> float:
        """Upper bound on sup_t |d^2/dt^2 exp(At) x0| along the exact path."""
        x0 = np.asarray(x0, dtype=np.float64)
        if self.is_diagonal:
            diag = np.diag(self.a)
            comp = diag ** 2 * np.abs(x0) * np.exp(np.maximum(diag, 0.0) * t_end)
            return float(np.linalg.norm(comp))
        norm_a = self.lipschitz_bound()
        return float(norm_a ** 2 * np.linalg.norm(x0) * math.exp(norm_a * t_end))


def decay_field(dim: int) -> LinearField:
    """The -x contraction reference field."""
    f = LinearField(-np.eye(dim))
    f.kind = "decay"
    return f


class PerturbedField:
    """Analytic base plus a time-varying offset with Euclidean norm <= delta."""

    kind = "perturbed"

    def __init__(self, base, delta: float, freq: float = 2.7):
        self.base = base
        self.delta = float(delta)
        self.freq = float(freq)
        self.dim = base.dim
        self._dir = np.ones(self.dim) / math.sqrt(self.dim)

    def velocity(self, t, x: np.ndarray) -> np.ndarray:
        off = self.delta * math.cos(self.freq * float(t)) * self._dir
        return self.base.velocity(t, x) + off

    def lipschitz_bound(self) -> float:
        return self.base.lipschitz_bound()


def lipschitz_estimate(field, box_lo, box_hi, probes: int, rng: Rng,
                       t_range: tuple[float, float] = (0.0, 1.0)) -> float:
    """Empirical lower bound on the Lipschitz constant over a box.

    Samples random pairs at shared random times and takes the max difference
    quotient.
    """
    if probes < 2:
        raise ValueError("need at least 2 probes")
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate probing box")
    dim = lo.shape[0]
    xs = rng.uniform(0.0, 1.0, (probes, dim)) * (hi - lo) + lo
    ys = rng.uniform(0.0, 1.0, (probes, dim)) * (hi - lo) + lo
    ts = rng.uniform(t_range[0], t_range[1], probes)
    best = 0.0
    for x, y, t in zip(xs, ys, ts):
        dx = np.linalg.norm(x - y)
        if dx < 1e-12:
            continue
        dv = np.linalg.norm(field.velocity(t, x[None]) - field.velocity(t, y[None]))
        best = max(best, dv / dx)
    return best


# --------------------------------------------------------------------------
# checkpoint persistence (versioned JSON)
# --------------------------------------------------------------------------

_FIELD_CLASSES = {"mlp": MlpField, "controlsynth": ControlSynthField}


def save_checkpoint(field, path, rng_seed: int = 0, training_step: int = 0,
                    stage: str = "init") -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "field_kind": field.kind,
        "meta": field.meta(),
        "shapes": {n: list(p.data.shape) for n, p in field.params.items()},
        "params": {n: p.data.reshape(-1).tolist() for n, p in field.params.items()},
        "rng_seed": int(rng_seed),
        "training_step": int(training_step),
        "stage": stage,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Rebuild a field from a checkpoint; returns (field, document)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {doc.get('format_version')}")
    cls = _FIELD_CLASSES.get(doc["field_kind"])
    if cls is None:
        raise ValueError(f"unknown field kind {doc['field_kind']!r}")
    field = cls.from_meta(doc["meta"])
    for name, flat in doc["params"].items():
        shape = tuple(doc["shapes"][name])
        field.params[name].data[...] = np.asarray(flat, dtype=np.float64).reshape(shape)
    return field, doc
