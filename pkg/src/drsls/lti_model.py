"""Innovation-form LTI models and their horizon-stacked prediction operators.

The plant is

    x_{t+1} = A x_t + B u_t + L e_t
    y_t     = C x_t + D u_t + e_t

and over a horizon t = 0..T the stacked outputs obey ``y = G u + y0 + Theta e``,
where ``y0`` is the free response of the state reconstructed from a window of
``tau`` past inputs and outputs through the predictor ``A - L C``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import induced1
from .errors import ValidationError

DEFAULT_DECAY_THRESHOLD = 1e-6


def _as_matrix(value, rows, cols, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.size == rows * cols:
        arr = arr.reshape(rows, cols)
    elif arr.ndim == 0 and rows * cols == 1:
        arr = arr.reshape(1, 1)
    if arr.shape != (rows, cols):
        raise ValidationError(f"expected shape {(rows, cols)}, got {arr.shape}", field=name)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("entries must be finite", field=name)
    return arr


@dataclass(frozen=True, eq=False)
class InnovationModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValidationError(f"A must be square, got {A.shape}", field="A")
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(n, -1) if B.ndim < 2 else B
        C = np.asarray(self.C, dtype=float)
        C = C.reshape(-1, n) if C.ndim < 2 else C
        m, q = B.shape[1], C.shape[0]
        object.__setattr__(self, "A", _as_matrix(A, n, n, "A"))
        object.__setattr__(self, "B", _as_matrix(B, n, m, "B"))
        object.__setattr__(self, "C", _as_matrix(C, q, n, "C"))
        object.__setattr__(self, "D", _as_matrix(self.D, q, m, "D"))
        object.__setattr__(self, "L", _as_matrix(self.L, n, q, "L"))
        for name in "ABCDL":
            getattr(self, name).setflags(write=False)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.C.shape[0]

    @property
    def predictor(self):
        """The predictor matrix ``A - L C``."""
        return self.A - self.L @ self.C

    def to_dict(self):
        doc = {"n": self.n, "m": self.m, "q": self.q}
        for name in "ABCDL":
            doc[name] = [float(v) for v in getattr(self, name).ravel()]
        return doc

    @classmethod
    def from_dict(cls, doc):
        try:
            n, m, q = int(doc["n"]), int(doc["m"]), int(doc["q"])
        except KeyError as exc:
            raise ValidationError("missing dimension", field=exc.args[0]) from None
        shapes = {"A": (n, n), "B": (n, m), "C": (q, n), "D": (q, m), "L": (n, q)}
        mats = {}
        for name, (r, c) in shapes.items():
            if name not in doc:
                if name == "D":
                    mats[name] = np.zeros((r, c))
                    continue
                raise ValidationError("missing matrix", field=name)
            mats[name] = _as_matrix(doc[name], r, c, name)
        return cls(**mats)


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"not valid JSON ({exc})", field=str(path)) from None
    if not isinstance(doc, dict):
        raise ValidationError("model document must be a JSON object", field=str(path))
    return InnovationModel.from_dict(doc)


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=2))


@dataclass(frozen=True, eq=False)
class MarkovBank:
    """Predictor Markov parameters; ``psi_u[k-1]`` holds the k-th block."""

    tau: int
    psi_u: tuple
    psi_y: tuple

    def matrix(self):
        """``Psi = [Psi_tau^u ... Psi_1^u, Psi_tau^y ... Psi_1^y]``."""
        return np.hstack(list(reversed(self.psi_u)) + list(reversed(self.psi_y)))


@dataclass(frozen=True, eq=False)
class PastWindow:
    """Past inputs/outputs, oldest first: ``col(u_{-tau}, ..., u_{-1})``."""

    u_minus: np.ndarray
    y_minus: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_minus", np.asarray(self.u_minus, dtype=float).ravel())
        object.__setattr__(self, "y_minus", np.asarray(self.y_minus, dtype=float).ravel())

    @classmethod
    def zeros(cls, tau, m, q):
        return cls(np.zeros(tau * m), np.zeros(tau * q))


@dataclass(frozen=True, eq=False)
class StackedOperators:
    T: int
    Gamma: np.ndarray
    Tu: np.ndarray
    Te: np.ndarray
    Cblk: np.ndarray
    Dblk: np.ndarray
    G: np.ndarray
    Theta: np.ndarray
    m: int
    q: int

    @property
    def nblk(self):
        return self.T + 1


def _check_positive(value, name):
    if int(value) != value or value < 1:
        raise ValidationError(f"must be a positive integer, got {value!r}", field=name)
    return int(value)


def predictor_markov_params(model, tau):
    tau = _check_positive(tau, "tau")
    F = model.predictor
    bu = model.B - model.L @ model.D
    by = model.L
    psi_u, psi_y = [bu], [by]
    for _ in range(tau - 1):
        psi_u.append(F @ psi_u[-1])
        psi_y.append(F @ psi_y[-1])
    return MarkovBank(tau, tuple(psi_u), tuple(psi_y))


def stacked_operators(model, T):
    T = _check_positive(T, "T")
    n, m, q = model.n, model.m, model.q
    nb = T + 1
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(model.A @ powers[-1])
    Gamma = np.vstack(powers)
    Tu = np.zeros((nb * n, nb * m))
    Te = np.zeros((nb * n, nb * q))
    for i in range(1, nb):
        for j in range(i):
            Tu[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j - 1] @ model.B
            Te[i * n:(i + 1) * n, j * q:(j + 1) * q] = powers[i - j - 1] @ model.L
    Cblk = np.kron(np.eye(nb), model.C)
    Dblk = np.kron(np.eye(nb), model.D)
    G = Cblk @ Tu + Dblk
    Theta = Cblk @ Te + np.eye(nb * q)
    return StackedOperators(T, Gamma, Tu, Te, Cblk, Dblk, G, Theta, m=m, q=q)


def free_response_offset(ops, bank, window):
    """Free output response ``y0 = Cblk Gamma Psi [u-; y-]`` over the horizon."""
    m = bank.psi_u[0].shape[1]
    q = bank.psi_y[0].shape[1]
    if window.u_minus.size != bank.tau * m:
        raise ValidationError(
            f"expected {bank.tau * m} past inputs, got {window.u_minus.size}", field="u_minus")
    if window.y_minus.size != bank.tau * q:
        raise ValidationError(
            f"expected {bank.tau * q} past outputs, got {window.y_minus.size}", field="y_minus")
    x0 = bank.matrix() @ np.concatenate([window.u_minus, window.y_minus])
    return ops.Cblk @ (ops.Gamma @ x0)


def predictor_decay_check(model, tau):
    """Induced 1-norm of ``(A - L C)^tau``, the dropped truncation factor."""
    tau = _check_positive(tau, "tau")
    F = model.predictor
    P = np.eye(model.n)
    for _ in range(tau):
        P = F @ P
    return induced1(P)


def horizon_operators(model, T, tau, window):
    """Convenience: ``(ops, bank, y0)`` for one model and past window."""
    ops = stacked_operators(model, T)
    bank = predictor_markov_params(model, tau)
    return ops, bank, free_response_offset(ops, bank, window)
