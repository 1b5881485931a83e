"""System level parameterization of finite-horizon affine output feedback.

A strictly causal policy ``u = K y + p`` acting on ``y = G u + y0 + Theta e``
produces closed-loop maps

    [y; u] = [[Phi_y, phi_y], [Phi_u, phi_u]] @ [y0 + Theta e; 1]

and, conversely, any ``(Phi_y, Phi_u, phi_y, phi_u)`` on the affine subspace
``Phi_y - G Phi_u = I``, ``phi_y - G phi_u = 0`` with the right block-triangular
structure is realized by ``K = Phi_u Phi_y^{-1}`` and ``p = phi_u - K phi_y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import diag_mask, induced1, lower_mask, max_forbidden, unit_lower_solve
from .errors import ConditioningError, InternalConsistencyError, ValidationError

STRUCTURE_TOL = 1e-9


def _arr(x):
    return np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class SlsParam:
    Phi_y: np.ndarray
    Phi_u: np.ndarray
    phi_y: np.ndarray
    phi_u: np.ndarray
    T: int
    m: int
    q: int

    def __post_init__(self):
        nb, m, q = self.T + 1, self.m, self.q
        expected = {
            "Phi_y": (nb * q, nb * q),
            "Phi_u": (nb * m, nb * q),
            "phi_y": (nb * q,),
            "phi_u": (nb * m,),
        }
        for name, shape in expected.items():
            value = _arr(getattr(self, name))
            if name.startswith("phi"):
                value = value.ravel()
            if value.shape != shape:
                raise ValidationError(f"expected shape {shape}, got {value.shape}", field=name)
            object.__setattr__(self, name, value)

    @property
    def Phi(self):
        """Stacked response map ``[Phi_y; Phi_u]``."""
        return np.vstack([self.Phi_y, self.Phi_u])

    @property
    def phi(self):
        return np.concatenate([self.phi_y, self.phi_u])

    @classmethod
    def identity(cls, T, m, q):
        nb = T + 1
        return cls(np.eye(nb * q), np.zeros((nb * m, nb * q)), np.zeros(nb * q),
                   np.zeros(nb * m), T, m, q)

    def to_dict(self):
        doc = {"T": self.T, "m": self.m, "q": self.q}
        for name in ("Phi_y", "Phi_u", "phi_y", "phi_u"):
            doc[name] = [float(v) for v in getattr(self, name).ravel()]
        return doc

    @classmethod
    def from_dict(cls, doc):
        T, m, q = int(doc["T"]), int(doc["m"]), int(doc["q"])
        nb = T + 1
        return cls(
            np.reshape(doc["Phi_y"], (nb * q, nb * q)),
            np.reshape(doc["Phi_u"], (nb * m, nb * q)),
            np.asarray(doc["phi_y"], dtype=float),
            np.asarray(doc["phi_u"], dtype=float),
            T, m, q,
        )


@dataclass(frozen=True, eq=False)
class AffinePolicy:
    """``u = K y + p`` with ``K`` block strictly lower-triangular."""

    K: np.ndarray
    p: np.ndarray
    T: int
    m: int
    q: int

    def __post_init__(self):
        nb = self.T + 1
        K, p = _arr(self.K), _arr(self.p).ravel()
        if K.shape != (nb * self.m, nb * self.q):
            raise ValidationError(f"expected shape {(nb * self.m, nb * self.q)}, got {K.shape}",
                                  field="K")
        if p.shape != (nb * self.m,):
            raise ValidationError(f"expected length {nb * self.m}, got {p.size}", field="p")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "p", p)

    def is_causal(self, tol=0.0):
        mask = lower_mask(self.T + 1, self.m, self.q, strict=True)
        return max_forbidden(self.K, mask) <= tol

    def to_dict(self):
        return {"T": self.T, "m": self.m, "q": self.q,
                "K": [float(v) for v in self.K.ravel()],
                "p": [float(v) for v in self.p]}

    @classmethod
    def from_dict(cls, doc):
        T, m, q = int(doc["T"]), int(doc["m"]), int(doc["q"])
        return cls(np.reshape(doc["K"], ((T + 1) * m, (T + 1) * q)), doc["p"], T, m, q)


@dataclass(frozen=True, eq=False)
class ClosedLoopResponse:
    y: np.ndarray
    u: np.ndarray

    @property
    def eta(self):
        return np.concatenate([self.y, self.u])


@dataclass(frozen=True, eq=False)
class MismatchRealization:
    """Model errors ``Delta = G - G_hat``, ``Theta - Theta_hat``, ``y0 - y0_hat``."""

    Delta: np.ndarray
    Theta_tilde: np.ndarray
    y0_tilde: np.ndarray

    @classmethod
    def zero(cls, T, m, q):
        nb = T + 1
        return cls(np.zeros((nb * q, nb * m)), np.zeros((nb * q, nb * q)), np.zeros(nb * q))

    def norms(self):
        return (induced1(self.Delta), induced1(self.Theta_tilde),
                float(np.abs(self.y0_tilde).sum()))


def random_mismatch(T, m, q, gamma, rng, strict_delta=True):
    """Draw a structured mismatch with norms uniform on ``[0, gamma_k]``.

    ``Delta`` follows the block pattern of ``G`` (strict when ``D = 0``) and
    ``Theta_tilde`` is block strictly lower-triangular since both ``Theta``
    and its estimate carry identity diagonal blocks.
    """
    nb = T + 1
    g1, g2, g3 = gamma

    def scaled(mask, radius, norm):
        M = np.where(mask, rng.uniform(-1.0, 1.0, mask.shape), 0.0)
        size = norm(M)
        if size == 0.0:
            return M
        return M * (radius * rng.uniform() / size)

    Delta = scaled(lower_mask(nb, q, m, strict=strict_delta), g1, induced1)
    Theta_tilde = scaled(lower_mask(nb, q, q, strict=True), g2, induced1)
    y0_tilde = scaled(np.ones(nb * q, dtype=bool), g3, lambda v: float(np.abs(v).sum()))
    return MismatchRealization(Delta, Theta_tilde, y0_tilde)


def _check_param_dims(param, G=None):
    if G is not None:
        nb = param.T + 1
        if np.shape(G) != (nb * param.q, nb * param.m):
            raise ValidationError(
                f"expected shape {(nb * param.q, nb * param.m)}, got {np.shape(G)}", field="G")


def validate_structure(param, tol=STRUCTURE_TOL):
    nb, m, q = param.T + 1, param.m, param.q
    if max_forbidden(param.Phi_y, lower_mask(nb, q, q)) > tol:
        return False
    if max_forbidden(param.Phi_u, lower_mask(nb, m, q, strict=True)) > tol:
        return False
    dmask = diag_mask(nb, q, q)
    return float(np.abs(param.Phi_y[dmask] - np.eye(nb * q)[dmask]).max()) <= tol


def validate_subspace(G, param):
    """Induced 1-norm of ``[I, -G] @ [[Phi_y, phi_y], [Phi_u, phi_u]] - [I, 0]``."""
    _check_param_dims(param, G)
    G = _arr(G)
    R = np.column_stack([
        param.Phi_y - G @ param.Phi_u - np.eye(param.Phi_y.shape[0]),
        param.phi_y - G @ param.phi_u,
    ])
    return induced1(R)


def extract_policy(param, tol=STRUCTURE_TOL):
    nb, m, q = param.T + 1, param.m, param.q
    # K Phi_y = Phi_u  <=>  Phi_y^T K^T = Phi_u^T; Phi_y^T is block unit upper,
    # so reverse the block order to get a unit lower system.
    rev = np.arange(nb * q).reshape(nb, q)[::-1].ravel()
    Kt = unit_lower_solve(param.Phi_y.T[np.ix_(rev, rev)], param.Phi_u.T[rev], q)
    K = np.empty_like(param.Phi_u)
    K[:, rev] = Kt.T
    mask = lower_mask(nb, m, q, strict=True)
    leak = max_forbidden(K, mask)
    if leak > tol * max(1.0, np.abs(K).max()):
        raise InternalConsistencyError(
            f"extracted gain violates strict causality by {leak:.3e}")
    K[~mask] = 0.0
    p = param.phi_u - K @ param.phi_y
    return AffinePolicy(K, p, param.T, m, q)


def params_from_policy(policy, G):
    nb, m, q = policy.T + 1, policy.m, policy.q
    G = _arr(G)
    if G.shape != (nb * q, nb * m):
        raise ValidationError(f"expected shape {(nb * q, nb * m)}, got {G.shape}", field="G")
    K, p = policy.K, policy.p
    GK = -G @ K
    Phi_y = unit_lower_solve(GK, np.eye(nb * q), q)
    Phi_u = K @ Phi_y
    phi_y = Phi_y @ (G @ p)
    phi_u = unit_lower_solve(-K @ G, p, m)
    return SlsParam(Phi_y, Phi_u, phi_y, phi_u, policy.T, m, q)


def response_from_param(param, y0, Theta, e):
    w = _arr(y0) + _arr(Theta) @ _arr(e)
    return ClosedLoopResponse(param.Phi_y @ w + param.phi_y, param.Phi_u @ w + param.phi_u)


def response_from_policy(policy, G, y0, Theta, e):
    """Step the loop block by block; the reference closed-loop simulation."""
    nb, m, q = policy.T + 1, policy.m, policy.q
    G = _arr(G)
    drive = _arr(y0) + _arr(Theta) @ _arr(e)
    y = np.zeros(nb * q)
    u = np.zeros(nb * m)
    for t in range(nb):
        ys, us = slice(t * q, (t + 1) * q), slice(t * m, (t + 1) * m)
        u[us] = policy.K[us, :t * q] @ y[:t * q] + policy.p[us]
        y[ys] = G[ys, :(t + 1) * m] @ u[:(t + 1) * m] + drive[ys]
    return ClosedLoopResponse(y, u)


def neumann_inverse(X, terms=None):
    """``sum_k X^k``; exact for nilpotent ``X`` once ``terms`` reaches its index."""
    terms = X.shape[0] if terms is None else terms
    S = np.eye(X.shape[0])
    P = np.eye(X.shape[0])
    for _ in range(terms):
        P = P @ X
        S = S + P
    return S


def mismatch_factors(nominal, Delta):
    """``R_Phi = (I - Delta Phi_u_hat)^{-1}`` and its block-forward-solve inputs."""
    X = _arr(Delta) @ nominal.Phi_u
    if induced1(X) >= 1.0 - 1e-9:
        raise ConditioningError(
            f"||Delta Phi_u|| = {induced1(X):.6g} leaves I - Delta Phi_u near-singular")
    R = unit_lower_solve(-X, np.eye(X.shape[0]), nominal.q)
    return X, R


def true_param_under_mismatch(nominal, Delta):
    _, R = mismatch_factors(nominal, Delta)
    shift = R @ (_arr(Delta) @ nominal.phi_u)
    return SlsParam(
        nominal.Phi_y @ R,
        nominal.Phi_u @ R,
        nominal.phi_y + nominal.Phi_y @ shift,
        nominal.phi_u + nominal.Phi_u @ shift,
        nominal.T, nominal.m, nominal.q,
    )


def true_response_under_mismatch(nominal, mm, y0_hat, Theta_hat, e):
    true = true_param_under_mismatch(nominal, mm.Delta)
    y0 = _arr(y0_hat) + mm.y0_tilde
    Theta = _arr(Theta_hat) + mm.Theta_tilde
    return response_from_param(true, y0, Theta, e), true
