"""Sparse representation of hidden states over the embedding dictionary.

Each state ``h`` is approximated by a least-squares combination of a few
dictionary rows chosen greedily: pick the atom with the largest inner product
with the current residual, refit the coefficients over every atom picked so
far, update the residual, repeat ``L`` times. Atoms already in the support
are never picked again.

The backward pass holds the support fixed, which makes the reconstruction the
orthogonal projection ``P h`` of ``h`` onto the span of the selected atoms.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .diffcore import Function, Tensor

logger = logging.getLogger(__name__)

EARLY_STOP = 1e-10
COND_LIMIT = 1e12
RIDGE_SCALE = 1e-8


class ExhaustedDictionaryError(ValueError):
    """Every atom is excluded from selection."""


class EmptySupportError(ValueError):
    """An operation needs at least one selected atom."""


class Dictionary:
    """Embedding matrix viewed as a set of atoms (one row per word).

    ``excluded`` lists rows that may never be selected (the padding row).
    """

    def __init__(self, atoms, excluded: Iterable[int] = ()):
        atoms = np.asarray(atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise ValueError(f"dictionary must be a matrix, got shape {atoms.shape}")
        self.atoms = atoms
        self.excluded = frozenset(int(i) for i in excluded)
        self._mask = np.zeros(self.N, dtype=bool)
        if self.excluded:
            self._mask[list(self.excluded)] = True
        if self.N < self.d:
            warnings.warn(f"dictionary is not overcomplete (N={self.N} < d={self.d})",
                          stacklevel=2)
        live = ~self._mask
        if np.any(np.all(atoms[live] == 0.0, axis=1)):
            raise ValueError("dictionary contains a zero atom")

    @property
    def N(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def excluded_mask(self) -> np.ndarray:
        return self._mask


@dataclass
class SparseCode:
    indices: list[int]
    coeffs: np.ndarray
    reconstruction: np.ndarray
    residual: np.ndarray
    residual_norm_history: list[float]
    ridge_events: int = 0

    @property
    def support(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "indices": [int(i) for i in self.indices],
            "coeffs": [float(c) for c in self.coeffs],
            "residual_norm_history": [float(x) for x in self.residual_norm_history],
        }


def dump_codes(codes: Sequence[SparseCode]) -> str:
    """One JSON object per state, newline separated."""
    return "".join(json.dumps(c.to_record(t)) + "\n" for t, c in enumerate(codes))


def select_atom(residual, dictionary: Dictionary, excluded=(), use_abs: bool = False) -> int:
    """Index of the non-excluded atom with the largest inner product with ``residual``."""
    scores = dictionary.atoms @ np.asarray(residual, dtype=np.float64)
    if use_abs:
        scores = np.abs(scores)
    blocked = dictionary.excluded_mask.copy()
    if len(excluded):
        blocked[list(excluded)] = True
    if blocked.all():
        raise ExhaustedDictionaryError("all atoms are excluded")
    scores = np.where(blocked, -np.inf, scores)
    return int(np.argmax(scores))  # first index on ties


def _gram_factor(gram: np.ndarray) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor, with a ridge when the system is near singular.

    The condition number is estimated from the factor's diagonal as
    ``(max L_ii / min L_ii)^2`` (exact for diagonal systems).
    """
    k = gram.shape[0]
    try:
        low = np.linalg.cholesky(gram)
        diag = np.abs(np.diag(low))
        if diag.min() > 0 and (diag.max() / diag.min()) ** 2 <= COND_LIMIT:
            return low, False
    except np.linalg.LinAlgError:
        pass
    ridged = gram + np.eye(k) * (RIDGE_SCALE * max(np.trace(gram), 1e-300) / k)
    logger.debug("ridge added to a %dx%d Gram system", k, k)
    return np.linalg.cholesky(ridged), True


def least_squares(M, h, return_ridge: bool = False):
    """Coefficients ``c`` minimising ``||h - M.T @ c||`` through the Gram system.

    A ridge of ``1e-8 * trace(G) / k`` is added when the Gram matrix is close
    to singular (condition estimate above 1e12).
    """
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape[0] == 0:
        raise EmptySupportError("least squares over an empty support")
    low, ridge = _gram_factor(M @ M.T)
    c = cho_solve((low, True), M @ np.asarray(h, dtype=np.float64), check_finite=False)
    return (c, ridge) if return_ridge else c


def sparse_encode(h, dictionary: Dictionary, L: int, use_abs: bool = False) -> SparseCode:
    if L < 1:
        raise ValueError(f"L must be at least 1, got {L}")
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (dictionary.d,):
        raise ValueError(f"state width {h.shape} does not match dictionary width {dictionary.d}")
    atoms = dictionary.atoms
    blocked = dictionary.excluded_mask.copy()
    residual = h.copy()
    recon = np.zeros_like(h)
    indices: list[int] = []
    coeffs = np.zeros(0)
    history = [float(np.sqrt(h @ h))]
    ridges = 0
    for _ in range(L):
        if history[-1] < EARLY_STOP:
            break
        if blocked.all():
            raise ExhaustedDictionaryError("all atoms are excluded")
        scores = atoms @ residual
        if use_abs:
            scores = np.abs(scores)
        scores[blocked] = -np.inf
        j = int(np.argmax(scores))
        indices.append(j)
        blocked[j] = True
        M = atoms[indices]
        coeffs, ridge = least_squares(M, h, return_ridge=True)
        ridges += ridge
        recon = M.T @ coeffs
        residual = h - recon
        history.append(float(np.sqrt(residual @ residual)))
    return SparseCode(indices, coeffs, recon, residual, history, ridges)


def sparse_encode_seq(H, dictionary: Dictionary, L: int, use_abs: bool = False):
    """Encode each row of ``H`` independently; returns ``(S, codes)``."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if H.shape[0] < 1:
        raise ValueError("need at least one state")
    codes = [sparse_encode(row, dictionary, L, use_abs) for row in H]
    S = np.stack([c.reconstruction for c in codes])
    return S, codes


def projection_matrix(M) -> np.ndarray:
    """``M.T (M M.T)^-1 M``: projector onto the row space of ``M``."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape[0] == 0:
        raise EmptySupportError("projection onto an empty support")
    X = cho_solve((_gram_factor(M @ M.T)[0], True), M, check_finite=False)
    P = M.T @ X
    return 0.5 * (P + P.T)


def _project(M: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(P g, u)`` with ``u = (M M.T)^-1 M g`` so that ``P g = M.T u``."""
    u = least_squares(M, g)
    return M.T @ u, u


def sparse_backward(grad_s, code: SparseCode, dictionary: Dictionary) -> np.ndarray:
    """Gradient w.r.t. the state given the gradient w.r.t. its reconstruction."""
    if not code.indices:
        raise EmptySupportError("sparse code has no selected atoms")
    M = dictionary.atoms[code.indices]
    pg, _ = _project(M, np.asarray(grad_s, dtype=np.float64))
    return pg


def atom_gradient(grad_s, code: SparseCode, dictionary: Dictionary) -> np.ndarray:
    """Gradient w.r.t. the selected atoms (rows in support order)."""
    M = dictionary.atoms[code.indices]
    g = np.asarray(grad_s, dtype=np.float64)
    pg, u = _project(M, g)
    return np.outer(code.coeffs, g - pg) + np.outer(u, code.residual)


class SparseEncode(Function):
    """Graph op: rows of ``H[..., d]`` encoded over the atoms ``E[N, d]``.

    Backward treats the selected supports as constants. Gradients reach both
    the states and, unless ``freeze_atoms``, the selected embedding rows.
    """

    twice_differentiable = False
    L = 10
    excluded: frozenset = frozenset()
    use_abs = False
    freeze_atoms = False

    def forward(self, H, E):
        self.dictionary = Dictionary(E, self.excluded)
        flat = H.reshape(-1, H.shape[-1])
        self.codes = [sparse_encode(row, self.dictionary, self.L, self.use_abs) for row in flat]
        S = np.stack([c.reconstruction for c in self.codes]) if self.codes else flat.copy()
        return S.reshape(H.shape)

    def backward(self, g):
        H, E = self.inputs
        G = g.data.reshape(-1, H.shape[-1])
        gH = np.zeros_like(G)
        gE = np.zeros_like(E.data) if E.requires_grad and not self.freeze_atoms else None
        for i, code in enumerate(self.codes):
            if not code.indices:
                continue  # state was (numerically) zero
            M = self.dictionary.atoms[code.indices]
            pg, u = _project(M, G[i])
            gH[i] = pg
            if gE is not None:
                gE[code.indices] += np.outer(code.coeffs, G[i] - pg) + np.outer(u, code.residual)
        return Tensor(gH.reshape(H.shape)), (Tensor(gE) if gE is not None else None)


def sparse_encode_tensor(H: Tensor, E: Tensor, L: int, excluded=(), use_abs: bool = False,
                         freeze_atoms: bool = False) -> Tensor:
    return SparseEncode.apply(H, E, L=L, excluded=frozenset(excluded), use_abs=use_abs,
                              freeze_atoms=freeze_atoms)


@dataclass
class SupportCheck:
    """Result of re-encoding a state under small perturbations."""

    stable: bool
    unstable_coords: list[int] = field(default_factory=list)


def support_is_stable(h, dictionary: Dictionary, L: int, eps: float, use_abs: bool = False) -> SupportCheck:
    """True when perturbing any coordinate of ``h`` by ``+-eps`` keeps the support."""
    h = np.asarray(h, dtype=np.float64)
    base = sparse_encode(h, dictionary, L, use_abs).indices
    bad = []
    for j in range(h.size):
        for sign in (1.0, -1.0):
            hp = h.copy()
            hp[j] += sign * eps
            if sparse_encode(hp, dictionary, L, use_abs).indices != base:
                bad.append(j)
                break
    return SupportCheck(not bad, bad)
