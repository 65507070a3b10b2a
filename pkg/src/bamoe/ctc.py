"""CTC loss in log space, an enumeration oracle, and greedy decoding."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .autodiff import Var
from .errors import ContractError, FeasibilityError, SizeError

BRUTE_FORCE_LIMIT = 10**7


@dataclass(frozen=True)
class LogProbLattice:
    log_probs: np.ndarray
    blank_id: int = 0

    def __post_init__(self) -> None:
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 2:
            raise ContractError(f"lattice must be T x V, got shape {lp.shape}")
        if not np.allclose(logsumexp(lp, axis=1), 0.0, atol=1e-9):
            raise ContractError("lattice rows must be log-normalised")
        object.__setattr__(self, "log_probs", lp)


def min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def check_feasible(num_frames: int, target: Sequence[int], blank: int = 0) -> None:
    if any(t == blank for t in target):
        raise ContractError("CTC target must not contain the blank id")
    need = min_frames(target)
    if num_frames < need:
        raise FeasibilityError(f"CTC infeasible: T={num_frames} but target needs at least {need} frames")


def _extend(target: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def _forward(em: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """Alpha recursion over emission log-probs ``em`` (T x S)."""
    T, S = em.shape
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    shifted = np.empty(S)
    for t in range(1, T):
        prev = alpha[t - 1]
        shifted[0] = -np.inf
        shifted[1:] = prev[:-1]
        acc = np.logaddexp(prev, shifted)
        shifted[:2] = -np.inf
        shifted[2:] = np.where(skip[2:], prev[:-2], -np.inf)
        alpha[t] = np.logaddexp(acc, shifted) + em[t]
    return alpha


def _backward(em: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = em.shape
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = em[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = em[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    shifted = np.empty(S)
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        shifted[-1] = -np.inf
        shifted[:-1] = nxt[1:]
        acc = np.logaddexp(nxt, shifted)
        shifted[-2:] = -np.inf
        shifted[:-2] = np.where(skip_from[:-2], nxt[2:], -np.inf)
        beta[t] = np.logaddexp(acc, shifted) + em[t]
    return beta


def _total(alpha: np.ndarray) -> float:
    last = alpha[-1]
    return float(np.logaddexp(last[-1], last[-2])) if last.size > 1 else float(last[-1])


def ctc_nll(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> float:
    """Negative log-likelihood without gradient bookkeeping."""
    target = list(target)
    check_feasible(log_probs.shape[0], target, blank)
    ext, skip = _extend(target, blank)
    return -_total(_forward(log_probs[:, ext], skip))


def ctc_loss(log_probs: Var, target: Sequence[int], blank: int = 0) -> Var:
    """Differentiable CTC negative log-likelihood of ``target``.

    ``log_probs`` is a T x V node of log-softmax rows. The gradient is the
    negated state occupancy from the alpha/beta recursions.
    """
    target = list(target)
    lp = log_probs.value
    T, V = lp.shape
    check_feasible(T, target, blank)
    if any(not 0 <= t < V for t in target):
        raise ContractError(f"CTC target id outside vocabulary of size {V}")
    ext, skip = _extend(target, blank)
    em = lp[:, ext]
    alpha = _forward(em, skip)
    log_like = _total(alpha)

    def back(g):
        beta = _backward(em, skip)
        occ = np.exp(alpha + beta - em - log_like)
        grad = np.zeros((T, V))
        np.add.at(grad.T, ext, occ.T)
        return (-g[0, 0] * grad,)

    return log_probs.tape.record(np.array([[-log_like]]), (log_probs,), back, "ctc_loss")


def collapse(path: Sequence[int], blank: int = 0) -> list[int]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def ctc_brute_force(log_probs, target: Sequence[int], blank: int = 0) -> float:
    """Enumerate every frame labelling; returns inf when no path collapses
    to ``target``."""
    if isinstance(log_probs, LogProbLattice):
        blank = log_probs.blank_id
        log_probs = log_probs.log_probs
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    if V**T > BRUTE_FORCE_LIMIT:
        raise SizeError(f"brute force over {V}^{T} paths exceeds limit {BRUTE_FORCE_LIMIT}")
    target = [int(t) for t in target]
    scores = []
    frames = range(T)
    for path in itertools.product(range(V), repeat=T):
        if collapse(path, blank) == target:
            scores.append(sum(lp[t, k] for t, k in zip(frames, path)))
    if not scores:
        return math.inf
    return -float(logsumexp(scores))


def ctc_greedy_decode(log_probs, blank: int = 0) -> list[int]:
    if isinstance(log_probs, LogProbLattice):
        blank = log_probs.blank_id
        log_probs = log_probs.log_probs
    return collapse(np.asarray(log_probs).argmax(axis=1).tolist(), blank)
