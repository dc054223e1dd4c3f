"""Numeric self-checks behind ``vsl rankcheck``.

Each suite returns a :class:`SuiteResult`; nothing here raises on a failed
check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder_trainer import TwoBranchEncoder, backward, batch_objective
from .losses import LossConfig, cosine_similarity_matrix, total_loss, triplet_loss, tsl_loss, vsl_loss
from .smooth_rank import hard_rank, rank_matrix, rank_matrix_grad, smooth_sigmoid

FD_STEP = 1e-6
FD_TAU = 0.1
FD_RTOL = 1e-4
HARD_LIMIT_TAU = 0.001
HARD_LIMIT_GAP = 0.01
HARD_LIMIT_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    skipped: bool = False

    def line(self) -> str:
        status = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        return f"[{status}] {self.name}: {self.detail}"


def gapped_rows(rng: np.random.Generator, n: int, gap: float) -> np.ndarray:
    """n x n matrix whose rows have pairwise gaps of at least ``gap``."""
    out = np.empty((n, n))
    for i in range(n):
        steps = gap + rng.exponential(2 * gap, size=n)
        out[i] = rng.permutation(np.cumsum(steps)) + rng.uniform(-1, 1)
    return out


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)))


def hinge_safe(S: np.ndarray, margin: float, eps: float = 1e-4) -> bool:
    """True when no hinge argument (or hardest-negative choice) sits within eps of a switch."""
    n = S.shape[0]
    diag = np.diag(S)
    off = ~np.eye(n, dtype=bool)
    args = np.concatenate([(margin - diag[None, :] + S)[off], (margin - diag[:, None] + S)[off]])
    if np.min(np.abs(args)) < eps:
        return False
    for M in (S, S.T):
        masked = np.where(off, M, -np.inf)
        top2 = np.sort(masked, axis=1)[:, -2:]
        if n > 2 and np.min(top2[:, 1] - top2[:, 0]) < eps:
            return False
    return True


def ratio_safe(A: np.ndarray, B: np.ndarray, eps: float = 1e-4) -> bool:
    return bool(np.min(np.abs(A - B)) > eps)


def suite_hard_limit(tau: float, seed: int, trials: int = 100, n: int = 8) -> SuiteResult:
    name = "smooth-rank hard limit"
    rng = np.random.default_rng([seed, 0])
    worst = 0.0
    for _ in range(trials):
        m = gapped_rows(rng, n, HARD_LIMIT_GAP)
        worst = max(worst, float(np.max(np.abs(rank_matrix(m, tau) - hard_rank(m)))))
    if tau > HARD_LIMIT_TAU:
        bound = (n - 1) * smooth_sigmoid(-HARD_LIMIT_GAP, tau)
        return SuiteResult(name, True, f"skipped at tau={tau:g} > {HARD_LIMIT_TAU:g}; observed max "
                           f"deviation {worst:.3g} (bound {bound:.3g})", skipped=True)
    return SuiteResult(name, worst <= HARD_LIMIT_TOL,
                       f"max |R - hard rank| = {worst:.2e} over {trials} {n}x{n} matrices (tol {HARD_LIMIT_TOL:g})")


def _rank_case(rng, n):
    m = gapped_rows(rng, n, 0.05)
    up = rng.standard_normal((n, n))
    analytic = rank_matrix_grad(m, FD_TAU, up)
    numeric = central_difference(lambda x: float(np.sum(up * rank_matrix(x, FD_TAU))), m)
    return max_rel_error(analytic, numeric)


def _triplet_case(rng, n, mining):
    cfg = LossConfig(margin=0.2, negative_mining=mining)
    while True:
        S = rng.uniform(-1, 1, (n, n))
        if hinge_safe(S, cfg.margin):
            break
    analytic = triplet_loss(S, cfg)[1]
    numeric = central_difference(lambda x: triplet_loss(x, cfg)[0], S)
    return max_rel_error(analytic, numeric)


def _ratio_case(rng, n, fn):
    while True:
        A = rng.uniform(1.1, n + 0.9, (n, n))
        B = rng.uniform(1.1, n + 0.9, (n, n))
        if ratio_safe(A, B):
            break
    analytic = fn(A, B)[1]
    numeric = central_difference(lambda x: fn(x, B)[0], A)
    return max_rel_error(analytic, numeric)


def _ranked_pair(rng, n):
    return gapped_rows(rng, n, 0.05), gapped_rows(rng, n, 0.05)


def _total_case(rng, n, include_tsl):
    cfg = LossConfig(tau=FD_TAU, include_tsl=include_tsl)
    while True:
        S, C = _ranked_pair(rng, n)
        TC = _ranked_pair(rng, n)[1] if include_tsl else None
        if not hinge_safe(S, cfg.margin):
            continue
        R = rank_matrix(S, cfg.tau)
        if ratio_safe(R, rank_matrix(C, cfg.tau)) and (
            not include_tsl or ratio_safe(rank_matrix(S.T, cfg.tau), rank_matrix(TC, cfg.tau))
        ):
            break
    analytic = total_loss(S, C, TC, cfg).grad_S
    numeric = central_difference(lambda x: total_loss(x, C, TC, cfg).total, S)
    return max_rel_error(analytic, numeric)


def _encoder_case(rng, n, include_tsl, d_in=5, d_emb=4):
    cfg = LossConfig(tau=FD_TAU, include_tsl=include_tsl)
    while True:
        enc = TwoBranchEncoder(rng.standard_normal((d_in, d_emb)), rng.standard_normal((d_in + 1, d_emb)))
        img = rng.standard_normal((n, d_in))
        txt = rng.standard_normal((n, d_in + 1))
        C = _ranked_pair(rng, n)[1]
        TC = _ranked_pair(rng, n)[1] if include_tsl else None
        S = cosine_similarity_matrix(img @ enc.w_img, txt @ enc.w_txt)
        if not hinge_safe(S, cfg.margin, 1e-3):
            continue
        if not ratio_safe(rank_matrix(S, cfg.tau), rank_matrix(C, cfg.tau), 1e-3):
            continue
        if include_tsl and not ratio_safe(rank_matrix(S.T, cfg.tau), rank_matrix(TC, cfg.tau), 1e-3):
            continue
        break
    out = batch_objective(enc, img, txt, C, TC, cfg)
    g_img, g_txt = backward(enc, img, txt, out.grad_S)
    f_img = lambda w: batch_objective(TwoBranchEncoder(w, enc.w_txt), img, txt, C, TC, cfg).total
    f_txt = lambda w: batch_objective(TwoBranchEncoder(enc.w_img, w), img, txt, C, TC, cfg).total
    return max(max_rel_error(g_img, central_difference(f_img, enc.w_img)),
               max_rel_error(g_txt, central_difference(f_txt, enc.w_txt)))


GRADIENT_CASES = {
    "rank_matrix": lambda rng: _rank_case(rng, 5),
    "triplet_loss (hardest)": lambda rng: _triplet_case(rng, 4, "hardest"),
    "triplet_loss (sum_all)": lambda rng: _triplet_case(rng, 4, "sum_all"),
    "vsl_loss": lambda rng: _ratio_case(rng, 4, vsl_loss),
    "tsl_loss": lambda rng: _ratio_case(rng, 4, tsl_loss),
    "total_loss": lambda rng: _total_case(rng, 4, False),
    "total_loss with tsl": lambda rng: _total_case(rng, 4, True),
    "encoder weights": lambda rng: _encoder_case(rng, 3, False),
    "encoder weights with tsl": lambda rng: _encoder_case(rng, 3, True),
}


def suite_gradients(seed: int, trials: int = 20) -> list[SuiteResult]:
    results = []
    for k, (name, case) in enumerate(GRADIENT_CASES.items()):
        rng = np.random.default_rng([seed, 1, k])
        worst = max(case(rng) for _ in range(trials))
        results.append(SuiteResult(f"gradient {name}", worst <= FD_RTOL,
                                   f"max relative error {worst:.2e} over {trials} instances "
                                   f"(tau={FD_TAU:g}, step {FD_STEP:g}, tol {FD_RTOL:g})"))
    return results


def suite_vsl_identity(tau: float, seed: int, trials: int = 20) -> SuiteResult:
    rng = np.random.default_rng([seed, 2])
    ok = True
    for _ in range(trials):
        A = rank_matrix(rng.uniform(-1, 1, (6, 6)), tau)
        loss, grad = vsl_loss(A, A)
        ok &= loss == 0.0 and not np.any(grad)
        B = rank_matrix(rng.uniform(-1, 1, (6, 6)), tau)
        ok &= vsl_loss(A, B)[0] == vsl_loss(B, A)[0]
    return SuiteResult("vsl identities", bool(ok),
                       f"vsl(A, A) = 0 with zero gradient and swap symmetry on {trials} instances")


def run_all(tau: float = HARD_LIMIT_TAU, seed: int = 0) -> list[SuiteResult]:
    return [suite_hard_limit(tau, seed), *suite_gradients(seed), suite_vsl_identity(tau, seed)]
