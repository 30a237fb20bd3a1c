"""Self-contained property suite behind ``ckd verify``.

Each check returns a :class:`CheckResult`; nothing here touches the disk.
Functions from :mod:`ckd.analysis` are looked up on the module at call time so
that a patched implementation is what gets checked.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import analysis
from . import losses as L
from .tensor import Tensor, backward


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def _batch(rng: np.random.Generator, b: int, c: int, classes: int | None = None) -> L.LogitBatch:
    labels = rng.integers(0, classes or c, size=b)
    return L.LogitBatch(Tensor(rng.normal(size=(b, c))), Tensor(rng.normal(size=(b, c))), labels)


def _pick(rng, options):
    options = list(options)
    return options[int(rng.integers(len(options)))]


def _cfg(rng, **kw) -> L.DistillConfig:
    return L.DistillConfig(tau=float(rng.uniform(0.1, 4.0)), **kw)


def explicit_ckd(batch: L.LogitBatch, cfg: L.DistillConfig) -> float:
    """Per-sample ratio form evaluated with plain loops; unstabilised on purpose."""
    t = batch.teacher.values / np.linalg.norm(batch.teacher.values, axis=1, keepdims=True)
    s = batch.student.values / np.linalg.norm(batch.student.values, axis=1, keepdims=True)

    def f(u, v):
        if cfg.similarity is L.SimilarityKind.COSINE:
            return float(np.dot(u, v))
        return -float(np.sum((u - v) ** 2))

    total = 0.0
    b = batch.size
    for i in range(b):
        pos = math.exp(f(t[i], s[i]) / cfg.tau)
        neg = 0.0
        for j in range(b):
            if j == i:
                continue
            if cfg.negative_scope is L.NegativeScope.CROSS_CLASS and batch.labels[j] == batch.labels[i]:
                continue
            if cfg.triple is L.TripleStrategy.TEACHER_ANCHOR:
                sim = f(t[i], s[j])
            elif cfg.triple is L.TripleStrategy.STUDENT_STUDENT:
                sim = f(s[i], s[j])
            else:
                sim = f(s[i], t[j])
            neg += math.exp(sim / cfg.tau)
        total += -math.log(pos / (pos + neg))
    return total / b


def check_scale_invariance(rng, trials=50) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        b, c = int(rng.integers(2, 12)), int(rng.integers(2, 10))
        batch = _batch(rng, b, c)
        cfg = _cfg(rng, triple=_pick(rng, L.TripleStrategy))
        k_t = rng.uniform(0.01, 100, size=(b, 1))
        k_s = rng.uniform(0.01, 100, size=(b, 1))
        scaled = L.LogitBatch(Tensor(batch.teacher.values * k_t), Tensor(batch.student.values * k_s), batch.labels)
        worst = max(worst, abs(L.ckd_loss(batch, cfg).item() - L.ckd_loss(scaled, cfg).item()))
    return CheckResult("losses: scale invariance of normalised ckd_loss", worst < 1e-10, f"max diff {worst:.2e}")


def check_masked_softmax_equivalence(rng, trials=60) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        b, c = int(rng.integers(2, 17)), int(rng.integers(2, 10))
        batch = _batch(rng, b, c, classes=3)
        if np.all(batch.labels == batch.labels[0]):
            continue
        cfg = _cfg(
            rng,
            triple=_pick(rng, L.TripleStrategy),
            negative_scope=_pick(rng, L.NegativeScope),
            similarity=_pick(rng, L.SimilarityKind),
        )
        worst = max(worst, abs(L.ckd_loss(batch, cfg).item() - explicit_ckd(batch, cfg)))
    return CheckResult("losses: B-way cross-entropy == explicit ratio form", worst < 1e-10, f"max diff {worst:.2e}")


def _all_losses(batch, cfg):
    return [
        L.ckd_loss(batch, cfg).item(),
        L.combined_kd_loss(batch, cfg).item(),
        L.vanilla_kd_loss(batch, cfg.kd_temperature).item(),
        L.intra_loss(batch).item(),
        L.inter_loss(batch, include_teacher_negs=True).item(),
        L.total_objective(batch, cfg, L.KDKind.CKD).item(),
    ]


def check_permutation_equivariance(rng, trials=30) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        b, c = int(rng.integers(2, 12)), int(rng.integers(2, 10))
        batch = _batch(rng, b, c)
        cfg = _cfg(rng, triple=_pick(rng, L.TripleStrategy))
        p = rng.permutation(b)
        perm = L.LogitBatch(Tensor(batch.teacher.values[p]), Tensor(batch.student.values[p]), batch.labels[p])
        diffs = np.abs(np.subtract(_all_losses(batch, cfg), _all_losses(perm, cfg)))
        worst = max(worst, float(diffs.max()))
    return CheckResult("losses: permutation equivariance", worst < 1e-12, f"max diff {worst:.2e}")


def _similarity_row_grad(pos: float, negs, tau: float) -> np.ndarray:
    row = Tensor(np.array([[pos, *negs]]), requires_grad=True)
    loss = L.contrastive_rows_from_similarity(row, tau).sum()
    backward(loss, [row])
    return row.grad[0]


def _random_factor_input(rng) -> analysis.GradientFactorInput:
    k = int(rng.integers(1, 64))
    return analysis.GradientFactorInput(
        float(rng.uniform(-1, 1)), list(rng.uniform(-1, 1, size=k)), float(rng.uniform(0.05, 5.0))
    )


def check_gradient_direction(rng, trials=500) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        inp = _random_factor_input(rng)
        g = analysis.g_factor(inp)
        grad = _similarity_row_grad(inp.pos_sim, inp.neg_sims, inp.tau)
        worst = max(worst, abs(grad[0] + g / inp.tau), abs(grad[1:].sum() - g / inp.tau))
    return CheckResult("losses: dL/dpos = -g/tau and sum dL/dneg = +g/tau", worst < 1e-8, f"max err {worst:.2e}")


def check_teacher_constancy(rng, trials=10) -> CheckResult:
    ok = True
    for _ in range(trials):
        b, c = int(rng.integers(2, 10)), int(rng.integers(2, 8))
        t = Tensor(rng.normal(size=(b, c)), requires_grad=True)
        s = Tensor(rng.normal(size=(b, c)), requires_grad=True)
        batch = L.LogitBatch(t, s, rng.integers(0, c, size=b))
        cfg = _cfg(rng, triple=_pick(rng, L.TripleStrategy))
        for kind in L.KDKind:
            t.grad = None
            backward(L.total_objective(batch, cfg, kind), [t, s])
            ok &= t.grad is None or not np.any(t.grad)
        backward(L.inter_loss(batch, include_teacher_negs=True), [t, s])
        ok &= not np.any(t.grad)
    return CheckResult("losses: no gradient reaches teacher logits", bool(ok))


def check_ckd_nonnegative(rng, trials=200) -> CheckResult:
    low = math.inf
    for _ in range(trials):
        b, c = int(rng.integers(1, 16)), int(rng.integers(2, 10))
        batch = _batch(rng, b, c)
        cfg = _cfg(rng, triple=_pick(rng, L.TripleStrategy))
        low = min(low, float(L.ckd_loss_rows(batch, cfg).values.min()))
    return CheckResult("losses: per-sample ckd_loss >= 0", low >= 0.0, f"min {low:.3e}")


def check_g_factor_properties(rng, trials=1000) -> CheckResult:
    ok = True
    for _ in range(trials):
        inp = _random_factor_input(rng)
        g = analysis.g_factor(inp)
        ok &= 0.0 <= g < 1.0
        up = analysis.g_factor(analysis.GradientFactorInput(inp.pos_sim + 0.1, inp.neg_sims, inp.tau))
        negs = list(inp.neg_sims)
        j = int(rng.integers(len(negs)))
        negs[j] += 0.1
        bumped = analysis.GradientFactorInput(inp.pos_sim, negs, inp.tau)
        harder = analysis.g_factor(bumped)
        ok &= up <= g <= harder
        # strictness is judged on ln(1 - g): near saturation g itself stops resolving the change
        lp = analysis.log_one_minus_g(inp)
        lp_up = analysis.log_one_minus_g(analysis.GradientFactorInput(inp.pos_sim + 0.1, inp.neg_sims, inp.tau))
        ok &= lp_up > lp
        # a negative carrying ~1e-16 of the softmax mass cannot move a float64 sum
        if analysis.negative_share(inp, j) * math.expm1(0.1 / inp.tau) > 1e-9:
            ok &= lp > analysis.log_one_minus_g(bumped)
        else:
            ok &= lp >= analysis.log_one_minus_g(bumped)
    return CheckResult("analysis: g in [0,1), decreasing in pos, increasing in neg", bool(ok))


def check_positive_gradient_factor(rng, trials=1000) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        inp = _random_factor_input(rng)
        grad = _similarity_row_grad(inp.pos_sim, inp.neg_sims, inp.tau)
        worst = max(worst, abs(grad[0] - (-analysis.g_factor(inp) / inp.tau)))
    return CheckResult("analysis: autodiff dL_i/dpos == -g_factor/tau", worst < 1e-8, f"max err {worst:.2e}")


def check_gap_identity(rng, trials=500) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        inp = _random_factor_input(rng)
        gap_form = 1.0 - 1.0 / (1.0 + sum(math.exp(-r / inp.tau) for r in inp.gaps))
        worst = max(worst, abs(gap_form - analysis.g_factor(inp)))
        rho = float(rng.uniform(-1, 1))
        b = int(rng.integers(1, 64))
        equal = analysis.GradientFactorInput(inp.pos_sim, [inp.pos_sim - rho] * b, inp.tau)
        worst = max(worst, abs(analysis.g_factor(equal) - analysis.g_factor_approx(rho, inp.tau, b)))
    return CheckResult("analysis: similarity form == gap form == equal-gap approx", worst < 1e-12,
                       f"max err {worst:.2e}")


def check_batch_trend(rng, trials=50) -> CheckResult:
    sizes = [2**k for k in range(11)]
    ok = all(
        analysis.batch_size_trend(float(rng.uniform(0.01, 2)), float(rng.uniform(0.05, 4)), sizes).increasing
        for _ in range(trials)
    )
    return CheckResult("analysis: g increases with B at fixed gap", ok)


def check_tau_limits(rng) -> CheckResult:
    ok = True
    for b in (1, 4, 64):
        pos = float(rng.uniform(0.2, 1.0))
        negs = list(rng.uniform(-1.0, pos - 0.1, size=b))
        lim = analysis.tau_limits(analysis.GradientFactorInput(pos, negs, 1.0))
        ok &= bool(lim.vanishes) and lim.saturates
    return CheckResult("analysis: g -> 0 as tau -> 0, g -> B/(B+1) as tau -> inf", bool(ok))


def check_same_class_gain(rng, trials=200) -> CheckResult:
    ok = True
    for _ in range(trials):
        pos = float(rng.uniform(-1, 1))
        cross, same = sorted(rng.uniform(-1, 1, size=2))
        g_same, g_cross = analysis.same_class_gain(pos, float(same), float(cross), float(rng.uniform(0.05, 4)),
                                                   int(rng.integers(1, 64)))
        ok &= g_same >= g_cross
    return CheckResult("analysis: hard same-class negatives give larger g", bool(ok))


def enumerate_triples(labels: np.ndarray, c: int, rng: np.random.Generator) -> dict[str, set[int]]:
    """Per-anchor triple counts by explicit enumeration on a labelled set."""
    n = len(labels)
    classic, crd, ckd = set(), set(), set()
    for i in range(n):
        partners = [p for p in range(n) if p != i and labels[p] == labels[i]]
        negatives = [q for q in range(n) if labels[q] != labels[i]]
        classic.add(sum(1 for _ in itertools.product(partners, negatives)))
        crd.add(len(negatives))
    # shuffled, non-overlapping groups of c samples; each anchor contrasts within its group
    order = rng.permutation(n)
    for start in range(0, n - n % c, c):
        group = order[start : start + c]
        for i in group:
            ckd.add(len([(i, j) for j in group]))
    return {"classic": classic, "crd": crd, "ckd": ckd}


def check_triple_counts(rng, n_max=60) -> CheckResult:
    ok = True
    for n in range(2, n_max + 1):
        for c in range(1, n + 1):
            if n % c:
                continue
            m = n // c
            labels = np.repeat(np.arange(c), m)
            counts = enumerate_triples(labels, c, rng)
            want = analysis.triple_count(analysis.TripleCountQuery(n, m, c))
            ok &= all(counts[k] == {want[k]} for k in want)
    headline = analysis.triple_count(analysis.TripleCountQuery(100, 10, 10))
    ok &= headline == {"classic": 810, "crd": 90, "ckd": 10}
    return CheckResult("analysis: triple counts match enumeration", bool(ok), f"n=100,m=10: {headline}")


def check_rank_bound(rng, trials=200) -> CheckResult:
    ok = True
    for _ in range(trials):
        c = int(rng.integers(2, 12))
        n = int(rng.integers(2, 40))
        k = int(rng.integers(1, c + 1))
        neg = rng.normal(size=(n - 1, k)) @ rng.normal(size=(k, c))
        bound, rank = analysis.rank_bound(c, n, neg)
        ok &= rank <= bound and rank == np.linalg.matrix_rank(neg)
    return CheckResult("analysis: empirical rank <= min(c, n-1)", bool(ok))


CHECKS: list[Callable[[np.random.Generator], CheckResult]] = [
    check_scale_invariance,
    check_masked_softmax_equivalence,
    check_permutation_equivariance,
    check_gradient_direction,
    check_teacher_constancy,
    check_ckd_nonnegative,
    check_g_factor_properties,
    check_positive_gradient_factor,
    check_gap_identity,
    check_batch_trend,
    check_tau_limits,
    check_same_class_gain,
    check_triple_counts,
    check_rank_bound,
]


def run_all(seed: int = 0) -> list[CheckResult]:
    results = []
    for k, check in enumerate(CHECKS):
        rng = np.random.default_rng([seed, k])
        try:
            results.append(check(rng))
        except Exception as exc:
            results.append(CheckResult(check.__name__, False, f"raised {type(exc).__name__}: {exc}"))
    return results
