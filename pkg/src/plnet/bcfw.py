"""Block-coordinate Frank-Wolfe solver for one layer's proximal subproblem.

The subproblem after linearizing the concave stream at a snapshot is

    min_w  (lam + mu)/2 ||w - rho w0||^2 + (1/N) sum_i s_i(w),
    s_i(w) = max over candidate pieces of  <w, psi> + delta,

where ``rho = mu / (lam + mu)``, ``psi`` is a candidate piece's slope minus
the sample's anchor slope, ``delta`` the matching intercept difference, and
the anchor itself contributes the zero candidate, so every slack is
nonnegative. The dual is block-separable over samples with one simplex per
sample; each dual block is summarized by its convex combination

    w_i = -(1/(N (lam+mu))) sum_c alpha_c psi_c,   l_i = (1/N) sum_c alpha_c delta_c,

the primal iterate is ``w = rho w0 + sum_i w_i``, and the dual value is

    D = sum_i l_i - (lam+mu)/2 (||w||^2 - rho^2 ||w0||^2).

Starting from all mass on the zero candidates gives ``w = rho w0`` and
``D = 0`` exactly. Each pass visits samples in one random permutation; a
mini-batch evaluates its oracles at the batch-start weights and then applies
the per-sample steps sequentially with line searches against the live
weights, which keeps every step's dual change nonnegative regardless of
oracle staleness.

For a matrix-output layer whose samples share one bias-extended input row z,
every candidate slope is a rank-one matrix ``outer(g, z)``, so dual blocks
are stored as output-side vectors and the input rows are recomputed per batch
instead of stored.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConstructionError
from .latent import SearchSpace, impute_batch, oracle_batch
from .network import _as_arrays

__all__ = [
    "DualState",
    "StepRecord",
    "SolveResult",
    "init_dual",
    "optimal_step",
    "block_step",
    "compute_anchors",
    "solve_layer_svm",
]

GAP_SAMPLE = 256


@dataclass
class StepRecord:
    """One block step's line-search geometry, for audit and tests.

    The dual restricted to the step's segment is
    ``D(gamma) = dual_before + gamma a - gamma^2 b / 2`` with
    ``a = (l_s - l_i) + (lam+mu) diff_dot_w`` and
    ``b = (lam+mu) diff_norm_sq``.
    """

    index: int
    gamma: float
    gap: float
    diff_dot_w: float
    diff_norm_sq: float
    l_i: float
    l_s: float
    lam_mu: float
    dual_before: float
    dual_after: float


@dataclass
class SolveResult:
    """Outcome of one subproblem solve."""

    w: np.ndarray
    dual: float
    epochs_run: int
    n_steps: int
    stop_reason: str
    space: SearchSpace
    escalations: int
    gap_estimate: float | None
    records: list = field(default_factory=list)


class DualState:
    """Dual blocks, their primal image, and the running dual value."""

    def __init__(self, n, lam, mu, w0, compact, block_dim=None):
        if lam <= 0.0:
            raise ConstructionError("regularization weight must be positive")
        if mu < 0.0:
            raise ConstructionError("proximal weight must be nonnegative")
        self.n = int(n)
        self.lam_mu = lam + mu
        self.rho = mu / (lam + mu)
        self.w0 = np.array(w0, dtype=np.float64)
        self.w = self.rho * self.w0
        self.compact = compact
        if compact:
            self.blocks = np.zeros((self.n, block_dim or w0.shape[0]))
        else:
            self.blocks = np.zeros((self.n,) + self.w0.shape)
        self.l = np.zeros(self.n)
        self.l_total = 0.0
        # Constant term measured on the stored iterate so the starting dual
        # is exactly zero, not zero up to rounding.
        self.base_sq = float(np.vdot(self.w, self.w))

    def dual(self):
        return self.l_total - 0.5 * self.lam_mu * (
            float(np.vdot(self.w, self.w)) - self.base_sq)

    def scratch_w(self, z_rows=None):
        """Rebuild the primal iterate from the blocks alone.

        ``z_rows`` supplies the per-sample input rows (N, q) for the compact
        layout; the full layout needs nothing.
        """
        w = self.rho * self.w0.copy()
        if self.compact:
            if z_rows is None:
                raise ConstructionError("compact layout needs the input rows")
            w += np.einsum("bp,bq->pq", self.blocks, z_rows)
        else:
            w += self.blocks.sum(axis=0)
        return w


def init_dual(pair, data, lam, mu, w0=None):
    """Fresh dual state at the warm start: all blocks on the zero candidate."""
    x, y = _as_arrays(data)
    if w0 is None:
        w0 = pair.weights()
    compact = pair.target != "svm" and pair.target_layer.kind == "dense"
    return DualState(y.shape[0], lam, mu, w0, compact,
                     block_dim=w0.shape[0] if compact else None)


def optimal_step(diff_dot_w, diff_norm_sq, l_i, l_s, lam_mu):
    """Closed-form line search over the step's segment, clipped to [0, 1]."""
    if diff_norm_sq <= 0.0:
        return 0.0
    gamma = (diff_dot_w - (l_i - l_s) / lam_mu) / diff_norm_sq
    return min(1.0, max(0.0, gamma))


def block_step(state, i, feature_diff, delta, z=None, record=False):
    """Move block ``i`` toward the candidate piece; returns (gap, record).

    ``feature_diff`` is the candidate slope minus the anchor slope (packed
    array, or the output-side vector with ``z`` the shared input row) and
    ``delta`` the matching intercept difference.
    """
    n, lm = state.n, state.lam_mu
    l_s = delta / n
    l_i = float(state.l[i])
    if state.compact:
        a_s = -feature_diff / (n * lm)
        a_diff = state.blocks[i] - a_s
        wz = state.w @ z
        diff_dot_w = float(a_diff @ wz)
        diff_norm_sq = float(a_diff @ a_diff) * float(z @ z)
    else:
        w_s = -feature_diff / (n * lm)
        diff = state.blocks[i] - w_s
        diff_dot_w = float(np.vdot(diff, state.w))
        diff_norm_sq = float(np.vdot(diff, diff))
    gap = lm * diff_dot_w - (l_i - l_s)
    gamma = optimal_step(diff_dot_w, diff_norm_sq, l_i, l_s, lm)

    rec = None
    if record:
        before = state.dual()
    if gamma != 0.0:
        if state.compact:
            state.blocks[i] -= gamma * a_diff
            state.w -= gamma * np.outer(a_diff, z)
        else:
            state.blocks[i] -= gamma * diff
            state.w -= gamma * diff
        state.l[i] = (1.0 - gamma) * l_i + gamma * l_s
        state.l_total += gamma * (l_s - l_i)
    if record:
        rec = StepRecord(int(i), gamma, gap, diff_dot_w, diff_norm_sq,
                         l_i, l_s, lm, before, state.dual())
    return gap, rec


@dataclass
class AnchorStore:
    """Ground-truth pieces for the whole training set at one snapshot."""

    sels: dict
    feature: np.ndarray
    offset: np.ndarray
    values: np.ndarray
    compact: bool
    tag: int

    def subset(self, idx):
        from .latent import AnchorSet
        return AnchorSet({k: v[idx] for k, v in self.sels.items()},
                         self.feature[idx], self.offset[idx],
                         self.values[idx], self.compact, self.tag)


def compute_anchors(pair, x, y, w, batch_size=256, tag=0):
    """Impute the ground-truth pieces for every sample at snapshot ``w``."""
    n = y.shape[0]
    parts = []
    for start in range(0, n, batch_size):
        ctx = pair.target_ctx(x[start:start + batch_size])
        parts.append(impute_batch(pair, ctx, y[start:start + batch_size], w, tag))
    sels = {k: np.concatenate([p.sels[k] for p in parts]) for k in parts[0].sels}
    return AnchorStore(sels,
                       np.concatenate([p.feature for p in parts]),
                       np.concatenate([p.offset for p in parts]),
                       np.concatenate([p.values for p in parts]),
                       parts[0].compact, tag)


def _chunk_oracle(pair, x, y, idx, w, space, anchors):
    ctx = pair.target_ctx(x[idx])
    ob = oracle_batch(pair, ctx, y[idx], w, space, anchors.subset(idx))
    return ctx, ob


def _estimate_gap(pair, state, x, y, anchors, batch_size):
    """Upper estimate of the duality gap from fresh full-space oracles.

    Uses the first ``GAP_SAMPLE`` samples (a fixed subset, so no randomness
    enters the run) and extrapolates the worst per-block gap to all blocks.
    """
    m = min(state.n, GAP_SAMPLE)
    worst = 0.0
    full = SearchSpace.full()
    for start in range(0, m, batch_size):
        idx = np.arange(start, min(start + batch_size, m))
        ctx, ob = _chunk_oracle(pair, x, y, idx, state.w, full, anchors)
        for j, i in enumerate(idx):
            fdiff = ob.feature[j] - anchors.feature[i]
            delta = float(ob.offset[j] - anchors.offset[i])
            l_s = delta / state.n
            l_i = float(state.l[i])
            if state.compact:
                z = ctx[1][j]
                a_diff = state.blocks[i] + fdiff / (state.n * state.lam_mu)
                diff_dot_w = float(a_diff @ (state.w @ z))
            else:
                diff = state.blocks[i] + fdiff / (state.n * state.lam_mu)
                diff_dot_w = float(np.vdot(diff, state.w))
            worst = max(worst, state.lam_mu * diff_dot_w - (l_i - l_s))
    return state.n * worst


def solve_layer_svm(pair, data, lam, mu, w0=None, *, epochs=20, batch_size=64,
                    space=None, rng=None, tol=0.01, gap_tol=0.1,
                    recompute_every=1, record_steps=False, anchors=None,
                    anchor_tag=0, on_epoch=None):
    """Solve one layer's proximal subproblem with mini-batched block steps.

    The concave stream is linearized at ``w0`` (anchors may be passed in when
    already computed there). One random permutation is drawn per epoch; the
    solve stops when an epoch improves the dual by less than ``tol`` times
    the total improvement, escalating the search space first when allowed and
    a sampled gap estimate exceeds ``gap_tol`` times the dual scale.
    ``on_epoch(state, epoch_index)`` runs after each epoch's steps, before
    any drift resynchronization.
    """
    x, y = _as_arrays(data)
    if rng is None:
        rng = np.random.default_rng(0)
    if w0 is None:
        w0 = pair.weights()
    space = space or SearchSpace.full()
    n_pl = pair.n_pl_stages()

    state = init_dual(pair, (x, y), lam, mu, w0)
    if anchors is None:
        anchors = compute_anchors(pair, x, y, w0, max(batch_size, 64), anchor_tag)

    records = []
    n_steps = 0
    escalations = 0
    gap_estimate = None
    stop_reason = "epochs"
    epochs_run = 0

    for _ in range(epochs):
        perm = rng.permutation(state.n)
        dual_epoch_start = state.dual()
        for start in range(0, state.n, batch_size):
            idx = perm[start:start + batch_size]
            w_bs = state.w.copy()
            ctx, ob = _chunk_oracle(pair, x, y, idx, w_bs, space, anchors)
            for j, i in enumerate(idx):
                fdiff = ob.feature[j] - anchors.feature[i]
                delta = float(ob.offset[j] - anchors.offset[i])
                z = ctx[1][j] if state.compact else None
                _, rec = block_step(state, int(i), fdiff, delta, z,
                                    record=record_steps)
                if record_steps:
                    records.append(rec)
                n_steps += 1
        epochs_run += 1
        if on_epoch is not None:
            on_epoch(state, epochs_run)
        if recompute_every and epochs_run % recompute_every == 0:
            if state.compact:
                step = max(batch_size, 64)
                z_rows = np.concatenate([pair.target_ctx(x[s0:s0 + step])[1]
                                         for s0 in range(0, state.n, step)])
                state.w = state.scratch_w(z_rows)
            else:
                state.w = state.scratch_w()

        dual_now = state.dual()
        gain = dual_now - dual_epoch_start
        total = dual_now
        if gain <= tol * max(abs(total), 1e-12):
            if space.escalate and not space.is_full(n_pl):
                gap_estimate = _estimate_gap(pair, state, x, y, anchors,
                                             max(batch_size, 64))
                if gap_estimate > gap_tol * max(abs(dual_now), 1e-12):
                    space = space.widen(n_pl)
                    escalations += 1
                    continue
            stop_reason = "stalled"
            break

    return SolveResult(state.w, state.dual(), epochs_run, n_steps,
                       stop_reason, space, escalations, gap_estimate, records)
