"""Alignment planning: plan matrix, commitment plan, and the three attention modes.

One call to :meth:`Planner.step` produces the alignment for one decoder
step.  ``pag`` keeps a ``k x |X|`` matrix of alignment logits and only
recomputes it when the commitment switch fires; ``rpag`` keeps just the last
alignment vector and repeats it between commits; ``baseline`` is plain
MLP attention on the previous decoder state.

Commitment decisions use a straight-through Gumbel-Softmax.  At a commit step
the new plan is blended with the shifted old one through the switch value
(``g * new + (1 - g) * old``).  In the forward pass ``g`` is exactly 1, so the
blend returns ``new`` bit for bit, while the backward pass still sends a
learning signal to the commitment logits through the soft relaxation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .compute import (
    ContractError, ShapeError, Tensor, concat, grad_enabled, matmul, outer_add, reshape,
    softmax_rows, softplus, straight_through, sum_all, transpose,
)
from .layers import EncoderAnnotations, Linear, Mlp, Module

MODES = ("baseline", "pag", "rpag")


@dataclass(frozen=True)
class PlannerConfig:
    k: int = 10
    mode: str = "pag"
    lambda_com: float = 1e-3
    gumbel_seed: int = 0
    summary_dim: int = 16
    align_hidden: int = 32
    max_src_len: int = 64
    # also evaluate the recompute branch at g=0 steps while recording a tape,
    # so the switch gets a straight-through gradient at every step
    dense_switch_grad: bool = False
    # initial biases: f_c's first logit (favours committing) and f_up's output (favours the candidate)
    commit_bias_init: float = 0.0
    update_bias_init: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"planning horizon k must be >= 1, got {self.k}")
        if self.lambda_com < 0:
            raise ValueError(f"lambda_com must be >= 0, got {self.lambda_com}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class AlignmentPlan:
    matrix: Tensor

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def src_len(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class CommitmentPlan:
    """Soft commitment ``c``, its one-hot ``discrete`` form and the gate values.

    ``gate`` carries the forward values used when blending (the one-hot vector
    under straight-through, ``soft`` itself in relaxed mode) and routes its
    gradient to ``soft``.
    """

    soft: Tensor
    discrete: np.ndarray
    gate: Tensor
    temperature: float = 1.0

    @property
    def k(self) -> int:
        return self.discrete.shape[0]

    @property
    def switch(self) -> int:
        return int(self.discrete[0])


def one_hot_argmax(values: np.ndarray) -> np.ndarray:
    """One-hot of the largest entry; ties go to the lowest index."""
    out = np.zeros(values.shape[-1])
    out[int(np.argmax(values.reshape(-1)))] = 1.0
    return out


class GumbelNoise:
    """Source of Gumbel(0, 1) noise ``-log(-log U)``; ``rng=None`` gives zeros."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng

    @classmethod
    def seeded(cls, seed: int) -> "GumbelNoise":
        return cls(np.random.default_rng(seed))

    def __call__(self, k: int) -> np.ndarray:
        if self.rng is None:
            return np.zeros((1, k))
        u = self.rng.uniform(np.finfo(float).tiny, 1.0, size=(1, k))
        return -np.log(-np.log(u))


ZERO_NOISE = GumbelNoise(None)


# ---------------------------------------------------------------- plan primitives

def init_plans(k: int, src_len: int) -> tuple[AlignmentPlan, CommitmentPlan]:
    if k < 1 or src_len < 1:
        raise ContractError(f"plan dimensions must be positive, got k={k}, |X|={src_len}")
    discrete = one_hot_argmax(np.ones(k))
    plan = AlignmentPlan(Tensor(np.ones((k, src_len))))
    commit = CommitmentPlan(Tensor(np.ones((1, k))), discrete, Tensor(discrete.copy()))
    return plan, commit


def _shift_rows(m: Tensor) -> Tensor:
    return concat([m[1:, :], Tensor(np.zeros((1, m.shape[1])))], axis=0)


def _shift_cols(v: Tensor) -> Tensor:
    return concat([v[:, 1:], Tensor(np.zeros((v.shape[0], 1)))], axis=1)


def shift_plan(plan: AlignmentPlan) -> AlignmentPlan:
    """Advance the plan one step: row i takes row i+1, the last row becomes zeros."""
    return AlignmentPlan(_shift_rows(plan.matrix))


def shift_commitment(c: CommitmentPlan) -> CommitmentPlan:
    return CommitmentPlan(
        _shift_cols(c.soft), np.append(c.discrete[1:], 0.0), _shift_cols(c.gate), c.temperature,
    )


def gumbel_softmax_st(
    logits: Tensor,
    temperature: Tensor | float,
    noise: GumbelNoise = ZERO_NOISE,
    straight_through_gate: bool = True,
) -> CommitmentPlan:
    """Sample a commitment plan with the straight-through Gumbel-Softmax.

    ``soft = softmax((logits + g) / temperature)`` with ``g`` drawn from
    ``noise``.  With ``straight_through_gate=False`` the gate carries the soft
    values instead, which makes the whole computation smooth (used to check
    gradients against finite differences of the relaxation).
    """
    tau = temperature if isinstance(temperature, Tensor) else Tensor(temperature)
    if tau.item() <= 0:
        raise ValueError(f"temperature must be positive, got {tau.item()}")
    k = logits.shape[1]
    soft = softmax_rows((logits + Tensor(noise(k))) / tau)
    discrete = one_hot_argmax(soft.data)
    gate = straight_through(discrete, soft) if straight_through_gate else soft
    return CommitmentPlan(soft, discrete, gate, tau.item())


def plan_summary(f_r: Mlp, plan_prev: AlignmentPlan, row: int | None = None) -> Tensor:
    """Summaries ``f_r(A[i])`` of plan rows, one output row per plan row.

    ``f_r`` is sized for the longest supported source; a shorter row is read
    as if zero-padded, i.e. only the first ``|X|`` input weights take part.
    """
    n = plan_prev.src_len
    if n > f_r.in_dim:
        raise ShapeError(f"source length {n} exceeds the summary network's width {f_r.in_dim}")
    if row is not None and not 0 <= row < plan_prev.k:
        raise IndexError(f"plan row {row} outside [0, {plan_prev.k})")
    rows = plan_prev.matrix if row is None else plan_prev.matrix[row]
    return f_r.finish(matmul(rows, f_r.layers[0].weight[:n, :]))


def _blocks(ann: EncoderAnnotations, mlp: Mlp, widths: tuple[int, ...]) -> list[Tensor]:
    return ann.memo(("blocks", id(mlp), widths), lambda: mlp.blocks(widths))


def _keys(ann: EncoderAnnotations, mlp: Mlp, widths: tuple[int, ...], index: int) -> Tensor:
    """Annotation projection through block ``index`` of ``mlp``'s first layer."""
    return ann.memo(("keys", id(mlp), widths), lambda: matmul(ann.matrix, _blocks(ann, mlp, widths)[index]))


def candidate_plan(f_align: Mlp, s_prev: Tensor, annotations: EncoderAnnotations,
                   summaries: Tensor, y_t: Tensor) -> Tensor:
    """Logit grid: entry (i, j) is ``f_align([s_prev || h_j || beta_i || y_t])``."""
    widths = (s_prev.shape[1], annotations.dim, summaries.shape[1], y_t.shape[1])
    w_s, _, w_b, w_y = _blocks(annotations, f_align, widths)
    keys = _keys(annotations, f_align, widths, 1)
    rows = matmul(summaries, w_b) + (matmul(s_prev, w_s) + matmul(y_t, w_y))
    out = f_align.finish(outer_add(rows, keys))
    return reshape(out, summaries.shape[0], len(annotations))


def update_gate(f_up: Mlp, s_prev: Tensor, annotations: EncoderAnnotations) -> Tensor:
    """Per-source-position mixing weights ``sigmoid(f_up([h_i || s_prev]))`` as a row."""
    widths = (annotations.dim, s_prev.shape[1])
    _, w_s = _blocks(annotations, f_up, widths)
    keys = _keys(annotations, f_up, widths, 0)
    return transpose(f_up.finish(keys + matmul(s_prev, w_s)))


def _attend(f: Mlp, s_prev: Tensor, annotations: EncoderAnnotations, y_t: Tensor | None) -> Tensor:
    if y_t is None:
        widths = (s_prev.shape[1], annotations.dim)
    else:
        widths = (s_prev.shape[1], annotations.dim, y_t.shape[1])
    blocks = _blocks(annotations, f, widths)
    pre = matmul(s_prev, blocks[0])
    if y_t is not None:
        pre = pre + matmul(y_t, blocks[2])
    scores = f.finish(_keys(annotations, f, widths, 1) + pre)
    return softmax_rows(transpose(scores))


def baseline_attention(f_att: Mlp, s_prev: Tensor, annotations: EncoderAnnotations) -> Tensor:
    return _attend(f_att, s_prev, annotations, None)


def commitment_penalty(commitments: list[Tensor], k: int, lambda_com: float) -> Tensor:
    """``lambda * sum_t sum_i (1/k - c_ti)^2`` over the given soft commitments."""
    if not commitments:
        return Tensor(0.0)
    for c in commitments:
        if c.shape != (1, k):
            raise ShapeError(f"commitment of shape {c.shape}, expected (1, {k})")
    diff = concat(commitments, axis=0) - 1.0 / k
    return sum_all(diff * diff) * lambda_com


# ---------------------------------------------------------------- step functions

@dataclass(frozen=True)
class PlannerState:
    """Per-decode planner state; immutable, so beam hypotheses can share it."""

    mode: str
    alpha: Tensor
    commitment: CommitmentPlan | None = None
    plan: AlignmentPlan | None = None
    psi: Tensor | None = None
    committed: bool = False
    step: int = 0


def _blend(gate: Tensor, new: Tensor, old: Tensor) -> Tensor:
    return gate * new + (1.0 - gate) * old


def pag_step(state: PlannerState, s_prev: Tensor, annotations: EncoderAnnotations, y_t: Tensor,
             f_align: Mlp, f_r: Mlp, f_up: Mlp, f_c: Linear, temperature: Tensor | float,
             noise: GumbelNoise = ZERO_NOISE, straight_through_gate: bool = True,
             dense: bool = False) -> tuple[Tensor, PlannerState]:
    """Advance the alignment plan by one decoder step.

    With ``dense=True`` the recompute branch is also evaluated when the switch
    is 0 and blended in with weight ``g = 0``; the forward values equal the
    plain shift, but the switch receives a gradient at every step.
    """
    if state is None or state.plan is None or state.commitment is None:
        raise ContractError("PAG step needs a state from init_plans")
    prev, c = state.plan, state.commitment
    if c.switch == 1 or dense:
        beta = plan_summary(f_r, prev)
        cand = candidate_plan(f_align, s_prev, annotations, beta, y_t)
        u = update_gate(f_up, s_prev, annotations)
        updated = (1.0 - u) * prev.matrix + u * cand
        plan = AlignmentPlan(_blend(c.gate[:, :1], updated, shift_plan(prev).matrix))
    else:
        plan = shift_plan(prev)
    if c.switch == 1:
        c_new = gumbel_softmax_st(f_c(s_prev), temperature, noise, straight_through_gate)
    else:
        c_new = shift_commitment(c)
    committed = c.switch == 1
    alpha = softmax_rows(plan.matrix[0])
    return alpha, replace(state, alpha=alpha, commitment=c_new, plan=plan,
                          committed=committed, step=state.step + 1)


def rpag_step(state: PlannerState, s_prev: Tensor, annotations: EncoderAnnotations, y_t: Tensor,
              f_align: Mlp, f_c: Linear, temperature: Tensor | float,
              noise: GumbelNoise = ZERO_NOISE, straight_through_gate: bool = True,
              dense: bool = False) -> tuple[Tensor, PlannerState]:
    if state is None or state.commitment is None or state.alpha is None or state.psi is None:
        raise ContractError("rPAG step needs an initialised state")
    c = state.commitment
    if c.switch == 1 or dense:
        fresh = _attend(f_align, s_prev, annotations, y_t)
        alpha = _blend(c.gate[:, :1], fresh, state.alpha)
    else:
        alpha = state.alpha
    if c.switch == 1:
        c_new = gumbel_softmax_st(f_c(concat([s_prev, state.psi])), temperature, noise, straight_through_gate)
    else:
        c_new = shift_commitment(c)
    committed = c.switch == 1
    return alpha, replace(state, alpha=alpha, commitment=c_new, committed=committed, step=state.step + 1)


# ---------------------------------------------------------------- module

_TAU_FLOOR = 0.1


class Planner(Module):
    """Parameters and dispatch for the configured attention mode."""

    def __init__(self, config: PlannerConfig, state_dim: int, annot_dim: int, embed_dim: int,
                 rng: np.random.Generator):
        self.config = config
        a, mode = config.align_hidden, config.mode
        if mode == "baseline":
            self.f_att = Mlp([state_dim + annot_dim, a, 1], ["tanh", "none"], rng)
        elif mode == "pag":
            self.f_align = Mlp([state_dim + annot_dim + config.summary_dim + embed_dim, a, 1], ["tanh", "none"], rng)
            self.f_r = Mlp([config.max_src_len, config.summary_dim], ["tanh"], rng)
            self.f_up = Mlp([annot_dim + state_dim, a, 1], ["tanh", "sigmoid"], rng)
            self.f_c = Linear(state_dim, config.k, rng)
            self.f_up.layers[-1].bias.data[...] = config.update_bias_init
        else:
            self.f_align = Mlp([state_dim + annot_dim + embed_dim, a, 1], ["tanh", "none"], rng)
            self.f_c = Linear(state_dim + annot_dim, config.k, rng)
        if mode != "baseline":
            self.f_c.bias.data[0, 0] = config.commit_bias_init
            # softplus(raw) + floor == 1.0 at initialisation
            self.tau_raw = Tensor(math.log(math.expm1(1.0 - _TAU_FLOOR)), requires_grad=True)

    @property
    def mode(self) -> str:
        return self.config.mode

    def temperature(self) -> Tensor:
        return softplus(self.tau_raw) + _TAU_FLOOR

    def init_state(self, annotations: EncoderAnnotations) -> PlannerState:
        n = len(annotations)
        if n > self.config.max_src_len:
            raise ShapeError(f"source length {n} exceeds max_src_len={self.config.max_src_len}")
        uniform = Tensor(np.full((1, n), 1.0 / n))
        if self.mode == "baseline":
            return PlannerState("baseline", uniform)
        plan, commit = init_plans(self.config.k, n)
        if self.mode == "pag":
            return PlannerState("pag", softmax_rows(plan.matrix[0]), commit, plan)
        return PlannerState("rpag", uniform, commit, psi=matmul(uniform, annotations.matrix))

    def step(self, state: PlannerState, s_prev: Tensor, annotations: EncoderAnnotations, y_t: Tensor,
             noise: GumbelNoise = ZERO_NOISE, straight_through_gate: bool = True) -> tuple[Tensor, PlannerState]:
        if self.mode == "baseline":
            alpha = baseline_attention(self.f_att, s_prev, annotations)
            return alpha, replace(state, alpha=alpha, step=state.step + 1)
        tau = annotations.memo(("tau", id(self)), self.temperature)
        dense = self.config.dense_switch_grad and grad_enabled()
        if self.mode == "pag":
            return pag_step(state, s_prev, annotations, y_t, self.f_align, self.f_r, self.f_up, self.f_c,
                            tau, noise, straight_through_gate, dense)
        return rpag_step(state, s_prev, annotations, y_t, self.f_align, self.f_c, tau, noise,
                         straight_through_gate, dense)
