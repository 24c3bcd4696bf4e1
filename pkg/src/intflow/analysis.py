"""Experiment suite: toy sources, gradient agreement, estimator grids, loss slices.

The centerpiece is a fast central-difference evaluator for the exact
discrete objective.  Perturbing one parameter of a coupling net only moves
that net's output linearly, so whole parameter tensors can be swept as one
mega-batch through the net suffix; rows whose rounded shift codes do not
move contribute exactly zero loss difference and are skipped.  A naive
per-coordinate evaluator is kept both for generality and as an oracle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RoundingConfig
from .data import ToyDataset
from .dists import LOG2
from .errors import DomainError, ParameterError, UsageError
from .flows import (
    FlowConfig,
    FlowModel,
    build_flatten_flow,
    build_flow_model,
    flatten_bpd,
    training_loss,
)
from .grid import GridTensor
from .nn import _NORM_EPS
from .train import TrainConfig, TrainResult, train

# Log-spaced step sizes swept by the gradient agreement experiment.  The
# top stays near one 8-bit lattice bin (5e-3 ~ 1.3/256): past two bins a
# finite difference measures rounding cliffs instead of slopes and its
# direction decorrelates from every estimator at any bit depth.
DEFAULT_EPSILONS = tuple(float(e) for e in np.geomspace(1e-4, 5e-3, 8))

# (forward rounding, backward substitute, objective) per estimator run.
ESTIMATOR_COMBOS = (
    ("hard_round", "identity", "discrete"),
    ("hard_round", "soft_round_derivative", "discrete"),
    ("soft_round", "soft_round_derivative", "discrete"),
    ("identity", "identity", "continuous"),
    ("hard_round", "identity", "continuous"),
)


# ---------------------------------------------------------------------------
# toy source
# ---------------------------------------------------------------------------

_ONE_BIT_TOY = np.array([[0.1, 0.3], [0.2, 0.4]])


def toy_pmf(bits: int) -> np.ndarray:
    """Joint PMF of the two-pixel toy source, indexed ``pmf[first, second]``.

    At one bit the four cell masses are fixed constants.  At higher depths
    the ``4**bits`` cells get masses proportional to a geometric ladder over
    the open unit interval, assigned in row-major order, so the joint stays
    strictly positive with a wide dynamic range and no two cells tie.
    """
    if bits < 1:
        raise ParameterError(f"bits must be >= 1, got {bits}")
    if bits == 1:
        return _ONE_BIT_TOY.copy()
    n = 2**bits
    cells = n * n
    ladder = np.geomspace(1.0 / (cells + 1), cells / (cells + 1), cells)
    return (ladder / ladder.sum()).reshape(n, n)


def make_toy_dataset(bits: int) -> ToyDataset:
    return ToyDataset(toy_pmf(bits), bits)


def toy_flow_config(bits: int, couplings: int = 2, depth: int = 4, hidden: int = 32) -> FlowConfig:
    """Single-level two-channel flow sized for the two-pixel source."""
    return FlowConfig(
        bits=bits,
        channels=2,
        height=1,
        width=1,
        levels=1,
        couplings=couplings,
        s2d_factor=1,
        untransformed=Fraction(1, 2),
        variant="toy",
        net_depth=depth,
        net_hidden=hidden,
        perm_kind="reverse",
        invert_perms=False,
        rezero=True,
    )


def toy_train_config(
    iterations: int = 3000,
    batch_size: int = 128,
    seed: int = 0,
    rounding: RoundingConfig | None = None,
    continuous: bool = False,
) -> TrainConfig:
    """Toy schedule: constant rates, 1e-3 on priors and 1e-4 on couplings."""
    per_epoch = min(100, iterations)
    return TrainConfig(
        epochs=max(1, math.ceil(iterations / per_epoch)),
        iters_per_epoch=per_epoch,
        batch_size=batch_size,
        seed=seed,
        coupling_lr=1e-4,
        prior_lr=1e-3,
        lr_decay=1.0,
        warmup_epochs=1,
        use_ema=False,
        rounding=RoundingConfig() if rounding is None else rounding,
        continuous=continuous,
    )


def train_toy(
    bits: int,
    seed: int,
    iterations: int = 3000,
    rounding: RoundingConfig | None = None,
    continuous: bool = False,
    dataset: ToyDataset | None = None,
) -> tuple[FlowModel, TrainResult]:
    """Build, initialize and train one toy flow; returns model and history."""
    data = make_toy_dataset(bits) if dataset is None else dataset
    model = build_flow_model(toy_flow_config(bits))
    model.initialize(seed)
    cfg = toy_train_config(iterations, seed=seed, rounding=rounding, continuous=continuous)
    result = train(model, data, cfg)
    return model, result


# ---------------------------------------------------------------------------
# gradient routes
# ---------------------------------------------------------------------------


def straight_through_gradient(
    model: FlowModel,
    batch: GridTensor,
    params: Sequence[Parameter],
    rounding: RoundingConfig | None = None,
) -> np.ndarray:
    """Tape gradient of the discrete objective with a surrogate backward."""
    rounding = RoundingConfig() if rounding is None else rounding
    loss = training_loss(model, batch.reals(), rounding)
    return ad.flatten_arrays(ad.gradient(loss, params))


def naive_fd_gradient(
    model: FlowModel, batch: GridTensor, params: Sequence[Parameter], eps: float
) -> np.ndarray:
    """Per-coordinate central differences of the exact discrete loss."""
    grads = ad.finite_diff_gradient(lambda: model.nll_bpd(batch), params, eps)
    return ad.flatten_arrays(grads)


@dataclass
class _Stage:
    """One replayable stage of a coupling net's plain-numpy forward."""

    kind: str  # "conv" | "norm" | "act" | "concat"
    layer: object | None
    x_in: np.ndarray
    out: np.ndarray
    aux: np.ndarray | None = None  # normalized activations, or the skip input
    entry_idx: int = -1  # concat only: stage producing the skip input


class _NetTrace:
    """Stagewise record of one dense net forward, for suffix replay."""

    def __init__(self, net, x: np.ndarray) -> None:
        self.stages: list[_Stage] = []
        h = x
        entry_idx = -1
        for block in net.blocks:
            entry = h
            h = self._conv(block.conv1, h)
            if block.norm1 is not None:
                h = self._norm(block.norm1, h)
            h = self._act(block, h)
            h = self._conv(block.conv2, h)
            if block.norm2 is not None:
                h = self._norm(block.norm2, h)
            h = self._act(block, h)
            out = np.concatenate([entry, h], axis=-1)
            self.stages.append(_Stage("concat", None, h, out, aux=entry, entry_idx=entry_idx))
            entry_idx = len(self.stages) - 1
            h = out
        self.out = self._conv(net.proj, h)

    def _conv(self, layer, h: np.ndarray) -> np.ndarray:
        if layer.kernel.value.shape[0] != 1:
            raise UsageError("fast finite differences need 1x1 kernels")
        out = layer.forward_value(h)
        self.stages.append(_Stage("conv", layer, h, out))
        return out

    def _norm(self, layer, h: np.ndarray) -> np.ndarray:
        mu = h.mean(axis=-1, keepdims=True)
        xc = h - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _NORM_EPS)
        xhat = xc * inv
        out = xhat * layer.gain.value + layer.bias.value
        self.stages.append(_Stage("norm", layer, h, out, aux=xhat))
        return out

    def _act(self, block, h: np.ndarray) -> np.ndarray:
        out = block._act(h, tape=False)
        self.stages.append(_Stage("act", block, h, out))
        return out

    def replay(self, start: int, h: np.ndarray, copies: int) -> np.ndarray:
        """Run every stage after ``start`` on stacked perturbed rows.

        A concat's skip input is the previous block boundary: when that
        boundary sits downstream of the perturbed stage its replayed value
        is used, otherwise the cached base value is tiled.
        """
        needed = {
            st.entry_idx
            for st in self.stages[start + 1 :]
            if st.kind == "concat" and st.entry_idx > start
        }
        saved: dict[int, np.ndarray] = {}
        for i in range(start + 1, len(self.stages)):
            st = self.stages[i]
            if st.kind == "concat":
                if st.entry_idx > start:
                    entry = saved.pop(st.entry_idx)
                else:
                    base = st.aux
                    tiled = np.broadcast_to(base[None], (copies,) + base.shape)
                    entry = tiled.reshape(h.shape[:-1] + base.shape[-1:])
                h = np.concatenate([entry, h], axis=-1)
            elif st.kind == "act":
                h = st.layer._act(h, tape=False)
            else:
                h = st.layer.forward_value(h)
            if i in needed:
                saved[i] = h
        return h

    def param_sites(self) -> list[tuple[Parameter, int, str]]:
        sites = []
        for idx, st in enumerate(self.stages):
            if st.kind == "conv":
                sites.append((st.layer.kernel, idx, "kernel"))
                sites.append((st.layer.bias, idx, "bias"))
            elif st.kind == "norm":
                sites.append((st.layer.gain, idx, "gain"))
                sites.append((st.layer.bias, idx, "bias"))
        return sites


def _site_basis(stage: _Stage, role: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Output channel and input feature per coordinate of one tensor.

    Each stage output is linear in its own parameters, so coordinate ``j``
    adds ``eps * feature_j`` onto output channel ``co_j`` and nothing else.
    A None feature means the unit feature (bias rows).
    """
    cout = stage.out.shape[-1]
    if role == "kernel":
        cin = stage.layer.kernel.value.shape[2]
        flat = np.arange(cin * cout)
        return flat % cout, stage.x_in[..., flat // cout]
    if role == "gain":
        idx = np.arange(cout)
        return idx, stage.aux[..., idx]
    return np.arange(cout), None


class _FlowTrace:
    """Cached single-level forward over the distinct rows of one batch."""

    def __init__(self, model: FlowModel, batch: GridTensor) -> None:
        if len(model.levels) != 1 or model.levels[0].s2d_factor != 1:
            raise UsageError("fast finite differences support single-level flows only")
        self.model = model
        self.steps = model.levels[0].steps
        flat = batch.codes.reshape(batch.batch, -1)
        rows, counts = np.unique(flat, axis=0, return_counts=True)
        self.rows = len(rows)
        self.weights = counts / batch.batch
        width = 2.0**-model.bits

        t = rows.reshape((self.rows,) + batch.shape[1:])
        self.step_in: list[np.ndarray] = []
        self.traces: list[_NetTrace] = []
        self.shifts: list[np.ndarray] = []
        for step in self.steps:
            t = t[..., step.perm.perm]
            self.step_in.append(t)
            coupling = step.coupling
            reals_a = t[..., : coupling.n_a].astype(np.float64) * width
            trace = _NetTrace(coupling.net, reals_a)
            self.traces.append(trace)
            shift_codes = _shift_codes(coupling, trace.out)
            self.shifts.append(shift_codes)
            y = t.copy()
            y[..., coupling.n_a :] += shift_codes
            if step.invert_perm:
                y = y[..., step.perm.inv]
            t = y
        self.z = t
        self.base_rows = self.loss_rows(t)
        self.base_loss = float(self.weights @ self.base_rows)

    def loss_rows(self, z_codes: np.ndarray) -> np.ndarray:
        lp = self.model.priors[0].log_pmf_value(z_codes)
        return -lp.reshape(z_codes.shape[0], -1).sum(axis=-1) / (self.model.dims * LOG2)

    def suffix_rows(self, step_idx: int, y_codes: np.ndarray) -> np.ndarray:
        """Loss rows after replacing one step's post-coupling codes."""
        step = self.steps[step_idx]
        t = y_codes
        if step.invert_perm:
            t = t[..., step.perm.inv]
        for later in self.steps[step_idx + 1 :]:
            t = t[..., later.perm.perm]
            t = later.coupling.forward_codes(t)
            if later.invert_perm:
                t = t[..., later.perm.inv]
        return self.loss_rows(t)


def _shift_codes(coupling, t_out: np.ndarray) -> np.ndarray:
    shift = t_out if coupling.scale is None else coupling.scale.value * t_out
    return ad.round_half_up(shift * 2.0**coupling.bits).astype(np.int64)


def _losses_from_shifts(state: _FlowTrace, step_idx: int, shifts: np.ndarray) -> np.ndarray:
    """Batch losses for a stack of candidate shift-code tensors.

    ``shifts`` has shape (J, R, ...); rows whose codes match the cached
    forward contribute no change, so only moved rows walk the flow suffix.
    """
    j = shifts.shape[0]
    base = state.shifts[step_idx]
    changed = (shifts != base[None]).reshape(j, state.rows, -1).any(axis=-1)
    losses = np.full(j, state.base_loss)
    jj, rr = np.nonzero(changed)
    if jj.size:
        coupling = state.steps[step_idx].coupling
        y = state.step_in[step_idx][rr].copy()
        y[..., coupling.n_a :] += shifts[jj, rr]
        new_rows = state.suffix_rows(step_idx, y)
        np.add.at(losses, jj, state.weights[rr] * (new_rows - state.base_rows[rr]))
    return losses


def _stage_losses(
    state: _FlowTrace,
    step_idx: int,
    stage_idx: int,
    co: np.ndarray,
    feat: np.ndarray | None,
    eps: float,
) -> np.ndarray:
    """Perturb one chunk of stage-output coordinates by ``eps`` at once."""
    trace = state.traces[step_idx]
    stage = trace.stages[stage_idx]
    j = co.size
    onehot = np.zeros((j, stage.out.shape[-1]))
    onehot[np.arange(j), co] = 1.0
    bump = onehot[:, None, None, None, :]
    if feat is not None:
        bump = bump * feat.transpose(3, 0, 1, 2)[..., None]
    pert = stage.out[None] + eps * bump
    mega = pert.reshape((j * state.rows,) + stage.out.shape[1:])
    t_out = trace.replay(stage_idx, mega, copies=j)
    coupling = state.steps[step_idx].coupling
    shifts = _shift_codes(coupling, t_out).reshape((j, state.rows) + t_out.shape[1:])
    return _losses_from_shifts(state, step_idx, shifts)


def _head_losses(state: _FlowTrace, param: Parameter, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference loss pairs for one prior parameter tensor."""
    flat = param.value.reshape(-1)
    up = np.empty(flat.size)
    down = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up[i] = state.weights @ state.loss_rows(state.z)
        flat[i] = orig - eps
        down[i] = state.weights @ state.loss_rows(state.z)
        flat[i] = orig
    return up, down


def fast_fd_gradient(
    model: FlowModel,
    batch: GridTensor,
    params: Sequence[Parameter],
    eps: float,
    chunk: int = 256,
) -> np.ndarray:
    """Central differences of the exact discrete loss, one tensor at a time.

    Matches ``naive_fd_gradient`` up to float associativity but runs whole
    parameter tensors as stacked perturbations: the perturbed stage output
    is exact (stage outputs are linear in their own parameters), only the
    net suffix is replayed, and only rows whose rounded shift moved walk
    the rest of the flow.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    state = _FlowTrace(model, batch)
    sites: dict[int, tuple] = {}
    for s, step in enumerate(state.steps):
        for p, idx, role in state.traces[s].param_sites():
            sites[id(p)] = ("stage", s, idx, role)
        if step.coupling.scale is not None:
            sites[id(step.coupling.scale)] = ("scale", s)
    for p in model.priors[0].parameters():
        sites[id(p)] = ("head",)

    grads = []
    for p in params:
        site = sites.get(id(p))
        if site is None:
            raise UsageError(f"parameter {p.name} is not part of the model")
        if site[0] == "head":
            up, down = _head_losses(state, p, eps)
            g = (up - down) / (2.0 * eps)
        elif site[0] == "scale":
            s = site[1]
            coupling = state.steps[s].coupling
            t_out = state.traces[s].out
            losses = []
            for signed in (eps, -eps):
                shift = (coupling.scale.value + signed) * t_out
                codes = ad.round_half_up(shift * 2.0**coupling.bits).astype(np.int64)
                losses.append(_losses_from_shifts(state, s, codes[None]))
            g = (losses[0] - losses[1]) / (2.0 * eps)
        else:
            _, s, stage_idx, role = site
            co, feat = _site_basis(state.traces[s].stages[stage_idx], role)
            g = np.empty(co.size)
            for lo in range(0, co.size, chunk):
                sl = slice(lo, min(lo + chunk, co.size))
                f = None if feat is None else feat[..., sl]
                up = _stage_losses(state, s, stage_idx, co[sl], f, eps)
                down = _stage_losses(state, s, stage_idx, co[sl], f, -eps)
                g[sl] = (up - down) / (2.0 * eps)
        grads.append(g.reshape(p.value.shape))
    return ad.flatten_arrays(grads)


def fd_gradient(
    model: FlowModel,
    batch: GridTensor,
    params: Sequence[Parameter],
    eps: float,
    mode: str = "fast",
) -> np.ndarray:
    """Finite-difference gradient via the fast or the naive route."""
    if mode == "fast":
        return fast_fd_gradient(model, batch, params, eps)
    if mode == "naive":
        return naive_fd_gradient(model, batch, params, eps)
    raise ParameterError(f"unknown finite-difference mode {mode!r}")


# ---------------------------------------------------------------------------
# gradient agreement sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgreementRecord:
    """Cosine between surrogate and finite-difference gradients."""

    epsilon: float
    batch_index: int
    cosine: float  # NaN when either gradient vanished


def agreement_sweep(
    model: FlowModel,
    dataset,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    batches: int = 10,
    batch_size: int = 128,
    seed: int = 0,
    rounding: RoundingConfig | None = None,
    params: Sequence[Parameter] | None = None,
    mode: str = "fast",
) -> list[AgreementRecord]:
    """Compare surrogate and finite-difference gradients over step sizes.

    Each batch is drawn once and its surrogate gradient computed once; the
    finite-difference side is then evaluated per step size on that same
    batch.  Defaults restrict to the bijector (coupling) parameters, where
    the two estimators genuinely disagree.
    """
    if params is None:
        params = model.param_groups()["coupling"]
    rng = np.random.default_rng(seed)
    records = []
    for b in range(batches):
        batch = dataset.sample_codes(rng, batch_size)
        g_st = straight_through_gradient(model, batch, params, rounding)
        for eps in epsilons:
            g_fd = fd_gradient(model, batch, params, float(eps), mode=mode)
            cosine = ad.cosine_agreement(g_st, g_fd)
            records.append(AgreementRecord(float(eps), b, cosine))
    return records


def mean_by_epsilon(records: Sequence[AgreementRecord]) -> dict[float, float]:
    """Mean cosine per step size, skipping vanished-gradient records."""
    out: dict[float, float] = {}
    for eps in sorted({r.epsilon for r in records}):
        vals = [r.cosine for r in records if r.epsilon == eps and not math.isnan(r.cosine)]
        out[eps] = float(np.mean(vals)) if vals else float("nan")
    return out


# ---------------------------------------------------------------------------
# estimator grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorResult:
    """Final rate of one (rounding, backward, objective) training run."""

    forward: str
    backward: str
    mode: str
    seed: int
    bpd: float


def continuous_eval_bpd(
    model: FlowModel,
    dataset,
    forward: str = "identity",
    samples: int = 4096,
    seed: int = 1234,
) -> float:
    """Dequantization-bound rate on a frozen noise draw, in bits/dim."""
    rng = np.random.default_rng(seed)
    codes = dataset.sample_codes(rng, samples)
    reals = codes.reals() + rng.uniform(0.0, codes.bin_width, size=codes.codes.shape)
    cfg = RoundingConfig(forward=forward, backward="identity")
    return float(training_loss(model, reals, cfg, continuous=True).value)


def estimator_matrix(
    bits: int = 8,
    seeds: Sequence[int] = (0, 1, 2),
    iterations: int = 3000,
    combos: Sequence[tuple[str, str, str]] = ESTIMATOR_COMBOS,
) -> list[EstimatorResult]:
    """Train every rounding/backward/objective combination on shared seeds.

    Discrete runs report the exact support-weighted rate; continuous runs
    report their dequantization bound under the same frozen noise draw.
    """
    dataset = make_toy_dataset(bits)
    results = []
    for forward, backward, mode in combos:
        for seed in seeds:
            model, _ = train_toy(
                bits,
                seed,
                iterations=iterations,
                rounding=RoundingConfig(forward=forward, backward=backward),
                continuous=mode == "continuous",
                dataset=dataset,
            )
            if mode == "continuous":
                bpd = continuous_eval_bpd(model, dataset, forward=forward)
            else:
                bpd = dataset.eval_bpd(model)
            results.append(EstimatorResult(forward, backward, mode, seed, bpd))
    return results


def estimator_means(results: Sequence[EstimatorResult]) -> dict[tuple[str, str, str], float]:
    """Mean rate per combination across seeds."""
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in results:
        groups.setdefault((r.forward, r.backward, r.mode), []).append(r.bpd)
    return {key: float(np.mean(vals)) for key, vals in groups.items()}


# ---------------------------------------------------------------------------
# loss landscape slices
# ---------------------------------------------------------------------------


def landscape_axes(checkpoints: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Top two principal directions of an optimization path, unit length.

    Directions come from the checkpoint offsets against the final iterate,
    via the small Gram matrix of the offsets.  Signs are fixed so the first
    nonzero coordinate of each axis is positive.  Raises DomainError when
    the path spans fewer than two directions.
    """
    ckpts = np.asarray(checkpoints, dtype=np.float64)
    if ckpts.ndim != 2 or ckpts.shape[0] < 3:
        raise DomainError("need at least three checkpoints for two axes")
    diffs = ckpts[:-1] - ckpts[-1]
    gram = diffs @ diffs.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    if evals[order[1]] <= max(evals[order[0]], 0.0) * 1e-12:
        raise DomainError("optimization path spans fewer than two directions")
    axes = []
    for k in order[:2]:
        v = diffs.T @ evecs[:, k]
        v = v / np.linalg.norm(v)
        first = np.flatnonzero(np.abs(v) > 1e-12)[0]
        axes.append(-v if v[first] < 0 else v)
    return axes[0], axes[1]


@dataclass(frozen=True)
class LandscapeSlice:
    """Loss surface over a two-direction slice through parameter space."""

    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # (len(alphas), len(betas))
    base_loss: float
    trajectory: tuple[tuple[int, float, float], ...]


def landscape_slice(
    model: FlowModel,
    eval_fn: Callable[[], float],
    axis1: np.ndarray,
    axis2: np.ndarray,
    radius: float = 0.5,
    resolution: int = 11,
    checkpoints: Sequence[np.ndarray] | None = None,
) -> LandscapeSlice:
    """Evaluate ``eval_fn`` on a grid of displacements along two axes.

    The model's parameters are displaced in place and restored afterwards;
    the grid center is the unmodified model, so the center cell reproduces
    the checkpoint loss exactly.  Checkpoints, when given, are projected
    onto the two axes for a trajectory overlay.
    """
    if resolution < 2 or radius <= 0:
        raise ParameterError("need resolution >= 2 and a positive radius")
    params = model.parameters()
    center = ad.params_vector(params)
    if axis1.shape != center.shape or axis2.shape != center.shape:
        raise UsageError("axis length does not match the parameter count")
    # Offsets as scaled centered integers: an odd resolution hits 0.0 exactly,
    # so the center cell evaluates the unmodified parameters bit for bit.
    step = 2.0 * radius / (resolution - 1)
    alphas = (np.arange(resolution) - (resolution - 1) / 2) * step
    betas = alphas.copy()
    losses = np.empty((resolution, resolution))
    try:
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                ad.set_params_vector(params, center + a * axis1 + b * axis2)
                losses[i, j] = eval_fn()
    finally:
        ad.set_params_vector(params, center)
    base_loss = eval_fn()
    trajectory = tuple(
        (k, float((c - center) @ axis1), float((c - center) @ axis2))
        for k, c in enumerate(() if checkpoints is None else checkpoints)
    )
    return LandscapeSlice(alphas, betas, losses, base_loss, trajectory)


# ---------------------------------------------------------------------------
# flattening demo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlattenDemo:
    """Exhaustive audit of the integer flattening flow on one joint PMF."""

    counts: tuple[int, ...]
    bpd: float
    entropy_bpd: float
    pushed: np.ndarray | None  # pushed joint over the output box, 2-d only
    second_singular: float | None


def flatten_demo(pmf: np.ndarray) -> FlattenDemo:
    """Flatten a small joint PMF and measure the resulting code rate.

    The flow is verified exhaustively, the output rate is compared against
    the joint entropy per coordinate, and for two-coordinate joints the
    pushed distribution is materialized as a matrix: every column except
    the first is empty, so its second singular value is zero.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.size > 10_000:
        raise DomainError("demo is exhaustive; joint is too large")
    counts = pmf.shape
    flow = build_flatten_flow(counts)
    flow.verify()
    probs = pmf.reshape(-1)
    entropy = -np.sum(probs[probs > 0] * np.log2(probs[probs > 0])) / len(counts)
    bpd = flatten_bpd(flow, pmf)
    pushed = None
    second = None
    if pmf.ndim == 2:
        pushed = np.zeros((flow.total, counts[1]))
        grid = np.stack(np.meshgrid(*(np.arange(c) for c in counts), indexing="ij"), axis=-1)
        z = flow.forward(grid.reshape(-1, 2))
        pushed[z[:, 0], z[:, 1]] = probs
        second = float(np.linalg.svd(pushed, compute_uv=False)[1])
    return FlattenDemo(tuple(counts), float(bpd), float(entropy), pushed, second)


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def _write_csv(path, header: Sequence[str], rows, metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_agreement_csv(
    records: Sequence[AgreementRecord], path, metadata: dict | None = None
) -> None:
    rows = [(r.epsilon, r.batch_index, r.cosine) for r in records]
    _write_csv(path, ("epsilon", "batch_id", "cosine"), rows, metadata)


def write_estimator_csv(
    results: Sequence[EstimatorResult], path, metadata: dict | None = None
) -> None:
    rows = [(r.forward, r.backward, r.mode, r.seed, r.bpd) for r in results]
    _write_csv(path, ("forward", "backward", "mode", "seed", "bpd"), rows, metadata)


def write_landscape_csv(
    slc: LandscapeSlice, path, trajectory_path=None, metadata: dict | None = None
) -> None:
    rows = [
        (float(a), float(b), float(slc.losses[i, j]))
        for i, a in enumerate(slc.alphas)
        for j, b in enumerate(slc.betas)
    ]
    _write_csv(path, ("alpha", "beta", "loss"), rows, metadata)
    if trajectory_path is not None:
        _write_csv(trajectory_path, ("step", "alpha", "beta"), slc.trajectory, metadata)
