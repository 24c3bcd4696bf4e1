"""Integer flows: additive couplings, the multi-level model, flattening.

The model is a bijection on lattice codes.  Every transform family comes in
two flavors that share numeric kernels: an exact int64 codes path used for
coding and evaluation, and a tape path over real values used for training,
where the quantizer inside each coupling is configurable.  With hard
rounding the two paths agree bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter, RoundingConfig, value_of
from .dists import LOG2, ConditionalDLPrior, MixtureDLBank
from .errors import (
    BijectionError,
    CapacityError,
    ConfigError,
    DomainError,
    StreamCorruptionError,
    StreamFormatError,
)
from .grid import (
    ChannelPermutation,
    GridTensor,
    apply_permutation,
    concat_channels,
    depth_to_space,
    depth_to_space_array,
    space_to_depth,
    space_to_depth_array,
    split_channels,
)
from .nn import BLOCK_VARIANTS, DenseNet, init_parameters


def latent_alphabet(bits: int) -> tuple[int, int]:
    """Half-open code range the entropy coder tables cover for latents."""
    return -(2 ** (bits + 2)), 2 ** (bits + 2)


@dataclass(frozen=True)
class FlowConfig:
    """Static shape and architecture of a multi-level integer flow."""

    bits: int = 8
    channels: int = 1
    height: int = 8
    width: int = 8
    levels: int = 2
    couplings: int = 2
    s2d_factor: int = 2
    untransformed: Fraction = Fraction(3, 4)
    variant: str = "gn_swish"
    net_depth: int = 2
    net_hidden: int = 32
    prior_components: int = 5
    cond_depth: int = 1
    cond_hidden: int = 16
    perm_kind: str = "random"
    perm_seed: int = 24257
    invert_perms: bool = True
    rezero: bool = True

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["untransformed"] = str(self.untransformed)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "FlowConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown flow config keys: {sorted(unknown)}")
        data = dict(raw)
        if "untransformed" in data:
            data["untransformed"] = Fraction(str(data["untransformed"]))
        return cls(**data)


class AdditiveCoupling:
    """Shift the trailing channels by a rounded function of the leading ones.

    The leading ``n_a`` channels pass through unchanged and feed a dense
    net whose output, scaled by a learned gate that starts at zero, shifts
    the trailing ``n_b`` channels.  On codes the shift is rounded to the
    lattice with half-up ties, which makes the map exactly invertible.
    """

    def __init__(
        self,
        channels: int,
        untransformed: Fraction,
        bits: int,
        name: str,
        variant: str = "toy",
        depth: int = 1,
        hidden: int = 32,
        rezero: bool = True,
    ) -> None:
        n_a = Fraction(channels) * Fraction(untransformed)
        if n_a.denominator != 1 or not 0 < int(n_a) < channels:
            raise ConfigError(
                f"untransformed fraction {untransformed} of {channels} channels "
                "is not a proper integer split"
            )
        self.n_a = int(n_a)
        self.n_b = channels - self.n_a
        self.bits = bits
        self.net = DenseNet(variant, self.n_a, self.n_b, depth, hidden, f"{name}.net")
        self.scale = Parameter(np.array(0.0), name=f"{name}.scale") if rezero else None

    def parameters(self) -> list[Parameter]:
        out = self.net.parameters()
        if self.scale is not None:
            out.append(self.scale)
        return out

    def shift_value(self, reals_a: np.ndarray) -> np.ndarray:
        """Unrounded real shift for the trailing channels."""
        t = self.net.forward_value(reals_a)
        if self.scale is not None:
            t = self.scale.value * t
        return t

    def shift_codes(self, reals_a: np.ndarray) -> np.ndarray:
        scaled = self.shift_value(reals_a) * 2.0**self.bits
        if not np.all(np.abs(scaled) < 2.0**62):
            raise CapacityError("coupling shift overflows the integer lattice")
        return ad.round_half_up(scaled).astype(np.int64)

    def forward_codes(self, codes: np.ndarray) -> np.ndarray:
        reals_a = codes[..., : self.n_a].astype(np.float64) * 2.0**-self.bits
        out = codes.copy()
        out[..., self.n_a :] += self.shift_codes(reals_a)
        return out

    def inverse_codes(self, codes: np.ndarray) -> np.ndarray:
        reals_a = codes[..., : self.n_a].astype(np.float64) * 2.0**-self.bits
        out = codes.copy()
        out[..., self.n_a :] -= self.shift_codes(reals_a)
        return out

    def forward_tape(
        self, v, rounding: RoundingConfig, rng: np.random.Generator | None
    ) -> Node:
        va = ad.narrow(v, 0, self.n_a, axis=-1)
        vb = ad.narrow(v, self.n_a, self.n_b, axis=-1)
        t = self.net.forward(va)
        if self.scale is not None:
            t = ad.mul(self.scale, t)
        shift = ad.round_to_grid(t, self.bits, rounding, rng)
        return ad.concat([va, ad.add(vb, shift)], axis=-1)

    def forward_real(self, reals: np.ndarray, rounded: bool) -> np.ndarray:
        shift = self.shift_value(reals[..., : self.n_a])
        if rounded:
            shift = ad.round_half_up(shift * 2.0**self.bits) * 2.0**-self.bits
        out = reals.copy()
        out[..., self.n_a :] += shift
        return out


@dataclass
class FlowStep:
    """One coupling step: permute, couple, optionally un-permute."""

    perm: ChannelPermutation
    coupling: AdditiveCoupling
    invert_perm: bool


@dataclass
class FlowLevel:
    """Spatial fold followed by coupling steps at one scale."""

    s2d_factor: int
    steps: list[FlowStep]
    channels: int  # channel count after the spatial fold


@dataclass
class LatentPart:
    """A factored-out latent with the tensor its prior conditions on."""

    codes: GridTensor
    cond: GridTensor | None


def _step_seed(base: int, level: int, step: int) -> int:
    return (base + 1000003 * level + 7919 * step) & 0x7FFFFFFF


class FlowModel:
    """Multi-level volume-preserving bijection with factorized priors.

    Each level folds space into channels, runs coupling steps and splits
    off half the channels as a latent whose prior is conditioned on the
    carried half; the final level keeps everything for an unconditional
    per-channel mixture prior.
    """

    def __init__(self, config: FlowConfig) -> None:
        if config.variant not in BLOCK_VARIANTS:
            raise ConfigError(f"unknown net variant {config.variant!r}")
        if config.perm_kind not in ("random", "reverse"):
            raise ConfigError(f"unknown permutation kind {config.perm_kind!r}")
        if config.levels < 1 or config.couplings < 0:
            raise ConfigError("levels must be at least 1 and couplings non-negative")
        self.config = config
        self.bits = config.bits
        self.dims = config.height * config.width * config.channels
        self.levels: list[FlowLevel] = []
        self.priors: list = []

        c, h, w = config.channels, config.height, config.width
        for i in range(config.levels):
            f = config.s2d_factor
            if f > 1 and (h % f or w % f):
                raise ConfigError(
                    f"level {i}: spatial dims {(h, w)} not divisible by {f}"
                )
            c, h, w = c * f * f, h // f, w // f
            steps = []
            for j in range(config.couplings):
                if config.perm_kind == "reverse":
                    perm = ChannelPermutation.reverse(c)
                else:
                    perm = ChannelPermutation.from_seed(
                        c, _step_seed(config.perm_seed, i, j)
                    )
                coupling = AdditiveCoupling(
                    c,
                    config.untransformed,
                    config.bits,
                    f"level{i}.couple{j}",
                    variant=config.variant,
                    depth=config.net_depth,
                    hidden=config.net_hidden,
                    rezero=config.rezero,
                )
                steps.append(FlowStep(perm, coupling, config.invert_perms))
            self.levels.append(FlowLevel(f, steps, c))
            last = i == config.levels - 1
            if last:
                self.priors.append(
                    MixtureDLBank(
                        c, config.bits, f"level{i}.prior", config.prior_components
                    )
                )
            else:
                if c % 2:
                    raise ConfigError(
                        f"level {i}: {c} channels cannot split into equal halves"
                    )
                self.priors.append(
                    ConditionalDLPrior(
                        c // 2,
                        c // 2,
                        config.bits,
                        f"level{i}.prior",
                        variant=config.variant,
                        depth=config.cond_depth,
                        hidden=config.cond_hidden,
                        rezero=config.rezero,
                    )
                )
                c = c // 2

    # -- parameters ---------------------------------------------------------

    def networks(self) -> list:
        nets = []
        for level in self.levels:
            for step in level.steps:
                nets.append(step.coupling.net)
        for prior in self.priors:
            nets.extend(prior.networks())
        return nets

    def parameters(self) -> list[Parameter]:
        params = []
        for level in self.levels:
            for step in level.steps:
                params.extend(step.coupling.parameters())
        for prior in self.priors:
            params.extend(prior.parameters())
        return params

    def param_groups(self) -> dict[str, list[Parameter]]:
        coupling = []
        for level in self.levels:
            for step in level.steps:
                coupling.extend(step.coupling.parameters())
        prior = []
        for p in self.priors:
            prior.extend(p.parameters())
        return {"coupling": coupling, "prior": prior}

    def initialize(self, seed: int) -> None:
        """Seed every dense net; gates and prior banks keep their defaults."""
        children = np.random.SeedSequence(seed).generate_state(
            max(len(self.networks()), 1)
        )
        for net, child in zip(self.networks(), children):
            init_parameters(net, int(child))

    # -- codes path ---------------------------------------------------------

    def _check_input(self, x: GridTensor) -> None:
        b, h, w, c = x.shape
        cfg = self.config
        if (h, w, c) != (cfg.height, cfg.width, cfg.channels) or x.bits != cfg.bits:
            raise DomainError(
                f"input {x.shape} at {x.bits} bits does not match the model "
                f"({cfg.height}, {cfg.width}, {cfg.channels}) at {cfg.bits} bits"
            )

    def forward_codes(self, x: GridTensor) -> list[LatentPart]:
        self._check_input(x)
        parts = []
        t = x
        for i, level in enumerate(self.levels):
            t = space_to_depth(t, level.s2d_factor)
            for step in level.steps:
                t = apply_permutation(t, step.perm)
                t = t.with_codes(step.coupling.forward_codes(t.codes))
                if step.invert_perm:
                    t = apply_permutation(t, step.perm, inverse=True)
            if i == len(self.levels) - 1:
                parts.append(LatentPart(t, None))
            else:
                z, carry = split_channels(t, Fraction(1, 2))
                parts.append(LatentPart(z, carry))
                t = carry
        return parts

    def invert_level(self, level: FlowLevel, t: GridTensor) -> GridTensor:
        for step in reversed(level.steps):
            if step.invert_perm:
                t = apply_permutation(t, step.perm)
            t = t.with_codes(step.coupling.inverse_codes(t.codes))
            t = apply_permutation(t, step.perm, inverse=True)
        return depth_to_space(t, level.s2d_factor)

    def inverse_codes(self, parts: list[LatentPart]) -> GridTensor:
        if len(parts) != len(self.levels):
            raise DomainError(
                f"expected {len(self.levels)} latent parts, got {len(parts)}"
            )
        t = parts[-1].codes
        for i in range(len(self.levels) - 1, -1, -1):
            if i < len(self.levels) - 1:
                t = concat_channels(parts[i].codes, t)
            t = self.invert_level(self.levels[i], t)
        return t

    def nll_bpd_samples(self, x: GridTensor) -> np.ndarray:
        """Exact per-sample negative log likelihood, in bits per dimension."""
        totals = np.zeros(x.batch)
        for part, prior in zip(self.forward_codes(x), self.priors):
            cond = None if part.cond is None else part.cond.reals()
            lp = prior.log_pmf_value(part.codes.codes, cond)
            totals += lp.reshape(x.batch, -1).sum(axis=-1)
        return -totals / (self.dims * LOG2)

    def nll_bpd(self, x: GridTensor) -> float:
        """Exact negative log likelihood of the codes, in bits per dimension."""
        return float(self.nll_bpd_samples(x).mean())

    def sample(self, rng: np.random.Generator, batch: int) -> GridTensor:
        """Draw images by sampling latents top down through the inverse."""
        cfg = self.config
        h = cfg.height // cfg.s2d_factor ** cfg.levels if cfg.s2d_factor > 1 else cfg.height
        w = cfg.width // cfg.s2d_factor ** cfg.levels if cfg.s2d_factor > 1 else cfg.width
        top_c = self.levels[-1].channels
        codes = self.priors[-1].sample(rng, (batch, h, w, top_c))
        t = GridTensor(codes, self.bits)
        for i in range(len(self.levels) - 1, -1, -1):
            t = self.invert_level(self.levels[i], t)
            if i > 0:
                z = self.priors[i - 1].sample(rng, t.shape, y_reals=t.reals())
                t = concat_channels(GridTensor(z, self.bits), t)
        return t

    # -- real-valued paths --------------------------------------------------

    def forward_tape(
        self,
        v,
        rounding: RoundingConfig,
        rng: np.random.Generator | None = None,
    ) -> list[tuple[Node, Node | None]]:
        """Differentiable forward over real values (B, H, W, C)."""
        parts: list[tuple[Node, Node | None]] = []
        t = v
        for i, level in enumerate(self.levels):
            if level.s2d_factor > 1:
                f = level.s2d_factor
                t = ad.array_bijection(
                    t,
                    lambda a, f=f: space_to_depth_array(a, f),
                    lambda g, f=f: depth_to_space_array(g, f),
                )
            for step in level.steps:
                t = ad.permute_last(t, step.perm.perm, step.perm.inv)
                t = step.coupling.forward_tape(t, rounding, rng)
                if step.invert_perm:
                    t = ad.permute_last(t, step.perm.inv, step.perm.perm)
            if i == len(self.levels) - 1:
                parts.append((t, None))
            else:
                half = level.channels // 2
                z = ad.narrow(t, 0, half, axis=-1)
                carry = ad.narrow(t, half, half, axis=-1)
                parts.append((z, carry))
                t = carry
        return parts

    def forward_real(
        self, reals: np.ndarray, rounded: bool = True
    ) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Tape-free forward over real values; ``rounded`` picks the shift."""
        parts: list[tuple[np.ndarray, np.ndarray | None]] = []
        t = np.asarray(reals, dtype=np.float64)
        for i, level in enumerate(self.levels):
            t = space_to_depth_array(t, level.s2d_factor)
            for step in level.steps:
                t = t[..., step.perm.perm]
                t = step.coupling.forward_real(t, rounded)
                if step.invert_perm:
                    t = t[..., step.perm.inv]
            if i == len(self.levels) - 1:
                parts.append((t, None))
            else:
                half = level.channels // 2
                parts.append((t[..., :half], t[..., half:]))
                t = t[..., half:]
        return parts


def build_flow_model(config: FlowConfig) -> FlowModel:
    return FlowModel(config)


def coupling_forward(coupling: AdditiveCoupling, t: GridTensor) -> GridTensor:
    return t.with_codes(coupling.forward_codes(t.codes))


def coupling_inverse(coupling: AdditiveCoupling, t: GridTensor) -> GridTensor:
    return t.with_codes(coupling.inverse_codes(t.codes))


def model_forward(model: FlowModel, x: GridTensor) -> list[LatentPart]:
    return model.forward_codes(x)


def model_inverse(model: FlowModel, parts: list[LatentPart]) -> GridTensor:
    return model.inverse_codes(parts)


def model_nll_bpd(model: FlowModel, x: GridTensor) -> float:
    return model.nll_bpd(x)


def verify_bijection(model: FlowModel, x: GridTensor) -> bool:
    """Round-trip the codes through the flow; True when they come back exact."""
    back = model.inverse_codes(model.forward_codes(x))
    return bool(np.array_equal(back.codes, x.codes))


def training_loss(
    model: FlowModel,
    reals: np.ndarray,
    rounding: RoundingConfig,
    rng: np.random.Generator | None = None,
    continuous: bool = False,
) -> Node:
    """Mean negative log likelihood on the tape, in bits per dimension.

    For ``continuous`` the caller supplies dequantized reals and identity
    rounding; the additive flow preserves volume, so the density bound is
    the prior density plus the lattice resolution in bits.
    """
    parts = model.forward_tape(reals, rounding, rng)
    acc = None
    for (z, cond), prior in zip(parts, model.priors):
        lp = (
            prior.log_density_node(z, cond)
            if continuous
            else prior.log_pmf_node(z, cond)
        )
        s = ad.sum_all(lp)
        acc = s if acc is None else ad.add(acc, s)
    batch = value_of(reals).shape[0]
    scale = 1.0 / (batch * model.dims * LOG2)
    loss = ad.mul(ad.neg(acc), scale)
    if continuous:
        loss = ad.add(loss, float(model.bits))
    return loss


# ---------------------------------------------------------------------------
# flattening flow on integer vectors
# ---------------------------------------------------------------------------


class FlattenFlow:
    """Bijection packing a bounded integer vector into its first coordinate.

    Works by ``2 * (d - 1)`` elementary integer steps, alternating an
    add-scaled step with a subtract-floor-quotient step from the tail
    inward; afterwards coordinate 0 holds the little-endian mixed-radix
    code and every other coordinate is zero.
    """

    def __init__(self, counts: tuple[int, ...]) -> None:
        if not counts or any(c < 1 for c in counts):
            raise ConfigError("counts must be a non-empty tuple of positive sizes")
        self.counts = tuple(int(c) for c in counts)
        self.total = math.prod(self.counts)
        # (index, capacity of that coordinate when its step runs)
        self._plan: list[tuple[int, int]] = []
        caps = list(self.counts)
        for i in range(len(caps) - 2, -1, -1):
            self._plan.append((i, caps[i]))
            caps[i] *= caps[i + 1]

    @property
    def step_count(self) -> int:
        return 2 * (len(self.counts) - 1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.shape[-1] != len(self.counts):
            raise DomainError(
                f"expected trailing dimension {len(self.counts)}, got {x.shape[-1]}"
            )
        lo_ok = np.all(x >= 0)
        hi_ok = np.all(x < np.asarray(self.counts))
        if not (lo_ok and hi_ok):
            raise DomainError("coordinate outside its alphabet")
        out = x.copy()
        for i, cap in self._plan:
            out[..., i] += cap * out[..., i + 1]
            out[..., i + 1] -= out[..., i] // cap
        return out

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.int64)
        out = z.copy()
        for i, cap in reversed(self._plan):
            out[..., i + 1] += out[..., i] // cap
            out[..., i] -= cap * out[..., i + 1]
        return out

    def verify(self) -> bool:
        """Exhaustively round-trip the whole domain (small alphabets only)."""
        grids = np.meshgrid(*[np.arange(c) for c in self.counts], indexing="ij")
        xs = np.stack([g.reshape(-1) for g in grids], axis=-1)
        zs = self.forward(xs)
        if not np.array_equal(self.inverse(zs), xs):
            raise BijectionError("flatten round trip mismatch")
        if np.any(zs[..., 1:] != 0):
            raise BijectionError("flatten left a nonzero trailing coordinate")
        packed = np.sort(zs[..., 0])
        if not np.array_equal(packed, np.arange(self.total)):
            raise BijectionError("flatten is not onto the packed range")
        return True


def build_flatten_flow(counts) -> FlattenFlow:
    return FlattenFlow(tuple(counts))


def flatten_bpd(flow: FlattenFlow, pmf: np.ndarray) -> float:
    """Factorized coding cost, in bits per dimension, after flattening.

    Pushes the joint PMF through the flow and sums the entropies of the
    per-coordinate output marginals.  The push is a bijection into the
    first coordinate, so this equals the joint entropy over dimension.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape != flow.counts:
        raise DomainError(f"pmf shape {pmf.shape} does not match counts {flow.counts}")
    grids = np.meshgrid(*[np.arange(c) for c in flow.counts], indexing="ij")
    xs = np.stack([g.reshape(-1) for g in grids], axis=-1)
    zs = flow.forward(xs)
    probs = pmf.reshape(-1)
    d = len(flow.counts)
    total_bits = 0.0
    for c in range(d):
        marg = np.zeros(flow.total)
        np.add.at(marg, zs[:, c], probs)
        nz = marg[marg > 0]
        total_bits += float(-(nz * np.log2(nz)).sum())
    return total_bits / d


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"IDFM"
_MODEL_VERSION = 1


def _serialize_body(model: FlowModel) -> bytes:
    chunks = [_MODEL_MAGIC, struct.pack("<H", _MODEL_VERSION)]
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    params = model.parameters()
    chunks.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", p.value.ndim))
        for dim in p.value.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(chunks)


def model_fingerprint(model: FlowModel) -> bytes:
    """32-byte digest over the config and every parameter value."""
    return hashlib.sha256(_serialize_body(model)).digest()


def save_model(model: FlowModel, path: str | Path) -> None:
    body = _serialize_body(model)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_model(path: str | Path) -> FlowModel:
    raw = Path(path).read_bytes()
    if len(raw) < 42 or raw[:4] != _MODEL_MAGIC:
        raise StreamFormatError("not a model container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise StreamCorruptionError("model container digest mismatch")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != _MODEL_VERSION:
        raise StreamFormatError(f"unsupported model version {version}")
    (cfg_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config = FlowConfig.from_dict(json.loads(body[off : off + cfg_len].decode("utf-8")))
    off += cfg_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        values[name] = arr.astype(np.float64)
    model = build_flow_model(config)
    params = model.parameters()
    names = {p.name for p in params}
    if names != set(values):
        raise StreamFormatError("parameter names do not match the architecture")
    for p in params:
        if p.value.shape != values[p.name].shape:
            raise StreamFormatError(f"shape mismatch for parameter {p.name!r}")
        p.value[...] = values[p.name]
    return model
