"""Probability models over lattice codes and their continuous counterparts.

Everything here works in natural log; callers convert to bits where they
report entropy rates.  The discretized logistic assigns each lattice point
the CDF mass of its bin, with a density fallback when the CDF difference
underflows and tail folding at the alphabet edges so that a finite table
sums to one exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter, value_of
from .errors import DomainError, ParameterError
from .nn import DenseNet

LOG2 = math.log(2.0)

# CDF differences below this switch to the density-times-width fallback.
_DELTA_FLOOR = 1e-10
# Clamp inside the log so the selected-away branch never produces -inf.
_PMF_FLOOR = 1e-12
# Minimum log-scale, measured in lattice bins: s may not shrink below
# exp(-7) of one bin, which keeps every bin probability finite.
_MIN_LOG_S_BINS = -7.0


def min_log_s(bits: int) -> float:
    """Lower clamp for log-scale in real units on a ``2**-bits`` lattice."""
    return -bits * LOG2 + _MIN_LOG_S_BINS


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -ad.softplus_value(-x)


def continuous_logistic_log_density(mu, s, x):
    """Log density of a logistic distribution, elementwise.

    Raises ParameterError when any scale is not strictly positive.
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ParameterError("logistic scale must be positive")
    z = (np.asarray(x, dtype=np.float64) - mu) / s
    return -z - 2.0 * ad.softplus_value(-z) - np.log(s)


def dl_log_pmf_value(
    codes: np.ndarray,
    mu,
    log_s,
    bits: int,
    alphabet: tuple[int, int] | None = None,
) -> np.ndarray:
    """Log PMF of a discretized logistic at integer lattice codes.

    ``codes`` broadcasts against ``mu`` and ``log_s``.  With ``alphabet``
    given as ``(lo, hi)`` (half-open, in codes), the lowest bin absorbs the
    left tail and the highest bin the right tail, and codes outside the
    range raise DomainError.
    """
    codes = np.asarray(codes)
    mu = np.asarray(mu, dtype=np.float64)
    log_s = np.maximum(np.asarray(log_s, dtype=np.float64), min_log_s(bits))
    width = 2.0**-bits
    half = width / 2.0
    v = codes.astype(np.float64) * width
    s_inv = np.exp(-log_s)
    a = (v + half - mu) * s_inv
    b = (v - half - mu) * s_inv
    delta = ad.sigmoid_value(a) - ad.sigmoid_value(b)
    z = (v - mu) * s_inv
    log_pdf = -z - (2.0 * ad.softplus_value(-z) + log_s)
    out = np.where(
        delta > _DELTA_FLOOR,
        np.log(np.maximum(delta, _PMF_FLOOR)),
        log_pdf + math.log(width),
    )
    if alphabet is not None:
        lo, hi = alphabet
        if np.any(codes < lo) or np.any(codes >= hi):
            raise DomainError(f"code outside alphabet [{lo}, {hi})")
        out = np.where(codes == lo, _log_sigmoid(a), out)
        out = np.where(codes == hi - 1, _log_sigmoid(-b), out)
    return out


def dl_log_pmf_node(v, mu, log_s, bits: int) -> Node:
    """Tape version of the discretized logistic log PMF.

    ``v`` holds real-valued positions (codes times bin width); soft or
    identity rounding puts them off the lattice during training, so no
    alphabet folding applies here.
    """
    log_s = ad.clamp_min(log_s, min_log_s(bits))
    width = 2.0**-bits
    half = width / 2.0
    s_inv = ad.exp(ad.neg(log_s))
    a = ad.mul(ad.sub(ad.add(v, half), mu), s_inv)
    b = ad.mul(ad.sub(ad.sub(v, half), mu), s_inv)
    delta = ad.sub(ad.sigmoid(a), ad.sigmoid(b))
    z = ad.mul(ad.sub(v, mu), s_inv)
    log_pdf = ad.sub(
        ad.neg(z), ad.add(ad.mul(2.0, ad.softplus(ad.neg(z))), log_s)
    )
    mid = ad.log(ad.clamp_min(delta, _PMF_FLOOR))
    fallback = ad.add(log_pdf, math.log(width))
    return ad.where_mask(value_of(delta) > _DELTA_FLOOR, mid, fallback)


def logistic_log_density_node(v, mu, log_s) -> Node:
    """Tape version of the continuous logistic log density."""
    s_inv = ad.exp(ad.neg(log_s))
    z = ad.mul(ad.sub(v, mu), s_inv)
    return ad.sub(ad.neg(z), ad.add(ad.mul(2.0, ad.softplus(ad.neg(z))), log_s))


@dataclass(frozen=True)
class DiscretizedLogistic:
    """A single discretized logistic: location, log-scale, bin width."""

    mu: float
    log_s: float
    bin_width: float

    def __post_init__(self) -> None:
        bits = -math.log2(self.bin_width)
        if abs(bits - round(bits)) > 1e-9 or round(bits) < 1:
            raise ParameterError("bin_width must be 2**-bits for bits >= 1")

    @property
    def bits(self) -> int:
        return round(-math.log2(self.bin_width))


def dl_log_pmf(d: DiscretizedLogistic, k, alphabet: tuple[int, int] | None = None):
    """Log PMF of ``d`` at lattice code ``k`` (scalar or array)."""
    return dl_log_pmf_value(np.asarray(k), d.mu, d.log_s, d.bits, alphabet)


@dataclass(frozen=True)
class MixtureDL:
    """A finite mixture of discretized logistics on a shared lattice."""

    components: tuple[DiscretizedLogistic, ...]
    logits: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.components) != len(self.logits) or not self.components:
            raise ParameterError("mixture needs one logit per component")
        widths = {c.bin_width for c in self.components}
        if len(widths) != 1:
            raise ParameterError("mixture components must share one lattice")


def mixture_log_pmf(m: MixtureDL, k, alphabet: tuple[int, int] | None = None):
    """Log PMF of mixture ``m`` at lattice code ``k``."""
    logits = np.asarray(m.logits, dtype=np.float64)
    log_w = logits - ad.logsumexp_value(logits, axis=-1)
    per = np.stack(
        [dl_log_pmf(c, k, alphabet) + lw for c, lw in zip(m.components, log_w)],
        axis=-1,
    )
    return ad.logsumexp_value(per, axis=-1)


def dl_sample(d: DiscretizedLogistic, rng: np.random.Generator, shape=()) -> np.ndarray:
    """Draw lattice codes from ``d`` by inverse CDF then nearest-bin rounding.

    Rounding a continuous logistic draw to the nearest lattice point is an
    exact sampler for the discretized distribution, because each bin's mass
    is exactly the CDF measure of the reals that round into it.
    """
    u = rng.uniform(size=shape)
    s = math.exp(d.log_s)
    x = d.mu + s * (np.log(u) - np.log1p(-u))
    return ad.round_half_up(x / d.bin_width).astype(np.int64)


def _mixture_pmf_rows(
    mu: np.ndarray,
    log_s: np.ndarray,
    log_w: np.ndarray | None,
    bits: int,
    alphabet: tuple[int, int],
) -> np.ndarray:
    """Folded PMF rows over a full alphabet, one row per leading index.

    ``mu``/``log_s`` have shape (..., K); ``log_w`` is the matching
    log-weight array or None for a bare logistic (K absent).
    """
    lo, hi = alphabet
    codes = np.arange(lo, hi)
    if log_w is None:
        logp = dl_log_pmf_value(
            codes, mu[..., None], log_s[..., None], bits, alphabet
        )
        return np.exp(logp)
    logp = dl_log_pmf_value(
        codes[:, None],
        mu[..., None, :],
        log_s[..., None, :],
        bits,
        alphabet,
    )
    return np.exp(ad.logsumexp_value(logp + log_w[..., None, :], axis=-1))


class MixtureDLBank:
    """Per-channel banks of discretized-logistic mixtures.

    Each channel owns ``components`` locations, log-scales and weight
    logits, so the factorized prior over a (B, H, W, C) tensor shares one
    mixture across all spatial positions of a channel.  Serves as the flow
    head prior; ``y`` arguments exist for interface parity with the
    conditional prior and are ignored.
    """

    def __init__(
        self,
        channels: int,
        bits: int,
        name: str,
        components: int = 5,
        value_range: tuple[float, float] = (0.0, 1.0),
    ) -> None:
        if channels < 1 or components < 1:
            raise ParameterError("channels and components must be positive")
        self.channels = channels
        self.components = components
        self.bits = bits
        lo, hi = value_range
        span = hi - lo
        # Locations start on lattice points and scales start narrow (a
        # sixteenth of the span) so the prior can tighten onto the symbol
        # grid within the first few hundred updates; a wide init leaves the
        # coupling nets time to drift into harmful shift regimes first.
        grid = 2.0**bits
        spread = np.linspace(lo + 0.1 * span, hi - 0.1 * span, components)
        spread = np.round(spread * grid) / grid
        self.mu = Parameter(
            np.tile(spread, (channels, 1)), name=f"{name}.mu"
        )
        self.log_s = Parameter(
            np.full((channels, components), math.log(max(span, 1e-3) / 16.0)),
            name=f"{name}.log_s",
        )
        self.logits = Parameter(
            np.zeros((channels, components)), name=f"{name}.logits"
        )

    def parameters(self) -> list[Parameter]:
        return [self.mu, self.log_s, self.logits]

    def networks(self) -> list:
        return []

    def _log_weights_node(self) -> Node:
        lse = ad.logsumexp(self.logits, axis=-1)
        return ad.sub(self.logits, ad.expand_dims(lse, -1))

    def _log_weights_value(self) -> np.ndarray:
        logits = self.logits.value
        return logits - ad.logsumexp_value(logits, axis=-1)[..., None]

    def log_pmf_node(self, v, y=None) -> Node:
        """Per-element log PMF for real positions ``v`` of shape (..., C)."""
        vx = ad.expand_dims(v, -1) if isinstance(v, Node) else value_of(v)[..., None]
        per = dl_log_pmf_node(vx, self.mu, self.log_s, self.bits)
        return ad.logsumexp(ad.add(per, self._log_weights_node()), axis=-1)

    def log_pmf_value(self, codes: np.ndarray, y=None) -> np.ndarray:
        per = dl_log_pmf_value(
            codes[..., None], self.mu.value, self.log_s.value, self.bits
        )
        return ad.logsumexp_value(per + self._log_weights_value(), axis=-1)

    def log_density_node(self, v, y=None) -> Node:
        """Continuous counterpart: mixture of logistic densities."""
        vx = ad.expand_dims(v, -1) if isinstance(v, Node) else value_of(v)[..., None]
        per = logistic_log_density_node(vx, self.mu, self.log_s)
        return ad.logsumexp(ad.add(per, self._log_weights_node()), axis=-1)

    def pmf_matrix(
        self, y, z_shape: tuple[int, ...], alphabet: tuple[int, int], sl: slice
    ) -> np.ndarray:
        """Folded PMF rows for a flat slice of elements of a (..., C) tensor."""
        rows = _mixture_pmf_rows(
            self.mu.value,
            np.maximum(self.log_s.value, min_log_s(self.bits)),
            self._log_weights_value(),
            self.bits,
            alphabet,
        )
        channel_of = np.arange(int(np.prod(z_shape)))[sl] % z_shape[-1]
        return rows[channel_of]

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...], y=None) -> np.ndarray:
        """Draw lattice codes of the given (..., C) shape."""
        if shape[-1] != self.channels:
            raise DomainError("trailing dimension must match channel count")
        weights = np.exp(self._log_weights_value())
        flat = int(np.prod(shape[:-1]))
        u = rng.uniform(size=(flat, self.channels))
        cum = np.cumsum(weights, axis=-1)
        comp = (u[..., None] > cum[None]).sum(axis=-1)
        idx = np.arange(self.channels)
        mu = self.mu.value[idx, comp]
        s = np.exp(np.maximum(self.log_s.value, min_log_s(self.bits)))[idx, comp]
        u2 = rng.uniform(size=mu.shape)
        x = mu + s * (np.log(u2) - np.log1p(-u2))
        codes = ad.round_half_up(x * 2.0**self.bits).astype(np.int64)
        return codes.reshape(shape)


class ConditionalDLPrior:
    """Discretized logistic whose parameters come from a conditioning net.

    A dense net maps the carried-on half ``y`` to raw location and
    log-scale fields; two scalar gates, both starting at zero, multiply
    those fields so an untrained prior is exactly DL(0, 1) everywhere and
    the conditioning grows in from nothing.
    """

    def __init__(
        self,
        cond_channels: int,
        z_channels: int,
        bits: int,
        name: str,
        variant: str = "toy",
        depth: int = 1,
        hidden: int = 32,
        rezero: bool = True,
    ) -> None:
        self.z_channels = z_channels
        self.bits = bits
        self.rezero = rezero
        self.conditioner = DenseNet(
            variant, cond_channels, 2 * z_channels, depth, hidden, f"{name}.cond"
        )
        self.gamma = Parameter(np.array(0.0), name=f"{name}.gamma") if rezero else None
        self.delta = Parameter(np.array(0.0), name=f"{name}.delta") if rezero else None

    def parameters(self) -> list[Parameter]:
        out = self.conditioner.parameters()
        if self.rezero:
            out = out + [self.gamma, self.delta]
        return out

    def networks(self) -> list:
        return [self.conditioner]

    def _fields_node(self, y) -> tuple[Node, Node]:
        out = self.conditioner.forward(y)
        nu = ad.narrow(out, 0, self.z_channels, axis=-1)
        raw = ad.narrow(out, self.z_channels, self.z_channels, axis=-1)
        if self.rezero:
            return ad.mul(self.gamma, nu), ad.mul(self.delta, raw)
        return nu, raw

    def _fields_value(self, y_reals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.conditioner.forward_value(y_reals)
        nu = out[..., : self.z_channels]
        raw = out[..., self.z_channels :]
        if self.rezero:
            return self.gamma.value * nu, self.delta.value * raw
        return nu, raw

    def log_pmf_node(self, v, y) -> Node:
        mu, log_s = self._fields_node(y)
        return dl_log_pmf_node(v, mu, log_s, self.bits)

    def log_pmf_value(self, codes: np.ndarray, y_reals: np.ndarray) -> np.ndarray:
        mu, log_s = self._fields_value(y_reals)
        return dl_log_pmf_value(codes, mu, log_s, self.bits)

    def log_density_node(self, v, y) -> Node:
        mu, log_s = self._fields_node(y)
        return logistic_log_density_node(v, mu, ad.clamp_min(log_s, min_log_s(self.bits)))

    def pmf_matrix(
        self, y_reals: np.ndarray, z_shape: tuple[int, ...], alphabet: tuple[int, int], sl: slice
    ) -> np.ndarray:
        mu, log_s = self._fields_value(y_reals)
        mu = mu.reshape(-1)[sl]
        log_s = np.maximum(log_s.reshape(-1)[sl], min_log_s(self.bits))
        return _mixture_pmf_rows(mu, log_s, None, self.bits, alphabet)

    def sample(
        self, rng: np.random.Generator, shape: tuple[int, ...], y_reals: np.ndarray
    ) -> np.ndarray:
        mu, log_s = self._fields_value(y_reals)
        s = np.exp(np.maximum(log_s, min_log_s(self.bits)))
        u = rng.uniform(size=mu.shape)
        x = mu + s * (np.log(u) - np.log1p(-u))
        return ad.round_half_up(x * 2.0**self.bits).astype(np.int64)


class UniformLatticePrior:
    """Uniform distribution over the data alphabet [0, 2**bits).

    Parameter-free stand-in prior: an identity flow under it codes any
    image at exactly ``bits`` per dimension, which anchors codec tests.
    """

    def __init__(self, bits: int) -> None:
        self.bits = bits

    def parameters(self) -> list[Parameter]:
        return []

    def networks(self) -> list:
        return []

    def log_pmf_node(self, v, y=None) -> Node:
        shape = value_of(v).shape
        return Node(np.full(shape, -self.bits * LOG2))

    def log_pmf_value(self, codes: np.ndarray, y=None) -> np.ndarray:
        if np.any(codes < 0) or np.any(codes >= 2**self.bits):
            raise DomainError("code outside the data alphabet")
        return np.full(codes.shape, -self.bits * LOG2)

    def log_density_node(self, v, y=None) -> Node:
        return self.log_pmf_node(v) if isinstance(v, Node) else Node(
            np.full(value_of(v).shape, -self.bits * LOG2)
        )

    def pmf_matrix(
        self, y, z_shape: tuple[int, ...], alphabet: tuple[int, int], sl: slice
    ) -> np.ndarray:
        lo, hi = alphabet
        count = int(np.prod(z_shape))
        rows = np.zeros((len(range(*sl.indices(count))), hi - lo))
        codes = np.arange(lo, hi)
        inside = (codes >= 0) & (codes < 2**self.bits)
        rows[:, inside] = 2.0**-self.bits
        return rows

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...], y=None) -> np.ndarray:
        return rng.integers(0, 2**self.bits, size=shape, dtype=np.int64)
