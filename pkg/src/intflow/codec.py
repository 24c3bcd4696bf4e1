"""Lossless image coding: drive the entropy coder through the flow.

Compression runs the codes path forward, then codes every latent element
against its model PMF, quantized on the fly.  Decompression decodes the
top level first, inverts one level, and uses the reconstructed carry to
derive the tables for the next latent down; both sides walk the identical
arithmetic path, so their tables match bit for bit.
"""

from __future__ import annotations

import numpy as np

from .errors import CapacityError, StreamCorruptionError, StreamFormatError
from .flows import FlowModel, latent_alphabet, model_fingerprint
from .grid import GridTensor, concat_channels
from .rans import (
    CompressedStream,
    EncodedBlock,
    RansDecoder,
    RansEncoder,
    coding_tables_from_rows,
    pack_stream,
    unpack_stream,
)

# Elements whose tables are materialized together; decode results do not
# depend on this because each table row is quantized independently.
_CHUNK = 4096

_ESCAPE_BITS = 32


def _chunked_tables(prior, cond_reals, shape, alphabet):
    """Yield (slice, freqs-with-escape, cumulative) for a part's elements."""
    count = int(np.prod(shape))
    lo, _hi = alphabet
    for begin in range(0, count, _CHUNK):
        sl = slice(begin, min(begin + _CHUNK, count))
        rows = prior.pmf_matrix(cond_reals, shape, alphabet, sl)
        freqs = coding_tables_from_rows(rows, lo)
        cum = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.int64)
        np.cumsum(freqs, axis=-1, out=cum[:, 1:])
        yield sl, freqs, cum


def compress(model: FlowModel, x: GridTensor) -> bytes:
    """Encode a batch of images into one self-describing stream."""
    parts = model.forward_codes(x)
    alphabet = latent_alphabet(model.bits)
    lo, _hi = alphabet
    spans: list[tuple[int, int]] = []
    escapes: list[int] = []
    for part, prior in zip(reversed(parts), reversed(model.priors)):
        codes = part.codes.codes.reshape(-1)
        if np.any(np.abs(codes) >= 2**31):
            raise CapacityError("latent code overflows the escape width")
        cond = None if part.cond is None else part.cond.reals()
        shape = part.codes.shape
        n_sym = alphabet[1] - alphabet[0]
        for sl, freqs, cum in _chunked_tables(prior, cond, shape, alphabet):
            for row, value in enumerate(codes[sl].tolist()):
                index = value - lo
                if not 0 <= index < n_sym:
                    escapes.append(value)
                    index = n_sym
                spans.append((int(cum[row, index]), int(freqs[row, index])))
    enc = RansEncoder()
    for start, freq in reversed(spans):
        enc.push(start, freq)
    stream = CompressedStream(
        model_fingerprint(model),
        x.shape,
        model.bits,
        tuple(alphabet for _ in model.priors),
        EncodedBlock(enc.finish(), tuple(escapes)),
    )
    return pack_stream(stream)


def _decode_part(dec, escapes, prior, cond_reals, shape, alphabet) -> np.ndarray:
    lo, hi = alphabet
    n_sym = hi - lo
    out = np.empty(int(np.prod(shape)), dtype=np.int64)
    for sl, freqs, cum in _chunked_tables(prior, cond_reals, shape, alphabet):
        for row in range(freqs.shape[0]):
            slot = dec.slot()
            index = int(np.searchsorted(cum[row], slot, side="right")) - 1
            dec.pop(int(cum[row, index]), int(freqs[row, index]))
            if index == n_sym:
                try:
                    out[sl.start + row] = next(escapes)
                except StopIteration:
                    raise StreamCorruptionError("escape section exhausted") from None
            else:
                out[sl.start + row] = index + lo
    return out.reshape(shape)


def decompress(model: FlowModel, raw: bytes) -> GridTensor:
    """Exact inverse of :func:`compress` under the same model."""
    stream = unpack_stream(raw)
    if stream.model_hash != model_fingerprint(model):
        raise StreamFormatError("stream was written by a different model")
    cfg = model.config
    batch, height, width, channels = stream.shape
    if (height, width, channels) != (cfg.height, cfg.width, cfg.channels):
        raise StreamFormatError(
            f"stream shape {stream.shape} does not match the model"
        )
    if stream.bits != model.bits:
        raise StreamFormatError("stream bit depth does not match the model")
    expected = tuple(latent_alphabet(model.bits) for _ in model.priors)
    if stream.alphabets != expected:
        raise StreamFormatError("stream alphabets do not match the model")

    part_shapes = []
    c, h, w = channels, height, width
    for i, level in enumerate(model.levels):
        f = level.s2d_factor
        c, h, w = c * f * f, h // f, w // f
        if i == len(model.levels) - 1:
            part_shapes.append((batch, h, w, c))
        else:
            part_shapes.append((batch, h, w, c // 2))
            c //= 2

    dec = RansDecoder(stream.block.payload)
    escapes = iter(stream.block.escapes)
    alphabet = latent_alphabet(model.bits)
    last = len(model.levels) - 1
    t: GridTensor | None = None
    for i in range(last, -1, -1):
        if i == last:
            codes = _decode_part(
                dec, escapes, model.priors[i], None, part_shapes[i], alphabet
            )
            t = GridTensor(codes, model.bits)
        else:
            codes = _decode_part(
                dec, escapes, model.priors[i], t.reals(), part_shapes[i], alphabet
            )
            t = concat_channels(GridTensor(codes, model.bits), t)
        t = model.invert_level(model.levels[i], t)
    dec.assert_final()
    if next(escapes, None) is not None:
        raise StreamCorruptionError("unread entries in the escape section")
    return t


def stream_bpd(raw: bytes) -> float:
    """Coded bits per dimension: payload plus escape entries, header excluded."""
    stream = unpack_stream(raw)
    dims = int(np.prod(stream.shape))
    bits = 8 * len(stream.block.payload) + _ESCAPE_BITS * len(stream.block.escapes)
    return bits / dims
