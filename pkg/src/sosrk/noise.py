"""Brownian increments, iterated-integral approximations and path memory.

All randomness flows through :class:`NoiseStream`, a counter-based stream
(Philox keyed by ``(seed, stream_id)``).  Draw number ``k`` of a stream is a
pure function of ``(seed, stream_id, k)``, so trajectories can be replayed
or run in parallel without coordinating generators.

Rejected steps never resample the Brownian path.  The increment drawn for a
rejected window is pushed onto a :class:`FutureNoiseStack` and later
subdivided with Brownian bridges, so every accepted step sees a sub-window
of one fixed path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError, StateError

_SQRT3 = np.sqrt(3.0)


class NoiseStream:
    """Deterministic stream of standard normals.

    Normals are produced in blocks of ``block`` values; block ``b`` comes from
    a Philox generator whose counter is offset by ``b`` in its highest word,
    so blocks never overlap and any draw index can be reached directly.
    """

    def __init__(self, seed: int, stream_id: int = 0, block: int = 4096):
        if block < 1:
            raise InputError("block must be positive")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.block = int(block)
        self._counter = 0
        self._cache_index = -1
        self._cache = None

    @property
    def counter(self) -> int:
        """Index of the next draw."""
        return self._counter

    def seek(self, counter: int) -> None:
        if counter < 0:
            raise InputError("counter must be non-negative")
        self._counter = int(counter)

    def spawn(self, stream_id: int) -> "NoiseStream":
        """Independent stream sharing the seed (one per trajectory)."""
        return NoiseStream(self.seed, stream_id, self.block)

    def _load(self, b: int) -> np.ndarray:
        if b != self._cache_index:
            bitgen = np.random.Philox(
                key=[self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF],
                counter=[0, 0, 0, b],
            )
            self._cache = np.random.Generator(bitgen).standard_normal(self.block)
            self._cache_index = b
        return self._cache

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n)
        filled = 0
        while filled < n:
            b, off = divmod(self._counter, self.block)
            take = min(n - filled, self.block - off)
            out[filled:filled + take] = self._load(b)[off:off + take]
            filled += take
            self._counter += take
        return out


@dataclass(frozen=True)
class GaussianPair:
    """Brownian increment ``dW`` and auxiliary increment ``dZ`` over ``h``.

    ``dW`` and ``dZ`` are independent N(0, h) draws (arrays, one entry per
    noise channel).
    """

    dW: np.ndarray
    dZ: np.ndarray
    h: float


@dataclass(frozen=True)
class NoiseBundle:
    """Iterated stochastic integrals over one step.

    ``i1`` is the Brownian increment, ``i11`` the double Ito integral,
    ``i111`` the triple Ito integral and ``i10`` the mixed time/noise integral.
    """

    i1: np.ndarray
    i11: np.ndarray
    i10: np.ndarray
    i111: np.ndarray
    h: float

    @classmethod
    def zero(cls, h: float, m: int = 1) -> "NoiseBundle":
        return iterated_integrals(GaussianPair(np.zeros(m), np.zeros(m), h))


def sample_pair(h: float, stream: NoiseStream, m: int = 1) -> GaussianPair:
    """Draw ``(dW, dZ)`` for ``m`` independent channels over a step ``h``."""
    if not h > 0:
        raise InputError(f"step size must be positive, got {h!r}")
    xi = stream.normals(2 * m)
    s = np.sqrt(h)
    return GaussianPair(s * xi[:m], s * xi[m:], float(h))


def iterated_integrals(p: GaussianPair) -> NoiseBundle:
    dW = np.asarray(p.dW, dtype=float)
    dZ = np.asarray(p.dZ, dtype=float)
    h = p.h
    return NoiseBundle(
        i1=dW,
        i11=0.5 * (dW * dW - h),
        i10=0.5 * h * (dW + dZ / _SQRT3),
        i111=(dW * dW * dW - 3.0 * h * dW) / 6.0,
        h=h,
    )


def bridge_split(p: GaussianPair, h_new: float, stream: NoiseStream):
    """Split ``p`` at ``h_new`` by sampling the Brownian bridge.

    Returns ``(left, right)`` with ``left.h == h_new``.  ``dW`` and ``dZ`` are
    bridged with independent normals; ``right`` is formed by subtraction so
    the two halves always add up to the parent increment.
    """
    h = p.h
    if not 0.0 < h_new < h:
        raise InputError(f"split point {h_new!r} outside (0, {h!r})")
    dW = np.asarray(p.dW, dtype=float)
    dZ = np.asarray(p.dZ, dtype=float)
    m = dW.size
    frac = h_new / h
    sd = np.sqrt(h_new * (h - h_new) / h)
    xi = stream.normals(2 * m)
    lw = frac * dW + sd * xi[:m].reshape(dW.shape)
    lz = frac * dZ + sd * xi[m:].reshape(dZ.shape)
    left = GaussianPair(lw, lz, float(h_new))
    right = GaussianPair(dW - lw, dZ - lz, float(h - h_new))
    return left, right


def _merge(pieces, h):
    dW = pieces[0].dW
    dZ = pieces[0].dZ
    for q in pieces[1:]:
        dW = dW + q.dW
        dZ = dZ + q.dZ
    return GaussianPair(dW, dZ, h)


class FutureNoiseStack:
    """Already-realized pieces of the Brownian path ahead of the current time.

    Segments are kept in time order with the nearest one on top.  When the
    stack runs dry, fresh increments are drawn from ``stream`` (if attached).

    Parameters
    ----------
    stream : NoiseStream, optional
        Source for bridge samples and for fresh increments past the stored
        window.
    m : int
        Number of noise channels.
    rtol : float
        Relative slack when deciding whether a stored segment exactly covers
        the requested window (avoids splitting off round-off slivers).  It is
        scaled by the larger of the step and the current time, since step
        lengths derived from differences of times carry round-off of order
        ``eps * |t|``.
    """

    def __init__(self, stream: NoiseStream | None = None, m: int = 1, rtol: float = 1e-12):
        self.stream = stream
        self.m = m
        self.rtol = rtol
        self._segments: list[GaussianPair] = []
        self._last: list[GaussianPair] = []

    def __len__(self):
        return len(self._segments)

    @property
    def covered(self) -> float:
        """Total future time stored."""
        return float(sum(s.h for s in self._segments))

    def push(self, pair: GaussianPair) -> None:
        """Place ``pair`` directly ahead of the current time."""
        if not pair.h > 0:
            raise InputError("segment length must be positive")
        self._segments.append(pair)

    def extend_future(self, pairs) -> None:
        """Append time-ordered segments after everything already stored."""
        for p in pairs:
            if not p.h > 0:
                raise InputError("segment length must be positive")
            self._segments.insert(0, p)

    def _bridge_stream(self) -> NoiseStream:
        if self.stream is None:
            raise StateError("splitting a stored segment needs a NoiseStream")
        return self.stream

    def pop_covering(self, h: float, t: float = 0.0) -> GaussianPair:
        """Remove and return the increment over the next ``h`` of time.

        ``t`` is the current time; it only sets the round-off slack.
        """
        if not h > 0:
            raise InputError(f"step size must be positive, got {h!r}")
        pieces = []
        remaining = h
        slack = self.rtol * max(h, abs(float(t)))
        while remaining > slack:
            if not self._segments:
                if self.stream is None:
                    self._segments.extend(reversed(pieces))
                    raise StateError(
                        f"requested {h!r} but only {h - remaining!r} of path is stored")
                pieces.append(sample_pair(remaining, self.stream, self.m))
                remaining = 0.0
                break
            top = self._segments.pop()
            if top.h <= remaining + slack:
                pieces.append(top)
                remaining -= top.h
            else:
                left, right = bridge_split(top, remaining, self._bridge_stream())
                self._segments.append(right)
                pieces.append(left)
                remaining = 0.0
        self._last = pieces
        return _merge(pieces, h)

    def unpop(self) -> None:
        """Return the pieces of the last :meth:`pop_covering` to the stack.

        Used on step rejection: the realized window is kept piecewise so a
        later smaller step reuses exactly the same path.
        """
        for p in reversed(self._last):
            self._segments.append(p)
        self._last = []


def dump_path_csv(rows, path) -> None:
    """Write ``(t, dW, dZ)`` rows for debugging a noise path."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "dW", "dZ"])
        for t, dW, dZ in rows:
            w.writerow([repr(float(t)),
                        " ".join(repr(float(v)) for v in np.ravel(dW)),
                        " ".join(repr(float(v)) for v in np.ravel(dZ))])
