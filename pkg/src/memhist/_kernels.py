"""Integer inner loops behind the RNG streams and samplers.

Two implementations live here: numba ``@njit`` kernels and a numpy / plain
python fallback. They are bit-identical (integer arithmetic only, no
transcendental functions), so switching paths never changes a trajectory.

Set ``MEMH_NO_NUMBA=1`` to force the fallback. If numba is not importable the
fallback is used silently.
"""

from __future__ import annotations

import os

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


# --------------------------------------------------------------------------
# numpy / python fallback
# --------------------------------------------------------------------------


def _mix_py(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & _MASK
    z = ((z ^ (z >> 27)) * MIX2) & _MASK
    return z ^ (z >> 31)


def np_block(seed: int, start: int, count: int) -> np.ndarray:
    """Draws ``start+1 .. start+count`` of the SplitMix64 sequence for ``seed``."""
    k = np.arange(1, count + 1, dtype=np.uint64) + np.uint64(start & _MASK)
    z = np.uint64(seed & _MASK) + k * np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def np_bounded(seed: int, start: int, bound: int, count: int) -> tuple[np.ndarray, int]:
    """``count`` unbiased integers in ``[0, bound)``; returns (values, draws consumed)."""
    b = np.uint64(bound)
    threshold = np.uint64(((1 << 64) - bound) % bound)
    out = np.empty(count, dtype=np.int64)
    filled = 0
    used = 0
    while filled < count:
        need = count - filled
        raw = np_block(seed, start + used, need)
        ok = raw >= threshold
        if ok.all():
            out[filled:] = (raw % b).astype(np.int64)
            used += need
            filled = count
            break
        # rejections are rare; keep the sequential consumption order exact
        idx = np.flatnonzero(ok)
        take = idx[:need]
        out[filled:filled + len(take)] = (raw[take] % b).astype(np.int64)
        filled += len(take)
        used += need if len(take) < need else int(take[-1]) + 1
    return out, used


def py_shuffle(arr: np.ndarray, seed: int, start: int) -> tuple[np.ndarray, int]:
    out = np.array(arr, dtype=np.int64, copy=True)
    n = len(out)
    counter = start
    for i in range(n - 1, 0, -1):
        bound = i + 1
        threshold = ((1 << 64) - bound) % bound
        while True:
            counter += 1
            x = _mix_py((seed + counter * GOLDEN) & _MASK)
            if x >= threshold:
                break
        j = x % bound
        out[i], out[j] = out[j], out[i]
    return out, counter - start


def py_weighted(weights: np.ndarray, k: int, seed: int, start: int) -> tuple[np.ndarray, int]:
    w = np.array(weights, dtype=np.float64, copy=True)
    n = len(w)
    out = np.empty(k, dtype=np.int64)
    counter = start
    for d in range(k):
        total = 0.0
        for i in range(n):
            total += w[i]
        counter += 1
        x = _mix_py((seed + counter * GOLDEN) & _MASK)
        target = float(x >> 11) * _INV53 * total
        acc = 0.0
        pick = -1
        for i in range(n):
            if w[i] > 0.0:
                pick = i
                acc += w[i]
                if acc > target:
                    break
        out[d] = pick
        w[pick] = 0.0
    return out, counter - start


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

try:
    import numba as _nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

if HAVE_NUMBA:
    _G = np.uint64(GOLDEN)
    _M1 = np.uint64(MIX1)
    _M2 = np.uint64(MIX2)

    @_nb.njit(cache=True, inline="always")
    def _mix_nb(z):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))

    @_nb.njit(cache=True)
    def _nb_block(seed, start, count):
        out = np.empty(count, dtype=np.uint64)
        s = seed + start * _G
        for i in range(count):
            s += _G
            out[i] = _mix_nb(s)
        return out

    @_nb.njit(cache=True)
    def _nb_bounded(seed, start, bound, count):
        out = np.empty(count, dtype=np.int64)
        threshold = (np.uint64(0) - bound) % bound
        s = seed + start * _G
        used = 0
        for i in range(count):
            while True:
                s += _G
                used += 1
                x = _mix_nb(s)
                if x >= threshold:
                    break
            out[i] = np.int64(x % bound)
        return out, used

    @_nb.njit(cache=True)
    def _nb_shuffle(out, seed, start):
        n = out.shape[0]
        s = seed + start * _G
        used = 0
        for i in range(n - 1, 0, -1):
            bound = np.uint64(i + 1)
            threshold = (np.uint64(0) - bound) % bound
            while True:
                s += _G
                used += 1
                x = _mix_nb(s)
                if x >= threshold:
                    break
            j = np.int64(x % bound)
            tmp = out[i]
            out[i] = out[j]
            out[j] = tmp
        return used

    @_nb.njit(cache=True)
    def _nb_weighted(w, k, seed, start):
        n = w.shape[0]
        out = np.empty(k, dtype=np.int64)
        s = seed + start * _G
        for d in range(k):
            total = 0.0
            for i in range(n):
                total += w[i]
            s += _G
            x = _mix_nb(s)
            target = np.float64(x >> np.uint64(11)) * _INV53 * total
            acc = 0.0
            pick = -1
            for i in range(n):
                if w[i] > 0.0:
                    pick = i
                    acc += w[i]
                    if acc > target:
                        break
            out[d] = pick
            w[pick] = 0.0
        return out, k

    def nb_block(seed: int, start: int, count: int) -> np.ndarray:
        return _nb_block(np.uint64(seed & _MASK), np.uint64(start & _MASK), count)

    def nb_bounded(seed: int, start: int, bound: int, count: int) -> tuple[np.ndarray, int]:
        out, used = _nb_bounded(np.uint64(seed & _MASK), np.uint64(start & _MASK), np.uint64(bound), count)
        return out, int(used)

    def nb_shuffle(arr: np.ndarray, seed: int, start: int) -> tuple[np.ndarray, int]:
        out = np.array(arr, dtype=np.int64, copy=True)
        used = _nb_shuffle(out, np.uint64(seed & _MASK), np.uint64(start & _MASK))
        return out, int(used)

    def nb_weighted(weights: np.ndarray, k: int, seed: int, start: int) -> tuple[np.ndarray, int]:
        w = np.array(weights, dtype=np.float64, copy=True)
        out, used = _nb_weighted(w, k, np.uint64(seed & _MASK), np.uint64(start & _MASK))
        return out, int(used)


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("MEMH_NO_NUMBA", "") not in ("1", "true", "yes")


USE_NUMBA = numba_enabled()

if USE_NUMBA:
    block, bounded, shuffle, weighted = nb_block, nb_bounded, nb_shuffle, nb_weighted
else:
    block, bounded, shuffle, weighted = np_block, np_bounded, py_shuffle, py_weighted
