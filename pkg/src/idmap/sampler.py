"""Deterministic identity-index sampling and the no-reuse identity registry.

The pseudo-random core is a permuted congruential generator with 128-bit
state and 64-bit XSL-RR output. All constants are fixed here so the
index -> vector mapping is a stable, documented function of this package
alone:

* state update: ``s' = s * MULT + inc  (mod 2**128)``, with
  ``MULT = 0x2360ed051fc65da44385df649fccf645``;
* output: ``rotr64(hi64(s) ^ lo64(s), hi64(s) >> 58)``, emitted from the
  current state, after which the state advances;
* seeding: the 64-bit index is expanded through four successive
  splitmix64 outputs ``w0..w3``; ``initstate = w0:w1``,
  ``initseq = w2:w3``, ``inc = (initseq << 1) | 1``; the state is warmed
  up as ``step(); state += initstate; step()``.

Uniform doubles take the top 53 bits: ``((raw >> 11) + 0.5) * 2**-53``,
strictly inside (0, 1). Gaussian draws apply a rational approximation of
the inverse normal CDF (Acklam's coefficients, max relative error below
1.2e-9) to that uniform; only its tail branches touch libm (log), the
central branch is pure rational arithmetic.

Batches evaluate the recurrence in closed form,
``s_k = MULT**k * s_0 + (sum_{j<k} MULT**j) * inc``, with precomputed
power tables, so sampling one index or one million indices runs through
the identical arithmetic.
"""

from __future__ import annotations

import hashlib
import io
import os
import secrets
import struct
from dataclasses import dataclass

import numpy as np

from .core import mvn_rows
from .errors import (
    CapacityExhausted,
    ConfigError,
    FormatError,
    RangeError,
    StorageError,
)

try:
    import fcntl
except ImportError:  # non-POSIX: advisory locking degrades to no-op
    fcntl = None

_M64 = 0xFFFFFFFFFFFFFFFF
_M128 = (1 << 128) - 1

PCG_MULT = 0x2360ED051FC65DA44385DF649FCCF645
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MIX1 = 0xBF58476D1CE4E5B9
SPLITMIX_MIX2 = 0x94D049BB133111EB

DISTRIBUTION_NORMAL = "normal"
DISTRIBUTION_UNIFORM = "uniform"

_U64 = np.uint64
_C32 = _U64(0xFFFFFFFF)


def _u64c(x):
    return _U64(x & _M64)


# ---------------------------------------------------------------------------
# 64/128-bit limb arithmetic on uint64 arrays
# ---------------------------------------------------------------------------

def _mulhi64(a, b):
    """High 64 bits of the 128-bit product of two uint64 arrays."""
    a_lo = a & _C32
    a_hi = a >> _U64(32)
    b_lo = b & _C32
    b_hi = b >> _U64(32)
    t = a_lo * b_lo
    k = t >> _U64(32)
    t = a_hi * b_lo + k
    w1 = t & _C32
    w2 = t >> _U64(32)
    t = a_lo * b_hi + w1
    k = t >> _U64(32)
    return a_hi * b_hi + w2 + k


def _mul128(a_hi, a_lo, b_hi, b_lo):
    """(a * b) mod 2**128 on (hi, lo) uint64 limb pairs; broadcasts."""
    lo = a_lo * b_lo
    carry = _mulhi64(a_lo, b_lo)
    hi = a_hi * b_lo + a_lo * b_hi + carry
    return hi, lo


def _add128(a_hi, a_lo, b_hi, b_lo):
    lo = a_lo + b_lo
    carry = (lo < a_lo).astype(np.uint64)
    return a_hi + b_hi + carry, lo


def _splitmix64(x):
    z = (x ^ (x >> _U64(30))) * _U64(SPLITMIX_MIX1)
    z = (z ^ (z >> _U64(27))) * _U64(SPLITMIX_MIX2)
    return z ^ (z >> _U64(31))


def _splitmix64_int(x: int) -> int:
    z = x & _M64
    z = ((z ^ (z >> 30)) * SPLITMIX_MIX1) & _M64
    z = ((z ^ (z >> 27)) * SPLITMIX_MIX2) & _M64
    return z ^ (z >> 31)


def derive_seed(*parts) -> int:
    """Fold integers/labels into one 64-bit sub-stream seed (documented rule)."""
    acc = SPLITMIX_GAMMA
    for p in parts:
        if isinstance(p, str):
            p = int.from_bytes(hashlib.sha256(p.encode("utf-8")).digest()[:8], "little")
        acc = (acc + int(p)) & _M64
        acc = _splitmix64_int((acc + SPLITMIX_GAMMA) & _M64)
    return acc


# ---------------------------------------------------------------------------
# Jump-ahead power tables: MULT**k and sum_{j<k} MULT**j, k = 0..n
# ---------------------------------------------------------------------------

class _PowTable:
    def __init__(self):
        self._mk = [1]
        self._sk = [0]

    def grow(self, n):
        while len(self._mk) <= n:
            self._sk.append((self._sk[-1] + self._mk[-1]) & _M128)
            self._mk.append((self._mk[-1] * PCG_MULT) & _M128)

    def arrays(self, n):
        """(mk_hi, mk_lo, sk_hi, sk_lo) uint64 arrays for k = 0..n-1."""
        self.grow(n)
        mk = self._mk[:n]
        sk = self._sk[:n]
        mk_hi = np.array([v >> 64 for v in mk], dtype=np.uint64)
        mk_lo = np.array([v & _M64 for v in mk], dtype=np.uint64)
        sk_hi = np.array([v >> 64 for v in sk], dtype=np.uint64)
        sk_lo = np.array([v & _M64 for v in sk], dtype=np.uint64)
        return mk_hi, mk_lo, sk_hi, sk_lo

    def scalar(self, n):
        """(MULT**n, sum_{j<n} MULT**j) as Python ints."""
        self.grow(n)
        return self._mk[n], self._sk[n]


_POWS = _PowTable()


def _seed_state(indices):
    """Expand uint64 indices into warmed-up (state_hi, state_lo, inc_hi, inc_lo)."""
    idx = np.asarray(indices, dtype=np.uint64)
    words = []
    x = idx.copy()
    for _ in range(4):
        x = x + _U64(SPLITMIX_GAMMA)
        words.append(_splitmix64(x))
    w0, w1, w2, w3 = words
    inc_hi = (w2 << _U64(1)) | (w3 >> _U64(63))
    inc_lo = (w3 << _U64(1)) | _U64(1)
    # step from zero state: s = inc; add initstate; step again
    s_hi, s_lo = _add128(inc_hi, inc_lo, w0, w1)
    mult_hi = _u64c(PCG_MULT >> 64)
    mult_lo = _u64c(PCG_MULT)
    s_hi, s_lo = _mul128(s_hi, s_lo, mult_hi, mult_lo)
    s_hi, s_lo = _add128(s_hi, s_lo, inc_hi, inc_lo)
    return s_hi, s_lo, inc_hi, inc_lo


def _xsl_rr(hi, lo):
    xored = hi ^ lo
    rot = hi >> _U64(58)
    return (xored >> rot) | (xored << ((_U64(64) - rot) & _U64(63)))


def _raw_from_state(s_hi, s_lo, inc_hi, inc_lo, n_draws):
    """Draws k = 0..n_draws-1 for each seeded lane; shape (lanes, n_draws)."""
    mk_hi, mk_lo, sk_hi, sk_lo = _POWS.arrays(n_draws)
    s_hi = s_hi[:, None]
    s_lo = s_lo[:, None]
    st_hi, st_lo = _mul128(mk_hi[None, :], mk_lo[None, :], s_hi, s_lo)
    i_hi, i_lo = _mul128(sk_hi[None, :], sk_lo[None, :], inc_hi[:, None], inc_lo[:, None])
    st_hi, st_lo = _add128(st_hi, st_lo, i_hi, i_lo)
    return _xsl_rr(st_hi, st_lo)


_LANE_CHUNK = 4096


def raw_draws(indices, n_draws):
    """Raw 64-bit outputs of the generator for each index; shape (n, n_draws)."""
    idx = np.atleast_1d(np.asarray(indices, dtype=np.uint64))
    out = np.empty((idx.shape[0], n_draws), dtype=np.uint64)
    for start in range(0, idx.shape[0], _LANE_CHUNK):
        lanes = idx[start:start + _LANE_CHUNK]
        s_hi, s_lo, inc_hi, inc_lo = _seed_state(lanes)
        out[start:start + _LANE_CHUNK] = _raw_from_state(s_hi, s_lo, inc_hi, inc_lo, n_draws)
    return out


# ---------------------------------------------------------------------------
# Raw bits -> distributions
# ---------------------------------------------------------------------------

_TWO_NEG53 = 2.0 ** -53

# Acklam inverse normal CDF coefficients.
_ACK_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACK_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_ACK_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACK_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)
_ACK_P_LOW = 0.02425


def _poly(coeffs, x):
    acc = np.full_like(x, coeffs[0])
    for c in coeffs[1:]:
        acc = acc * x + c
    return acc


def inverse_normal_cdf(p):
    """Rational approximation of the standard normal quantile function."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise RangeError("quantile argument must lie strictly inside (0, 1)")
    x = np.empty_like(p)
    lo = p < _ACK_P_LOW
    hi = p > 1.0 - _ACK_P_LOW
    mid = ~(lo | hi)
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        x[mid] = q * _poly(_ACK_A, r) / (_poly(_ACK_B, r) * r + 1.0)
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        x[lo] = _poly(_ACK_C, q) / (_poly(_ACK_D, q) * q + 1.0)
    if np.any(hi):
        q = np.sqrt(-2.0 * np.log(1.0 - p[hi]))
        x[hi] = -_poly(_ACK_C, q) / (_poly(_ACK_D, q) * q + 1.0)
    return x


def _uniform01(raw):
    """Strictly interior uniform doubles from raw 64-bit words."""
    return ((raw >> _U64(11)).astype(np.float64) + 0.5) * _TWO_NEG53


# ---------------------------------------------------------------------------
# Sampler configuration and the index -> identity-vector map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    """Identity-vector sampler parameters.

    ``distribution`` selects the per-dimension law before normalization:
    ``"normal"`` (standard Gaussian) or ``"uniform"`` (uniform on [-1, 1]).
    """

    distribution: str = DISTRIBUTION_NORMAL
    dim: int = 512

    def __post_init__(self):
        if self.distribution not in (DISTRIBUTION_NORMAL, DISTRIBUTION_UNIFORM):
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if self.dim < 2:
            raise ConfigError("identity vectors need at least 2 dimensions")

    def content_key(self) -> str:
        return (
            f"pcg128-xslrr|mult={PCG_MULT:#x}|seed=splitmix64x4"
            f"|u53|acklam|dist={self.distribution}|dim={self.dim}|mvn=population"
        )

    def content_hash(self) -> str:
        return hashlib.sha256(self.content_key().encode("ascii")).hexdigest()

    def to_dict(self) -> dict:
        return {"distribution": self.distribution, "dim": self.dim}

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        return cls(distribution=d["distribution"], dim=int(d["dim"]))


def sample_idv_batch(indices, cfg: SamplerConfig):
    """Identity vectors for a batch of indices; rows are MVN-normalized."""
    raw = raw_draws(indices, cfg.dim)
    u = _uniform01(raw)
    if cfg.distribution == DISTRIBUTION_NORMAL:
        values = inverse_normal_cdf(u)
    else:
        values = 2.0 * u - 1.0
    return mvn_rows(values)


def sample_idv(index, cfg: SamplerConfig):
    """Identity vector for one index: a pure function of (index, cfg)."""
    if not 0 <= int(index) < 2 ** 64:
        raise RangeError("identity index must fit in an unsigned 64-bit integer")
    return sample_idv_batch(np.array([int(index)], dtype=np.uint64), cfg)[0]


def sample_raw_batch(indices, cfg: SamplerConfig):
    """Pre-normalization draws (for distributional diagnostics)."""
    raw = raw_draws(indices, cfg.dim)
    u = _uniform01(raw)
    if cfg.distribution == DISTRIBUTION_NORMAL:
        return inverse_normal_cdf(u)
    return 2.0 * u - 1.0


# ---------------------------------------------------------------------------
# Sequential deterministic stream (training noise, batch sampling, ...)
# ---------------------------------------------------------------------------

class Pcg64Stream:
    """Sequential deterministic random stream over the same generator.

    Seeded with a 64-bit integer; draws advance an internal 128-bit state
    with the closed-form jump so arbitrarily shaped blocks come out of one
    vectorized pass. Streams are cheap; use :func:`derive_seed` to carve
    independent sub-streams from one run seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _M64
        s_hi, s_lo, inc_hi, inc_lo = _seed_state(np.array([self.seed], dtype=np.uint64))
        self._state = (int(s_hi[0]) << 64) | int(s_lo[0])
        self._inc = (int(inc_hi[0]) << 64) | int(inc_lo[0])

    def substream(self, *parts) -> "Pcg64Stream":
        return Pcg64Stream(derive_seed(self.seed, *parts))

    def raw(self, n: int):
        n = int(n)
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        s_hi = np.array([self._state >> 64], dtype=np.uint64)
        s_lo = np.array([self._state & _M64], dtype=np.uint64)
        i_hi = np.array([self._inc >> 64], dtype=np.uint64)
        i_lo = np.array([self._inc & _M64], dtype=np.uint64)
        out = _raw_from_state(s_hi, s_lo, i_hi, i_lo, n)[0]
        mk, sk = _POWS.scalar(n)
        self._state = (mk * self._state + sk * self._inc) & _M128
        return out

    def uniform(self, shape=()):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = _uniform01(self.raw(n))
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        x = inverse_normal_cdf(_uniform01(self.raw(n)))
        return x.reshape(shape) if shape else float(x[0])

    def integers(self, bound: int, n: int = None):
        """Unbiased integers in [0, bound) via rejection on the raw stream."""
        if bound <= 0 or bound > 2 ** 63:
            raise RangeError("bound must lie in [1, 2**63]")
        scalar = n is None
        count = 1 if scalar else int(n)
        threshold = (2 ** 64) % bound
        out = np.empty(count, dtype=np.uint64)
        filled = 0
        while filled < count:
            block = self.raw(count - filled)
            ok = block >= _U64(threshold) if threshold else np.ones(block.shape, dtype=bool)
            accepted = block[ok] % _U64(bound)
            out[filled:filled + accepted.shape[0]] = accepted
            filled += accepted.shape[0]
        res = out.astype(np.int64)
        return int(res[0]) if scalar else res

    def permutation(self, n: int):
        """Deterministic permutation of range(n) (rank ordering of raw draws)."""
        return np.argsort(self.raw(n), kind="stable")

    def choice(self, n: int, k: int):
        """k distinct values from range(n), order deterministic."""
        if k > n:
            raise RangeError("cannot choose more values than the range holds")
        return self.permutation(n)[:k]


# ---------------------------------------------------------------------------
# Identity registry
# ---------------------------------------------------------------------------

REGISTRY_MAGIC = b"IDRG"
REGISTRY_VERSION = 1
INDEX_UNIVERSE = 2 ** 63
_HEADER = struct.Struct("<4sHQ")
_RETRY_CAP = 1000


def system_entropy() -> int:
    """OS-backed proposal in [0, 2**63)."""
    return secrets.randbits(63)


class IdentityRegistry:
    """Persisted set of consumed identity indices.

    The on-disk form is a binary log: magic ``IDRG``, version u16, count
    u64, then count 8-byte little-endian indices. Issued indices are
    appended and flushed before they are handed out, so a crash can strand
    an index but never lets one be issued twice. Records found past the
    header count are honored on load (they are exactly those stranded
    appends). A writer holds an advisory lock for the life of the handle.
    """

    def __init__(self, storage_path=None):
        self.storage_path = os.fspath(storage_path) if storage_path is not None else None
        self.used = set()
        self._fh = None
        self._pending = 0

    # -- lifecycle ----------------------------------------------------------

    @classmethod
    def open(cls, storage_path) -> "IdentityRegistry":
        """Load the registry at ``storage_path``, creating it if absent."""
        reg = cls(storage_path)
        if os.path.exists(reg.storage_path) and os.path.getsize(reg.storage_path) > 0:
            reg.used = _read_registry_file(reg.storage_path)
        reg._open_log()
        return reg

    def _open_log(self):
        try:
            fresh = not os.path.exists(self.storage_path) or os.path.getsize(self.storage_path) == 0
            self._fh = open(self.storage_path, "r+b" if not fresh else "w+b")
            if fcntl is not None:
                fcntl.flock(self._fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            if fresh:
                self._fh.write(_HEADER.pack(REGISTRY_MAGIC, REGISTRY_VERSION, len(self.used)))
                for idx in sorted(self.used):
                    self._fh.write(struct.pack("<Q", idx))
                self._fh.flush()
            self._fh.seek(0, io.SEEK_END)
        except BlockingIOError as e:
            raise StorageError(f"registry {self.storage_path} is locked by another writer") from e
        except OSError as e:
            raise StorageError(f"cannot open registry {self.storage_path}: {e}") from e

    def close(self):
        if self._fh is not None:
            self._sync_header()
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _sync_header(self):
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(REGISTRY_MAGIC, REGISTRY_VERSION, len(self.used)))
        self._fh.flush()
        self._fh.seek(0, io.SEEK_END)
        self._pending = 0

    # -- queries ------------------------------------------------------------

    def __len__(self):
        return len(self.used)

    def __contains__(self, index):
        return int(index) in self.used

    # -- mutation -----------------------------------------------------------

    def record(self, index: int):
        """Mark ``index`` consumed (idempotent), persisting before returning."""
        index = int(index)
        if not 0 <= index < INDEX_UNIVERSE:
            raise RangeError(f"index {index} outside [0, 2**63)")
        if index in self.used:
            return
        self._append(index)
        self.used.add(index)

    def _append(self, index: int):
        if self._fh is None:
            raise StorageError("registry is not open for writing")
        try:
            self._fh.write(struct.pack("<Q", index))
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except (OSError, ValueError) as e:
            raise StorageError(f"failed to persist index {index}: {e}") from e
        self._pending += 1
        if self._pending >= 4096:
            self._sync_header()

    def next_unused(self, entropy=None) -> int:
        """Issue a fresh index: propose, reject collisions, persist, return."""
        if len(self.used) >= INDEX_UNIVERSE:
            raise CapacityExhausted("identity index universe exhausted")
        draw = _entropy_callable(entropy)
        for _ in range(_RETRY_CAP):
            candidate = int(draw()) % INDEX_UNIVERSE
            if candidate in self.used:
                continue
            self._append(candidate)
            self.used.add(candidate)
            return candidate
        raise CapacityExhausted(
            f"no unused index found after {_RETRY_CAP} proposals"
        )


def _entropy_callable(entropy):
    if entropy is None:
        return system_entropy
    if callable(entropy):
        return entropy
    if hasattr(entropy, "getrandbits"):
        return lambda: entropy.getrandbits(63)
    raise ConfigError("entropy source must be callable or expose getrandbits")


def _read_registry_file(path):
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError("registry header incomplete", offset=len(header))
        magic, version, count = _HEADER.unpack(header)
        if magic != REGISTRY_MAGIC:
            raise FormatError("bad registry magic", offset=0)
        if version != REGISTRY_VERSION:
            raise FormatError(f"unsupported registry version {version}", offset=4)
        payload = size - _HEADER.size
        if payload % 8 != 0:
            raise FormatError("torn index record", offset=_HEADER.size + (payload // 8) * 8)
        n_records = payload // 8
        if n_records < count:
            raise FormatError(
                f"registry truncated: header promises {count} indices, file holds {n_records}",
                offset=size,
            )
        data = np.fromfile(fh, dtype="<u8", count=n_records)
    return set(int(v) for v in data)


def save_registry(reg: IdentityRegistry, path) -> None:
    """Write a clean snapshot (header count equals record count)."""
    path = os.fspath(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(REGISTRY_MAGIC, REGISTRY_VERSION, len(reg.used)))
            if reg.used:
                np.array(sorted(reg.used), dtype="<u8").tofile(fh)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as e:
        raise StorageError(f"cannot save registry to {path}: {e}") from e


def load_registry(path) -> IdentityRegistry:
    """Read-only load: no lock taken, no log handle kept."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise StorageError(f"registry file {path} does not exist")
    reg = IdentityRegistry(path)
    reg.used = _read_registry_file(path)
    return reg
