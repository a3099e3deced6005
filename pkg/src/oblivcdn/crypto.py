"""Symmetric primitives: a seedable DRBG, counter-mode masks and a two-party DPF.

The DPF is the tree construction with one seed and one control bit per node.
Each party expands its seed along the path of the evaluation point with a
fixed-key AES PRG; the correction words force the two parties' states to agree
everywhere except on the path to the hidden point, so XORing the two output
bits gives the point function over GF(2).

All seeds are 128 bits. The control bit lives in the low bit of the first seed
byte and the output conversion reads the bit above it.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import ContractViolation, FrameError

LAMBDA_BYTES = 16
DPF_VERSION = 1
MAX_DOMAIN_BITS = 40

# Fixed public keys of the length-doubling PRG. Any constants work; these are
# the SHA-256 digests of two labels so they are reproducible.
_PRG_KEY_LEFT = hashlib.sha256(b"dpf-prg-left").digest()[:16]
_PRG_KEY_RIGHT = hashlib.sha256(b"dpf-prg-right").digest()[:16]
_ENC_LEFT = Cipher(algorithms.AES(_PRG_KEY_LEFT), modes.ECB()).encryptor()
_ENC_RIGHT = Cipher(algorithms.AES(_PRG_KEY_RIGHT), modes.ECB()).encryptor()


# ---------------------------------------------------------------------------
# randomness


class Drbg:
    """Deterministic random bit generator built on AES-128 in counter mode.

    Seeding with the same value reproduces the same stream, which is what makes
    whole benchmark runs repeatable. ``Drbg(None)`` draws its key from the OS.
    """

    _CHUNK = 1 << 16

    def __init__(self, seed: int | bytes | str | None = None):
        if seed is None:
            material = os.urandom(32)
        elif isinstance(seed, int):
            material = seed.to_bytes(16, "little", signed=True)
        elif isinstance(seed, str):
            material = seed.encode()
        else:
            material = bytes(seed)
        self._key = hashlib.sha256(b"drbg" + material).digest()[:16]
        self._enc = Cipher(algorithms.AES(self._key), modes.CTR(bytes(16))).encryptor()
        self._buf = b""

    def spawn(self, label: str) -> "Drbg":
        """Independent child stream; the parent stream is not consumed."""
        return Drbg(self._key + b"/" + label.encode())

    def bytes(self, n: int) -> bytes:
        if n <= len(self._buf):
            out, self._buf = self._buf[:n], self._buf[n:]
            return out
        need = n - len(self._buf)
        fresh = self._enc.update(bytes(max(need, self._CHUNK)))
        out = self._buf + fresh[:need]
        self._buf = fresh[need:]
        return out

    def array(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Uniform uint8 array of the given shape."""
        count = int(np.prod(shape))
        return np.frombuffer(self.bytes(count), dtype=np.uint8).reshape(shape).copy()

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection sampling."""
        if n <= 0:
            raise ContractViolation("below() needs a positive bound")
        if n == 1:
            return 0
        bits = (n - 1).bit_length()
        nbytes = (bits + 7) // 8
        mask = (1 << bits) - 1
        while True:
            v = int.from_bytes(self.bytes(nbytes), "little") & mask
            if v < n:
                return v

    def bit(self) -> int:
        return self.bytes(1)[0] & 1

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of ``range(n)`` (Fisher-Yates)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def sample(self, population: Sequence[int], k: int) -> list[int]:
        """``k`` distinct elements of ``population`` in random order."""
        pool = list(population)
        if k > len(pool):
            raise ContractViolation("sample larger than population")
        for i in range(k):
            j = i + self.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


# ---------------------------------------------------------------------------
# masks


def prf_mask(key: bytes, counter: int, length: int) -> bytes:
    """Keystream G(counter) of ``length`` bytes under a 128-bit block key.

    The counter occupies the top 64 bits of the AES-CTR counter block and the
    low 64 bits count cipher blocks, so streams for distinct counters never
    overlap for any practical block size.
    """
    if len(key) != LAMBDA_BYTES:
        raise ContractViolation("mask key must be 16 bytes")
    if not 0 <= counter < 1 << 64:
        raise ContractViolation("counter must fit in 64 bits")
    if length < 0:
        raise ContractViolation("negative mask length")
    nonce = counter.to_bytes(8, "big") + bytes(8)
    enc = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return enc.update(bytes(length))


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ContractViolation("xor of unequal lengths")
    n = len(a)
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(n, "little")


def reencrypt_mask(key: bytes, counter: int, counter_next: int, length: int) -> bytes:
    """m = G(c) xor G(c'): XORing it into E_c(b) yields E_{c'}(b)."""
    return xor_bytes(prf_mask(key, counter, length), prf_mask(key, counter_next, length))


def share_mask(
    key: bytes, counter: int, counter_next: int, length: int, rng: Drbg
) -> tuple[bytes, bytes]:
    """Split the re-encryption mask into two XOR shares.

    The first share is uniform; each share alone is independent of the key.
    """
    m1 = rng.bytes(length)
    m2 = xor_bytes(m1, reencrypt_mask(key, counter, counter_next, length))
    return m1, m2


def encrypt_block(key: bytes, counter: int, plaintext: bytes) -> bytes:
    return xor_bytes(plaintext, prf_mask(key, counter, len(plaintext)))


decrypt_block = encrypt_block


class KeyRing:
    """Per-block mask keys derived from one master key (AES as a PRF over bids)."""

    def __init__(self, master: bytes):
        if len(master) != LAMBDA_BYTES:
            raise ContractViolation("master key must be 16 bytes")
        self._enc = Cipher(algorithms.AES(master), modes.ECB()).encryptor()

    def key(self, bid: int) -> bytes:
        return self._enc.update(struct.pack("<QQ", bid, 0x6B6579))


# ---------------------------------------------------------------------------
# distributed point function


@dataclass(frozen=True)
class DpfKey:
    """One party's share of a point function over a domain of 2**domain_bits."""

    party: int
    domain_bits: int
    seed: bytes
    cw_seeds: tuple[bytes, ...]
    cw_left: tuple[int, ...]
    cw_right: tuple[int, ...]
    cw_final: int

    def to_bytes(self) -> bytes:
        """Versioned layout: version, party, domain bits, seed, per-level
        (seed correction, packed control corrections), final correction."""
        parts = [struct.pack("<BBB", DPF_VERSION, self.party, self.domain_bits), self.seed]
        for scw, tl, tr in zip(self.cw_seeds, self.cw_left, self.cw_right):
            parts.append(scw)
            parts.append(bytes([tl | (tr << 1)]))
        parts.append(bytes([self.cw_final]))
        return b"".join(parts)

    @staticmethod
    def encoded_size(domain_bits: int) -> int:
        return 3 + LAMBDA_BYTES + domain_bits * (LAMBDA_BYTES + 1) + 1

    @classmethod
    def from_bytes(cls, data: bytes) -> "DpfKey":
        if len(data) < 3:
            raise FrameError("truncated DPF key")
        version, party, n = struct.unpack_from("<BBB", data, 0)
        if version != DPF_VERSION:
            raise FrameError(f"unsupported DPF key version {version}")
        if party not in (1, 2):
            raise FrameError(f"bad DPF party {party}")
        if len(data) != cls.encoded_size(n):
            raise FrameError(f"DPF key length {len(data)} does not match domain bits {n}")
        pos = 3
        seed = data[pos : pos + LAMBDA_BYTES]
        pos += LAMBDA_BYTES
        scws, tls, trs = [], [], []
        for _ in range(n):
            scws.append(data[pos : pos + LAMBDA_BYTES])
            flags = data[pos + LAMBDA_BYTES]
            if flags > 3:
                raise FrameError("bad DPF control correction byte")
            tls.append(flags & 1)
            trs.append(flags >> 1)
            pos += LAMBDA_BYTES + 1
        final = data[pos]
        if final > 1:
            raise FrameError("bad DPF final correction byte")
        return cls(party, n, seed, tuple(scws), tuple(tls), tuple(trs), final)


def _expand(seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """PRG on an (m, 16) seed array -> (sL, tL, sR, tR) with control bits split off."""
    raw = seeds.tobytes()
    left = np.frombuffer(_ENC_LEFT.update(raw), dtype=np.uint8).reshape(seeds.shape) ^ seeds
    right = np.frombuffer(_ENC_RIGHT.update(raw), dtype=np.uint8).reshape(seeds.shape) ^ seeds
    tl = left[:, 0] & 1
    tr = right[:, 0] & 1
    left[:, 0] &= 0xFE
    right[:, 0] &= 0xFE
    return left, tl, right, tr


def _convert(seeds: np.ndarray) -> np.ndarray:
    return (seeds[:, 0] >> 1) & 1


def domain_bits_for(size: int) -> int:
    """Smallest n with 2**n >= size (size 1 needs no levels)."""
    if size < 1:
        raise ContractViolation("domain size must be positive")
    return (size - 1).bit_length()


@dataclass
class DpfKeyBatch:
    """Many same-domain keys held as arrays; the form the hot paths work on."""

    party: np.ndarray  # (k,)
    domain_bits: int
    seeds: np.ndarray  # (k, 16), control bit cleared
    cw_seeds: np.ndarray  # (k, n, 16)
    cw_left: np.ndarray  # (k, n)
    cw_right: np.ndarray  # (k, n)
    cw_final: np.ndarray  # (k,)

    def __len__(self) -> int:
        return int(self.party.shape[0])

    def to_bytes_array(self) -> np.ndarray:
        """(k, encoded_size) uint8, each row in the DpfKey.to_bytes layout."""
        k, n = len(self), self.domain_bits
        out = np.empty((k, DpfKey.encoded_size(n)), dtype=np.uint8)
        out[:, 0] = DPF_VERSION
        out[:, 1] = self.party
        out[:, 2] = n
        out[:, 3 : 3 + LAMBDA_BYTES] = self.seeds
        body = out[:, 3 + LAMBDA_BYTES : 3 + LAMBDA_BYTES + n * (LAMBDA_BYTES + 1)].reshape(k, n, LAMBDA_BYTES + 1)
        body[:, :, :LAMBDA_BYTES] = self.cw_seeds
        body[:, :, LAMBDA_BYTES] = self.cw_left | (self.cw_right << 1)
        out[:, -1] = self.cw_final
        return out

    @classmethod
    def from_bytes_array(cls, raw: np.ndarray) -> "DpfKeyBatch":
        raw = np.asarray(raw, dtype=np.uint8)
        if raw.ndim != 2 or raw.shape[1] < 3 + LAMBDA_BYTES + 1:
            raise FrameError("DPF key array has the wrong shape")
        k = raw.shape[0]
        if k and (raw[:, 0] != DPF_VERSION).any():
            raise FrameError("unsupported DPF key version")
        n = int(raw[0, 2]) if k else 0
        if k and (raw[:, 2] != n).any():
            raise FrameError("mixed DPF domain sizes in one batch")
        if raw.shape[1] != DpfKey.encoded_size(n):
            raise FrameError(f"DPF key length {raw.shape[1]} does not match domain bits {n}")
        party = raw[:, 1].copy()
        if k and ((party < 1) | (party > 2)).any():
            raise FrameError("bad DPF party")
        body = raw[:, 3 + LAMBDA_BYTES : 3 + LAMBDA_BYTES + n * (LAMBDA_BYTES + 1)].reshape(k, n, LAMBDA_BYTES + 1)
        flags = body[:, :, LAMBDA_BYTES]
        final = raw[:, -1].copy()
        if (flags > 3).any() or (final > 1).any():
            raise FrameError("bad DPF correction bits")
        seeds = raw[:, 3 : 3 + LAMBDA_BYTES].copy()
        seeds[:, 0] &= 0xFE
        return cls(party, n, seeds, body[:, :, :LAMBDA_BYTES].copy(), flags & 1, flags >> 1, final)

    @classmethod
    def from_keys(cls, keys: Sequence["DpfKey"]) -> "DpfKeyBatch":
        if not keys:
            raise ContractViolation("empty key batch")
        return cls.from_bytes_array(np.stack([np.frombuffer(k.to_bytes(), dtype=np.uint8) for k in keys]))

    def key(self, i: int) -> "DpfKey":
        return DpfKey.from_bytes(self.to_bytes_array()[i].tobytes())


def dpf_gen_batch(points: Sequence[int] | np.ndarray, domain_bits: int, rng: Drbg) -> tuple[DpfKeyBatch, DpfKeyBatch]:
    """Key pairs for many points at once; row i of each batch belongs to points[i]."""
    if not 0 <= domain_bits <= MAX_DOMAIN_BITS:
        raise ContractViolation(f"domain bits must be in [0, {MAX_DOMAIN_BITS}]")
    xs = np.asarray(points, dtype=np.int64).reshape(-1)
    k, n = xs.size, domain_bits
    if k == 0:
        raise ContractViolation("no points to share")
    if xs.min() < 0 or xs.max() >= 1 << n:
        raise ContractViolation(f"point outside a domain of 2**{n}")
    roots = np.frombuffer(rng.bytes(2 * k * LAMBDA_BYTES), dtype=np.uint8).reshape(2, k, LAMBDA_BYTES).copy()
    roots[:, :, 0] &= 0xFE
    s = [roots[0].copy(), roots[1].copy()]
    t = [np.zeros(k, dtype=np.uint8), np.ones(k, dtype=np.uint8)]
    scws = np.empty((k, n, LAMBDA_BYTES), dtype=np.uint8)
    tls = np.empty((k, n), dtype=np.uint8)
    trs = np.empty((k, n), dtype=np.uint8)
    for level in range(n):
        bit = ((xs >> (n - 1 - level)) & 1).astype(np.uint8)
        right = bit.astype(bool)
        e0, e1 = _expand(s[0]), _expand(s[1])
        scw = np.where(right[:, None], e0[0] ^ e1[0], e0[2] ^ e1[2])
        tlcw = e0[1] ^ e1[1] ^ bit ^ 1
        trcw = e0[3] ^ e1[3] ^ bit
        scws[:, level] = scw
        tls[:, level] = tlcw
        trs[:, level] = trcw
        keep_cw = np.where(right, trcw, tlcw)
        for b, (sl, tl, sr, tr) in enumerate((e0, e1)):
            keep_s = np.where(right[:, None], sr, sl)
            keep_t = np.where(right, tr, tl)
            on = t[b].astype(bool)
            keep_s[on] ^= scw[on]
            s[b] = keep_s
            t[b] = keep_t ^ (t[b] & keep_cw)
    final = (1 ^ _convert(s[0]) ^ _convert(s[1])).astype(np.uint8)
    return tuple(
        DpfKeyBatch(np.full(k, p + 1, dtype=np.uint8), n, roots[p], scws, tls, trs, final) for p in range(2)
    )


def dpf_gen(point: int, domain_bits: int, rng: Drbg) -> tuple["DpfKey", "DpfKey"]:
    """Keys whose evaluations XOR to 1 at ``point`` and 0 elsewhere."""
    if not 0 <= domain_bits <= MAX_DOMAIN_BITS:
        raise ContractViolation(f"domain bits must be in [0, {MAX_DOMAIN_BITS}]")
    if not 0 <= point < 1 << domain_bits:
        raise ContractViolation(f"point {point} outside a domain of 2**{domain_bits}")
    b1, b2 = dpf_gen_batch([point], domain_bits, rng)
    return b1.key(0), b2.key(0)


def dpf_eval_points_batch(batch: DpfKeyBatch, points: np.ndarray) -> np.ndarray:
    """Share bits of key i at points[i, j]; points has shape (k, m)."""
    pts = np.asarray(points, dtype=np.int64)
    k, n = len(batch), batch.domain_bits
    if pts.ndim != 2 or pts.shape[0] != k:
        raise ContractViolation("need one row of points per key")
    if pts.size and (pts.min() < 0 or pts.max() >= 1 << n):
        raise ContractViolation(f"evaluation point outside a domain of 2**{n}")
    m = pts.shape[1]
    owner = np.repeat(np.arange(k), m)
    xs = pts.reshape(-1)
    seeds = batch.seeds[owner].copy()
    t = (batch.party[owner] - 1).astype(np.uint8)
    for level in range(n):
        sl, tl, sr, tr = _expand(seeds)
        on = t.astype(bool)
        corr = batch.cw_seeds[owner, level]
        sl[on] ^= corr[on]
        sr[on] ^= corr[on]
        tl = tl ^ (t & batch.cw_left[owner, level])
        tr = tr ^ (t & batch.cw_right[owner, level])
        go_right = ((xs >> (n - 1 - level)) & 1).astype(bool)
        seeds = np.where(go_right[:, None], sr, sl)
        t = np.where(go_right, tr, tl).astype(np.uint8)
    out = _convert(seeds) ^ (t & batch.cw_final[owner])
    return out.reshape(k, m).astype(np.uint8)


def dpf_eval_full_batch(batch: DpfKeyBatch) -> np.ndarray:
    """Full-domain share bits of every key, shape (k, 2**n), index order."""
    k, n = len(batch), batch.domain_bits
    seeds = batch.seeds.reshape(k, 1, LAMBDA_BYTES)
    t = (batch.party - 1).astype(np.uint8).reshape(k, 1)
    for level in range(n):
        w = seeds.shape[1]
        sl, tl, sr, tr = _expand(seeds.reshape(-1, LAMBDA_BYTES))
        on = (np.uint8(0) - t)[:, :, None]  # 0x00 or 0xFF per node
        corr = batch.cw_seeds[:, level][:, None, :] & on
        children = np.empty((k, w, 2, LAMBDA_BYTES), dtype=np.uint8)
        np.bitwise_xor(sl.reshape(k, w, LAMBDA_BYTES), corr, out=children[:, :, 0])
        np.bitwise_xor(sr.reshape(k, w, LAMBDA_BYTES), corr, out=children[:, :, 1])
        bits = np.empty((k, w, 2), dtype=np.uint8)
        bits[:, :, 0] = tl.reshape(k, w) ^ (t & batch.cw_left[:, level][:, None])
        bits[:, :, 1] = tr.reshape(k, w) ^ (t & batch.cw_right[:, level][:, None])
        seeds = children.reshape(k, 2 * w, LAMBDA_BYTES)
        t = bits.reshape(k, 2 * w)
    conv = (seeds[:, :, 0] >> 1) & 1
    return (conv ^ (t & batch.cw_final[:, None])).astype(np.uint8)


def dpf_eval_points(key: "DpfKey", points: Iterable[int]) -> np.ndarray:
    xs = np.asarray(list(points), dtype=np.int64)
    return dpf_eval_points_batch(DpfKeyBatch.from_keys([key]), xs[None, :])[0]


def dpf_eval(key: "DpfKey", point: int) -> int:
    return int(dpf_eval_points(key, [point])[0])


def dpf_eval_full_many(keys: Sequence["DpfKey"]) -> np.ndarray:
    """Full-domain share bits for a list of same-domain keys, shape (k, 2**n)."""
    if not keys:
        return np.zeros((0, 0), dtype=np.uint8)
    if any(k.domain_bits != keys[0].domain_bits for k in keys):
        raise ContractViolation("batched full-domain evaluation needs one domain size")
    return dpf_eval_full_batch(DpfKeyBatch.from_keys(keys))


def dpf_eval_full(key: "DpfKey") -> np.ndarray:
    """Share bits over the whole domain, index order."""
    return dpf_eval_full_many([key])[0]
