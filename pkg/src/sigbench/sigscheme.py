"""Signature backends behind one interface.

Two schemes share the same call surface and are selected at runtime by a
:class:`Scheme` tag:

* ``Scheme.BLS``: BLS multi-signatures over BLS12-381 with signatures in G1
  (48-byte compressed) and public keys in G2 (96-byte compressed). Supports
  signature aggregation, key aggregation and key dis-aggregation.
* ``Scheme.EDDSA``: Ed25519 (RFC 8032) with randomized batch verification.

Group arithmetic and pairings come from ``py_arkworks_bls12381``; the
hash-to-G1 map is the standard SSWU construction from ``blspy``.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
import hashlib
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import blspy
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from py_arkworks_bls12381 import G1Point, G2Point, GT, Scalar

try:
    from sigbench import _edbatch
except ImportError:  # extension not built; batch_verify degrades to per-item checks
    _edbatch = None

BLS12_381_ORDER = 0x73EDA753299D7D483339D80809A1D80553BDA402FFFE5BFEFFFFFFFF00000001
ED25519_ORDER = 2**252 + 27742317777372353535851937790883648493
_ED25519_P = 2**255 - 19
_ED25519_D = (-121665 * pow(121666, -1, _ED25519_P)) % _ED25519_P

BLS_MESSAGE_DST = b"BLS_SIG_BLS12381G1_XMD:SHA-256_SSWU_RO_NUL_"
BLS_POP_DST = b"BLS_POP_BLS12381G1_XMD:SHA-256_SSWU_RO_POP_"
EDDSA_POP_TAG = b"SIGBENCH-ED25519-POP:"

BLS_PUBKEY_SIZE = 96
BLS_SIGNATURE_SIZE = 48
EDDSA_PUBKEY_SIZE = 32
EDDSA_SIGNATURE_SIZE = 64
SECRET_KEY_SIZE = 32


class Scheme(enum.IntEnum):
    """Signature scheme tag; the integer value is the 1-byte wire tag."""

    EDDSA = 1
    BLS = 2

    @classmethod
    def parse(cls, value: "Scheme | str | int") -> "Scheme":
        if isinstance(value, Scheme):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return {"eddsa": cls.EDDSA, "ed25519": cls.EDDSA, "bls": cls.BLS}[value.lower()]
        except KeyError:
            raise ValueError(f"unknown signature scheme {value!r}") from None


class SignatureSchemeError(ValueError):
    """Base class for signature-layer errors."""


class UnsupportedParameters(SignatureSchemeError):
    pass


class SchemeMismatch(SignatureSchemeError):
    pass


class MalformedEncoding(SignatureSchemeError):
    pass


class AggregationError(SignatureSchemeError):
    pass


# ---------------------------------------------------------------------------
# operation counters

@dataclass
class OpTally:
    """Group-operation counts observed while a :func:`count_ops` block is active."""

    key_additions: int = 0
    signature_additions: int = 0
    pairings: int = 0


_ACTIVE_TALLIES: contextvars.ContextVar[tuple[OpTally, ...]] = contextvars.ContextVar(
    "sigbench_active_tallies", default=()
)


@contextlib.contextmanager
def count_ops() -> Iterator[OpTally]:
    """Count G2 key additions, G1 signature additions and pairings.

    Nested blocks all see the operations performed inside the innermost one.
    The counters live in a context variable, so concurrent threads or tasks
    do not bleed into each other.
    """
    tally = OpTally()
    token = _ACTIVE_TALLIES.set(_ACTIVE_TALLIES.get() + (tally,))
    try:
        yield tally
    finally:
        _ACTIVE_TALLIES.reset(token)


def _bump(name: str, amount: int = 1) -> None:
    for tally in _ACTIVE_TALLIES.get():
        setattr(tally, name, getattr(tally, name) + amount)


# ---------------------------------------------------------------------------
# parameters and key material

@dataclass(frozen=True)
class SchemeParams:
    """Public parameters of one backend.

    For BLS this is the bilinear group ``(q, G1, G2, GT, e, g1, g2)`` with the
    hash-to-G1 map; ``gt`` is kept as inert metadata. The Ed25519 backend has
    no pairing groups, so those fields are ``None``.
    """

    scheme: Scheme
    security_bits: int
    curve: str
    order: int
    g1: G1Point | None = field(default=None, repr=False, compare=False)
    g2: G2Point | None = field(default=None, repr=False, compare=False)
    gt: GT | None = field(default=None, repr=False, compare=False)
    message_dst: bytes = b""
    pop_dst: bytes = b""

    def pairing(self, p: G1Point, q: G2Point) -> GT:
        _bump("pairings")
        return GT.pairing(p, q)

    def hash_to_g1(self, message: bytes, dst: bytes | None = None) -> G1Point:
        self._require(Scheme.BLS)
        encoded = bytes(blspy.G1Element.from_message(message, dst or self.message_dst))
        return G1Point.from_compressed_bytes_unchecked(encoded)

    def _require(self, scheme: Scheme) -> None:
        if self.scheme is not scheme:
            raise SchemeMismatch(f"operation requires {scheme.name}, params are {self.scheme.name}")


@lru_cache(maxsize=None)
def setup(security_bits: int = 128, scheme: Scheme | str = Scheme.BLS) -> SchemeParams:
    """Return the fixed parameter set for ``scheme`` at ``security_bits``.

    Only the 128-bit level is supported: BLS12-381 for BLS and edwards25519
    for EdDSA. Repeated calls return the same object.
    """
    scheme = Scheme.parse(scheme)
    if security_bits != 128:
        raise UnsupportedParameters(f"no parameter set for a {security_bits}-bit security level")
    if scheme is Scheme.EDDSA:
        return SchemeParams(Scheme.EDDSA, 128, "edwards25519", ED25519_ORDER)
    g1, g2 = G1Point(), G2Point()
    return SchemeParams(
        Scheme.BLS,
        128,
        "BLS12-381",
        BLS12_381_ORDER,
        g1=g1,
        g2=g2,
        gt=GT.pairing(g1, g2),
        message_dst=BLS_MESSAGE_DST,
        pop_dst=BLS_POP_DST,
    )


def _g1_bytes(point: G1Point) -> bytes:
    return bytes(point.to_compressed_bytes())


def _g2_bytes(point: G2Point) -> bytes:
    return bytes(point.to_compressed_bytes())


@dataclass(frozen=True, eq=False)
class SecretKey:
    scheme: Scheme
    value: int | bytes = field(repr=False)
    native: Scalar | Ed25519PrivateKey = field(repr=False)

    def to_bytes(self) -> bytes:
        if self.scheme is Scheme.BLS:
            return self.value.to_bytes(SECRET_KEY_SIZE, "big")
        return self.value

    @classmethod
    def from_bytes(cls, scheme: Scheme, data: bytes) -> "SecretKey":
        scheme = Scheme.parse(scheme)
        if len(data) != SECRET_KEY_SIZE:
            raise MalformedEncoding(f"secret key must be {SECRET_KEY_SIZE} bytes, got {len(data)}")
        if scheme is Scheme.BLS:
            value = int.from_bytes(data, "big")
            if not 0 < value < BLS12_381_ORDER:
                raise MalformedEncoding("BLS secret scalar out of range")
            return cls(scheme, value, Scalar(value))
        return cls(scheme, bytes(data), Ed25519PrivateKey.from_private_bytes(data))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SecretKey):
            return NotImplemented
        return self.scheme is other.scheme and self.value == other.value

    def __hash__(self) -> int:
        return hash((self.scheme, self.value))


@dataclass(frozen=True, eq=False)
class PublicKey:
    """A verification key. ``data`` is the canonical compressed encoding."""

    scheme: Scheme
    data: bytes
    native: G2Point | Ed25519PublicKey = field(repr=False)

    @classmethod
    def from_bytes(cls, scheme: Scheme | str, data: bytes) -> "PublicKey":
        scheme = Scheme.parse(scheme)
        data = bytes(data)
        if scheme is Scheme.BLS:
            if len(data) != BLS_PUBKEY_SIZE:
                raise MalformedEncoding(f"BLS public key must be {BLS_PUBKEY_SIZE} bytes")
            try:
                point = G2Point.from_compressed_bytes(data)
            except ValueError as exc:
                raise MalformedEncoding(f"invalid G2 point: {exc}") from None
            return cls(scheme, data, point)
        if len(data) != EDDSA_PUBKEY_SIZE:
            raise MalformedEncoding(f"Ed25519 public key must be {EDDSA_PUBKEY_SIZE} bytes")
        if not _ed25519_decompresses(data):
            raise MalformedEncoding("Ed25519 public key is not a curve point")
        return cls(scheme, data, Ed25519PublicKey.from_public_bytes(data))

    @classmethod
    def _from_g2(cls, point: G2Point) -> "PublicKey":
        return cls(Scheme.BLS, _g2_bytes(point), point)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PublicKey):
            return NotImplemented
        return self.scheme is other.scheme and self.data == other.data

    def __hash__(self) -> int:
        return hash((self.scheme, self.data))

    def __bytes__(self) -> bytes:
        return self.data


@dataclass(frozen=True, eq=False)
class SignatureValue:
    scheme: Scheme
    data: bytes
    native: G1Point | None = field(default=None, repr=False)

    @classmethod
    def from_bytes(cls, scheme: Scheme | str, data: bytes) -> "SignatureValue":
        scheme = Scheme.parse(scheme)
        data = bytes(data)
        if scheme is Scheme.BLS:
            if len(data) != BLS_SIGNATURE_SIZE:
                raise MalformedEncoding(f"BLS signature must be {BLS_SIGNATURE_SIZE} bytes")
            try:
                point = G1Point.from_compressed_bytes(data)
            except ValueError as exc:
                raise MalformedEncoding(f"invalid G1 point: {exc}") from None
            return cls(scheme, data, point)
        if len(data) != EDDSA_SIGNATURE_SIZE:
            raise MalformedEncoding(f"Ed25519 signature must be {EDDSA_SIGNATURE_SIZE} bytes")
        return cls(scheme, data)

    @classmethod
    def _from_g1(cls, point: G1Point) -> "SignatureValue":
        return cls(Scheme.BLS, _g1_bytes(point), point)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignatureValue):
            return NotImplemented
        return self.scheme is other.scheme and self.data == other.data

    def __hash__(self) -> int:
        return hash((self.scheme, self.data))

    def __bytes__(self) -> bytes:
        return self.data


@dataclass(frozen=True, eq=False)
class AggregatePublicKey:
    """Product of ``count`` BLS public keys."""

    point: G2Point = field(repr=False)
    count: int

    def to_public_key(self) -> PublicKey:
        return PublicKey._from_g2(self.point)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AggregatePublicKey):
            return NotImplemented
        return self.count == other.count and self.point == other.point


@dataclass(frozen=True)
class ProofOfPossession:
    signature: SignatureValue


def _ed25519_decompresses(data: bytes) -> bool:
    y = int.from_bytes(data, "little") & ((1 << 255) - 1)
    if y >= _ED25519_P:
        return False
    u = (y * y - 1) % _ED25519_P
    v = (_ED25519_D * y * y + 1) % _ED25519_P
    x2 = u * pow(v, -1, _ED25519_P) % _ED25519_P
    if x2 == 0:
        return not data[31] & 0x80
    return pow(x2, (_ED25519_P - 1) // 2, _ED25519_P) == 1


def _check_tags(params: SchemeParams, *values: PublicKey | SignatureValue | SecretKey) -> None:
    for value in values:
        if value.scheme is not params.scheme:
            raise SchemeMismatch(
                f"{type(value).__name__} is tagged {value.scheme.name}, params are {params.scheme.name}"
            )


# ---------------------------------------------------------------------------
# single-signer operations

def keygen(params: SchemeParams, seed: bytes | None = None) -> tuple[PublicKey, SecretKey]:
    """Derive a key pair from ``seed`` (fresh randomness when omitted).

    The same seed always yields the same pair, which the simulator relies on
    to give every validator reproducible keys.
    """
    if seed is None:
        seed = os.urandom(32)
    if params.scheme is Scheme.BLS:
        digest = hashlib.sha512(b"sigbench-keygen-bls:" + seed).digest()
        scalar = int.from_bytes(digest, "big") % (BLS12_381_ORDER - 1) + 1
        sk = SecretKey(Scheme.BLS, scalar, Scalar(scalar))
        return PublicKey._from_g2(params.g2 * sk.native), sk
    material = hashlib.sha256(b"sigbench-keygen-ed25519:" + seed).digest()
    sk = SecretKey.from_bytes(Scheme.EDDSA, material)
    raw = sk.native.public_key().public_bytes_raw()
    return PublicKey(Scheme.EDDSA, raw, Ed25519PublicKey.from_public_bytes(raw)), sk


def public_key_of(params: SchemeParams, sk: SecretKey) -> PublicKey:
    _check_tags(params, sk)
    if params.scheme is Scheme.BLS:
        return PublicKey._from_g2(params.g2 * sk.native)
    return PublicKey.from_bytes(Scheme.EDDSA, sk.native.public_key().public_bytes_raw())


def sign(params: SchemeParams, sk: SecretKey, message: bytes) -> SignatureValue:
    _check_tags(params, sk)
    if params.scheme is Scheme.BLS:
        return SignatureValue._from_g1(params.hash_to_g1(message) * sk.native)
    return SignatureValue(Scheme.EDDSA, sk.native.sign(message))


def verify(params: SchemeParams, pk: PublicKey, sig: SignatureValue, message: bytes) -> bool:
    """Check one signature. BLS tests ``e(sig, g2) == e(H1(m), pk)``."""
    _check_tags(params, pk, sig)
    if params.scheme is Scheme.BLS:
        return _pairing_check(params, pk.native, sig.native, message, params.message_dst)
    try:
        pk.native.verify(sig.data, message)
    except InvalidSignature:
        return False
    return True


def _pairing_check(params: SchemeParams, key: G2Point, sig: G1Point, message: bytes, dst: bytes) -> bool:
    return params.pairing(sig, params.g2) == params.pairing(params.hash_to_g1(message, dst), key)


# ---------------------------------------------------------------------------
# multi-signature operations (BLS only)

def aggregate_signatures(sigs: Sequence[SignatureValue]) -> SignatureValue:
    if not sigs:
        raise AggregationError("cannot aggregate an empty list of signatures")
    for sig in sigs:
        if sig.scheme is not Scheme.BLS:
            raise SchemeMismatch("only BLS signatures aggregate")
    point = sigs[0].native
    for sig in sigs[1:]:
        point = point + sig.native
    _bump("signature_additions", len(sigs) - 1)
    return SignatureValue._from_g1(point)


def aggregate_keys(params: SchemeParams, pks: Sequence[PublicKey]) -> AggregatePublicKey:
    """Multiply ``pks`` together; costs ``len(pks) - 1`` group additions."""
    params._require(Scheme.BLS)
    if not pks:
        raise AggregationError("cannot aggregate an empty list of keys")
    _check_tags(params, *pks)
    point = pks[0].native
    for pk in pks[1:]:
        point = point + pk.native
    _bump("key_additions", len(pks) - 1)
    return AggregatePublicKey(point, len(pks))


def negate_key(pk: PublicKey) -> PublicKey:
    if pk.scheme is not Scheme.BLS:
        raise SchemeMismatch("only BLS keys have a group inverse here")
    return PublicKey._from_g2(-pk.native)


def disaggregate_keys(
    params: SchemeParams, apk: AggregatePublicKey, removed: Sequence[PublicKey]
) -> AggregatePublicKey:
    """Strip keys out of an aggregate by adding their precomputed negations.

    ``removed`` holds negated keys (see :func:`negate_key`) that are a subset
    of the keys behind ``apk``. Exactly one group addition is spent per
    removed key, and the contributor count drops accordingly.
    """
    params._require(Scheme.BLS)
    if len(removed) >= apk.count:
        raise AggregationError(
            f"cannot remove {len(removed)} keys from an aggregate of {apk.count}"
        )
    point = apk.point
    for neg in removed:
        point = point + neg.native
    _bump("key_additions", len(removed))
    return AggregatePublicKey(point, apk.count - len(removed))


def msp_verify(params: SchemeParams, apk: AggregatePublicKey, sig: SignatureValue, message: bytes) -> bool:
    params._require(Scheme.BLS)
    _check_tags(params, sig)
    return _pairing_check(params, apk.point, sig.native, message, params.message_dst)


# ---------------------------------------------------------------------------
# batch verification (Ed25519 only)

def batch_verify(items: Sequence[tuple[PublicKey, SignatureValue, bytes]]) -> list[bool]:
    """Verify many Ed25519 signatures, returning one verdict per item.

    A randomized batch equation is checked first; only when it fails are the
    items re-checked one by one to locate the bad signatures.
    """
    if not items:
        raise ValueError("batch_verify needs at least one item")
    for pk, sig, _ in items:
        if pk.scheme is not Scheme.EDDSA or sig.scheme is not Scheme.EDDSA:
            raise SchemeMismatch("batch verification is only defined for Ed25519")
    if _edbatch is not None and _edbatch.verify_batch([(pk.data, sig.data, m) for pk, sig, m in items]):
        return [True] * len(items)
    params = setup(128, Scheme.EDDSA)
    return [verify(params, pk, sig, m) for pk, sig, m in items]


def has_native_batch() -> bool:
    return _edbatch is not None


# ---------------------------------------------------------------------------
# proofs of possession

def prove_possession(params: SchemeParams, sk: SecretKey, pk: PublicKey) -> ProofOfPossession:
    _check_tags(params, sk, pk)
    if params.scheme is Scheme.BLS:
        point = params.hash_to_g1(pk.data, params.pop_dst) * sk.native
        return ProofOfPossession(SignatureValue._from_g1(point))
    return ProofOfPossession(SignatureValue(Scheme.EDDSA, sk.native.sign(EDDSA_POP_TAG + pk.data)))


def verify_possession(params: SchemeParams, pk: PublicKey, pop: ProofOfPossession) -> bool:
    """Accept iff ``pop`` was made with the secret key behind ``pk``.

    The identity element is never a valid BLS key: it would make every
    pairing check on an aggregate that includes it trivially true.
    """
    _check_tags(params, pk, pop.signature)
    if params.scheme is Scheme.BLS:
        if pk.native == G2Point.identity():
            return False
        return _pairing_check(params, pk.native, pop.signature.native, pk.data, params.pop_dst)
    try:
        pk.native.verify(pop.signature.data, EDDSA_POP_TAG + pk.data)
    except InvalidSignature:
        return False
    return True


# ---------------------------------------------------------------------------
# keypair files

_RECORD_HEADER = struct.Struct(">H")


def _pubkey_size(scheme: Scheme) -> int:
    return BLS_PUBKEY_SIZE if scheme is Scheme.BLS else EDDSA_PUBKEY_SIZE


def encode_keypair(pk: PublicKey, sk: SecretKey) -> bytes:
    """One record: ``[2 B length][1 B scheme tag][public key][32 B secret key]``."""
    if pk.scheme is not sk.scheme:
        raise SchemeMismatch("public and secret key disagree on scheme")
    body = bytes([pk.scheme]) + pk.data + sk.to_bytes()
    return _RECORD_HEADER.pack(len(body)) + body


def decode_keypairs(data: bytes) -> list[tuple[PublicKey, SecretKey]]:
    pairs = []
    offset = 0
    while offset < len(data):
        if offset + _RECORD_HEADER.size > len(data):
            raise MalformedEncoding("truncated keypair record header")
        (length,) = _RECORD_HEADER.unpack_from(data, offset)
        offset += _RECORD_HEADER.size
        body = data[offset : offset + length]
        offset += length
        if len(body) != length or length < 1:
            raise MalformedEncoding("truncated keypair record")
        try:
            scheme = Scheme(body[0])
        except ValueError:
            raise MalformedEncoding(f"unknown scheme tag {body[0]}") from None
        pk_size = _pubkey_size(scheme)
        if length != 1 + pk_size + SECRET_KEY_SIZE:
            raise MalformedEncoding(f"keypair record has length {length}")
        pk = PublicKey.from_bytes(scheme, body[1 : 1 + pk_size])
        sk = SecretKey.from_bytes(scheme, body[1 + pk_size :])
        pairs.append((pk, sk))
    return pairs


def write_keypairs(path: str | os.PathLike, pairs: Iterable[tuple[PublicKey, SecretKey]]) -> None:
    with open(path, "wb") as fh:
        for pk, sk in pairs:
            fh.write(encode_keypair(pk, sk))


def read_keypairs(path: str | os.PathLike) -> list[tuple[PublicKey, SecretKey]]:
    with open(path, "rb") as fh:
        return decode_keypairs(fh.read())
