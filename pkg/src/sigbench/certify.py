"""Votes, quorum certificates and their verification paths.

A BLS certificate carries one aggregated signature and a bitmap of the
validators that did *not* vote. Verifiers hold a :class:`KeyCache` with the
committee's aggregate key and every key's negation, so recovering the signer
set's aggregate key costs one group addition per missing voter
(:func:`verify_certificate_cached`). :func:`verify_certificate_naive` rebuilds
the aggregate from the contributors instead and serves as the reference.

EdDSA certificates list ``(voter index, signature)`` pairs and are checked
with batch verification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence, Union

from sigbench.sigscheme import (
    AggregatePublicKey,
    MalformedEncoding,
    ProofOfPossession,
    PublicKey,
    Scheme,
    SchemeMismatch,
    SchemeParams,
    SecretKey,
    SignatureValue,
    aggregate_keys,
    aggregate_signatures,
    batch_verify,
    disaggregate_keys,
    msp_verify,
    negate_key,
    setup,
    sign,
    verify,
    verify_possession,
)

DIGEST_SIZE = 32
HEADER = struct.Struct(">BQ32s")  # scheme tag, round, block digest
EDDSA_ENTRY = struct.Struct(">H64s")
EDDSA_EMBEDDED_ENTRY = struct.Struct(">H32s64s")
BLS_SIGNATURE_SIZE = 48


class CommitteeError(ValueError):
    pass


class AdmissionError(CommitteeError):
    """A committee key failed its proof-of-possession check."""


class CertificateError(ValueError):
    pass


class InsufficientQuorum(CertificateError):
    pass


class DuplicateVoter(CertificateError):
    pass


class MixedVotes(CertificateError):
    pass


class MalformedCertificate(CertificateError):
    pass


def vote_message(round_: int, digest: bytes) -> bytes:
    """Bytes a vote signs: the round next to the block digest, so a vote
    cannot be replayed into another round."""
    return round_.to_bytes(8, "big") + digest


# ---------------------------------------------------------------------------
# key cache

@dataclass(frozen=True, eq=False)
class KeyCache:
    """Committee keys in index order plus the BLS precomputation."""

    params: SchemeParams
    public_keys: tuple[PublicKey, ...]
    f: int
    apk: AggregatePublicKey | None
    negated: tuple[PublicKey, ...]

    @property
    def n(self) -> int:
        return len(self.public_keys)

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def scheme(self) -> Scheme:
        return self.params.scheme


def build_key_cache(
    pks: Sequence[PublicKey],
    f: int,
    proofs: Sequence[ProofOfPossession] | None,
) -> KeyCache:
    """Admit a committee of ``3f + 1`` keys and precompute what verification needs.

    Index ``i`` in the committee is position ``i`` in ``pks``. Every key must
    come with a valid proof of possession; pass ``proofs=None`` only for keys
    whose possession was already established elsewhere.
    """
    if f < 0 or len(pks) != 3 * f + 1:
        raise CommitteeError(f"committee of {len(pks)} keys does not match n = 3f + 1 with f = {f}")
    schemes = {pk.scheme for pk in pks}
    if len(schemes) != 1:
        raise SchemeMismatch("committee keys use different schemes")
    if len(set(pks)) != len(pks):
        raise CommitteeError("duplicate public key in committee")
    params = setup(128, schemes.pop())
    if proofs is not None:
        if len(proofs) != len(pks):
            raise AdmissionError("one proof of possession is required per key")
        for index, (pk, pop) in enumerate(zip(pks, proofs)):
            if not verify_possession(params, pk, pop):
                raise AdmissionError(f"validator {index} failed proof of possession")
    if params.scheme is Scheme.BLS:
        apk = aggregate_keys(params, pks)
        negated = tuple(negate_key(pk) for pk in pks)
    else:
        apk, negated = None, ()
    return KeyCache(params, tuple(pks), f, apk, negated)


# ---------------------------------------------------------------------------
# votes

@dataclass(frozen=True)
class Vote:
    round: int
    digest: bytes
    voter: int
    signature: SignatureValue


def _digest_of(block) -> bytes:
    digest = block if isinstance(block, (bytes, bytearray)) else block.digest
    if len(digest) != DIGEST_SIZE:
        raise ValueError("block digest must be 32 bytes")
    return bytes(digest)


def make_vote(sk: SecretKey, voter: int, round_: int, block) -> Vote:
    """Counter-sign ``block`` (anything with a ``digest``, or the digest itself)."""
    digest = _digest_of(block)
    params = setup(128, sk.scheme)
    return Vote(round_, digest, voter, sign(params, sk, vote_message(round_, digest)))


def verify_vote(cache: KeyCache, vote: Vote, expected_digest: bytes) -> bool:
    if not 0 <= vote.voter < cache.n:
        raise CertificateError(f"voter index {vote.voter} outside committee of {cache.n}")
    if vote.digest != expected_digest or vote.signature.scheme is not cache.scheme:
        return False
    return verify(
        cache.params, cache.public_keys[vote.voter], vote.signature, vote_message(vote.round, vote.digest)
    )


# ---------------------------------------------------------------------------
# certificates

@dataclass(frozen=True)
class SignerBitmap:
    """``n`` bits; bit ``i`` is set when validator ``i`` did not contribute.

    Encoded little-endian within each byte (bit ``i`` lives in byte ``i // 8``
    at position ``i % 8``) and zero-padded to ``ceil(n / 8)`` bytes.
    """

    n: int
    mask: int = 0

    def __post_init__(self):
        if self.mask >> self.n:
            raise ValueError("bitmap has bits beyond n")

    @classmethod
    def from_signers(cls, n: int, signers) -> "SignerBitmap":
        signers = set(signers)
        if any(not 0 <= i < n for i in signers):
            raise ValueError("signer index outside committee")
        return cls(n, sum(1 << i for i in range(n) if i not in signers))

    def non_signers(self) -> list[int]:
        return [i for i in range(self.n) if self.mask >> i & 1]

    def signers(self) -> list[int]:
        return [i for i in range(self.n) if not self.mask >> i & 1]

    @property
    def popcount(self) -> int:
        return bin(self.mask).count("1")

    @property
    def contributors(self) -> int:
        return self.n - self.popcount

    @staticmethod
    def byte_length(n: int) -> int:
        return (n + 7) // 8

    def to_bytes(self) -> bytes:
        return self.mask.to_bytes(self.byte_length(self.n), "little")

    @classmethod
    def from_bytes(cls, data: bytes, n: int) -> "SignerBitmap":
        if len(data) != cls.byte_length(n):
            raise MalformedCertificate(f"bitmap of {len(data)} bytes for a committee of {n}")
        mask = int.from_bytes(data, "little")
        if mask >> n:
            raise MalformedCertificate("bitmap padding bits are set")
        return cls(n, mask)


@dataclass(frozen=True)
class BlsCertificate:
    round: int
    digest: bytes
    signature: SignatureValue
    bitmap: SignerBitmap

    scheme = Scheme.BLS

    @property
    def contributors(self) -> int:
        return self.bitmap.contributors


@dataclass(frozen=True)
class EddsaCertificate:
    round: int
    digest: bytes
    votes: tuple[tuple[int, SignatureValue], ...]

    scheme = Scheme.EDDSA

    @property
    def contributors(self) -> int:
        return len({i for i, _ in self.votes})


Certificate = Union[BlsCertificate, EddsaCertificate]


def assemble_certificate(cache: KeyCache, votes: Sequence[Vote]) -> Certificate:
    """Combine at least ``2f + 1`` verified votes on one block into a certificate."""
    if not votes:
        raise InsufficientQuorum("no votes")
    voters = [v.voter for v in votes]
    if len(set(voters)) != len(voters):
        raise DuplicateVoter("a validator voted twice")
    if len({(v.round, v.digest) for v in votes}) != 1:
        raise MixedVotes("votes reference different rounds or blocks")
    if len(votes) < cache.quorum:
        raise InsufficientQuorum(f"{len(votes)} votes, quorum is {cache.quorum}")
    if any(not 0 <= i < cache.n for i in voters):
        raise CertificateError("voter index outside committee")
    round_, digest = votes[0].round, votes[0].digest
    if cache.scheme is Scheme.BLS:
        return BlsCertificate(
            round_,
            digest,
            aggregate_signatures([v.signature for v in votes]),
            SignerBitmap.from_signers(cache.n, voters),
        )
    entries = sorted((v.voter, v.signature) for v in votes)
    return EddsaCertificate(round_, digest, tuple(entries))


def _check_bls(cache: KeyCache, cert: Certificate) -> None:
    if cache.scheme is not Scheme.BLS or not isinstance(cert, BlsCertificate):
        raise SchemeMismatch("BLS verification path needs a BLS committee and certificate")
    if cert.bitmap.n != cache.n:
        raise MalformedCertificate(f"bitmap covers {cert.bitmap.n} validators, committee has {cache.n}")
    if cert.bitmap.popcount > cache.f:
        raise InsufficientQuorum(f"{cert.contributors} contributors, quorum is {cache.quorum}")


def verify_certificate_cached(cache: KeyCache, cert: Certificate) -> bool:
    """Verify with the cached aggregate key: ``popcount(bitmap)`` additions, at most ``f``."""
    _check_bls(cache, cert)
    removed = [cache.negated[i] for i in cert.bitmap.non_signers()]
    apk = disaggregate_keys(cache.params, cache.apk, removed)
    return msp_verify(cache.params, apk, cert.signature, vote_message(cert.round, cert.digest))


def verify_certificate_naive(cache: KeyCache, cert: Certificate) -> bool:
    """Verify by re-aggregating the contributors' keys (``contributors - 1`` additions)."""
    _check_bls(cache, cert)
    apk = aggregate_keys(cache.params, [cache.public_keys[i] for i in cert.bitmap.signers()])
    return msp_verify(cache.params, apk, cert.signature, vote_message(cert.round, cert.digest))


def verify_certificate_eddsa(cache: KeyCache, cert: Certificate) -> bool:
    if cache.scheme is not Scheme.EDDSA or not isinstance(cert, EddsaCertificate):
        raise SchemeMismatch("EdDSA verification path needs an EdDSA committee and certificate")
    indices = [i for i, _ in cert.votes]
    if len(set(indices)) != len(indices):
        raise DuplicateVoter("a validator appears twice in the certificate")
    if any(not 0 <= i < cache.n for i in indices):
        raise MalformedCertificate("voter index outside committee")
    if len(indices) < cache.quorum:
        raise InsufficientQuorum(f"{len(indices)} signatures, quorum is {cache.quorum}")
    message = vote_message(cert.round, cert.digest)
    return all(batch_verify([(cache.public_keys[i], sig, message) for i, sig in cert.votes]))


def verify_certificate(cache: KeyCache, cert: Certificate) -> bool:
    """Verify through the scheme's production path (cached for BLS)."""
    if cache.scheme is Scheme.BLS:
        return verify_certificate_cached(cache, cert)
    return verify_certificate_eddsa(cache, cert)


# ---------------------------------------------------------------------------
# wire format

def encode_certificate(cert: Certificate) -> bytes:
    """``[1 B tag][8 B round][32 B digest][payload]``.

    BLS payload: 48-byte signature then the bitmap. EdDSA payload: one
    ``[2 B index][64 B signature]`` entry per contributor, sorted by index.
    """
    header = HEADER.pack(cert.scheme, cert.round, cert.digest)
    if isinstance(cert, BlsCertificate):
        return header + cert.signature.data + cert.bitmap.to_bytes()
    return header + b"".join(EDDSA_ENTRY.pack(i, sig.data) for i, sig in sorted(cert.votes))


def encode_certificate_with_keys(cert: EddsaCertificate, cache: KeyCache) -> bytes:
    """EdDSA encoding that also embeds each contributor's 32-byte public key."""
    header = HEADER.pack(cert.scheme, cert.round, cert.digest)
    return header + b"".join(
        EDDSA_EMBEDDED_ENTRY.pack(i, cache.public_keys[i].data, sig.data) for i, sig in sorted(cert.votes)
    )


def decode_certificate(data: bytes, n: int) -> Certificate:
    if len(data) < HEADER.size:
        raise MalformedCertificate("truncated certificate header")
    tag, round_, digest = HEADER.unpack_from(data)
    body = data[HEADER.size :]
    try:
        scheme = Scheme(tag)
    except ValueError:
        raise MalformedCertificate(f"unknown scheme tag {tag}") from None
    try:
        if scheme is Scheme.BLS:
            if len(body) < BLS_SIGNATURE_SIZE:
                raise MalformedCertificate("truncated BLS signature")
            sig = SignatureValue.from_bytes(Scheme.BLS, body[:BLS_SIGNATURE_SIZE])
            return BlsCertificate(round_, digest, sig, SignerBitmap.from_bytes(body[BLS_SIGNATURE_SIZE:], n))
        if len(body) % EDDSA_ENTRY.size:
            raise MalformedCertificate("truncated EdDSA signature entry")
        entries = [
            (i, SignatureValue.from_bytes(Scheme.EDDSA, sig)) for i, sig in EDDSA_ENTRY.iter_unpack(body)
        ]
    except MalformedEncoding as exc:
        raise MalformedCertificate(str(exc)) from None
    indices = [i for i, _ in entries]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise MalformedCertificate("EdDSA entries must be strictly increasing by index")
    if indices and indices[-1] >= n:
        raise MalformedCertificate("voter index outside committee")
    return EddsaCertificate(round_, digest, tuple(entries))


def bls_certificate_size(n: int) -> int:
    return HEADER.size + BLS_SIGNATURE_SIZE + SignerBitmap.byte_length(n)


def eddsa_certificate_size(contributors: int, embedded_keys: bool = False) -> int:
    entry = EDDSA_EMBEDDED_ENTRY if embedded_keys else EDDSA_ENTRY
    return HEADER.size + contributors * entry.size
