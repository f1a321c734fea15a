import hashlib
import itertools
import random

import pytest
from py_arkworks_bls12381 import G2Point, Scalar

import oracles
from sigbench.certify import (
    AdmissionError,
    BlsCertificate,
    CertificateError,
    CommitteeError,
    DuplicateVoter,
    EddsaCertificate,
    InsufficientQuorum,
    MalformedCertificate,
    MixedVotes,
    SignerBitmap,
    Vote,
    assemble_certificate,
    bls_certificate_size,
    build_key_cache,
    decode_certificate,
    eddsa_certificate_size,
    encode_certificate,
    encode_certificate_with_keys,
    make_vote,
    verify_certificate,
    verify_certificate_cached,
    verify_certificate_eddsa,
    verify_certificate_naive,
    verify_vote,
    vote_message,
)
from sigbench.sigscheme import (
    BLS_POP_DST,
    ProofOfPossession,
    PublicKey,
    Scheme,
    SignatureValue,
    aggregate_keys,
    aggregate_signatures,
    count_ops,
    keygen,
    msp_verify,
    prove_possession,
    setup,
    sign,
)


def digest(label):
    return hashlib.sha256(label).digest()


def committee(scheme, f, tag=b"c"):
    params = setup(128, scheme)
    keys = [keygen(params, tag + i.to_bytes(2, "big")) for i in range(3 * f + 1)]
    pops = [prove_possession(params, sk, pk) for pk, sk in keys]
    return keys, build_key_cache([pk for pk, _ in keys], f, pops)


@pytest.fixture(scope="module")
def bls4():
    return committee(Scheme.BLS, 1)


@pytest.fixture(scope="module")
def ed4():
    return committee(Scheme.EDDSA, 1)


class TestKeyCache:
    def test_f1(self, bls4):
        keys, cache = bls4
        assert cache.n == 4 and cache.quorum == 3
        assert cache.apk.count == 4
        assert cache.apk.to_public_key().data == oracles.fold_keys([pk.data for pk, _ in keys])
        for pk, neg in zip(cache.public_keys, cache.negated):
            assert pk.native + neg.native == G2Point.identity()

    def test_wrong_size(self):
        params = setup(128, Scheme.BLS)
        keys = [keygen(params, bytes([i]))[0] for i in range(5)]
        with pytest.raises(CommitteeError):
            build_key_cache(keys, 1, None)

    def test_duplicate_keys(self):
        params = setup(128, Scheme.BLS)
        pk, _ = keygen(params, b"dup")
        others = [keygen(params, bytes([i]))[0] for i in range(2)]
        with pytest.raises(CommitteeError):
            build_key_cache([pk, pk] + others, 1, None)

    def test_rogue_key_refused_at_admission(self):
        params = setup(128, Scheme.BLS)
        keys = [keygen(params, bytes([i])) for i in range(3)]
        victim = keys[0][0]
        x = 424242
        rogue = PublicKey._from_g2(-victim.native + params.g2 * Scalar(x))
        pops = [prove_possession(params, sk, pk) for pk, sk in keys]
        forged_pop = ProofOfPossession(
            SignatureValue._from_g1(params.hash_to_g1(rogue.data, BLS_POP_DST) * Scalar(x))
        )
        with pytest.raises(AdmissionError):
            build_key_cache([pk for pk, _ in keys] + [rogue], 1, pops + [forged_pop])
        honest_pk, honest_sk = keygen(params, b"honest")
        cache = build_key_cache(
            [pk for pk, _ in keys] + [honest_pk], 1, pops + [prove_possession(params, honest_sk, honest_pk)]
        )
        assert cache.n == 4


class TestVotes:
    def test_roundtrip(self, bls4):
        keys, cache = bls4
        d = digest(b"block")
        vote = make_vote(keys[2][1], 2, 5, d)
        assert verify_vote(cache, vote, d)

    def test_same_digest_different_signatures(self, bls4):
        keys, _ = bls4
        d = digest(b"block")
        v0, v1 = make_vote(keys[0][1], 0, 1, d), make_vote(keys[1][1], 1, 1, d)
        assert v0.digest == v1.digest and v0.signature != v1.signature

    def test_wrong_digest(self, bls4):
        keys, cache = bls4
        vote = make_vote(keys[0][1], 0, 1, digest(b"a"))
        assert not verify_vote(cache, vote, digest(b"b"))

    def test_cross_signed(self, bls4, ed4):
        for keys, cache in (bls4, ed4):
            d = digest(b"x")
            forged = make_vote(keys[1][1], 0, 3, d)  # validator 1's key, claims to be 0
            assert not verify_vote(cache, forged, d)

    def test_round_is_bound(self, bls4):
        keys, cache = bls4
        d = digest(b"r")
        vote = make_vote(keys[0][1], 0, 7, d)
        replayed = Vote(8, vote.digest, vote.voter, vote.signature)
        assert not verify_vote(cache, replayed, d)

    def test_out_of_range_voter(self, bls4):
        keys, cache = bls4
        d = digest(b"o")
        vote = make_vote(keys[0][1], 0, 1, d)
        with pytest.raises(CertificateError):
            verify_vote(cache, Vote(1, d, 4, vote.signature), d)

    def test_three_bls_votes_make_verifying_certificate(self, bls4):
        keys, cache = bls4
        d = digest(b"three")
        votes = [make_vote(keys[i][1], i, 9, d) for i in range(3)]
        cert = assemble_certificate(cache, votes)
        assert verify_certificate_cached(cache, cert) and verify_certificate_naive(cache, cert)


class TestAssembly:
    def test_bitmap_is_complement(self, bls4):
        keys, cache = bls4
        d = digest(b"b")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 1, d) for i in (0, 1, 2)])
        assert cert.bitmap.non_signers() == [3]
        assert cert.bitmap.to_bytes() == bytes([0b1000])

    def test_full_participation(self, bls4):
        keys, cache = bls4
        d = digest(b"all")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 1, d) for i in range(4)])
        assert cert.bitmap.mask == 0
        with count_ops() as tally:
            assert verify_certificate_cached(cache, cert)
        assert tally.key_additions == 0

    def test_sub_quorum(self, bls4, ed4):
        for keys, cache in (bls4, ed4):
            d = digest(b"two")
            with pytest.raises(InsufficientQuorum):
                assemble_certificate(cache, [make_vote(keys[i][1], i, 1, d) for i in (0, 1)])

    def test_duplicate_and_mixed(self, bls4):
        keys, cache = bls4
        d = digest(b"d")
        votes = [make_vote(keys[i][1], i, 1, d) for i in (0, 1, 2)]
        with pytest.raises(DuplicateVoter):
            assemble_certificate(cache, votes + [votes[0]])
        with pytest.raises(MixedVotes):
            assemble_certificate(cache, votes + [make_vote(keys[3][1], 3, 1, digest(b"other"))])

    def test_eddsa_sorted(self, ed4):
        keys, cache = ed4
        d = digest(b"e")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 2, d) for i in (3, 0, 2)])
        assert [i for i, _ in cert.votes] == [0, 2, 3]
        assert verify_certificate_eddsa(cache, cert)


class TestBLSVerification:
    def test_minimal_quorum_uses_f_additions(self):
        keys, cache = committee(Scheme.BLS, 3, b"f3")
        d = digest(b"q")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 4, d) for i in range(7)])
        with count_ops() as tally:
            assert verify_certificate_cached(cache, cert)
        assert tally.key_additions == 3
        with count_ops() as tally:
            assert verify_certificate_naive(cache, cert)
        assert tally.key_additions == 6

    def test_replaced_signature_rejected(self, bls4):
        keys, cache = bls4
        d = digest(b"c")
        votes = [make_vote(keys[i][1], i, 1, d) for i in range(3)]
        votes[1] = Vote(1, d, 1, sign(cache.params, keys[1][1], b"something else"))
        cert = assemble_certificate(cache, votes)
        assert not verify_certificate_cached(cache, cert)
        assert not verify_certificate_naive(cache, cert)

    def test_sub_quorum_bitmap_rejected_by_both(self, bls4):
        keys, cache = bls4
        d = digest(b"s")
        sig = aggregate_signatures([make_vote(keys[i][1], i, 1, d).signature for i in (0, 1)])
        cert = BlsCertificate(1, d, sig, SignerBitmap.from_signers(4, [0, 1]))
        for path in (verify_certificate_cached, verify_certificate_naive):
            with pytest.raises(InsufficientQuorum):
                path(cache, cert)

    def test_bitmap_length_mismatch(self, bls4):
        keys, cache = bls4
        d = digest(b"m")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 1, d) for i in range(3)])
        bad = BlsCertificate(1, d, cert.signature, SignerBitmap(5, 0b11000))
        with pytest.raises(MalformedCertificate):
            verify_certificate_cached(cache, bad)

    def test_n40_addition_counts(self):
        keys, cache = committee(Scheme.BLS, 13, b"n40")
        d = digest(b"40")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 1, d) for i in range(27)])
        with count_ops() as naive:
            assert verify_certificate_naive(cache, cert)
        with count_ops() as cached:
            assert verify_certificate_cached(cache, cert)
        assert naive.key_additions == 26
        assert cached.key_additions == 13

    def test_exhaustive_n4_differential(self, bls4):
        keys, cache = bls4
        d = digest(b"exh")
        shares = {i: make_vote(keys[i][1], i, 1, d).signature for i in range(4)}
        wrong = {i: sign(cache.params, keys[i][1], vote_message(1, digest(b"not it"))) for i in range(4)}
        for size in range(1, 5):
            for signers in itertools.combinations(range(4), size):
                for corrupt in (None,) + signers:
                    sig = aggregate_signatures([wrong[i] if i == corrupt else shares[i] for i in signers])
                    cert = BlsCertificate(1, d, sig, SignerBitmap.from_signers(4, signers))
                    assert outcome(verify_certificate_cached, cache, cert) == outcome(
                        verify_certificate_naive, cache, cert
                    )
                    if size >= 3:
                        assert outcome(verify_certificate_cached, cache, cert) == (corrupt is None)

    @pytest.mark.parametrize("f", [2, 3, 4])
    def test_randomized_differential(self, f):
        keys, cache = committee(Scheme.BLS, f, b"rd")
        rng = random.Random(f)
        cases = random_certificates(cache, keys, rng, 120)
        for cert in cases:
            cached = outcome(verify_certificate_cached, cache, cert)
            assert cached == outcome(verify_certificate_naive, cache, cert)
            if cached is True:
                apk = aggregate_keys(cache.params, [cache.public_keys[i] for i in cert.bitmap.signers()])
                assert msp_verify(cache.params, apk, cert.signature, vote_message(cert.round, cert.digest))


def outcome(path, cache, cert):
    try:
        return path(cache, cert)
    except InsufficientQuorum:
        return "sub-quorum"


def random_certificates(cache, keys, rng, count, digests=4):
    """Certificates over a few pre-signed digests with random signer sets and corruptions."""
    labels = [digest(b"rand%d" % k) for k in range(digests)]
    shares = {
        (k, i): make_vote(keys[i][1], i, 3, labels[k]).signature for k in range(digests) for i in range(cache.n)
    }
    certs = []
    for _ in range(count):
        k = rng.randrange(digests)
        kind = rng.choice(["honest", "honest", "corrupt", "wrong-digest", "sub-quorum"])
        low = 1 if kind == "sub-quorum" else cache.quorum
        high = cache.quorum - 1 if kind == "sub-quorum" else cache.n
        signers = rng.sample(range(cache.n), rng.randint(low, high))
        sigs = [shares[(k, i)] for i in signers]
        cert_digest = labels[k]
        if kind == "corrupt":
            victim = rng.randrange(len(signers))
            sigs[victim] = shares[((k + 1) % digests, signers[victim])]
        elif kind == "wrong-digest":
            cert_digest = labels[(k + 1) % digests]
        certs.append(
            BlsCertificate(3, cert_digest, aggregate_signatures(sigs), SignerBitmap.from_signers(cache.n, signers))
        )
    return certs


class TestEddsaVerification:
    def test_three_of_four(self, ed4):
        keys, cache = ed4
        d = digest(b"ok")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 1, d) for i in (0, 1, 3)])
        assert verify_certificate_eddsa(cache, cert)
        assert verify_certificate(cache, cert)

    def test_one_bad_signature(self, ed4):
        keys, cache = ed4
        d = digest(b"bad")
        votes = [make_vote(keys[i][1], i, 1, d) for i in (0, 1, 2)]
        votes[2] = make_vote(keys[2][1], 2, 1, digest(b"elsewhere"))
        cert = EddsaCertificate(1, d, tuple((v.voter, v.signature) for v in votes))
        assert not verify_certificate_eddsa(cache, cert)

    def test_duplicates_and_sub_quorum(self, ed4):
        keys, cache = ed4
        d = digest(b"dq")
        v = [make_vote(keys[i][1], i, 1, d) for i in range(4)]
        with pytest.raises(DuplicateVoter):
            verify_certificate_eddsa(cache, EddsaCertificate(1, d, ((0, v[0].signature), (0, v[0].signature), (1, v[1].signature))))
        with pytest.raises(InsufficientQuorum):
            verify_certificate_eddsa(cache, EddsaCertificate(1, d, ((0, v[0].signature), (1, v[1].signature))))

    def test_41_of_60_matches_individual(self):
        keys, cache = committee(Scheme.EDDSA, 20, b"e61")
        assert cache.n == 61
        d = digest(b"41")
        rng = random.Random(41)
        signers = sorted(rng.sample(range(61), 41))
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 2, d) for i in signers])
        assert verify_certificate_eddsa(cache, cert)
        assert all(verify_vote(cache, Vote(2, d, i, s), d) for i, s in cert.votes)


class TestEncoding:
    def test_bls_size_and_roundtrip(self, bls4):
        keys, cache = bls4
        d = digest(b"enc")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 77, d) for i in (0, 2, 3)])
        data = encode_certificate(cert)
        assert len(data) == 41 + 48 + 1 == bls_certificate_size(4)
        assert data[0] == Scheme.BLS and data[1:9] == (77).to_bytes(8, "big") and data[9:41] == d
        assert decode_certificate(data, 4) == cert

    def test_eddsa_size_and_roundtrip(self, ed4):
        keys, cache = ed4
        d = digest(b"enc")
        cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 5, d) for i in (1, 2, 3)])
        data = encode_certificate(cert)
        assert len(data) == 41 + 3 * 66 == eddsa_certificate_size(3)
        assert decode_certificate(data, 4) == cert

    def test_embedded_keys_cost_32_bytes_per_signer(self, ed4):
        keys, cache = ed4
        d = digest(b"emb")
        for signers in ((0, 1, 2), (0, 1, 2, 3)):
            cert = assemble_certificate(cache, [make_vote(keys[i][1], i, 5, d) for i in signers])
            diff = len(encode_certificate_with_keys(cert, cache)) - len(encode_certificate(cert))
            assert diff == 32 * len(signers)

    def test_truncated_and_mismatched(self, bls4, ed4):
        keys, cache = bls4
        d = digest(b"t")
        data = encode_certificate(assemble_certificate(cache, [make_vote(keys[i][1], i, 1, d) for i in range(3)]))
        for bad in (data[:-1], data[:40], data + b"\x00"):
            with pytest.raises(MalformedCertificate):
                decode_certificate(bad, 4)
        with pytest.raises(MalformedCertificate):
            decode_certificate(data, 9)  # needs a 2-byte bitmap
        with pytest.raises(MalformedCertificate):
            decode_certificate(data[:-1] + bytes([0b10000]), 4)  # padding bit
        ekeys, ecache = ed4
        edata = encode_certificate(assemble_certificate(ecache, [make_vote(ekeys[i][1], i, 1, d) for i in range(3)]))
        with pytest.raises(MalformedCertificate):
            decode_certificate(edata[:-5], 4)
        with pytest.raises(MalformedCertificate):
            decode_certificate(edata, 2)

    def test_random_roundtrip_and_injectivity(self):
        rng = random.Random(5)
        keys, cache = committee(Scheme.BLS, 3, b"inj")
        ekeys, ecache = committee(Scheme.EDDSA, 3, b"inj")
        seen = {}
        for _ in range(40):
            round_ = rng.randrange(1 << 40)
            d = rng.randbytes(32)
            signers = rng.sample(range(10), rng.randint(7, 10))
            for ks, c in ((keys, cache), (ekeys, ecache)):
                cert = assemble_certificate(c, [make_vote(ks[i][1], i, round_, d) for i in signers])
                data = encode_certificate(cert)
                assert decode_certificate(data, 10) == cert
                assert seen.setdefault(data, cert) == cert
        assert len(seen) == 80

    def test_storage_figures_n40(self):
        assert bls_certificate_size(40) <= 128
        assert eddsa_certificate_size(40) == 41 + 40 * (2 + 64)
