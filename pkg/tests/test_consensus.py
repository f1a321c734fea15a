import dataclasses
from collections import deque

import pytest

from sigbench.certify import BlsCertificate, EddsaCertificate, Vote, assemble_certificate, make_vote
from sigbench.consensus import (
    GENESIS,
    Block,
    Broadcast,
    Committed,
    CommitteeConfig,
    ConsensusError,
    DropReason,
    Dropped,
    EnteredRound,
    Mempool,
    MsgTag,
    Proposal,
    Replica,
    SafetyViolation,
    Send,
    StartTimer,
    TimeoutNotice,
    TimerKind,
    ValidatorState,
    block_signing_bytes,
    decode_message,
    encode_message,
    handle_certificate,
    handle_proposal,
    handle_vote,
    leader_for,
    on_grace_expired,
    on_leader_timeout,
    propose,
    wire_size,
)
from sigbench.sigscheme import Scheme, prove_possession, setup, sign

from conftest import make_keys


def committee(params, n, **options):
    pairs = make_keys(params, n, tag=b"committee")
    proofs = [prove_possession(params, sk, pk) for pk, sk in pairs]
    config = CommitteeConfig.from_keys([pk for pk, _ in pairs], proofs, **options)
    return config, [sk for _, sk in pairs]


@pytest.fixture(scope="module")
def bls4(bls):
    return committee(bls, 4)


@pytest.fixture(scope="module")
def ed4(eddsa):
    return committee(eddsa, 4)


def states(config, secret_keys):
    return [ValidatorState(i, sk) for i, sk in enumerate(secret_keys)]


def signed_block(config, secret_keys, round_, payload=(), parent=GENESIS):
    leader = leader_for(config, round_)
    msg = block_signing_bytes(round_, payload, parent, leader)
    sk = secret_keys[leader]
    return Block(round_, tuple(payload), parent, leader, sign(setup(128, sk.scheme), sk, msg))


class Loopback:
    """Delivers every effect immediately, in FIFO order, with no clock."""

    def __init__(self, config, secret_keys, crashed=()):
        self.replicas = [Replica(config, i, sk) for i, sk in enumerate(secret_keys)]
        self.crashed = set(crashed)
        self.queue = deque()
        self.timers = []
        self.committed = {i: [] for i in range(config.n)}
        self.effects = []

    def _absorb(self, sender, effects):
        for e in effects:
            self.effects.append((sender, e))
            if isinstance(e, Broadcast):
                for dst in range(len(self.replicas)):
                    if dst != sender:
                        self.queue.append((sender, dst, e.message))
            elif isinstance(e, Send):
                self.queue.append((sender, e.to, e.message))
            elif isinstance(e, StartTimer):
                self.timers.append((sender, e))
            elif isinstance(e, Committed):
                self.committed[sender].append(e)

    def start(self):
        for r in self.replicas:
            if r.index not in self.crashed:
                self._absorb(r.index, r.start())

    def pump(self, until_round=None):
        while self.queue:
            if until_round is not None and max(r.current_round for r in self.replicas) >= until_round:
                return
            sender, dst, msg = self.queue.popleft()
            if dst not in self.crashed:
                self._absorb(dst, self.replicas[dst].deliver(sender, msg))

    def fire_grace(self):
        pending, self.timers = self.timers, []
        for v, t in pending:
            if t.kind is TimerKind.GRACE and v not in self.crashed:
                self._absorb(v, self.replicas[v].fire(t.kind, t.round))
            else:
                self.timers.append((v, t))

    def fire_timeouts(self, round_):
        for v, t in list(self.timers):
            if t.kind is TimerKind.LEADER_TIMEOUT and t.round == round_ and v not in self.crashed:
                self._absorb(v, self.replicas[v].fire(t.kind, t.round))

    def run_rounds(self, rounds):
        self.start()
        for _ in range(rounds):
            self.pump(rounds)
            self.fire_grace()
        self.pump(rounds)


# ---------------------------------------------------------------------------
# leader schedule and configuration

def test_leader_round_robin(ed4):
    config, _ = ed4
    assert leader_for(config, 0) == 0
    assert leader_for(config, 5) == 1
    assert [leader_for(config, r) for r in range(8)] == [0, 1, 2, 3, 0, 1, 2, 3]


def test_leader_schedule_is_shared(ed4, eddsa):
    config, _ = ed4
    other, _ = committee(eddsa, 4)
    assert all(leader_for(config, r) == leader_for(other, r) for r in range(10_000))


def test_leader_for_rejects_negative_round(ed4):
    with pytest.raises(ValueError):
        leader_for(ed4[0], -1)


def test_config_invariants(ed4):
    config, _ = ed4
    assert (config.n, config.f, config.quorum) == (4, 1, 3)
    with pytest.raises(ConsensusError):
        CommitteeConfig(config.cache, grace_ms=5_000, timeout_ms=5_000)
    with pytest.raises(ConsensusError):
        CommitteeConfig(config.cache, commit_depth=4)


# ---------------------------------------------------------------------------
# propose

def test_propose_round_zero_extends_genesis(ed4):
    config, sks = ed4
    state = ValidatorState(0, sks[0])
    block = propose(state, config, Mempool([b"x" * 512]))
    assert (block.round, block.parent, block.leader) == (0, GENESIS, 0)
    assert block.payload == (b"x" * 512,)


def test_propose_respects_block_size(ed4):
    config, sks = ed4
    pool = Mempool(i.to_bytes(4, "big") * 128 for i in range(1200))  # 600 KB of 512 B txs
    block = propose(ValidatorState(0, sks[0]), config, pool)
    assert block.payload_size <= 500_000
    assert len(block.payload) == 976
    assert len(pool) == 1200 - 976
    assert pool.pending_bytes == (1200 - 976) * 512


def test_propose_empty_block(ed4):
    config, sks = ed4
    block = propose(ValidatorState(0, sks[0]), config, Mempool())
    assert block.payload == ()


def test_only_leader_proposes(ed4):
    config, sks = ed4
    with pytest.raises(ConsensusError):
        propose(ValidatorState(1, sks[1]), config, Mempool())


@pytest.mark.parametrize("which", ["bls4", "ed4"])
def test_proposal_accepted_by_every_validator(which, request):
    config, sks = request.getfixturevalue(which)
    block = propose(ValidatorState(0, sks[0]), config, Mempool([bytes(512)] * 3))
    for state in states(config, sks):
        vote = handle_proposal(state, config, block)
        assert vote is not None and vote.digest == block.digest and vote.voter == state.index


# ---------------------------------------------------------------------------
# handle_proposal

def test_equivocation_gets_one_vote(ed4):
    config, sks = ed4
    state = ValidatorState(1, sks[1])
    first = signed_block(config, sks, 0, [b"a" * 512])
    second = signed_block(config, sks, 0, [b"b" * 512])
    assert handle_proposal(state, config, first) is not None
    assert handle_proposal(state, config, second) is None
    assert state.outbox[-1] == Dropped(DropReason.ALREADY_VOTED, "round 0")


def test_forged_leader_signature_dropped(ed4):
    config, sks = ed4
    block = signed_block(config, sks, 0)
    forged = dataclasses.replace(block, leader_signature=signed_block(config, sks, 4).leader_signature)
    state = ValidatorState(1, sks[1])
    assert handle_proposal(state, config, forged) is None
    assert state.outbox[-1].reason is DropReason.BAD_SIGNATURE


def test_wrong_leader_dropped(ed4):
    config, sks = ed4
    block = signed_block(config, sks, 0)
    impostor = dataclasses.replace(block, leader=2)
    state = ValidatorState(1, sks[1])
    assert handle_proposal(state, config, impostor) is None
    assert state.outbox[-1].reason is DropReason.BAD_LEADER


def test_unknown_parent_dropped(ed4):
    config, sks = ed4
    block = signed_block(config, sks, 1, parent=b"\x01" * 32)
    state = ValidatorState(2, sks[2])
    assert handle_proposal(state, config, block) is None
    assert state.outbox[-1].reason is DropReason.UNKNOWN_PARENT


def test_oversized_block_dropped(ed4):
    config, sks = ed4
    small = CommitteeConfig(config.cache, block_size=1024)
    block = signed_block(small, sks, 0, [bytes(512)] * 3)
    state = ValidatorState(1, sks[1])
    assert handle_proposal(state, small, block) is None
    assert state.outbox[-1].reason is DropReason.OVERSIZED


def certify_block(config, sks, block, voters=None):
    voters = range(config.n) if voters is None else voters
    votes = [make_vote(sks[i], i, block.round, block) for i in voters]
    return assemble_certificate(config.cache, votes)


def test_lock_prevents_voting_below_locked_parent(ed4):
    config, sks = ed4
    state = ValidatorState(3, sks[3])
    b0 = signed_block(config, sks, 0)
    c0 = certify_block(config, sks, b0)
    handle_certificate(state, config, c0)
    b1 = signed_block(config, sks, 1, parent=b0.digest)
    assert handle_proposal(state, config, b1) is not None  # lock moves to round 0
    # A later leader that missed C0 proposes on genesis.
    b2 = signed_block(config, sks, 2, parent=GENESIS)
    assert handle_proposal(state, config, b2) is None
    assert state.outbox[-1].reason is DropReason.LOCKED


# ---------------------------------------------------------------------------
# handle_vote and grace period

def leader_with_proposal(config, sks):
    state = ValidatorState(0, sks[0])
    block = propose(state, config, Mempool())
    state.round.proposal = block.digest
    return state, block


def test_all_votes_certify_immediately_with_empty_bitmap(bls4):
    config, sks = bls4
    state, block = leader_with_proposal(config, sks)
    results = [handle_vote(state, config, make_vote(sks[i], i, 0, block)) for i in range(4)]
    assert results[:3] == [None, None, None]
    assert StartTimer(TimerKind.GRACE, 0, config.grace_ms) in state.outbox
    cert = results[3]
    assert isinstance(cert, BlsCertificate)
    assert cert.bitmap.popcount == 0


def test_grace_expiry_certifies_quorum(bls4):
    config, sks = bls4
    state, block = leader_with_proposal(config, sks)
    for i in range(3):
        assert handle_vote(state, config, make_vote(sks[i], i, 0, block)) is None
    cert = on_grace_expired(state, config, 0)
    assert cert.bitmap.popcount == 1 and cert.bitmap.non_signers() == [3]
    # Late vote after certification is ignored.
    assert handle_vote(state, config, make_vote(sks[3], 3, 0, block)) is None


def test_below_quorum_never_certifies(bls4):
    config, sks = bls4
    state, block = leader_with_proposal(config, sks)
    for i in range(2):
        handle_vote(state, config, make_vote(sks[i], i, 0, block))
    assert not any(isinstance(e, StartTimer) for e in state.outbox)
    assert on_grace_expired(state, config, 0) is None


def test_duplicate_and_invalid_votes_dropped(ed4):
    config, sks = ed4
    state, block = leader_with_proposal(config, sks)
    vote = make_vote(sks[1], 1, 0, block)
    handle_vote(state, config, vote)
    handle_vote(state, config, vote)
    assert state.outbox[-1].reason is DropReason.DUPLICATE
    bad = Vote(0, block.digest, 2, vote.signature)
    handle_vote(state, config, bad)
    assert state.outbox[-1].reason is DropReason.BAD_VOTE
    other = make_vote(sks[3], 3, 0, b"\x05" * 32)
    handle_vote(state, config, other)
    assert state.outbox[-1].reason is DropReason.NOT_COLLECTING
    assert sorted(state.round.votes) == [1]


# ---------------------------------------------------------------------------
# handle_certificate and commit rules

def chain_of(config, sks, rounds, parent=GENESIS):
    blocks, certs = [], []
    for r in rounds:
        block = signed_block(config, sks, r, parent=parent)
        blocks.append(block)
        certs.append(certify_block(config, sks, block))
        parent = block.digest
    return blocks, certs


def test_two_chain_commits_parent(ed4):
    config, sks = ed4
    blocks, certs = chain_of(config, sks, [0, 1])
    state = ValidatorState(2, sks[2])
    for b in blocks:
        state.chain.blocks[b.digest] = b
    assert handle_certificate(state, config, certs[0]) == []
    assert handle_certificate(state, config, certs[1]) == [blocks[0]]
    assert state.chain.last_committed_round == 0


def test_gap_does_not_commit(ed4):
    config, sks = ed4
    blocks, certs = chain_of(config, sks, [0, 2])
    state = ValidatorState(2, sks[2])
    for b in blocks:
        state.chain.blocks[b.digest] = b
    assert handle_certificate(state, config, certs[0]) == []
    assert handle_certificate(state, config, certs[1]) == []


def test_three_chain_needs_three_rounds(ed4):
    _, sks = ed4
    config = CommitteeConfig(ed4[0].cache, commit_depth=3)
    blocks, certs = chain_of(config, sks, [0, 1, 2])
    state = ValidatorState(3, sks[3])
    for b in blocks:
        state.chain.blocks[b.digest] = b
    assert handle_certificate(state, config, certs[0]) == []
    assert handle_certificate(state, config, certs[1]) == []
    assert handle_certificate(state, config, certs[2]) == [blocks[0]]


def test_commit_includes_uncommitted_ancestors(ed4):
    config, sks = ed4
    blocks, certs = chain_of(config, sks, [0, 2, 3])
    state = ValidatorState(1, sks[1])
    for b in blocks:
        state.chain.blocks[b.digest] = b
    for c in certs[:2]:
        assert handle_certificate(state, config, c) == []
    assert handle_certificate(state, config, certs[2]) == blocks[:2]


def test_invalid_certificate_dropped(bls4):
    config, sks = bls4
    block = signed_block(config, sks, 0)
    cert = certify_block(config, sks, block)
    forged = dataclasses.replace(cert, digest=b"\x07" * 32)
    state = ValidatorState(1, sks[1])
    assert handle_certificate(state, config, forged) == []
    assert state.outbox[-1].reason is DropReason.BAD_CERTIFICATE
    assert b"\x07" * 32 not in state.chain.certificates


def test_conflicting_commit_raises(ed4):
    config, sks = ed4
    blocks, certs = chain_of(config, sks, [0, 1])
    state = ValidatorState(1, sks[1])
    for b in blocks:
        state.chain.blocks[b.digest] = b
    handle_certificate(state, config, certs[0])
    handle_certificate(state, config, certs[1])
    # A fork from genesis that reaches a two-chain would contradict the commit.
    fork, fork_certs = chain_of(config, sks, [2, 3])
    for b in fork:
        state.chain.blocks[b.digest] = b
    handle_certificate(state, config, fork_certs[0])
    with pytest.raises(SafetyViolation):
        handle_certificate(state, config, fork_certs[1])


# ---------------------------------------------------------------------------
# timeouts

def test_on_leader_timeout_broadcasts_once(ed4):
    config, sks = ed4
    state = ValidatorState(1, sks[1])
    state.round.round = 3
    assert on_leader_timeout(state, config) == 4
    assert on_leader_timeout(state, config) == 4
    assert state.outbox == [Broadcast(TimeoutNotice(3))]


def test_replica_timeout_advances_round(ed4):
    config, sks = ed4
    replica = Replica(config, 1, sks[1])
    replica.start()
    effects = replica.fire(TimerKind.LEADER_TIMEOUT, 0)
    assert Broadcast(TimeoutNotice(0)) in effects
    assert EnteredRound(1, "timeout") in effects
    assert replica.current_round == 1
    # Validator 1 leads round 1, so it proposes straight away.
    assert any(isinstance(e, Broadcast) and isinstance(e.message, Proposal) for e in effects)
    # A stale timer does nothing.
    assert replica.fire(TimerKind.LEADER_TIMEOUT, 0) == []


def test_f_plus_one_notices_pull_validator_forward(ed4):
    config, sks = ed4
    replica = Replica(config, 2, sks[2])
    replica.start()
    assert replica.deliver(0, TimeoutNotice(0)) == []
    effects = replica.deliver(1, TimeoutNotice(0))
    assert Broadcast(TimeoutNotice(0)) in effects
    assert replica.current_round == 1


def test_slow_leader_under_timeout_keeps_round(ed4):
    config, sks = ed4
    net = Loopback(config, sks)
    net.start()
    # No messages delivered yet: nobody has timed out, everyone stays in round 0.
    assert all(r.current_round == 0 for r in net.replicas[1:])


# ---------------------------------------------------------------------------
# end to end over loopback

@pytest.mark.parametrize("which", ["bls4", "ed4"])
def test_loopback_happy_path_two_chain(which, request):
    config, sks = request.getfixturevalue(which)
    net = Loopback(config, sks)
    net.run_rounds(6)
    for v in range(config.n):
        commits = net.committed[v]
        assert [b.round for c in commits for b in c.blocks] == list(range(len(commits)))
        assert all(c.trigger_round == c.blocks[-1].round + 1 for c in commits)
        assert len(commits) >= 4


def test_loopback_three_chain(ed4):
    _, sks = ed4
    config = CommitteeConfig(ed4[0].cache, commit_depth=3)
    net = Loopback(config, sks)
    net.run_rounds(6)
    commits = net.committed[0]
    assert commits and all(c.trigger_round == c.blocks[-1].round + 2 for c in commits)


def test_loopback_crashed_leader_recovers(ed4):
    config, sks = ed4
    net = Loopback(config, sks, crashed={0})
    net.start()
    net.pump()
    assert all(r.current_round == 0 for r in net.replicas[1:])
    net.fire_timeouts(0)
    for _ in range(8):
        net.pump(8)
        net.fire_grace()
    honest = [net.committed[v] for v in (1, 2, 3)]
    assert all(honest)
    logs = [[b.digest for c in log for b in c.blocks] for log in honest]
    k = min(map(len, logs))
    assert logs[0][:k] == logs[1][:k] == logs[2][:k]


def test_votes_go_to_leader_only(ed4):
    config, sks = ed4
    net = Loopback(config, sks)
    net.run_rounds(3)
    for sender, e in net.effects:
        if isinstance(e, Send):
            assert isinstance(e.message, Vote)
            assert e.to == leader_for(config, e.message.round)
        if isinstance(e, Broadcast) and isinstance(e.message, (BlsCertificate, EddsaCertificate)):
            assert sender == leader_for(config, e.message.round)


# ---------------------------------------------------------------------------
# wire formats

def test_canonical_block_serialization_layout():
    body = bytes(range(16)) * 2
    data = block_signing_bytes(7, [body[:16], body[16:]], b"\xaa" * 32, 3)
    assert data == (7).to_bytes(8, "big") + (32).to_bytes(4, "big") + body + b"\xaa" * 32 + (3).to_bytes(2, "big")


@pytest.mark.parametrize("which", ["bls4", "ed4"])
def test_message_roundtrip(which, request):
    config, sks = request.getfixturevalue(which)
    b0 = signed_block(config, sks, 0, [bytes([i]) * 512 for i in range(3)])
    c0 = certify_block(config, sks, b0, voters=[0, 1, 3])
    b1 = signed_block(config, sks, 1, [bytes(512)], parent=b0.digest)
    messages = [
        Proposal(b0, None),
        Proposal(b1, c0),
        make_vote(sks[2], 2, 1, b1),
        c0,
        TimeoutNotice(9),
    ]
    for msg in messages:
        data = encode_message(msg)
        assert len(data) == wire_size(msg, config.n)
        back = decode_message(data, config.scheme, config.n, 512)
        assert encode_message(back) == data
    assert encode_message(messages[0])[0] == MsgTag.PROPOSAL
    assert encode_message(messages[4]) == bytes([MsgTag.TIMEOUT]) + (9).to_bytes(8, "big")
    back = decode_message(encode_message(messages[1]), config.scheme, config.n, 512)
    assert back.block.digest == b1.digest and back.parent_cert == c0


def test_decode_rejects_garbage(ed4):
    config, sks = ed4
    with pytest.raises(ConsensusError):
        decode_message(b"", Scheme.EDDSA, 4, 512)
    with pytest.raises(ConsensusError):
        decode_message(b"\x09", Scheme.EDDSA, 4, 512)
    data = encode_message(Proposal(signed_block(config, sks, 0, [bytes(512)]), None))
    with pytest.raises(ConsensusError):
        decode_message(data[:-3], Scheme.EDDSA, 4, 512)
    with pytest.raises(ConsensusError):
        decode_message(data, Scheme.EDDSA, 4, 500)
