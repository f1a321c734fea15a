"""Round-based committee consensus: propose, vote, certify.

Each round has one leader (``round mod n``). The leader broadcasts a signed
block that extends the highest certified block it knows, validators send
their votes back to the leader only, and the leader broadcasts a certificate
once it holds ``2f + 1`` votes and a short grace period has passed (or all
``n`` votes arrived). A block commits once it heads a chain of two (or three)
certified blocks at consecutive rounds.

The state machine is event driven and never reads a clock. The functions
below mutate a :class:`ValidatorState` and append side effects to its outbox;
:class:`Replica` wires them to incoming messages and timers, and whoever
drives the replica (the simulator, or a test) performs the effects.

Rounds can also advance on timeout. A validator that sees no certificate for
its round within the leader timeout broadcasts a timeout notice and moves to
the next round; ``f + 1`` notices for a round pull everyone else along.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence, Union

from sigbench.certify import (
    DIGEST_SIZE,
    Certificate,
    CertificateError,
    KeyCache,
    Vote,
    assemble_certificate,
    bls_certificate_size,
    build_key_cache,
    decode_certificate,
    eddsa_certificate_size,
    encode_certificate,
    verify_certificate,
    verify_vote,
    vote_message,
)
from sigbench.sigscheme import (
    ProofOfPossession,
    PublicKey,
    Scheme,
    SecretKey,
    SignatureValue,
    setup,
    sign,
    verify,
)

log = logging.getLogger(__name__)

GENESIS = bytes(DIGEST_SIZE)
GENESIS_ROUND = -1

_BLOCK_HEAD = struct.Struct(">QI")
_BLOCK_TAIL = struct.Struct(">32sH")
_VOTE = struct.Struct(">BQ32sH")
_TIMEOUT = struct.Struct(">BQ")


class ConsensusError(ValueError):
    """Invalid committee configuration or wire data."""


class SafetyViolation(RuntimeError):
    """A commit would contradict an earlier commit at this validator."""


class DropReason(enum.Enum):
    BAD_LEADER = "bad-leader"
    BAD_SIGNATURE = "bad-signature"
    UNKNOWN_PARENT = "unknown-parent"
    BAD_PARENT = "bad-parent"
    STALE_ROUND = "stale-round"
    ALREADY_VOTED = "already-voted"
    LOCKED = "locked"
    BAD_VOTE = "bad-vote"
    NOT_COLLECTING = "not-collecting"
    DUPLICATE = "duplicate"
    BAD_CERTIFICATE = "bad-certificate"
    OVERSIZED = "oversized"


# ---------------------------------------------------------------------------
# configuration and blocks

@dataclass(frozen=True, eq=False)
class CommitteeConfig:
    """Committee membership and protocol timing.

    ``commit_depth`` selects the commit rule: 2 for the two-chain rule, 3 for
    the original three-chain rule.
    """

    cache: KeyCache
    block_size: int = 500_000
    grace_ms: float = 75.0
    timeout_ms: float = 5_000.0
    commit_depth: int = 2
    tx_size: int = 512

    def __post_init__(self):
        if self.cache.n != 3 * self.cache.f + 1:
            raise ConsensusError("committee size must be 3f + 1")
        if not 0 <= self.grace_ms < self.timeout_ms:
            raise ConsensusError("grace period must be shorter than the leader timeout")
        if self.commit_depth not in (2, 3):
            raise ConsensusError("commit_depth must be 2 or 3")
        if self.block_size < 0 or self.tx_size <= 0:
            raise ConsensusError("block and transaction sizes must be positive")

    @classmethod
    def from_keys(
        cls,
        public_keys: Sequence[PublicKey],
        proofs: Sequence[ProofOfPossession] | None = None,
        **options,
    ) -> "CommitteeConfig":
        f = (len(public_keys) - 1) // 3
        return cls(build_key_cache(public_keys, f, proofs), **options)

    @property
    def n(self) -> int:
        return self.cache.n

    @property
    def f(self) -> int:
        return self.cache.f

    @property
    def quorum(self) -> int:
        return self.cache.quorum

    @property
    def scheme(self) -> Scheme:
        return self.cache.scheme

    @property
    def public_keys(self) -> tuple[PublicKey, ...]:
        return self.cache.public_keys


def leader_for(config: CommitteeConfig, round_: int) -> int:
    if round_ < 0:
        raise ValueError("rounds start at 0")
    return round_ % config.n


def block_signing_bytes(round_: int, payload: Sequence[bytes], parent: bytes, leader: int) -> bytes:
    """Canonical serialization: round, payload length, payload, parent, leader."""
    body = b"".join(payload)
    return _BLOCK_HEAD.pack(round_, len(body)) + body + _BLOCK_TAIL.pack(parent, leader)


@dataclass(frozen=True, eq=False)
class Block:
    round: int
    payload: tuple[bytes, ...]
    parent: bytes
    leader: int
    leader_signature: SignatureValue

    @cached_property
    def signing_bytes(self) -> bytes:
        return block_signing_bytes(self.round, self.payload, self.parent, self.leader)

    @cached_property
    def digest(self) -> bytes:
        return hashlib.sha256(self.signing_bytes).digest()

    @property
    def payload_size(self) -> int:
        return sum(map(len, self.payload))

    @property
    def wire_size(self) -> int:
        return _BLOCK_HEAD.size + self.payload_size + _BLOCK_TAIL.size + len(self.leader_signature.data)

    def __repr__(self) -> str:
        return f"Block(round={self.round}, txs={len(self.payload)}, digest={self.digest[:4].hex()})"


class Mempool:
    """FIFO of pending transactions."""

    def __init__(self, txs: Iterable[bytes] = ()):
        self._txs = deque(txs)
        self._bytes = sum(map(len, self._txs))

    def add(self, tx: bytes) -> None:
        self._txs.append(tx)
        self._bytes += len(tx)

    @property
    def pending_bytes(self) -> int:
        return self._bytes

    def __len__(self) -> int:
        return len(self._txs)

    def take(self, limit: int) -> list[bytes]:
        out, used = [], 0
        while self._txs and used + len(self._txs[0]) <= limit:
            tx = self._txs.popleft()
            out.append(tx)
            used += len(tx)
        self._bytes -= used
        return out


# ---------------------------------------------------------------------------
# messages

@dataclass(frozen=True)
class Proposal:
    block: Block
    parent_cert: Optional[Certificate]  # None when the parent is genesis


@dataclass(frozen=True)
class TimeoutNotice:
    round: int


Message = Union[Proposal, Vote, Certificate, TimeoutNotice]


class MsgTag(enum.IntEnum):
    PROPOSAL = 1
    VOTE = 2
    CERTIFICATE = 3
    TIMEOUT = 4


def message_tag(msg: Message) -> MsgTag:
    if isinstance(msg, Proposal):
        return MsgTag.PROPOSAL
    if isinstance(msg, Vote):
        return MsgTag.VOTE
    if isinstance(msg, TimeoutNotice):
        return MsgTag.TIMEOUT
    return MsgTag.CERTIFICATE


def encode_message(msg: Message) -> bytes:
    """Tag byte followed by the body.

    A proposal body is the block's canonical serialization, the leader
    signature, then a length-prefixed parent certificate (empty for genesis).
    """
    if isinstance(msg, Proposal):
        b = msg.block
        cert = b"" if msg.parent_cert is None else encode_certificate(msg.parent_cert)
        return (
            bytes([MsgTag.PROPOSAL]) + b.signing_bytes + b.leader_signature.data
            + len(cert).to_bytes(4, "big") + cert
        )
    if isinstance(msg, Vote):
        return _VOTE.pack(MsgTag.VOTE, msg.round, msg.digest, msg.voter) + msg.signature.data
    if isinstance(msg, TimeoutNotice):
        return _TIMEOUT.pack(MsgTag.TIMEOUT, msg.round)
    return bytes([MsgTag.CERTIFICATE]) + encode_certificate(msg)


def wire_size(msg: Message, n: int) -> int:
    """Encoded length of ``msg`` without building the bytes."""
    def cert_size(cert) -> int:
        if cert.scheme is Scheme.BLS:
            return bls_certificate_size(n)
        return eddsa_certificate_size(len(cert.votes))

    if isinstance(msg, Proposal):
        cert = 0 if msg.parent_cert is None else cert_size(msg.parent_cert)
        return 1 + msg.block.wire_size + 4 + cert
    if isinstance(msg, Vote):
        return _VOTE.size + len(msg.signature.data)
    if isinstance(msg, TimeoutNotice):
        return _TIMEOUT.size
    return 1 + cert_size(msg)


def decode_message(data: bytes, scheme: Scheme, n: int, tx_size: int) -> Message:
    if not data:
        raise ConsensusError("empty message")
    sig_size = 48 if scheme is Scheme.BLS else 64
    try:
        tag = MsgTag(data[0])
    except ValueError:
        raise ConsensusError(f"unknown message tag {data[0]}") from None
    if tag is MsgTag.VOTE:
        if len(data) != _VOTE.size + sig_size:
            raise ConsensusError("vote has wrong length")
        _, round_, digest, voter = _VOTE.unpack_from(data)
        return Vote(round_, digest, voter, SignatureValue.from_bytes(scheme, data[_VOTE.size:]))
    if tag is MsgTag.TIMEOUT:
        if len(data) != _TIMEOUT.size:
            raise ConsensusError("timeout notice has wrong length")
        return TimeoutNotice(_TIMEOUT.unpack(data)[1])
    if tag is MsgTag.CERTIFICATE:
        return decode_certificate(data[1:], n)

    pos = 1
    if len(data) < pos + _BLOCK_HEAD.size:
        raise ConsensusError("truncated proposal")
    round_, body_len = _BLOCK_HEAD.unpack_from(data, pos)
    pos += _BLOCK_HEAD.size
    if body_len % tx_size:
        raise ConsensusError("payload is not a whole number of transactions")
    body = data[pos:pos + body_len]
    pos += body_len
    if len(data) < pos + _BLOCK_TAIL.size + sig_size + 4:
        raise ConsensusError("truncated proposal")
    parent, leader = _BLOCK_TAIL.unpack_from(data, pos)
    pos += _BLOCK_TAIL.size
    signature = SignatureValue.from_bytes(scheme, data[pos:pos + sig_size])
    pos += sig_size
    cert_len = int.from_bytes(data[pos:pos + 4], "big")
    pos += 4
    if len(data) != pos + cert_len:
        raise ConsensusError("proposal length mismatch")
    parent_cert = decode_certificate(data[pos:], n) if cert_len else None
    payload = tuple(body[i:i + tx_size] for i in range(0, body_len, tx_size))
    return Proposal(Block(round_, payload, parent, leader, signature), parent_cert)


# ---------------------------------------------------------------------------
# crypto hooks

class Crypto:
    """The signature operations the state machine performs.

    The simulator substitutes a subclass that charges simulated CPU time and
    memoizes results; the default just calls through.
    """

    def sign(self, sk: SecretKey, message: bytes) -> SignatureValue:
        return sign(setup(128, sk.scheme), sk, message)

    def verify(self, pk: PublicKey, message: bytes, sig: SignatureValue) -> bool:
        return verify(setup(128, pk.scheme), pk, sig, message)

    def block_digest(self, block: Block) -> bytes:
        return block.digest

    def verify_vote(self, cache: KeyCache, vote: Vote, digest: bytes) -> bool:
        return verify_vote(cache, vote, digest)

    def assemble(self, cache: KeyCache, votes: Sequence[Vote]) -> Certificate:
        return assemble_certificate(cache, votes)

    def verify_certificate(self, cache: KeyCache, cert: Certificate) -> bool:
        return verify_certificate(cache, cert)


# ---------------------------------------------------------------------------
# state

@dataclass
class ChainState:
    blocks: dict[bytes, Block] = field(default_factory=dict)
    certificates: dict[bytes, Certificate] = field(default_factory=dict)
    certified_round: dict[bytes, int] = field(default_factory=lambda: {GENESIS: GENESIS_ROUND})
    highest_cert: Optional[Certificate] = None
    last_committed: bytes = GENESIS
    last_committed_round: int = GENESIS_ROUND
    last_voted_round: int = -1
    locked_round: int = GENESIS_ROUND
    committed: list[tuple[int, bytes]] = field(default_factory=list)
    pending_commits: set[bytes] = field(default_factory=set)

    @property
    def highest_certified_round(self) -> int:
        return GENESIS_ROUND if self.highest_cert is None else self.highest_cert.round

    @property
    def highest_certified(self) -> bytes:
        return GENESIS if self.highest_cert is None else self.highest_cert.digest


@dataclass
class RoundState:
    round: int = 0
    proposal: Optional[bytes] = None
    votes: dict[int, Vote] = field(default_factory=dict)
    grace_armed: bool = False
    certified: bool = False
    timeouts: dict[int, set[int]] = field(default_factory=dict)
    timeout_sent: set[int] = field(default_factory=set)


# Effects, performed by whoever drives the replica.

@dataclass(frozen=True)
class Broadcast:
    message: Message


@dataclass(frozen=True)
class Send:
    to: int
    message: Message


class TimerKind(enum.Enum):
    LEADER_TIMEOUT = "timeout"
    GRACE = "grace"


@dataclass(frozen=True)
class StartTimer:
    kind: TimerKind
    round: int
    delay_ms: float


@dataclass(frozen=True)
class Committed:
    blocks: tuple[Block, ...]
    trigger_round: int  # round of the certificate that completed the chain


@dataclass(frozen=True)
class EnteredRound:
    round: int
    via: str


@dataclass(frozen=True)
class Dropped:
    reason: DropReason
    detail: str


Effect = Union[Broadcast, Send, StartTimer, Committed, EnteredRound, Dropped]


@dataclass
class ValidatorState:
    index: int
    secret_key: SecretKey
    chain: ChainState = field(default_factory=ChainState)
    round: RoundState = field(default_factory=RoundState)
    crypto: Crypto = field(default_factory=Crypto)
    outbox: list[Effect] = field(default_factory=list)

    def drop(self, reason: DropReason, detail: str = "") -> None:
        log.debug("validator %d dropped message: %s %s", self.index, reason.value, detail)
        self.outbox.append(Dropped(reason, detail))


# ---------------------------------------------------------------------------
# protocol steps

def propose(state: ValidatorState, config: CommitteeConfig, mempool: Mempool) -> Block:
    """Build and sign this round's block on top of the highest certificate.

    Takes as many whole transactions as fit in ``config.block_size``; the rest
    stay queued. An empty mempool yields an empty block.
    """
    round_ = state.round.round
    if leader_for(config, round_) != state.index:
        raise ConsensusError(f"validator {state.index} does not lead round {round_}")
    payload = tuple(mempool.take(config.block_size))
    parent = state.chain.highest_certified
    message = block_signing_bytes(round_, payload, parent, state.index)
    block = Block(round_, payload, parent, state.index, state.crypto.sign(state.secret_key, message))
    block.__dict__["signing_bytes"] = message
    return block


def _check_proposal(state: ValidatorState, config: CommitteeConfig, block: Block) -> Optional[DropReason]:
    if not 0 <= block.round or block.leader != leader_for(config, block.round):
        return DropReason.BAD_LEADER
    if block.payload_size > config.block_size:
        return DropReason.OVERSIZED
    parent_round = state.chain.certified_round.get(block.parent)
    if parent_round is None:
        return DropReason.UNKNOWN_PARENT
    if parent_round >= block.round:
        return DropReason.BAD_PARENT
    state.crypto.block_digest(block)
    pk = config.public_keys[block.leader]
    if not state.crypto.verify(pk, block.signing_bytes, block.leader_signature):
        return DropReason.BAD_SIGNATURE
    return None


def handle_proposal(state: ValidatorState, config: CommitteeConfig, block: Block) -> Optional[Vote]:
    """Store a proposed block and vote for it if every voting rule holds.

    The parent must already be certified here, so callers process any
    certificate that travelled with the proposal first.
    """
    reason = _check_proposal(state, config, block)
    if reason is not None:
        state.drop(reason, f"round {block.round}")
        return None
    state.chain.blocks.setdefault(block.digest, block)
    return _vote_for(state, block)


def _vote_for(state: ValidatorState, block: Block) -> Optional[Vote]:
    chain = state.chain
    if block.round < state.round.round:
        state.drop(DropReason.STALE_ROUND, f"round {block.round} < {state.round.round}")
        return None
    if block.round <= chain.last_voted_round:
        state.drop(DropReason.ALREADY_VOTED, f"round {block.round}")
        return None
    parent_round = chain.certified_round[block.parent]
    if parent_round < chain.locked_round:
        state.drop(DropReason.LOCKED, f"parent round {parent_round} < lock {chain.locked_round}")
        return None
    chain.last_voted_round = block.round
    chain.locked_round = max(chain.locked_round, parent_round)
    digest = block.digest
    return Vote(
        block.round, digest, state.index,
        state.crypto.sign(state.secret_key, vote_message(block.round, digest)),
    )


def handle_vote(state: ValidatorState, config: CommitteeConfig, vote: Vote) -> Optional[Certificate]:
    """Collect a vote on this leader's proposal.

    The ``2f + 1``-th vote arms the grace timer; the ``n``-th assembles the
    certificate right away.
    """
    rs = state.round
    if rs.proposal is None or rs.certified or vote.round != rs.round or vote.digest != rs.proposal:
        state.drop(DropReason.NOT_COLLECTING, f"vote from {vote.voter} for round {vote.round}")
        return None
    if vote.voter in rs.votes:
        state.drop(DropReason.DUPLICATE, f"vote from {vote.voter}")
        return None
    try:
        valid = vote.voter == state.index or state.crypto.verify_vote(config.cache, vote, rs.proposal)
    except CertificateError:
        valid = False
    if not valid:
        state.drop(DropReason.BAD_VOTE, f"vote from {vote.voter}")
        return None
    rs.votes[vote.voter] = vote
    if len(rs.votes) == config.n:
        return _certify(state, config)
    if len(rs.votes) >= config.quorum and not rs.grace_armed:
        rs.grace_armed = True
        state.outbox.append(StartTimer(TimerKind.GRACE, rs.round, config.grace_ms))
    return None


def on_grace_expired(state: ValidatorState, config: CommitteeConfig, round_: int) -> Optional[Certificate]:
    rs = state.round
    if rs.round != round_ or rs.certified or len(rs.votes) < config.quorum:
        return None
    return _certify(state, config)


def _certify(state: ValidatorState, config: CommitteeConfig) -> Certificate:
    rs = state.round
    rs.certified = True
    votes = [rs.votes[i] for i in sorted(rs.votes)]
    return state.crypto.assemble(config.cache, votes)


def handle_certificate(
    state: ValidatorState, config: CommitteeConfig, cert: Certificate, trusted: bool = False
) -> list[Block]:
    """Record a certificate and return the blocks it commits, oldest first.

    Advancing the round is left to the caller (see :meth:`Replica.deliver`).
    ``trusted`` skips verification for certificates this validator assembled.
    """
    chain = state.chain
    if cert.digest in chain.certificates:
        return []
    if not trusted:
        try:
            ok = state.crypto.verify_certificate(config.cache, cert)
        except (CertificateError, ValueError):
            ok = False
        if not ok:
            state.drop(DropReason.BAD_CERTIFICATE, f"round {cert.round}")
            return []
    chain.certificates[cert.digest] = cert
    chain.certified_round[cert.digest] = cert.round
    if cert.round > chain.highest_certified_round:
        chain.highest_cert = cert
    return _try_commit(state, config, cert.digest)


def _try_commit(state: ValidatorState, config: CommitteeConfig, certified: bytes) -> list[Block]:
    """Apply the commit rule with ``certified`` as the newest certified block."""
    chain = state.chain
    if chain.certified_round[certified] <= chain.last_committed_round:
        chain.pending_commits.discard(certified)
        return []
    head = certified
    for _ in range(config.commit_depth - 1):
        block = chain.blocks.get(head)
        if block is None:
            chain.pending_commits.add(certified)
            return []
        parent_round = chain.certified_round.get(block.parent)
        if parent_round is None or parent_round != block.round - 1:
            return []
        head = block.parent
    chain.pending_commits.discard(certified)
    return _commit_through(state, head)


def _commit_through(state: ValidatorState, target: bytes) -> list[Block]:
    chain = state.chain
    target_round = chain.certified_round[target]
    if target_round <= chain.last_committed_round:
        return []
    path, cursor = [], target
    while cursor != chain.last_committed:
        round_ = chain.certified_round.get(cursor)
        if round_ is not None and round_ <= chain.last_committed_round:
            raise SafetyViolation(
                f"validator {state.index}: chain through round {round_} conflicts with "
                f"commit at round {chain.last_committed_round}"
            )
        block = chain.blocks.get(cursor)
        if block is None:
            return []
        path.append(block)
        cursor = block.parent
    path.reverse()
    for block in path:
        chain.committed.append((block.round, block.digest))
    chain.last_committed = target
    chain.last_committed_round = target_round
    _prune(chain)
    return path


def _prune(chain: ChainState) -> None:
    # Committed bodies are no longer needed for voting or commit walks.
    cutoff = chain.last_committed_round
    for digest in [d for d, b in chain.blocks.items() if b.round < cutoff]:
        del chain.blocks[digest]


def on_leader_timeout(state: ValidatorState, config: CommitteeConfig) -> int:
    """Give up on the current round: broadcast a notice and return the next round."""
    rs = state.round
    if rs.round not in rs.timeout_sent:
        rs.timeout_sent.add(rs.round)
        state.outbox.append(Broadcast(TimeoutNotice(rs.round)))
    return rs.round + 1


# ---------------------------------------------------------------------------
# event loop glue

class Replica:
    """One validator: routes messages and timers to the protocol steps.

    Every entry point returns the effects produced while handling the event.
    """

    def __init__(
        self,
        config: CommitteeConfig,
        index: int,
        secret_key: SecretKey,
        mempool: Mempool | None = None,
        crypto: Crypto | None = None,
    ):
        self.config = config
        self.mempool = mempool if mempool is not None else Mempool()
        self.state = ValidatorState(index, secret_key, crypto=crypto or Crypto())
        self._started = False

    @property
    def index(self) -> int:
        return self.state.index

    @property
    def current_round(self) -> int:
        return self.state.round.round

    @property
    def chain(self) -> ChainState:
        return self.state.chain

    def _drain(self) -> list[Effect]:
        out, self.state.outbox = self.state.outbox, []
        return out

    def start(self) -> list[Effect]:
        if not self._started:
            self._started = True
            self._enter_round(0, "start")
        return self._drain()

    def deliver(self, sender: int, message: Message) -> list[Effect]:
        if isinstance(message, Proposal):
            self._on_proposal(message)
        elif isinstance(message, Vote):
            self._on_vote(message)
        elif isinstance(message, TimeoutNotice):
            self._on_timeout_notice(sender, message.round)
        else:
            self._on_certificate(message)
        return self._drain()

    def fire(self, kind: TimerKind, round_: int) -> list[Effect]:
        if kind is TimerKind.GRACE:
            cert = on_grace_expired(self.state, self.config, round_)
            if cert is not None:
                self._broadcast_certificate(cert)
        elif round_ == self.current_round:
            self._enter_round(on_leader_timeout(self.state, self.config), "timeout")
        return self._drain()

    # -- internals

    def _enter_round(self, round_: int, via: str) -> None:
        state = self.state
        timeouts, sent = state.round.timeouts, state.round.timeout_sent
        state.round = RoundState(round_, timeouts={r: s for r, s in timeouts.items() if r >= round_},
                                 timeout_sent={r for r in sent if r >= round_})
        state.outbox.append(EnteredRound(round_, via))
        state.outbox.append(StartTimer(TimerKind.LEADER_TIMEOUT, round_, self.config.timeout_ms))
        if leader_for(self.config, round_) == self.index:
            self._lead()

    def _lead(self) -> None:
        state = self.state
        block = propose(state, self.config, self.mempool)
        state.chain.blocks[block.digest] = block
        state.round.proposal = block.digest
        state.outbox.append(Broadcast(Proposal(block, state.chain.highest_cert)))
        vote = _vote_for(state, block)
        if vote is not None:
            self._collect(vote)

    def _collect(self, vote: Vote) -> None:
        cert = handle_vote(self.state, self.config, vote)
        if cert is not None:
            self._broadcast_certificate(cert)

    def _broadcast_certificate(self, cert: Certificate) -> None:
        self.state.outbox.append(Broadcast(cert))
        self._accept_certificate(cert, trusted=True)

    def _accept_certificate(self, cert: Certificate, trusted: bool = False) -> None:
        committed = handle_certificate(self.state, self.config, cert, trusted=trusted)
        if committed:
            self.state.outbox.append(Committed(tuple(committed), cert.round))
        if cert.digest in self.chain.certificates and cert.round >= self.current_round:
            self._enter_round(cert.round + 1, "certificate")

    def _retry_pending(self) -> None:
        for digest in sorted(self.chain.pending_commits, key=self.chain.certified_round.get):
            committed = _try_commit(self.state, self.config, digest)
            if committed:
                self.state.outbox.append(Committed(tuple(committed), self.chain.certified_round[digest]))

    def _on_proposal(self, proposal: Proposal) -> None:
        block = proposal.block
        cert = proposal.parent_cert
        if cert is not None:
            if cert.digest != block.parent:
                self.state.drop(DropReason.BAD_PARENT, f"round {block.round}")
                return
            self._accept_certificate(cert)
        reason = _check_proposal(self.state, self.config, block)
        if reason is not None:
            self.state.drop(reason, f"round {block.round}")
            return
        self.chain.blocks.setdefault(block.digest, block)
        if block.round > self.current_round:
            self._enter_round(block.round, "proposal")
        vote = _vote_for(self.state, block)
        if self.chain.pending_commits:
            self._retry_pending()
        if vote is None:
            return
        if block.leader == self.index:
            self._collect(vote)
        else:
            self.state.outbox.append(Send(block.leader, vote))

    def _on_vote(self, vote: Vote) -> None:
        if not 0 <= vote.voter < self.config.n:
            self.state.drop(DropReason.BAD_VOTE, f"voter {vote.voter}")
            return
        self._collect(vote)

    def _on_certificate(self, cert: Certificate) -> None:
        self._accept_certificate(cert)
        if self.chain.pending_commits:
            self._retry_pending()

    def _on_timeout_notice(self, sender: int, round_: int) -> None:
        rs = self.state.round
        if round_ < rs.round:
            return
        senders = rs.timeouts.setdefault(round_, set())
        senders.add(sender)
        if len(senders) >= self.config.f + 1:
            if round_ not in rs.timeout_sent:
                rs.timeout_sent.add(round_)
                self.state.outbox.append(Broadcast(TimeoutNotice(round_)))
            self._enter_round(round_ + 1, "timeout-notices")
