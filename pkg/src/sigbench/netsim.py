"""Deterministic discrete-event simulation of a validator committee.

Time is an integer count of microseconds. Each validator runs the consensus
state machine as a single-CPU event loop: delivered messages and fired timers
queue in its inbox, and handling one charges the CPU with the simulated cost
of the signature work it did (see :class:`CostModel`). Outgoing messages leave
when the handler finishes and arrive after a sampled one-way delay plus the
serialization time ``bytes / link rate``. Channels are FIFO per ordered pair.

Clients are not simulated message by message. Each validator's mempool is an
arrival process at a fixed rate; a leader materializes the transactions that
have arrived by the time it proposes. Every transaction embeds its id and its
submission time, which is how commit latency is measured.

The signature operations are real. Verifications whose inputs are shared by
every validator (a leader's block signature, a broadcast certificate) are
memoized across validators to save host CPU, but every validator is still
charged the simulated cost.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
import random
import struct
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from sigbench.certify import (
    BlsCertificate,
    Certificate,
    KeyCache,
    Vote,
    build_key_cache,
    verify_certificate_naive,
)
from sigbench.consensus import (
    Block,
    Broadcast,
    Committed,
    CommitteeConfig,
    Crypto,
    Dropped,
    EnteredRound,
    MsgTag,
    Proposal,
    Replica,
    Send,
    StartTimer,
    leader_for,
    message_tag,
    wire_size,
)
from sigbench.sigscheme import (
    PublicKey,
    Scheme,
    SecretKey,
    SignatureValue,
    count_ops,
    keygen,
    prove_possession,
    setup,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

US_PER_S = 1_000_000


class SimConfigError(ValueError):
    """Rejected simulation configuration."""


class UncalibratedScheme(KeyError):
    """The cost model has no measurements for this scheme."""


# ---------------------------------------------------------------------------
# latency

REGIONS = 4

# One-way delays between four synthetic regions, in ms. Validators are
# assigned to regions round-robin so each region holds n/4 of them.
_PRESETS: dict[str, tuple[float, list[list[float]]]] = {
    "wan": (1.0, [
        [0, 35, 45, 120],
        [35, 0, 75, 60],
        [45, 75, 0, 140],
        [120, 60, 140, 0],
    ]),
    "regional": (0.5, [
        [0, 10, 14, 25],
        [10, 0, 18, 12],
        [14, 18, 0, 22],
        [25, 12, 22, 0],
    ]),
    "lan": (0.1, [[0 if a == b else 0.25 for b in range(REGIONS)] for a in range(REGIONS)]),
}


@dataclass(frozen=True)
class LatencyModel:
    """One-way delays in ms: ``base[src][dst]`` scaled by uniform jitter."""

    base_ms: tuple[tuple[float, ...], ...]
    jitter: float = 0.1

    def __post_init__(self):
        n = len(self.base_ms)
        if any(len(row) != n for row in self.base_ms):
            raise SimConfigError("latency matrix must be square")
        if any(d < 0 for row in self.base_ms for d in row):
            raise SimConfigError("latencies must be non-negative")
        if not 0 <= self.jitter < 1:
            raise SimConfigError("jitter must be in [0, 1)")

    @property
    def n(self) -> int:
        return len(self.base_ms)

    @classmethod
    def preset(cls, name: str, n: int, jitter: float = 0.1, scale: float = 1.0) -> "LatencyModel":
        if name == "zero":
            return cls(tuple((0.0,) * n for _ in range(n)), 0.0)
        if name not in _PRESETS:
            raise SimConfigError(f"unknown latency preset {name!r}; choose from zero, {', '.join(_PRESETS)}")
        intra, inter = _PRESETS[name]
        rows = []
        for a in range(n):
            ra = a % REGIONS
            rows.append(tuple(
                0.0 if a == b else scale * (intra if ra == b % REGIONS else float(inter[ra][b % REGIONS]))
                for b in range(n)
            ))
        return cls(tuple(rows), jitter)

    @classmethod
    def randomized(cls, n: int, rng: random.Random, max_ms: float = 150.0, jitter: float = 0.5) -> "LatencyModel":
        rows = [[0.0 if a == b else rng.uniform(0, max_ms) for b in range(n)] for a in range(n)]
        return cls(tuple(map(tuple, rows)), jitter)

    def sample_us(self, src: int, dst: int, rng: random.Random) -> int:
        base = self.base_ms[src][dst]
        if base == 0:
            return 0
        if self.jitter:
            base *= 1 + rng.uniform(-self.jitter, self.jitter)
        return round(base * 1000)


# ---------------------------------------------------------------------------
# crypto cost model

class OpKind(enum.Enum):
    SIGN = "sign"
    VERIFY = "verify"
    BATCH_VERIFY = "batch_verify"
    SIG_ADD = "sig_add"
    KEY_ADD = "key_add"
    HASH_BYTE = "hash_byte"


@dataclass(frozen=True)
class CostModel:
    """Simulated CPU cost per signature operation, in nanoseconds.

    ``per_scheme`` maps a scheme name to its measured operation costs as
    produced by :func:`sigbench.bench.microbench`. ``hash_byte_ns`` prices
    hashing of long messages (block bodies).
    """

    per_scheme: Mapping[str, Mapping[str, float]]
    hash_byte_ns: float = 0.0
    zero: bool = False

    @classmethod
    def disabled(cls) -> "CostModel":
        return cls({}, 0.0, zero=True)

    @classmethod
    def from_calibration(cls, data: Mapping[str, Any]) -> "CostModel":
        return cls(
            {name: dict(ops) for name, ops in data["schemes"].items()},
            float(data.get("hash_byte_ns", 0.0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CostModel":
        return cls.from_calibration(json.loads(Path(path).read_text()))

    def _ops(self, scheme: Scheme) -> Mapping[str, float]:
        try:
            return self.per_scheme[scheme.name.lower()]
        except KeyError:
            raise UncalibratedScheme(f"no calibration for {scheme.name.lower()}") from None

    def cost_ns(self, scheme: Scheme, op: OpKind, count: int = 1) -> float:
        if self.zero or count <= 0:
            return 0.0
        if op is OpKind.HASH_BYTE:
            return self.hash_byte_ns * count
        ops = self._ops(scheme)
        if op is OpKind.SIGN:
            return ops["sign"] * count
        if op is OpKind.VERIFY:
            return ops["verify"] * count
        if op is OpKind.BATCH_VERIFY:
            if scheme is not Scheme.EDDSA:
                raise ValueError("batch verification is an EdDSA operation")
            fixed, per_item = _batch_line(ops)
            return min(fixed + per_item * count, ops["verify"] * count) if count > 1 else ops["verify"]
        if op is OpKind.SIG_ADD:
            return ops["aggregate_41"] / 40 * count
        if op is OpKind.KEY_ADD:
            return _key_add_ns(ops) * count
        raise ValueError(op)


def _batch_line(ops: Mapping[str, float]) -> tuple[float, float]:
    # Least-squares line through the measured batch sizes.
    points = [(int(k.rsplit("_", 1)[1]), v) for k, v in ops.items() if k.startswith("batch_verify_")]
    if len(points) < 2:
        raise UncalibratedScheme("need at least two batch sizes")
    mx = sum(x for x, _ in points) / len(points)
    my = sum(y for _, y in points) / len(points)
    slope = sum((x - mx) * (y - my) for x, y in points) / sum((x - mx) ** 2 for x, _ in points)
    return max(my - slope * mx, 0.0), slope


def _key_add_ns(ops: Mapping[str, float]) -> float:
    if "key_add" in ops:
        return ops["key_add"]
    sizes = [(int(k.rsplit("_", 1)[1]), v) for k, v in ops.items() if k.startswith("disaggregate_")]
    count, total = max(sizes)
    return total / count


def crypto_cost_model(model: CostModel, scheme: Scheme, op: OpKind, count: int = 1) -> float:
    """Simulated microseconds for ``count`` repetitions of ``op``."""
    return model.cost_ns(scheme, op, count) / 1000


class MeteredCrypto(Crypto):
    """Runs the real operations and bills their simulated cost to a meter."""

    def __init__(self, model: CostModel, scheme: Scheme, memo_size: int = 1024):
        self.model = model
        self.scheme = scheme
        self.spent_ns = 0.0
        self._memo: OrderedDict = OrderedDict()
        self._memo_size = memo_size
        self.additions: list[tuple[int, int]] = []  # (cached, naive) per distinct certificate

    def charge(self, op: OpKind, count: int = 1) -> None:
        self.spent_ns += self.model.cost_ns(self.scheme, op, count)

    def take_us(self) -> int:
        spent, self.spent_ns = self.spent_ns, 0.0
        return math.ceil(spent / 1000)

    def _remember(self, key, compute):
        try:
            value = self._memo[key]
            self._memo.move_to_end(key)
            return value[1]
        except KeyError:
            pass
        result = compute()
        self._memo[key] = result
        if len(self._memo) > self._memo_size:
            self._memo.popitem(last=False)
        return result[1]

    def sign(self, sk: SecretKey, message: bytes) -> SignatureValue:
        self.charge(OpKind.SIGN)
        self.charge(OpKind.HASH_BYTE, len(message))
        return super().sign(sk, message)

    def verify(self, pk: PublicKey, message: bytes, sig: SignatureValue) -> bool:
        self.charge(OpKind.VERIFY)
        self.charge(OpKind.HASH_BYTE, len(message))
        key = ("sig", pk.data, sig.data, message)
        return self._remember(key, lambda: (message, super(MeteredCrypto, self).verify(pk, message, sig)))

    def block_digest(self, block: Block) -> bytes:
        self.charge(OpKind.HASH_BYTE, len(block.signing_bytes))
        return block.digest

    def verify_vote(self, cache: KeyCache, vote: Vote, digest: bytes) -> bool:
        self.charge(OpKind.VERIFY)
        return super().verify_vote(cache, vote, digest)

    def assemble(self, cache: KeyCache, votes: Sequence[Vote]) -> Certificate:
        if self.scheme is Scheme.BLS:
            self.charge(OpKind.SIG_ADD, len(votes) - 1)
        return super().assemble(cache, votes)

    def verify_certificate(self, cache: KeyCache, cert: Certificate) -> bool:
        if isinstance(cert, BlsCertificate):
            self.charge(OpKind.VERIFY)
            self.charge(OpKind.KEY_ADD, cert.bitmap.popcount)
        else:
            self.charge(OpKind.BATCH_VERIFY, len(cert.votes))
        return self._remember(("cert", id(cert)), lambda: (cert, self._verify_certificate(cache, cert)))

    def _verify_certificate(self, cache: KeyCache, cert: Certificate) -> bool:
        with count_ops() as cached:
            ok = super().verify_certificate(cache, cert)
        if ok and isinstance(cert, BlsCertificate):
            with count_ops() as naive:
                verify_certificate_naive(cache, cert)
            self.additions.append((cached.key_additions, naive.key_additions))
        return ok


# ---------------------------------------------------------------------------
# load and faults

TX_HEADER = struct.Struct(">QQH")  # tx id, submission time (us), origin validator


@dataclass(frozen=True)
class ClientLoad:
    rate: float  # tx/s
    tx_size: int
    validator: int
    duration: float  # s

    def __post_init__(self):
        if self.rate < 0:
            raise SimConfigError("client rate must be non-negative")
        if self.tx_size < TX_HEADER.size:
            raise SimConfigError(f"transactions must be at least {TX_HEADER.size} bytes")


class ClientMempool:
    """Pending transactions of one validator's clients, generated on demand.

    Transaction ``i`` of a client is submitted at ``i / rate`` seconds.
    """

    def __init__(self, loads: Sequence[ClientLoad]):
        self.loads = list(loads)
        self.taken = [0] * len(self.loads)
        self.now = 0

    def _arrived(self, load: ClientLoad) -> int:
        if load.rate == 0:
            return 0
        horizon = min(self.now, round(load.duration * US_PER_S))
        return math.floor(horizon * load.rate / US_PER_S) + 1

    @staticmethod
    def submit_time(load: ClientLoad, i: int) -> int:
        return math.ceil(i * US_PER_S / load.rate)

    @property
    def pending_bytes(self) -> int:
        return sum((self._arrived(l) - t) * l.tx_size for l, t in zip(self.loads, self.taken))

    def take(self, limit: int) -> list[bytes]:
        out: list[bytes] = []
        budget = limit
        for k, load in enumerate(self.loads):
            available = self._arrived(load) - self.taken[k]
            count = min(available, budget // load.tx_size)
            if count <= 0:
                continue
            pad = bytes(load.tx_size - TX_HEADER.size)
            base = self.taken[k]
            origin_id = load.validator << 40
            for i in range(base, base + count):
                out.append(TX_HEADER.pack(origin_id | i, self.submit_time(load, i), load.validator) + pad)
            self.taken[k] += count
            budget -= count * load.tx_size
        return out


@dataclass(frozen=True)
class FaultPlan:
    """Crash-stop faults as ``(validator, crash time in s)`` pairs."""

    crashes: tuple[tuple[int, float], ...] = ()

    def check(self, n: int, f: int) -> None:
        if len(self.crashes) > f:
            raise SimConfigError(f"{len(self.crashes)} crashes exceed f = {f}")
        validators = [v for v, _ in self.crashes]
        if len(set(validators)) != len(validators):
            raise SimConfigError("a validator can crash only once")
        if any(not 0 <= v < n or t < 0 for v, t in self.crashes):
            raise SimConfigError("crash entries need a committee index and a non-negative time")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class SimConfig:
    n: int = 4
    scheme: str = "eddsa"
    block_size: int = 500_000
    tx_size: int = 512
    rate: float = 10_000.0  # total offered load, tx/s, split evenly across validators
    duration: float = 60.0  # s
    timeout_ms: float = 5_000.0
    grace_ms: float = 75.0
    commit_depth: int = 2
    latency: str | tuple[tuple[float, ...], ...] = "wan"
    jitter: float = 0.1
    latency_scale: float = 1.0  # multiplies every preset or matrix delay
    link_mbps: float = 1_000.0
    faults: tuple[tuple[int, float], ...] = ()
    seed: int = 0
    window: float = 0.1  # fraction of the run ignored at each end when measuring
    calibration: Optional[str] = None  # path to a microbench calibration; None disables crypto costs
    max_rounds: Optional[int] = None  # stop once any validator reaches this round

    def __post_init__(self):
        if self.n < 4 or (self.n - 1) % 3:
            raise SimConfigError(f"n = {self.n} is not of the form 3f + 1 with f >= 1")
        Scheme.parse(self.scheme)
        if self.duration <= 0 or self.link_mbps <= 0 or self.latency_scale < 0:
            raise SimConfigError("duration and link rate must be positive")
        if not 0 <= self.window < 0.5:
            raise SimConfigError("window must be in [0, 0.5)")
        if not 0 <= self.grace_ms < self.timeout_ms:
            raise SimConfigError("grace period must be shorter than the leader timeout")

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def scheme_tag(self) -> Scheme:
        return Scheme.parse(self.scheme)

    def latency_model(self) -> LatencyModel:
        if isinstance(self.latency, str):
            return LatencyModel.preset(self.latency, self.n, self.jitter, self.latency_scale)
        rows = tuple(tuple(d * self.latency_scale for d in row) for row in self.latency)
        model = LatencyModel(rows, self.jitter)
        if model.n != self.n:
            raise SimConfigError("latency matrix size does not match n")
        return model

    def cost_model(self) -> CostModel:
        return CostModel.disabled() if self.calibration is None else CostModel.load(self.calibration)

    def default_loads(self) -> list[ClientLoad]:
        return [ClientLoad(self.rate / self.n, self.tx_size, v, self.duration) for v in range(self.n)]


_CONFIG_FIELDS = {f for f in SimConfig.__dataclass_fields__}


def config_from_mapping(data: Mapping[str, Any], base: SimConfig | None = None) -> SimConfig:
    data = dict(data)
    unknown = set(data) - _CONFIG_FIELDS - {"f"}
    if unknown:
        raise SimConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    f = data.pop("f", None)
    if "faults" in data:
        data["faults"] = tuple(
            (int(e["validator"]), float(e["crash_s"])) if isinstance(e, Mapping) else (int(e[0]), float(e[1]))
            for e in data["faults"]
        )
    if isinstance(data.get("latency"), list):
        data["latency"] = tuple(tuple(float(x) for x in row) for row in data["latency"])
    config = replace(base or SimConfig(), **data)
    if f is not None and f != config.f:
        raise SimConfigError(f"f = {f} does not match n = {config.n}")
    return config


def load_config(path: str | Path) -> SimConfig:
    """Read a TOML file of :class:`SimConfig` keys.

    A relative ``calibration`` path is resolved against the file's directory.
    """
    path = Path(path)
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    data = data.get("simulation", data)
    cal = data.get("calibration")
    if cal is not None and not Path(cal).is_absolute():
        data["calibration"] = str(path.parent / cal)
    return config_from_mapping(data)


# ---------------------------------------------------------------------------
# trace

@dataclass(frozen=True)
class CommitRecord:
    time: int
    validator: int
    round: int
    digest: bytes
    parent: bytes
    trigger_round: int
    txs: int


@dataclass
class SimTrace:
    """Everything a run produced. ``records`` is the exportable event log."""

    config: SimConfig
    records: list[tuple[str, int, int, str]] = field(default_factory=list)
    commits: list[CommitRecord] = field(default_factory=list)
    tx_latency: list[tuple[int, int]] = field(default_factory=list)  # (submit us, first commit us)
    messages: Counter = field(default_factory=Counter)
    message_bytes: Counter = field(default_factory=Counter)
    drops: Counter = field(default_factory=Counter)
    timeout_rounds: set[int] = field(default_factory=set)
    busy_us: list[int] = field(default_factory=list)
    leader_busy_us: dict[int, int] = field(default_factory=dict)  # round -> leader CPU time
    round_started: dict[int, int] = field(default_factory=dict)  # round -> first entry time
    cert_sizes: list[int] = field(default_factory=list)
    additions: list[tuple[int, int]] = field(default_factory=list)
    crashed: set[int] = field(default_factory=set)
    end_time: int = 0

    def log(self, kind: str, time: int, validator: int, detail: str = "") -> None:
        self.records.append((kind, time, validator, detail))

    def lines(self) -> list[str]:
        return [f"{k}\t{t}\t{v}\t{d}" for k, t, v, d in self.records]

    def export(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    def commits_by_validator(self) -> dict[int, list[CommitRecord]]:
        out: dict[int, list[CommitRecord]] = {}
        for c in self.commits:
            out.setdefault(c.validator, []).append(c)
        return out

    @property
    def view_changes(self) -> int:
        return len(self.timeout_rounds)


def check_safety(trace: SimTrace) -> list[str]:
    """Return every safety or chain-integrity violation found in ``trace``."""
    problems = []
    by_round: dict[int, bytes] = {}
    for v, commits in trace.commits_by_validator().items():
        seen = {bytes(32)}
        for c in commits:
            other = by_round.setdefault(c.round, c.digest)
            if other != c.digest:
                problems.append(f"round {c.round}: validator {v} committed {c.digest.hex()[:8]}, "
                                f"another committed {other.hex()[:8]}")
            if c.parent not in seen:
                problems.append(f"validator {v} committed round {c.round} before its parent")
            seen.add(c.digest)
    logs = [[c.digest for c in cs] for cs in trace.commits_by_validator().values()]
    for a in logs:
        for b in logs:
            k = min(len(a), len(b))
            if a[:k] != b[:k]:
                problems.append("committed sequences diverge")
                return problems
    return problems


# ---------------------------------------------------------------------------
# simulator

@lru_cache(maxsize=16)
def committee(scheme: Scheme, n: int) -> tuple[tuple[SecretKey, ...], KeyCache]:
    """Deterministic committee keys, admitted with proofs of possession."""
    params = setup(128, scheme)
    pairs = [keygen(params, b"validator-" + i.to_bytes(4, "big")) for i in range(n)]
    proofs = [prove_possession(params, sk, pk) for pk, sk in pairs]
    cache = build_key_cache([pk for pk, _ in pairs], (n - 1) // 3, proofs)
    return tuple(sk for _, sk in pairs), cache


_DELIVER, _TIMER, _CRASH, _WAKE = range(4)


class SimEvent(tuple):
    """``(time, seq, kind, validator, payload)``; heap order is (time, seq)."""

    __slots__ = ()

    def __new__(cls, time: int, seq: int, kind: int, validator: int, payload: Any):
        return tuple.__new__(cls, (time, seq, kind, validator, payload))

    time = property(lambda self: self[0])
    seq = property(lambda self: self[1])
    kind = property(lambda self: self[2])
    validator = property(lambda self: self[3])
    payload = property(lambda self: self[4])


class Simulator:
    def __init__(
        self,
        config: SimConfig,
        latency: LatencyModel | None = None,
        loads: Sequence[ClientLoad] | None = None,
        faults: FaultPlan | None = None,
        seed: int | None = None,
        duration: float | None = None,
        costs: CostModel | None = None,
    ):
        self.config = config
        self.n = config.n
        self.latency = latency or config.latency_model()
        if self.latency.n != self.n:
            raise SimConfigError("latency model size does not match n")
        self.faults = faults if faults is not None else FaultPlan(config.faults)
        self.faults.check(self.n, config.f)
        self.duration_us = round((duration if duration is not None else config.duration) * US_PER_S)
        self.rng = random.Random(config.seed if seed is None else seed)
        self.costs = costs if costs is not None else config.cost_model()
        scheme = config.scheme_tag
        if not self.costs.zero:
            self.costs.cost_ns(scheme, OpKind.VERIFY)  # fail early if uncalibrated
        self.link_bytes_per_us = config.link_mbps / 8  # 1 Mbit/s = 1/8 byte per us

        secret_keys, cache = committee(scheme, self.n)
        self.committee = CommitteeConfig(
            cache,
            block_size=config.block_size,
            grace_ms=config.grace_ms,
            timeout_ms=config.timeout_ms,
            commit_depth=config.commit_depth,
            tx_size=config.tx_size,
        )
        loads = list(loads) if loads is not None else config.default_loads()
        pools = [ClientMempool([l for l in loads if l.validator == v]) for v in range(self.n)]
        self.crypto = MeteredCrypto(self.costs, scheme)
        self.replicas = [Replica(self.committee, v, secret_keys[v], pools[v], self.crypto) for v in range(self.n)]
        self.pools = pools

        self.trace = SimTrace(config, busy_us=[0] * self.n)
        self._heap: list[SimEvent] = []
        self._seq = 0
        self._inbox = [deque() for _ in range(self.n)]
        self._busy_until = [0] * self.n
        self._wake_pending = [False] * self.n
        self._crashed = [False] * self.n
        self._last_delivery: dict[tuple[int, int], int] = {}
        self._committed: set[bytes] = set()
        self._max_round = 0
        self.now = 0

    # -- scheduling

    def _push(self, time: int, kind: int, validator: int, payload: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, SimEvent(time, self._seq, kind, validator, payload))

    def schedule_send(self, src: int, dst: int, message, now: int) -> None:
        """Queue ``message`` for delivery, preserving FIFO order per (src, dst)."""
        if self._crashed[src]:
            return
        size = wire_size(message, self.n)
        tag = message_tag(message).name
        self.trace.messages[tag] += 1
        self.trace.message_bytes[tag] += size
        delay = self.latency.sample_us(src, dst, self.rng) + math.ceil(size / self.link_bytes_per_us)
        pair = (src, dst)
        at = max(now + delay, self._last_delivery.get(pair, 0))
        self._last_delivery[pair] = at
        self._push(at, _DELIVER, dst, (src, message))

    # -- main loop

    def run(self) -> SimTrace:
        for v, t in self.faults.crashes:
            self._push(round(t * US_PER_S), _CRASH, v)
        for v in range(self.n):
            self._inbox[v].append(("start", None))
            self._schedule_wake(v, 0)
        heap = self._heap
        limit = self.config.max_rounds
        while heap and heap[0][0] <= self.duration_us:
            if limit is not None and self._max_round >= limit:
                break
            time, _, kind, v, payload = heapq.heappop(heap)
            self.now = time
            if kind == _WAKE:
                self._wake_pending[v] = False
                self._process(v)
            elif kind == _CRASH:
                self._crash(v)
            elif not self._crashed[v]:
                if kind == _TIMER and self._stale(v, payload):
                    continue
                self._inbox[v].append((kind, payload))
                if not self._wake_pending[v]:
                    self._schedule_wake(v, max(time, self._busy_until[v]))
        self.trace.end_time = self.duration_us if limit is None or self._max_round < limit else self.now
        self.trace.additions = list(self.crypto.additions)
        return self.trace

    def _stale(self, v: int, timer) -> bool:
        kind, round_ = timer
        return round_ < self.replicas[v].current_round

    def _schedule_wake(self, v: int, at: int) -> None:
        self._wake_pending[v] = True
        self._push(at, _WAKE, v)

    def _crash(self, v: int) -> None:
        self._crashed[v] = True
        self._inbox[v].clear()
        self.trace.crashed.add(v)
        self.trace.log("crash", self.now, v)

    def _process(self, v: int) -> None:
        if self._crashed[v] or not self._inbox[v]:
            return
        kind, payload = self._inbox[v].popleft()
        replica = self.replicas[v]
        start = self.now
        round_before = replica.current_round
        self.pools[v].now = start
        if kind == "start":
            effects = replica.start()
        elif kind == _DELIVER:
            effects = replica.deliver(*payload)
        else:
            effects = replica.fire(*payload)
        cost = self.crypto.take_us()
        finish = start + cost
        self._busy_until[v] = finish
        self.trace.busy_us[v] += cost
        if leader_for(self.committee, round_before) == v:
            self.trace.leader_busy_us[round_before] = self.trace.leader_busy_us.get(round_before, 0) + cost
        self._apply(v, effects, finish)
        if self._inbox[v]:
            self._schedule_wake(v, finish)

    def _apply(self, v: int, effects, finish: int) -> None:
        trace = self.trace
        for effect in effects:
            if isinstance(effect, Broadcast):
                msg = effect.message
                if isinstance(msg, Proposal):
                    trace.log("propose", finish, v, f"round={msg.block.round} txs={len(msg.block.payload)}")
                elif message_tag(msg) is MsgTag.CERTIFICATE:
                    trace.cert_sizes.append(wire_size(msg, self.n) - 1)
                    trace.log("certify", finish, v, f"round={msg.round} signers={msg.contributors}")
                for dst in range(self.n):
                    if dst != v:
                        self.schedule_send(v, dst, msg, finish)
            elif isinstance(effect, Send):
                self.schedule_send(v, effect.to, effect.message, finish)
            elif isinstance(effect, StartTimer):
                self._push(finish + round(effect.delay_ms * 1000), _TIMER, v, (effect.kind, effect.round))
            elif isinstance(effect, Committed):
                self._record_commits(v, effect, finish)
            elif isinstance(effect, EnteredRound):
                trace.round_started.setdefault(effect.round, finish)
                self._max_round = max(self._max_round, effect.round)
                if effect.via.startswith("timeout"):
                    if effect.round - 1 not in trace.timeout_rounds:
                        trace.log("timeout", finish, v, f"round={effect.round - 1} via={effect.via}")
                    trace.timeout_rounds.add(effect.round - 1)
            elif isinstance(effect, Dropped):
                trace.drops[effect.reason.value] += 1

    def _record_commits(self, v: int, effect: Committed, finish: int) -> None:
        trace = self.trace
        for block in effect.blocks:
            trace.commits.append(CommitRecord(
                finish, v, block.round, block.digest, block.parent, effect.trigger_round, len(block.payload)
            ))
            trace.log("commit", finish, v, f"round={block.round} digest={block.digest[:8].hex()} "
                                           f"txs={len(block.payload)} by={effect.trigger_round}")
            if block.digest in self._committed:
                continue
            self._committed.add(block.digest)
            for tx in block.payload:
                _, submitted, _ = TX_HEADER.unpack_from(tx)
                trace.tx_latency.append((submitted, finish))


def run(
    config: SimConfig,
    latency: LatencyModel | None = None,
    loads: Sequence[ClientLoad] | None = None,
    faults: FaultPlan | None = None,
    seed: int | None = None,
    duration: float | None = None,
    costs: CostModel | None = None,
) -> SimTrace:
    """Simulate ``config`` until ``duration`` seconds of simulated time."""
    return Simulator(config, latency, loads, faults, seed, duration, costs).run()
