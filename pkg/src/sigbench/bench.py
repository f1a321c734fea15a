"""Micro-benchmarks, experiment orchestration and metric extraction."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import statistics
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from sigbench import certify
from sigbench.netsim import SimConfig, SimTrace, run
from sigbench.sigscheme import (
    Scheme,
    aggregate_keys,
    aggregate_signatures,
    batch_verify,
    disaggregate_keys,
    keygen,
    negate_key,
    setup,
    sign,
    verify,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

NOISE_THRESHOLD = 0.25
BATCH_SIZES = (8, 16, 41)
_MESSAGE = bytes(8) + bytes(range(32))  # shaped like a vote: round + digest


# ---------------------------------------------------------------------------
# micro-benchmarks

@dataclass(frozen=True)
class Microbench:
    scheme: Scheme
    costs_ns: dict[str, float]  # median over repetitions, per call
    spread: dict[str, float]  # (max - min) / median over repetitions
    iterations: int
    repetitions: int

    @property
    def noisy(self) -> list[str]:
        return [op for op, s in self.spread.items() if s > NOISE_THRESHOLD]


def _time_ns(fn: Callable[[], object], iterations: int, repetitions: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        for _ in range(iterations):
            fn()
        samples.append((time.perf_counter_ns() - start) / iterations)
    return samples


def _operations(scheme: Scheme, f: int) -> dict[str, Callable[[], object]]:
    params = setup(128, scheme)
    n = 3 * f + 1
    pairs = [keygen(params, b"bench" + i.to_bytes(4, "big")) for i in range(max(n, max(BATCH_SIZES)))]
    pk, sk = pairs[0]
    sig = sign(params, sk, _MESSAGE)
    ops: dict[str, Callable[[], object]] = {
        "sign": lambda: sign(params, sk, _MESSAGE),
        "verify": lambda: verify(params, pk, sig, _MESSAGE),
    }
    if scheme is Scheme.EDDSA:
        for size in BATCH_SIZES:
            items = [(p, sign(params, s, _MESSAGE), _MESSAGE) for p, s in pairs[:size]]
            ops[f"batch_verify_{size}"] = lambda items=items: batch_verify(items)
        return ops

    sigs = [sign(params, s, _MESSAGE) for _, s in pairs[:41]]
    keys = [p for p, _ in pairs[:n]]
    apk = aggregate_keys(params, keys)
    negated = [negate_key(k) for k in keys]
    quorum = 2 * f + 1
    ops["aggregate_41"] = lambda: aggregate_signatures(sigs)
    ops[f"key_aggregate_{quorum}"] = lambda: aggregate_keys(params, keys[:quorum])
    for count in sorted({1, f, quorum}):
        ops[f"disaggregate_{count}"] = lambda c=count: disaggregate_keys(params, apk, negated[:c])
    return ops


def microbench(
    scheme: Scheme | str,
    iterations: int = 100,
    repetitions: int = 5,
    warmup: int = 10,
    f: int = 13,
) -> Microbench:
    """Time every signature operation the simulator charges for.

    Costs are nanoseconds per call. Aggregation and dis-aggregation use a
    committee of ``3f + 1`` keys (40 by default), so the removal counts are
    1, ``f`` and ``2f + 1``.
    """
    if iterations < 100:
        raise ValueError("at least 100 iterations per repetition are required")
    scheme = Scheme.parse(scheme)
    costs, spread = {}, {}
    for name, fn in _operations(scheme, f).items():
        samples = _time_ns(fn, iterations, repetitions, warmup)
        median = statistics.median(samples)
        costs[name] = median
        spread[name] = (max(samples) - min(samples)) / median if median else 0.0
    return Microbench(scheme, costs, spread, iterations, repetitions)


def hash_cost_ns(size: int = 500_000, iterations: int = 20) -> float:
    """SHA-256 cost per byte on a block-sized buffer."""
    data = bytes(size)
    samples = _time_ns(lambda: hashlib.sha256(data).digest(), iterations, 3, 2)
    return statistics.median(samples) / size


def calibrate(iterations: int = 100, repetitions: int = 5) -> dict:
    """Measure both schemes; the result feeds :class:`sigbench.netsim.CostModel`."""
    runs = {s: microbench(s, iterations, repetitions) for s in Scheme}
    return {
        "host": platform.platform(),
        "python": platform.python_version(),
        "iterations": iterations,
        "repetitions": repetitions,
        "hash_byte_ns": hash_cost_ns(),
        "schemes": {s.name.lower(): r.costs_ns for s, r in runs.items()},
        "spread": {s.name.lower(): r.spread for s, r in runs.items()},
    }


def save_calibration(data: Mapping, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# experiments

CSV_COLUMNS = (
    "n", "f", "scheme", "rate", "rep", "seed", "tps", "lat_mean_ms", "lat_p50_ms", "lat_p99_ms",
    "viewchanges", "cert_bytes", "additions_cached", "additions_naive", "leader_busy_frac",
)
_METRICS = CSV_COLUMNS[6:]


@dataclass(frozen=True)
class MetricReport:
    n: int
    f: int
    scheme: str
    rate: float
    rep: int | str  # repetition index, or "mean" / "std" for aggregate rows
    seed: int | str
    tps: float
    lat_mean_ms: float
    lat_p50_ms: float
    lat_p99_ms: float
    viewchanges: float
    cert_bytes: float
    additions_cached: float
    additions_naive: float
    leader_busy_frac: float

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


@dataclass(frozen=True)
class ExperimentGrid:
    points: tuple[tuple[int, str, float], ...]  # (n, scheme, offered tx/s)
    repetitions: int = 1
    seed: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if not self.points:
            raise ValueError("the grid has no points")

    @classmethod
    def cartesian(cls, ns: Iterable[int], schemes: Iterable[str], rates: Iterable[float], **kw) -> "ExperimentGrid":
        return cls(tuple((n, s, r) for n in ns for s in schemes for r in rates), **kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentGrid":
        """Read a TOML grid: list-valued ``n``, ``schemes``, ``rates`` and/or ``[[point]]`` tables."""
        with Path(path).open("rb") as fh:
            data = tomllib.load(fh)
        points = []
        if "n" in data:
            points += [(n, s, float(r)) for n in data["n"] for s in data["schemes"] for r in data["rates"]]
        points += [(p["n"], p["scheme"], float(p["rate"])) for p in data.get("point", [])]
        return cls(tuple(points), data.get("repetitions", 1), data.get("seed", 1))


def _percentile(sorted_values: Sequence[float], q: float) -> float:
    if not sorted_values:
        return math.nan
    k = (len(sorted_values) - 1) * q
    lo, hi = math.floor(k), math.ceil(k)
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * (k - lo)


def measurement_window(trace: SimTrace) -> tuple[int, int]:
    end = trace.end_time
    cut = round(end * trace.config.window)
    return cut, end - cut


def committed_in_window(trace: SimTrace) -> list[tuple[int, int]]:
    lo, hi = measurement_window(trace)
    return [(s, c) for s, c in trace.tx_latency if lo <= c < hi]


def metrics(trace: SimTrace, rep: int = 0) -> MetricReport:
    """Reduce a trace to one CSV row."""
    config = trace.config
    lo, hi = measurement_window(trace)
    window_s = (hi - lo) / 1e6
    txs = committed_in_window(trace)
    lat = sorted((c - s) / 1000 for s, c in txs)
    busy = sum(t for r, t in trace.leader_busy_us.items() if lo <= trace.round_started.get(r, -1) < hi)
    adds = trace.additions
    return MetricReport(
        n=config.n,
        f=config.f,
        scheme=config.scheme_tag.name.lower(),
        rate=float(config.rate),
        rep=rep,
        seed=config.seed,
        tps=len(txs) / window_s,
        lat_mean_ms=statistics.fmean(lat) if lat else math.nan,
        lat_p50_ms=_percentile(lat, 0.5),
        lat_p99_ms=_percentile(lat, 0.99),
        viewchanges=float(trace.view_changes),
        cert_bytes=statistics.fmean(trace.cert_sizes) if trace.cert_sizes else math.nan,
        additions_cached=statistics.fmean(a for a, _ in adds) if adds else math.nan,
        additions_naive=statistics.fmean(b for _, b in adds) if adds else math.nan,
        leader_busy_frac=busy / (hi - lo),
    )


def summarize(reports: Sequence[MetricReport]) -> tuple[MetricReport, MetricReport]:
    """Mean and standard-deviation rows over the repetitions of one grid point."""
    first = reports[0]
    means, stds = {}, {}
    for name in _METRICS:
        values = [getattr(r, name) for r in reports if not math.isnan(getattr(r, name))]
        means[name] = statistics.fmean(values) if values else math.nan
        stds[name] = statistics.stdev(values) if len(values) > 1 else (0.0 if values else math.nan)
    return (
        replace(first, rep="mean", seed="", **means),
        replace(first, rep="std", seed="", **stds),
    )


class CsvAppender:
    """Writes the header once and flushes every row."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CSV_COLUMNS)
        self._fh.flush()

    def write(self, report: MetricReport) -> None:
        self._writer.writerow(report.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_experiment(grid: ExperimentGrid, overrides: SimConfig | Mapping | None = None) -> Iterator[MetricReport]:
    """Yield one report per (point, repetition), then the point's mean and std rows."""
    if isinstance(overrides, SimConfig):
        base = overrides
    else:
        from sigbench.netsim import config_from_mapping

        base = config_from_mapping(overrides or {})
    for n, scheme, rate in grid.points:
        reports = []
        for rep in range(grid.repetitions):
            config = replace(base, n=n, scheme=scheme, rate=rate, seed=grid.seed + rep)
            report = metrics(run(config), rep)
            reports.append(report)
            yield report
        yield from summarize(reports)


def run_experiment(
    grid: ExperimentGrid,
    overrides: SimConfig | Mapping | None = None,
    out: str | Path | None = None,
) -> list[MetricReport]:
    """Run every grid point; rows reach ``out`` as soon as they are computed."""
    reports = []
    appender = CsvAppender(out) if out is not None else None
    try:
        for report in iter_experiment(grid, overrides):
            reports.append(report)
            if appender:
                appender.write(report)
    finally:
        if appender:
            appender.close()
    return reports


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path} does not have the expected columns")
        return list(reader)


# ---------------------------------------------------------------------------
# certificate storage

@dataclass(frozen=True)
class StorageReport:
    n: int
    contributors: int
    bls_bytes: int
    eddsa_bytes: int
    eddsa_signature_bytes: int
    eddsa_embedded_bytes: int

    def rows(self) -> list[tuple[str, int]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def report_storage(n: int, participation: float = 1.0) -> StorageReport:
    """Encode real certificates of both kinds and measure them.

    ``participation`` is the fraction of the committee that voted; it must
    reach the ``2f + 1`` quorum.
    """
    if n < 4 or (n - 1) % 3:
        raise ValueError("n must be 3f + 1 with f >= 1")
    if not 0 < participation <= 1:
        raise ValueError("participation must be in (0, 1]")
    f = (n - 1) // 3
    k = math.ceil(round(participation * n, 9))
    if k < 2 * f + 1:
        raise ValueError(f"{k} of {n} voters is below the quorum of {2 * f + 1}")
    sizes = {}
    digest = hashlib.sha256(b"storage").digest()
    for scheme in Scheme:
        params = setup(128, scheme)
        pairs = [keygen(params, b"storage" + i.to_bytes(4, "big")) for i in range(n)]
        cache = certify.build_key_cache([p for p, _ in pairs], f, None)
        votes = [certify.make_vote(sk, i, 0, digest) for i, (_, sk) in enumerate(pairs[:k])]
        cert = certify.assemble_certificate(cache, votes)
        sizes[scheme] = (cert, cache)
    bls_cert, _ = sizes[Scheme.BLS]
    ed_cert, ed_cache = sizes[Scheme.EDDSA]
    return StorageReport(
        n=n,
        contributors=k,
        bls_bytes=len(certify.encode_certificate(bls_cert)),
        eddsa_bytes=len(certify.encode_certificate(ed_cert)),
        eddsa_signature_bytes=sum(len(s.data) for _, s in ed_cert.votes),
        eddsa_embedded_bytes=len(certify.encode_certificate_with_keys(ed_cert, ed_cache)),
    )
