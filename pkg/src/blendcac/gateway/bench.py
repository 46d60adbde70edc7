"""Two-node benchmark harness: a client and a service provider on one ledger.

Each run sends one request to the provider and records the per-stage
timings. Network effects are stood in for by explicit sleeps: one for the
client/server round trip and one for each token query the provider makes
against the chain.
"""

from __future__ import annotations

import csv
import random
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

from ..authz import (
    STAGES,
    CapabilityModel,
    DomainOwner,
    NoAccessControl,
    ServiceProvider,
    ServiceRequest,
    StageTimings,
    TokenSpec,
)
from ..baselines import (
    ABACModel,
    AttributeAssignment,
    AttributeContract,
    AttributeRule,
    BaselineStore,
    RBACModel,
    RoleAssignment,
    RoleContract,
    RolePermission,
    assign_role_call,
    set_attribute_call,
)
from ..capcontract import AccessRight
from ..identity import Address, EntityKind, ProfileDatabase, keygen, new_profile, register_all
from ..ledger import Chain, Sealer

MODELS = ("blendcac", "rbac", "abac", "none")

CSV_COLUMNS = ("seq", "rtt_us", "token_query_us", "parse_us", "validation_us",
               "verification_us", "total_us", "outcome", "reason")
_CSV_STAGE_COLUMNS = dict(zip(STAGES, CSV_COLUMNS[1:6]))

ROLE = "operator"
ATTRIBUTE = ("dept", "lab")


@dataclass
class ExperimentConfig:
    runs: int = 50
    model: str = "blendcac"
    simulated_chain_query_latency: float = 0.0  # seconds
    simulated_rtt: float = 0.0  # seconds
    block_interval: float = 15.0
    store_size: int = 1
    output_path: str | None = None
    use_cache: bool = True
    seed: int = 0
    deny_ratio: float = 0.0  # share of requests asking for an action the token lacks

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if min(self.simulated_chain_query_latency, self.simulated_rtt, self.block_interval) < 0:
            raise ValueError("latencies and block_interval must be >= 0")
        if self.store_size < 1:
            raise ValueError("store_size must be >= 1")
        if not 0.0 <= self.deny_ratio <= 1.0:
            raise ValueError("deny_ratio must be within [0, 1]")


@dataclass(frozen=True)
class RunRow:
    seq: int
    timings: StageTimings
    outcome: str
    reason: str
    cold: bool = False
    probes: int = 0

    def csv_row(self) -> dict[str, str | int]:
        row: dict[str, str | int] = {"seq": self.seq}
        for stage, col in _CSV_STAGE_COLUMNS.items():
            row[col] = f"{self.timings.us(stage):.3f}"
        row["total_us"] = f"{self.timings.total / 1000.0:.3f}"
        row["outcome"] = self.outcome
        row["reason"] = self.reason
        return row


def percentile(values: list[float], q: float) -> float:
    if len(values) == 1:
        return values[0]
    return statistics.quantiles(values, n=100, method="inclusive")[int(q) - 1]


def aggregate(rows: list[RunRow]) -> dict[str, dict[str, float]]:
    out = {}
    for stage in (*STAGES, "total"):
        xs = [getattr(r.timings, stage) / 1000.0 for r in rows]
        out[stage] = {
            "mean": statistics.fmean(xs),
            "median": statistics.median(xs),
            "p95": percentile(xs, 95),
        }
    return out


@dataclass
class ExperimentReport:
    model: str
    rows: list[RunRow]
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)
    config: ExperimentConfig | None = None

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.rows)

    def aggregate_consistent(self, tol_us: float = 1e-6) -> bool:
        fresh = aggregate(self.rows)
        return all(
            abs(fresh[s][k] - self.aggregate[s][k]) <= tol_us
            for s in fresh for k in fresh[s]
        )

    @property
    def warm_rows(self) -> list[RunRow]:
        return [r for r in self.rows if not r.cold]

    def decisions(self) -> list[tuple[str, str]]:
        return [(r.outcome, r.reason) for r in self.rows]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r.csv_row())
        return path

    def summary(self) -> dict:
        warm = [r.timings.total / 1000.0 for r in self.warm_rows]
        cold = [r.seq for r in self.rows if r.cold]
        return {
            "model": self.model,
            "runs": len(self.rows),
            "cold_runs": cold,
            "warm_median_total_us": statistics.median(warm) if warm else None,
            "aggregate_us": self.aggregate,
        }


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# harness


def build_store(client: Address, obj: Address, size: int, rng: random.Random) -> BaselineStore:
    """``size - 1`` irrelevant permissions and rules, then the one that matches."""
    def stranger() -> Address:
        return Address(rng.randbytes(20))

    perms = [RolePermission(f"role{i}", stranger(), frozenset({AccessRight.READ})) for i in range(size - 1)]
    perms.append(RolePermission(ROLE, obj, frozenset({AccessRight.READ, AccessRight.WRITE})))
    rules = [
        AttributeRule(i + 1, frozenset({("dept", f"d{i}")}), stranger(), frozenset({AccessRight.READ}))
        for i in range(size - 1)
    ]
    rules.append(AttributeRule(size, frozenset({ATTRIBUTE}), obj,
                               frozenset({AccessRight.READ, AccessRight.WRITE})))
    return BaselineStore(
        role_assignments=(RoleAssignment(client, ROLE),),
        permissions=tuple(perms),
        attributes=(AttributeAssignment(client, *ATTRIBUTE),),
        rules=tuple(rules),
    )


@dataclass
class Harness:
    config: ExperimentConfig
    network: Chain
    owner: DomainOwner
    client: Address
    provider: ServiceProvider
    store: BaselineStore
    resources: dict[str, bytes]
    sealer: Sealer | None = None

    def start(self) -> "Harness":
        if self.config.block_interval > 0:
            self.sealer = Sealer(self.network).start()
        self.provider.start()
        return self

    def stop(self) -> None:
        self.provider.stop()
        if self.sealer is not None:
            self.sealer.stop()

    def __enter__(self) -> "Harness":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def requests(self) -> Iterator[ServiceRequest]:
        rng = random.Random(self.config.seed)
        ids = sorted(self.resources)
        for _ in range(self.config.runs):
            action = AccessRight.EXECUTE if rng.random() < self.config.deny_ratio else AccessRight.READ
            yield ServiceRequest(self.client, rng.choice(ids), action)


def build_harness(config: ExperimentConfig) -> Harness:
    rng = random.Random(config.seed)
    network = Chain(config.block_interval)
    owner_keys, client_keys, provider_keys = keygen(), keygen(), keygen()
    profiles = ProfileDatabase(owner_keys.public_key)
    client = client_keys.address
    obj = provider_keys.address
    register_all(profiles, owner_keys, [
        new_profile(client, EntityKind.DEVICE, "client"),
        new_profile(obj, EntityKind.DEVICE, "provider"),
    ])

    owner = DomainOwner(owner_keys, network, profiles)
    owner.deploy(seal=True)
    account = owner.account
    rbac = account.deploy(RoleContract.type_name, seal=True)
    abac = account.deploy(AttributeContract.type_name, seal=True)
    owner.issue(TokenSpec(client, obj, frozenset({AccessRight.READ, AccessRight.WRITE}),
                          frozenset(), 1, 0), seal=True)
    account.transact(rbac, assign_role_call(client, ROLE), seal=True)
    account.transact(abac, set_attribute_call(client, *ATTRIBUTE), seal=True)

    store = build_store(client, obj, config.store_size, rng)
    model = {
        "blendcac": lambda: CapabilityModel(owner.contract),
        "rbac": lambda: RBACModel(rbac, store),
        "abac": lambda: ABACModel(abac, store),
        "none": NoAccessControl,
    }[config.model]()

    local = Chain(config.block_interval)
    local.sync(network)
    resources = {f"r{i}": f"sensor reading {i}".encode() for i in range(4)}
    provider = ServiceProvider(
        obj, local, model, resources,
        peer=network,
        use_cache=config.use_cache,
        chain_query_latency=config.simulated_chain_query_latency,
        rtt=config.simulated_rtt,
    )
    return Harness(config, network, owner, client, provider, store, resources)


def run_benchmark(config: ExperimentConfig) -> ExperimentReport:
    rows = []
    with build_harness(config) as h:
        for seq, req in enumerate(h.requests()):
            resp = h.provider.handle_service_request(req)
            d = resp.decision
            rows.append(RunRow(seq, d.timings, d.outcome.value, d.reason.value,
                               cold=resp.cold and config.model != "none", probes=d.probes))
    report = ExperimentReport(config.model, rows, config=config)
    if config.output_path:
        report.write_csv(config.output_path)
    return report


def config_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def plot_csv(csv_paths: list[str | Path], out: str | Path) -> Path:
    """Per-run total latency for each CSV, plus mean time per stage."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_runs, ax_stages) = plt.subplots(1, 2, figsize=(11, 4))
    labels = []
    means = []
    for p in csv_paths:
        rows = read_csv(p)
        label = Path(p).stem
        labels.append(label)
        ax_runs.plot([int(r["seq"]) for r in rows], [float(r["total_us"]) / 1000 for r in rows], label=label)
        means.append([statistics.fmean(float(r[c]) for r in rows) / 1000 for c in CSV_COLUMNS[1:6]])
    ax_runs.set_xlabel("run")
    ax_runs.set_ylabel("total latency (ms)")
    ax_runs.legend()
    width = 0.8 / max(1, len(labels))
    for i, (label, m) in enumerate(zip(labels, means)):
        ax_stages.bar([x + i * width for x in range(5)], m, width=width, label=label)
    ax_stages.set_xticks([x + width * (len(labels) - 1) / 2 for x in range(5)])
    ax_stages.set_xticklabels(["rtt", "query", "parse", "validate", "verify"])
    ax_stages.set_ylabel("mean time (ms)")
    ax_stages.set_yscale("symlog", linthresh=0.01)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out)
    plt.close(fig)
    return out
