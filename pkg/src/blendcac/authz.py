"""Policy decision at the domain owner, enforcement at the service provider.

The owner side turns an access-right request into a token grant using its
policy rules and then writes the token to the capability contract. The
provider side answers service requests: fetch the requester's token (from
its cache, falling back to the local chain), parse it, validate it, verify
the request against it, and only then serve the resource.
"""

from __future__ import annotations

import datetime as dt
import enum
import json
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

from .capcontract import (
    AccessRight,
    CapabilityContract,
    CapabilityToken,
    ContextConstraint,
    ContextSnapshot,
    PredicateRegistry,
    RevocationMode,
    context_from_json,
    delegate_call,
    issue_call,
    parse_rights,
    revoke_delegation_call,
    revoke_token_call,
)
from .errors import ContractError, CONTRACT_ERRORS, ProfileNotFound, UnregisteredRequester
from .identity import Address, EntityKind, EntityStatus, KeyPair, ProfileDatabase
from .ledger import Account, Chain, Receipt

logger = logging.getLogger(__name__)


class Outcome(str, enum.Enum):
    GRANT = "grant"
    DENY = "deny"


class Reason(str, enum.Enum):
    OK = "ok"
    NO_TOKEN = "no_token"
    TOKEN_DISABLED = "token_disabled"
    EMPTY_AR = "empty_ar"
    ACTION_NOT_IN_AR = "action_not_in_ar"
    CONTEXT_VIOLATION = "context_violation"
    NOT_DELEGATEE = "not_delegatee"
    STALE_CACHE_MISS = "stale_cache_miss"


STAGES = ("rtt", "token_query", "json_parse", "token_validation", "authorization_verification")


@dataclass(frozen=True)
class StageTimings:
    """Per-stage durations in nanoseconds (monotonic clock)."""

    rtt: int = 0
    token_query: int = 0
    json_parse: int = 0
    token_validation: int = 0
    authorization_verification: int = 0
    total: int = 0

    @classmethod
    def from_marks(cls, marks: list[int]) -> "StageTimings":
        """Build from ``len(STAGES) + 1`` contiguous clock readings."""
        if len(marks) != len(STAGES) + 1:
            raise ValueError("need one mark per stage boundary")
        spans = [b - a for a, b in zip(marks, marks[1:])]
        return cls(*spans, total=marks[-1] - marks[0])

    def stage_sum(self) -> int:
        return sum(getattr(self, s) for s in STAGES)

    def us(self, stage: str) -> float:
        return getattr(self, stage) / 1000.0


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    reason: Reason
    timings: StageTimings = field(default_factory=StageTimings)
    probes: int = 0  # policy records examined while verifying

    def __post_init__(self):
        if (self.outcome is Outcome.GRANT) != (self.reason is Reason.OK):
            raise ValueError("grant must carry reason ok and deny must not")

    @property
    def granted(self) -> bool:
        return self.outcome is Outcome.GRANT

    @classmethod
    def grant(cls, probes: int = 0) -> "Decision":
        return cls(Outcome.GRANT, Reason.OK, probes=probes)

    @classmethod
    def deny(cls, reason: Reason, probes: int = 0) -> "Decision":
        return cls(Outcome.DENY, reason, probes=probes)


@dataclass(frozen=True)
class AccessRequest:
    requester: Address
    object: Address
    action: AccessRight
    context: ContextSnapshot


# ---------------------------------------------------------------------------
# token checks


def validate_token(token: CapabilityToken) -> bool:
    return token.enabled and token.well_formed()


def verify_authorization(token: CapabilityToken, request: AccessRequest,
                         predicates: PredicateRegistry | None = None) -> Decision:
    # fixed order: holder, object, rights, context
    probes = 1
    if request.requester != token.subject and request.requester not in token.delegation.delegatee:
        return Decision.deny(Reason.NOT_DELEGATEE, probes)
    if token.object != request.object:
        return Decision.deny(Reason.NO_TOKEN, probes)
    if not token.rights:
        return Decision.deny(Reason.EMPTY_AR, probes)
    if request.action not in token.rights:
        return Decision.deny(Reason.ACTION_NOT_IN_AR, probes)
    for c in token.context:
        probes += 1
        if not c.satisfied_by(request.context, predicates):
            return Decision.deny(Reason.CONTEXT_VIOLATION, probes)
    return Decision.grant(probes)


# ---------------------------------------------------------------------------
# policy decision point


@dataclass(frozen=True)
class PolicyRule:
    rule_id: int
    subject_match: Address | EntityKind
    object: Address
    grant_rights: frozenset[AccessRight]
    grant_context: frozenset[ContextConstraint] = frozenset()
    grant_depth: int = 0
    priority: int = 0

    def applies_to(self, requester: Address, kind: EntityKind, obj: Address) -> bool:
        if obj != self.object:
            return False
        if isinstance(self.subject_match, EntityKind):
            return self.subject_match is kind
        return self.subject_match == requester

    def to_json(self) -> dict:
        subj = self.subject_match
        return {
            "rule_id": self.rule_id,
            "subject": f"kind:{subj.value}" if isinstance(subj, EntityKind) else str(subj),
            "object": str(self.object),
            "rights": "".join(r.letter for r in sorted(self.grant_rights, key=lambda r: r.code)),
            "context": [c.to_json() for c in self.grant_context],
            "depth": self.grant_depth,
            "priority": self.priority,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PolicyRule":
        subj = d["subject"]
        match = EntityKind(subj[5:]) if subj.startswith("kind:") else Address(subj)
        return cls(
            rule_id=int(d["rule_id"]),
            subject_match=match,
            object=Address(d["object"]),
            grant_rights=parse_rights(d.get("rights", "")),
            grant_context=context_from_json(d.get("context", [])),
            grant_depth=int(d.get("depth", 0)),
            priority=int(d.get("priority", 0)),
        )


def load_policy(path: str | Path) -> list[PolicyRule]:
    return [PolicyRule.from_json(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


@dataclass(frozen=True)
class TokenSpec:
    subject: Address
    object: Address
    rights: frozenset[AccessRight]
    context: frozenset[ContextConstraint]
    depth: int
    rule_id: int


class PolicyDecisionPoint:
    def __init__(self, profiles: ProfileDatabase, rules: Iterable[PolicyRule] = ()):
        self.profiles = profiles
        self.rules: list[PolicyRule] = []
        for r in rules:
            self.add_rule(r)

    def add_rule(self, rule: PolicyRule) -> None:
        if any(r.rule_id == rule.rule_id for r in self.rules):
            raise ValueError(f"duplicate rule_id {rule.rule_id}")
        self.rules.append(rule)

    def evaluate_access_right_request(self, requester: Address, object: Address,
                                      action: AccessRight | None = None) -> TokenSpec | None:
        """Winning rule's grant, or None when the request is rejected.

        Highest priority wins; ties go to the lowest rule_id. Suspended
        entities are always rejected.
        """
        try:
            profile = self.profiles.lookup_profile(requester)
        except ProfileNotFound:
            raise UnregisteredRequester(str(requester)) from None
        if profile.status is not EntityStatus.ACTIVE:
            return None
        matching = [r for r in self.rules if r.applies_to(requester, profile.kind, object)]
        if not matching:
            return None
        rule = min(matching, key=lambda r: (-r.priority, r.rule_id))
        if action is not None and action not in rule.grant_rights:
            return None
        return TokenSpec(requester, object, rule.grant_rights, rule.grant_context,
                         rule.grant_depth, rule.rule_id)


@dataclass(frozen=True)
class IssueResult:
    contract: Address
    token_id: bytes
    txid: bytes
    height: int


class DomainOwner:
    """The owner's decision point plus its ledger account and contract."""

    def __init__(self, keys: KeyPair, chain: Chain, profiles: ProfileDatabase,
                 rules: Iterable[PolicyRule] = (), contract: Address | None = None):
        self.account = Account(keys, chain)
        self.chain = chain
        self.profiles = profiles
        self.pdp = PolicyDecisionPoint(profiles, rules)
        self.contract = contract

    @property
    def address(self) -> Address:
        return self.account.address

    def deploy(self, *, seal: bool = False, timeout: float | None = None) -> Address:
        self.contract = self.account.deploy(CapabilityContract.type_name, seal=seal, timeout=timeout)
        return self.contract

    def _transact(self, call: bytes, seal: bool, timeout: float | None) -> tuple[bytes, int, Receipt]:
        if self.contract is None:
            raise RuntimeError("capability contract not deployed")
        txid = self.account.send(self.contract, call)
        if seal:
            self.chain.seal_block(force=True)
        found = self.chain.wait_for_receipt(txid, timeout)
        if found is None:
            raise TimeoutError("transaction not sealed in time")
        height, receipt = found
        if not receipt.ok:
            cls = CONTRACT_ERRORS.get(receipt.error, ContractError)
            raise cls(receipt.output.decode("utf-8", "replace"))
        return txid, height, receipt

    def issue(self, spec: TokenSpec, *, seal: bool = False, timeout: float | None = None) -> IssueResult:
        call = issue_call(spec.subject, spec.object, spec.depth, spec.rights, spec.context)
        txid, height, receipt = self._transact(call, seal, timeout)
        return IssueResult(self.contract, receipt.output, txid, height)

    def request_capability(self, requester: Address, object: Address,
                           action: AccessRight | None = None, *,
                           seal: bool = False, timeout: float | None = None) -> IssueResult | None:
        """Evaluate, and on success issue and wait until the token is on chain."""
        spec = self.pdp.evaluate_access_right_request(requester, object, action)
        if spec is None:
            return None
        return self.issue(spec, seal=seal, timeout=timeout)

    def revoke_delegation(self, subject: Address, target: Address, *,
                          seal: bool = False, timeout: float | None = None) -> int:
        return self._transact(revoke_delegation_call(subject, target), seal, timeout)[1]

    def revoke_token(self, subject: Address, mode: RevocationMode | str, *,
                     seal: bool = False, timeout: float | None = None) -> int:
        return self._transact(revoke_token_call(subject, mode), seal, timeout)[1]


def delegate(keys: KeyPair, chain: Chain, contract: Address, target: Address, *,
             seal: bool = False, timeout: float | None = None) -> int:
    """Subject-side delegation; returns the sealing height."""
    account = Account(keys, chain)
    txid = account.send(contract, delegate_call(target))
    if seal:
        chain.seal_block(force=True)
    found = chain.wait_for_receipt(txid, timeout)
    if found is None:
        raise TimeoutError("transaction not sealed in time")
    height, receipt = found
    if not receipt.ok:
        raise CONTRACT_ERRORS.get(receipt.error, ContractError)(receipt.output.decode("utf-8", "replace"))
    return height


# ---------------------------------------------------------------------------
# enforcement models


class AccessModel(Protocol):
    """The four model-specific pipeline stages."""

    name: str

    def query(self, chain: Chain, requester: Address, object: Address,
              at_height: int | None = None) -> str | None: ...

    def parse(self, payload: str): ...

    def validate(self, record) -> bool: ...

    def verify(self, record, request: AccessRequest) -> Decision: ...


class CapabilityModel:
    name = "blendcac"

    def __init__(self, contract: Address, predicates: PredicateRegistry | None = None):
        self.contract = contract
        self.predicates = dict(predicates or {})

    def query(self, chain, requester, object, at_height=None):
        state: CapabilityContract = chain.get_contract_state(self.contract, at_height)
        found = state.query_token(requester, object)
        return None if found is None else found.token.dumps()

    def parse(self, payload):
        return CapabilityToken.loads(payload)

    def validate(self, record):
        return validate_token(record)

    def verify(self, record, request):
        return verify_authorization(record, request, self.predicates)


class NoAccessControl:
    """Benchmark baseline that enforces nothing."""

    name = "none"


# ---------------------------------------------------------------------------
# token cache


@dataclass(frozen=True)
class CacheEntry:
    payload: str
    cached_at_height: int


CacheKey = tuple[Address, Address]  # (requester, object)


class TokenCache:
    """Copy-on-write map so readers always see one consistent version."""

    def __init__(self, refresh_interval: float):
        self.refresh_interval = refresh_interval
        self._entries: dict[CacheKey, CacheEntry] = {}
        self._write = threading.Lock()
        self.refreshed_height: int | None = None
        self.refreshed_at: float | None = None  # monotonic

    def get(self, key: CacheKey) -> CacheEntry | None:
        return self._entries.get(key)

    def snapshot(self) -> Mapping[CacheKey, CacheEntry]:
        return dict(self._entries)

    def put(self, key: CacheKey, entry: CacheEntry) -> None:
        with self._write:
            new = dict(self._entries)
            new[key] = entry
            self._entries = new

    def replace_all(self, entries: dict[CacheKey, CacheEntry], height: int) -> None:
        with self._write:
            # keys inserted concurrently by on-demand misses survive the swap
            for k, v in self._entries.items():
                if k not in entries and v.cached_at_height > height:
                    entries[k] = v
            self._entries = entries
            self.refreshed_height = height
            self.refreshed_at = time.monotonic()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries


# ---------------------------------------------------------------------------
# service provider


@dataclass(frozen=True)
class ServiceRequest:
    requester: Address
    resource_id: str
    action: AccessRight = AccessRight.READ


@dataclass(frozen=True)
class ServiceResponse:
    decision: Decision
    payload: bytes | None
    cold: bool = False  # token came from the chain rather than the cache

    @property
    def timings(self) -> StageTimings:
        return self.decision.timings


def _local_now() -> dt.datetime:
    return dt.datetime.now()


_MIN_REFRESH = 0.05  # seconds; keeps a zero interval from spinning


class ServiceProvider:
    """Enforcement point guarding one object's resources."""

    def __init__(self, object_vid: Address, chain: Chain, model, resources: Mapping[str, bytes], *,
                 peer: Chain | None = None,
                 location: str | None = None,
                 clock: Callable[[], dt.datetime] = _local_now,
                 use_cache: bool = True,
                 on_demand: bool = True,
                 chain_query_latency: float = 0.0,
                 rtt: float = 0.0,
                 refresh_interval: float | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.object = Address(object_vid)
        self.chain = chain
        self.peer = peer
        self.model = model
        self.resources = dict(resources)
        self.location = location
        self.clock = clock
        self.use_cache = use_cache
        self.on_demand = on_demand
        self.chain_query_latency = chain_query_latency
        self.rtt = rtt
        self._sleep = sleep
        interval = chain.block_interval if refresh_interval is None else refresh_interval
        self.cache = TokenCache(interval)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # -- cache maintenance ------------------------------------------------

    def context_snapshot(self) -> ContextSnapshot:
        return ContextSnapshot(self.clock().time(), self.location)

    def refresh_cache(self) -> TokenCache:
        """Sync with the peer, then re-read every cached token at the new tip."""
        if self.peer is not None:
            self.chain.sync(self.peer)
        if isinstance(self.model, NoAccessControl):
            return self.cache
        height = self.chain.height
        fresh: dict[CacheKey, CacheEntry] = {}
        for (requester, obj) in self.cache.snapshot():
            payload = self.model.query(self.chain, requester, obj, at_height=height)
            if payload is not None:
                fresh[(requester, obj)] = CacheEntry(payload, height)
        self.cache.replace_all(fresh, height)
        return self.cache

    def start(self) -> "ServiceProvider":
        """Run cache refreshes on a background thread.

        The thread wakes on every new block from the peer (or the local chain)
        and at least once per refresh interval.
        """
        self._stop.clear()
        self._thread = threading.Thread(target=self._refresh_loop, name="cache-refresh", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def __enter__(self) -> "ServiceProvider":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _refresh_loop(self) -> None:
        source = self.peer or self.chain
        seen = source.height
        last = time.monotonic()
        while not self._stop.is_set():
            interval = max(self.cache.refresh_interval, _MIN_REFRESH)
            remaining = max(0.0, last + interval - time.monotonic())
            source.wait_for_height(seen + 1, timeout=min(remaining, 0.1))
            if self._stop.is_set():
                break
            tip = source.height
            if tip <= seen and time.monotonic() - last < interval:
                continue
            try:
                self.refresh_cache()
            except Exception:  # keep serving from the previous cache
                logger.exception("cache refresh failed")
            seen, last = tip, time.monotonic()

    # -- request pipeline -------------------------------------------------

    def handle_service_request(self, request: ServiceRequest) -> ServiceResponse:
        clock = time.perf_counter_ns
        marks = [clock()]

        def close_remaining() -> None:
            while len(marks) < len(STAGES) + 1:
                marks.append(marks[-1])

        def finish(decision: Decision, cold: bool = False) -> ServiceResponse:
            close_remaining()
            decision = replace(decision, timings=StageTimings.from_marks(marks))
            body = self.resources.get(request.resource_id) if decision.granted else None
            return ServiceResponse(decision, body, cold)

        if self.rtt:
            self._sleep(self.rtt)
        marks.append(clock())

        if isinstance(self.model, NoAccessControl):
            return finish(Decision.grant())

        key = (Address(request.requester), self.object)
        entry = self.cache.get(key) if self.use_cache else None
        cold = entry is None
        if entry is not None:
            payload = entry.payload
        elif self.use_cache and not self.on_demand:
            marks.append(clock())
            return finish(Decision.deny(Reason.STALE_CACHE_MISS), cold)
        else:
            if self.chain_query_latency:
                self._sleep(self.chain_query_latency)
            height = self.chain.height
            payload = self.model.query(self.chain, key[0], key[1], at_height=height)
            if payload is not None and self.use_cache:
                self.cache.put(key, CacheEntry(payload, height))
        marks.append(clock())
        if payload is None:
            return finish(Decision.deny(Reason.NO_TOKEN), cold)

        record = self.model.parse(payload)
        marks.append(clock())

        valid = self.model.validate(record)
        marks.append(clock())
        if not valid:
            return finish(Decision.deny(Reason.TOKEN_DISABLED), cold)

        access = AccessRequest(key[0], self.object, request.action, self.context_snapshot())
        decision = self.model.verify(record, access)
        marks.append(clock())
        return finish(decision, cold)
