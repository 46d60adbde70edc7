"""Identity-based capability tokens and the contract that manages them.

A token binds a subject VID to rights on an object VID, with an optional
delegation grant and context constraints. Its id is a one-way hash of the
immutable grant; the delegatee queue and the current depth/rights may change
afterwards through delegation and revocation, but the id never does.
"""

from __future__ import annotations

import datetime as dt
import enum
import json
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Union

from . import codec
from .errors import (
    DecodeError,
    DepthExhausted,
    DuplicateDelegatee,
    InvalidKey,
    MalformedCall,
    NoToken,
    NotADelegatee,
    NotOwner,
    SelfDelegation,
    SubjectAlreadyHasToken,
    TokenDisabled,
)
from .identity import Address
from .ledger import Chain, register_contract_type

OP_ISSUE = 0x01
OP_DELEGATE = 0x02
OP_REVOKE_DELEGATION = 0x03
OP_REVOKE_TOKEN = 0x04


class AccessRight(str, enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    EXECUTE = "EXECUTE"

    @property
    def code(self) -> int:
        return _RIGHT_CODES[self]

    @property
    def letter(self) -> str:
        return _RIGHT_LETTERS[self]

    @classmethod
    def parse(cls, text: str) -> "AccessRight":
        t = text.strip().upper()
        for r in cls:
            if t in (r.value, r.letter):
                return r
        raise ValueError(f"unknown access right {text!r}")


_RIGHT_CODES = {r: i + 1 for i, r in enumerate(AccessRight)}
_RIGHT_LETTERS = dict(zip(AccessRight, "RWX"))
_RIGHTS_BY_CODE = {v: k for k, v in _RIGHT_CODES.items()}

Rights = frozenset  # frozenset[AccessRight]; empty encodes {NULL}


def parse_rights(spec: str | Iterable[str | AccessRight]) -> frozenset[AccessRight]:
    """Accept ``"RW"``, ``"READ,WRITE"`` or an iterable of rights."""
    if isinstance(spec, str):
        s = spec.strip()
        if not s or s.upper() == "NULL":
            return frozenset()
        if "," in s or s.upper() in {r.value for r in AccessRight}:
            items = [p for p in s.split(",") if p.strip()]
        else:
            items = list(s)
        return frozenset(AccessRight.parse(p) for p in items)
    return frozenset(r if isinstance(r, AccessRight) else AccessRight.parse(r) for r in spec)


def sorted_rights(rights: Iterable[AccessRight]) -> list[AccessRight]:
    return sorted(rights, key=lambda r: r.code)


def encode_rights(rights: Iterable[AccessRight]) -> bytes:
    return bytes(r.code for r in sorted_rights(rights))


def decode_rights(raw: bytes) -> frozenset[AccessRight]:
    try:
        rights = [_RIGHTS_BY_CODE[b] for b in raw]
    except KeyError:
        raise DecodeError("unknown access right code") from None
    if len(set(rights)) != len(rights):
        raise DecodeError("duplicate access right")
    return frozenset(rights)


# ---------------------------------------------------------------------------
# context constraints


@dataclass(frozen=True)
class ContextSnapshot:
    """Environment as observed by the enforcing provider."""

    time_of_day: dt.time
    location: str | None = None


PredicateRegistry = Mapping[str, Callable[[ContextSnapshot], bool]]


def _seconds(t: dt.time) -> int:
    return t.hour * 3600 + t.minute * 60 + t.second


def _parse_time(text: str) -> dt.time:
    return dt.time.fromisoformat(text)


@dataclass(frozen=True)
class TimeWindow:
    """Half-open daily window ``[start, end)``; wraps past midnight when start > end.

    ``start == end`` is an empty window.
    """

    start: dt.time
    end: dt.time

    def satisfied_by(self, ctx: ContextSnapshot, predicates: PredicateRegistry | None = None) -> bool:
        t, s, e = _seconds(ctx.time_of_day), _seconds(self.start), _seconds(self.end)
        if s <= e:
            return s <= t < e
        return t >= s or t < e

    def encode(self) -> bytes:
        return codec.pack(1, _seconds(self.start), _seconds(self.end))

    def to_json(self) -> dict:
        return {"type": "time_window", "start": self.start.isoformat(), "end": self.end.isoformat()}


@dataclass(frozen=True)
class LocationTag:
    tag: str

    def satisfied_by(self, ctx: ContextSnapshot, predicates: PredicateRegistry | None = None) -> bool:
        return ctx.location == self.tag

    def encode(self) -> bytes:
        return codec.pack(2, self.tag)

    def to_json(self) -> dict:
        return {"type": "location", "tag": self.tag}


@dataclass(frozen=True)
class PredicateRef:
    """Named predicate resolved in the provider's registry; unknown names fail closed."""

    id: str

    def satisfied_by(self, ctx: ContextSnapshot, predicates: PredicateRegistry | None = None) -> bool:
        fn = (predicates or {}).get(self.id)
        return bool(fn is not None and fn(ctx))

    def encode(self) -> bytes:
        return codec.pack(3, self.id)

    def to_json(self) -> dict:
        return {"type": "predicate", "id": self.id}


ContextConstraint = Union[TimeWindow, LocationTag, PredicateRef]


def _time_from_seconds(n: int) -> dt.time:
    if n >= 86400:
        raise DecodeError("time of day out of range")
    return dt.time(n // 3600, (n // 60) % 60, n % 60)


def decode_constraint(raw: bytes) -> ContextConstraint:
    fields = codec.unpack(raw)
    if not fields:
        raise DecodeError("empty constraint")
    kind = codec.as_u64(fields[0])
    if kind == 1 and len(fields) == 3:
        return TimeWindow(_time_from_seconds(codec.as_u64(fields[1])),
                          _time_from_seconds(codec.as_u64(fields[2])))
    if kind == 2 and len(fields) == 2:
        return LocationTag(codec.as_str(fields[1]))
    if kind == 3 and len(fields) == 2:
        return PredicateRef(codec.as_str(fields[1]))
    raise DecodeError(f"unknown constraint kind {kind}")


def encode_context(context: Iterable[ContextConstraint]) -> bytes:
    return codec.pack_seq(sorted(c.encode() for c in context))


def decode_context(raw: bytes) -> frozenset[ContextConstraint]:
    return frozenset(decode_constraint(c) for c in codec.unpack(raw))


def context_to_json(context: Iterable[ContextConstraint]) -> list[dict]:
    return [c.to_json() for c in sorted(context, key=lambda c: c.encode())]


def context_from_json(items: Iterable[dict]) -> frozenset[ContextConstraint]:
    out = []
    for d in items:
        kind = d.get("type")
        if kind == "time_window":
            out.append(TimeWindow(_parse_time(d["start"]), _parse_time(d["end"])))
        elif kind == "location":
            out.append(LocationTag(d["tag"]))
        elif kind == "predicate":
            out.append(PredicateRef(d["id"]))
        else:
            raise ValueError(f"unknown context constraint type {kind!r}")
    return frozenset(out)


def parse_context_arg(text: str) -> ContextConstraint:
    """Command-line form: ``time=09:00-17:00``, ``location=lab``, ``predicate=name``."""
    key, _, value = text.partition("=")
    if key == "time":
        start, _, end = value.partition("-")
        return TimeWindow(_parse_time(start), _parse_time(end))
    if key == "location":
        return LocationTag(value)
    if key == "predicate":
        return PredicateRef(value)
    raise ValueError(f"bad context constraint {text!r}")


# ---------------------------------------------------------------------------
# tokens


@dataclass(frozen=True)
class DelegationSet:
    depth: int
    delegatee: tuple[Address, ...] = ()


class RevocationMode(str, enum.Enum):
    ZERO_DEPTH = "zero_depth"
    CLEAR_RIGHTS = "clear_rights"
    DISABLE = "disable"

    @property
    def code(self) -> int:
        return list(RevocationMode).index(self) + 1

    @classmethod
    def from_code(cls, code: int) -> "RevocationMode":
        modes = list(cls)
        if not 1 <= code <= len(modes):
            raise DecodeError(f"unknown revocation mode {code}")
        return modes[code - 1]


def compute_icap_id(issuer: Address, subject: Address, object: Address, depth: int,
                    rights: Iterable[AccessRight], context: Iterable[ContextConstraint],
                    issued_at: int) -> bytes:
    return codec.digest(codec.pack(
        "blendcac/icap", issuer, subject, object, depth,
        encode_rights(rights), encode_context(context), issued_at,
    ))


@dataclass(frozen=True)
class CapabilityToken:
    id: bytes
    issuer: Address
    subject: Address
    object: Address
    delegation: DelegationSet
    rights: frozenset[AccessRight]
    context: frozenset[ContextConstraint]
    issued_at: int
    enabled: bool = True
    # the grant as issued; hashed into the id and never mutated
    issued_depth: int = 0
    issued_rights: frozenset[AccessRight] = field(default_factory=frozenset)

    def recompute_id(self) -> bytes:
        return compute_icap_id(self.issuer, self.subject, self.object, self.issued_depth,
                               self.issued_rights, self.context, self.issued_at)

    def well_formed(self) -> bool:
        d = self.delegation
        return (
            self.id == self.recompute_id()
            and self.rights <= self.issued_rights
            and 0 <= d.depth <= self.issued_depth
            and len(d.delegatee) <= d.depth
            and len(set(d.delegatee)) == len(d.delegatee)
            and self.subject not in d.delegatee
        )

    def encode(self) -> bytes:
        return codec.pack(
            self.id, self.issuer, self.subject, self.object,
            self.delegation.depth, list(self.delegation.delegatee),
            encode_rights(self.rights), encode_context(self.context),
            self.issued_at, self.enabled, self.issued_depth, encode_rights(self.issued_rights),
        )

    def to_json(self) -> dict:
        return {
            "id": "0x" + self.id.hex(),
            "issuer": str(self.issuer),
            "subject": str(self.subject),
            "object": str(self.object),
            "delegation": {
                "depth": self.delegation.depth,
                "delegatee": [str(a) for a in self.delegation.delegatee],
            },
            "rights": [r.value for r in sorted_rights(self.rights)],
            "context": context_to_json(self.context),
            "issued_at": self.issued_at,
            "enabled": self.enabled,
            "issued_depth": self.issued_depth,
            "issued_rights": [r.value for r in sorted_rights(self.issued_rights)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, data: dict) -> "CapabilityToken":
        return cls(
            id=bytes.fromhex(data["id"][2:]),
            issuer=Address(data["issuer"]),
            subject=Address(data["subject"]),
            object=Address(data["object"]),
            delegation=DelegationSet(
                int(data["delegation"]["depth"]),
                tuple(Address(a) for a in data["delegation"]["delegatee"]),
            ),
            rights=frozenset(AccessRight(r) for r in data["rights"]),
            context=context_from_json(data["context"]),
            issued_at=int(data["issued_at"]),
            enabled=bool(data["enabled"]),
            issued_depth=int(data["issued_depth"]),
            issued_rights=frozenset(AccessRight(r) for r in data["issued_rights"]),
        )

    @classmethod
    def loads(cls, text: str | bytes) -> "CapabilityToken":
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class TokenQuery:
    token: CapabilityToken
    delegated_via: Address | None = None  # the subject, when found through delegation


# ---------------------------------------------------------------------------
# call encoding


def issue_call(subject: Address, object: Address, depth: int,
               rights: Iterable[AccessRight], context: Iterable[ContextConstraint] = ()) -> bytes:
    return bytes([OP_ISSUE]) + codec.pack(
        Address(subject), Address(object), depth, encode_rights(rights), encode_context(context)
    )


def delegate_call(target: Address) -> bytes:
    return bytes([OP_DELEGATE]) + codec.pack(Address(target))


def revoke_delegation_call(subject: Address, target: Address) -> bytes:
    return bytes([OP_REVOKE_DELEGATION]) + codec.pack(Address(subject), Address(target))


def revoke_token_call(subject: Address, mode: RevocationMode | str) -> bytes:
    return bytes([OP_REVOKE_TOKEN]) + codec.pack(Address(subject), RevocationMode(mode).code)


def _address(raw: bytes) -> Address:
    try:
        return Address(raw)
    except InvalidKey as exc:
        raise DecodeError(str(exc)) from exc


def encode_delegation(d: DelegationSet) -> bytes:
    return codec.pack(d.depth, list(d.delegatee))


def decode_delegation(raw: bytes) -> DelegationSet:
    depth, delegatees = codec.unpack(raw, 2)
    return DelegationSet(codec.as_u64(depth), tuple(_address(a) for a in codec.unpack(delegatees)))


# ---------------------------------------------------------------------------
# contract state


def _freeze(d: dict) -> Mapping:
    return MappingProxyType(d)


@register_contract_type
@dataclass(frozen=True)
class CapabilityContract:
    """The capability pool: one token per subject plus the inverse delegatee index."""

    type_name = "capability"

    owner: Address
    tokens: Mapping[Address, CapabilityToken] = field(default_factory=lambda: _freeze({}))
    delegatee_index: Mapping[Address, frozenset[bytes]] = field(default_factory=lambda: _freeze({}))

    @classmethod
    def create(cls, owner: Address) -> "CapabilityContract":
        return cls(Address(owner))

    # -- dispatch ---------------------------------------------------------

    def apply(self, sender: Address, call: bytes, height: int) -> tuple["CapabilityContract", bytes]:
        if not call:
            raise MalformedCall("empty call")
        op, body = call[0], call[1:]
        try:
            if op == OP_ISSUE:
                subject, obj, depth, rights, context = codec.unpack(body, 5)
                new, token = self.issue(sender, _address(subject), _address(obj), codec.as_u64(depth),
                                        decode_rights(rights), decode_context(context), height)
                return new, token.id
            if op == OP_DELEGATE:
                (target,) = codec.unpack(body, 1)
                new, d = self.delegate(sender, _address(target))
                return new, encode_delegation(d)
            if op == OP_REVOKE_DELEGATION:
                subject, target = codec.unpack(body, 2)
                new, d = self.revoke_delegation(sender, _address(subject), _address(target))
                return new, encode_delegation(d)
            if op == OP_REVOKE_TOKEN:
                subject, mode = codec.unpack(body, 2)
                new = self.revoke_token(sender, _address(subject),
                                        RevocationMode.from_code(codec.as_u64(mode)))
                return new, b""
        except DecodeError as exc:
            raise MalformedCall(str(exc)) from exc
        raise MalformedCall(f"unknown opcode 0x{op:02x}")

    # -- operations -------------------------------------------------------

    def _require_owner(self, sender: Address) -> None:
        if sender != self.owner:
            raise NotOwner(f"{sender} is not the contract owner")

    def _token(self, subject: Address) -> CapabilityToken:
        token = self.tokens.get(subject)
        if token is None:
            raise NoToken(f"no token for {subject}")
        return token

    def _with_token(self, token: CapabilityToken, old: CapabilityToken | None = None) -> "CapabilityContract":
        tokens = dict(self.tokens)
        tokens[token.subject] = token
        index = {k: set(v) for k, v in self.delegatee_index.items()}
        if old is not None:
            for a in old.delegation.delegatee:
                index[a].discard(old.id)
        for a in token.delegation.delegatee:
            index.setdefault(a, set()).add(token.id)
        frozen = {k: frozenset(v) for k, v in index.items() if v}
        return CapabilityContract(self.owner, _freeze(tokens), _freeze(frozen))

    def issue(self, sender: Address, subject: Address, obj: Address, depth: int,
              rights: frozenset[AccessRight], context: frozenset[ContextConstraint],
              height: int) -> tuple["CapabilityContract", CapabilityToken]:
        self._require_owner(sender)
        if subject in self.tokens:
            raise SubjectAlreadyHasToken(str(subject))
        token = CapabilityToken(
            id=compute_icap_id(self.owner, subject, obj, depth, rights, context, height),
            issuer=self.owner,
            subject=subject,
            object=obj,
            delegation=DelegationSet(depth, ()),
            rights=rights,
            context=context,
            issued_at=height,
            enabled=True,
            issued_depth=depth,
            issued_rights=rights,
        )
        return self._with_token(token), token

    def delegate(self, sender: Address, target: Address) -> tuple["CapabilityContract", DelegationSet]:
        token = self._token(sender)
        if not token.enabled:
            raise TokenDisabled(str(sender))
        d = token.delegation
        if target == token.subject:
            raise SelfDelegation(str(target))
        if target in d.delegatee:
            raise DuplicateDelegatee(str(target))
        if d.depth <= len(d.delegatee):
            raise DepthExhausted(f"delegation depth {d.depth} used up, remaining depth 0")
        new_d = DelegationSet(d.depth, d.delegatee + (target,))
        new_token = replace(token, delegation=new_d)
        return self._with_token(new_token, token), new_d

    def revoke_delegation(self, sender: Address, subject: Address,
                          target: Address) -> tuple["CapabilityContract", DelegationSet]:
        self._require_owner(sender)
        token = self._token(subject)
        d = token.delegation
        if target not in d.delegatee:
            raise NotADelegatee(str(target))
        new_d = DelegationSet(d.depth, tuple(a for a in d.delegatee if a != target))
        return self._with_token(replace(token, delegation=new_d), token), new_d

    def revoke_token(self, sender: Address, subject: Address, mode: RevocationMode) -> "CapabilityContract":
        self._require_owner(sender)
        token = self._token(subject)
        if mode is RevocationMode.ZERO_DEPTH:
            # depth 0 alone is indistinguishable from a never-delegable grant,
            # so the token is also switched off for its subject
            new = replace(token, delegation=DelegationSet(0, ()), enabled=False)
        elif mode is RevocationMode.CLEAR_RIGHTS:
            new = replace(token, rights=frozenset())
        else:
            new = replace(token, enabled=False)
        return self._with_token(new, token)

    # -- reads ------------------------------------------------------------

    def query_token(self, requester: Address, object: Address | None = None) -> TokenQuery | None:
        """Token held by ``requester`` as subject, else one delegated to it.

        With ``object`` given only tokens for that object are considered;
        among several delegated tokens the lowest id wins.
        """
        own = self.tokens.get(requester)
        if own is not None and (object is None or own.object == object):
            return TokenQuery(own, None)
        candidates = []
        by_id = {t.id: t for t in self.tokens.values()} if self.delegatee_index.get(requester) else {}
        for tid in sorted(self.delegatee_index.get(requester, ())):
            t = by_id[tid]
            if object is None or t.object == object:
                candidates.append(t)
        if not candidates:
            return None
        return TokenQuery(candidates[0], candidates[0].subject)

    def encode(self) -> bytes:
        return codec.pack(
            "capability", self.owner,
            [self.tokens[s].encode() for s in sorted(self.tokens)],
            [codec.pack(a, sorted(self.delegatee_index[a])) for a in sorted(self.delegatee_index)],
        )

    def check_invariants(self) -> list[str]:
        """Return violated invariants (empty when the pool is coherent)."""
        problems = []
        expected: dict[Address, set[bytes]] = {}
        for subject, t in self.tokens.items():
            if t.subject != subject:
                problems.append(f"token keyed under wrong subject {subject}")
            if len(t.delegation.delegatee) > t.delegation.depth:
                problems.append(f"depth bound violated for {subject}")
            if len(set(t.delegation.delegatee)) != len(t.delegation.delegatee):
                problems.append(f"duplicate delegatee for {subject}")
            if subject in t.delegation.delegatee:
                problems.append(f"self delegation for {subject}")
            if t.recompute_id() != t.id:
                problems.append(f"id mismatch for {subject}")
            for a in t.delegation.delegatee:
                expected.setdefault(a, set()).add(t.id)
        actual = {a: set(ids) for a, ids in self.delegatee_index.items()}
        if actual != expected:
            problems.append("delegatee index is not the inverse of the delegatee lists")
        return problems


def query_token(chain: Chain, contract: Address, requester: Address,
                object: Address | None = None, at_height: int | None = None) -> TokenQuery | None:
    state: CapabilityContract = chain.get_contract_state(contract, at_height)
    return state.query_token(requester, object)
