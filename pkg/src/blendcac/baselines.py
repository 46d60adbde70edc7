"""RBAC and ABAC comparison engines.

Both keep the per-user authorization record (roles or attributes) in a
contract on the same ledger and resolve permissions against a local policy
store that is scanned on every check, the way an unindexed database query
would. ``Decision.probes`` counts the store records touched.

Store file format, one record per line, ``#`` starts a comment::

    role <user> <role>
    perm <role> <object> <R|W|X>+
    attr <user> <name>=<value>
    rule <id> <name>=<value>[,<name>=<value>...] <object> <R|W|X>+
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from . import codec
from .authz import AccessRequest, Decision, Reason
from .capcontract import AccessRight, parse_rights, sorted_rights
from .errors import DecodeError, InvalidKey, MalformedCall, NotOwner, ParseError
from .identity import Address
from .ledger import Chain, register_contract_type

OP_ASSIGN_ROLE = 0x11
OP_REVOKE_ROLE = 0x12
OP_SET_ATTRIBUTE = 0x21
OP_CLEAR_ATTRIBUTE = 0x22


@dataclass(frozen=True)
class RoleAssignment:
    user: Address
    role: str


@dataclass(frozen=True)
class RolePermission:
    role: str
    object: Address
    rights: frozenset[AccessRight]


@dataclass(frozen=True)
class AttributeAssignment:
    user: Address
    name: str
    value: str


@dataclass(frozen=True)
class AttributeRule:
    rule_id: int
    required_attributes: frozenset[tuple[str, str]]
    object: Address
    rights: frozenset[AccessRight]


@dataclass(frozen=True)
class BaselineStore:
    role_assignments: tuple[RoleAssignment, ...] = ()
    permissions: tuple[RolePermission, ...] = ()
    attributes: tuple[AttributeAssignment, ...] = ()
    rules: tuple[AttributeRule, ...] = ()

    def __len__(self) -> int:
        return (len(self.role_assignments) + len(self.permissions)
                + len(self.attributes) + len(self.rules))

    def roles_of(self, user: Address) -> frozenset[str]:
        return frozenset(a.role for a in self.role_assignments if a.user == user)

    def attributes_of(self, user: Address) -> dict[str, str]:
        return {a.name: a.value for a in self.attributes if a.user == user}

    def dumps(self) -> str:
        def rights(rs):
            return "".join(r.letter for r in sorted_rights(rs))

        lines = [f"role {a.user} {a.role}" for a in self.role_assignments]
        lines += [f"perm {p.role} {p.object} {rights(p.rights)}" for p in self.permissions]
        lines += [f"attr {a.user} {a.name}={a.value}" for a in self.attributes]
        lines += [
            f"rule {r.rule_id} {','.join(f'{k}={v}' for k, v in sorted(r.required_attributes))} "
            f"{r.object} {rights(r.rights)}"
            for r in self.rules
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def _addr(text: str, line: int) -> Address:
    try:
        return Address(text)
    except InvalidKey as exc:
        raise ParseError(str(exc), line) from None


def _rights(text: str, line: int) -> frozenset[AccessRight]:
    if not text or any(ch not in "RWX" for ch in text):
        raise ParseError(f"rights must be letters from R, W, X: {text!r}", line)
    return parse_rights(text)


def _pair(text: str, line: int) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep or not name or not value:
        raise ParseError(f"expected name=value, got {text!r}", line)
    return name, value


def parse_store(text: str) -> BaselineStore:
    roles: list[RoleAssignment] = []
    perms: list[RolePermission] = []
    attrs: list[AttributeAssignment] = []
    rules: list[AttributeRule] = []
    seen_roles, seen_perms, seen_attrs, seen_rules = set(), set(), set(), set()

    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        if kind == "role":
            if len(args) != 2:
                raise ParseError("role takes <user> <role>", n)
            a = RoleAssignment(_addr(args[0], n), args[1])
            if a in seen_roles:
                raise ParseError(f"duplicate role assignment {args[0]} {args[1]}", n)
            seen_roles.add(a)
            roles.append(a)
        elif kind == "perm":
            if len(args) != 3:
                raise ParseError("perm takes <role> <object> <rights>", n)
            p = RolePermission(args[0], _addr(args[1], n), _rights(args[2], n))
            if (p.role, p.object) in seen_perms:
                raise ParseError(f"duplicate permission for ({p.role}, {p.object})", n)
            seen_perms.add((p.role, p.object))
            perms.append(p)
        elif kind == "attr":
            if len(args) != 2:
                raise ParseError("attr takes <user> <name>=<value>", n)
            user = _addr(args[0], n)
            name, value = _pair(args[1], n)
            if (user, name) in seen_attrs:
                raise ParseError(f"duplicate attribute {name} for {user}", n)
            seen_attrs.add((user, name))
            attrs.append(AttributeAssignment(user, name, value))
        elif kind == "rule":
            if len(args) != 4:
                raise ParseError("rule takes <id> <attrs> <object> <rights>", n)
            try:
                rule_id = int(args[0])
            except ValueError:
                raise ParseError(f"rule id must be an integer: {args[0]!r}", n) from None
            if rule_id in seen_rules:
                raise ParseError(f"duplicate rule_id {rule_id}", n)
            seen_rules.add(rule_id)
            required = frozenset(_pair(p, n) for p in args[1].split(","))
            rules.append(AttributeRule(rule_id, required, _addr(args[2], n), _rights(args[3], n)))
        else:
            raise ParseError(f"unknown record type {kind!r}", n)

    return BaselineStore(tuple(roles), tuple(perms), tuple(attrs), tuple(rules))


def load_store(path: str | Path) -> BaselineStore:
    return parse_store(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# checks


def rbac_check(user: Address, object: Address, action: AccessRight, store: BaselineStore,
               roles: Iterable[str] | None = None) -> Decision:
    """Grant iff one of the user's roles holds a permission on object covering action.

    ``roles`` normally comes from the role contract; without it the store's
    own assignments are used.
    """
    held = frozenset(roles) if roles is not None else store.roles_of(user)
    if not held:
        return Decision.deny(Reason.NO_TOKEN)
    granted = False
    probes = 0
    for p in store.permissions:
        probes += 1
        if p.role in held and p.object == object and action in p.rights:
            granted = True
    return Decision.grant(probes) if granted else Decision.deny(Reason.ACTION_NOT_IN_AR, probes)


def abac_check(user: Address, object: Address, action: AccessRight, store: BaselineStore,
               attributes: Mapping[str, str] | None = None) -> Decision:
    """Permit-overrides: grant iff any rule whose attributes the user has covers the action."""
    attrs = dict(attributes) if attributes is not None else store.attributes_of(user)
    if not attrs:
        return Decision.deny(Reason.NO_TOKEN)
    have = set(attrs.items())
    granted = False
    probes = 0
    for r in store.rules:
        probes += 1
        if r.object == object and action in r.rights and r.required_attributes <= have:
            granted = True
    return Decision.grant(probes) if granted else Decision.deny(Reason.ACTION_NOT_IN_AR, probes)


# ---------------------------------------------------------------------------
# contracts holding the per-user authorization records


def _address(raw: bytes) -> Address:
    try:
        return Address(raw)
    except InvalidKey as exc:
        raise MalformedCall(str(exc)) from exc


def assign_role_call(user: Address, role: str) -> bytes:
    return bytes([OP_ASSIGN_ROLE]) + codec.pack(Address(user), role)


def revoke_role_call(user: Address, role: str) -> bytes:
    return bytes([OP_REVOKE_ROLE]) + codec.pack(Address(user), role)


def set_attribute_call(user: Address, name: str, value: str) -> bytes:
    return bytes([OP_SET_ATTRIBUTE]) + codec.pack(Address(user), name, value)


def clear_attribute_call(user: Address, name: str) -> bytes:
    return bytes([OP_CLEAR_ATTRIBUTE]) + codec.pack(Address(user), name)


@register_contract_type
@dataclass(frozen=True)
class RoleContract:
    type_name = "rbac"

    owner: Address
    roles: Mapping[Address, tuple[str, ...]] = field(default_factory=lambda: MappingProxyType({}))

    @classmethod
    def create(cls, owner: Address) -> "RoleContract":
        return cls(Address(owner))

    def apply(self, sender: Address, call: bytes, height: int) -> tuple["RoleContract", bytes]:
        if sender != self.owner:
            raise NotOwner(f"{sender} is not the contract owner")
        if not call or call[0] not in (OP_ASSIGN_ROLE, OP_REVOKE_ROLE):
            raise MalformedCall("unknown opcode")
        try:
            user_raw, role_raw = codec.unpack(call[1:], 2)
            user, role = _address(user_raw), codec.as_str(role_raw)
        except DecodeError as exc:
            raise MalformedCall(str(exc)) from exc
        current = set(self.roles.get(user, ()))
        if call[0] == OP_ASSIGN_ROLE:
            current.add(role)
        else:
            current.discard(role)
        roles = dict(self.roles)
        if current:
            roles[user] = tuple(sorted(current))
        else:
            roles.pop(user, None)
        return RoleContract(self.owner, MappingProxyType(roles)), b""

    def record(self, user: Address) -> dict | None:
        roles = self.roles.get(user)
        if roles is None:
            return None
        return {"user": str(user), "roles": list(roles), "enabled": True}

    def encode(self) -> bytes:
        return codec.pack("rbac", self.owner,
                          [codec.pack(u, list(self.roles[u])) for u in sorted(self.roles)])


@register_contract_type
@dataclass(frozen=True)
class AttributeContract:
    type_name = "abac"

    owner: Address
    attributes: Mapping[Address, tuple[tuple[str, str], ...]] = field(
        default_factory=lambda: MappingProxyType({})
    )

    @classmethod
    def create(cls, owner: Address) -> "AttributeContract":
        return cls(Address(owner))

    def apply(self, sender: Address, call: bytes, height: int) -> tuple["AttributeContract", bytes]:
        if sender != self.owner:
            raise NotOwner(f"{sender} is not the contract owner")
        try:
            if call and call[0] == OP_SET_ATTRIBUTE:
                u, n, v = codec.unpack(call[1:], 3)
                user, name, value = _address(u), codec.as_str(n), codec.as_str(v)
            elif call and call[0] == OP_CLEAR_ATTRIBUTE:
                u, n = codec.unpack(call[1:], 2)
                user, name, value = _address(u), codec.as_str(n), None
            else:
                raise MalformedCall("unknown opcode")
        except DecodeError as exc:
            raise MalformedCall(str(exc)) from exc
        current = dict(self.attributes.get(user, ()))
        if value is None:
            current.pop(name, None)
        else:
            current[name] = value
        attrs = dict(self.attributes)
        if current:
            attrs[user] = tuple(sorted(current.items()))
        else:
            attrs.pop(user, None)
        return AttributeContract(self.owner, MappingProxyType(attrs)), b""

    def record(self, user: Address) -> dict | None:
        pairs = self.attributes.get(user)
        if pairs is None:
            return None
        return {"user": str(user), "attributes": dict(pairs), "enabled": True}

    def encode(self) -> bytes:
        return codec.pack("abac", self.owner, [
            codec.pack(u, [codec.pack(k, v) for k, v in self.attributes[u]])
            for u in sorted(self.attributes)
        ])


# ---------------------------------------------------------------------------
# enforcement adapters


@dataclass(frozen=True)
class _Record:
    user: Address
    values: object
    enabled: bool


class _ContractModel:
    key = ""

    def __init__(self, contract: Address, store: BaselineStore):
        self.contract = contract
        self.store = store

    def query(self, chain: Chain, requester, object, at_height=None):
        state = chain.get_contract_state(self.contract, at_height)
        rec = state.record(requester)
        return None if rec is None else json.dumps(rec, separators=(",", ":"))

    def parse(self, payload):
        d = json.loads(payload)
        return _Record(Address(d["user"]), d[self.key], bool(d["enabled"]))

    def validate(self, record):
        return record.enabled


class RBACModel(_ContractModel):
    name = "rbac"
    key = "roles"

    def verify(self, record, request: AccessRequest) -> Decision:
        return rbac_check(request.requester, request.object, request.action, self.store,
                          roles=record.values)


class ABACModel(_ContractModel):
    name = "abac"
    key = "attributes"

    def verify(self, record, request: AccessRequest) -> Decision:
        return abac_check(request.requester, request.object, request.action, self.store,
                          attributes=record.values)
