import dataclasses
import datetime as dt

import pytest
from hypothesis import given, settings, strategies as st

from blendcac.capcontract import (
    AccessRight,
    CapabilityContract,
    CapabilityToken,
    DelegationSet,
    LocationTag,
    PredicateRef,
    RevocationMode,
    TimeWindow,
    compute_icap_id,
    context_from_json,
    context_to_json,
    decode_context,
    delegate_call,
    encode_context,
    issue_call,
    parse_context_arg,
    parse_rights,
    query_token,
    revoke_delegation_call,
    revoke_token_call,
)
from blendcac.errors import (
    DepthExhausted,
    DuplicateDelegatee,
    MalformedCall,
    NotADelegatee,
    NotOwner,
    NoToken,
    SelfDelegation,
    SubjectAlreadyHasToken,
    TokenDisabled,
    UnknownContract,
)
from blendcac.identity import Address, keygen
from blendcac.ledger import Account

from oracles import PoolModel, icap_id

R, W, X = AccessRight.READ, AccessRight.WRITE, AccessRight.EXECUTE
OWNER = Address(b"\x0a" * 20)
S, O, B, E, G = (Address(bytes([i]) * 20) for i in range(1, 6))


def fresh():
    return CapabilityContract.create(OWNER)


def issued(depth=2, rights=frozenset({R}), context=frozenset()):
    c, _ = fresh().issue(OWNER, S, O, depth, rights, context, 7)
    return c


# -- rights and context parsing -----------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("R", {R}), ("RW", {R, W}), ("RWX", {R, W, X}), ("READ,WRITE", {R, W}),
    ("read", {R}), ("NULL", set()), ("", set()), ("EXECUTE", {X}),
])
def test_parse_rights(text, expected):
    assert parse_rights(text) == frozenset(expected)


def test_parse_rights_rejects_junk():
    with pytest.raises(ValueError):
        parse_rights("RQ")


def test_context_arg_and_json_round_trip():
    ctx = frozenset({parse_context_arg("time=09:00-17:00"), parse_context_arg("location=lab"),
                     parse_context_arg("predicate=badge")})
    assert ctx == {TimeWindow(dt.time(9), dt.time(17)), LocationTag("lab"), PredicateRef("badge")}
    assert context_from_json(context_to_json(ctx)) == ctx
    assert decode_context(encode_context(ctx)) == ctx


# -- ids ----------------------------------------------------------------------

def test_icap_id_matches_reference_encoder():
    ctx = [("time", 9 * 3600, 17 * 3600), ("location", "lab")]
    ours = compute_icap_id(OWNER, S, O, 2, {R, W},
                           {TimeWindow(dt.time(9), dt.time(17)), LocationTag("lab")}, 5)
    assert ours == icap_id(bytes(OWNER), bytes(S), bytes(O), 2, {"READ", "WRITE"}, ctx, 5)


def test_icap_id_deterministic():
    assert compute_icap_id(OWNER, S, O, 1, {R}, (), 3) == compute_icap_id(OWNER, S, O, 1, {R}, (), 3)


def test_icap_id_sensitive_to_rights_and_field_order():
    base = icap_id(bytes(OWNER), bytes(S), bytes(O), 1, {"READ"}, [], 3)
    more = icap_id(bytes(OWNER), bytes(S), bytes(O), 1, {"READ", "WRITE"}, [], 3)
    swapped = icap_id(bytes(OWNER), bytes(O), bytes(S), 1, {"READ"}, [], 3)
    assert len({base, more, swapped}) == 3
    assert compute_icap_id(OWNER, S, O, 1, {R}, (), 3) == base
    assert compute_icap_id(OWNER, S, O, 1, {R, W}, (), 3) == more
    assert compute_icap_id(OWNER, O, S, 1, {R}, (), 3) == swapped


@pytest.mark.parametrize("change", [
    {"issuer": B}, {"subject": B}, {"object": B}, {"issued_depth": 3},
    {"issued_rights": frozenset({R, W})}, {"context": frozenset({LocationTag("x")})},
    {"issued_at": 8},
])
def test_single_field_mutation_breaks_id(change):
    token = issued().tokens[S]
    assert token.recompute_id() == token.id and token.well_formed()
    forged = dataclasses.replace(token, **change)
    assert forged.recompute_id() != forged.id
    assert not forged.well_formed()


def test_widened_rights_or_depth_not_well_formed():
    token = issued(depth=1).tokens[S]
    assert not dataclasses.replace(token, rights=frozenset({R, W})).well_formed()
    assert not dataclasses.replace(token, delegation=DelegationSet(5, ())).well_formed()


def test_token_json_round_trip():
    token = issued(context=frozenset({TimeWindow(dt.time(22), dt.time(6))})).tokens[S]
    assert CapabilityToken.loads(token.dumps()) == token


# -- issue --------------------------------------------------------------------

def test_issue_then_query():
    c = issued()
    q = c.query_token(S)
    assert q.token.subject == S and q.delegated_via is None
    assert q.token.delegation == DelegationSet(2, ())


def test_non_owner_cannot_issue():
    with pytest.raises(NotOwner):
        fresh().issue(S, S, O, 1, frozenset({R}), frozenset(), 1)


def test_second_issue_rejected():
    with pytest.raises(SubjectAlreadyHasToken):
        issued().issue(OWNER, S, O, 1, frozenset({R}), frozenset(), 8)


# -- delegate -----------------------------------------------------------------

def test_delegate_increments_delegatee_list():
    c, d = issued().delegate(S, B)
    assert d == DelegationSet(2, (B,))


def test_delegate_beyond_depth():
    c, _ = issued().delegate(S, B)
    c, _ = c.delegate(S, E)
    with pytest.raises(DepthExhausted, match="remaining depth 0"):
        c.delegate(S, G)


def test_zero_depth_never_delegates():
    with pytest.raises(DepthExhausted):
        issued(depth=0).delegate(S, B)


def test_self_duplicate_and_missing():
    c, _ = issued().delegate(S, B)
    with pytest.raises(SelfDelegation):
        c.delegate(S, S)
    with pytest.raises(DuplicateDelegatee):
        c.delegate(S, B)
    with pytest.raises(NoToken):
        c.delegate(G, B)


def test_disabled_token_cannot_delegate():
    c = issued().revoke_token(OWNER, S, RevocationMode.DISABLE)
    with pytest.raises(TokenDisabled):
        c.delegate(S, B)


# -- revoke -------------------------------------------------------------------

def test_revoke_delegation():
    c, _ = issued().delegate(S, B)
    c, _ = c.delegate(S, E)
    c, d = c.revoke_delegation(OWNER, S, E)
    assert d.delegatee == (B,)
    with pytest.raises(NotADelegatee):
        c.revoke_delegation(OWNER, S, G)
    with pytest.raises(NotOwner):
        c.revoke_delegation(S, S, B)


@pytest.mark.parametrize("mode", list(RevocationMode))
def test_revoke_token_modes(mode):
    c, _ = issued().delegate(S, B)
    c = c.revoke_token(OWNER, S, mode)
    t = c.tokens[S]
    if mode is RevocationMode.ZERO_DEPTH:
        assert t.delegation == DelegationSet(0, ()) and not t.enabled
        assert c.query_token(B) is None
    elif mode is RevocationMode.CLEAR_RIGHTS:
        assert t.rights == frozenset() and t.enabled
    else:
        assert not t.enabled
    assert t.id == issued().tokens[S].id
    assert c.check_invariants() == []
    with pytest.raises(NotOwner):
        c.revoke_token(S, S, mode)


# -- query --------------------------------------------------------------------

def test_delegatee_query_marks_subject():
    c, _ = issued().delegate(S, B)
    q = c.query_token(B)
    assert q.token.subject == S and q.delegated_via == S
    assert c.query_token(G) is None
    assert c.query_token(B, object=G) is None


def test_own_token_preferred_over_delegated():
    c, _ = issued().delegate(S, B)
    c, _ = c.issue(OWNER, B, O, 0, frozenset({W}), frozenset(), 9)
    assert c.query_token(B).delegated_via is None


# -- on chain -----------------------------------------------------------------

def test_deploy_addresses_and_unknown(chain, owner_keys):
    acct = Account(owner_keys, chain)
    a1 = acct.deploy("capability", seal=True)
    a2 = acct.deploy("capability", seal=True)
    assert a1 != a2
    assert chain.get_contract_state(a1).tokens == {}
    with pytest.raises(UnknownContract):
        query_token(chain, keygen().address, S)


def test_malformed_calls_fail_cleanly():
    for call in (b"", b"\x09", b"\x01garbage", b"\x04" + b"\x00\x00\x00\x01x"):
        with pytest.raises(MalformedCall):
            fresh().apply(OWNER, call, 1)


# -- properties ----------------------------------------------------------------

ACTORS = [S, O, B, E, G]

op_strategy = st.one_of(
    st.tuples(st.just("issue"), st.sampled_from(ACTORS + [OWNER]), st.sampled_from(ACTORS),
              st.integers(0, 3), st.frozensets(st.sampled_from([R, W, X]))),
    st.tuples(st.just("delegate"), st.sampled_from(ACTORS), st.sampled_from(ACTORS)),
    st.tuples(st.just("revoke_delegation"), st.sampled_from([OWNER, S]), st.sampled_from(ACTORS),
              st.sampled_from(ACTORS)),
    st.tuples(st.just("revoke_token"), st.sampled_from([OWNER, B]), st.sampled_from(ACTORS),
              st.sampled_from(list(RevocationMode))),
)


def to_call(op):
    kind = op[0]
    if kind == "issue":
        return op[1], issue_call(op[2], O, op[3], op[4], ())
    if kind == "delegate":
        return op[1], delegate_call(op[2])
    if kind == "revoke_delegation":
        return op[1], revoke_delegation_call(op[2], op[3])
    return op[1], revoke_token_call(op[2], op[3])


def run_oracle(model, op):
    kind = op[0]
    if kind == "issue":
        return model.issue(op[1], op[2], O, op[3], {r.value for r in op[4]})
    if kind == "delegate":
        return model.delegate(op[1], op[2])
    if kind == "revoke_delegation":
        return model.revoke_delegation(op[1], op[2], op[3])
    return model.revoke_token(op[1], op[2], op[3].value)


def view(c):
    return {s: (t.object, t.delegation.depth, t.delegation.delegatee,
                frozenset(r.value for r in t.rights), t.enabled)
            for s, t in c.tokens.items()}


@settings(max_examples=300, deadline=None)
@given(st.lists(op_strategy, max_size=25))
def test_random_sequences_match_oracle_and_keep_invariants(ops):
    c, model = fresh(), PoolModel(OWNER)
    ids = {}
    for height, op in enumerate(ops, start=1):
        sender, call = to_call(op)
        expected = run_oracle(model, op)
        try:
            c, _ = c.apply(sender, call, height)
            got = None
        except Exception as exc:
            got = exc.code
        assert got == expected, op
        assert view(c) == model.view()
        assert c.check_invariants() == []
        for s, t in c.tokens.items():
            ids.setdefault(s, t.id)
            assert ids[s] == t.id  # never changes after issue
