"""Exception hierarchy shared by every layer.

Each class carries a stable ``code`` (used in transaction receipts and JSON
output) and an ``exit_code`` used by the command line tool.
"""

from __future__ import annotations


class BlendCACError(Exception):
    code = "error"
    exit_code = 1


# identity

class InvalidKey(BlendCACError):
    code = "invalid_key"
    exit_code = 10


class AlreadyRegistered(BlendCACError):
    code = "already_registered"
    exit_code = 11


class Unauthorized(BlendCACError):
    code = "unauthorized"
    exit_code = 12


class ProfileNotFound(BlendCACError, LookupError):
    code = "not_found"
    exit_code = 13


# ledger

class LedgerError(BlendCACError):
    code = "ledger_error"
    exit_code = 20


class BadSignature(LedgerError):
    code = "bad_signature"
    exit_code = 21


class BadNonce(LedgerError):
    code = "bad_nonce"
    exit_code = 22


class UnknownContract(LedgerError):
    code = "unknown_contract"
    exit_code = 23


class HeightOutOfRange(LedgerError, IndexError):
    code = "height_out_of_range"
    exit_code = 24


class SealTooEarly(LedgerError):
    code = "seal_too_early"
    exit_code = 25


class DecodeError(LedgerError, ValueError):
    code = "decode_error"
    exit_code = 26


# contract calls; raised inside the sealer and recorded as failed receipts

class ContractError(BlendCACError):
    code = "contract_error"
    exit_code = 30


class NotOwner(ContractError):
    code = "not_owner"
    exit_code = 31


class SubjectAlreadyHasToken(ContractError):
    code = "subject_already_has_token"
    exit_code = 32


class NoToken(ContractError):
    code = "no_token"
    exit_code = 33


class TokenDisabled(ContractError):
    code = "token_disabled"
    exit_code = 34


class DepthExhausted(ContractError):
    code = "depth_exhausted"
    exit_code = 35


class DuplicateDelegatee(ContractError):
    code = "duplicate_delegatee"
    exit_code = 36


class SelfDelegation(ContractError):
    code = "self_delegation"
    exit_code = 37


class NotADelegatee(ContractError):
    code = "not_a_delegatee"
    exit_code = 38


class MalformedCall(ContractError):
    code = "malformed_call"
    exit_code = 39


# policy / baselines

class UnregisteredRequester(BlendCACError):
    code = "unregistered_requester"
    exit_code = 40


class ParseError(BlendCACError, ValueError):
    code = "parse_error"
    exit_code = 41

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


CONTRACT_ERRORS: dict[str, type[ContractError]] = {
    cls.code: cls
    for cls in (
        ContractError, NotOwner, SubjectAlreadyHasToken, NoToken, TokenDisabled,
        DepthExhausted, DuplicateDelegatee, SelfDelegation, NotADelegatee, MalformedCall,
    )
}
