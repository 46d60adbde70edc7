"""Capability-based access control over a simulated ledger."""

from . import baselines, capcontract  # noqa: F401  registers contract types
from .authz import (
    AccessRequest,
    Decision,
    DomainOwner,
    Outcome,
    Reason,
    ServiceProvider,
    ServiceRequest,
    StageTimings,
)
from .capcontract import AccessRight, CapabilityContract, CapabilityToken, RevocationMode
from .errors import BlendCACError
from .identity import Address, KeyPair, ProfileDatabase, keygen
from .ledger import Chain, Sealer, verify_chain

__all__ = [
    "AccessRequest", "AccessRight", "Address", "BlendCACError", "CapabilityContract",
    "CapabilityToken", "Chain", "Decision", "DomainOwner", "KeyPair", "Outcome",
    "ProfileDatabase", "Reason", "RevocationMode", "Sealer", "ServiceProvider",
    "ServiceRequest", "StageTimings", "keygen", "verify_chain",
]
