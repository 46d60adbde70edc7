from __future__ import annotations

import pytest

from blendcac.authz import DomainOwner
from blendcac.identity import EntityKind, ProfileDatabase, keygen, new_profile, register_all
from blendcac.ledger import Chain

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def chain():
    return Chain(0)


@pytest.fixture
def owner_keys():
    return keygen()


@pytest.fixture
def people():
    """Five fresh identities: s (subject), o (object), and three others."""
    return {name: keygen() for name in ("s", "o", "b", "e", "g")}


@pytest.fixture
def domain(chain, owner_keys, people):
    db = ProfileDatabase(owner_keys.public_key)
    register_all(db, owner_keys, [
        new_profile(k.address, EntityKind.DEVICE, name) for name, k in people.items()
    ])
    owner = DomainOwner(owner_keys, chain, db)
    owner.deploy(seal=True)
    return owner
