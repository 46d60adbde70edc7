"""Keys, addresses and the domain owner's profile database."""

from __future__ import annotations

import enum
import json
import sqlite3
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import codec
from .errors import AlreadyRegistered, InvalidKey, ProfileNotFound, Unauthorized

PUBLIC_KEY_SIZE = 32
ADDRESS_SIZE = 20


class Address(bytes):
    """20-byte account address; also serves as an entity's VID."""

    def __new__(cls, value: bytes | str):
        if isinstance(value, str):
            text = value[2:] if value.lower().startswith("0x") else value
            try:
                value = bytes.fromhex(text)
            except ValueError as exc:
                raise InvalidKey(f"not a hex address: {value!r}") from exc
        if len(value) != ADDRESS_SIZE:
            raise InvalidKey(f"address must be {ADDRESS_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __str__(self) -> str:
        return "0x" + self.hex()

    def __repr__(self) -> str:
        return f"Address({str(self)!r})"


VID = Address

ZERO_ADDRESS = Address(bytes(ADDRESS_SIZE))


def derive_address(public_key: bytes) -> Address:
    """Last 20 bytes of the SHA3-256 digest of the raw public key."""
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_SIZE:
        raise InvalidKey("public key must be 32 raw bytes")
    return Address(codec.digest(bytes(public_key))[-ADDRESS_SIZE:])


@dataclass(frozen=True, repr=False)
class KeyPair:
    private_key: bytes
    public_key: bytes

    def __repr__(self) -> str:
        return f"KeyPair(address={self.address})"

    @classmethod
    def from_private(cls, private_key: bytes) -> "KeyPair":
        if len(private_key) != 32:
            raise InvalidKey("private key must be 32 bytes")
        sk = Ed25519PrivateKey.from_private_bytes(private_key)
        pk = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(bytes(private_key), pk)

    @property
    def address(self) -> Address:
        return derive_address(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(message)


def keygen() -> KeyPair:
    """Fresh Ed25519 key pair from the OS entropy source."""
    sk = Ed25519PrivateKey.generate()
    raw = sk.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )
    return KeyPair.from_private(raw)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def save_key(keys: KeyPair, path: str | Path) -> None:
    Path(path).write_text(keys.private_key.hex() + "\n", encoding="utf-8")


def load_key(path: str | Path) -> KeyPair:
    text = Path(path).read_text(encoding="utf-8").strip()
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise InvalidKey(f"{path}: not a hex private key") from exc
    return KeyPair.from_private(raw)


class EntityKind(str, enum.Enum):
    HUMAN = "human"
    DEVICE = "device"
    OTHER = "other"  # reserved for future kinds


class EntityStatus(str, enum.Enum):
    ACTIVE = "active"
    SUSPENDED = "suspended"


@dataclass(frozen=True)
class EntityProfile:
    vid: Address
    kind: EntityKind
    display_name: str
    registered_at: int  # ms since epoch
    status: EntityStatus = EntityStatus.ACTIVE

    def to_json(self) -> dict:
        return {
            "vid": str(self.vid),
            "kind": self.kind.value,
            "display_name": self.display_name,
            "registered_at": self.registered_at,
            "status": self.status.value,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EntityProfile":
        return cls(
            vid=Address(data["vid"]),
            kind=EntityKind(data["kind"]),
            display_name=data["display_name"],
            registered_at=int(data["registered_at"]),
            status=EntityStatus(data.get("status", "active")),
        )


def registration_message(profile: EntityProfile) -> bytes:
    return codec.pack(
        "blendcac/register", profile.vid, profile.kind.value, profile.display_name,
        profile.registered_at, profile.status.value,
    )


def status_message(vid: Address, status: EntityStatus) -> bytes:
    return codec.pack("blendcac/status", vid, status.value)


def sign_registration(owner: KeyPair, profile: EntityProfile) -> bytes:
    return owner.sign(registration_message(profile))


def sign_status(owner: KeyPair, vid: Address, status: EntityStatus) -> bytes:
    return owner.sign(status_message(vid, status))


_SCHEMA = """
CREATE TABLE IF NOT EXISTS profiles (
    vid TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    display_name TEXT NOT NULL,
    registered_at INTEGER NOT NULL,
    status TEXT NOT NULL
)
"""


class ProfileDatabase:
    """Single-file profile store owned by one domain owner.

    Every mutation must carry a signature by the owner's key over the
    canonical message for that mutation.
    """

    def __init__(self, owner_public_key: bytes, path: str | Path = ":memory:"):
        derive_address(owner_public_key)  # validates the key
        self.owner_public_key = bytes(owner_public_key)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(str(path), check_same_thread=False)
        self._db.execute(_SCHEMA)
        self._db.commit()

    @property
    def owner(self) -> Address:
        return derive_address(self.owner_public_key)

    def close(self) -> None:
        self._db.close()

    def _authenticate(self, signature: bytes, message: bytes) -> None:
        if not verify_signature(self.owner_public_key, signature, message):
            raise Unauthorized("mutation not signed by the domain owner")

    def register_entity(self, owner_signature: bytes, profile: EntityProfile) -> Address:
        self._authenticate(owner_signature, registration_message(profile))
        with self._lock:
            try:
                self._db.execute(
                    "INSERT INTO profiles VALUES (?, ?, ?, ?, ?)",
                    (str(profile.vid), profile.kind.value, profile.display_name,
                     profile.registered_at, profile.status.value),
                )
            except sqlite3.IntegrityError as exc:
                raise AlreadyRegistered(str(profile.vid)) from exc
            self._db.commit()
        return profile.vid

    def set_status(self, owner_signature: bytes, vid: Address, status: EntityStatus) -> EntityProfile:
        self._authenticate(owner_signature, status_message(vid, status))
        with self._lock:
            cur = self._db.execute(
                "UPDATE profiles SET status = ? WHERE vid = ?", (status.value, str(vid))
            )
            if cur.rowcount == 0:
                raise ProfileNotFound(str(vid))
            self._db.commit()
        return self.lookup_profile(vid)

    def lookup_profile(self, vid: Address) -> EntityProfile:
        with self._lock:
            row = self._db.execute(
                "SELECT vid, kind, display_name, registered_at, status FROM profiles WHERE vid = ?",
                (str(Address(vid)),),
            ).fetchone()
        if row is None:
            raise ProfileNotFound(str(vid))
        return _row_to_profile(row)

    def is_registered(self, vid: Address) -> bool:
        try:
            self.lookup_profile(vid)
        except ProfileNotFound:
            return False
        return True

    def profiles(self) -> list[EntityProfile]:
        with self._lock:
            rows = self._db.execute(
                "SELECT vid, kind, display_name, registered_at, status FROM profiles ORDER BY vid"
            ).fetchall()
        return [_row_to_profile(r) for r in rows]

    def __len__(self) -> int:
        with self._lock:
            return self._db.execute("SELECT COUNT(*) FROM profiles").fetchone()[0]

    def export_json(self) -> str:
        return json.dumps([p.to_json() for p in self.profiles()], indent=2)

    def import_json(self, owner: KeyPair, text: str) -> list[Address]:
        """Register every profile in a JSON export; the owner's key signs each."""
        return [
            self.register_entity(sign_registration(owner, p), p)
            for p in (EntityProfile.from_json(d) for d in json.loads(text))
        ]


def _row_to_profile(row: tuple) -> EntityProfile:
    return EntityProfile(
        vid=Address(row[0]),
        kind=EntityKind(row[1]),
        display_name=row[2],
        registered_at=row[3],
        status=EntityStatus(row[4]),
    )


def new_profile(vid: Address, kind: EntityKind | str, name: str, now_ms: int | None = None) -> EntityProfile:
    return EntityProfile(
        vid=Address(vid),
        kind=EntityKind(kind),
        display_name=name,
        registered_at=int(time.time() * 1000) if now_ms is None else now_ms,
    )


def register_all(db: ProfileDatabase, owner: KeyPair, profiles: Iterable[EntityProfile]) -> None:
    for p in profiles:
        db.register_entity(sign_registration(owner, p), p)
