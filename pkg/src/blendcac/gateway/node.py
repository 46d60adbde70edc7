"""On-disk node state and the ``serve`` entry point.

A node home directory holds::

    keys/<name>.key   hex Ed25519 private keys
    chain.log         append-only block log
    profiles.db       the owner's profile database (sqlite)
    state.json        deployed contract addresses
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from ..authz import CapabilityModel, DomainOwner, ServiceProvider, load_policy
from ..identity import Address, KeyPair, ProfileDatabase, load_key, save_key
from ..ledger import Chain, Sealer

logger = logging.getLogger(__name__)


def read_config(path: str | Path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


@dataclass
class Home:
    path: Path

    def __post_init__(self):
        self.path = Path(self.path)
        (self.path / "keys").mkdir(parents=True, exist_ok=True)

    # keys

    def key_path(self, name: str) -> Path:
        p = Path(name)
        if p.suffix == ".key" or p.exists():
            return p
        return self.path / "keys" / f"{name}.key"

    def save_key(self, name: str, keys: KeyPair) -> Path:
        p = self.path / "keys" / f"{name}.key"
        save_key(keys, p)
        return p

    def load_key(self, name: str) -> KeyPair:
        return load_key(self.key_path(name))

    # ledger and profiles

    def chain(self, block_interval: float = 0.0) -> Chain:
        return Chain(block_interval, log_path=self.path / "chain.log")

    def profiles(self, owner: KeyPair) -> ProfileDatabase:
        return ProfileDatabase(owner.public_key, self.path / "profiles.db")

    # deployed contracts

    @property
    def _state_file(self) -> Path:
        return self.path / "state.json"

    def state(self) -> dict:
        if self._state_file.exists():
            return json.loads(self._state_file.read_text(encoding="utf-8"))
        return {"contracts": {}}

    def set_contract(self, type_name: str, address: Address) -> None:
        st = self.state()
        st.setdefault("contracts", {})[type_name] = str(address)
        self._state_file.write_text(json.dumps(st, indent=2), encoding="utf-8")

    def contract(self, type_name: str = "capability") -> Address | None:
        addr = self.state().get("contracts", {}).get(type_name)
        return Address(addr) if addr else None


@dataclass
class ServeConfig:
    home: str = ".blendcac"
    host: str = "127.0.0.1"
    port: int = 8080
    block_interval: float = 15.0
    owner_key: str = "owner"
    provider_key: str | None = None  # defaults to the owner's identity
    policy: str | None = None
    resources: str | None = None  # directory; each file is one resource
    location: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, file_values: dict[str, str], overrides: dict) -> "ServeConfig":
        merged: dict = dict(file_values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        known = {f for f in cls.__dataclass_fields__ if f != "extra"}
        cfg = cls(**{k: v for k, v in merged.items() if k in known})
        cfg.port = int(cfg.port)
        cfg.block_interval = float(cfg.block_interval)
        cfg.extra = {k: v for k, v in merged.items() if k not in known}
        return cfg


def load_resources(directory: str | None) -> dict[str, bytes]:
    if directory is None:
        return {"status": b"ok\n"}
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir()) if p.is_file()}


def build_gateway(cfg: ServeConfig):
    from .http import Gateway

    home = Home(Path(cfg.home))
    owner_keys = home.load_key(cfg.owner_key)
    chain = home.chain(cfg.block_interval)
    profiles = home.profiles(owner_keys)
    rules = load_policy(cfg.policy) if cfg.policy else []
    owner = DomainOwner(owner_keys, chain, profiles, rules, contract=home.contract())
    if owner.contract is None:
        owner.deploy(seal=True)
        home.set_contract("capability", owner.contract)
    object_vid = home.load_key(cfg.provider_key).address if cfg.provider_key else owner.address
    provider = ServiceProvider(object_vid, chain, CapabilityModel(owner.contract),
                               load_resources(cfg.resources), location=cfg.location)
    return Gateway(chain, owner=owner, provider=provider, auto_seal=cfg.block_interval == 0)


def serve(cfg: ServeConfig) -> None:
    import uvicorn

    from .http import create_app

    gw = build_gateway(cfg)
    sealer = Sealer(gw.chain) if cfg.block_interval > 0 else None
    if sealer:
        sealer.start()
    gw.provider.start()
    logger.info("serving on %s:%d (contract %s)", cfg.host, cfg.port, gw.owner.contract)
    try:
        uvicorn.run(create_app(gw), host=cfg.host, port=cfg.port, log_level="info")
    finally:
        gw.provider.stop()
        if sealer:
            sealer.stop()
