"""Simulated append-only ledger hosting native contract state machines.

There is no mining. A single sealer drains the pending queue into a new
block every ``block_interval`` seconds (or on demand in tests). Contract
state is never mutated in place: every contract call returns a new state
value, so per-height snapshots share structure and are safe to hand to any
thread.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, ClassVar, Iterable, Protocol, Sequence

from . import codec
from .errors import (
    BadNonce,
    BadSignature,
    ContractError,
    DecodeError,
    HeightOutOfRange,
    InvalidKey,
    MalformedCall,
    SealTooEarly,
    UnknownContract,
)
from .identity import ZERO_ADDRESS, Address, KeyPair, derive_address, verify_signature

logger = logging.getLogger(__name__)

HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)
DEPLOY_ADDRESS = ZERO_ADDRESS
OP_DEPLOY = 0x05
DEFAULT_BLOCK_INTERVAL = 15.0


def now_ms() -> int:
    return time.time_ns() // 1_000_000


# ---------------------------------------------------------------------------
# transactions


def tx_signing_payload(sender: Address, nonce: int, contract: Address, call: bytes) -> bytes:
    return codec.pack("blendcac/tx", sender, nonce, contract, call)


@dataclass(frozen=True)
class SignedTransaction:
    sender: Address
    public_key: bytes  # Ed25519 has no key recovery, so the key travels with the tx
    nonce: int
    contract: Address
    call: bytes
    signature: bytes

    def encode(self) -> bytes:
        return codec.pack(self.sender, self.public_key, self.nonce, self.contract,
                          self.call, self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "SignedTransaction":
        sender, pk, nonce, contract, call, sig = codec.unpack(data, 6)
        try:
            return cls(Address(sender), pk, codec.as_u64(nonce), Address(contract), call, sig)
        except InvalidKey as exc:
            raise DecodeError(str(exc)) from exc

    @property
    def txid(self) -> bytes:
        return codec.digest(self.encode())

    def signature_valid(self) -> bool:
        try:
            if derive_address(self.public_key) != self.sender:
                return False
        except InvalidKey:
            return False
        payload = tx_signing_payload(self.sender, self.nonce, self.contract, self.call)
        return verify_signature(self.public_key, self.signature, payload)


def sign_transaction(keys: KeyPair, nonce: int, contract: Address, call: bytes) -> SignedTransaction:
    sender = keys.address
    sig = keys.sign(tx_signing_payload(sender, nonce, Address(contract), call))
    return SignedTransaction(sender, keys.public_key, nonce, Address(contract), bytes(call), sig)


@dataclass(frozen=True)
class Receipt:
    ok: bool
    error: str = ""
    output: bytes = b""

    def encode(self) -> bytes:
        return codec.pack(self.ok, self.error, self.output)

    @classmethod
    def decode(cls, data: bytes) -> "Receipt":
        ok, error, output = codec.unpack(data, 3)
        return cls(codec.as_bool(ok), codec.as_str(error), output)


# ---------------------------------------------------------------------------
# blocks


def compute_block_hash(height: int, prev_hash: bytes, timestamp: int,
                       transactions: Sequence[SignedTransaction],
                       receipts: Sequence[Receipt]) -> bytes:
    return codec.digest(codec.pack(
        "blendcac/block", height, prev_hash, timestamp,
        [tx.txid for tx in transactions],
        [r.encode() for r in receipts],
    ))


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: int  # ms since epoch
    transactions: tuple[SignedTransaction, ...]
    receipts: tuple[Receipt, ...]
    block_hash: bytes

    def encode(self) -> bytes:
        return codec.pack(
            self.height, self.prev_hash, self.timestamp,
            [tx.encode() for tx in self.transactions],
            [r.encode() for r in self.receipts],
            self.block_hash,
        )

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        height, prev, ts, txs, receipts, bhash = codec.unpack(data, 6)
        return cls(
            height=codec.as_u64(height),
            prev_hash=codec.as_fixed(prev, HASH_SIZE),
            timestamp=codec.as_u64(ts),
            transactions=tuple(SignedTransaction.decode(t) for t in codec.unpack(txs)),
            receipts=tuple(Receipt.decode(r) for r in codec.unpack(receipts)),
            block_hash=codec.as_fixed(bhash, HASH_SIZE),
        )

    def computed_hash(self) -> bytes:
        return compute_block_hash(self.height, self.prev_hash, self.timestamp,
                                  self.transactions, self.receipts)


def make_block(height: int, prev_hash: bytes, timestamp: int,
               transactions: Sequence[SignedTransaction], receipts: Sequence[Receipt]) -> Block:
    txs, rs = tuple(transactions), tuple(receipts)
    return Block(height, prev_hash, timestamp, txs, rs,
                 compute_block_hash(height, prev_hash, timestamp, txs, rs))


def make_genesis(timestamp: int = 0) -> Block:
    return make_block(0, ZERO_HASH, timestamp, (), ())


# ---------------------------------------------------------------------------
# contracts


class Contract(Protocol):
    """A native contract state machine. Instances are immutable values."""

    type_name: ClassVar[str]
    owner: Address

    @classmethod
    def create(cls, owner: Address) -> "Contract": ...

    def apply(self, sender: Address, call: bytes, height: int) -> tuple["Contract", bytes]:
        """Return the successor state and call output, or raise ContractError."""
        ...

    def encode(self) -> bytes: ...


CONTRACT_TYPES: dict[str, type] = {}


def register_contract_type(cls):
    CONTRACT_TYPES[cls.type_name] = cls
    return cls


def encode_deploy(type_name: str) -> bytes:
    return bytes([OP_DEPLOY]) + codec.pack(type_name)


def contract_address(owner: Address, nonce: int) -> Address:
    return Address(codec.digest(codec.pack(owner, nonce))[-20:])


# ---------------------------------------------------------------------------
# replay engine


class ChainViolation(Exception):
    def __init__(self, height: int, reason: str):
        super().__init__(f"block {height}: {reason}")
        self.height = height
        self.reason = reason


@dataclass
class _State:
    """Ledger state at the tip: live contracts and last accepted nonces."""

    contracts: dict[Address, object] = field(default_factory=dict)
    nonces: dict[Address, int] = field(default_factory=dict)
    history: list[dict[Address, object]] = field(default_factory=list)
    receipts: dict[bytes, tuple[int, Receipt]] = field(default_factory=dict)

    def execute(self, tx: SignedTransaction, height: int) -> Receipt:
        """Apply one call atomically; a failure leaves the contracts untouched."""
        self.nonces[tx.sender] = tx.nonce
        try:
            if tx.contract == DEPLOY_ADDRESS:
                output = self._deploy(tx)
            else:
                current = self.contracts.get(tx.contract)
                if current is None:
                    raise MalformedCall("unknown contract")
                new_state, output = current.apply(tx.sender, tx.call, height)
                self.contracts[tx.contract] = new_state
        except ContractError as exc:
            return Receipt(False, exc.code, str(exc).encode("utf-8"))
        except DecodeError as exc:
            return Receipt(False, MalformedCall.code, str(exc).encode("utf-8"))
        return Receipt(True, "", output)

    def _deploy(self, tx: SignedTransaction) -> bytes:
        if not tx.call or tx.call[0] != OP_DEPLOY:
            raise MalformedCall("deploy address only accepts deploy calls")
        (name,) = codec.unpack(tx.call[1:], 1)
        cls = CONTRACT_TYPES.get(codec.as_str(name))
        if cls is None:
            raise MalformedCall(f"unknown contract type {name!r}")
        addr = contract_address(tx.sender, tx.nonce)
        self.contracts[addr] = cls.create(tx.sender)
        return bytes(addr)

    def check_and_apply(self, block: Block, prev: Block | None) -> None:
        h = block.height
        if h != len(self.history):
            raise ChainViolation(h, f"height {h} out of sequence (expected {len(self.history)})")
        if prev is None:
            if block.prev_hash != ZERO_HASH:
                raise ChainViolation(h, "genesis prev_hash must be zero")
            if block.transactions:
                raise ChainViolation(h, "genesis must be empty")
        else:
            if block.prev_hash != prev.block_hash:
                raise ChainViolation(h, "prev_hash mismatch")
            if block.timestamp < prev.timestamp:
                raise ChainViolation(h, "timestamp decreases")
        if block.computed_hash() != block.block_hash:
            raise ChainViolation(h, "block_hash mismatch")
        if len(block.receipts) != len(block.transactions):
            raise ChainViolation(h, "receipt count mismatch")
        for i, tx in enumerate(block.transactions):
            if not tx.signature_valid():
                raise ChainViolation(h, f"tx {i}: bad signature")
            if tx.nonce != self.nonces.get(tx.sender, 0) + 1:
                raise ChainViolation(h, f"tx {i}: bad nonce")
            if tx.contract != DEPLOY_ADDRESS and tx.contract not in self.contracts:
                raise ChainViolation(h, f"tx {i}: unknown contract")
            receipt = self.execute(tx, h)
            if receipt != block.receipts[i]:
                raise ChainViolation(h, f"tx {i}: receipt does not match replay")
            self.receipts[tx.txid] = (h, receipt)
        self.history.append(dict(self.contracts))

    def copy(self) -> "_State":
        return _State(dict(self.contracts), dict(self.nonces), list(self.history), dict(self.receipts))


def _replay(blocks: Sequence[Block]) -> _State:
    state = _State()
    prev = None
    for block in blocks:
        state.check_and_apply(block, prev)
        prev = block
    return state


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    height: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_chain(chain: "Chain | Sequence[Block]") -> ChainReport:
    """Check hash links, heights, signatures, nonces and receipts by full replay."""
    blocks = chain.blocks() if isinstance(chain, Chain) else list(chain)
    if not blocks:
        return ChainReport(False, 0, "empty chain")
    try:
        _replay(blocks)
    except ChainViolation as exc:
        return ChainReport(False, exc.height, exc.reason)
    return ChainReport(True)


# ---------------------------------------------------------------------------
# chain


class Chain:
    """One node's copy of the ledger plus its pending queue."""

    def __init__(self, block_interval: float = DEFAULT_BLOCK_INTERVAL, *,
                 genesis_timestamp: int = 0,
                 clock: Callable[[], int] = now_ms,
                 log_path: str | Path | None = None):
        if block_interval < 0:
            raise ValueError("block_interval must be >= 0")
        self.block_interval = block_interval
        self.clock = clock
        self._lock = threading.RLock()
        self._new_block = threading.Condition(self._lock)
        self._pending: deque[SignedTransaction] = deque()
        self._pending_nonces: dict[Address, int] = {}
        self._log: ChainLog | None = None
        self._arrivals: list[float] = []  # monotonic time each height became known locally

        blocks = [make_genesis(genesis_timestamp)]
        if log_path is not None:
            self._log = ChainLog(log_path)
            stored = self._log.read()
            if stored:
                blocks = stored
            else:
                self._log.append(blocks[0])
        self._blocks: list[Block] = []
        self._state = _State()
        self._extend(blocks)

    @classmethod
    def from_blocks(cls, blocks: Sequence[Block], block_interval: float = DEFAULT_BLOCK_INTERVAL,
                    **kwargs) -> "Chain":
        chain = cls(block_interval, genesis_timestamp=blocks[0].timestamp, **kwargs)
        if not chain.sync(blocks) and len(blocks) > 1:
            report = verify_chain(blocks)
            raise ValueError(f"invalid chain: {report.reason} at {report.height}")
        return chain

    def _extend(self, blocks: Iterable[Block]) -> None:
        for block in blocks:
            prev = self._blocks[-1] if self._blocks else None
            self._state.check_and_apply(block, prev)
            self._blocks.append(block)
            self._arrivals.append(time.monotonic())

    # -- reads ------------------------------------------------------------

    @property
    def height(self) -> int:
        with self._lock:
            return len(self._blocks) - 1

    def blocks(self) -> list[Block]:
        with self._lock:
            return list(self._blocks)

    def chain_head(self) -> Block:
        with self._lock:
            return self._blocks[-1]

    def get_block(self, height: int) -> Block:
        with self._lock:
            if not 0 <= height < len(self._blocks):
                raise HeightOutOfRange(height)
            return self._blocks[height]

    def arrival_time(self, height: int) -> float:
        """Monotonic clock reading when this node first held ``height``."""
        with self._lock:
            return self._arrivals[height]

    def get_contract_state(self, contract: Address, at_height: int | None = None):
        with self._lock:
            if at_height is None:
                states = self._state.history[-1]
            else:
                if not 0 <= at_height < len(self._state.history):
                    raise HeightOutOfRange(at_height)
                states = self._state.history[at_height]
        try:
            return states[Address(contract)]
        except KeyError:
            raise UnknownContract(str(Address(contract))) from None

    def contracts(self) -> list[Address]:
        with self._lock:
            return sorted(self._state.history[-1])

    def receipt(self, txid: bytes) -> tuple[int, Receipt] | None:
        with self._lock:
            return self._state.receipts.get(txid)

    def wait_for_receipt(self, txid: bytes, timeout: float | None = None) -> tuple[int, Receipt] | None:
        with self._new_block:
            self._new_block.wait_for(lambda: txid in self._state.receipts, timeout)
            return self._state.receipts.get(txid)

    def wait_for_height(self, height: int, timeout: float | None = None) -> bool:
        with self._new_block:
            return self._new_block.wait_for(lambda: len(self._blocks) - 1 >= height, timeout)

    def next_nonce(self, sender: Address) -> int:
        with self._lock:
            return max(self._state.nonces.get(sender, 0), self._pending_nonces.get(sender, 0)) + 1

    def pending(self) -> list[SignedTransaction]:
        with self._lock:
            return list(self._pending)

    # -- writes -----------------------------------------------------------

    def submit_transaction(self, tx: SignedTransaction) -> bytes:
        if not tx.signature_valid():
            raise BadSignature(f"tx from {tx.sender}")
        with self._lock:
            expected = self.next_nonce(tx.sender)
            if tx.nonce != expected:
                raise BadNonce(f"nonce {tx.nonce}, expected {expected}")
            if tx.contract != DEPLOY_ADDRESS and tx.contract not in self._state.contracts:
                raise UnknownContract(str(tx.contract))
            self._pending.append(tx)
            self._pending_nonces[tx.sender] = tx.nonce
        return tx.txid

    def seal_block(self, now: int | None = None, *, force: bool = False) -> Block:
        with self._lock:
            tip = self._blocks[-1]
            now = self.clock() if now is None else now
            due = tip.timestamp + int(self.block_interval * 1000)
            if not force and now < due:
                raise SealTooEarly(f"next block due at {due}, now {now}")
            txs = list(self._pending)
            self._pending.clear()
            self._pending_nonces.clear()
            height = tip.height + 1
            receipts = []
            for tx in txs:
                r = self._state.execute(tx, height)
                self._state.receipts[tx.txid] = (height, r)
                receipts.append(r)
            self._state.history.append(dict(self._state.contracts))
            block = make_block(height, tip.block_hash, max(now, tip.timestamp), txs, receipts)
            self._blocks.append(block)
            self._arrivals.append(time.monotonic())
            if self._log is not None:
                self._log.append(block)
            self._new_block.notify_all()
        logger.debug("sealed block %d with %d txs", height, len(txs))
        return block

    def sync(self, peer: "Chain | Sequence[Block]") -> bool:
        """Adopt the peer's chain iff it verifies and is strictly longer."""
        blocks = peer.blocks() if isinstance(peer, Chain) else list(peer)
        with self._lock:
            local_len = len(self._blocks)
            if len(blocks) <= local_len:
                return False
            tip = self._blocks[-1]
            if blocks[tip.height].block_hash == tip.block_hash:
                # peer extends our verified chain; check only the new blocks
                trial = self._state.copy()
                prev = tip
                try:
                    for b in blocks[local_len:]:
                        trial.check_and_apply(b, prev)
                        prev = b
                except ChainViolation as exc:
                    logger.info("rejected peer extension: %s", exc)
                    return False
                new_blocks = self._blocks + list(blocks[local_len:])
            else:
                try:
                    trial = _replay(blocks)
                except ChainViolation as exc:
                    logger.info("rejected peer chain: %s", exc)
                    return False
                new_blocks = list(blocks)
            fork = self._common_prefix(new_blocks)
            t = time.monotonic()
            arrivals = self._arrivals[:fork] + [t] * (len(new_blocks) - fork)
            self._blocks, self._state, self._arrivals = new_blocks, trial, arrivals
            self._revalidate_pending()
            if self._log is not None:
                if fork < local_len:
                    self._log.rewrite(new_blocks)
                else:
                    self._log.extend(new_blocks[local_len:])
            self._new_block.notify_all()
        return True

    def _common_prefix(self, other: Sequence[Block]) -> int:
        n = 0
        for a, b in zip(self._blocks, other):
            if a.block_hash != b.block_hash:
                break
            n += 1
        return n

    def _revalidate_pending(self) -> None:
        old = list(self._pending)
        self._pending.clear()
        self._pending_nonces.clear()
        for tx in old:
            expected = self.next_nonce(tx.sender)
            if tx.nonce == expected and (tx.contract == DEPLOY_ADDRESS or tx.contract in self._state.contracts):
                self._pending.append(tx)
                self._pending_nonces[tx.sender] = tx.nonce


class Sealer:
    """Background task sealing one block per interval."""

    def __init__(self, chain: Chain, interval: float | None = None):
        self.chain = chain
        self.interval = chain.block_interval if interval is None else interval
        if self.interval <= 0:
            raise ValueError("sealer interval must be > 0; seal manually for interval 0")
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "Sealer":
        self._thread = threading.Thread(target=self._run, name="sealer", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "Sealer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _run(self) -> None:
        deadline = time.monotonic() + self.interval
        while not self._stop.wait(max(0.0, deadline - time.monotonic())):
            self.chain.seal_block(force=True)
            deadline += self.interval


# ---------------------------------------------------------------------------
# persistence

_REC = struct.Struct(">I")


class ChainLog:
    """Append-only file of length-prefixed canonical blocks."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def read(self) -> list[Block]:
        if not self.path.exists():
            return []
        data = self.path.read_bytes()
        blocks, pos = [], 0
        while pos < len(data):
            if len(data) - pos < 4:
                raise DecodeError("truncated record header")
            (n,) = _REC.unpack_from(data, pos)
            pos += 4
            if n > len(data) - pos:
                raise DecodeError("truncated block record")
            blocks.append(Block.decode(data[pos:pos + n]))
            pos += n
        return blocks

    def append(self, block: Block) -> None:
        self.extend([block])

    def extend(self, blocks: Iterable[Block]) -> None:
        with self.path.open("ab") as fh:
            for b in blocks:
                raw = b.encode()
                fh.write(_REC.pack(len(raw)) + raw)

    def rewrite(self, blocks: Iterable[Block]) -> None:
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_bytes(b"".join(_REC.pack(len(r)) + r for r in (b.encode() for b in blocks)))
        tmp.replace(self.path)


# ---------------------------------------------------------------------------
# convenience for callers that hold a key


class Account:
    """Key holder that signs and submits calls with the right nonce."""

    def __init__(self, keys: KeyPair, chain: Chain):
        self.keys = keys
        self.chain = chain

    @property
    def address(self) -> Address:
        return self.keys.address

    def send(self, contract: Address, call: bytes) -> bytes:
        with self.chain._lock:
            tx = sign_transaction(self.keys, self.chain.next_nonce(self.address), contract, call)
            return self.chain.submit_transaction(tx)

    def transact(self, contract: Address, call: bytes, *, seal: bool = False,
                 timeout: float | None = None) -> Receipt:
        """Send and wait for inclusion; with ``seal`` the block is sealed right away."""
        txid = self.send(contract, call)
        if seal:
            self.chain.seal_block(force=True)
        found = self.chain.wait_for_receipt(txid, timeout)
        if found is None:
            raise TimeoutError("transaction not sealed in time")
        return found[1]

    def deploy(self, type_name: str, *, seal: bool = False, timeout: float | None = None) -> Address:
        receipt = self.transact(DEPLOY_ADDRESS, encode_deploy(type_name), seal=seal, timeout=timeout)
        if not receipt.ok:
            raise MalformedCall(receipt.output.decode("utf-8", "replace"))
        return Address(receipt.output)
