"""HTTP endpoints for the owner's token service and the provider's resources.

Every request names its sender in ``X-Address`` and proves it with an
Ed25519 signature (``X-Signature``, hex) over the canonical record
``("blendcac/request", method, path, nonce)``. ``X-Public-Key`` carries the
key, which must hash to the address. Nonces must strictly increase per
address.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .. import codec
from ..authz import DomainOwner, ServiceProvider, ServiceRequest
from ..capcontract import AccessRight, RevocationMode, decode_delegation, delegate_call
from ..errors import BlendCACError, ContractError, InvalidKey, LedgerError, UnregisteredRequester
from ..identity import Address, KeyPair, derive_address, verify_signature
from ..ledger import Chain, SignedTransaction


def request_message(method: str, path: str, nonce: int) -> bytes:
    return codec.pack("blendcac/request", method.upper(), path, nonce)


def sign_request(keys: KeyPair, method: str, path: str, nonce: int) -> dict[str, str]:
    """Headers a client attaches to authenticate one request."""
    return {
        "X-Address": str(keys.address),
        "X-Public-Key": keys.public_key.hex(),
        "X-Signature": keys.sign(request_message(method, path, nonce)).hex(),
        "X-Nonce": str(nonce),
    }


class TokenRequestBody(BaseModel):
    object: str
    action: str | None = None


class DelegateBody(BaseModel):
    target: str
    nonce: int
    signature: str  # hex signature of the delegate transaction


class RevokeBody(BaseModel):
    subject: str
    mode: str | None = None
    target: str | None = None


@dataclass
class Gateway:
    """Wires the HTTP surface to whichever roles this process plays."""

    chain: Chain
    owner: DomainOwner | None = None
    provider: ServiceProvider | None = None
    auto_seal: bool = False  # seal right after each submit (no background sealer)
    seal_timeout: float = 60.0
    _nonces: dict[Address, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def authenticate(self, method: str, path: str, address: str | None, public_key: str | None,
                     signature: str | None, nonce: str | None) -> Address:
        if not (address and public_key and signature and nonce):
            raise HTTPException(401, detail={"reason": "missing authentication headers"})
        try:
            addr = Address(address)
            pk = bytes.fromhex(public_key)
            sig = bytes.fromhex(signature)
            n = int(nonce)
            if derive_address(pk) != addr:
                raise HTTPException(401, detail={"reason": "public key does not match address"})
        except (ValueError, InvalidKey):
            raise HTTPException(401, detail={"reason": "malformed authentication headers"}) from None
        if n < 0 or not verify_signature(pk, sig, request_message(method, path, n)):
            raise HTTPException(401, detail={"reason": "bad request signature"})
        with self._lock:
            if n <= self._nonces.get(addr, -1):
                raise HTTPException(401, detail={"reason": "replayed nonce"})
            self._nonces[addr] = n
        return addr


def _auth_headers(request: Request) -> tuple:
    h = request.headers
    return (h.get("x-address"), h.get("x-public-key"), h.get("x-signature"), h.get("x-nonce"))


def create_app(gw: Gateway) -> FastAPI:
    app = FastAPI(title="blendcac gateway")

    def require_owner() -> DomainOwner:
        if gw.owner is None or gw.owner.contract is None:
            raise HTTPException(404, detail={"reason": "this node is not a domain owner"})
        return gw.owner

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "height": gw.chain.height,
            "owner": gw.owner is not None,
            "provider": gw.provider is not None,
        }

    @app.get("/resource/{resource_id}")
    def get_resource(resource_id: str, request: Request, action: str = "READ"):
        if gw.provider is None:
            raise HTTPException(404, detail={"reason": "this node serves no resources"})
        requester = gw.authenticate("GET", request.url.path, *_auth_headers(request))
        try:
            act = AccessRight.parse(action)
        except ValueError:
            raise HTTPException(400, detail={"reason": f"unknown action {action}"}) from None
        resp = gw.provider.handle_service_request(ServiceRequest(requester, resource_id, act))
        d = resp.decision
        timing = f"total_us={d.timings.total / 1000:.3f}"
        if not d.granted:
            return JSONResponse({"outcome": d.outcome.value, "reason": d.reason.value},
                                status_code=403, headers={"X-Timings": timing})
        if resp.payload is None:
            return JSONResponse({"reason": "unknown resource"}, status_code=404)
        return Response(resp.payload, media_type="application/octet-stream",
                        headers={"X-Timings": timing})

    @app.post("/token/request", status_code=202)
    def token_request(body: TokenRequestBody, request: Request):
        owner = require_owner()
        requester = gw.authenticate("POST", request.url.path, *_auth_headers(request))
        try:
            obj = Address(body.object)
            action = AccessRight.parse(body.action) if body.action else None
        except (InvalidKey, ValueError) as exc:
            raise HTTPException(400, detail={"reason": str(exc)}) from None
        try:
            result = owner.request_capability(requester, obj, action,
                                              seal=gw.auto_seal, timeout=gw.seal_timeout)
        except UnregisteredRequester:
            return JSONResponse({"reason": "unregistered_requester"}, status_code=403)
        except ContractError as exc:
            return JSONResponse({"reason": exc.code, "detail": str(exc)}, status_code=409)
        if result is None:
            return JSONResponse({"reason": "policy_denied"}, status_code=403)
        return {
            "contract": str(result.contract),
            "token_id": "0x" + result.token_id.hex(),
            "tx_id": "0x" + result.txid.hex(),
            "height": result.height,
        }

    @app.post("/token/delegate")
    def token_delegate(body: DelegateBody, request: Request):
        owner = require_owner()
        subject = gw.authenticate("POST", request.url.path, *_auth_headers(request))
        try:
            tx = SignedTransaction(
                sender=subject,
                public_key=bytes.fromhex(request.headers["x-public-key"]),
                nonce=body.nonce,
                contract=owner.contract,
                call=delegate_call(Address(body.target)),
                signature=bytes.fromhex(body.signature),
            )
            txid = gw.chain.submit_transaction(tx)
        except (InvalidKey, ValueError) as exc:
            raise HTTPException(400, detail={"reason": str(exc)}) from None
        except LedgerError as exc:
            return JSONResponse({"reason": exc.code, "detail": str(exc)},
                                status_code=401 if exc.code == "bad_signature" else 409)
        if gw.auto_seal:
            gw.chain.seal_block(force=True)
        found = gw.chain.wait_for_receipt(txid, gw.seal_timeout)
        if found is None:
            return JSONResponse({"reason": "not sealed in time", "tx_id": "0x" + txid.hex()},
                                status_code=202)
        height, receipt = found
        if not receipt.ok:
            return JSONResponse({"reason": receipt.error,
                                 "detail": receipt.output.decode("utf-8", "replace")},
                                status_code=409)
        d = decode_delegation(receipt.output)
        return {"height": height, "delegation": {
            "depth": d.depth, "delegatee": [str(a) for a in d.delegatee]}}

    @app.post("/admin/revoke")
    def admin_revoke(body: RevokeBody, request: Request):
        owner = require_owner()
        caller = gw.authenticate("POST", request.url.path, *_auth_headers(request))
        if caller != owner.address:
            return JSONResponse({"reason": "only the domain owner may revoke"}, status_code=403)
        try:
            subject = Address(body.subject)
            if body.target is not None:
                height = owner.revoke_delegation(subject, Address(body.target),
                                                 seal=gw.auto_seal, timeout=gw.seal_timeout)
            else:
                mode = RevocationMode(body.mode)
                height = owner.revoke_token(subject, mode, seal=gw.auto_seal, timeout=gw.seal_timeout)
        except (InvalidKey, ValueError) as exc:
            raise HTTPException(400, detail={"reason": str(exc)}) from None
        except BlendCACError as exc:
            return JSONResponse({"reason": exc.code, "detail": str(exc)}, status_code=409)
        return {"height": height}

    return app
