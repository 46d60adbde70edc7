"""Administrator command line tool.

State lives in a home directory (``--home``, default ``./.blendcac``). The
local ledger is a block log there; each command that writes seals its own
block immediately, so no background sealer is needed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import baselines, capcontract  # noqa: F401  registers contract types
from ..authz import DomainOwner, TokenSpec, delegate
from ..capcontract import (
    CapabilityContract,
    RevocationMode,
    parse_context_arg,
    parse_rights,
    query_token,
)
from ..errors import BlendCACError
from ..identity import Address, EntityKind, keygen, new_profile, sign_registration
from ..ledger import verify_chain
from .bench import MODELS, ExperimentConfig, plot_csv, run_benchmark
from .node import Home, ServeConfig, read_config, serve

_BOOL_TRUE = {"1", "true", "yes", "on"}


class _Output:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, data: dict, text: str) -> None:
        print(json.dumps(data, indent=2, sort_keys=True) if self.as_json else text)


def _owner(home: Home, args) -> DomainOwner:
    keys = home.load_key(args.owner_key)
    chain = home.chain()
    return DomainOwner(keys, chain, home.profiles(keys), contract=home.contract())


def _require_contract(owner: DomainOwner) -> None:
    if owner.contract is None:
        raise SystemExit("no capability contract deployed; run `deploy` first")


# -- subcommands -------------------------------------------------------------


def cmd_keygen(home: Home, args, out: _Output) -> int:
    name = "owner" if args.owner else args.name
    path = home.key_path(name)
    if path.exists() and not args.force:
        print(f"refusing to overwrite {path} (use --force)", file=sys.stderr)
        return 2
    keys = keygen()
    home.save_key(name, keys)
    out.emit({"name": name, "address": str(keys.address), "path": str(path)},
             f"{name} {keys.address}")
    return 0


def cmd_register(home: Home, args, out: _Output) -> int:
    owner_keys = home.load_key(args.owner_key)
    db = home.profiles(owner_keys)
    vid = Address(args.vid) if args.vid else home.load_key(args.key).address
    profile = new_profile(vid, EntityKind(args.kind), args.name or str(vid))
    db.register_entity(sign_registration(owner_keys, profile), profile)
    out.emit(profile.to_json(), f"registered {vid} ({profile.kind.value})")
    return 0


def cmd_deploy(home: Home, args, out: _Output) -> int:
    owner = _owner(home, args)
    address = owner.account.deploy(args.type, seal=True)
    home.set_contract(args.type, address)
    out.emit({"type": args.type, "contract": str(address), "height": owner.chain.height},
             str(address))
    return 0


def cmd_issue(home: Home, args, out: _Output) -> int:
    owner = _owner(home, args)
    _require_contract(owner)
    context = frozenset(parse_context_arg(c) for c in args.context)
    spec = TokenSpec(Address(args.subject), Address(args.object), parse_rights(args.rights),
                     context, args.depth, 0)
    result = owner.issue(spec, seal=True)
    out.emit({"contract": str(result.contract), "token_id": "0x" + result.token_id.hex(),
              "tx_id": "0x" + result.txid.hex(), "height": result.height},
             "0x" + result.token_id.hex())
    return 0


def cmd_delegate(home: Home, args, out: _Output) -> int:
    contract = home.contract()
    if contract is None:
        raise SystemExit("no capability contract deployed; run `deploy` first")
    keys = home.load_key(args.key)
    chain = home.chain()
    height = delegate(keys, chain, contract, Address(args.target), seal=True)
    found = query_token(chain, contract, keys.address)
    d = found.token.delegation
    remaining = d.depth - len(d.delegatee)
    out.emit({"height": height, "depth": d.depth, "remaining": remaining,
              "delegatee": [str(a) for a in d.delegatee]},
             f"delegated to {args.target}; remaining depth {remaining}")
    return 0


def cmd_revoke_delegation(home: Home, args, out: _Output) -> int:
    owner = _owner(home, args)
    _require_contract(owner)
    height = owner.revoke_delegation(Address(args.subject), Address(args.target), seal=True)
    out.emit({"height": height}, f"revoked delegation at height {height}")
    return 0


def cmd_revoke_token(home: Home, args, out: _Output) -> int:
    owner = _owner(home, args)
    _require_contract(owner)
    height = owner.revoke_token(Address(args.subject), RevocationMode(args.mode), seal=True)
    out.emit({"height": height, "mode": args.mode}, f"revoked ({args.mode}) at height {height}")
    return 0


def cmd_query_token(home: Home, args, out: _Output) -> int:
    contract = home.contract()
    if contract is None:
        raise SystemExit("no capability contract deployed; run `deploy` first")
    chain = home.chain()
    obj = Address(args.object) if args.object else None
    found = query_token(chain, contract, Address(args.requester), obj, args.at_height)
    if found is None:
        out.emit({"token": None}, "no token")
        return 3
    data = {"token": found.token.to_json(),
            "delegated_via": str(found.delegated_via) if found.delegated_via else None}
    out.emit(data, json.dumps(data["token"], indent=2, sort_keys=True))
    return 0


def cmd_serve(home: Home, args, out: _Output) -> int:
    cfg = ServeConfig.from_sources(args.file_config, {
        "home": str(home.path),
        "host": args.host,
        "port": args.port,
        "block_interval": args.block_interval,
        "owner_key": args.owner_key,
        "provider_key": args.provider_key,
        "policy": args.policy,
        "resources": args.resources,
        "location": args.location,
    })
    serve(cfg)
    return 0


def cmd_bench(home: Home, args, out: _Output) -> int:
    if args.bench_cmd == "plot":
        path = plot_csv(args.csv, args.out)
        out.emit({"plot": str(path)}, str(path))
        return 0
    fc = args.file_config

    def pick(flag, key, conv, default):
        if flag is not None:
            return flag
        return conv(fc[key]) if key in fc else default

    no_cache = args.no_cache or fc.get("no_cache", "").lower() in _BOOL_TRUE
    config = ExperimentConfig(
        runs=pick(args.runs, "runs", int, 50),
        model=pick(args.model, "model", str, "blendcac"),
        simulated_chain_query_latency=pick(args.latency_ms, "latency_ms", float, 0.0) / 1000.0,
        simulated_rtt=pick(args.rtt_ms, "rtt_ms", float, 0.0) / 1000.0,
        block_interval=pick(args.block_interval, "block_interval", float, 15.0),
        store_size=pick(args.store_size, "store_size", int, 1),
        output_path=pick(args.out, "out", str, None),
        use_cache=not no_cache,
        seed=pick(args.seed, "seed", int, 0),
        deny_ratio=pick(args.deny_ratio, "deny_ratio", float, 0.0),
    )
    report = run_benchmark(config)
    summary = report.summary()
    if out.as_json:
        out.emit(summary, "")
        return 0
    agg = summary["aggregate_us"]
    lines = [f"model={report.model} runs={len(report.rows)} cold={summary['cold_runs']}",
             f"{'stage':<28}{'mean_us':>14}{'median_us':>14}{'p95_us':>14}"]
    for stage, vals in agg.items():
        lines.append(f"{stage:<28}{vals['mean']:>14.3f}{vals['median']:>14.3f}{vals['p95']:>14.3f}")
    if config.output_path:
        lines.append(f"wrote {config.output_path}")
    print("\n".join(lines))
    return 0


def cmd_chain(home: Home, args, out: _Output) -> int:
    log = home.path / "chain.log"
    if not log.exists():
        out.emit({"ok": True, "height": 0, "reason": None}, "empty chain")
        return 0
    from ..ledger import ChainLog

    blocks = ChainLog(log).read()
    report = verify_chain(blocks)
    height = len(blocks) - 1 if report.ok else report.height
    out.emit({"ok": report.ok, "height": height, "reason": report.reason or None},
             f"ok (height {height})" if report.ok
             else f"INVALID at height {report.height}: {report.reason}")
    return 0 if report.ok else 20


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blendcac", description=__doc__.splitlines()[0])
    p.add_argument("--home", default=".blendcac", help="node state directory")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--config", help="key=value file; flags override its values")
    p.add_argument("--owner-key", default="owner", help="owner key name or path")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("keygen", help="create a key pair")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--name")
    g.add_argument("--owner", action="store_true", help="create the domain owner key")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("register", help="register an entity profile (owner-signed)")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--key", help="key name of the entity")
    g.add_argument("--vid", help="entity address")
    s.add_argument("--kind", default="device", choices=[k.value for k in EntityKind])
    s.add_argument("--name", help="display name")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("deploy", help="deploy a contract from the owner account")
    s.add_argument("--type", default=CapabilityContract.type_name,
                   choices=["capability", "rbac", "abac"])
    s.set_defaults(func=cmd_deploy)

    s = sub.add_parser("issue", help="issue a capability token")
    s.add_argument("--subject", required=True)
    s.add_argument("--object", required=True)
    s.add_argument("--rights", required=True, help='e.g. "RW", "READ,WRITE" or "NULL"')
    s.add_argument("--depth", type=int, default=0)
    s.add_argument("--context", action="append", default=[],
                   help="time=HH:MM-HH:MM, location=TAG or predicate=NAME (repeatable)")
    s.set_defaults(func=cmd_issue)

    s = sub.add_parser("delegate", help="delegate the caller's token")
    s.add_argument("--key", required=True, help="subject key name")
    s.add_argument("--target", required=True)
    s.set_defaults(func=cmd_delegate)

    s = sub.add_parser("revoke-delegation", help="remove one delegatee")
    s.add_argument("--subject", required=True)
    s.add_argument("--target", required=True)
    s.set_defaults(func=cmd_revoke_delegation)

    s = sub.add_parser("revoke-token", help="revoke a subject's token")
    s.add_argument("--subject", required=True)
    s.add_argument("--mode", required=True, choices=[m.value for m in RevocationMode])
    s.set_defaults(func=cmd_revoke_token)

    s = sub.add_parser("query-token", help="show the token a requester would present")
    s.add_argument("--requester", required=True)
    s.add_argument("--object")
    s.add_argument("--at-height", type=int)
    s.set_defaults(func=cmd_query_token)

    s = sub.add_parser("serve", help="run the HTTP gateway")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--block-interval", type=float)
    s.add_argument("--provider-key")
    s.add_argument("--policy", help="JSON list of policy rules")
    s.add_argument("--resources", help="directory of resource files")
    s.add_argument("--location")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("bench", help="run the latency benchmark (or `bench plot`)")
    s.add_argument("--model", choices=MODELS)
    s.add_argument("--runs", type=int)
    s.add_argument("--out", help="CSV output path")
    s.add_argument("--latency-ms", type=float, help="simulated chain query latency")
    s.add_argument("--rtt-ms", type=float, help="simulated round trip")
    s.add_argument("--block-interval", type=float)
    s.add_argument("--store-size", type=int)
    s.add_argument("--no-cache", action="store_true", help="query the chain on every request")
    s.add_argument("--seed", type=int)
    s.add_argument("--deny-ratio", type=float)
    s.set_defaults(func=cmd_bench, bench_cmd=None)
    bsub = s.add_subparsers(dest="bench_cmd", metavar="{plot}")
    ps = bsub.add_parser("plot", help="plot one or more benchmark CSVs")
    ps.add_argument("csv", nargs="+")
    ps.add_argument("--out", default="bench.png")

    s = sub.add_parser("chain", help="ledger maintenance")
    csub = s.add_subparsers(dest="chain_cmd", required=True, metavar="{verify}")
    csub.add_parser("verify", help="replay and check the local block log")
    s.set_defaults(func=cmd_chain)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.file_config = read_config(args.config) if args.config else {}
    except (OSError, ValueError) as exc:
        parser.error(f"--config: {exc}")
    home_dir = args.file_config.get("home") if args.home == ".blendcac" else None
    home = Home(Path(home_dir or args.home))
    out = _Output(args.json)
    try:
        return args.func(home, args, out)
    except BlendCACError as exc:
        if args.json:
            print(json.dumps({"error": exc.code, "message": str(exc)}))
        print(f"error ({exc.code}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
