import csv
import json

import pytest

from blendcac.gateway.cli import main
from blendcac.identity import load_key


@pytest.fixture
def home(tmp_path):
    return tmp_path / "home"


def run(home, *args, capsys=None):
    code = main(["--home", str(home), *args])
    out = capsys.readouterr() if capsys else None
    return code, out


def addr(home, name):
    return str(load_key(home / "keys" / f"{name}.key").address)


@pytest.fixture
def ready(home, capsys):
    for a in (["keygen", "--owner"], ["keygen", "--name", "alice"], ["keygen", "--name", "bob"],
              ["keygen", "--name", "carol"], ["keygen", "--name", "cam"]):
        assert run(home, *a)[0] == 0
    assert run(home, "register", "--key", "alice")[0] == 0
    assert run(home, "deploy")[0] == 0
    capsys.readouterr()
    return home


def test_issue_prints_token_id(ready, capsys):
    code, out = run(ready, "issue", "--subject", addr(ready, "alice"), "--object", addr(ready, "cam"),
                    "--rights", "R", "--depth", "1", capsys=capsys)
    assert code == 0
    tid = out.out.strip()
    assert tid.startswith("0x") and len(tid) == 66


def test_delegate_beyond_depth(ready, capsys):
    run(ready, "issue", "--subject", addr(ready, "alice"), "--object", addr(ready, "cam"),
        "--rights", "R", "--depth", "1")
    assert run(ready, "delegate", "--key", "alice", "--target", addr(ready, "bob"))[0] == 0
    capsys.readouterr()
    code, out = run(ready, "delegate", "--key", "alice", "--target", addr(ready, "carol"), capsys=capsys)
    assert code == 35
    assert "remaining depth 0" in out.err


def test_json_query_and_revoke(ready, capsys):
    run(ready, "issue", "--subject", addr(ready, "alice"), "--object", addr(ready, "cam"),
        "--rights", "RW", "--depth", "2", "--context", "time=08:00-18:00")
    run(ready, "delegate", "--key", "alice", "--target", addr(ready, "bob"))
    capsys.readouterr()
    code, out = run(ready, "--json", "query-token", "--requester", addr(ready, "bob"), capsys=capsys)
    data = json.loads(out.out)
    assert code == 0 and data["delegated_via"] == addr(ready, "alice")
    assert data["token"]["rights"] == ["READ", "WRITE"]
    assert run(ready, "revoke-delegation", "--subject", addr(ready, "alice"), "--target", addr(ready, "bob"))[0] == 0
    assert run(ready, "query-token", "--requester", addr(ready, "bob"))[0] == 3
    assert run(ready, "revoke-token", "--subject", addr(ready, "alice"), "--mode", "clear_rights")[0] == 0
    capsys.readouterr()
    code, out = run(ready, "--json", "query-token", "--requester", addr(ready, "alice"), capsys=capsys)
    assert json.loads(out.out)["token"]["rights"] == []


def test_operation_errors_map_to_exit_codes(ready, capsys):
    run(ready, "issue", "--subject", addr(ready, "alice"), "--object", addr(ready, "cam"), "--rights", "R")
    code, _ = run(ready, "issue", "--subject", addr(ready, "alice"), "--object", addr(ready, "cam"),
                  "--rights", "R", capsys=capsys)
    assert code == 32
    code, _ = run(ready, "register", "--key", "alice", capsys=capsys)
    assert code == 11


def test_usage_errors(home, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--home", str(home), "frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["--home", str(home), "issue", "--subject", "0x00"])
    assert exc.value.code == 2


def test_chain_verify_detects_tampering(ready, capsys):
    run(ready, "issue", "--subject", addr(ready, "alice"), "--object", addr(ready, "cam"), "--rights", "R")
    capsys.readouterr()
    code, out = run(ready, "--json", "chain", "verify", capsys=capsys)
    assert code == 0 and json.loads(out.out)["ok"]
    log = ready / "chain.log"
    raw = bytearray(log.read_bytes())
    raw[-40] ^= 0x01  # inside the last block hash
    log.write_bytes(bytes(raw))
    code, out = run(ready, "--json", "chain", "verify", capsys=capsys)
    assert code == 20 and not json.loads(out.out)["ok"]


def test_bench_csv_and_summary(home, tmp_path, capsys):
    out_csv = tmp_path / "runs.csv"
    code, out = run(home, "bench", "--model", "blendcac", "--runs", "50", "--out", str(out_csv),
                    "--block-interval", "1", capsys=capsys)
    assert code == 0
    assert "authorization_verification" in out.out and "total" in out.out
    with out_csv.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50
    assert list(rows[0]) == ["seq", "rtt_us", "token_query_us", "parse_us", "validation_us",
                             "verification_us", "total_us", "outcome", "reason"]
    plot = tmp_path / "p.png"
    assert run(home, "bench", "plot", str(out_csv), "--out", str(plot))[0] == 0
    assert plot.stat().st_size > 0


def test_config_file_with_flag_override(home, tmp_path, capsys):
    cfg = tmp_path / "bench.conf"
    cfg.write_text("# bench defaults\nmodel = rbac\nruns = 7\nblock_interval = 1\nstore_size = 5\n")
    code, out = run(home, "--config", str(cfg), "--json", "bench", "--runs", "3", capsys=capsys)
    data = json.loads(out.out)
    assert code == 0 and data["model"] == "rbac" and data["runs"] == 3
