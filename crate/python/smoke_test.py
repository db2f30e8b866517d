#!/usr/bin/env python3
"""Smoke test for the iotscope_py extension module.

Run `cargo build -p iotscope-python` first; this script copies the built
shared library into a temp directory under its importable name, loads it,
and exercises the bindings end to end against the repository fixtures.

Usage: python3 python/smoke_test.py
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
FIXTURES = REPO / "crates" / "core" / "tests" / "fixtures"

checks = 0


def ok(label, cond):
    global checks
    if not cond:
        print(f"FAIL: {label}")
        sys.exit(1)
    checks += 1
    print(f"  ok: {label}")


def import_module(tmp):
    candidates = [
        REPO / "target" / "debug" / "libiotscope_py.so",
        REPO / "target" / "release" / "libiotscope_py.so",
        REPO / "target" / "debug" / "libiotscope_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        print("missing shared library; run `cargo build -p iotscope-python` first")
        sys.exit(1)
    shutil.copy(built, Path(tmp) / "iotscope_py.so")
    sys.path.insert(0, tmp)
    import iotscope_py

    return iotscope_py


def check_scalars(m):
    print("scalar functions")
    ok("required_domain_count(67, 0.4) == 26", m.required_domain_count(67, 0.4) == 26)
    ok("required_domain_count(1, 0.4) == 1", m.required_domain_count(1, 0.4) == 1)
    ok("required_domain_count(10, 1.0) == 10", m.required_domain_count(10, 1.0) == 10)
    ok("required_domain_count(5, 0.0) == 1", m.required_domain_count(5, 0.0) == 1)
    try:
        m.required_domain_count(5, 1.5)
        ok("threshold above 1 rejected", False)
    except ValueError:
        ok("threshold above 1 rejected", True)

    expect = 1.0 - (1.0 - 0.01) ** 100
    ok(
        "visibility_probability(100, 0.01)",
        math.isclose(m.visibility_probability(100, 0.01), expect, rel_tol=1e-12),
    )
    ok("visibility_probability(1, 1.0) == 1.0", m.visibility_probability(1, 1.0) == 1.0)

    a = m.anonymize_subscriber("100.64.10.5", "fixture-salt")
    b = m.anonymize_subscriber("100.64.10.5", "fixture-salt")
    c = m.anonymize_subscriber("100.64.10.5", "other-salt")
    ok("anonymize_subscriber deterministic", a == b)
    ok("anonymize_subscriber salt-sensitive", a != c)
    ok("anonymize_subscriber is 128-bit hex", len(a) == 32 and int(a, 16) >= 0)


def check_infra(m):
    print("infrastructure classification")
    classes = m.classify_infra(
        str(FIXTURES / "pdns.jsonl"),
        str(FIXTURES / "psl.dat"),
        ["api.aurevo.com", "api.lefcam.net", "p0.aurevo.com"],
        "2019-11-15",
        "2019-11-28",
    )
    ok("api.aurevo.com dedicated", classes["api.aurevo.com"] == "dedicated")
    ok("api.lefcam.net shared", classes["api.lefcam.net"] == "shared")
    ok("p0.aurevo.com insufficient", classes["p0.aurevo.com"] == "insufficient")


def check_sampling(m, tmp):
    print("flow sampling")
    src = Path(tmp) / "flows_in.csv"
    header = (
        "timestamp,src_addr,dst_addr,src_port,dst_port,"
        "protocol,packets,bytes,tcp_flags,sampling_denominator"
    )
    rows = [header]
    for i in range(200):
        rows.append(
            f"{1573862400 + i},100.64.10.5,198.18.1.1,{40000 + i},443,TCP,20,2000,0x18,1"
        )
    src.write_text("\n".join(rows) + "\n")

    all_out = Path(tmp) / "flows_all.csv"
    kept_all = m.sample_flows(str(src), str(all_out), 1.0, 7)
    ok("q=1.0 keeps every flow", kept_all == 200)

    out_a = Path(tmp) / "flows_a.csv"
    out_b = Path(tmp) / "flows_b.csv"
    kept_a = m.sample_flows(str(src), str(out_a), 0.02, 7)
    kept_b = m.sample_flows(str(src), str(out_b), 0.02, 7)
    ok("sampling is seed-deterministic", kept_a == kept_b)
    ok(
        "sampled output matches byte for byte",
        out_a.read_bytes() == out_b.read_bytes(),
    )
    ok("thinning drops some flows", 0 < kept_a < 200)


def check_dictionary(m, tmp):
    print("dictionary and detection")
    day_endpoints = {}
    day = "2019-11-16"
    domains = [f"d{i}.smokecam.example" for i in range(5)]
    day_endpoints[day] = {
        dom: [{"ip": f"198.18.200.{i + 1}", "port": 443, "protocol": "TCP"}]
        for i, dom in enumerate(domains)
    }
    dictionary = {
        "window": {"start": "2019-11-15", "end": "2019-11-28"},
        "default_threshold": 0.4,
        "rules": {
            "smokecam": {
                "label": "smokecam",
                "level": "manufacturer",
                "parent": None,
                "primary_domains": domains,
                "support_domains": [],
                "default_threshold": 0.4,
                "daily_endpoints": day_endpoints,
            }
        },
    }
    dict_path = Path(tmp) / "dictionary.json"
    dict_path.write_text(json.dumps(dictionary))

    d = m.Dictionary.load(str(dict_path))
    ok("one rule loaded", len(d) == 1 and d.labels() == ["smokecam"])
    ok("window round-trips", d.window() == ("2019-11-15", "2019-11-28"))
    rule = d.rule("smokecam")
    ok("rule reports level", rule["level"] == "manufacturer")
    ok("rule counts monitored domains", rule["monitored_count"] == 5)
    ok("required_count uses rule default", d.required_count("smokecam") == 2)
    ok("required_count takes explicit d", d.required_count("smokecam", 1.0) == 5)
    ok("to_json parses back", json.loads(d.to_json())["default_threshold"] == 0.4)

    # One subscriber touches three of the five endpoints inside an hour
    # (enough at d=0.4); a second touches only one (not enough).
    base = 1573898400  # 2019-11-16 10:00:00 UTC
    flows_path = Path(tmp) / "detect_flows.csv"
    lines = [
        "timestamp,src_addr,dst_addr,src_port,dst_port,"
        "protocol,packets,bytes,tcp_flags,sampling_denominator"
    ]
    for i in range(3):
        lines.append(
            f"{base + 60 * i},100.64.33.7,198.18.200.{i + 1},5000{i},443,TCP,12,1800,0x18,1"
        )
    lines.append(f"{base + 300},100.64.44.8,198.18.200.1,51000,443,TCP,12,1800,0x18,1")
    flows_path.write_text("\n".join(lines) + "\n")

    events = d.detect(
        [str(flows_path)],
        "smoke-salt",
        ["100.64.0.0/10"],
        threshold=None,
        bin="hour",
    )
    ok("exactly one detection event", len(events) == 1)
    ev = events[0]
    ok("event names the rule", ev["rule"] == "smokecam")
    ok("event evidence 3 of 2 required", ev["matched_count"] == 3 and ev["required_count"] == 2)
    ok("event is terminal", ev["terminal"] is True)
    hit = m.anonymize_subscriber("100.64.33.7", "smoke-salt")
    ok("event subscriber is the anonymized line", ev["subscriber"] == hit)

    quiet = d.detect([str(flows_path)], "smoke-salt", ["10.0.0.0/8"])
    ok("no events outside subscriber ranges", quiet == [])


def main():
    with tempfile.TemporaryDirectory() as tmp:
        m = import_module(tmp)
        print(f"loaded iotscope_py from {tmp}")
        check_scalars(m)
        check_infra(m)
        check_sampling(m, tmp)
        check_dictionary(m, tmp)
    print(f"smoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
