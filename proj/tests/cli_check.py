"""End-to-end check of the suggest command line tool on a tiny run.

usage: cli_check.py <suggest binary> <source dir>
"""

import json
import os
import re
import shutil
import signal
import subprocess
import sys
import tempfile
import urllib.error
import urllib.request
from pathlib import Path

import jsonschema
from referencing import Registry, Resource

BIN = sys.argv[1]
SRC = Path(sys.argv[2])
failures = []


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        failures.append(what)


def run(*args, ok=True):
    p = subprocess.run([BIN, *args], capture_output=True, text=True)
    if ok and p.returncode != 0:
        raise SystemExit(f"suggest {' '.join(args)} failed ({p.returncode}):\n{p.stderr}")
    return p


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def tree(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


schemas = {name: json.loads((SRC / "schemas" / name).read_text())
           for name in ("run_config.schema.json", "eval_report.schema.json")}
registry = Registry().with_resources(
    (name, Resource.from_contents(s)) for name, s in schemas.items())
config_schema = schemas["run_config.schema.json"]
resolved_schema = {"$ref": "run_config.schema.json#/$defs/resolved"}


def validate(doc, schema, what):
    try:
        jsonschema.Draft202012Validator(schema, registry=registry).validate(doc)
        check(True, what)
    except jsonschema.ValidationError as e:
        check(False, f"{what}: {e.message} at {list(e.absolute_path)}")


work = Path(tempfile.mkdtemp(prefix="suggest_cli_"))
try:
    run_dir = work / "run"
    cfg_path = work / "tiny.json"
    cfg = {
        "seed": 3,
        "run_dir": str(run_dir),
        "corpus": {"synth": {"conversations": 200, "intents": 5}},
        "model": {"encoder": {"layers": 1, "input_dim": 16, "hidden": 16, "heads": 2, "attn_dim": 8},
                  "embedding": {"dim": 16}},
        "training": {"batch_size": 16, "negatives": 16, "epochs": 2, "warmup_steps": 20, "model_dim": 32,
                     "collisions": "mask", "validation_examples": 100},
        "whitelist": {"size": 50},
        "eval": {"recall_ns": [10, 100]},
    }
    cfg_path.write_text(json.dumps(cfg))

    # configs
    for p in sorted((SRC / "configs").glob("*.json")):
        validate(json.loads(p.read_text()), config_schema, f"{p.name} matches the config schema")
    validate(cfg, config_schema, "tiny config matches the config schema")
    resolved = json.loads(run("config", "-c", str(cfg_path)).stdout)
    validate(resolved, resolved_schema, "resolved config carries every key")
    over = json.loads(run("config", "-c", str(cfg_path), "--set", "training.epochs=7").stdout)
    check(over["training"]["epochs"] == 7, "--set overrides the config file")

    bad = work / "bad.json"
    bad.write_text(json.dumps({"model": {"encoder": {"layres": 2}}}))
    p = run("config", "-c", str(bad), ok=False)
    check(p.returncode != 0 and "model.encoder" in p.stderr and "layres" in p.stderr,
          "an unknown key exits non-zero and names the key")

    p = run("eval", "-c", str(cfg_path), ok=False)
    check(p.returncode != 0 and "suggest train" in p.stderr, "eval before train names the missing stage")

    # help lists flags with defaults
    for sub in (["train"], ["synth-data"], ["whitelist", "cluster"], ["serve"], ["bench", "encoder"]):
        h = run(*sub, "--help").stdout
        check(re.search(r"--\S+ \S+ \[[^\]]*\]", h) is not None, f"`{' '.join(sub)} --help` shows defaults")

    # pipeline
    def pipeline():
        for stage in (["synth-data"], ["stats"], ["split"], ["train"], ["whitelist", "freq"],
                      ["whitelist", "cluster", "-k", "20"], ["eval"]):
            run(*stage, "-c", str(cfg_path))

    pipeline()
    for d in ("manifest.json", "checkpoints", "reports", "whitelists", "data"):
        check((run_dir / d).exists(), f"run directory has {d}")
    report = json.loads((run_dir / "reports" / "eval.json").read_text())
    validate(report, schemas["eval_report.schema.json"], "eval.json matches the report schema")
    check(report["metadata"]["run_config"] == resolved, "eval report echoes the resolved config")
    best = run_dir / "checkpoints" / "best.ckpt"
    check(report["metadata"]["checkpoint_hash"] == fnv1a64(best.read_bytes()),
          "report checkpoint hash is the FNV-1a of the file")

    manifest = json.loads((run_dir / "manifest.json").read_text())
    stages = manifest["stages"]
    check({"synth-data", "stats", "split", "train", "eval"} <= set(stages), "manifest records every stage")
    ok = all(fnv1a64((run_dir / o["path"]).read_bytes()) == o["hash"]
             for s in stages.values() for o in s["outputs"])
    check(ok, "manifest output hashes match the files")
    split_out = {o["path"]: o["hash"] for o in stages["split"]["outputs"]}
    train_in = {i["path"]: i["hash"] for i in stages["train"]["inputs"]}
    check(all(split_out.get(p) == h for p, h in train_in.items()), "train inputs chain to split outputs")

    desc = json.loads(run("describe", str(best)).stdout)
    check(desc.get("parameter_count", 0) > 0 and "tensors" in json.dumps(desc), "describe prints shapes and count")

    # determinism: same config twice
    first = work / "first"
    shutil.move(str(run_dir), first)
    pipeline()
    a, b = tree(first), tree(run_dir)
    differ = [k for k in a if k != "reports/train-metrics.jsonl" and a[k] != b.get(k)]
    check(a.keys() == b.keys() and not differ, f"a second run is byte-identical ({len(a)} files, differ: {differ})")

    # serve
    wl = run_dir / "whitelists" / "frequency-50.tsv"
    proc = subprocess.Popen([BIN, "serve", "-c", str(cfg_path), "--port", "0"], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stderr.readline()
        m = re.search(r"http://([\d.]+):(\d+)", line)
        check(m is not None, f"serve announces its address ({line.strip()})")
        base = f"http://{m.group(1)}:{m.group(2)}"
        health = json.loads(urllib.request.urlopen(base + "/healthz").read())
        check(health["checkpoint_hash"] == fnv1a64(best.read_bytes()) and
              health["whitelist_hash"] == fnv1a64(wl.read_bytes()), "/healthz hashes match the files on disk")
        body = json.dumps({"turns": [{"role": "customer", "text": "my bill is too high"}], "top_k": 3}).encode()
        req = urllib.request.Request(base + "/suggest", body, {"Content-Type": "application/json"})
        res = json.loads(urllib.request.urlopen(req).read())
        scores = [s["score"] for s in res["suggestions"]]
        check(len(scores) == 3 and scores == sorted(scores, reverse=True), "/suggest returns ordered suggestions")
        try:
            urllib.request.urlopen(urllib.request.Request(base + "/suggest", b"{oops", {}))
            check(False, "malformed request is rejected")
        except urllib.error.HTTPError as e:
            check(e.code == 400, f"malformed request -> {e.code}")
    finally:
        proc.send_signal(signal.SIGTERM)
        out, _ = proc.communicate(timeout=30)
    check(proc.returncode == 0, "serve exits cleanly on SIGTERM")
    log = [json.loads(l) for l in out.splitlines() if l.startswith("{")]
    check(len(log) >= 3 and all({"path", "status", "latency_ms"} <= set(e) for e in log),
          "access log has one JSON line per request")
finally:
    shutil.rmtree(work, ignore_errors=True)

print(f"{len(failures)} failure(s)")
sys.exit(1 if failures else 0)
