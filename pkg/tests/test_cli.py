"""CLI pipeline tests on the tiny fixture (fast paths; the full MLP
pipeline is exercised by the acceptance suite)."""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from zkeval.cli import main

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def work(tmp_path):
    shutil.copy(FIXTURES / "mlp_tiny.json", tmp_path / "graph.json")
    data = tmp_path / "data"
    data.mkdir()
    for f in sorted((FIXTURES / "datasets" / "tiny_classes").glob("*.json"))[:6]:
        shutil.copy(f, data / f.name)
    return tmp_path


def _invoke(runner, args, **kw):
    result = runner.invoke(main, args, catch_exceptions=False, **kw)
    return result


def _pipeline(runner, work, mode="resources"):
    g = str(work / "graph.json")
    data = str(work / "data")
    r = _invoke(runner, ["calibrate", "-g", g, "-s", data,
                         "-o", str(work / "settings.json"), "--mode", mode])
    assert r.exit_code == 0, r.output
    r = _invoke(runner, ["compile", "-g", g, "--settings", str(work / "settings.json"),
                         "-o", str(work / "model.circuit")])
    assert r.exit_code == 0, r.output
    r = _invoke(runner, ["witness", "-g", g, "--circuit", str(work / "model.circuit"),
                         "-s", data, "-o", str(work / "wtns")])
    assert r.exit_code == 0, r.output
    r = _invoke(runner, ["prove", "-g", g, "--circuit", str(work / "model.circuit"),
                         "-w", str(work / "wtns"), "-o", str(work / "proofs"),
                         "--keys-dir", str(work / "keys")])
    assert r.exit_code == 0, r.output
    vk = next((work / "keys").glob("vk-*.bin"))
    return g, data, vk


def test_full_pipeline_and_resume(runner, work):
    g, data, vk = _pipeline(runner, work)
    proof = sorted((work / "proofs").glob("*.proof"))[0]
    r = _invoke(runner, ["verify", "--vk", str(vk), "--proof", str(proof)])
    assert r.exit_code == 0, r.output

    # resume: identical reruns are no-ops
    r = _invoke(runner, ["calibrate", "-g", g, "-s", data,
                         "-o", str(work / "settings.json"), "--mode", "resources"])
    assert "up to date" in r.output
    r = _invoke(runner, ["witness", "-g", g, "--circuit", str(work / "model.circuit"),
                         "-s", data, "-o", str(work / "wtns")])
    assert "6 up to date" in r.output

    # attest and check
    r = _invoke(runner, ["attest", "--vk", str(vk), "--proofs", str(work / "proofs"),
                         "-s", data, "-o", str(work / "bundle.zip"),
                         "--n-classes", "4",
                         "--metric-attestation", str(work / "metric.attn")])
    assert r.exit_code == 0, r.output
    r = _invoke(runner, ["verify-attestation", "--bundle", str(work / "bundle.zip"),
                         "--attestation", str(work / "metric.attn")])
    assert r.exit_code == 0, r.output


def test_verify_corrupted_proof_exits_1_with_reason(runner, work):
    _, _, vk = _pipeline(runner, work)
    proof = sorted((work / "proofs").glob("*.proof"))[0]
    blob = bytearray(proof.read_bytes())
    blob[-40] ^= 0x10  # a Merkle aux node near the end
    bad = proof.with_name("bad.proof")
    bad.write_bytes(bytes(blob))
    r = _invoke(runner, ["--json", "verify", "--vk", str(vk), "--proof", str(bad)])
    assert r.exit_code == 1
    diag = json.loads(r.stderr.strip().splitlines()[-1])
    assert diag["status"] == "rejected"
    assert diag["reason"]


def test_challenge_flow(runner, work):
    g, data, vk = _pipeline(runner, work)
    sample = sorted(Path(data).glob("*.json"))[0]
    r = _invoke(runner, ["challenge", "--settings", str(work / "settings.json"),
                         "-x", str(sample), "--y-star",
                         json.dumps(_predicted(work, sample)),
                         "-o", str(work / "req.json")])
    assert r.exit_code == 0, r.output
    r = _invoke(runner, ["respond", "-r", str(work / "req.json"), "-g", g,
                         "--circuit", str(work / "model.circuit"),
                         "--keys-dir", str(work / "keys"),
                         "-o", str(work / "resp.json")])
    assert r.exit_code == 0, r.output
    r = _invoke(runner, ["adjudicate", "--vk", str(vk), "-r", str(work / "req.json"),
                         "--response", str(work / "resp.json")])
    assert r.exit_code == 0, r.output


def _predicted(work, sample):
    from zkeval import circuit as Z, graph as G, witness as W
    from zkeval.calibration import CalibrationReport
    cs = Z.load_circuit(work / "model.circuit")
    g = G.load_graph(work / "graph.json")
    cal = CalibrationReport.from_json(cs.settings_json)
    doc = json.loads(Path(sample).read_text())
    x = np.asarray(doc["x"]).reshape(doc["x_shape"])
    y, _ = W.run_quantized(g, cal, x, circuit=cs)
    return (y / float(1 << cs.scale)).tolist()


def test_unknown_subcommand_exits_2(runner):
    r = runner.invoke(main, ["frobnicate"])
    assert r.exit_code == 2
    assert "Usage" in r.output or "No such command" in r.output


def test_missing_file_exits_2(runner, tmp_path):
    r = runner.invoke(main, ["compile", "-g", str(tmp_path / "nope.json"),
                             "--settings", str(tmp_path / "also-nope.json"),
                             "-o", str(tmp_path / "x.circuit")])
    assert r.exit_code == 2


def test_json_diagnostics_schema_stable(runner, work):
    g = str(work / "graph.json")
    data = str(work / "data")
    keysets = []
    for rerun in range(2):
        r = _invoke(runner, ["--json", "calibrate", "-g", g, "-s", data,
                             "-o", str(work / f"s{rerun}.json"), "--mode", "resources"])
        assert r.exit_code == 0
        diag = json.loads(r.stderr.strip().splitlines()[-1])
        keysets.append(sorted(diag))
        assert diag["command"] == "calibrate" and diag["status"] == "ok"
    assert keysets[0] == keysets[1]


def test_estimate_from_bench_data(runner, tmp_path):
    from zkeval.circuit import padded_row_count
    records = []
    for n in (300, 1200, 5000, 21000):
        p = padded_row_count(n)
        records.append({"n_con": n, "prove_time": 1e-6 * p + 0.01,
                        "pk_bytes": 50.0 * p, "peak_memory": 8.0 * p,
                        "verify_time": 0.01, "proof_bytes": 4000})
    bench = tmp_path / "bench.json"
    bench.write_text(json.dumps({"records": records}))
    r = _invoke(runner, ["estimate", "--bench-json", str(bench),
                         "--n-con", "9000", "-n", "100"])
    assert r.exit_code == 0
    assert '"padded_rows": 16384' in r.output
