"""Command-line pipeline: calibrate, compile, witness, prove, verify,
attest, verify-attestation, challenge, respond, adjudicate, estimate, bench.

Exit codes: 0 success, 1 verification/adjudication failure, 2 usage or IO
error.  With ``--json``, machine-readable diagnostics go to stderr.  Stages
are resumable: artifacts carry sidecar digests of their inputs, and a rerun
with unchanged inputs is a no-op that reports "up to date".
"""

from __future__ import annotations

import hashlib
import json
import secrets
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

import zkeval.attestation as att_mod
import zkeval.challenge as chal_mod
import zkeval.circuit as circ_mod
import zkeval.costmodel as cost_mod
import zkeval.graph as graph_mod
import zkeval.prover as prover_mod
import zkeval.witness as wit_mod

from . import calibration as cal_mod
from .errors import ZkevalError

WORKDIR_ENV = "ZKEVAL_WORKDIR"


def _digest_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(ctx, payload: dict) -> None:
    if ctx.obj.get("json"):
        sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def _say(ctx, text: str) -> None:
    if not ctx.obj.get("json"):
        click.echo(text)


def _meta_path(out: Path) -> Path:
    return out.with_name(out.name + ".meta.json")


def _up_to_date(out: Path, inputs: dict[str, str]) -> bool:
    meta = _meta_path(out)
    if not out.exists() or not meta.exists():
        return False
    try:
        return json.loads(meta.read_text()).get("inputs") == inputs
    except (OSError, json.JSONDecodeError):
        return False


def _record_meta(out: Path, inputs: dict[str, str]) -> None:
    _meta_path(out).write_text(json.dumps({"inputs": inputs}, sort_keys=True, indent=1))


def _load_sample(path) -> tuple[np.ndarray, object]:
    doc = json.loads(Path(path).read_text())
    x = np.asarray(doc["x"], dtype=np.float64)
    if "x_shape" in doc:
        x = x.reshape(doc["x_shape"])
    return x, doc.get("y")


def _sample_paths(samples) -> list[Path]:
    p = Path(samples)
    if p.is_dir():
        out = sorted(p.glob("*.json"))
        if not out:
            raise click.UsageError(f"no *.json samples under {p}")
        return out
    return [p]


def _keys_for(circuit_path: Path, graph_path: Path, keys_dir: Path, lam: int):
    """Deterministic key material, cached content-addressed by digest."""
    cs = circ_mod.load_circuit(circuit_path)
    tag = cs.digest().hex()[:16]
    keys_dir.mkdir(parents=True, exist_ok=True)
    pk_path = keys_dir / f"pk-{tag}-l{lam}.bin"
    vk_path = keys_dir / f"vk-{tag}-l{lam}.bin"
    if pk_path.exists() and vk_path.exists():
        return prover_mod.ProvingKey.load(pk_path), prover_mod.VerificationKey.load(vk_path), pk_path, vk_path
    g = graph_mod.load_graph(Path(graph_path))
    pk, vk = prover_mod.setup(cs, g.weights, lam=lam)
    pk.save(pk_path)
    vk.save(vk_path)
    return pk, vk, pk_path, vk_path


@click.group()
@click.option("--json", "json_out", is_flag=True, help="machine-readable diagnostics on stderr")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON file with default option values per subcommand")
@click.pass_context
def main(ctx, json_out, config):
    """Verifiable evaluation toolkit for quantized model inference."""
    ctx.ensure_object(dict)
    ctx.obj["json"] = json_out
    if config:
        ctx.default_map = json.loads(Path(config).read_text())


def _run(ctx, command: str, fn):
    try:
        payload = fn()
        _emit(ctx, {"command": command, "status": "ok", **(payload or {})})
    except ZkevalError as e:
        _emit(ctx, {"command": command, "status": "error",
                    "error": type(e).__name__, "message": str(e)})
        if not ctx.obj.get("json"):
            click.echo(f"error: {e}", err=True)
        sys.exit(2)


@main.command()
@click.option("--graph", "-g", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--samples", "-s", required=True, type=click.Path(exists=True),
              help="sample JSON file or directory")
@click.option("--out", "-o", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["accuracy", "resources"]), default="accuracy")
@click.option("--accuracy-threshold", type=float, default=cal_mod.ACCURACY_THRESHOLD)
@click.option("--resources-threshold", type=float, default=cal_mod.RESOURCES_THRESHOLD)
@click.pass_context
def calibrate(ctx, graph_path, samples, out, mode, accuracy_threshold, resources_threshold):
    """Choose fixed-point scales for a graph on a calibration sample."""
    def work():
        out_p = Path(out)
        inputs = {"graph": _digest_file(graph_path), "mode": mode,
                  "samples": ",".join(_digest_file(s) for s in _sample_paths(samples)),
                  "thresholds": f"{accuracy_threshold}/{resources_threshold}"}
        if _up_to_date(out_p, inputs):
            _say(ctx, f"{out} up to date")
            return {"out": str(out_p), "up_to_date": True}
        g = graph_mod.load_graph(Path(graph_path))
        xs = [_load_sample(s)[0] for s in _sample_paths(samples)]
        report = cal_mod.calibrate(g, xs, mode=mode,
                                   accuracy_threshold=accuracy_threshold,
                                   resources_threshold=resources_threshold)
        out_p.parent.mkdir(parents=True, exist_ok=True)
        report.save(out_p)
        _record_meta(out_p, inputs)
        _say(ctx, f"calibrated scale={report.scale} max_rel_err={report.max_rel_err:.4f} -> {out}")
        return {"out": str(out_p), "scale": report.scale,
                "max_rel_err": report.max_rel_err}
    _run(ctx, "calibrate", work)


@main.command()
@click.option("--graph", "-g", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--settings", required=True, type=click.Path(exists=True))
@click.option("--out", "-o", required=True, type=click.Path())
@click.pass_context
def compile(ctx, graph_path, settings, out):
    """Lower a calibrated graph into a constraint-system circuit file."""
    def work():
        out_p = Path(out)
        inputs = {"graph": _digest_file(graph_path), "settings": _digest_file(settings)}
        if _up_to_date(out_p, inputs):
            _say(ctx, f"{out} up to date")
            return {"out": str(out_p), "up_to_date": True}
        g = graph_mod.load_graph(Path(graph_path))
        cal = cal_mod.CalibrationReport.load(settings)
        cs = circ_mod.lower_graph(g, cal)
        out_p.parent.mkdir(parents=True, exist_ok=True)
        circ_mod.save_circuit(cs, out_p)
        _record_meta(out_p, inputs)
        _say(ctx, f"compiled n_con={cs.n_con} padded_rows={cs.padded_rows} "
                  f"tables={len(cs.tables)} -> {out}")
        return {"out": str(out_p), "n_con": cs.n_con, "padded_rows": cs.padded_rows,
                "circuit_digest": cs.digest().hex()}
    _run(ctx, "compile", work)


@main.command()
@click.option("--graph", "-g", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--circuit", "circuit_path", required=True, type=click.Path(exists=True))
@click.option("--samples", "-s", required=True, type=click.Path(exists=True))
@click.option("--out-dir", "-o", required=True, type=click.Path())
@click.pass_context
def witness(ctx, graph_path, circuit_path, samples, out_dir):
    """Quantized inference producing one witness file per sample."""
    def work():
        cs = circ_mod.load_circuit(circuit_path)
        g = graph_mod.load_graph(Path(graph_path))
        cal = cal_mod.CalibrationReport.from_json(cs.settings_json)
        out_p = Path(out_dir)
        out_p.mkdir(parents=True, exist_ok=True)
        written, skipped = [], 0
        for i, sp in enumerate(_sample_paths(samples)):
            dest = out_p / f"{i:04d}.wtns"
            inputs = {"circuit": cs.digest().hex(), "sample": _digest_file(sp),
                      "graph": _digest_file(graph_path)}
            if _up_to_date(dest, inputs):
                skipped += 1
                continue
            x, _ = _load_sample(sp)
            w = wit_mod.make_witness(g, cal, x, circuit=cs)
            w.save(dest)
            _record_meta(dest, inputs)
            written.append(str(dest))
        _say(ctx, f"wrote {len(written)} witness file(s), {skipped} up to date")
        return {"written": len(written), "up_to_date": skipped, "dir": str(out_p)}
    _run(ctx, "witness", work)


def _prove_one(args):
    pk_path, wtns_path, out_path, mode, lam, fraction = args
    pk = _prove_one.pk_cache.get(pk_path)
    if pk is None:
        pk = prover_mod.ProvingKey.load(pk_path)
        _prove_one.pk_cache[pk_path] = pk
    w = wit_mod.Witness.load(wtns_path)
    proof = prover_mod.prove(pk, w, mode=mode, lam=lam, fraction=fraction)
    proof.save(out_path)
    return out_path


_prove_one.pk_cache = {}


@main.command()
@click.option("--graph", "-g", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--circuit", "circuit_path", required=True, type=click.Path(exists=True))
@click.option("--witness", "-w", "witness_path", required=True, type=click.Path(exists=True),
              help="witness file or directory of them")
@click.option("--out-dir", "-o", required=True, type=click.Path())
@click.option("--keys-dir", type=click.Path(), default=None,
              help="key cache (default: <out-dir>/../keys)")
@click.option("--mode", type=click.Choice(["audit", "spot_check"]), default="spot_check")
@click.option("--lam", type=int, default=prover_mod.DEFAULT_LAMBDA)
@click.option("--fraction", type=float, default=prover_mod.DEFAULT_FRACTION)
@click.option("--jobs", type=int, default=1, help="prove witnesses concurrently")
@click.pass_context
def prove(ctx, graph_path, circuit_path, witness_path, out_dir, keys_dir, mode,
          lam, fraction, jobs):
    """Generate proofs; keys materialize deterministically on first use."""
    def work():
        out_p = Path(out_dir)
        out_p.mkdir(parents=True, exist_ok=True)
        kd = Path(keys_dir) if keys_dir else out_p.parent / "keys"
        pk, vk, pk_path, vk_path = _keys_for(Path(circuit_path), Path(graph_path), kd, lam)
        wp = Path(witness_path)
        wfiles = sorted(wp.glob("*.wtns")) if wp.is_dir() else [wp]
        tasks, skipped = [], 0
        for wf in wfiles:
            dest = out_p / (wf.stem + ".proof")
            inputs = {"witness": _digest_file(wf), "pk": str(pk_path),
                      "mode": mode, "lam": str(lam), "fraction": str(fraction)}
            if _up_to_date(dest, inputs):
                skipped += 1
                continue
            tasks.append((str(pk_path), str(wf), str(dest), mode, lam, fraction))
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(_prove_one, tasks))
        else:
            for t in tasks:
                _prove_one(t)
        for t in tasks:
            wf, dest = Path(t[1]), Path(t[2])
            _record_meta(dest, {"witness": _digest_file(wf), "pk": str(pk_path),
                                "mode": mode, "lam": str(lam), "fraction": str(fraction)})
        _say(ctx, f"proved {len(tasks)} witness(es), {skipped} up to date; vk at {vk_path}")
        return {"proved": len(tasks), "up_to_date": skipped,
                "vk": str(vk_path), "pk": str(pk_path)}
    _run(ctx, "prove", work)


@main.command()
@click.option("--vk", "vk_path", required=True, type=click.Path(exists=True))
@click.option("--proof", "proof_path", required=True, type=click.Path(exists=True))
@click.pass_context
def verify(ctx, vk_path, proof_path):
    """Verify one proof against a verification key (exit 1 on failure)."""
    try:
        vk = prover_mod.VerificationKey.load(vk_path)
        proof = prover_mod.Proof.load(proof_path)
        res = prover_mod.verify(vk, proof)
    except ZkevalError as e:
        _emit(ctx, {"command": "verify", "status": "error",
                    "error": type(e).__name__, "message": str(e)})
        sys.exit(2)
    _emit(ctx, {"command": "verify", "status": "ok" if res.ok else "rejected",
                "reason": res.reason})
    _say(ctx, f"{'OK' if res.ok else 'REJECTED'}: {res.reason}")
    sys.exit(0 if res.ok else 1)


@main.command()
@click.option("--vk", "vk_path", required=True, type=click.Path(exists=True))
@click.option("--proofs", required=True, type=click.Path(exists=True))
@click.option("--samples", "-s", required=True, type=click.Path(exists=True),
              help="sample files carrying ground-truth labels")
@click.option("--out", "-o", required=True, type=click.Path(), help="bundle zip path")
@click.option("--metric", type=click.Choice(list(att_mod.METRIC_KINDS)), default="accuracy")
@click.option("--n-classes", type=int, default=None)
@click.option("--metric-attestation", "metric_out", type=click.Path(), default=None,
              help="also build an aggregate-only attestation here")
@click.option("--dataset-digest", default="")
@click.pass_context
def attest(ctx, vk_path, proofs, samples, out, metric, n_classes, metric_out,
           dataset_digest):
    """Package proofs into a verifiable evaluation bundle (and optionally a
    metric attestation that keeps per-sample outputs private)."""
    def work():
        vk = prover_mod.VerificationKey.load(vk_path)
        proof_files = sorted(Path(proofs).glob("*.proof"))
        sample_files = _sample_paths(samples)
        if len(proof_files) != len(sample_files):
            raise ZkevalError(f"{len(proof_files)} proofs vs {len(sample_files)} samples")
        entries = []
        for pf, sf in zip(proof_files, sample_files):
            _, y = _load_sample(sf)
            entries.append(att_mod.BundleEntry(sf.stem, prover_mod.Proof.load(pf), y))
        bundle = att_mod.build_bundle(vk, entries, dataset_digest=dataset_digest,
                                      metric=metric, n_classes=n_classes)
        att_mod.save_bundle(bundle, out)
        payload = {"bundle": str(out), "entries": len(entries)}
        if metric_out:
            att = att_mod.build_metric_attestation(
                vk, None, [e.proof for e in entries],
                [e.ground_truth for e in entries], metric,
                n_classes=n_classes, dataset_digest=dataset_digest)
            att.save(metric_out)
            payload["metric_attestation"] = str(metric_out)
            payload["value"] = att.value
        _say(ctx, f"bundled {len(entries)} entries -> {out}")
        return payload
    _run(ctx, "attest", work)


@main.command("verify-attestation")
@click.option("--bundle", type=click.Path(exists=True), default=None)
@click.option("--attestation", type=click.Path(exists=True), default=None)
@click.option("--expect-weight-hash", default=None, help="hex digest the model must match")
@click.pass_context
def verify_attestation(ctx, bundle, attestation, expect_weight_hash):
    """Check a bundle (recomputing metrics) or a metric attestation; exit 1 on failure."""
    if not bundle and not attestation:
        raise click.UsageError("pass --bundle and/or --attestation")
    ok = True
    payload: dict = {"command": "verify-attestation"}
    if bundle:
        report = att_mod.verify_bundle(bundle)
        payload["bundle"] = {
            "n_total": report.n_total, "n_valid": report.n_valid,
            "invalid_present": report.invalid_present,
            "metrics": report.metrics, "weight_hash": report.weight_hash,
        }
        if report.invalid_present:
            payload["bundle"]["invalid_entries"] = [
                e for e in report.entries if not e["ok"]]
        ok = ok and report.all_valid
        if expect_weight_hash:
            ok = ok and report.weight_hash == expect_weight_hash
        _say(ctx, f"bundle: {report.n_valid}/{report.n_total} valid, "
                  f"metrics={report.metrics}" +
                  (" [INVALID ENTRIES PRESENT]" if report.invalid_present else ""))
    if attestation:
        att = att_mod.MetricAttestation.load(attestation)
        expected = bytes.fromhex(expect_weight_hash) if expect_weight_hash else None
        good = att_mod.verify_metric_attestation(att, None, expected)
        payload["attestation"] = {"ok": good, "metric": att.metric, "value": att.value}
        ok = ok and good
        _say(ctx, f"attestation: {'OK' if good else 'REJECTED'} {att.metric}={att.value}")
    payload["status"] = "ok" if ok else "rejected"
    _emit(ctx, payload)
    sys.exit(0 if ok else 1)


@main.command()
@click.option("--settings", required=True, type=click.Path(exists=True))
@click.option("--sample", "-x", required=True, type=click.Path(exists=True))
@click.option("--y-star", default=None, help="claimed output as a JSON array")
@click.option("--tolerance", type=float, default=None,
              help="relative tolerance (default: calibration error bound)")
@click.option("--nonce", default=None)
@click.option("--vk", "vk_path", type=click.Path(exists=True), default=None)
@click.option("--out", "-o", required=True, type=click.Path())
@click.pass_context
def challenge(ctx, settings, sample, y_star, tolerance, nonce, vk_path, out):
    """Create a challenge request for an observed input/output pair."""
    def work():
        cal = cal_mod.CalibrationReport.load(settings)
        x, y = _load_sample(sample)
        if y_star is not None:
            y = json.loads(y_star)
        if y is None:
            raise ZkevalError("no claimed output: pass --y-star or a sample with 'y'")
        req = chal_mod.ChallengeRequest(
            x_star=x, y_star=np.asarray(y, dtype=np.float64),
            tolerance=cal.error_bound if tolerance is None else tolerance,
            nonce=nonce or secrets.token_hex(8),
            vk_digest=_digest_file(vk_path) if vk_path else "")
        req.save(out)
        _say(ctx, f"challenge written -> {out}")
        return {"out": str(out), "nonce": req.nonce, "tolerance": req.tolerance}
    _run(ctx, "challenge", work)


@main.command()
@click.option("--request", "-r", "request_path", required=True, type=click.Path(exists=True))
@click.option("--graph", "-g", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--circuit", "circuit_path", required=True, type=click.Path(exists=True))
@click.option("--keys-dir", type=click.Path(), default="keys")
@click.option("--out", "-o", required=True, type=click.Path())
@click.pass_context
def respond(ctx, request_path, graph_path, circuit_path, keys_dir, out):
    """Answer a challenge with a fresh proof over the challenged input."""
    def work():
        req = chal_mod.ChallengeRequest.load(request_path)
        pk, vk, _, _ = _keys_for(Path(circuit_path), Path(graph_path),
                                 Path(keys_dir), prover_mod.DEFAULT_LAMBDA)
        resp = chal_mod.respond(pk, None, req)
        resp.save(out)
        _say(ctx, f"response written -> {out}")
        return {"out": str(out)}
    _run(ctx, "respond", work)


@main.command()
@click.option("--vk", "vk_path", required=True, type=click.Path(exists=True))
@click.option("--request", "-r", "request_path", required=True, type=click.Path(exists=True))
@click.option("--response", "response_path", required=True, type=click.Path(exists=True))
@click.pass_context
def adjudicate(ctx, vk_path, request_path, response_path):
    """Judge a challenge response; exit 1 when the challenge is failed."""
    try:
        vk = prover_mod.VerificationKey.load(vk_path)
        req = chal_mod.ChallengeRequest.load(request_path)
        resp = chal_mod.ChallengeResponse.load(response_path)
    except ZkevalError as e:
        _emit(ctx, {"command": "adjudicate", "status": "error",
                    "error": type(e).__name__, "message": str(e)})
        sys.exit(2)
    verdict = chal_mod.adjudicate(vk, req, resp)
    _emit(ctx, {"command": "adjudicate",
                "status": "ok" if verdict.passed else "rejected",
                "reason": verdict.reason})
    _say(ctx, f"{'PASS' if verdict.passed else 'FAIL'}: {verdict.reason}")
    sys.exit(0 if verdict.passed else 1)


@main.command()
@click.option("--bench-json", type=click.Path(exists=True), required=True,
              help="bench output to fit coefficients from")
@click.option("--n-con", type=int, default=None, help="constraint count to price")
@click.option("--graph", "-g", "graph_path", type=click.Path(exists=True), default=None,
              help="derive the constraint count from a graph instead")
@click.option("--dataset-size", "-n", type=int, default=1)
@click.pass_context
def estimate(ctx, bench_json, n_con, graph_path, dataset_size):
    """Predict proving cost for a model/dataset from fitted measurements."""
    def work():
        doc = json.loads(Path(bench_json).read_text())
        coeffs = cost_mod.fit(doc["records"])
        n = n_con
        if n is None:
            if not graph_path:
                raise ZkevalError("pass --n-con or --graph")
            g = graph_mod.load_graph(Path(graph_path))
            n = cal_mod.estimate_constraints(graph_mod.lower_to_einsum(g))
        est = cost_mod.estimate(coeffs, n, dataset_size)
        payload = {
            "n_con": est.n_con, "padded_rows": est.padded_rows,
            "prove_time_s": est.prove_time, "pk_bytes": est.pk_bytes,
            "peak_memory": est.peak_memory, "dataset_size": est.dataset_size,
            "dataset_total_time_s": est.dataset_total_time,
            "fit_r2_prove_time": coeffs.by_padded["prove_time"].r2,
        }
        _say(ctx, json.dumps(payload, indent=1))
        return payload
    _run(ctx, "estimate", work)


@main.command()
@click.option("--widths", default="16,32,64,128,256")
@click.option("--in-dim", type=int, default=784)
@click.option("--out-dim", type=int, default=10)
@click.option("--out-dir", "-o", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["accuracy", "resources"]), default="accuracy")
@click.pass_context
def bench(ctx, widths, in_dim, out_dim, out_dir, mode):
    """Run the MLP width sweep, fit cost coefficients, and save CSV/JSON."""
    def work():
        ws = tuple(int(w) for w in widths.split(","))
        records = cost_mod.bench_width_sweep(ws, in_dim=in_dim, out_dim=out_dim,
                                             mode=mode)
        out_p = Path(out_dir)
        out_p.mkdir(parents=True, exist_ok=True)
        cost_mod.save_records(records, csv_path=out_p / "bench.csv",
                              json_path=out_p / "bench.json")
        coeffs = cost_mod.fit(records)
        (out_p / "coefficients.json").write_text(coeffs.to_json())
        _say(ctx, cost_mod.format_table(records))
        _say(ctx, f"prove-time fit vs padded rows: "
                  f"R^2={coeffs.by_padded['prove_time'].r2:.5f}")
        return {"out": str(out_p), "widths": list(ws),
                "r2_prove_time": coeffs.by_padded["prove_time"].r2}
    _run(ctx, "bench", work)


if __name__ == "__main__":
    main()
