"""Command-line entry point: gen-data, calibrate, attend, compare, analyze."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from types import SimpleNamespace

import numpy as np

from .analysis import (
    TrafficMismatchError,
    idealized_access_ratio,
    memory_speedup,
    reconcile_traffic,
    spectrum_report,
)
from .attention import prefill, sals_decode_step
from .cache import LatentKvCache
from .calibration import (
    Covariance,
    EigensolverError,
    ProjectionMatrix,
    accumulate_covariance,
    compute_joint_projection,
    compute_per_head_projection,
)
from .config import ConfigError, RunConfig, load_config
from .reference import full_attention, post_rope_lowrank_attention, pre_rope_lowrank_full
from .rope import RotaryTable, apply_rope_batch
from .selection import exact_attention_probs, overlap_score, pool_query, truncated_scores
from .synthetic import SyntheticSpec, gaussian_matrix, generate_keys, geometric_spectrum
from .tensors import TensorFormatError, read_tensor, write_tensor

log = logging.getLogger("sals")

METHODS = ("full", "post_rope", "pre_rope_full", "sals")


class DataError(Exception):
    pass


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _add_overrides(p: argparse.ArgumentParser, rank_flags=("--rank", "--latent-rank")) -> None:
    g = p.add_argument_group("config overrides")
    g.add_argument(*rank_flags, dest="latent_rank", type=int)
    g.add_argument("--score-rank", dest="score_rank", type=int)
    g.add_argument("--value-bits", dest="value_bits", type=int)
    g.add_argument("--quant-group", dest="quant_group", type=int)
    g.add_argument("--window", dest="recent_window", type=int)
    g.add_argument("--sink", type=int)
    g.add_argument("--critical", dest="critical_budget", type=int)
    g.add_argument("--recent", type=int)
    g.add_argument("--traffic-mode", dest="value_accounting", choices=("itemized", "idealized"))


def _overrides(args) -> dict:
    keys = ("latent_rank", "score_rank", "value_bits", "quant_group", "recent_window", "sink",
            "critical_budget", "recent", "value_accounting")
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sals", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    g = sub.add_parser("gen-data", help="draw synthetic keys (and optional queries/values)")
    g.add_argument("--spec", required=True, help="SyntheticSpec JSON")
    g.add_argument("--config", help="attention config JSON (sets head layout)")
    g.add_argument("--out", required=True)
    g.add_argument("--queries-out")
    g.add_argument("--values-out")
    g.add_argument("--seed", type=int)

    c = sub.add_parser("calibrate", help="fit the latent projection on pre-RoPE keys")
    c.add_argument("--keys", required=True, nargs="+")
    c.add_argument("--rank", type=int, required=True)
    c.add_argument("--kind", choices=("joint", "per_head"), default="joint")
    c.add_argument("--num-heads", type=int, default=1)
    c.add_argument("--center", action="store_true")
    c.add_argument("--solver", choices=("auto", "jacobi", "lapack"), default="auto")
    c.add_argument("--out", required=True)

    for name, help_ in (("attend", "prefill then sparse decode"), ("compare", "error and traffic per method")):
        a = sub.add_parser(name, help=help_)
        a.add_argument("--config", required=True)
        a.add_argument("--keys", required=True)
        a.add_argument("--queries", required=True)
        a.add_argument("--values", required=True)
        a.add_argument("--proj", help="projection tensor; calibrated on --keys when omitted")
        a.add_argument("--prefill", type=int, default=0, help="tokens handled by dense prefill")
        a.add_argument("--seed", type=int)
        _add_overrides(a)
        if name == "attend":
            a.add_argument("--out", required=True)
            a.add_argument("--traffic-out")
            a.add_argument("--dump-cache", metavar="DIR")
            a.add_argument("--layer", type=int)
            a.add_argument("--num-layers", type=int)
        else:
            a.add_argument("--methods", type=_csv_list(str), default=list(METHODS))
            a.add_argument("--out", help="CSV path (stdout when omitted)")
            a.add_argument("--save-outputs", metavar="DIR")

    an = sub.add_parser("analyze", help="rank, overlap and traffic diagnostics")
    mode = an.add_mutually_exclusive_group(required=True)
    mode.add_argument("--rank", action="store_true")
    mode.add_argument("--overlap", action="store_true")
    mode.add_argument("--traffic", action="store_true")
    an.add_argument("--config")
    an.add_argument("--keys", nargs="+", help="one key tensor per layer")
    an.add_argument("--queries", nargs="+", help="one query tensor per layer (--overlap)")
    an.add_argument("--spec", help="SyntheticSpec JSON instead of --keys (--rank)")
    an.add_argument("--v", type=float, default=90.0)
    an.add_argument("--nc", type=_csv_list(int), default=[16, 32, 64])
    an.add_argument("--rows", type=int, default=64, help="last query rows scored (--overlap)")
    an.add_argument("--seq-len", type=int, default=1024)
    an.add_argument("--seed", type=int)
    an.add_argument("--out", help="output path (stdout when omitted)")
    # --rank selects the analysis mode here
    _add_overrides(an, ("--latent-rank",))
    return p


def _load_run(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_spec(path: str, seed: int | None) -> SyntheticSpec:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise DataError("spec: top level must be a JSON object")
    spectrum = doc.get("spectrum")
    if isinstance(spectrum, dict):
        if "dim" not in spectrum:
            raise DataError("spectrum.dim: required for a geometric spectrum")
        doc["spectrum"] = geometric_spectrum(int(spectrum["dim"]), float(spectrum.get("ratio", 0.5)),
                                             float(spectrum.get("scale", 1.0)))
    if seed is not None:
        doc["seed"] = seed
    try:
        return SyntheticSpec.from_dict(doc)
    except TypeError as e:
        raise DataError(f"spec: {e}") from None


def cmd_gen_data(args) -> None:
    spec = _read_spec(args.spec, args.seed)
    if args.config:
        cfg = load_config(args.config).attention
    else:
        dim = len(spec.spectrum)
        cfg = SimpleNamespace(dim=dim, query_dim=dim)
    keys = generate_keys(spec, cfg)
    write_tensor(keys, args.out)
    log.info("wrote %s keys %s", keys.shape, args.out)
    if args.queries_out:
        write_tensor(gaussian_matrix(spec.seq_len, cfg.query_dim, spec.seed + 1), args.queries_out)
    if args.values_out:
        write_tensor(gaussian_matrix(spec.seq_len, cfg.dim, spec.seed + 2), args.values_out)


def _projection_meta(p: ProjectionMatrix, samples: int, centered: bool) -> dict:
    return {"r": p.rank, "dim": p.dim, "kind": p.kind, "eigenvalues": [float(x) for x in p.eigenvalues],
            "samples_seen": samples, "centered": centered}


def cmd_calibrate(args) -> None:
    acc = None
    for path in args.keys:
        k = read_tensor(path)
        if k.ndim != 2:
            raise DataError(f"{path}: expected a 2-D key matrix")
        acc = accumulate_covariance(acc or Covariance.empty(k.shape[1]), k)
    if args.kind == "joint":
        proj = compute_joint_projection(acc, args.rank, args.center, args.solver)
    else:
        proj = compute_per_head_projection(acc, args.rank, args.num_heads, args.center, args.solver)
    write_tensor(proj.U, args.out)
    with open(args.out + ".json", "w", encoding="utf-8") as f:
        json.dump(_projection_meta(proj, acc.samples_seen, args.center), f, indent=2)
        f.write("\n")
    log.info("projection %dx%d, orthonormality error %.2e", proj.dim, proj.rank, proj.orthonormality_error())


def _inputs(args, run: RunConfig):
    cfg = run.attention
    K, Q, V = read_tensor(args.keys), read_tensor(args.queries), read_tensor(args.values)
    for name, m, width in (("keys", K, cfg.dim), ("queries", Q, cfg.query_dim), ("values", V, cfg.dim)):
        if m.ndim != 2 or m.shape[1] != width:
            raise DataError(f"{name}: expected {width} columns, got shape {m.shape}")
    if not K.shape[0] == Q.shape[0] == V.shape[0]:
        raise DataError("keys, queries and values must have the same number of rows")
    if not 0 <= args.prefill <= K.shape[0]:
        raise DataError(f"prefill: must lie in [0, {K.shape[0]}]")
    if args.proj:
        U = read_tensor(args.proj).astype(np.float64)
        if U.shape != (cfg.dim, cfg.latent_rank):
            raise DataError(f"proj: shape {U.shape} != ({cfg.dim}, {cfg.latent_rank})")
        proj = ProjectionMatrix(U, np.zeros(cfg.latent_rank))
    else:
        proj = compute_joint_projection(Covariance.from_keys(K), cfg.latent_rank)
    return Q, K, V, proj


def run_sals(Q, K, V, proj, run: RunConfig, n_prefill: int, layer=None, num_layers=None):
    cfg, policy = run.attention, run.policy
    s = K.shape[0]
    table = RotaryTable.for_config(cfg, max(s, 1))
    cache = LatentKvCache(cfg)
    out = np.zeros((s, cfg.query_dim))
    out[:n_prefill] = prefill(Q[:n_prefill], K[:n_prefill], V[:n_prefill], cache, proj, cfg, table=table)
    reports = []
    for t in range(n_prefill, s):
        res = sals_decode_step(Q[t], K[t], V[t], cache, proj, policy, cfg, t, table=table,
                               traffic_mode=run.value_accounting, layer=layer, num_layers=num_layers)
        out[t] = res.y
        reports.append(res.traffic)
    return out, reports, cache


def _traffic_summary(reports) -> dict:
    tot = {k: sum(getattr(r, k) for r in reports) for k in
           ("elements_score_phase", "elements_reconstruct_phase", "elements_value_phase", "baseline_elements")}
    moved = tot["elements_score_phase"] + tot["elements_reconstruct_phase"] + tot["elements_value_phase"]
    tot["total_elements"] = moved
    tot["measured_ratio"] = moved / tot["baseline_elements"] if tot["baseline_elements"] else None
    return tot


def cmd_attend(args) -> None:
    run = _load_run(args)
    Q, K, V, proj = _inputs(args, run)
    out, reports, cache = run_sals(Q, K, V, proj, run, args.prefill, args.layer,
                                   args.num_layers or run.num_layers)
    write_tensor(out, args.out)
    doc = {"steps": [r.to_dict() for r in reports], "summary": _traffic_summary(reports)}
    with open(args.traffic_out or args.out + ".traffic.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    if args.dump_cache:
        os.makedirs(args.dump_cache, exist_ok=True)
        for name, arr in cache.snapshot().items():
            write_tensor(arr, os.path.join(args.dump_cache, f"{name}.sals"))


def cmd_compare(args) -> None:
    run = _load_run(args)
    cfg = run.attention
    unknown = [m for m in args.methods if m not in METHODS]
    if unknown:
        raise DataError(f"methods: unknown method {unknown[0]!r}")
    Q, K, V, proj = _inputs(args, run)
    s, nd, r = K.shape[0], cfg.dim, cfg.latent_rank
    table = RotaryTable.for_config(cfg, max(s, 1))
    pos = np.arange(s)
    rows = list(range(s))
    steps = np.arange(args.prefill, s) + 1  # context length of each decode step
    reference = full_attention(Q, K, V, table, num_heads=cfg.num_heads, rows=rows)
    results = []
    for method in args.methods:
        if method == "full":
            out, moved = reference, float(np.sum(2 * steps * nd))
        elif method == "post_rope":
            post = compute_joint_projection(Covariance.from_keys(apply_rope_batch(K, pos, table)), r)
            out = post_rope_lowrank_attention(Q, K, V, post, table, num_heads=cfg.num_heads, rows=rows)
            moved = float(np.sum(steps * (r + nd)))
        elif method == "pre_rope_full":
            out = pre_rope_lowrank_full(Q, K, V, proj, table, num_heads=cfg.num_heads, rows=rows)
            moved = float(np.sum(steps * (r + nd) + 2 * steps * nd))
        else:
            out, reports, _ = run_sals(Q, K, V, proj, run, args.prefill)
            moved = float(sum(rep.total_elements for rep in reports))
        diff = out - reference
        baseline = float(np.sum(2 * steps * nd))
        results.append((method, float(np.linalg.norm(diff)), float(np.max(np.abs(diff))) if diff.size else 0.0,
                        moved, moved / baseline if baseline else 0.0))
        if args.save_outputs:
            os.makedirs(args.save_outputs, exist_ok=True)
            write_tensor(out, os.path.join(args.save_outputs, f"{method}.sals"))
    rows_out = [(m, f"{e:.9e}", f"{mx:.9e}", f"{mv:.1f}", f"{ratio:.6f}") for m, e, mx, mv, ratio in results]
    _emit(_csv_text(("method", "frobenius_error", "max_abs_error", "traffic_elements", "traffic_ratio"),
                    rows_out), args.out)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_analyze(args) -> None:
    if args.rank:
        _analyze_rank(args)
    elif args.overlap:
        _analyze_overlap(args)
    else:
        _analyze_traffic(args)


def _analyze_rank(args) -> None:
    if args.spec:
        if not args.config:
            raise DataError("config: required with --spec")
        cfg = load_config(args.config).attention
        layers = [generate_keys(_read_spec(args.spec, args.seed), cfg)]
        head_dim, base, pairing = cfg.head_dim, cfg.rope_base, cfg.rope_pairing
    elif args.keys:
        layers = [read_tensor(p) for p in args.keys]
        if args.config:
            cfg = load_config(args.config).attention
            head_dim, base, pairing = cfg.head_dim, cfg.rope_base, cfg.rope_pairing
        else:
            head_dim, base, pairing = layers[0].shape[1], 10000.0, "adjacent"
    else:
        raise DataError("keys: --keys or --spec is required for --rank")

    def one(item):
        layer, keys = item
        s = keys.shape[0]
        table = RotaryTable.build(max(s, 1), head_dim, base, pairing)
        return spectrum_report(keys, np.arange(s), table, args.v, layer)

    reps = _map(one, list(enumerate(layers)), args.threads)
    _emit(_csv_text(("layer", "rank_pre", "rank_post", "v"),
                    [(r.layer, r.rank_pre, r.rank_post, f"{r.v:g}") for r in reps]), args.out)


def _analyze_overlap(args) -> None:
    if not (args.config and args.keys and args.queries):
        raise DataError("overlap: --config, --keys and --queries are required")
    if len(args.keys) != len(args.queries):
        raise DataError("queries: need one query tensor per key tensor")
    run = load_config(args.config, _overrides(args))
    cfg = run.attention

    def one(item):
        layer, (kp, qp) = item
        K = read_tensor(kp).astype(np.float64)
        Q = read_tensor(qp).astype(np.float64)
        if K.shape[1] != cfg.dim or Q.shape[1] != cfg.query_dim or K.shape[0] != Q.shape[0]:
            raise DataError(f"layer {layer}: tensor shapes {K.shape}/{Q.shape} do not match config")
        s = K.shape[0]
        proj = compute_joint_projection(Covariance.from_keys(K), cfg.latent_rank)
        table = RotaryTable.for_config(cfg, max(s, 1))
        latent = K @ proj.U
        per_nc = {nc: [] for nc in args.nc}
        for t in range(max(0, s - args.rows), s):
            q = pool_query(Q[t], cfg.num_query_heads, cfg.num_heads, cfg.head_dim)
            approx = truncated_scores(q @ proj.U, latent[: t + 1], cfg.score_rank)
            probs = exact_attention_probs(q, K[: t + 1], t, np.arange(t + 1), table,
                                          cfg.num_heads, cfg.head_dim)
            for nc in args.nc:
                per_nc[nc].append(overlap_score(approx, probs, min(nc, t + 1)))
        return [(layer, nc, float(np.mean(v)), float(np.percentile(v, 10))) for nc, v in per_nc.items() if v]

    rows = [row for chunk in _map(one, list(enumerate(zip(args.keys, args.queries))), args.threads)
            for row in chunk]
    _emit(_csv_text(("layer", "n_c", "mean_os", "p10_os"),
                    [(l, nc, f"{m:.6f}", f"{p:.6f}") for l, nc, m, p in rows]), args.out)


def _analyze_traffic(args) -> None:
    if not args.config:
        raise DataError("config: required for --traffic")
    run = load_config(args.config, _overrides(args))
    cfg, policy = run.attention, run.policy
    s = args.seq_len
    if s < 1:
        raise DataError("seq-len: must be >= 1")
    seed = run.seed if args.seed is None else args.seed
    K = gaussian_matrix(s, cfg.dim, seed)
    V = gaussian_matrix(s, cfg.dim, seed + 1)
    q = gaussian_matrix(1, cfg.query_dim, seed + 2)[0]
    proj = compute_joint_projection(Covariance.from_keys(K), cfg.latent_rank)
    cache = LatentKvCache(cfg)
    table = RotaryTable.for_config(cfg, s)
    for i in range(s - 1):
        cache.append(K[i], V[i], i, proj)
    res = sals_decode_step(q, K[-1], V[-1], cache, proj, policy, cfg, s - 1, table=table,
                           traffic_mode=run.value_accounting)
    doc = res.traffic.to_dict()
    if cfg.recent_window <= policy.recent:
        rec = reconcile_traffic(res.traffic, cfg, policy, s)
        doc["reconciled"] = True
        doc["closed_form_elements"] = rec.predicted
    else:
        doc["reconciled"] = False
    k = res.traffic.selected
    r_star = policy.score_rank or cfg.score_rank
    doc["idealized_speedup"] = memory_speedup(r_star / cfg.dim, cfg.latent_rank / cfg.dim, k / s)
    doc["idealized_access_ratio"] = idealized_access_ratio(cfg.latent_rank / cfg.dim, k / s,
                                                           r_star / cfg.latent_rank)
    _emit(json.dumps(doc, indent=2) + "\n", args.out)


COMMANDS = {"gen-data": cmd_gen_data, "calibrate": cmd_calibrate, "attend": cmd_attend,
            "compare": cmd_compare, "analyze": cmd_analyze}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.threads < 1:
        print("error: threads: must be >= 1", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except (ConfigError, TensorFormatError, DataError, EigensolverError, TrafficMismatchError,
            ValueError, IndexError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
