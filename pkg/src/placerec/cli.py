"""Command-line surface: validate, retrieve, eval, sweep, synth, serve.

Exit codes: 0 success, 1 domain failure (validation findings, protocol
mismatch, bad parameters), 2 I/O or usage errors. Every command that
writes an output file also writes a ``<output>.manifest.json`` recording
the command line, the effective configuration, and input file digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import placerec
from placerec import evaluation, matching, ranking
from placerec.attention import DEFAULT_KEYPOINT_THRESHOLD, DEFAULT_MATCH_THRESHOLD
from placerec.pipeline import DEFAULT_CANDIDATES, PlaceRetriever
from placerec.store import (
    ContainerError,
    GeoKind,
    read_feature_set_file,
    validate,
    write_feature_set_file,
)
from placerec.synth import SynthConfig, generate
from placerec.validation import filter_by_score

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_IO = 2


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path: Path, config: dict, inputs: list[Path]) -> Path:
    manifest = {
        "tool_version": placerec.__version__,
        "command": sys.argv[1:],
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _protocol_from_args(args) -> evaluation.Protocol:
    inclusive = not getattr(args, "exclusive", False)
    if getattr(args, "frame_window", None) is not None:
        return evaluation.Protocol.frames(args.frame_window, inclusive=inclusive)
    radius = getattr(args, "radius_m", None)
    if radius is None:
        radius = evaluation.DEFAULT_RADIUS_M
    return evaluation.Protocol.radius(radius, inclusive=inclusive)


# -- commands -------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        fs = read_feature_set_file(args.path)
    except ContainerError as e:
        print(f"invalid container: {e}")
        return EXIT_DOMAIN
    report = validate(fs)
    if report.ok:
        print(f"ok: {len(fs)} records, d_g={fs.d_g}, d_l={fs.d_l}")
        return EXIT_OK
    print(f"{len(report.entries)} violation(s):")
    print(report)
    return EXIT_DOMAIN


def cmd_retrieve(args) -> int:
    gallery = read_feature_set_file(args.gallery)
    queries = read_feature_set_file(args.queries)
    retriever = PlaceRetriever(
        k=args.k,
        keypoint_threshold=args.t1,
        match_threshold=args.t2,
        rerank=args.rerank == "on",
        n_components=args.dim,
    ).fit(gallery)
    results = retriever.retrieve(queries)

    out = Path(args.out)
    with open(out, "w") as f:
        for r in results:
            f.write(json.dumps(r.to_record()) + "\n")
    write_manifest(
        out,
        {
            "k": args.k, "t1": args.t1, "t2": args.t2,
            "rerank": args.rerank, "dim": args.dim,
            "d_g": gallery.d_g, "d_l": gallery.d_l,
        },
        [Path(args.gallery), Path(args.queries)],
    )
    print(f"wrote {len(results)} query results to {out}")
    return EXIT_OK


def _load_results(path: Path, queries, gallery) -> list[list[int]]:
    """JSONL results realigned to query order, as gallery index lists."""
    index_of = {rec.id: i for i, rec in enumerate(gallery.records)}
    by_query: dict[str, list[int]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            ids = [entry["id"] for entry in record["results"]]
            try:
                by_query[record["query_id"]] = [index_of[i] for i in ids]
            except KeyError as e:
                raise ValueError(f"results reference unknown gallery id {e}") from None
    aligned = []
    for rec in queries.records:
        if rec.id not in by_query:
            raise ValueError(f"no results for query {rec.id!r}")
        aligned.append(by_query[rec.id])
    if all(len(r) == 0 for r in aligned):
        raise ValueError("no retrievals: every result list is empty")
    return aligned


def cmd_eval(args) -> int:
    gallery = read_feature_set_file(args.gallery)
    queries = read_feature_set_file(args.queries)
    results = _load_results(Path(args.results), queries, gallery)
    protocol = _protocol_from_args(args)
    ks = tuple(int(k) for k in args.ks.split(","))
    table = evaluation.recall_at_k(results, queries, gallery, protocol, ks)

    out = Path(args.out)
    csv_path = out.with_suffix(".csv")
    json_path = out.with_suffix(".json")
    csv_path.write_text(table.to_csv())
    json_path.write_text(table.to_json())
    write_manifest(
        csv_path,
        {
            "ks": list(ks),
            "protocol": "frames" if protocol.kind == GeoKind.FRAME else "radius",
            "radius_m": protocol.radius_m,
            "frame_window": protocol.frame_window,
            "inclusive": protocol.inclusive,
        },
        [Path(args.results), Path(args.queries), Path(args.gallery)],
    )
    print(table.to_csv(), end="")
    return EXIT_OK


def _parse_grid(spec: str) -> dict[str, list[str]]:
    """Parse ``t1=0,0.05;t2=0.65;k=5,100`` into axis -> value strings."""
    grid: dict[str, list[str]] = {}
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, values = part.partition("=")
        if not values:
            raise ValueError(f"grid axis {name!r} has no values")
        grid[name.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    if not grid:
        raise ValueError("empty grid")
    return grid


def run_sweep(gallery, queries, t1s, t2s, ks_grid, protocol, eval_ks=(1, 5, 10)):
    """Recall per (t1, t2, k), sharing first-stage ranking across the grid."""
    k_max = max(ks_grid)
    first = [
        ranking.rank(rec.global_descriptor, gallery, k_max) for rec in queries.records
    ]

    rows = []
    for t1 in t1s:
        query_locals = [filter_by_score(rec.locals, t1) for rec in queries.records]
        gallery_locals = {}
        for t2 in t2s:
            # Count matches once per (t1, t2) against the widest candidate list.
            counts = []
            for qi, ranked in enumerate(first):
                per_cand = []
                for gi in ranked.indices:
                    gi = int(gi)
                    if gi not in gallery_locals:
                        gallery_locals[gi] = filter_by_score(gallery.records[gi].locals, t1)
                    pairs = matching.mutual_nn_pairs(query_locals[qi], gallery_locals[gi], t2)
                    per_cand.append(len(pairs))
                counts.append(per_cand)
            for k in ks_grid:
                results = []
                for qi, ranked in enumerate(first):
                    prefix = list(zip(ranked.indices[:k], counts[qi][:k]))
                    order = sorted(range(len(prefix)), key=lambda i: -prefix[i][1])
                    results.append([int(prefix[i][0]) for i in order])
                table = evaluation.recall_at_k(results, queries, gallery, protocol, eval_ks)
                rows.append({"t1": t1, "t2": t2, "k": k, "table": table})
    return rows


def cmd_sweep(args) -> int:
    grid = _parse_grid(args.grid)
    known = {"t1", "t2", "k", "layer-file"}
    unknown = set(grid) - known
    if unknown:
        raise ValueError(f"unknown grid axes: {sorted(unknown)}")
    t1s = [float(v) for v in grid.get("t1", [DEFAULT_KEYPOINT_THRESHOLD])]
    t2s = [float(v) for v in grid.get("t2", [DEFAULT_MATCH_THRESHOLD])]
    ks_grid = [int(v) for v in grid.get("k", [DEFAULT_CANDIDATES])]
    if any(k < 1 for k in ks_grid):
        raise ValueError("k grid values must be >= 1")
    protocol = _protocol_from_args(args)

    # Each layer-file value is a "gallery:queries" pair of feature dumps;
    # default is the files given by --gallery/--queries.
    layer_sources = grid.get("layer-file", [None])
    inputs = []
    all_rows = []
    for source in layer_sources:
        if source is None:
            g_path, q_path = Path(args.gallery), Path(args.queries)
        else:
            g_str, _, q_str = source.partition(":")
            if not q_str:
                raise ValueError(
                    f"layer-file value {source!r} must be gallery:queries"
                )
            g_path, q_path = Path(g_str), Path(q_str)
        inputs += [g_path, q_path]
        gallery = read_feature_set_file(g_path)
        queries = read_feature_set_file(q_path)
        for row in run_sweep(gallery, queries, t1s, t2s, ks_grid, protocol):
            row["layer_file"] = source or ""
            all_rows.append(row)

    out = Path(args.out)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["layer_file", "t1", "t2", "k", "recall@1", "recall@5", "recall@10"])
        for row in all_rows:
            values = {k: v for k, v in zip(row["table"].ks, row["table"].values)}
            writer.writerow(
                [
                    row["layer_file"], row["t1"], row["t2"], row["k"],
                    f"{values.get(1, 0.0):.4f}",
                    f"{values.get(5, 0.0):.4f}",
                    f"{values.get(10, 0.0):.4f}",
                ]
            )
    write_manifest(out, {"grid": args.grid}, sorted(set(inputs)))
    print(f"wrote {len(all_rows)} sweep rows to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    lo, _, hi = args.locals.partition(":")
    cfg = SynthConfig(
        seed=args.seed,
        n_places=args.places,
        gallery_per_place=args.per_place,
        d_g=args.d_g,
        d_l=args.d_l,
        locals_min=int(lo),
        locals_max=int(hi or lo),
        global_noise=args.global_noise,
        local_noise=args.local_noise,
        distractor_fraction=args.distractors,
        geo_spacing_m=args.spacing_m,
    )
    gallery, queries, truth = generate(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_feature_set_file(gallery, out_dir / "gallery.efvp")
    write_feature_set_file(queries, out_dir / "queries.efvp")
    (out_dir / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir / "gallery.efvp", vars(cfg).copy(), [])
    locals_total = sum(len(r.locals) for r in gallery.records)
    print(
        f"synthesized {len(gallery)} gallery and {len(queries)} query images "
        f"({cfg.n_places} places, d_g={cfg.d_g}, d_l={cfg.d_l}, "
        f"{locals_total} gallery local features) in {out_dir}"
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from placerec.server import create_app

    app = create_app(gallery_path=args.gallery)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="placerec",
        description="Two-stage visual place recognition over .efvp feature files",
    )
    parser.add_argument("--version", action="version", version=placerec.__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a feature file against all invariants")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("retrieve", help="rank and re-rank queries against a gallery")
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="results file (JSON lines)")
    p.add_argument("--k", type=int, default=DEFAULT_CANDIDATES)
    p.add_argument("--t1", type=float, default=DEFAULT_KEYPOINT_THRESHOLD,
                   help="keypoint score threshold, re-applied to stored scores")
    p.add_argument("--t2", type=float, default=DEFAULT_MATCH_THRESHOLD,
                   help="mutual-NN similarity threshold")
    p.add_argument("--rerank", choices=("on", "off"), default="on")
    p.add_argument("--dim", type=int, default=None,
                   help="optional PCA width for the global stage")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="compute Recall@K from a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--radius-m", type=float, default=None,
                   help="radius protocol in meters (default 25)")
    p.add_argument("--frame-window", type=int, default=None,
                   help="frame-index window protocol instead of radius")
    p.add_argument("--exclusive", action="store_true",
                   help="treat protocol boundaries as exclusive")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--out", required=True, help="output stem for .csv/.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="recall over a t1/t2/k parameter grid")
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--grid", required=True,
                   help="axes as 't1=0,0.05;t2=0.5,0.65;k=5,100' "
                        "(layer-file=gal.efvp:qry.efvp,... swaps feature dumps)")
    p.add_argument("--radius-m", type=float, default=None)
    p.add_argument("--frame-window", type=int, default=None)
    p.add_argument("--exclusive", action="store_true")
    p.add_argument("--out", required=True, help="long-format CSV output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--places", type=int, default=200)
    p.add_argument("--per-place", type=int, default=5)
    p.add_argument("--d-g", type=int, default=64)
    p.add_argument("--d-l", type=int, default=32)
    p.add_argument("--locals", default="10:20", help="min:max local features per image")
    p.add_argument("--global-noise", type=float, default=0.9)
    p.add_argument("--local-noise", type=float, default=0.1)
    p.add_argument("--distractors", type=float, default=0.3)
    p.add_argument("--spacing-m", type=float, default=200.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="serve the retrieval pipeline over HTTP")
    p.add_argument("--gallery", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ContainerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
