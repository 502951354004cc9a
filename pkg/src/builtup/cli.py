"""Command-line entry point: ``builtup <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import changedet, labelgen, metrics, orchestrator
from .config import load_config
from .grid import parse_quad_id
from .raster import QuadRaster, footprint, read_raster, write_raster

log = logging.getLogger("builtup")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Sub-parsers use SUPPRESS defaults so flags given before the subcommand survive.
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=d, help="JSON config file")
    g.add_argument("--workers", type=int, default=argparse.SUPPRESS if suppress else 1)
    g.add_argument("--rank", type=int, default=argparse.SUPPRESS if suppress else 0)
    g.add_argument("--world-size", type=int, default=argparse.SUPPRESS if suppress else 1)
    g.add_argument("--log", default=d, help="NDJSON worker log path")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def _emit(report: dict, args) -> None:
    text = metrics.report_text(report) if getattr(args, "text", False) else metrics.report_json(report)
    if getattr(args, "json", None):
        Path(args.json).write_text(metrics.report_json(report) + "\n", encoding="utf-8")
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_labelgen(args) -> int:
    tiles = [read_raster(p) for p in args.tiles]
    prints = [footprint(t, str(p)) for t, p in zip(tiles, args.tiles)]
    by_id = dict(zip((str(p) for p in args.tiles), tiles))
    quads = [parse_quad_id(q) for q in args.quads]
    index = labelgen.build_quad_index(quads, prints)
    out = Path(args.out)
    for q in quads:
        srcs = [by_id[fp.id] for fp in index[q]]
        lab = labelgen.make_label_quad(
            q, srcs, height_units=args.height_units, resampling=args.resampling
        )
        path = write_raster(lab.to_raster(), out / "labels" / f"{q.name}{args.ext}")
        log.info("wrote %s from %d tiles", path, len(srcs))
    if args.split:
        fr = tuple(float(x) for x in args.split.split(","))
        train, val, test = labelgen.split_quads(quads, fr, args.seed)
        split = {k: [q.name for q in v] for k, v in (("train", train), ("val", val), ("test", test))}
        (out / "split.json").write_text(json.dumps(split, indent=1) + "\n", encoding="utf-8")
    print(json.dumps({"labels": len(quads), "out": str(out)}))
    return 0


def cmd_postprocess(args) -> int:
    cfg = load_config(args.config)
    m = orchestrator.Manifest.load(args.manifest)
    shard = orchestrator.shard_manifest(m, args.world_size, args.rank)
    log_path = args.log or Path(cfg.output_root) / "logs" / f"rank{args.rank:04d}.ndjson"
    summary = orchestrator.run_pipeline(shard, cfg, workers=args.workers, log_path=log_path)
    print(json.dumps(summary.to_dict()))
    return 0 if summary.failures == 0 else 1


def _band(path: str, band: int, scale: float = 1.0) -> QuadRaster:
    r = read_raster(path)
    v = r.data[band - 1]
    if scale != 1.0:
        v = np.where(v != np.float32(r.nodata), v.astype(np.float64) * scale, r.nodata).astype(np.float32)
    return r.with_data(v[np.newaxis])


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    if args.kind == "height":
        band = args.band or 2
        pred = _band(args.pred, band, args.height_scale)
        ref = _band(args.ref, args.ref_band or band, args.height_scale)
    else:
        band = args.band or 1
        pred = _band(args.pred, band)
        ref = _band(args.ref, args.ref_band or band)
    pred_thr = cfg.pred_thr if args.pred_thr is None else args.pred_thr
    ref_thr = cfg.ref_thr if args.ref_thr is None else args.ref_thr
    _emit(metrics.evaluate_static(pred, ref, args.kind, pred_thr, ref_thr), args)
    return 0


def cmd_stability(args) -> int:
    cfg = load_config(args.config)
    annual = [_band(p, args.band) for p in args.annual]
    ks = args.k or cfg.k
    out = {}
    for k in ks:
        sc = metrics.StabilityConfig(k=k, tau_max=cfg.tau_max, tau_steps=cfg.tau_steps)
        out[str(k)] = metrics.evaluate_stability(annual, k, sc)
    if len(ks) == 1:
        _emit(out[str(ks[0])], args)
    else:
        text = json.dumps(out, indent=2)
        if args.json:
            Path(args.json).write_text(text + "\n", encoding="utf-8")
        print(text)
    return 0


def cmd_change(args) -> int:
    cfg = load_config(args.config)
    d0 = _band(args.before, 1)
    h0 = _band(args.before, 2, args.height_scale)
    d1 = _band(args.after, 1)
    h1 = _band(args.after, 2, args.height_scale)
    field = changedet.volume_delta(d0, h0, d1, h1)
    pct = args.percentile or cfg.change_percentile
    gm = changedet.growth_mask_p95(field, pct)
    polys = changedet.vectorize_8conn(gm.mask, field.spec, field.delta)
    changedet.write_geojson(polys, args.geojson)
    if args.mask:
        write_raster(QuadRaster(field.spec, gm.mask.astype(np.float32), -1.0, d0.crs), args.mask)
    print(
        json.dumps(
            {
                "threshold": None if gm.empty else gm.threshold,
                "n_positive": gm.n_positive,
                "masked_pixels": int(gm.mask.sum()),
                "polygons": len(polys),
            }
        )
    )
    return 0


def cmd_shard(args) -> int:
    m = orchestrator.Manifest.load(args.manifest)
    shard = orchestrator.shard_manifest(m, args.world_size, args.rank)
    shard.manifest(m.version).save(args.out)
    print(json.dumps({"rank": args.rank, "world_size": args.world_size, "items": len(shard.items)}))
    return 0


def cmd_resume(args) -> int:
    m = orchestrator.Manifest.load(args.manifest)
    logs = list(args.logs or [])
    if args.log:
        logs.append(args.log)
    pending = orchestrator.resume_pending(m, logs)
    pending.save(args.out)
    print(json.dumps({"total": len(m), "pending": len(pending)}))
    return 0


def cmd_synth(args) -> int:
    from .fixtures import noisy_spec, synth_scenes, write_scene

    spec = noisy_spec(args.seed, quads=args.quads, size=args.size)
    items = []
    for scene in synth_scenes(spec, args.quarters):
        items += write_scene(scene, args.out, args.ext).items
    m = orchestrator.Manifest(items)
    m.save(Path(args.out) / "manifest.json")
    print(json.dumps({"items": len(items), "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="builtup", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags(True)]

    p = sub.add_parser("labelgen", parents=common, help="build 512x512 label quads from source tiles")
    p.add_argument("--tiles", nargs="+", required=True, help="2-band source rasters (density, height)")
    p.add_argument("--quads", nargs="+", required=True, help="quad names, e.g. L15-1023E-0512N")
    p.add_argument("--out", required=True)
    p.add_argument("--height-units", choices=("m", "norm"), default="m")
    p.add_argument("--resampling", choices=("bilinear", "nearest"), default="bilinear")
    p.add_argument("--split", help="train,val,test fractions, e.g. 0.98,0.01,0.01")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ext", default=".tif")
    p.set_defaults(func=cmd_labelgen)

    p = sub.add_parser("postprocess", parents=common, help="run the smoothing pipeline on a manifest shard")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", parents=common, help="detection and regression metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--kind", choices=("density", "height"), default="density")
    p.add_argument("--band", type=int, help="1-based band (default 1 density, 2 height)")
    p.add_argument("--ref-band", type=int)
    p.add_argument("--height-scale", type=float, default=100.0, help="normalized height -> meters")
    p.add_argument("--pred-thr", type=float)
    p.add_argument("--ref-thr", type=float)
    p.add_argument("--json", help="also write the JSON report here")
    p.add_argument("--text", action="store_true", help="print key=value text instead of JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stability", parents=common, help="temporal stability of annual layers")
    p.add_argument("--annual", nargs="+", required=True, help="annual rasters, chronological")
    p.add_argument("--k", type=int, action="append", help="window size (repeatable)")
    p.add_argument("--band", type=int, default=1)
    p.add_argument("--json")
    p.add_argument("--text", action="store_true")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("change", parents=common, help="volume-growth polygons between two dates")
    p.add_argument("--before", required=True, help="2-band product (density, normalized height)")
    p.add_argument("--after", required=True)
    p.add_argument("--geojson", required=True)
    p.add_argument("--mask", help="optional raster output of the growth mask")
    p.add_argument("--percentile", type=float)
    p.add_argument("--height-scale", type=float, default=100.0)
    p.set_defaults(func=cmd_change)

    p = sub.add_parser("shard", parents=common, help="write one rank's slice of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shard)

    p = sub.add_parser("resume", parents=common, help="write the manifest of items not yet successful")
    p.add_argument("--manifest", required=True)
    p.add_argument("--logs", nargs="*", help="worker logs to replay (in addition to --log)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("synth", parents=common, help="write a synthetic fixture scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quads", type=int, default=1)
    p.add_argument("--quarters", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--ext", default=".tif")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
