"""``flowsynth`` command-line entry point.

Exit codes: 0 success, 2 invalid config or missing inputs, 3 partial failure
(some sources failed), 1 any other hard failure.
"""
import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datagen, flow as flowmod, metrics, report, segnet, train, triplets
from .config import load_config
from .errors import ConfigInvalid, FlowSynthError
from .imaging import write_gray

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

CHECKERBOARD_FLAG = 0.1
ERODE_ITERATIONS = 3

log = logging.getLogger("flowsynth")


class PartialFailure(Exception):
    def __init__(self, failed):
        self.failed = failed
        super().__init__(f"{len(failed)} source(s) failed: {', '.join(sorted(failed))}")


def _emit(obj):
    print(json.dumps(obj, indent=2, default=str))


def _require(path, what):
    if path is None or not Path(path).exists():
        raise ConfigInvalid(f"missing input: {what} ({path})")
    return Path(path)


def make_estimator(cfg):
    e = cfg.estimator
    if e.name == "block_match":
        return flowmod.get_estimator("block_match", search_radius=e.search_radius, patch=e.patch)
    if e.name == "fixture":
        return flowmod.FixtureEstimator.from_dir(_require(e.fixture_dir, "estimator.fixture_dir"))
    return flowmod.get_estimator(e.name)


def make_backend(cfg):
    g = cfg.generate
    if g.backend == "diffusion":
        return datagen.DiffusionBackend(g.model, g.command, g.fixture_dir, timeout=g.timeout)
    if g.backend == "rigid_oracle":
        spec = datagen.MotionSpec.constant(*g.motion, g.frames) if g.motion else None
        return datagen.RigidOracleBackend(spec, g.max_step)
    if g.backend == "geometric":
        return datagen.GeometricBackend(tps_grid=g.tps_grid, tps_std=g.tps_std)
    return datagen.ReplicateBackend()


def list_sources(cfg):
    s = cfg.sources
    if s is None:
        raise ConfigInvalid("config has no 'sources' section")
    images = sorted(p for p in _require(s.images, "sources.images").iterdir()
                    if p.suffix.lower() in triplets.IMAGE_SUFFIXES)
    return [(p.stem, p, triplets._find_mask(s.masks, p.stem)) for p in images]


# ------------------------------------------------------------------ commands

def cmd_generate(cfg):
    clips_dir = cfg.out / "clips"
    gen_cfg = cfg.generate.generator_config(cfg.seed).validate()
    backend = make_backend(cfg)
    done, skipped, failed = [], [], {}
    for sid, img_path, mask_path in list_sources(cfg):
        if datagen.clip_complete(clips_dir, sid):
            skipped.append(sid)
            continue
        try:
            if mask_path is None:
                raise FileNotFoundError(f"no mask for {img_path.name}")
            source = datagen.SourceSample.load(img_path, mask_path, sid, origin=cfg.name)
            clip = datagen.generate_clip(source, gen_cfg, backend)
            datagen.save_clip(clip, source, clips_dir, datagen.derive_seed(cfg.seed, sid), gen_cfg)
            done.append(sid)
        except Exception as exc:  # one bad source must not stop the batch
            log.debug("source %s failed", sid, exc_info=True)
            failed[sid] = f"{type(exc).__name__}: {exc}"
    complete = sorted(p.name for p in clips_dir.glob("*") if datagen.clip_complete(clips_dir, p.name))
    clips_dir.mkdir(parents=True, exist_ok=True)
    with open(clips_dir / "clips.jsonl", "w") as f:
        for sid in complete:
            meta = json.loads((clips_dir / sid / datagen.CLIP_META).read_text())
            f.write(json.dumps({"source_id": sid, "path": sid, "backend": meta["backend"],
                                "frames": meta["frames"]}) + "\n")
    _emit({"generated": done, "skipped": skipped, "failed": failed, "clips": len(complete)})
    if failed:
        raise PartialFailure(failed)


def _eroded(mask):
    return ndimage.binary_erosion(mask.astype(bool), iterations=ERODE_ITERATIONS)


def cmd_build(cfg):
    clips_dir = _require(cfg.out / "clips", "generated clips (run 'generate' first)")
    ds_dir = cfg.out / "dataset"
    estimator = make_estimator(cfg)
    records, failed, epe_rows = [], {}, {}
    for clip_dir in sorted(p for p in clips_dir.iterdir() if (p / datagen.CLIP_META).exists()):
        sid = clip_dir.name
        done_marker = ds_dir / sid / "triplets.jsonl"
        if done_marker.exists():
            recs = [triplets.TripletRecord(**json.loads(ln)) for ln in done_marker.read_text().splitlines()]
            records.extend(recs)
            epe_path = ds_dir / sid / "epe.json"
            if epe_path.exists():
                epe_rows[sid] = json.loads(epe_path.read_text())
            continue
        try:
            source, clip, meta = datagen.load_clip(clip_dir)
            flows = [flowmod.estimate_flow(source.image, f, estimator) for f in clip.frames]
            group = triplets.build_triplets(source, clip, flows)
            recs = triplets.write_source_triplets(ds_dir, group)
            if clip.gt_flows is not None:
                inner = _eroded(source.mask)
                epes = [flowmod.endpoint_error(f, g) for f, g in zip(flows, clip.gt_flows)]
                row = {
                    "mean_epe": float(np.mean([e.mean() for e in epes])),
                    "mean_epe_eroded_mask": float(np.mean([e[inner].mean() for e in epes])) if inner.any() else None,
                }
                (ds_dir / sid / "epe.json").write_text(json.dumps(row))
                epe_rows[sid] = row
            done_marker.write_text("".join(json.dumps(r.__dict__) + "\n" for r in recs))
            records.extend(recs)
        except Exception as exc:
            log.debug("build %s failed", sid, exc_info=True)
            failed[sid] = f"{type(exc).__name__}: {exc}"
    fingerprint = {"backend": cfg.generate.backend, "seed": cfg.seed, "estimator": cfg.estimator.name}
    manifest = triplets.DatasetManifest(cfg.name, records, fingerprint, ds_dir)
    manifest.save(ds_dir / "manifest.jsonl")
    stats = triplets.dataset_stats(manifest)
    if epe_rows:
        vals = [r["mean_epe_eroded_mask"] for r in epe_rows.values() if r["mean_epe_eroded_mask"] is not None]
        stats["epe"] = {
            "mean_epe": float(np.mean([r["mean_epe"] for r in epe_rows.values()])),
            "mean_epe_eroded_mask": float(np.mean(vals)) if vals else None,
            "per_source": epe_rows,
        }
    (ds_dir / "stats.json").write_text(json.dumps(stats, indent=2))
    _emit({"manifest": str(ds_dir / "manifest.jsonl"), **{k: v for k, v in stats.items() if k != "epe"},
           "failed": failed, **({"epe": stats["epe"]["mean_epe_eroded_mask"]} if epe_rows else {})})
    if failed:
        raise PartialFailure(failed)


def cmd_ingest_video(cfg):
    ing = cfg.ingest
    if ing is None:
        raise ConfigInvalid("config has no 'ingest' section")
    frames_dir = _require(ing.frames_dir, "ingest.frames_dir")
    masks_dir = _require(ing.masks_dir, "ingest.masks_dir")
    name = ing.name or frames_dir.name
    manifest = triplets.ingest_video(frames_dir, masks_dir, make_estimator(cfg), cfg.out / "ingest" / name, name)
    _emit({"manifest": str(manifest.root / "manifest.jsonl"), **triplets.dataset_stats(manifest)})


def cmd_train(cfg):
    t = cfg.train
    if not t.manifests:
        raise ConfigInvalid("train.manifests is empty")
    for m in t.manifests:
        _require(m, "train manifest")
    tcfg = t.train_config(cfg.seed)
    out = cfg.out / "train"
    result = train.fit(tcfg, t.manifests, t.val_manifest, out, resume=t.resume)
    report.plot_loss(result.trace, out / "loss.png")
    if t.val_manifest is not None:
        report.plot_traces({f"ratios {':'.join(map(str, tcfg.ratios))}": result.trace}, out / "trace.png")
    _emit({"checkpoint": result.checkpoint, "trace": out / "trace.jsonl",
           "final_loss": train.loss_trace(result.trace)[-1]})


def cmd_eval(cfg):
    ev = cfg.eval
    if ev is None:
        raise ConfigInvalid("config has no 'eval' section")
    manifest = triplets.DatasetManifest.load(_require(ev.manifest, "eval.manifest"))
    name = ev.dataset or manifest.name
    out = cfg.out / "eval" / name
    pred_dir = ev.pred_dir
    if pred_dir is None:
        model = segnet.load_model(_require(ev.checkpoint, "eval.checkpoint"))
        pred_dir = out / "preds"
        for i, r in enumerate(manifest.records):
            path = metrics.prediction_path(pred_dir, r.source_id, r.t)
            if path.exists():
                continue
            tr = manifest.load_triplet(i)
            write_gray(path, segnet.predict_map(model, tr.image, tr.flow))
    rep = metrics.evaluate_dataset(pred_dir, manifest, ev.protocol, name)
    rep.write_jsonl(out / "report.jsonl")
    (out / "table.txt").write_text(report.format_table({"model": [rep]}))
    _emit({"report": out / "report.jsonl", "dataset": name, **rep.scaled(), "protocol": ev.protocol})


def cmd_report(cfg, inputs, traces=(), label="model"):
    if not inputs and not traces:
        raise ConfigInvalid("report needs at least one report.jsonl or --trace file")
    out = cfg.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    if inputs:
        reports = report.load_reports([_require(p, "report file") for p in inputs])
        report.write_report({label: reports}, out)
        print((out / "table.txt").read_text())
        result["table"] = out / "table.txt"
    if traces:
        loaded = {}
        for p in traces:
            tr = train.read_trace(_require(p, "trace file"))
            loaded[":".join(map(str, tr[0].get("ratios", []))) or Path(p).stem] = tr
        report.plot_traces(loaded, out / "traces.png")
        result["traces"] = out / "traces.png"
    _emit(result)


def cmd_inspect(cfg, inputs):
    if not inputs:
        raise ConfigInvalid("inspect needs .flo files or clip directories")
    out = cfg.out / "inspect"
    rows = []
    for p in map(Path, inputs):
        _require(p, "inspect input")
        if p.is_dir():
            source, clip, _ = datagen.load_clip(p)
            if clip.gt_flows is not None:
                flows = clip.gt_flows
            else:
                est = make_estimator(cfg)
                flows = [flowmod.estimate_flow(source.image, f, est) for f in clip.frames]
            names = [f"{p.name}/t{t:03d}" for t in range(1, clip.T + 1)]
            # one colour scale for the whole clip so growing motion stays visible
            scale = max(float(np.hypot(f[..., 0], f[..., 1]).max()) for f in flows) or None
            report.flow_panel(out / f"{p.name}.png", flows, source.image, [n.split("/")[-1] for n in names], scale)
        else:
            flows = [flowmod.read_flo(p)]
            names = [p.stem]
            report.flow_panel(out / f"{p.stem}.png", flows, None, names)
        for name, fl in zip(names, flows):
            st = flowmod.flow_stats(fl).as_dict()
            st["affine_residual_max"] = float(flowmod.affine_fit_residual(fl).max())
            st["checkerboard_flag"] = st["checkerboard_score"] > CHECKERBOARD_FLAG
            rows.append({"name": name, **st})
    out.mkdir(parents=True, exist_ok=True)
    cols = ["name", "smoothness", "checkerboard_score", "affine_residual_max", "checkerboard_flag"]
    with open(out / "stats.tsv", "w") as f:
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join(str(r[c]) for c in cols) + "\n")
    with open(out / "stats.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    _emit({"stats": out / "stats.tsv", "flagged": [r["name"] for r in rows if r["checkerboard_flag"]]})


# ---------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(prog="flowsynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run file (YAML/JSON)")
    common.add_argument("--seed", type=int, help="root seed (overrides run file)")
    common.add_argument("--out", type=Path, help="output root (overrides run file)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scalar leaf, e.g. generate.frames=3")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in ("generate", "build", "ingest-video", "train", "eval"):
        sub.add_parser(name, parents=[common])
    rp = sub.add_parser("report", parents=[common])
    rp.add_argument("inputs", nargs="*", type=Path, help="report.jsonl files to merge")
    rp.add_argument("--trace", action="append", default=[], type=Path, help="trace.jsonl to plot")
    rp.add_argument("--label", default="model")
    ip = sub.add_parser("inspect", parents=[common])
    ip.add_argument("inputs", nargs="+", type=Path, help=".flo files or clip directories")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
        if args.config is not None:
            cfg.out.mkdir(parents=True, exist_ok=True)
            (cfg.out / f"run_{args.command}.yaml").write_text(args.config.read_text())
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "build":
            cmd_build(cfg)
        elif args.command == "ingest-video":
            cmd_ingest_video(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "report":
            cmd_report(cfg, args.inputs, args.trace, args.label)
        elif args.command == "inspect":
            cmd_inspect(cfg, args.inputs)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PartialFailure as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        for sid, err in sorted(exc.failed.items()):
            print(f"  {sid}: {err}", file=sys.stderr)
        return EXIT_PARTIAL
    except (FlowSynthError, OSError) as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
