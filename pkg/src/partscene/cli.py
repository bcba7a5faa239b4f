"""Command-line pipeline: synth, snap, segment, group, run, benchmark, eval, viz.

Data goes to files; logs go to stderr. Exit codes: 0 success, 1 user error
(bad paths, bad config, missing scenes), 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from . import evaluation, grouping, render, segmenter, superpoints, synth
from .config import ConfigError, PipelineConfig
from .util import derive_seed, dump_json, load_json, slugify

log = logging.getLogger("partscene")


class UserError(ValueError):
    pass


USER_ERRORS = (UserError, ConfigError, FileNotFoundError, NotADirectoryError,
               synth.SynthError)


# ----------------------------------------------------------------- helpers

def _load_config(args) -> PipelineConfig:
    if args.config:
        config = PipelineConfig.load(args.config)
    else:
        config = PipelineConfig()
    return config.apply_overrides(args)


def _scene_dir(path) -> Path:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise UserError(f"not a scene directory (no manifest.json): {p}")
    return p


def _load_scene(path) -> synth.SceneData:
    return synth.load_scene(_scene_dir(path))


def _pipeline_for(scene: synth.SceneData, config: PipelineConfig,
                  query_slug: str | None = None) -> grouping.ScenePipeline:
    backend = config.segmenter_backend(exchange_subdir=query_slug)
    return grouping.ScenePipeline(scene, config.pipeline_settings(), backend)


def _ground_truth_masks(scene: synth.SceneData) -> dict[str, list[np.ndarray]]:
    gts: dict[str, list[np.ndarray]] = {}
    for q in scene.manifest.queries:
        gts[q.query_text] = [scene.cloud.part_id == pid
                             for pid in sorted(q.gt_part_ids)]
    return gts


def _predictions_from_instances(instances) -> list[evaluation.Prediction]:
    return [evaluation.Prediction(mask=i.mask, confidence=i.confidence)
            for i in instances]


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    config = _load_config(args)
    count = args.count
    if count < 0:
        raise UserError("count must be >= 0")
    if count == 0:
        log.info("count 0: nothing to do")
        return 0
    library, report = synth.load_shape_library(config.shape_library)
    for path, reason in report.rejected:
        log.warning("rejected shape %s: %s", path, reason)
    layouts = synth.load_layouts(config.layouts)
    templates = None
    if config.implicit_templates and Path(config.implicit_templates).exists():
        templates = load_json(config.implicit_templates)

    out_root = Path(config.output_root)
    (out_root / "scenes").mkdir(parents=True, exist_ok=True)
    config.save(out_root / "config.effective.json")
    for i in range(count):
        layout = layouts[i % len(layouts)]
        scene_seed = derive_seed(config.seed, "scene", i)
        split = synth.assign_split(i, count, shuffle_seed=config.seed)
        scene_id = f"scene_{i:05d}"
        manifest, mesh, cloud = synth.generate_scene(
            layout, library, seed=scene_seed,
            small_object_count=config.small_object_count,
            tier_points=config.tier_points,
            implicit_templates=templates,
            scene_id=scene_id, split=split)
        synth.save_scene(out_root / "scenes" / scene_id, manifest, mesh, cloud)
        log.info("synthesized %s (layout=%s, split=%s, %d points)",
                 scene_id, layout.layout_id, split, len(cloud))
    return 0


def cmd_snap(args) -> int:
    config = _load_config(args)
    scene = _load_scene(args.scene)
    pipe = _pipeline_for(scene, config)
    render.save_views(Path(args.scene) / "views", pipe.views)
    log.info("rendered %d views to %s/views", len(pipe.views), args.scene)
    return 0


def cmd_segment(args) -> int:
    config = _load_config(args)
    scene = _load_scene(args.scene)
    slug = slugify(args.query)
    pipe = _pipeline_for(scene, config, query_slug=slug)
    masks = segmenter.segment_views(pipe.views, args.query, scene.manifest,
                                    pipe.backend)
    out = Path(args.scene) / "masks" / slug
    _write_masks_dir(out, masks, args.query, pipe.views)
    log.info("wrote %d masks for '%s' to %s", len(masks), args.query, out)
    return 0


def _write_masks_dir(out: Path, masks, query: str, views) -> None:
    """Persist masks in the exchange response layout so any consumer of the
    protocol (including `group`) can read them back."""
    from PIL import Image
    out.mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    by_view: dict[int, list] = {}
    for m in masks:
        by_view.setdefault(m.view_index, []).append(m)
    entries = []
    for k, group_masks in sorted(by_view.items()):
        Image.fromarray(group_masks[0].label_map).save(out / "masks" / f"{k}.png")
        for m in sorted(group_masks, key=lambda m: m.instance_id):
            entries.append({"view": m.view_index, "instance": m.instance_id,
                            "confidence": m.confidence})
    dump_json({"query": query, "model_info": "partscene-oracle" if entries else
               "partscene", "masks": entries}, out / "response.json")


def cmd_group(args) -> int:
    config = _load_config(args)
    scene = _load_scene(args.scene)
    slug = slugify(args.query)
    masks_dir = Path(args.masks) if args.masks else Path(args.scene) / "masks" / slug
    if not (masks_dir / "response.json").exists():
        raise UserError(f"no masks for '{args.query}' at {masks_dir}; "
                        "run `segment` first")
    pipe = _pipeline_for(scene, config, query_slug=slug)
    w, h = pipe.settings.resolution
    masks = segmenter.parse_response(masks_dir, len(pipe.views), (w, h), args.query)
    instances = pipe.segment(args.query, masks=masks)
    out = Path(args.scene) / "pred" / f"{slug}.json"
    dump_json(grouping.instances_to_dict(args.query, instances), out)
    log.info("grouped %d instances for '%s' -> %s", len(instances), args.query, out)
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    scene = _load_scene(args.scene)
    queries = [q for q in scene.manifest.queries
               if args.query is None or q.query_text == args.query]
    if args.query is not None and not queries:
        queries = [args.query]  # raw open-vocabulary text
    if not queries:
        raise UserError("scene has no stored queries; pass --query TEXT")

    pred_dir = Path(args.scene) / "pred"
    preds, gts = {}, {}
    pipe = _pipeline_for(scene, config)
    for q in queries:
        text = q.query_text if isinstance(q, synth.QuerySpec) else q
        slug = slugify(text)
        # external exchanges must not share one request/response directory
        pipe.backend = config.segmenter_backend(exchange_subdir=slug)
        instances = pipe.segment(q)
        dump_json(grouping.instances_to_dict(text, instances),
                  pred_dir / f"{slug}.json")
        preds[text] = _predictions_from_instances(instances)
        if isinstance(q, synth.QuerySpec):
            gts[text] = [scene.cloud.part_id == pid for pid in sorted(q.gt_part_ids)]
        if args.viz:
            _write_viz(scene, instances, Path(args.scene) / f"viz_{slug}.ply")
    log.info("wrote predictions for %d queries to %s", len(queries), pred_dir)

    if args.eval:
        scoreable = {q: p for q, p in preds.items() if q in gts}
        report = evaluation.evaluate(scoreable, gts)
        evaluation.save_report(report, Path(args.scene) / "eval.json",
                               Path(args.scene) / "eval.csv")
        log.info("eval: AP=%.4f AP50=%.4f AP25=%.4f",
                 report.mean_ap, report.mean_ap50, report.mean_ap25)
    return 0


def _write_viz(scene: synth.SceneData, instances, out_path) -> None:
    from .io import write_cloud_ply
    from .synth import palette_color
    colors = np.full((len(scene.cloud), 3), 160, dtype=np.uint8)
    for rank, inst in enumerate(instances):
        colors[inst.mask] = palette_color(7, rank + 1)
    cloud = synth.AnnotatedCloud(
        points=scene.cloud.points, colors=colors, normals=scene.cloud.normals,
        object_id=scene.cloud.object_id, part_id=scene.cloud.part_id,
        label_table=scene.cloud.label_table)
    write_cloud_ply(cloud, out_path, label_sidecar=False)


def _benchmark_scene(scene_dir: str, config_dict: dict) -> dict:
    """Worker: run every stored query of one scene; returns the eval rows."""
    config = PipelineConfig.from_dict(config_dict)
    scene = synth.load_scene(scene_dir)
    pipe = _pipeline_for(scene, config)
    preds, gts = {}, {}
    for q in scene.manifest.queries:
        instances = pipe.segment(q)
        preds[q.query_text] = _predictions_from_instances(instances)
        gts[q.query_text] = [scene.cloud.part_id == pid
                             for pid in sorted(q.gt_part_ids)]
        dump_json(grouping.instances_to_dict(q.query_text, instances),
                  Path(scene_dir) / "pred" / f"{slugify(q.query_text)}.json")
    report = evaluation.evaluate(preds, gts)
    evaluation.save_report(report, Path(scene_dir) / "eval.json",
                           Path(scene_dir) / "eval.csv")
    return {"scene_id": scene.manifest.scene_id, "report": report.to_dict()}


def cmd_benchmark(args) -> int:
    config = _load_config(args)
    scenes_root = Path(config.output_root) / "scenes"
    if not scenes_root.is_dir():
        raise UserError(f"no scenes directory at {scenes_root}")
    scene_dirs = []
    for d in sorted(scenes_root.iterdir()):
        if not (d / "manifest.json").exists():
            continue
        manifest = load_json(d / "manifest.json")
        if args.split in (None, "all") or manifest.get("split") == args.split:
            scene_dirs.append(str(d))
    if not scene_dirs:
        raise UserError(f"no scenes for split '{args.split}' under {scenes_root}")

    results, failures = [], []
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = {pool.submit(_benchmark_scene, d, config.to_dict()): d
                       for d in scene_dirs}
            for fut in as_completed(futures):
                d = futures[fut]
                try:
                    results.append(fut.result())
                except Exception as exc:
                    failures.append((d, str(exc)))
                    log.error("scene %s failed: %s", d, exc)
    else:
        for d in scene_dirs:
            try:
                results.append(_benchmark_scene(d, config.to_dict()))
            except Exception as exc:
                failures.append((d, str(exc)))
                log.error("scene %s failed: %s", d, exc)

    if not results:
        log.error("all %d scenes failed", len(failures))
        return 2

    rows = []
    for r in sorted(results, key=lambda r: r["scene_id"]):
        for query, qr in r["report"]["per_query"].items():
            if qr["n_ground_truth"] > 0:
                rows.append((r["scene_id"], query, qr["ap"], qr["ap50"], qr["ap25"]))
    summary = {
        "split": args.split or "all",
        "scenes": len(results),
        "failed_scenes": [d for d, _ in failures],
        "query_rows": len(rows),
        "mean_ap": float(np.mean([r[2] for r in rows])) if rows else 0.0,
        "mean_ap50": float(np.mean([r[3] for r in rows])) if rows else 0.0,
        "mean_ap25": float(np.mean([r[4] for r in rows])) if rows else 0.0,
        "per_scene": {r["scene_id"]: {
            "mean_ap": r["report"]["mean_ap"],
            "mean_ap50": r["report"]["mean_ap50"],
            "mean_ap25": r["report"]["mean_ap25"],
        } for r in sorted(results, key=lambda r: r["scene_id"])},
    }
    out = Path(config.output_root) / f"benchmark_{args.split or 'all'}.json"
    dump_json(summary, out)
    print(f"scenes={summary['scenes']} queries={summary['query_rows']} "
          f"AP={summary['mean_ap']:.4f} AP50={summary['mean_ap50']:.4f} "
          f"AP25={summary['mean_ap25']:.4f}")
    log.info("benchmark summary -> %s", out)
    return 0


def cmd_eval(args) -> int:
    _ = _load_config(args)
    scene = _load_scene(args.scene)
    pred_dir = Path(args.pred) if args.pred else Path(args.scene) / "pred"
    if not pred_dir.is_dir():
        raise UserError(f"no predictions directory at {pred_dir}")
    gts = _ground_truth_masks(scene)
    preds: dict[str, list[evaluation.Prediction]] = {}
    for pred_file in sorted(pred_dir.glob("*.json")):
        d = load_json(pred_file)
        instances = grouping.instances_from_dict(d, len(scene.cloud))
        preds[d["query"]] = _predictions_from_instances(instances)
    report = evaluation.evaluate(preds, gts)
    evaluation.save_report(report, Path(args.scene) / "eval.json",
                           Path(args.scene) / "eval.csv")
    print(f"AP={report.mean_ap:.4f} AP50={report.mean_ap50:.4f} "
          f"AP25={report.mean_ap25:.4f}")
    return 0


def cmd_viz(args) -> int:
    _ = _load_config(args)
    scene = _load_scene(args.scene)
    d = load_json(args.pred)
    instances = grouping.instances_from_dict(d, len(scene.cloud))
    out = Path(args.out) if args.out else \
        Path(args.scene) / f"viz_{slugify(d['query'])}.ply"
    _write_viz(scene, instances, out)
    log.info("wrote %s", out)
    return 0


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partscene",
        description="Part-annotated scene synthesis and open-vocabulary "
                    "3D part segmentation")
    parser.add_argument("--config", metavar="PATH", default=None,
                        help="JSON config file (defaults apply otherwise)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        PipelineConfig.add_arguments(p)
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, help="synthesize scenes from layouts")
    p.add_argument("--count", type=int, required=True)

    p = add("snap", cmd_snap, help="render and export views for a scene")
    p.add_argument("--scene", required=True)

    p = add("segment", cmd_segment, help="produce 2D masks for a query")
    p.add_argument("--scene", required=True)
    p.add_argument("--query", required=True)

    p = add("group", cmd_group, help="lift stored 2D masks to 3D instances")
    p.add_argument("--scene", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--masks", default=None, help="mask dir (response layout)")

    p = add("run", cmd_run, help="end-to-end segmentation for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--query", default=None,
                   help="single query text (default: all stored queries)")
    p.add_argument("--eval", action="store_true")
    p.add_argument("--viz", action="store_true")

    p = add("benchmark", cmd_benchmark, help="run and score a whole split")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])

    p = add("eval", cmd_eval, help="score stored predictions for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", default=None)

    p = add("viz", cmd_viz, help="export a colored PLY for a prediction")
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except USER_ERRORS as exc:
        log.error("%s", exc)
        return 1
    except segmenter.ExchangeTimeout as exc:
        log.error("%s", exc)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
