"""2D part-mask sources: the ground-truth oracle and the external exchange.

Both backends produce the same Mask2D units, so downstream grouping is
agnostic to where masks came from. Masks for one view share a single uint16
label map (0 = background, k = instance k); a Mask2D is a view onto one
label of that map.

Exchange protocol (file-based, bit-exact):
  <root>/request/   views/<k>.png, views/<k>.camera.json,
                    request.json = {"query": str, "views": int,
                                    "resolution": [w, h]}  (written last)
  <root>/response/  masks/<k>.png (16-bit grayscale label map),
                    response.json = {"query": str, "model_info": str,
                                     "masks": [{"view": k, "instance": j,
                                                "confidence": c}, ...]}
                    (written last; consumers block on its existence)
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .render import ViewBundle
from .synth import QuerySpec, SceneManifest
from .util import dump_json

log = logging.getLogger(__name__)

DEFAULT_MIN_PIXELS = 10


class ExchangeTimeout(RuntimeError):
    pass


class ExchangeSchemaError(ValueError):
    pass


@dataclass
class Mask2D:
    view_index: int
    instance_id: int            # label value in the view's label map, > 0
    confidence: float
    label_map: np.ndarray       # uint16 (H, W), shared by the view's masks
    pixel_count: int

    def pixels(self) -> np.ndarray:
        return self.label_map == self.instance_id


@dataclass
class SegmenterBackend:
    kind: str = "oracle"        # oracle | external
    exchange_root: Optional[Path] = None
    timeout_s: float = 120.0
    poll_interval_s: float = 0.1
    min_pixels: int = DEFAULT_MIN_PIXELS

    def __post_init__(self):
        if self.kind not in ("oracle", "external"):
            raise ValueError(f"unknown segmenter backend '{self.kind}'")
        if self.kind == "external" and self.exchange_root is None:
            raise ValueError("external backend needs an exchange_root")


def masks_by_view(masks: list[Mask2D], n_views: int) -> list[np.ndarray]:
    """Per-view boolean union maps ('inside any part mask')."""
    out: list[Optional[np.ndarray]] = [None] * n_views
    for m in masks:
        if out[m.view_index] is None:
            out[m.view_index] = m.label_map != 0
    return out


# ------------------------------------------------------------------ oracle

def resolve_query_part_ids(query: Union[QuerySpec, str],
                           manifest: SceneManifest) -> set[int]:
    """Ground-truth part ids a query refers to.

    Raw text first tries an exact object_part label match, then the scene's
    stored queries (covers implicit phrasings). Unknown text resolves to the
    empty set: open-vocabulary queries may legitimately match nothing.
    """
    if isinstance(query, QuerySpec):
        return set(query.gt_part_ids)
    by_label = {pid for pid, label in manifest.label_table.items() if label == query}
    if by_label:
        return by_label
    for q in manifest.queries:
        if q.query_text == query:
            return set(q.gt_part_ids)
    log.warning("query '%s' matches no label or stored query in scene %s",
                query, manifest.scene_id)
    return set()


def oracle_segment(views: list[ViewBundle], query: Union[QuerySpec, str],
                   manifest: SceneManifest,
                   min_pixels: int = DEFAULT_MIN_PIXELS) -> list[Mask2D]:
    """Exact masks from the rendered part-id buffers.

    One mask per queried part instance per view where it covers at least
    min_pixels pixels; confidence is always 1.0.
    """
    gt_ids = resolve_query_part_ids(query, manifest)
    masks: list[Mask2D] = []
    if not gt_ids:
        return masks
    for k, view in enumerate(views):
        label_map = np.zeros(view.part_id.shape, dtype=np.uint16)
        instance = 0
        counts = []
        for pid in sorted(gt_ids):
            sel = view.part_id == pid
            count = int(sel.sum())
            if count < min_pixels:
                continue
            instance += 1
            label_map[sel] = instance
            counts.append(count)
        for j, count in enumerate(counts, start=1):
            masks.append(Mask2D(view_index=k, instance_id=j, confidence=1.0,
                                label_map=label_map, pixel_count=count))
    return masks


# ---------------------------------------------------------------- external

def write_request(request_dir, views: list[ViewBundle], query: str) -> None:
    """Views first, request.json last: its appearance signals readiness."""
    request_dir = Path(request_dir)
    views_dir = request_dir / "views"
    if views_dir.exists():
        shutil.rmtree(views_dir)
    views_dir.mkdir(parents=True)
    w, h = views[0].camera.resolution
    for k, v in enumerate(views):
        Image.fromarray(v.color, mode="RGB").save(views_dir / f"{k}.png")
        with open(views_dir / f"{k}.camera.json", "w", encoding="utf-8") as f:
            json.dump(v.camera.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    dump_json({"query": query, "views": len(views), "resolution": [w, h]},
              request_dir / "request.json")


def parse_response(response_dir, n_views: int, resolution: tuple[int, int],
                   query: str) -> list[Mask2D]:
    """Validate and load a response directory into Mask2D units.

    Schema violations raise ExchangeSchemaError naming the offending view or
    field. Re-parsing an unchanged directory yields identical masks.
    """
    response_dir = Path(response_dir)
    meta_path = response_dir / "response.json"
    if not meta_path.exists():
        raise ExchangeSchemaError(f"missing response.json in {response_dir}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    for fld in ("query", "model_info", "masks"):
        if fld not in meta:
            raise ExchangeSchemaError(f"response.json missing field '{fld}'")
    if meta["query"] != query:
        raise ExchangeSchemaError(
            f"response query '{meta['query']}' does not match request '{query}'")

    per_view: dict[int, list[dict]] = {}
    for entry in meta["masks"]:
        for fld in ("view", "instance", "confidence"):
            if fld not in entry:
                raise ExchangeSchemaError(f"mask entry missing field '{fld}': {entry}")
        k = int(entry["view"])
        if not (0 <= k < n_views):
            raise ExchangeSchemaError(f"mask entry references view {k} out of range")
        conf = float(entry["confidence"])
        if not (0.0 <= conf <= 1.0):
            raise ExchangeSchemaError(
                f"confidence {conf} outside [0, 1] for view {k} "
                f"instance {entry['instance']}")
        if int(entry["instance"]) < 1:
            raise ExchangeSchemaError(
                f"instance id must be >= 1, got {entry['instance']} in view {k}")
        per_view.setdefault(k, []).append(entry)

    w, h = resolution
    masks: list[Mask2D] = []
    for k in sorted(per_view):
        png = response_dir / "masks" / f"{k}.png"
        if not png.exists():
            raise ExchangeSchemaError(f"missing mask image for view {k}: {png}")
        img = Image.open(png)
        if img.size != (w, h):
            raise ExchangeSchemaError(
                f"view {k} mask has size {img.size}, expected {(w, h)}")
        label_map = np.asarray(img)
        if label_map.dtype not in (np.uint16, np.int32, np.uint8):
            raise ExchangeSchemaError(
                f"view {k} mask has dtype {label_map.dtype}, expected 16-bit labels")
        label_map = label_map.astype(np.uint16)
        present = set(np.unique(label_map).tolist()) - {0}
        declared = {int(e["instance"]) for e in per_view[k]}
        if present != declared:
            raise ExchangeSchemaError(
                f"view {k} label coverage mismatch: png has {sorted(present)}, "
                f"response.json declares {sorted(declared)}")
        for e in sorted(per_view[k], key=lambda e: int(e["instance"])):
            instance = int(e["instance"])
            masks.append(Mask2D(view_index=k, instance_id=instance,
                                confidence=float(e["confidence"]),
                                label_map=label_map,
                                pixel_count=int((label_map == instance).sum())))
    return masks


def external_segment(views: list[ViewBundle], query: str,
                     backend: SegmenterBackend) -> list[Mask2D]:
    """One blocking request/response exchange with an external segmenter."""
    root = Path(backend.exchange_root)
    request_dir = root / "request"
    response_dir = root / "response"
    if response_dir.exists():
        shutil.rmtree(response_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_request(request_dir, views, query)

    deadline = time.monotonic() + backend.timeout_s
    while not (response_dir / "response.json").exists():
        if time.monotonic() > deadline:
            raise ExchangeTimeout(
                f"no response in {backend.timeout_s:.0f}s at {response_dir}")
        time.sleep(backend.poll_interval_s)
    w, h = views[0].camera.resolution
    return parse_response(response_dir, len(views), (w, h), query)


def segment_views(views: list[ViewBundle], query: Union[QuerySpec, str],
                  manifest: Optional[SceneManifest],
                  backend: SegmenterBackend) -> list[Mask2D]:
    if backend.kind == "oracle":
        if manifest is None:
            raise ValueError("oracle backend needs the scene manifest")
        return oracle_segment(views, query, manifest, backend.min_pixels)
    text = query.query_text if isinstance(query, QuerySpec) else query
    return external_segment(views, text, backend)
