"""
Attention maps: class-token attention rows per layer, reshaped onto the
patch grids and rendered as blue-to-red heatmaps.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_ppm
from .errors import DimensionError, StateError
from .model import DIST, DRIVER, EMO, FACE

AVERAGED = "mean"


@dataclass(frozen=True)
class TokenRef:
    kind: str  # "dist" | "emo" | "driver" | "face"
    patch: int | None = None

    def __str__(self):
        return self.kind if self.patch is None else f"{self.kind}({self.patch})"


@dataclass
class AttentionRecord:
    layer: int  # 1-based
    head: object  # int or AVERAGED
    query: str
    row: np.ndarray
    index_map: tuple

    def segment(self, kind):
        idx = [i for i, ref in enumerate(self.index_map) if ref.kind == kind]
        return self.row[idx]

    def score_at(self, kind):
        (i,) = [i for i, ref in enumerate(self.index_map) if ref.kind == kind and ref.patch is None]
        return float(self.row[i])


def index_map(config):
    """Token index -> TokenRef, following the sequence layout of the model."""
    refs = [TokenRef(name) for name, _ in config.tasks]
    for modality, _ in config.modalities:
        refs.extend(TokenRef(modality, j) for j in range(config.num_patches(modality)))
    return tuple(refs)


def extract_class_attention(attn, config, query=DIST, per_head=False):
    """One record per layer holding the ``query`` class token's attention row.

    ``attn`` is the per-layer list captured by ``forward(..., capture=True)``
    for a single sample, each entry (H, T, T). Rows are averaged over heads
    unless ``per_head`` is set, in which case H records per layer come back.
    """
    if attn is None:
        raise StateError("no attention captured; run forward with capture=True")
    refs = index_map(config)
    q = [i for i, r in enumerate(refs) if r.kind == query and r.patch is None]
    if not q:
        raise DimensionError(f"query token {query!r} not in this model")
    qi = q[0]
    out = []
    for layer, weights in enumerate(attn, start=1):
        weights = np.asarray(weights)
        if weights.ndim != 3 or weights.shape[1:] != (len(refs), len(refs)):
            raise DimensionError(f"layer {layer}: expected (H, {len(refs)}, {len(refs)}), got {weights.shape}")
        if per_head:
            out.extend(AttentionRecord(layer, h, query, weights[h, qi].copy(), refs) for h in range(weights.shape[0]))
        elif weights.shape[0] == 1:
            out.append(AttentionRecord(layer, AVERAGED, query, weights[0, qi].copy(), refs))
        else:
            out.append(AttentionRecord(layer, AVERAGED, query, weights[:, qi].mean(axis=0), refs))
    return out


def reshape_to_grid(segment, config, modality):
    """Row-major (H_i/P, W_i/P) grid of a modality's patch scores."""
    segment = np.asarray(segment)
    gh, gw = config.grid(modality)
    if segment.shape != (gh * gw,):
        raise DimensionError(f"{modality} segment has {segment.size} scores, grid needs {gh * gw}")
    return segment.reshape(gh, gw)


def flatten_grid(grid):
    return np.asarray(grid).reshape(-1)


def colormap(t):
    """Linear blue (t=0) to red (t=1) as float RGB in [0, 255]."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    return t * np.array([255.0, 0.0, 0.0]) + (1.0 - t) * np.array([0.0, 0.0, 255.0])


def heatmap_pixels(grid, scale=16, background=None, alpha=0.5):
    """Min-max normalized, colour-mapped, nearest-neighbour upscaled grid.

    A constant grid maps to the colormap midpoint. With ``background``
    (H, W, 3 uint8 of the upscaled size) the heatmap is alpha-blended over it.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError("heatmap grid contains non-finite values")
    lo, hi = grid.min(), grid.max()
    t = np.full_like(grid, 0.5) if hi == lo else (grid - lo) / (hi - lo)
    rgb = colormap(t)
    rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    if background is not None:
        background = np.asarray(background, dtype=np.float64)
        if background.shape != rgb.shape:
            raise DimensionError(f"background {background.shape} vs heatmap {rgb.shape}")
        rgb = alpha * rgb + (1.0 - alpha) * background
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_heatmap(grid, output_path, scale=16, background=None, alpha=0.5):
    pixels = heatmap_pixels(grid, scale, background, alpha)
    write_ppm(output_path, pixels)
    return pixels


def render_record(record, config, output_path, scale=16):
    """Driver and face heatmaps of one record side by side (face panel scaled to equal height)."""
    panels = []
    for modality, _ in config.modalities:
        grid = reshape_to_grid(record.segment(modality), config, modality)
        panels.append((grid, modality))
    height = max(g.shape[0] for g, _ in panels) * scale
    images = []
    for grid, _ in panels:
        s = height // grid.shape[0]
        images.append(heatmap_pixels(grid, s))
    gap = np.full((height, max(1, scale // 4), 3), 255, dtype=np.uint8)
    parts = []
    for img in images:
        if parts:
            parts.append(gap)
        parts.append(img)
    pixels = np.concatenate(parts, axis=1)
    write_ppm(output_path, pixels)
    return pixels


def interaction_rows(attn, config, per_head=False):
    """``(layer, head, dist_to_emo, emo_to_dist)``: the head-mean row of every
    layer, followed by that layer's per-head rows when ``per_head`` is set."""
    rows = []
    modes = (False, True) if per_head else (False,)
    for mode in modes:
        dist = extract_class_attention(attn, config, DIST, mode)
        emo = extract_class_attention(attn, config, EMO, mode)
        rows.extend((d.layer, d.head, d.score_at(EMO), e.score_at(DIST)) for d, e in zip(dist, emo))
    order = {AVERAGED: -1}
    return sorted(rows, key=lambda r: (r[0], order.get(r[1], r[1])))


def write_interaction_csv(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "head", "dist_to_emo", "emo_to_dist"])
    for layer, head, de, ed in rows:
        w.writerow([layer, head, repr(float(de)), repr(float(ed))])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def render_sample(sample_id, attn, config, out_dir, layers=None, queries=(DIST, EMO), scale=16, per_head=False):
    """Write ``<sample_id>_L<layer>_<query>.ppm`` heatmaps plus the interaction CSV."""
    out = Path(out_dir)
    layers = set(layers) if layers else set(range(1, config.depth + 1))
    written = []
    for query in queries:
        for rec in extract_class_attention(attn, config, query):
            if rec.layer not in layers:
                continue
            path = out / f"{sample_id}_L{rec.layer}_{query}.ppm"
            render_record(rec, config, path, scale)
            written.append(path)
    rows = [r for r in interaction_rows(attn, config, per_head) if r[0] in layers]
    csv_path = out / f"{sample_id}_interactions.csv"
    write_interaction_csv(csv_path, rows)
    return written, csv_path
