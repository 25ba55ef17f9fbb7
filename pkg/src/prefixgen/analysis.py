"""Condition-relation analysis on prefix attention maps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .condition_encoders import PocketGraph
from .molprops import PROPERTY_NAMES, PropVec
from .prefix_attention import CONDITION_LABELS


@dataclass(frozen=True)
class PrefixAttention:
    per_layer: list[np.ndarray]   # each (heads, n_c, n_c)
    mean: np.ndarray              # (n_c, n_c), mean over layers and heads


@dataclass(frozen=True)
class RelationMatrix:
    R: np.ndarray
    delta: float
    labels: tuple[str, ...] = CONDITION_LABELS


def extract_prefix_attention(model, conditions: PropVec, pocket: PocketGraph | None = None,
                             anchor: int | None = None) -> PrefixAttention:
    prefix = model.conditions.prefix(conditions, pocket, anchor)
    maps = model.prefix_maps(prefix)
    agg = np.mean(np.stack([m.astype(np.float64) for m in maps]), axis=(0, 1))
    return PrefixAttention(maps, agg)


def relation_matrix(model, base: PropVec, pocket: PocketGraph | None = None, delta: float = 1.0,
                    anchor: int | None = None, order=None) -> RelationMatrix:
    """R = sum over the five property conditions of |A(c_i + delta) - A(c)| / delta.

    The pocket condition stays fixed. ``order`` permutes the evaluation order of
    the perturbations (the result does not depend on it).
    """
    if pocket is not None and anchor is None:
        anchor = pocket.choose_anchor()
    base_map = extract_prefix_attention(model, base, pocket, anchor).mean
    diffs = {}
    for name in (order or PROPERTY_NAMES):
        shifted = base.shifted(name, delta)
        a = extract_prefix_attention(model, shifted, pocket, anchor).mean
        diffs[name] = np.abs(a - base_map) / delta
    R = np.zeros_like(base_map)
    for name in PROPERTY_NAMES:  # fixed summation order keeps R bit-stable
        R = R + diffs[name]
    return RelationMatrix(R, float(delta))


def heatmap_csv(rel: RelationMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(rel.labels))
    for label, row in zip(rel.labels, rel.R):
        w.writerow([label] + [repr(float(v)) for v in row])
    return buf.getvalue()


def export_heatmap(rel: RelationMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(heatmap_csv(rel))


def read_heatmap(path) -> RelationMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = tuple(rows[0][1:])
    R = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return RelationMatrix(R, float("nan"), labels)


def maps_csv(maps: list[np.ndarray]) -> str:
    """Long-format CSV of per-layer per-head maps: layer, head, query, key, weight."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "head", "query", "key", "weight"])
    for li, m in enumerate(maps):
        for hi in range(m.shape[0]):
            for q in range(m.shape[1]):
                for k in range(m.shape[2]):
                    w.writerow([li, hi, q, k, repr(float(m[hi, q, k]))])
    return buf.getvalue()
