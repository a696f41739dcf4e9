"""Routing forensics: pathway-preference profiles and feature-reuse reports.

A routing profile counts, per (unit, feature map, category), how many output
elements each pathway won while a dataset streams through a frozen model.
For two pathways the summary statistic is the signed preference
p = 2 * (fraction won by pathway 0) - 1 in [-1, 1]; +1 means pathway 0 won
every element, -1 means pathway 1 did.

The reuse report slices the classifier weight matrix of an R-variant model
by source block and takes L1 norms, showing how much each block's features
feed each class.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import engine
from .errors import ConfigurationError, DataError, UsageError


@dataclass
class RoutingProfile:
    """Win counts per (unit, feature map, category, pathway)."""
    unit_ids: list
    categories: list
    wins: np.ndarray      # int64, units x maps x categories x K
    elements: np.ndarray  # int64, units x maps x categories (total elements seen)

    @property
    def k(self):
        return self.wins.shape[3]

    def win_fractions(self):
        with np.errstate(invalid="ignore"):
            return self.wins / np.maximum(self.elements, 1)[..., None]

    def preference(self):
        """Signed 2-pathway preference; only defined for K=2 profiles."""
        if self.k != 2:
            raise UsageError(f"preference is defined for K=2 profiles, this one has K={self.k}")
        totals = np.maximum(self.elements, 1)
        return 2.0 * self.wins[..., 0] / totals - 1.0


@dataclass
class ReuseReport:
    """Classifier-weight L1 norms per (source block, class)."""
    block_channels: list
    class_names: list
    norms: np.ndarray  # blocks x classes

    def block_totals(self):
        return self.norms.sum(axis=1)


def trace(model, dataset, normalizer, stage=3, batch_size=125):
    """Stream a dataset through the model and aggregate routing wins.

    Runs in eval mode with routing capture on the selected stage; model
    parameters and BN running statistics are untouched. Needs K >= 2.
    """
    if model.config.k < 2:
        raise ConfigurationError("routing trace needs a model with k >= 2")
    if stage not in (1, 2, 3):
        raise ConfigurationError(f"stage must be 1, 2 or 3, got {stage}")

    units = [u.unit_id for u in model.stages[stage - 1]]
    n_units = len(units)
    n_maps = model.config.widths[stage - 1]
    categories = list(dataset.class_names)
    n_cat = len(categories)
    k = model.config.k

    wins = np.zeros((n_units, n_maps, n_cat, k), dtype=np.int64)
    elements = np.zeros((n_units, n_maps, n_cat), dtype=np.int64)
    with engine.no_grad():
        for idx in data_mod.iterate_batches(len(dataset), batch_size):
            x = engine.Tensor(normalizer.normalize(dataset.images[idx]))
            labels = dataset.labels[idx]
            _, masks = model.forward(x, training=False, capture_stage=stage)
            for u, mask in enumerate(masks):
                w = mask.winners  # N x C x H x W
                spatial = w.shape[2] * w.shape[3]
                for kk in range(k):
                    per_sample = (w == kk).sum(axis=(2, 3))  # N x C
                    for cat in np.unique(labels):
                        wins[u, :, cat, kk] += per_sample[labels == cat].sum(axis=0)
                for cat, count in zip(*np.unique(labels, return_counts=True)):
                    elements[u, :, cat] += count * spatial
    return RoutingProfile(units, categories, wins, elements)


def profile_distance(profile, cat_a, cat_b):
    """Mean absolute preference difference between two categories."""
    names = profile.categories
    for cat in (cat_a, cat_b):
        if cat not in names:
            raise UsageError(f"unknown category {cat!r}; profile has {names}")
    p = profile.preference()
    ia, ib = names.index(cat_a), names.index(cat_b)
    return float(np.abs(p[:, :, ia] - p[:, :, ib]).mean())


def reuse_report(model):
    """L1 norms of classifier weight slices per source block and class."""
    if model.config.variant != "R":
        raise ConfigurationError("reuse report needs an R-variant model "
                                 "(plain models have no cross-block concatenation)")
    w = model.classifier_w.data
    slices = model.classifier_slices()
    norms = np.stack([np.abs(w[a:b]).sum(axis=0) for a, b in slices])
    return ReuseReport([b - a for a, b in slices],
                       [f"class{i}" for i in range(w.shape[1])], norms)


# ---------------------------------------------------------------------------
# export

def profile_to_csv(profile, path):
    """Write the profile as CSV: unit,map,category,wins_p0,...,total,preference.

    For K=2 the column set is exactly (unit, map, category, wins_p0, wins_p1,
    total, preference); larger K writes one wins column per pathway and no
    preference column.
    """
    k = profile.k
    win_cols = ",".join(f"wins_p{i}" for i in range(k))
    pref = profile.preference() if k == 2 else None
    with open(path, "w") as fh:
        fh.write(f"unit,map,category,{win_cols},total" + (",preference" if k == 2 else "") + "\n")
        for u, unit_id in enumerate(profile.unit_ids):
            for m in range(profile.wins.shape[1]):
                for c, cat in enumerate(profile.categories):
                    wins = ",".join(str(int(profile.wins[u, m, c, i])) for i in range(k))
                    row = f"{unit_id},{m},{cat},{wins},{int(profile.elements[u, m, c])}"
                    if k == 2:
                        row += f",{pref[u, m, c]!r}"
                    fh.write(row + "\n")


def profile_from_csv(path):
    """Inverse of profile_to_csv; counts round-trip exactly."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        win_cols = [h for h in header if h.startswith("wins_p")]
        k = len(win_cols)
        if k < 2 or header[:3] != ["unit", "map", "category"]:
            raise DataError(f"{path}: not a routing profile CSV (header {header})")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]

    unit_ids, categories = [], []
    for row in rows:
        if row[0] not in unit_ids:
            unit_ids.append(row[0])
        if row[2] not in categories:
            categories.append(row[2])
    n_maps = max(int(row[1]) for row in rows) + 1
    wins = np.zeros((len(unit_ids), n_maps, len(categories), k), dtype=np.int64)
    elements = np.zeros((len(unit_ids), n_maps, len(categories)), dtype=np.int64)
    for row in rows:
        u, m, c = unit_ids.index(row[0]), int(row[1]), categories.index(row[2])
        wins[u, m, c] = [int(v) for v in row[3:3 + k]]
        elements[u, m, c] = int(row[3 + k])
    return RoutingProfile(unit_ids, categories, wins, elements)


def rank_maps(profile):
    """Feature maps ordered by how much their preference varies across
    categories (most category-selective first)."""
    p = profile.preference()
    score = p.var(axis=2).mean(axis=0)  # variance over categories, mean over units
    return list(np.argsort(-score))


def preference_to_gray(p):
    """Map preference in [-1, 1] to a gray level: -1 -> 0, 0 -> 128, +1 -> 255."""
    return np.clip(np.round((np.asarray(p) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pgm(path, gray):
    """Binary PGM (P5), one byte per pixel."""
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def export_heatmaps(profile, out_dir, top=4):
    """Write one PGM heatmap per top-ranked feature map.

    Rows are units (depth increases downward), columns are categories.
    Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    p = profile.preference()
    paths = []
    for m in rank_maps(profile)[:top]:
        path = os.path.join(out_dir, f"map_{int(m):03d}.pgm")
        write_pgm(path, preference_to_gray(p[:, m, :]))
        paths.append(path)
    return paths


def reuse_to_csv(report, path):
    with open(path, "w") as fh:
        fh.write("block," + ",".join(report.class_names) + ",total\n")
        for b, row in enumerate(report.norms):
            vals = ",".join(repr(float(v)) for v in row)
            fh.write(f"block{b + 1},{vals},{float(row.sum())!r}\n")
