"""Uncertainty studies on a trained checkpoint and their report files."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .autodiff import no_grad
from .data import ANALYSIS, make_view_pair
from .errors import InvalidInput
from .objectives import cosine_loss

QUANTITIES = ("cosine_distance", "grad_norm")


@dataclass(frozen=True)
class UncertaintyRecord:
    sample_id: int
    class_id: int
    radius: float
    uncertainty: float
    cosine_distance: float
    grad_norm: float


@dataclass
class HistogramReport:
    quantity: str
    edges: np.ndarray
    means: np.ndarray  # nan where a bin is empty
    counts: np.ndarray
    n_views: int = 0

    @property
    def empty_bins(self) -> np.ndarray:
        return self.counts == 0


def collect_records(ckpt, dataset, n_views: int = 5, seed: int | None = None,
                    branch: str = "target") -> list[UncertaintyRecord]:
    """Per-sample radius, positive-pair cosine distance and gradient norm.

    Each quantity is averaged over ``n_views`` augmented pairs. The radius
    comes from the target embedding unless ``branch="online"``.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidInput("cannot collect records from an empty dataset")
    if n_views < 1:
        raise InvalidInput("n_views must be at least 1")
    if branch not in ("target", "online"):
        raise InvalidInput(f"unknown branch {branch!r}")
    cfg = ckpt.config
    c = cfg.train.curvature
    seed = cfg.seed if seed is None else seed
    twin = ckpt.twin
    mirror = twin.graph.mirror
    sums = np.zeros((len(dataset), 3))
    for v in range(n_views):
        pairs = [make_view_pair(s, cfg.augmentation, seed, v, mirror, purpose=ANALYSIS) for s in dataset]
        x_on = np.stack([p[0] for p in pairs])
        x_tg = np.stack([p[1] for p in pairs])
        h_hat = geometry.exp_map0(twin.embed_target(x_tg), c)
        with no_grad():
            h = geometry.exp_map0(twin.embed_online(x_on).data, c)
        ref = h_hat if branch == "target" else h
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=geometry.AtMinimum)
            g = geometry.riemannian_grad_poincare(h, h_hat, c)
        sums[:, 0] += np.sqrt(c) * np.linalg.norm(ref, axis=1)
        sums[:, 1] += cosine_loss(h, h_hat)
        sums[:, 2] += np.linalg.norm(g, axis=1)
    means = sums / n_views
    out = []
    for s, (radius, cos_d, gn) in zip(dataset, means):
        radius = float(min(radius, np.nextafter(1.0, 0.0)))
        out.append(UncertaintyRecord(s.sample_id, s.class_id, radius, 1.0 - radius, float(cos_d), float(gn)))
    return sorted(out, key=lambda r: r.sample_id)


def uncertainty_histogram(records, quantity: str = "cosine_distance", n_bins: int = 10) -> HistogramReport:
    """Equal-width bins over the observed uncertainty range with per-bin means."""
    if n_bins < 2:
        raise InvalidInput("n_bins must be at least 2")
    if quantity not in QUANTITIES:
        raise InvalidInput(f"quantity must be one of {QUANTITIES}")
    records = list(records)
    if not records:
        return HistogramReport(quantity, np.linspace(0.0, 1.0, n_bins + 1), np.full(n_bins, np.nan),
                               np.zeros(n_bins, dtype=np.int64))
    u = np.array([r.uncertainty for r in records])
    q = np.array([getattr(r, quantity) for r in records])
    lo, hi = float(u.min()), float(u.max())
    if hi <= lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    totals = np.bincount(idx, weights=q, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
    return HistogramReport(quantity, edges, means, counts)


def bin_trend(report: HistogramReport) -> float:
    """Spearman correlation between bin index and bin mean over occupied bins."""
    from scipy.stats import spearmanr

    occupied = report.counts > 0
    if occupied.sum() < 2 or np.ptp(report.means[occupied]) == 0:
        return float("nan")
    return float(spearmanr(np.flatnonzero(occupied), report.means[occupied])[0])


def class_radius_ranking(records) -> list[tuple[int, float]]:
    """Classes ordered by descending median radius."""
    by_class: dict[int, list[float]] = {}
    for r in records:
        by_class.setdefault(r.class_id, []).append(r.radius)
    med = [(cid, float(np.median(v))) for cid, v in by_class.items()]
    return sorted(med, key=lambda t: (-t[1], t[0]))


def sorted_confusion_matrix(predictions, labels, records) -> tuple[np.ndarray, list[int]]:
    """Count matrix (rows true, columns predicted) ordered by descending median radius."""
    order = [cid for cid, _ in class_radius_ranking(records)]
    pos = {c: i for i, c in enumerate(order)}
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    unknown = (set(predictions.tolist()) | set(labels.tolist())) - set(order)
    if unknown:
        raise InvalidInput(f"classes {sorted(unknown)} have no uncertainty records")
    mat = np.zeros((len(order), len(order)), dtype=np.int64)
    for t, p in zip(labels.tolist(), predictions.tolist()):
        mat[pos[t], pos[p]] += 1
    return mat, order


def off_diagonal_share(mat: np.ndarray) -> np.ndarray:
    """Fraction of each row's mass lying off the diagonal."""
    rows = mat.sum(axis=1).astype(np.float64)
    off = rows - np.diag(mat)
    return np.divide(off, rows, out=np.zeros_like(rows), where=rows > 0)


# --- report files ----------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def _svg(width: int, height: int, body: list[str]) -> str:
    return "\n".join([f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
                      f'viewBox="0 0 {width} {height}">', '<rect width="100%" height="100%" fill="white"/>',
                      *body, "</svg>", ""])


def histogram_svg(rep: HistogramReport) -> str:
    w, h, pad = 480, 300, 40
    body = [f'<text x="{pad}" y="20" font-size="12">mean {rep.quantity} per uncertainty bin</text>']
    occupied = rep.counts > 0
    if not occupied.any():
        body.append(f'<text x="{w // 2}" y="{h // 2}" text-anchor="middle" font-size="14">no data</text>')
        return _svg(w, h, body)
    top = float(np.nanmax(np.abs(rep.means))) or 1.0
    bw = (w - 2 * pad) / len(rep.counts)
    for i, (m, n) in enumerate(zip(rep.means, rep.counts)):
        x = pad + i * bw
        if n == 0:
            body.append(f'<text x="{x + bw / 2:.2f}" y="{h - pad - 4}" text-anchor="middle" font-size="9">empty</text>')
            continue
        bh = (h - 2 * pad) * abs(m) / top
        body.append(f'<rect x="{x + 1:.2f}" y="{h - pad - bh:.2f}" width="{bw - 2:.2f}" height="{bh:.2f}" '
                    f'fill="steelblue"><title>{_fmt(m)}</title></rect>')
    body.append(f'<text x="{pad}" y="{h - 10}" font-size="10">uncertainty {rep.edges[0]:.4g}</text>')
    body.append(f'<text x="{w - pad}" y="{h - 10}" text-anchor="end" font-size="10">{rep.edges[-1]:.4g}</text>')
    return _svg(w, h, body)


def confusion_svg(mat: np.ndarray, order: list[int]) -> str:
    k = len(order)
    cell, pad = 40, 40
    size = pad + cell * max(k, 1) + 10
    body = []
    if k == 0:
        body.append(f'<text x="{size // 2}" y="{size // 2}" text-anchor="middle">no data</text>')
        return _svg(size, size, body)
    top = max(int(mat.max()), 1)
    for i in range(k):
        body.append(f'<text x="4" y="{pad + i * cell + cell / 2 + 4:.1f}" font-size="10">{order[i]}</text>')
        body.append(f'<text x="{pad + i * cell + cell / 2:.1f}" y="20" text-anchor="middle" font-size="10">{order[i]}</text>')
        for j in range(k):
            shade = 255 - int(200 * mat[i, j] / top)
            body.append(f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                        f'fill="rgb({shade},{shade},255)"/>')
            body.append(f'<text x="{pad + j * cell + cell / 2}" y="{pad + i * cell + cell / 2 + 4}" '
                        f'text-anchor="middle" font-size="10">{int(mat[i, j])}</text>')
    return _svg(size, size, body)


def ranking_svg(ranking) -> str:
    w, pad, row = 360, 30, 24
    h = pad * 2 + row * max(len(ranking), 1)
    body = [f'<text x="{pad}" y="18" font-size="12">median radius per class</text>']
    if not ranking:
        body.append(f'<text x="{w // 2}" y="{h // 2}" text-anchor="middle">no data</text>')
    for i, (cid, med) in enumerate(ranking):
        y = pad + i * row
        body.append(f'<text x="4" y="{y + 14}" font-size="10">{cid}</text>')
        body.append(f'<rect x="{pad}" y="{y}" width="{(w - 2 * pad) * med:.2f}" height="{row - 4}" fill="darkorange">'
                    f'<title>{_fmt(med)}</title></rect>')
    return _svg(w, h, body)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_records(records, path) -> None:
    fields = list(UncertaintyRecord.__dataclass_fields__)
    _write_csv(Path(path), fields, [[_fmt(v) if isinstance(v, float) else v for v in asdict(r).values()]
                                    for r in records])


def read_records(path) -> list[UncertaintyRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [UncertaintyRecord(int(r["sample_id"]), int(r["class_id"]), float(r["radius"]), float(r["uncertainty"]),
                              float(r["cosine_distance"]), float(r["grad_norm"])) for r in rows]


def read_histogram(path) -> HistogramReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    quantity = rows[0]["quantity"] if rows else ""
    edges = [float(r["lo"]) for r in rows] + ([float(rows[-1]["hi"])] if rows else [])
    return HistogramReport(quantity, np.array(edges), np.array([float(r["mean"]) for r in rows]),
                           np.array([int(r["count"]) for r in rows]))


def emit_plots(out_dir, histograms=(), records=None, ranking=None, confusion=None, meta=None) -> dict:
    """Write SVG figures with their CSV sources and a JSON index; returns the index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index: dict = {"meta": meta or {}, "artifacts": []}

    def add(kind, name, text):
        (out / name).write_text(text)
        index["artifacts"].append({"kind": kind, "file": name})

    for rep in histograms:
        stem = f"histogram_{rep.quantity}"
        rows = [[rep.quantity, _fmt(rep.edges[i]), _fmt(rep.edges[i + 1]), int(rep.counts[i]), _fmt(rep.means[i]),
                 int(rep.counts[i] == 0)] for i in range(len(rep.counts))]
        _write_csv(out / f"{stem}.csv", ["quantity", "lo", "hi", "count", "mean", "empty"], rows)
        index["artifacts"].append({"kind": "csv", "file": f"{stem}.csv"})
        add("svg", f"{stem}.svg", histogram_svg(rep))
    if records is not None:
        write_records(records, out / "records.csv")
        index["artifacts"].append({"kind": "csv", "file": "records.csv"})
    if ranking is not None:
        _write_csv(out / "class_ranking.csv", ["class_id", "median_radius"], [[c, _fmt(m)] for c, m in ranking])
        index["artifacts"].append({"kind": "csv", "file": "class_ranking.csv"})
        add("svg", "class_ranking.svg", ranking_svg(ranking))
    if confusion is not None:
        mat, order = confusion
        _write_csv(out / "confusion.csv", ["true\\pred", *order], [[c, *map(int, row)] for c, row in zip(order, mat)])
        index["artifacts"].append({"kind": "csv", "file": "confusion.csv"})
        add("svg", "confusion.svg", confusion_svg(mat, order))
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index
