"""Memorisation audit: exhaustive nearest-neighbour search of generated images
against the real corpus, in pixel space (RMS difference) and feature space
(Euclidean distance), with comparison panels.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ImageSet
from .features import FeatureExtractor, FeatureSet, extract_features
from .imageops import resize_area, save_png

logger = logging.getLogger(__name__)

DEFAULT_TAU_PIX = 0.02
DEFAULT_FEATURE_QUANTILE = 0.01
DEFAULT_THRESHOLD_PAIRS = 10_000
_ROW_CHUNK = 256


@dataclass
class NeighborReport:
    query_id: str
    pixel_neighbors: list[tuple[int, float]]
    feature_neighbors: list[tuple[int, float]]
    memorization_flag: bool

    def to_dict(self, corpus: ImageSet | None = None) -> dict:
        d = asdict(self)
        if corpus is not None:
            for key in ("pixel_neighbors", "feature_neighbors"):
                d[key] = [
                    {"index": i, "source_path": corpus[i].source_path, "distance": dist} for i, dist in d[key]
                ]
        return d


@dataclass
class AuditResult:
    reports: list[NeighborReport]
    tau_pix: float
    tau_feat: float
    k: int
    extractor_fingerprint: str
    panels: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_flagged(self) -> int:
        return sum(r.memorization_flag for r in self.reports)

    def summary(self) -> dict:
        n = len(self.reports)
        return {
            "n_queries": n,
            "n_flagged": self.n_flagged,
            "flag_rate": self.n_flagged / n if n else 0.0,
            "k": self.k,
            "tau_pix": self.tau_pix,
            "tau_feat": self.tau_feat,
            "pixel_distance": "root-mean-square difference of [0,1] RGB values",
            "feature_distance": "euclidean",
            "extractor_fingerprint": self.extractor_fingerprint,
        }


def pixel_distances(query: np.ndarray, corpus: np.ndarray) -> np.ndarray:
    """RMS difference between one (H, W, 3) query and each image of an (N, H, W, 3) corpus."""
    q = np.asarray(query, dtype=np.float64).ravel()
    flat = corpus.reshape(len(corpus), -1)
    out = np.empty(len(corpus))
    for start in range(0, len(corpus), _ROW_CHUNK):
        diff = flat[start:start + _ROW_CHUNK].astype(np.float64) - q
        out[start:start + _ROW_CHUNK] = np.sqrt(np.mean(diff * diff, axis=1))
    return out


def feature_distances(query: np.ndarray, corpus: np.ndarray) -> np.ndarray:
    diff = corpus.astype(np.float64) - np.asarray(query, dtype=np.float64)
    return np.sqrt(np.sum(diff * diff, axis=1))


def top_k(distances: np.ndarray, k: int) -> list[tuple[int, float]]:
    """k smallest distances; ties go to the lower index."""
    order = np.argsort(distances, kind="stable")[:k]
    return [(int(i), float(distances[i])) for i in order]


def _match_resolution(query: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    if query.shape[:2] != tuple(resolution):
        warnings.warn(f"resizing query from {query.shape[:2]} to corpus resolution {tuple(resolution)}")
        query = resize_area(np.asarray(query, dtype=np.float32), resolution)
    return query


def nearest_neighbors(
    query: np.ndarray,
    corpus: ImageSet,
    space: str = "pixel",
    k: int = 3,
    extractor: FeatureExtractor | None = None,
    corpus_features: FeatureSet | None = None,
) -> list[tuple[int, float]]:
    """Exact top-k (record index, distance) pairs of ``query`` in ``corpus``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    if space == "pixel":
        q = _match_resolution(query, corpus.resolution)
        return top_k(pixel_distances(q, corpus.pixels()), k)
    if space != "feature":
        raise ValueError(f"unknown space {space!r}")
    if extractor is None:
        raise ValueError("extractor required for feature-space search")
    if corpus_features is None:
        corpus_features = extract_features(corpus, extractor)
    q = extract_features(np.asarray(query, dtype=np.float32)[None], extractor)
    q.check_comparable(corpus_features)
    return top_k(feature_distances(q.vectors[0], corpus_features.vectors), k)


def feature_threshold(
    features: FeatureSet, quantile: float = DEFAULT_FEATURE_QUANTILE, n_pairs: int = DEFAULT_THRESHOLD_PAIRS, seed: int = 0
) -> float:
    """Quantile of distances between distinct real images (seeded pair sample)."""
    x = features.vectors.astype(np.float64)
    n = len(x)
    if n < 2:
        return 0.0
    total = n * (n - 1) // 2
    if total <= n_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, n_pairs)
        j = (i + rng.integers(1, n, n_pairs)) % n
    d = np.sqrt(np.sum((x[i] - x[j]) ** 2, axis=1))
    return float(np.quantile(d, quantile))


def _panel(query: np.ndarray, corpus: ImageSet, pix: list, feat: list, k: int, pad: int = 3) -> np.ndarray:
    h, w = corpus.resolution
    cell_h, cell_w = h + 2 * pad, w + 2 * pad
    panel = np.ones((2 * cell_h, (k + 1) * cell_w, 3), dtype=np.float32)
    panel[:cell_h, :cell_w] = (0.0, 0.8, 0.0)
    panel[cell_h:, :cell_w] = 0.5
    panel[pad:pad + h, pad:pad + w] = query
    for row, neighbours in enumerate((pix, feat)):
        for col, (idx, _) in enumerate(neighbours, start=1):
            y, x = row * cell_h + pad, col * cell_w + pad
            panel[y:y + h, x:x + w] = corpus[idx].pixels
    return panel


def audit_run(
    generated: ImageSet,
    real: ImageSet,
    extractor: FeatureExtractor,
    k: int = 3,
    tau_pix: float = DEFAULT_TAU_PIX,
    tau_feat: float | None = None,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> AuditResult:
    """Neighbour reports for every generated image, plus panels and a JSON summary.

    A query is flagged when its closest pixel distance is below ``tau_pix`` or
    its closest feature distance is below ``tau_feat`` (default: the 1%
    quantile of real-real feature distances).
    """
    if len(generated) == 0 or len(real) == 0:
        raise ValueError("audit needs non-empty generated and real sets")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    real_px = real.pixels()
    real_feats = extract_features(real, extractor)
    if tau_feat is None:
        tau_feat = feature_threshold(real_feats, seed=seed)
    queries = generated.pixels()
    if generated.resolution != real.resolution:
        warnings.warn(f"generated resolution {generated.resolution} != real {real.resolution}; resizing queries")
        queries = np.stack([resize_area(q, real.resolution) for q in queries])
    gen_feats = extract_features(queries, extractor)

    reports, panels = [], []
    for qi, q in enumerate(queries):
        pix = top_k(pixel_distances(q, real_px), k)
        feat = top_k(feature_distances(gen_feats.vectors[qi], real_feats.vectors), k)
        flag = pix[0][1] < tau_pix or feat[0][1] < tau_feat
        reports.append(NeighborReport(generated[qi].source_path, pix, feat, bool(flag)))
        panels.append(_panel(q, real, pix, feat, k))

    result = AuditResult(reports, float(tau_pix), float(tau_feat), k, extractor.fingerprint, panels)
    if out_dir is not None:
        out = Path(out_dir)
        for i, panel in enumerate(panels):
            save_png(panel, out / "panels" / f"query_{i:04d}.png")
        doc = {"summary": result.summary(), "reports": [r.to_dict(real) for r in reports]}
        (out / "reports.json").write_text(json.dumps(doc, indent=1))
    logger.info("audit: %d of %d generated images flagged", result.n_flagged, len(reports))
    return result
