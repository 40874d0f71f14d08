"""Image -> feature-vector extractors and the ``.featcache`` file format.

Two extractor kinds exist:

* ``seeded_random_projection``: area-downsample to ``input_size``, apply a
  fixed seeded affine map, squash with a logistic and clamp to [0, 1]. Needs
  no downloads, so it is what the tests and toy runs use.
* ``pretrained_embedding``: a TorchScript file, or a ``torch.export`` archive
  (``.pt2``), loaded from ``model_source``; it takes (B, 3, S, S) images in
  [0, 1] and returns (B, d) embeddings.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .dataset import ImageSet
from .imageops import resize_area

CACHE_VERSION = 1
KINDS = ("seeded_random_projection", "pretrained_embedding")
_KIND_ALIASES = {"random": "seeded_random_projection", "pretrained": "pretrained_embedding"}


class CacheError(ValueError):
    pass


class ExtractorUnavailable(RuntimeError):
    pass


def _file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class FeatureExtractor:
    kind: str = "seeded_random_projection"
    output_dim: int = 64
    seed: int | None = 0
    model_source: str | None = None
    input_size: int = 16

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.output_dim < 1:
            raise ValueError("output_dim must be positive")
        if kind == "seeded_random_projection" and self.seed is None:
            raise ValueError("seeded_random_projection needs a seed")

    def config(self) -> dict:
        cfg = {"kind": self.kind, "output_dim": self.output_dim, "input_size": self.input_size}
        if self.kind == "seeded_random_projection":
            cfg["seed"] = int(self.seed)
        else:
            cfg["model_source"] = str(self.model_source)
            cfg["model_sha256"] = self._model_digest
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "FeatureExtractor":
        return cls(
            kind=cfg.get("kind", "seeded_random_projection"),
            output_dim=int(cfg.get("output_dim", 64)),
            seed=cfg.get("seed", 0),
            model_source=cfg.get("model_source"),
            input_size=int(cfg.get("input_size", 16)),
        )

    @cached_property
    def _model_digest(self) -> str:
        if not self.model_source or not Path(self.model_source).is_file():
            raise ExtractorUnavailable(f"extractor unavailable: cannot read model file {self.model_source!r}")
        return _file_digest(self.model_source)

    @property
    def fingerprint(self) -> str:
        return fingerprint_of(self.config())

    # seeded random projection --------------------------------------------------
    @cached_property
    def _projection(self) -> tuple[np.ndarray, np.ndarray]:
        n_in = 3 * self.input_size * self.input_size
        rng = np.random.default_rng([int(self.seed), self.output_dim, self.input_size])
        weight = rng.standard_normal((n_in, self.output_dim)) * (2.0 / np.sqrt(n_in))
        # centre typical inputs: W @ 0.5 cancels, leaving a small seeded offset
        bias = -0.5 * weight.sum(axis=0) + 0.25 * rng.standard_normal(self.output_dim)
        return weight, bias

    @property
    def bias_vector(self) -> np.ndarray:
        """Features of the all-zero image for the random projection."""
        _, bias = self._projection
        return _squash(bias).astype(np.float32)

    @cached_property
    def _module(self):
        import torch

        self._model_digest  # noqa: B018 - fail early on a missing file
        try:
            if str(self.model_source).endswith(".pt2"):
                return torch.export.load(str(self.model_source)).module()
            module = torch.jit.load(str(self.model_source), map_location="cpu")
        except Exception as exc:  # torch raises several unrelated types here
            raise ExtractorUnavailable(f"extractor unavailable: {self.model_source!r}: {exc}") from exc
        module.eval()
        return module

    def embed(self, pixels: np.ndarray) -> np.ndarray:
        """Embed an (N, H, W, 3) batch already at ``input_size``."""
        if self.kind == "seeded_random_projection":
            weight, bias = self._projection
            flat = pixels.reshape(len(pixels), -1).astype(np.float64)
            return _squash(flat @ weight + bias)
        import torch

        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2), dtype=np.float32))
            out = self._module(x)
        out = out.reshape(len(pixels), -1).double().numpy()
        if out.shape[1] != self.output_dim:
            raise ExtractorUnavailable(
                f"extractor unavailable: model returns {out.shape[1]} dims, configured {self.output_dim}"
            )
        return out


def _squash(v: np.ndarray) -> np.ndarray:
    return np.clip(1.0 / (1.0 + np.exp(-v)), 0.0, 1.0)


def fingerprint_of(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureSet:
    vectors: np.ndarray = field(repr=False)
    extractor_fingerprint: str
    source_manifest: str = ""
    extractor_config: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"feature vectors must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vectors must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def check_comparable(self, other: "FeatureSet") -> None:
        if self.extractor_fingerprint != other.extractor_fingerprint:
            raise ValueError(
                f"incompatible features: extractor {self.extractor_fingerprint} vs {other.extractor_fingerprint}"
            )


def manifest_digest(images: ImageSet) -> str:
    return hashlib.sha256(json.dumps(images.manifest(), sort_keys=True).encode()).hexdigest()[:16]


def extract_features(images: ImageSet | np.ndarray, extractor: FeatureExtractor, batch_size: int = 256) -> FeatureSet:
    """Embed every image in manifest order.

    Accepts an :class:`ImageSet` or a raw (N, H, W, 3) array in [0, 1].
    """
    if isinstance(images, ImageSet):
        pixels_of = images.pixels
        n = len(images)
        names = [r.source_path for r in images]
        source = manifest_digest(images) if n else ""
    else:
        arr = np.asarray(images, dtype=np.float32)
        pixels_of = lambda idx: arr[idx]  # noqa: E731
        n = len(arr)
        names = [f"image {i}" for i in range(n)]
        source = ""
    if n == 0:
        raise ValueError("cannot extract features from an empty image set")
    size = (extractor.input_size, extractor.input_size)
    chunks = []
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        batch = np.stack([resize_area(p, size) for p in pixels_of(idx)])
        feats = extractor.embed(batch)
        bad = ~np.all(np.isfinite(feats), axis=1)
        if bad.any():
            raise FloatingPointError(f"feature overflow for {names[idx[int(np.argmax(bad))]]}")
        chunks.append(feats.astype(np.float32))
    return FeatureSet(np.concatenate(chunks), extractor.fingerprint, source, extractor.config())


def cache_features(features: FeatureSet, path: str | Path) -> Path:
    """Write a ``.featcache``: one JSON header line then little-endian float32 rows."""
    payload = np.ascontiguousarray(features.vectors, dtype="<f4").tobytes()
    header = {
        "version": CACHE_VERSION,
        "N": len(features),
        "d": features.dim,
        "fingerprint": features.extractor_fingerprint,
        "extractor": features.extractor_config,
        "source_manifest": features.source_manifest,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return path


def load_features(path: str | Path) -> FeatureSet:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CacheError(f"cache format: no header in {path}")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise CacheError(f"cache format: unreadable header in {path}") from exc
    if header.get("version") != CACHE_VERSION:
        raise CacheError(f"cache format: version {header.get('version')!r}, expected {CACHE_VERSION}")
    fp = header.get("fingerprint")
    if not fp:
        raise CacheError(f"untrusted cache: {path} carries no extractor fingerprint")
    cfg = header.get("extractor") or {}
    if not cfg or fingerprint_of(cfg) != fp:
        raise CacheError(f"untrusted cache: fingerprint does not match extractor config in {path}")
    n, d = int(header["N"]), int(header["d"])
    payload = raw[nl + 1:]
    if len(payload) != 4 * n * d:
        raise CacheError(f"cache format: expected {4 * n * d} payload bytes, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CacheError(f"cache format: payload checksum mismatch in {path}")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return FeatureSet(vectors, fp, header.get("source_manifest", ""), cfg)
