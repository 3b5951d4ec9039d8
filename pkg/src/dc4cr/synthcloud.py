"""Procedural (clean, cloudy) image pairs and the JSON-lines corpus manifest.

Terrain and clouds are fractal value noise: a random lattice, bilinearly
interpolated, summed over octaves with halving amplitude. Thin and thick
clouds are defined by their alpha statistics:

* thin:  max alpha <= 0.6, mean alpha in [0.15, 0.35]
* thick: alpha >= 0.95 on at least 20% of pixels, feathered edges
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .imagery import Image, load_image, save_image

MANIFEST_VERSION = 1
CLOUD_TYPES = ("thin", "thick")
TRAIN_FRACTION = 0.8

# height -> colour stops (water, shore, lowland green, forest, bare rock)
_PALETTE_STOPS = np.array([0.0, 0.30, 0.36, 0.55, 0.78, 1.0])
_PALETTE_RGB = np.array(
    [
        [0.08, 0.16, 0.38],
        [0.18, 0.34, 0.55],
        [0.62, 0.56, 0.40],
        [0.30, 0.52, 0.22],
        [0.16, 0.36, 0.14],
        [0.50, 0.40, 0.30],
    ]
)


def _check_size(size: int) -> None:
    if not 16 <= size <= 512:
        raise ValueError(f"size must be in [16, 512], got {size}")


def value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """One octave: ``cells`` x ``cells`` lattice bilinearly interpolated to size x size."""
    lattice = rng.random((cells + 1, cells + 1))
    coords = np.arange(size) * (cells / size)
    i0 = np.floor(coords).astype(int)
    frac = coords - i0
    rows = lattice[i0] * (1.0 - frac)[:, None] + lattice[i0 + 1] * frac[:, None]
    return rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def fractal_noise(
    rng: np.random.Generator,
    size: int,
    octaves: int = 4,
    persistence: float = 0.5,
    base_cells: int = 4,
) -> np.ndarray:
    """Octave sum normalised to [0, 1]."""
    total = np.zeros((size, size))
    amp = 1.0
    for octave in range(octaves):
        total += amp * value_noise(rng, size, base_cells * 2**octave)
        amp *= persistence
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def gen_terrain(seed: int, size: int) -> Image:
    _check_size(size)
    rng = np.random.default_rng([seed, 0x7E44])
    height = fractal_noise(rng, size, octaves=4, persistence=0.5, base_cells=3)
    rgb = np.stack([np.interp(height, _PALETTE_STOPS, _PALETTE_RGB[:, c]) for c in range(3)], axis=-1)
    grain = fractal_noise(rng, size, octaves=2, persistence=0.5, base_cells=size // 4)
    rgb = rgb * (0.9 + 0.2 * grain[..., None])
    return Image(np.clip(rgb, 0.0, 1.0))


def _thin_alpha(noise: np.ndarray, target_mean: float) -> np.ndarray:
    # 0.6 * noise**p with p bisected so the mean hits target_mean
    lo, hi = 0.05, 20.0
    for _ in range(60):
        p = 0.5 * (lo + hi)
        if (0.6 * noise**p).mean() > target_mean:
            lo = p
        else:
            hi = p
    return 0.6 * noise ** (0.5 * (lo + hi))


def _thick_alpha(noise: np.ndarray, coverage: float, feather: float = 0.15) -> np.ndarray:
    core = np.quantile(noise, 1.0 - coverage)
    return np.clip((noise - (core - feather)) / feather, 0.0, 1.0)


def gen_cloud(seed: int, size: int, cloud_type: str) -> tuple:
    """Return ``(alpha, colour)``: an HxW opacity map and a near-white cloud Image."""
    _check_size(size)
    if cloud_type not in CLOUD_TYPES:
        raise ValueError(f"cloud_type must be one of {CLOUD_TYPES}, got {cloud_type!r}")
    rng = np.random.default_rng([seed, 0xC10D])
    noise = fractal_noise(rng, size, octaves=4, persistence=0.5, base_cells=2)
    if cloud_type == "thin":
        alpha = _thin_alpha(noise, target_mean=rng.uniform(0.18, 0.32))
    else:
        alpha = _thick_alpha(noise, coverage=rng.uniform(0.25, 0.5))
    gray = 0.90 + 0.08 * fractal_noise(rng, size, octaves=3, base_cells=4)
    colour = np.stack([gray, gray, np.minimum(gray + 0.02, 1.0)], axis=-1)
    return alpha, Image(colour)


def composite(clean: Image, alpha: np.ndarray, cloud_color: Image) -> Image:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != clean.shape[:2] or cloud_color.shape != clean.shape:
        raise ValueError(
            f"composite: dimension mismatch clean={clean.shape} alpha={alpha.shape} cloud={cloud_color.shape}"
        )
    a = alpha[..., None]
    return Image((1.0 - a) * clean.pixels + a * cloud_color.pixels)


# ---------------------------------------------------------------- manifest

@dataclass
class SamplePair:
    id: str
    clean_path: str
    cloudy_path: str
    cloud_type: str
    split: str = "train"
    score: Optional[float] = None
    group: Optional[int] = None

    def to_json(self, root: Path) -> dict:
        row = {
            "id": self.id,
            "clean": os.path.relpath(self.clean_path, root),
            "cloudy": os.path.relpath(self.cloudy_path, root),
            "cloud_type": self.cloud_type,
            "split": self.split,
        }
        if self.score is not None:
            row["score"] = self.score
        if self.group is not None:
            row["group"] = self.group
        return row

    def load(self) -> tuple:
        """Return ``(cloudy, clean)`` images."""
        cloudy, clean = load_image(self.cloudy_path), load_image(self.clean_path)
        if cloudy.shape != clean.shape:
            raise ValueError(f"pair {self.id}: cloudy {cloudy.shape} vs clean {clean.shape}")
        return cloudy, clean


@dataclass
class CorpusManifest:
    entries: list
    root: Path
    version: int = MANIFEST_VERSION
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def by_id(self) -> dict:
        return {e.id: e for e in self.entries}

    def validate(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")
        for e in self.entries:
            if e.cloud_type not in CLOUD_TYPES:
                raise ValueError(f"{e.id}: bad cloud_type {e.cloud_type!r}")
            if e.split not in ("train", "test"):
                raise ValueError(f"{e.id}: bad split {e.split!r}")
            if e.group is not None and e.split != "train":
                raise ValueError(f"{e.id}: test entries must not carry a group")


MANIFEST_KEYS = {"id", "clean", "cloudy", "cloud_type", "split"}
OPTIONAL_KEYS = {"score", "group"}


def parse_manifest_line(line: str) -> dict:
    row = json.loads(line)
    if not isinstance(row, dict):
        raise ValueError("manifest line is not a JSON object")
    missing = MANIFEST_KEYS - row.keys()
    extra = row.keys() - MANIFEST_KEYS - OPTIONAL_KEYS
    if missing or extra:
        raise ValueError(f"manifest row keys: missing {sorted(missing)}, unexpected {sorted(extra)}")
    if row["cloud_type"] not in CLOUD_TYPES or row["split"] not in ("train", "test"):
        raise ValueError(f"manifest row {row['id']}: bad cloud_type/split")
    if "group" in row and not (isinstance(row["group"], int) and row["group"] >= 1):
        raise ValueError(f"manifest row {row['id']}: group must be a positive int")
    return row


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    root = path.parent
    entries = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = parse_manifest_line(line)
            except (ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
            entries.append(
                SamplePair(
                    id=row["id"],
                    clean_path=str(root / row["clean"]),
                    cloudy_path=str(root / row["cloudy"]),
                    cloud_type=row["cloud_type"],
                    split=row["split"],
                    score=row.get("score"),
                    group=row.get("group"),
                )
            )
    meta_path = root / "corpus.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    manifest = CorpusManifest(entries, root, meta.get("version", MANIFEST_VERSION), meta.get("seed"), meta)
    manifest.validate()
    return manifest


def write_manifest(manifest: CorpusManifest, path) -> None:
    path = Path(path)
    manifest.validate()
    lines = [json.dumps(e.to_json(path.parent)) for e in sorted(manifest.entries, key=lambda e: e.id)]
    path.write_text("\n".join(lines) + "\n")


def _split_labels(n: int, rng: np.random.Generator) -> list:
    n_train = int(round(TRAIN_FRACTION * n))
    order = rng.permutation(n)
    labels = ["test"] * n
    for i in order[:n_train]:
        labels[i] = "train"
    return labels


def gen_corpus(seed: int, n: int, size: int, thin_fraction: float, out_dir, force: bool = False) -> CorpusManifest:
    """Write ``n`` pairs under ``out_dir`` plus ``manifest.jsonl`` and ``corpus.json``."""
    if n < 10:
        raise ValueError("n must be >= 10")
    if not 0.0 <= thin_fraction <= 1.0:
        raise ValueError("thin_fraction must be in [0, 1]")
    _check_size(size)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use force to overwrite)")
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "cloudy").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([seed, 0x5E1])
    n_thin = int(round(n * thin_fraction))
    types = ["thin"] * n_thin + ["thick"] * (n - n_thin)
    types = [types[i] for i in rng.permutation(n)]
    splits = _split_labels(n, rng)

    entries = []
    for i in range(n):
        pid = f"{i:05d}"
        pair_seed = seed * 100_003 + i
        clean = gen_terrain(pair_seed, size)
        alpha, colour = gen_cloud(pair_seed, size, types[i])
        cloudy = composite(clean, alpha, colour)
        clean_path, cloudy_path = out / "clean" / f"{pid}.png", out / "cloudy" / f"{pid}.png"
        save_image(clean, clean_path)
        save_image(cloudy, cloudy_path)
        entries.append(SamplePair(pid, str(clean_path), str(cloudy_path), types[i], splits[i]))

    meta = {"version": MANIFEST_VERSION, "seed": seed, "n": n, "size": size, "thin_fraction": thin_fraction}
    (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    manifest = CorpusManifest(entries, out, MANIFEST_VERSION, seed, meta)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def build_manifest(clean_dir, cloudy_dir, cloud_type: str, out_path, seed: int = 0) -> CorpusManifest:
    """Pair same-named files from two folders (RICE-style layout) into a manifest."""
    if cloud_type not in CLOUD_TYPES:
        raise ValueError(f"cloud_type must be one of {CLOUD_TYPES}")
    suffixes = {".png", ".ppm"}
    clean = {p.stem: p for p in Path(clean_dir).iterdir() if p.suffix.lower() in suffixes}
    cloudy = {p.stem: p for p in Path(cloudy_dir).iterdir() if p.suffix.lower() in suffixes}
    names = sorted(clean.keys() & cloudy.keys())
    if not names:
        raise ValueError("no same-named image pairs found")
    splits = _split_labels(len(names), np.random.default_rng([seed, 0x5E1]))
    entries = [
        SamplePair(name, str(clean[name].resolve()), str(cloudy[name].resolve()), cloud_type, split)
        for name, split in zip(names, splits)
    ]
    out_path = Path(out_path)
    manifest = CorpusManifest(entries, out_path.parent.resolve(), MANIFEST_VERSION, seed)
    write_manifest(manifest, out_path)
    return manifest


def with_annotations(manifest: CorpusManifest, scores: dict, groups: dict) -> CorpusManifest:
    entries = [
        replace(e, score=scores.get(e.id), group=groups.get(e.id)) if e.split == "train" else replace(e, score=None, group=None)
        for e in manifest.entries
    ]
    return replace(manifest, entries=entries)
