"""On-disk dataset format, validation, and the synthetic hex-lattice generator.

A dataset directory holds::

    manifest.json    format version, counts, per-slide sizes, processing flags
    spots.tsv        spot_id slide_id array_row array_col pixel_x pixel_y split
    genes.txt        one gene name per line
    counts.tsv       raw integer counts      (header: spot_id + gene names)
    expression.tsv   normalized expression   (same layout, floats in repr form)
    observed.tsv     1 = measured, 0 = dropout/missing

All files are UTF-8, tab-delimited, LF line endings. Matrix rows follow
``spots.tsv`` order and columns follow ``genes.txt`` order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
SPOT_COLUMNS = ("spot_id", "slide_id", "array_row", "array_col", "pixel_x", "pixel_y", "split")


class DatasetError(ValueError):
    """Raised when a dataset violates the format or its invariants."""


class ShapeMismatchError(DatasetError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class SpotRecord:
    spot_id: str
    slide_id: str
    array_row: int
    array_col: int
    pixel_x: float = 0.0
    pixel_y: float = 0.0


@dataclass(eq=False)
class Dataset:
    spots: list[SpotRecord]
    genes: list[str]
    raw_counts: np.ndarray
    expression: np.ndarray
    observed: np.ndarray
    split: dict[str, str]
    normalization_applied: bool = False
    genes_selected: bool = False
    completion: str | None = None
    slide_bounds: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def num_spots(self) -> int:
        return len(self.spots)

    @property
    def g(self) -> int:
        return len(self.genes)

    @property
    def slide_ids(self) -> list[str]:
        seen = {}
        for s in self.spots:
            seen.setdefault(s.slide_id, None)
        return list(seen)

    def spot_slides(self) -> np.ndarray:
        return np.array([s.slide_id for s in self.spots], dtype=object)

    def spots_in_split(self, name: str) -> np.ndarray:
        """Ordinals of spots whose slide is assigned to split ``name``."""
        return np.array(
            [i for i, s in enumerate(self.spots) if self.split[s.slide_id] == name], dtype=np.intp
        )

    def replace(self, **changes) -> "Dataset":
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.spots == other.spots
            and self.genes == other.genes
            and self.split == other.split
            and self.normalization_applied == other.normalization_applied
            and self.genes_selected == other.genes_selected
            and self.completion == other.completion
            and self.slide_bounds == other.slide_bounds
            and _bits_equal(self.raw_counts, other.raw_counts)
            and _bits_equal(self.expression, other.expression)
            and _bits_equal(self.observed, other.observed)
        )


def _bits_equal(a, b) -> bool:
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def validate(ds: Dataset) -> None:
    """Raise :class:`DatasetError` on the first violated invariant."""
    n, g = len(ds.spots), len(ds.genes)
    for name in ("raw_counts", "expression", "observed"):
        arr = getattr(ds, name)
        if arr.shape != (n, g):
            raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected ({n}, {g})")
    if len(set(ds.genes)) != g:
        raise DatasetError("gene names are not unique")
    if ds.raw_counts.dtype.kind not in "iu":
        raise DatasetError("raw_counts must be integers")
    if (ds.raw_counts < 0).any():
        i, j = np.argwhere(ds.raw_counts < 0)[0]
        raise DatasetError(f"negative raw count at spot {ds.spots[i].spot_id}, gene {ds.genes[j]}")
    if ds.observed.dtype != bool:
        raise DatasetError("observed must be boolean")
    if not np.isfinite(ds.expression).all():
        raise DatasetError("expression contains NaN or infinite values")
    if ds.completion is None and (ds.expression[~ds.observed] != 0.0).any():
        raise DatasetError("unobserved entries must hold 0.0 until completion is applied")
    seen_pos, seen_ids = set(), set()
    for s in ds.spots:
        pos = (s.slide_id, s.array_row, s.array_col)
        if pos in seen_pos:
            raise DatasetError(f"duplicate position {pos}")
        seen_pos.add(pos)
        if (s.slide_id, s.spot_id) in seen_ids:
            raise DatasetError(f"duplicate spot_id {s.spot_id} on slide {s.slide_id}")
        seen_ids.add((s.slide_id, s.spot_id))
        if s.array_row < 0 or s.array_col < 0:
            raise DatasetError(f"negative lattice coordinate for spot {s.spot_id}")
        if s.slide_id not in ds.split:
            raise DatasetError(f"slide {s.slide_id} has no split assignment")
        bounds = ds.slide_bounds.get(s.slide_id)
        if bounds is not None and (s.array_row >= bounds[0] or s.array_col >= bounds[1]):
            raise DatasetError(f"spot {s.spot_id} lies outside slide bounds {bounds}")
    for slide, label in ds.split.items():
        if label not in SPLITS:
            raise DatasetError(f"unknown split label {label!r} for slide {slide}")


def manifest(ds: Dataset) -> dict:
    counts: dict[str, int] = {}
    for s in ds.spots:
        counts[s.slide_id] = counts.get(s.slide_id, 0) + 1
    slides = []
    for slide, num in counts.items():
        entry = {"slide_id": slide, "num_spots": num}
        if slide in ds.slide_bounds:
            entry["rows"], entry["cols"] = ds.slide_bounds[slide]
        slides.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "num_spots": ds.num_spots,
        "num_genes": ds.g,
        "slides": slides,
        "normalization_applied": ds.normalization_applied,
        "genes_selected": ds.genes_selected,
        "completion": ds.completion,
    }


def _write_matrix(path, ds, matrix, fmt):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("spot_id\t" + "\t".join(ds.genes) + "\n")
        for spot, row in zip(ds.spots, matrix.tolist()):
            fh.write(spot.spot_id + "\t" + "\t".join(map(fmt, row)) + "\n")


def save_dataset(ds: Dataset, root_path) -> None:
    """Write ``ds`` to ``root_path`` (created if needed). Floats use repr for exact round-trip."""
    validate(ds)
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset directory {root} is not writable")
    with open(root / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest(ds), fh, indent=2)
        fh.write("\n")
    with open(root / "spots.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SPOT_COLUMNS) + "\n")
        for s in ds.spots:
            fh.write(
                f"{s.spot_id}\t{s.slide_id}\t{s.array_row}\t{s.array_col}\t"
                f"{s.pixel_x!r}\t{s.pixel_y!r}\t{ds.split[s.slide_id]}\n"
            )
    with open(root / "genes.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(gene + "\n" for gene in ds.genes))
    _write_matrix(root / "counts.tsv", ds, ds.raw_counts, str)
    _write_matrix(root / "expression.tsv", ds, ds.expression.astype(np.float64), repr)
    _write_matrix(root / "observed.tsv", ds, ds.observed.astype(np.int8), str)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFileError(f"missing dataset file {path}")
    return path


def _read_matrix(path, spot_ids, genes, parse):
    lines = _require(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ShapeMismatchError(f"{path.name} is empty")
    header = lines[0].split("\t")
    if header[1:] != genes:
        raise ShapeMismatchError(f"{path.name} header does not match genes.txt")
    body = lines[1:]
    if len(body) != len(spot_ids):
        raise ShapeMismatchError(
            f"{path.name} has {len(body)} rows but spots.tsv has {len(spot_ids)} spots"
        )
    rows = []
    for k, (line, sid) in enumerate(zip(body, spot_ids)):
        fields = line.split("\t")
        if fields[0] != sid:
            raise ShapeMismatchError(f"{path.name} row {k + 1} is spot {fields[0]!r}, expected {sid!r}")
        if len(fields) - 1 != len(genes):
            raise ShapeMismatchError(f"{path.name} row {k + 1} has {len(fields) - 1} values, expected {len(genes)}")
        rows.append([parse(v) for v in fields[1:]])
    return rows


def load_dataset(root_path) -> Dataset:
    """Read and validate a dataset directory written by :func:`save_dataset`."""
    root = Path(root_path)
    man = json.loads(_require(root / "manifest.json").read_text(encoding="utf-8"))
    if man.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {man.get('format_version')!r}")
    genes = _require(root / "genes.txt").read_text(encoding="utf-8").splitlines()

    spot_lines = _require(root / "spots.tsv").read_text(encoding="utf-8").splitlines()
    if not spot_lines or tuple(spot_lines[0].split("\t")) != SPOT_COLUMNS:
        raise DatasetError(f"spots.tsv header must be {' '.join(SPOT_COLUMNS)}")
    spots, split = [], {}
    for k, line in enumerate(spot_lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(SPOT_COLUMNS):
            raise DatasetError(f"spots.tsv line {k}: expected {len(SPOT_COLUMNS)} fields")
        sid, slide, row, col, px, py, label = fields
        if label not in SPLITS:
            raise DatasetError(f"spots.tsv line {k}: unknown split label {label!r}")
        if split.setdefault(slide, label) != label:
            raise DatasetError(f"slide {slide} assigned to more than one split")
        try:
            spots.append(SpotRecord(sid, slide, int(row), int(col), float(px), float(py)))
        except ValueError as exc:
            raise DatasetError(f"spots.tsv line {k}: {exc}") from None

    ids = [s.spot_id for s in spots]
    counts = np.array(_read_matrix(root / "counts.tsv", ids, genes, int), dtype=np.int64)
    expression = np.array(_read_matrix(root / "expression.tsv", ids, genes, float), dtype=np.float64)
    obs_raw = np.array(_read_matrix(root / "observed.tsv", ids, genes, int), dtype=np.int64)
    if not np.isin(obs_raw, (0, 1)).all():
        raise DatasetError("observed.tsv must contain only 0 and 1")
    shape = (len(spots), len(genes))
    counts = counts.reshape(shape)
    expression = expression.reshape(shape)

    bounds = {}
    man_counts = {}
    for entry in man.get("slides", []):
        man_counts[entry["slide_id"]] = entry["num_spots"]
        if "rows" in entry:
            bounds[entry["slide_id"]] = (int(entry["rows"]), int(entry["cols"]))
    ds = Dataset(
        spots=spots,
        genes=genes,
        raw_counts=counts,
        expression=expression,
        observed=obs_raw.reshape(shape).astype(bool),
        split=split,
        normalization_applied=bool(man.get("normalization_applied", False)),
        genes_selected=bool(man.get("genes_selected", False)),
        completion=man.get("completion"),
        slide_bounds=bounds,
    )
    if man.get("num_spots") != ds.num_spots or man.get("num_genes") != ds.g:
        raise ShapeMismatchError("manifest counts disagree with payload files")
    actual = {e["slide_id"]: e["num_spots"] for e in manifest(ds)["slides"]}
    if man_counts != actual:
        raise ShapeMismatchError("manifest per-slide spot counts disagree with spots.tsv")
    validate(ds)
    return ds


def observed_from_counts(ds: Dataset) -> Dataset:
    """Treat every zero count as missing (for imports that carry no dropout mask)."""
    observed = ds.raw_counts > 0
    expression = np.where(observed, ds.expression, 0.0)
    return ds.replace(observed=observed, expression=expression)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

SIN_COMPONENTS = 4
NUM_PROGRAMS = 4


def lattice_xy(rows: np.ndarray, cols: np.ndarray):
    """Planar positions (unit spot pitch) for odd-r offset coordinates."""
    x = cols + 0.5 * (rows & 1)
    y = rows * (math.sqrt(3) / 2)
    return x, y


def generate_synthetic(num_slides, rows, cols, g, dropout_rate, smoothness_length, seed) -> Dataset:
    """Seeded hex-lattice dataset with smooth per-gene fields and random dropout.

    Each slide carries ``NUM_PROGRAMS`` latent spatial programs, each a sum of
    random low-frequency sinusoids (wavelengths between 1x and 2x
    ``smoothness_length`` spot pitches). Every gene mixes the programs with
    Dirichlet loadings drawn once for the whole dataset, so genes co-vary the
    same way on every slide. Each gene field is rescaled to a nonnegative
    Poisson rate around a per-gene base level and sampled into counts. Entries are then dropped independently with
    probability ``dropout_rate``. Slides are assigned round-robin to
    train/val/test.
    """
    if num_slides < 1 or rows < 1 or cols < 1 or rows * cols < 25:
        raise DatasetError(f"invalid dimensions: slides={num_slides}, rows={rows}, cols={cols}")
    if g < 1:
        raise DatasetError(f"g must be >= 1, got {g}")
    if not 0.0 <= dropout_rate < 1.0:
        raise DatasetError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    if smoothness_length <= 0:
        raise DatasetError(f"smoothness_length must be positive, got {smoothness_length}")

    rng = np.random.default_rng(seed)
    genes = [f"gene{j:03d}" for j in range(g)]
    base = np.exp(rng.uniform(math.log(30.0), math.log(300.0), size=g))
    # shared across slides, so gene-gene structure carries over between them
    loadings = rng.dirichlet(np.full(NUM_PROGRAMS, 0.5), size=g)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    x, y = lattice_xy(rr, cc)

    spots, split, count_blocks, obs_blocks, bounds = [], {}, [], [], {}
    for s in range(num_slides):
        slide = f"slide{s}"
        split[slide] = SPLITS[s % 3] if num_slides >= 3 else SPLITS[s % 2]
        bounds[slide] = (rows, cols)
        k = (NUM_PROGRAMS, SIN_COMPONENTS)
        theta = rng.uniform(0, 2 * math.pi, size=k)
        wavelength = smoothness_length * rng.uniform(1.0, 2.0, size=k)
        phase = rng.uniform(0, 2 * math.pi, size=k)
        amp = rng.uniform(0.5, 1.0, size=k)
        kx = 2 * math.pi * np.cos(theta) / wavelength
        ky = 2 * math.pi * np.sin(theta) / wavelength
        arg = kx[:, :, None] * x[None, None, :] + ky[:, :, None] * y[None, None, :] + phase[:, :, None]
        programs = np.sum(amp[:, :, None] * np.sin(arg), axis=1)  # [programs, spots]
        field_ = loadings @ programs  # [g, spots]
        lo = field_.min(axis=1, keepdims=True)
        hi = field_.max(axis=1, keepdims=True)
        unit = (field_ - lo) / np.where(hi > lo, hi - lo, 1.0)
        rate = base[:, None] * (0.1 + 1.9 * unit)
        counts = rng.poisson(rate).T.astype(np.int64)
        observed = rng.random(counts.shape) >= dropout_rate
        counts[~observed] = 0
        count_blocks.append(counts)
        obs_blocks.append(observed)
        for r, c, px, py in zip(rr.tolist(), cc.tolist(), (x * 100).tolist(), (y * 100).tolist()):
            spots.append(SpotRecord(f"{slide}_r{r}_c{c}", slide, r, c, px, py))

    counts = np.concatenate(count_blocks)
    observed = np.concatenate(obs_blocks)
    return Dataset(
        spots=spots,
        genes=genes,
        raw_counts=counts,
        expression=np.where(observed, counts, 0).astype(np.float64),
        observed=observed,
        split=split,
        slide_bounds=bounds,
    )
