"""Normalization, Moran's I gene ranking, and adaptive-median pre-completion."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import Dataset, DatasetError
from .hexgrid import offset_table, ring, rings_upto

TPM_SCALE = 1e6
DEFAULT_MAX_RADIUS = 4


class Source(enum.IntEnum):
    OBSERVED = 0
    MEDIAN_LOCAL = 1
    MEDIAN_SLIDE = 2
    MEDIAN_GLOBAL = 3
    MODEL = 4

    @property
    def label(self) -> str:
        return self.name.lower()


class DegenerateStatisticError(ValueError):
    pass


@dataclass(eq=False)
class CompletionProvenance:
    """Per-entry origin of every expression value, aligned with ``Dataset.expression``."""

    source: np.ndarray  # int8 codes from Source

    @classmethod
    def all_observed(cls, shape) -> "CompletionProvenance":
        return cls(np.zeros(shape, dtype=np.int8))

    @property
    def real(self) -> np.ndarray:
        return self.source == Source.OBSERVED

    def counts(self) -> dict[str, int]:
        return {s.label: int(np.sum(self.source == s)) for s in Source}

    def __eq__(self, other):
        return isinstance(other, CompletionProvenance) and np.array_equal(self.source, other.source)


def save_provenance(prov: CompletionProvenance, ds: Dataset, path) -> None:
    labels = [s.label for s in Source]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("spot_id\t" + "\t".join(ds.genes) + "\n")
        for spot, row in zip(ds.spots, prov.source.tolist()):
            fh.write(spot.spot_id + "\t" + "\t".join(labels[c] for c in row) + "\n")


def load_provenance(path, ds: Dataset) -> CompletionProvenance:
    codes = {s.label: int(s) for s in Source}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t")[1:] != ds.genes or len(lines) - 1 != ds.num_spots:
        raise DatasetError(f"{path} does not match the dataset's spots and genes")
    try:
        src = np.array([[codes[v] for v in ln.split("\t")[1:]] for ln in lines[1:]], dtype=np.int8)
    except KeyError as exc:
        raise DatasetError(f"{path}: unknown provenance label {exc}") from None
    prov = CompletionProvenance(src.reshape(ds.num_spots, ds.g))
    if not np.array_equal(prov.real, ds.observed):
        raise DatasetError(f"{path}: provenance 'observed' entries disagree with the observed mask")
    return prov


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def normalize(ds: Dataset, *, drop_empty_spots=False) -> Dataset:
    """log1p of transcripts-per-million over each spot's observed counts."""
    if ds.normalization_applied:
        raise DatasetError("dataset is already normalized; refusing to transform it twice")
    counts = np.where(ds.observed, ds.raw_counts, 0).astype(np.float64)
    library = counts.sum(axis=1)
    empty = library <= 0
    if empty.any():
        if not drop_empty_spots:
            first = ds.spots[int(np.flatnonzero(empty)[0])]
            raise DatasetError(
                f"spot {first.spot_id} (slide {first.slide_id}) has zero library size; "
                f"{int(empty.sum())} such spot(s) in total"
            )
        keep = ~empty
        ds = ds.replace(
            spots=[s for s, k in zip(ds.spots, keep) if k],
            raw_counts=ds.raw_counts[keep],
            expression=ds.expression[keep],
            observed=ds.observed[keep],
        )
        counts, library = counts[keep], library[keep]
    safe = np.where(library > 0, library, 1.0)
    expr = np.log1p(counts / safe[:, None] * TPM_SCALE)
    expr[~ds.observed] = 0.0
    return ds.replace(expression=expr, normalization_applied=True)


# --------------------------------------------------------------------------
# Moran's I
# --------------------------------------------------------------------------


def adjacency_pairs(ds: Dataset) -> np.ndarray:
    """Directed 1-hop neighbor pairs ``[E, 2]`` (each undirected edge appears twice)."""
    table = offset_table(ds, ring(1))
    src, slot = np.nonzero(table >= 0)
    return np.stack([src, table[src, slot]], axis=1)


def morans_i(ds: Dataset, gene_index: int, *, pairs=None) -> float:
    """Moran's I with binary 1-hop weights over observed spots.

    Computed per slide and averaged with weights equal to each slide's count
    of observed spots for the gene. Slides where the statistic is undefined
    are skipped; if none remain, :class:`DegenerateStatisticError` is raised.
    """
    if not 0 <= gene_index < ds.g:
        raise IndexError(f"gene index {gene_index} out of range for g={ds.g}")
    if pairs is None:
        pairs = adjacency_pairs(ds)
    x_all = ds.expression[:, gene_index]
    obs = ds.observed[:, gene_index]
    slides = ds.spot_slides()
    edge_ok = obs[pairs[:, 0]] & obs[pairs[:, 1]]
    total, weight = 0.0, 0
    reasons = []
    for slide in ds.slide_ids:
        members = (slides == slide) & obs
        n = int(members.sum())
        if n < 2:
            reasons.append(f"{slide}: fewer than 2 observed spots")
            continue
        mean = x_all[members].mean()
        z = np.where(members, x_all - mean, 0.0)
        denom = float(np.sum(z[members] ** 2))
        if denom <= 0.0:
            reasons.append(f"{slide}: zero variance")
            continue
        e = pairs[edge_ok & members[pairs[:, 0]]]
        w = len(e)
        if w == 0:
            reasons.append(f"{slide}: no adjacent observed pairs")
            continue
        stat = (n / w) * float(np.sum(z[e[:, 0]] * z[e[:, 1]])) / denom
        total += n * stat
        weight += n
    if weight == 0:
        raise DegenerateStatisticError(
            f"Moran's I undefined for gene {ds.genes[gene_index]}: " + "; ".join(reasons)
        )
    return total / weight


@dataclass(frozen=True)
class MoranScore:
    gene: str
    i_statistic: float
    rank: int


def rank_genes(ds: Dataset) -> list[MoranScore]:
    """All genes by descending Moran's I (ties by name); undefined scores rank last as NaN."""
    pairs = adjacency_pairs(ds)
    scored = []
    for j, gene in enumerate(ds.genes):
        try:
            value = morans_i(ds, j, pairs=pairs)
        except DegenerateStatisticError:
            value = math.nan
        scored.append((gene, value))
    scored.sort(key=lambda gv: (math.isnan(gv[1]), -gv[1] if not math.isnan(gv[1]) else 0.0, gv[0]))
    return [MoranScore(gene, value, rank) for rank, (gene, value) in enumerate(scored, start=1)]


def write_moran_tsv(scores: list[MoranScore], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("gene\tI\n")
        for s in scores:
            fh.write(f"{s.gene}\t{s.i_statistic!r}\n")


def select_genes(ds: Dataset, k: int, *, scores=None) -> Dataset:
    """Keep the ``k`` genes with the highest Moran's I, in descending order."""
    if not ds.normalization_applied:
        raise DatasetError("normalize the dataset before selecting genes")
    if not 1 <= k <= ds.g:
        raise DatasetError(f"k={k} must be between 1 and g={ds.g}")
    if scores is None:
        scores = rank_genes(ds)
    rankable = [s for s in scores if not math.isnan(s.i_statistic)]
    if len(rankable) < k:
        raise DatasetError(f"only {len(rankable)} genes have a defined Moran's I; cannot select {k}")
    pos = {gene: j for j, gene in enumerate(ds.genes)}
    cols = [pos[s.gene] for s in rankable[:k]]
    return ds.replace(
        genes=[ds.genes[c] for c in cols],
        raw_counts=ds.raw_counts[:, cols],
        expression=ds.expression[:, cols],
        observed=ds.observed[:, cols],
        genes_selected=True,
    )


# --------------------------------------------------------------------------
# adaptive median completion
# --------------------------------------------------------------------------


def median_complete(ds: Dataset, max_radius_hops: int = DEFAULT_MAX_RADIUS):
    """Fill every unobserved entry with a neighborhood, slide or global median.

    For a missing (spot, gene), the median of observed values of that gene
    within hop radius r is used for the smallest r in 1..max_radius_hops that
    contains any; otherwise the slide median of the gene; otherwise its median
    over all slides; otherwise 0.0.

    Returns the completed dataset and its :class:`CompletionProvenance`.
    """
    if max_radius_hops < 1:
        raise ValueError(f"max_radius_hops must be >= 1, got {max_radius_hops}")
    if not ds.normalization_applied:
        raise DatasetError("median completion expects a normalized dataset")
    offsets = rings_upto(max_radius_hops)
    disc_size = [3 * r * (r + 1) for r in range(1, max_radius_hops + 1)]
    table = offset_table(ds, offsets)
    absent = table < 0
    safe_table = np.where(absent, 0, table)

    expr = ds.expression.copy()
    source = np.where(ds.observed, Source.OBSERVED, Source.MEDIAN_GLOBAL).astype(np.int8)
    slides = ds.spot_slides()
    slide_masks = {s: slides == s for s in ds.slide_ids}

    for j in range(ds.g):
        obs = ds.observed[:, j]
        missing = np.flatnonzero(~obs)
        if missing.size == 0:
            continue
        vals = np.where(obs, ds.expression[:, j], np.nan)[safe_table[missing]]
        vals[absent[missing]] = np.nan
        todo = np.ones(missing.size, dtype=bool)
        for size in disc_size:
            sub = vals[todo, :size]
            hit = ~np.isnan(sub).all(axis=1)
            if hit.any():
                rows = np.flatnonzero(todo)[hit]
                expr[missing[rows], j] = np.nanmedian(sub[hit], axis=1)
                source[missing[rows], j] = Source.MEDIAN_LOCAL
                todo[rows] = False
            if not todo.any():
                break
        if todo.any():
            global_vals = ds.expression[obs, j]
            global_med = float(np.median(global_vals)) if global_vals.size else 0.0
            slide_med = {}
            for slide, members in slide_masks.items():
                on_slide = members & obs
                if on_slide.any():
                    slide_med[slide] = float(np.median(ds.expression[on_slide, j]))
            for spot in missing[todo]:
                med = slide_med.get(slides[spot])
                if med is not None:
                    expr[spot, j] = med
                    source[spot, j] = Source.MEDIAN_SLIDE
                else:
                    expr[spot, j] = global_med
    return ds.replace(expression=expr, completion="median"), CompletionProvenance(source)
