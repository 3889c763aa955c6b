"""Embedding table export and 2D projection for inspection plots.

The interchange CSV is ``record_id,cat_id,entity_id,e0..e{E-1}``.  The
built-in projector is deterministic linear PCA (sign-fixed); any external
reducer (UMAP etc.) can be plugged in as a subprocess that reads the table
CSV on stdin and writes ``record_id,x,y`` on stdout.
"""

from __future__ import annotations

import csv
import shlex
import subprocess
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset

_FLOAT_FMT = "%.10e"


@dataclass
class EmbeddingTable:
    record_ids: list[str]
    cat_ids: list[str]
    entity_ids: list[str]
    vectors: np.ndarray  # (N, E)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.record_ids)
        if not (len(self.cat_ids) == len(self.entity_ids) == n
                and self.vectors.shape[0] == n):
            raise ValueError("table columns disagree on row count")


def write_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    dim = table.vectors.shape[1] if table.vectors.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "cat_id", "entity_id"]
                        + [f"e{i}" for i in range(dim)])
        for rid, cat, ent, vec in zip(table.record_ids, table.cat_ids,
                                      table.entity_ids, table.vectors):
            writer.writerow([rid, cat, ent] + [_FLOAT_FMT % v for v in vec])


def read_embedding_table(path: str | Path) -> EmbeddingTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        record_ids, cat_ids, entity_ids, rows = [], [], [], []
        for row in reader:
            record_ids.append(row[0])
            cat_ids.append(row[1])
            entity_ids.append(row[2])
            rows.append([float(v) for v in row[3:]])
    vectors = np.asarray(rows, dtype=np.float64) if rows \
        else np.zeros((0, dim))
    return EmbeddingTable(record_ids, cat_ids, entity_ids, vectors)


def export_embeddings(checkpoint_path: str | Path, dataset: Dataset,
                      path: str | Path, image_root: str | Path = ".",
                      batch_size: int = 32) -> EmbeddingTable:
    """Embed every record with the F-Stream and write the table CSV."""
    from .inputs import embed_records
    from .network import StreamConfig, load_inference_model

    model, payload = load_inference_model(checkpoint_path)
    stream = StreamConfig(**payload["stream_config"])
    vectors = embed_records(dataset.records, model, stream, Path(image_root),
                            batch_size=batch_size)
    table = EmbeddingTable(
        record_ids=[rec.image_path for rec in dataset.records],
        cat_ids=[rec.cat_id for rec in dataset.records],
        entity_ids=[dataset.entity_of.get(i, "?")
                    for i in range(len(dataset))],
        vectors=vectors,
    )
    if len(dataset) == 0:
        warnings.warn("exporting an empty dataset: header-only file")
    write_embedding_table(table, path)
    return table


def project_2d(table: EmbeddingTable, method: str = "linear-principal",
               projector_command: Optional[str | Sequence[str]] = None
               ) -> list[tuple[str, float, float]]:
    """Reduce the table to (record_id, x, y) rows.

    linear-principal: center, project onto the top-2 principal directions;
    deterministic up to sign, which is fixed by making the largest-magnitude
    loading of each direction positive.  external: pipe the table CSV
    through ``projector_command`` and parse its id,x,y output.
    """
    if method == "external":
        return _project_external(table, projector_command)
    if method != "linear-principal":
        raise ValueError(f"unknown projection method {method!r}")
    if table.vectors.shape[0] < 3:
        raise ValueError("projection needs at least 3 rows")

    centered = table.vectors - table.vectors.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    tol = svals[0] * 1e-12 if svals.size else 0.0
    rank = int(np.sum(svals > tol))
    components = vt[:2].copy()
    if rank < 2:
        warnings.warn("data has fewer than 2 nonzero directions; "
                      "second coordinate padded with zeros")
        components[1:] = 0.0
    for row in components:
        if row.any() and row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    coords = centered @ components.T
    return [(rid, float(x), float(y))
            for rid, (x, y) in zip(table.record_ids, coords)]


def _project_external(table: EmbeddingTable,
                      command: Optional[str | Sequence[str]]
                      ) -> list[tuple[str, float, float]]:
    if not command:
        raise ValueError("external projection requires a projector command")
    argv = shlex.split(command) if isinstance(command, str) else list(command)

    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    dim = table.vectors.shape[1]
    writer.writerow(["record_id", "cat_id", "entity_id"]
                    + [f"e{i}" for i in range(dim)])
    for rid, cat, ent, vec in zip(table.record_ids, table.cat_ids,
                                  table.entity_ids, table.vectors):
        writer.writerow([rid, cat, ent] + [_FLOAT_FMT % v for v in vec])

    proc = subprocess.run(argv, input=buf.getvalue(), capture_output=True,
                          text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"projector command failed ({proc.returncode}): {proc.stderr.strip()}")
    rows = []
    reader = csv.reader(io.StringIO(proc.stdout))
    for row in reader:
        if not row or row[0] in ("record_id", "id"):
            continue
        rows.append((row[0], float(row[1]), float(row[2])))
    return rows


def plot_projection(rows: Sequence[tuple[str, float, float]],
                    table: EmbeddingTable, out_path: str | Path) -> None:
    """Scatter plot: one color per cat, one marker shape per entity."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_id = {rid: (x, y) for rid, x, y in rows}
    cats = sorted(set(table.cat_ids))
    entities = sorted(set(table.entity_ids))
    cmap = plt.colormaps["tab10"]
    markers = ["o", "s", "^", "v", "D", "P", "X", "*", "<", ">", "p", "h"]

    fig, ax = plt.subplots(figsize=(8, 6))
    for entity in entities:
        xs, ys, cat = [], [], None
        for rid, c, e in zip(table.record_ids, table.cat_ids,
                             table.entity_ids):
            if e == entity and rid in by_id:
                x, y = by_id[rid]
                xs.append(x)
                ys.append(y)
                cat = c
        if not xs:
            continue
        ax.scatter(xs, ys,
                   color=cmap(cats.index(cat) % 10),
                   marker=markers[entities.index(entity) % len(markers)],
                   label=entity, s=28, alpha=0.85, edgecolors="none")
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    ax.legend(fontsize=7, ncol=2, markerscale=0.9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
