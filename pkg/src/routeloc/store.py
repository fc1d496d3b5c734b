"""Descriptor store: id-keyed descriptor vectors with file round-tripping.

Binary layout (little-endian): magic ``EMB1``, u32 dim, u32 count, then one
record per descriptor of u32 id followed by dim float32 values.  A CSV
mirror with header ``id,v0,...,v{dim-1}`` is accepted interchangeably (the
loader sniffs the magic bytes).  Binary files quantize to float32; the CSV
writer keeps full float64 precision.
"""
from __future__ import annotations

import csv
import struct
from typing import Sequence

import numpy as np

MAGIC = b"EMB1"


class StoreFormatError(ValueError):
    """Raised when a descriptor store file is malformed."""


class DescriptorStore:
    """Immutable set of descriptors keyed by location id, sorted by id."""

    def __init__(self, ids, vectors):
        ids = np.asarray(ids, dtype=np.int64)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(ids) != len(vectors):
            raise ValueError("need ids (N,) and vectors (N, dim) of matching length")
        if len(ids) == 0:
            raise ValueError("descriptor store cannot be empty")
        if np.any(ids < 0):
            raise ValueError("descriptor ids must be non-negative")
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        if np.any(ids[1:] == ids[:-1]):
            dup = int(ids[np.nonzero(ids[1:] == ids[:-1])[0][0]])
            raise ValueError(f"duplicate descriptor id {dup}")
        self.ids = ids
        self.vectors = vectors[order]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def row_of(self, loc_id: int) -> int:
        r = int(np.searchsorted(self.ids, int(loc_id)))
        if r >= len(self.ids) or self.ids[r] != loc_id:
            raise KeyError(f"no descriptor for id {loc_id}")
        return r

    def rows_of(self, loc_ids) -> np.ndarray:
        ids = np.asarray(loc_ids, dtype=np.int64)
        rows = np.searchsorted(self.ids, ids)
        clipped = np.minimum(rows, len(self.ids) - 1)
        bad = self.ids[clipped] != ids
        if np.any(bad):
            raise KeyError(f"no descriptor for id {int(ids[np.argmax(bad)])}")
        return rows

    def vector(self, loc_id: int) -> np.ndarray:
        return self.vectors[self.row_of(loc_id)]

    def distances_to(self, query) -> np.ndarray:
        """Euclidean distance from every stored descriptor to the query, store order."""
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query shape {q.shape} does not match store dim {self.dim}")
        return np.linalg.norm(self.vectors - q, axis=1)

    def cost_vector(self, query, id_order) -> np.ndarray:
        """Distances to the query, reordered to follow ``id_order``."""
        return self.distances_to(query)[self.rows_of(id_order)]

    # ------------------------------------------------------------------
    # file io
    # ------------------------------------------------------------------

    def save(self, path) -> None:
        """Write binary unless the path ends in .csv."""
        if str(path).endswith(".csv"):
            self._save_csv(path)
        else:
            self._save_binary(path)

    def _save_binary(self, path) -> None:
        rec = np.empty(len(self), dtype=[("id", "<u4"), ("v", "<f4", (self.dim,))])
        if np.any(self.ids > np.iinfo(np.uint32).max):
            raise ValueError("ids exceed the u32 range of the binary format")
        rec["id"] = self.ids
        rec["v"] = self.vectors
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", MAGIC, self.dim, len(self)))
            fh.write(rec.tobytes())

    def _save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id"] + [f"v{i}" for i in range(self.dim)])
            for i, v in zip(self.ids, self.vectors):
                writer.writerow([int(i)] + ["%.17g" % x for x in v])

    @classmethod
    def load(cls, path) -> "DescriptorStore":
        """Load either format, sniffing the binary magic bytes."""
        with open(path, "rb") as fh:
            head = fh.read(4)
        if head == MAGIC:
            return cls._load_binary(path)
        return cls._load_csv(path)

    @classmethod
    def _load_binary(cls, path) -> "DescriptorStore":
        with open(path, "rb") as fh:
            header = fh.read(12)
            if len(header) != 12:
                raise StoreFormatError(f"{path}: truncated header")
            magic, dim, count = struct.unpack("<4sII", header)
            if magic != MAGIC:
                raise StoreFormatError(f"{path}: bad magic {magic!r}")
            if dim == 0:
                raise StoreFormatError(f"{path}: zero descriptor dimension")
            body = fh.read()
        rec_dtype = np.dtype([("id", "<u4"), ("v", "<f4", (dim,))])
        if len(body) != count * rec_dtype.itemsize:
            raise StoreFormatError(
                f"{path}: expected {count} records of {rec_dtype.itemsize} bytes, "
                f"got {len(body)} bytes"
            )
        rec = np.frombuffer(body, dtype=rec_dtype)
        return cls(rec["id"].astype(np.int64), rec["v"].astype(np.float64))

    @classmethod
    def _load_csv(cls, path) -> "DescriptorStore":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise StoreFormatError(f"{path}: empty file") from None
            if not header or header[0] != "id":
                raise StoreFormatError(f"{path}: expected CSV header starting with 'id'")
            dim = len(header) - 1
            ids, vecs = [], []
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != dim + 1:
                    raise StoreFormatError(
                        f"{path}, line {lineno}: expected {dim + 1} fields, got {len(row)}"
                    )
                try:
                    ids.append(int(row[0]))
                    vecs.append([float(x) for x in row[1:]])
                except ValueError as exc:
                    raise StoreFormatError(f"{path}, line {lineno}: {exc}") from None
        if not ids:
            raise StoreFormatError(f"{path}: no descriptor rows")
        return cls(np.array(ids), np.array(vecs))


def build_store(ids: Sequence[int], latents, enc, cfg) -> DescriptorStore:
    """Encode a stack of latents into a store (used for map-side reference sets)."""
    from .embedding import encode_batch

    return DescriptorStore(np.asarray(ids), encode_batch(np.asarray(latents), enc, cfg))
