"""Speaker-vector corpus format, synthetic corpus generation, and imports.

On-disk corpus layout: a binary vector file (magic ``SVEC``, version u16,
dim u32, count u64, float32 little-endian row-major payload) plus a
sidecar ``<path>.meta.jsonl`` with one JSON record per row, keyed by row
ordinal. Vectors are stored in float32; all computation happens in
float64.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, MetadataError, NumericsError, ShapeError
from .sampler import Pcg64Stream

CORPUS_MAGIC = b"SVEC"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")


@dataclass
class VectorCorpus:
    """In-memory corpus: float32 vector rows plus per-row metadata dicts."""

    dim: int
    vectors: np.ndarray
    meta: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(-1, self.dim)
        if len(self.meta) != self.vectors.shape[0]:
            raise MetadataError(
                f"{self.vectors.shape[0]} rows but {len(self.meta)} metadata records"
            )
        ids = [m["utterance_id"] for m in self.meta]
        if len(set(ids)) != len(ids):
            raise MetadataError("utterance_id values must be unique")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def vectors64(self):
        return self.vectors.astype(np.float64)

    def speaker_labels(self):
        return [m["speaker_label"] for m in self.meta]

    def utterance_ids(self):
        return [m["utterance_id"] for m in self.meta]

    def durations(self):
        """Per-row duration in seconds; raises if any row lacks one."""
        out = []
        for i, m in enumerate(self.meta):
            d = m.get("duration_seconds")
            if d is None:
                raise MetadataError(f"row {i} has no duration_seconds")
            out.append(float(d))
        return np.array(out)

    def by_speaker(self):
        """Ordered mapping speaker_label -> list of row indices."""
        groups = {}
        for i, m in enumerate(self.meta):
            groups.setdefault(m["speaker_label"], []).append(i)
        return dict(sorted(groups.items()))


def _meta_path(path):
    return os.fspath(path) + ".meta.jsonl"


def write_corpus(corpus: VectorCorpus, path) -> None:
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, corpus.dim, len(corpus)))
        fh.write(np.ascontiguousarray(corpus.vectors, dtype="<f4").tobytes())
    with open(_meta_path(path), "w", encoding="utf-8") as fh:
        for i, m in enumerate(corpus.meta):
            fh.write(json.dumps({"row": i, **m}, sort_keys=True) + "\n")


def _read_header(fh, size):
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError("corpus header incomplete", offset=len(head))
    magic, version, dim, count = _HEADER.unpack(head)
    if magic != CORPUS_MAGIC:
        raise FormatError("bad corpus magic", offset=0)
    if version != CORPUS_VERSION:
        raise FormatError(f"unsupported corpus version {version}", offset=4)
    expected = _HEADER.size + 4 * dim * count
    if size != expected:
        raise FormatError(
            f"corpus payload size mismatch: expected {expected} bytes, file has {size}",
            offset=min(size, expected),
        )
    return dim, count


def _read_meta(path, count):
    meta_file = _meta_path(path)
    if not os.path.exists(meta_file):
        return [{"utterance_id": f"row{i:08d}", "speaker_label": "unknown"} for i in range(count)]
    meta = []
    with open(meta_file, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"metadata line {lineno} is not valid JSON: {e}") from e
            if rec.get("row") != len(meta):
                raise FormatError(f"metadata line {lineno} out of order")
            rec.pop("row")
            meta.append(rec)
    if len(meta) != count:
        raise FormatError(
            f"metadata holds {len(meta)} records for {count} vector rows"
        )
    return meta


def read_corpus(path) -> VectorCorpus:
    path = os.fspath(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        dim, count = _read_header(fh, size)
        data = np.fromfile(fh, dtype="<f4", count=dim * count)
    vectors = data.reshape(count, dim)
    return VectorCorpus(dim=dim, vectors=vectors, meta=_read_meta(path, count))


def iter_corpus_rows(path, chunk_rows=1):
    """Stream (row_index, vector, meta) without materializing the corpus."""
    path = os.fspath(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        dim, count = _read_header(fh, size)
        meta = _read_meta(path, count)
        row_bytes = 4 * dim
        for start in range(0, count, chunk_rows):
            n = min(chunk_rows, count - start)
            buf = fh.read(row_bytes * n)
            block = np.frombuffer(buf, dtype="<f4").reshape(n, dim)
            for j in range(n):
                yield start + j, block[j], meta[start + j]


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Isotropic-Gaussian speaker geometry.

    Speaker means are ``shared + between_scale * N(0, I)`` where ``shared``
    is a fixed direction of per-dimension scale ``shared_scale`` (zero by
    default); utterances add ``within_scale * N(0, I)``. A non-zero
    ``shared_scale`` gives every vector a common component, which raises
    cross-speaker cosine the way real embedding spaces do.
    """

    speakers: int
    utterances: int
    dim: int = 512
    between_scale: float = 1.0
    within_scale: float = 1.0
    shared_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.speakers < 1 or self.utterances < 1:
            raise ShapeError("speakers and utterances must be positive")
        if self.between_scale <= 0 or self.within_scale <= 0:
            raise ShapeError("scales must be positive")


def generate_synthetic(spec: SyntheticCorpusSpec) -> VectorCorpus:
    stream = Pcg64Stream(spec.seed)
    shared = spec.shared_scale * stream.substream("shared").normal(spec.dim)
    means = shared + spec.between_scale * stream.substream("speakers").normal(
        (spec.speakers, spec.dim))
    noise_stream = stream.substream("utterances")
    duration_stream = stream.substream("durations")
    rows = np.empty((spec.speakers * spec.utterances, spec.dim), dtype=np.float32)
    meta = []
    r = 0
    for s in range(spec.speakers):
        noise = spec.within_scale * noise_stream.normal((spec.utterances, spec.dim))
        rows[r:r + spec.utterances] = (means[s] + noise).astype(np.float32)
        durations = 2.0 + 13.0 * duration_stream.uniform(spec.utterances)
        for u in range(spec.utterances):
            meta.append({
                "utterance_id": f"spk{s:04d}_utt{u:03d}",
                "speaker_label": f"spk{s:04d}",
                "duration_seconds": round(float(durations[u]), 3),
            })
            r += 1
    return VectorCorpus(dim=spec.dim, vectors=rows, meta=meta)


# ---------------------------------------------------------------------------
# External import: raw float32 matrix + metadata table
# ---------------------------------------------------------------------------

def import_external(vectors_path, dim, metadata_path=None) -> VectorCorpus:
    """Build a corpus from a raw little-endian float32 matrix file.

    ``metadata_path`` may point to a JSONL table (one record per row with
    at least utterance_id and speaker_label); rows default to synthetic
    identifiers when omitted. Non-finite rows are rejected with their
    indices.
    """
    vectors_path = os.fspath(vectors_path)
    size = os.path.getsize(vectors_path)
    row_bytes = 4 * int(dim)
    if dim <= 0 or size % row_bytes != 0:
        raise FormatError(
            f"file size {size} is not a multiple of the {row_bytes}-byte row stride",
            offset=(size // row_bytes) * row_bytes,
        )
    count = size // row_bytes
    data = np.fromfile(vectors_path, dtype="<f4").reshape(count, dim)
    bad = np.where(~np.isfinite(data).all(axis=1))[0]
    if bad.size:
        raise NumericsError(f"non-finite vectors at rows {bad.tolist()[:20]}")
    if metadata_path is None:
        meta = [{"utterance_id": f"row{i:08d}", "speaker_label": f"spk{i:08d}"}
                for i in range(count)]
    else:
        meta = []
        with open(os.fspath(metadata_path), "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    meta.append(json.loads(line))
        for i, rec in enumerate(meta):
            if "utterance_id" not in rec or "speaker_label" not in rec:
                raise MetadataError(f"metadata record {i} lacks required keys")
    return VectorCorpus(dim=dim, vectors=data, meta=meta)
