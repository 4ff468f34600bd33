"""Shared front-end: pre-processor, auxiliary processor, triplet batches.

The pre-processor turns a sampled identity vector into the speaker-specific
half of the generator input; the auxiliary processor squashes an arbitrary
utterance vector into the other half, exposing taps after its first two
blocks for the speaker-information probe. Training samples are triplets
(identity index, per-speaker mean target, disturbing utterance from a
different speaker).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import VectorCorpus
from .errors import CorpusError, ShapeError
from .nn import BatchNorm, Dense, Network, Relu
from .sampler import Pcg64Stream

WIDTH = 512


def build_preprocessor(dim=WIDTH) -> Network:
    """Two fully connected layers, each followed by ReLU."""
    return Network([Dense.create(dim, dim), Relu(), Dense.create(dim, dim), Relu()])


class AuxiliaryProcessor:
    """Three Dense->ReLU->BatchNorm blocks plus an output Dense layer.

    ``forward_taps`` returns the activations after block 1, block 2, and
    the output layer; the last tap is the value concatenated downstream.
    """

    _TAP1 = 3
    _TAP2 = 6

    def __init__(self, net: Network):
        if len(net.layers) != 10:
            raise ShapeError("auxiliary processor expects 3 blocks + output dense")
        self.net = net

    @classmethod
    def create(cls, dim=WIDTH) -> "AuxiliaryProcessor":
        layers = []
        for _ in range(3):
            layers += [Dense.create(dim, dim), Relu(), BatchNorm(dim)]
        layers.append(Dense.create(dim, dim))
        return cls(Network(layers))

    def forward(self, x, train=False):
        return self.net.forward(x, train)

    def forward_taps(self, x, train=False):
        """Returns ((phi1, phi2, phi), caches)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        caches = []
        taps = {}
        h = x
        for i, layer in enumerate(self.net.layers):
            h, c = layer.forward(h, train)
            caches.append(c)
            if i + 1 == self._TAP1:
                taps["phi1"] = h
            elif i + 1 == self._TAP2:
                taps["phi2"] = h
        phi1, phi2, phi = taps["phi1"], taps["phi2"], h
        if squeeze:
            phi1, phi2, phi = phi1[0], phi2[0], phi[0]
        return (phi1, phi2, phi), caches


def concat_halves(u, phi):
    """[u; phi] along the feature axis; both halves must share width."""
    u = np.asarray(u, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if u.shape != phi.shape:
        raise ShapeError(f"halves disagree: {u.shape} vs {phi.shape}")
    return np.concatenate([u, phi], axis=-1)


def split_halves(z):
    z = np.asarray(z, dtype=np.float64)
    width = z.shape[-1]
    if width % 2 != 0:
        raise ShapeError(f"cannot split odd width {width}")
    half = width // 2
    return z[..., :half], z[..., half:]


def speaker_identity_assignment(labels) -> dict:
    """Sequential identity indices 0..S-1 by sorted speaker label."""
    labels = list(labels)
    if len(set(labels)) != len(labels):
        raise CorpusError("duplicate speaker labels in assignment input")
    return {label: i for i, label in enumerate(sorted(labels))}


class TrainingCorpus:
    """Cached per-speaker view of a corpus: means, row groups, assignment."""

    def __init__(self, corpus: VectorCorpus):
        groups = corpus.by_speaker()
        if not groups:
            raise CorpusError("corpus has no speakers")
        self.dim = corpus.dim
        self.labels = list(groups.keys())
        self.assignment = speaker_identity_assignment(self.labels)
        vectors = corpus.vectors64
        self.vectors = vectors
        self.row_speaker = np.empty(len(corpus), dtype=np.int64)
        self.rows_of = []
        means = np.empty((len(self.labels), corpus.dim))
        for i, label in enumerate(self.labels):
            rows = np.array(groups[label], dtype=np.int64)
            self.rows_of.append(rows)
            self.row_speaker[rows] = i
            means[i] = vectors[rows].mean(axis=0)
        self.means = means

    @property
    def n_speakers(self):
        return len(self.labels)

    def mean_of(self, label):
        return self.means[self.labels.index(label)]


@dataclass
class TripletBatch:
    identity_indices: np.ndarray   # (n,) int64
    targets: np.ndarray            # (n, dim) per-speaker means
    aux: np.ndarray                # (n, dim) disturbing utterance vectors
    target_speakers: list
    aux_speakers: list

    def __len__(self):
        return self.identity_indices.shape[0]


def build_batch(tc: TrainingCorpus, n_id=16, n_aux=16, rng: Pcg64Stream = None) -> TripletBatch:
    """n_id distinct speakers x n_aux foreign utterances each.

    Auxiliary utterances are drawn uniformly without replacement (per
    speaker, within the batch) from all rows belonging to other speakers.
    """
    if rng is None:
        rng = Pcg64Stream(0)
    if tc.n_speakers <= n_id:
        raise CorpusError(
            f"corpus has {tc.n_speakers} speakers; batches need more than {n_id}"
        )
    chosen = rng.choice(tc.n_speakers, n_id)
    all_rows = np.arange(tc.vectors.shape[0])
    idxs, targets, aux, t_labels, a_labels = [], [], [], [], []
    for s in chosen:
        s = int(s)
        pool = all_rows[tc.row_speaker != s]
        if pool.size < n_aux:
            raise CorpusError(
                f"speaker {tc.labels[s]} leaves only {pool.size} foreign utterances"
            )
        picked = pool[rng.choice(pool.size, n_aux)]
        for row in picked:
            idxs.append(tc.assignment[tc.labels[s]])
            targets.append(tc.means[s])
            aux.append(tc.vectors[row])
            t_labels.append(tc.labels[s])
            a_labels.append(tc.labels[tc.row_speaker[row]])
    return TripletBatch(
        identity_indices=np.array(idxs, dtype=np.int64),
        targets=np.array(targets),
        aux=np.array(aux),
        target_speakers=t_labels,
        aux_speakers=a_labels,
    )
