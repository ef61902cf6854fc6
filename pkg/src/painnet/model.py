"""PainNet: embedding module + relation module sharing one parameter registry."""

from __future__ import annotations

import numpy as np

from .diffcore import ModelParams, NonFiniteError
from .embedding import Embedder
from .loss import wbce_loss
from .relation import RelationModule, softmax


class PainNet:
    def __init__(self, config, n_au: int, rng: np.random.Generator | None = None):
        self.config = config
        self.params = ModelParams()
        self.embedder = Embedder(
            self.params, n_au,
            hidden=config["gru.hidden"],
            operators=config["stats.operators"],
            summarizer=config["embedding.summarizer"],
            dropout=config["dropout.p"],
            bn_momentum=config["bn.momentum"],
            bn_eps=config["bn.eps"],
            hidden2=config["gru2.hidden"],
            rng=rng,
        )
        self.relation = RelationModule(self.params, self.embedder.out_dim,
                                       config["relation.comparison"], rng)

    @property
    def embed_dim(self) -> int:
        return self.embedder.out_dim

    def embed(self, videos) -> np.ndarray:
        """Inference-mode embedding (running batch-norm statistics, no dropout)."""
        vecs, _ = self.embedder.forward(videos, train=False)
        return vecs

    def probs(self, query_vec: np.ndarray, sample_vecs: np.ndarray) -> np.ndarray:
        r, _ = self.relation.forward(query_vec, sample_vecs)
        return softmax(r)

    def train_step(self, videos, queries, rng: np.random.Generator,
                   weighted: bool = True) -> float:
        """Forward + backward over one batch of videos; gradients accumulate.

        ``queries`` is a list of ``(query_index, sample_indices, label)`` into
        ``videos``. All videos share one training-mode batch-norm pass. The
        returned loss (and the gradient) is the mean over the queries.
        """
        V, ecache = self.embedder.forward(videos, train=True, rng=rng)
        dV = np.zeros_like(V)
        total = 0.0
        nq = len(queries)
        for qi, sidx, label in queries:
            sidx = np.asarray(sidx)
            r, rcache = self.relation.forward(V[qi], V[sidx])
            loss, dr = wbce_loss(softmax(r), label, weighted)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss for query {qi} (label {label})")
            total += loss
            dq, dS = self.relation.backward(rcache, dr / nq)
            dV[qi] += dq
            np.add.at(dV, sidx, dS)
        self.embedder.backward(ecache, dV)
        return total / nq
