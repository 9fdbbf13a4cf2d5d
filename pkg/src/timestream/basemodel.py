"""Embedding-Pooling-MLP base CTR models (sum-pooling DNN, attentive DIN).

The base models are deliberately time-blind: they read item, category and
profile ids only.  Continuous-time awareness is added on top by the
time-stream module, which perturbs the embeddings these functions consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, ShapeError, Tensor

ITEM_DIM = 18
CATEGORY_DIM = 18
BEHAVIOR_DIM = ITEM_DIM + CATEGORY_DIM  # 36
PROFILE_DIM = 36
MLP_DIMS = (BEHAVIOR_DIM * 3, 200, 80, 1)  # 108 -> 200 -> 80 -> 1
ATTENTION_HIDDEN = 36
PRELU_INIT = 0.25

BASE_KINDS = ("dnn", "din")


@dataclass
class BaseModelConfig:
    kind: str = "dnn"
    mlp_dims: tuple = MLP_DIMS

    def __post_init__(self):
        if self.kind not in BASE_KINDS:
            raise ValueError(f"unknown base model kind {self.kind!r}")
        if self.mlp_dims[0] != BEHAVIOR_DIM * 3:
            raise ValueError(f"mlp input dim must be {BEHAVIOR_DIM * 3}, got {self.mlp_dims[0]}")


@dataclass
class Vocab:
    """Id-to-row maps for the three embedding tables; unseen ids share an OOV row."""

    item_index: dict = field(default_factory=dict)
    category_index: dict = field(default_factory=dict)
    user_index: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples) -> "Vocab":
        v = cls()
        for s in samples:
            v.user_index.setdefault(s.profile_id, len(v.user_index))
            for item, cat, _ in s.behaviors:
                v.item_index.setdefault(item, len(v.item_index))
                v.category_index.setdefault(cat, len(v.category_index))
            v.item_index.setdefault(s.target_item[0], len(v.item_index))
            v.category_index.setdefault(s.target_item[1], len(v.category_index))
        return v

    # OOV row index is one past the known vocabulary
    def item_row(self, item_id) -> int:
        return self.item_index.get(item_id, len(self.item_index))

    def category_row(self, category_id) -> int:
        return self.category_index.get(category_id, len(self.category_index))

    def user_row(self, user_id) -> int:
        return self.user_index.get(user_id, len(self.user_index))


def init_embedding_tables(store: ParameterStore, vocab: Vocab, rng: np.random.Generator, init_scale: float = 0.05):
    store.add("embed.item", rng.normal(scale=init_scale, size=(len(vocab.item_index) + 1, ITEM_DIM)))
    store.add("embed.category", rng.normal(scale=init_scale, size=(len(vocab.category_index) + 1, CATEGORY_DIM)))
    store.add("embed.profile", rng.normal(scale=init_scale, size=(len(vocab.user_index) + 1, PROFILE_DIM)))


def _dense_init(rng, fan_out, fan_in):
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


def init_base_params(store: ParameterStore, cfg: BaseModelConfig, rng: np.random.Generator):
    dims = cfg.mlp_dims
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f"base.mlp.{i}.weight", _dense_init(rng, d_out, d_in))
        store.add(f"base.mlp.{i}.bias", np.zeros(d_out))
        if i < len(dims) - 2:  # hidden layers use PReLU; the output is a sigmoid
            store.add(f"base.mlp.{i}.slope", np.array(PRELU_INIT))
    if cfg.kind == "din":
        att_in = 4 * BEHAVIOR_DIM
        store.add("base.att.hidden.weight", _dense_init(rng, ATTENTION_HIDDEN, att_in))
        store.add("base.att.hidden.bias", np.zeros(ATTENTION_HIDDEN))
        store.add("base.att.hidden.slope", np.array(PRELU_INIT))
        store.add("base.att.out.weight", _dense_init(rng, 1, ATTENTION_HIDDEN))
        store.add("base.att.out.bias", np.zeros(1))


# ---------------------------------------------------------------------------
# embedding lookups


def embed_sample(sample, store: ParameterStore, vocab: Vocab):
    """Embed one sample: behavior matrix (N, 36), target (36,), profile (36,)."""
    item_rows = np.array([vocab.item_row(i) for i, _, _ in sample.behaviors], dtype=np.intp)
    cat_rows = np.array([vocab.category_row(c) for _, c, _ in sample.behaviors], dtype=np.intp)
    behaviors = ad.concat(
        [ad.gather_rows(store["embed.item"], item_rows), ad.gather_rows(store["embed.category"], cat_rows)],
        axis=1,
    )
    target = ad.concat(
        [
            ad.gather_rows(store["embed.item"], np.array([vocab.item_row(sample.target_item[0])]))  # (1, 18)
            ,
            ad.gather_rows(store["embed.category"], np.array([vocab.category_row(sample.target_item[1])])),
        ],
        axis=1,
    )
    target = ad.reshape(target, (BEHAVIOR_DIM,))
    profile = ad.reshape(
        ad.gather_rows(store["embed.profile"], np.array([vocab.user_row(sample.profile_id)])), (PROFILE_DIM,)
    )
    return behaviors, target, profile


# ---------------------------------------------------------------------------
# pooling


def sum_pool(behaviors: Tensor) -> Tensor:
    """Elementwise sum over the behavior axis of an (N, 36) matrix."""
    if behaviors.data.ndim != 2 or behaviors.data.shape[0] == 0:
        raise ShapeError("sum_pool", behaviors.data.shape)
    return ad.tsum(behaviors, axis=0)


def _attention_scores(behaviors: Tensor, target: Tensor, store: ParameterStore) -> Tensor:
    """DIN-style relevance scores: MLP over (e, q, e - q, e*q) per behavior."""
    n = behaviors.data.shape[0]
    query = ad.add(ad.scale(behaviors, 0.0), ad.reshape(target, (1, BEHAVIOR_DIM)))
    feats = ad.concat([behaviors, query, ad.sub(behaviors, query), ad.mul(behaviors, query)], axis=1)
    hidden = ad.prelu(
        ad.add(ad.matmul(feats, _t(store["base.att.hidden.weight"])), store["base.att.hidden.bias"]),
        store["base.att.hidden.slope"],
    )
    scores = ad.add(ad.matmul(hidden, _t(store["base.att.out.weight"])), store["base.att.out.bias"])
    return ad.reshape(scores, (n,))


def attentive_pool(behaviors: Tensor, target: Tensor, store: ParameterStore) -> Tensor:
    """Softmax-weighted sum of behaviors, scored against the target embedding."""
    if behaviors.data.ndim != 2 or behaviors.data.shape[0] == 0:
        raise ShapeError("attentive_pool", behaviors.data.shape)
    weights = ad.softmax(_attention_scores(behaviors, target, store))
    n = behaviors.data.shape[0]
    return ad.tsum(ad.mul(behaviors, ad.reshape(weights, (n, 1))), axis=0)


def attentive_pool_packed(behaviors, targets, seg, batch, store):
    """Per-segment softmax attention over a packed (sum_N, 36) behavior matrix."""
    queries = ad.gather_rows(targets, seg)
    feats = ad.concat([behaviors, queries, ad.sub(behaviors, queries), ad.mul(behaviors, queries)], axis=1)
    hidden = ad.prelu(
        ad.add(ad.matmul(feats, _t(store["base.att.hidden.weight"])), store["base.att.hidden.bias"]),
        store["base.att.hidden.slope"],
    )
    scores = ad.reshape(
        ad.add(ad.matmul(hidden, _t(store["base.att.out.weight"])), store["base.att.out.bias"]),
        (behaviors.data.shape[0],),
    )
    # segment softmax with a detached per-segment max shift for stability
    shift = np.full(batch, -np.inf)
    np.maximum.at(shift, seg, scores.data)
    ex = ad.exp(ad.sub(scores, Tensor(shift[seg])))
    denom = ad.segment_sum(ad.reshape(ex, (-1, 1)), seg, batch)
    weights = ad.div(ex, ad.reshape(ad.gather_rows(denom, seg), (-1,)))
    weighted = ad.mul(behaviors, ad.reshape(weights, (-1, 1)))
    return ad.segment_sum(weighted, seg, batch)


def sum_pool_packed(behaviors, seg, batch):
    return ad.segment_sum(behaviors, seg, batch)


def _t(w: Tensor) -> Tensor:
    return ad.transpose(w)


# ---------------------------------------------------------------------------
# prediction MLP and loss


def mlp_predict(pooled: Tensor, target: Tensor, profile: Tensor, store: ParameterStore) -> Tensor:
    """Concatenate (user, video, profile) features and map to a probability.

    Accepts either single vectors (36,) or batch matrices (B, 36); the
    result is a () scalar or a (B,) vector of probabilities accordingly.
    """
    batched = pooled.data.ndim == 2
    x = ad.concat([pooled, target, profile], axis=1 if batched else 0)
    n_layers = len(MLP_DIMS) - 1
    for i in range(n_layers):
        x = ad.add(ad.matmul(x, _t(store[f"base.mlp.{i}.weight"])), store[f"base.mlp.{i}.bias"])
        if i < n_layers - 1:
            x = ad.prelu(x, store[f"base.mlp.{i}.slope"])
    x = ad.reshape(x, (x.data.shape[0],) if batched else ())
    return ad.sigmoid(x)


PROB_CLAMP = 1e-12


def target_loss(p: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood with probabilities clamped away from {0,1}."""
    y = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, dtype=np.float64))
    p_clamped = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.mul(y, ad.log(p_clamped))
    negp = ad.clip(ad.sub(Tensor(np.ones_like(p.data)), p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    neg = ad.mul(ad.sub(Tensor(np.ones_like(y.data)), y), ad.log(negp))
    total = ad.add(pos, neg)
    if total.data.ndim == 0:
        return ad.neg(total)
    return ad.neg(ad.tmean(total))


def base_forward(sample, store: ParameterStore, vocab: Vocab, kind: str) -> Tensor:
    """Time-blind forward pass of the bare base model for one sample."""
    behaviors, target, profile = embed_sample(sample, store, vocab)
    if kind == "din":
        pooled = attentive_pool(behaviors, target, store)
    else:
        pooled = sum_pool(behaviors)
    return mlp_predict(pooled, target, profile, store)
