"""The time-stream module: latent interest trajectories fused into a base model.

A profile embedding is encoded to an initial latent state, an ODE carries
that state through every behavior timestamp plus the prediction time, and
a two-layer decoder maps each latent state back to embedding space where
it is added onto the raw embeddings.  With the encoder and the decoder
output layer zeroed (safe start) the whole module is an exact no-op, so a
wrapped model starts out bitwise-identical to its base.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import basemodel as bm
from .autodiff import ParameterStore, ShapeError, Tensor
from .data import DataError, Sample
from .ode import (
    LATENT_DIM,
    ComplexDynamics,
    SimpleDynamics,
    SolverConfig,
    SolverError,
    make_solve_plan,
    solve_batch,
    solve_trajectory,
)

DECODER_HIDDEN = 72
GUIDE_DIM = 18
DYNAMICS_KINDS = ("none", "simple", "complex")
GUIDE_MODES = ("bpr", "as_written", "off")
GUIDE_DOT_FLOOR = 1e-6
SIGMOID_FLOOR = 1e-12


@dataclass
class ModelConfig:
    base_kind: str = "dnn"
    dynamics: str = "none"
    solver: SolverConfig = field(default_factory=SolverConfig)
    guide_weight: float = 0.5
    guide_mode: str = "bpr"
    adaptive_time: bool = True

    def __post_init__(self):
        if self.dynamics not in DYNAMICS_KINDS:
            raise ValueError(f"unknown dynamics kind {self.dynamics!r}")
        if self.guide_mode not in GUIDE_MODES:
            raise ValueError(f"unknown guide mode {self.guide_mode!r}")
        bm.BaseModelConfig(kind=self.base_kind)  # validates the base kind


def init_timestream_params(store: ParameterStore, dynamics: str, rng: np.random.Generator):
    d = LATENT_DIM
    store.add("ts.encoder.weight", rng.normal(scale=np.sqrt(1.0 / d), size=(d, d)))
    store.add("ts.decoder.0.weight", rng.normal(scale=np.sqrt(2.0 / d), size=(DECODER_HIDDEN, d)))
    store.add("ts.decoder.0.bias", np.zeros(DECODER_HIDDEN))
    store.add("ts.decoder.0.slope", np.array(bm.PRELU_INIT))
    store.add("ts.decoder.1.weight", rng.normal(scale=np.sqrt(2.0 / DECODER_HIDDEN), size=(d, DECODER_HIDDEN)))
    store.add("ts.decoder.1.bias", np.zeros(d))
    store.add("ts.guide.weight", rng.normal(scale=np.sqrt(2.0 / d), size=(GUIDE_DIM, d)))
    store.add("ts.guide.bias", np.zeros(GUIDE_DIM))
    store.add("ts.guide.slope", np.array(bm.PRELU_INIT))
    if dynamics == "simple":
        store.add("dyn.alpha", rng.normal(scale=0.1, size=d))
    elif dynamics == "complex":
        store.add("dyn.w1", rng.normal(scale=np.sqrt(1.0 / d), size=(d, d)))
        store.add("dyn.b1", np.zeros(d))
        store.add("dyn.w2", rng.normal(scale=np.sqrt(1.0 / d), size=(d, d)))
        store.add("dyn.b2", np.zeros(d))


def encode_initial(profile: Tensor, store: ParameterStore) -> Tensor:
    """Linear map (no bias) from profile embedding to the latent space.

    Accepts a (36,) vector or a (B, 36) batch.
    """
    g = store["ts.encoder.weight"]
    if profile.data.ndim == 1:
        return ad.matmul(g, profile)
    return ad.matmul(profile, ad.transpose(g))


def decode(z: Tensor, store: ParameterStore) -> Tensor:
    """Two-layer decoder from latent space back to embedding space."""
    hidden = ad.prelu(
        ad.add(ad.matmul(z, ad.transpose(store["ts.decoder.0.weight"])), store["ts.decoder.0.bias"]),
        store["ts.decoder.0.slope"],
    )
    return ad.add(ad.matmul(hidden, ad.transpose(store["ts.decoder.1.weight"])), store["ts.decoder.1.bias"])


def fuse(e: Tensor, decoded: Tensor) -> Tensor:
    """Elementwise addition; the adjustment and the raw feature weigh equally."""
    if e.data.shape != decoded.data.shape:
        raise ShapeError("fuse", e.data.shape, decoded.data.shape)
    return ad.add(e, decoded)


def _guide_branch(x: Tensor, store: ParameterStore) -> Tensor:
    return ad.prelu(
        ad.add(ad.matmul(x, ad.transpose(store["ts.guide.weight"])), store["ts.guide.bias"]),
        store["ts.guide.slope"],
    )


def _guide_terms(decoded: Tensor, next_embeds: Tensor, neg_embeds: Tensor, store: ParameterStore, mode: str) -> Tensor:
    """Per-position guide values; lower is better for the bpr surrogate."""
    v = _guide_branch(decoded, store)
    p = _guide_branch(next_embeds, store)
    n = _guide_branch(neg_embeds, store)
    vp = ad.tsum(ad.mul(v, p), axis=1)
    vn = ad.tsum(ad.mul(v, n), axis=1)
    if mode == "bpr":
        s = ad.sigmoid(ad.sub(vp, vn))
        return ad.neg(ad.log(ad.clip(s, SIGMOID_FLOOR, 1.0)))
    if mode == "as_written":
        log_ratio = ad.sub(
            ad.log(ad.clip(vp, GUIDE_DOT_FLOOR, np.inf)),
            ad.log(ad.clip(vn, GUIDE_DOT_FLOOR, np.inf)),
        )
        return ad.neg(ad.sub(ad.add(vp, vn), log_ratio))
    raise ValueError(f"unknown guide mode {mode!r}")


def guide_loss(decoded: Tensor, next_embeds: Tensor, neg_embeds: Tensor, store: ParameterStore, mode: str = "bpr") -> Tensor:
    """Average guide value over one sample's supervised positions.

    ``decoded`` holds the decoded latent states at behavior times 1..N-1,
    ``next_embeds`` the raw behavior embeddings 2..N, ``neg_embeds`` one
    sampled negative embedding per position.  Zero positions contribute 0.
    """
    if decoded.data.shape[0] == 0:
        return Tensor(0.0)
    if not (decoded.data.shape == next_embeds.data.shape == neg_embeds.data.shape):
        raise ShapeError("guide_loss", decoded.data.shape, next_embeds.data.shape, neg_embeds.data.shape)
    return ad.tmean(_guide_terms(decoded, next_embeds, neg_embeds, store, mode))


def total_loss(target: Tensor, guide: Tensor, guide_weight: float = 0.5) -> Tensor:
    return ad.add(target, ad.scale(guide, guide_weight))


def guide_pool_from_samples(samples) -> list:
    """Item/category pairs seen in the data, the candidate set for guide negatives."""
    seen: dict[str, str] = {}
    for s in samples:
        for item, cat, _ in s.behaviors:
            seen.setdefault(item, cat)
        seen.setdefault(s.target_item[0], s.target_item[1])
    return sorted(seen.items())


def draw_guide_negatives(next_item_ids, pool, rng) -> list:
    """One uniform (item, category) per position, excluding the true next item.

    Collisions with the excluded item are redrawn, which keeps the draw
    uniform over the remaining pool.
    """
    if not pool:
        raise DataError("guide negative pool is empty")
    pool_ids = np.array([item for item, _ in pool])
    exclude = np.asarray(list(next_item_ids))
    idx = rng.integers(len(pool), size=exclude.size)
    colliding = pool_ids[idx] == exclude
    for _ in range(1000):
        if not colliding.any():
            break
        idx[colliding] = rng.integers(len(pool), size=int(colliding.sum()))
        colliding = pool_ids[idx] == exclude
    else:
        raise DataError("guide negative pool contains only the excluded item")
    return [pool[k] for k in idx]


# ---------------------------------------------------------------------------
# the wrapped model


@dataclass
class BatchOutput:
    p: Tensor  # (B,) probabilities
    target: Tensor  # scalar
    guide: Tensor  # scalar
    total: Tensor  # scalar


class TimeStreamModel:
    """A base CTR model plus (optionally) the time-stream enhancement."""

    _PACK_CACHE_LIMIT = 400_000

    def __init__(self, cfg: ModelConfig, vocab: bm.Vocab, store: ParameterStore):
        self.cfg = cfg
        self.vocab = vocab
        self.store = store
        # per-sample packed indices and solve plans, reused across epochs
        self._pack_cache: dict = {}
        self._pool_cache: dict = {}

    @classmethod
    def build(cls, cfg: ModelConfig, vocab: bm.Vocab, seed: int = 0) -> "TimeStreamModel":
        store = ParameterStore()
        rng = np.random.default_rng(seed)
        bm.init_embedding_tables(store, vocab, rng)
        bm.init_base_params(store, bm.BaseModelConfig(kind=cfg.base_kind), rng)
        if cfg.dynamics != "none":
            init_timestream_params(store, cfg.dynamics, rng)
        return cls(cfg, vocab, store)

    def dynamics(self):
        if self.cfg.dynamics == "simple":
            return SimpleDynamics(self.store["dyn.alpha"])
        if self.cfg.dynamics == "complex":
            return ComplexDynamics(
                self.store["dyn.w1"], self.store["dyn.b1"], self.store["dyn.w2"], self.store["dyn.b2"]
            )
        return None

    # -- time grids ---------------------------------------------------------

    def _grid(self, sample: Sample):
        """(t0, observation times) for the trajectory solve.

        With adaptive time disabled every event sits at its ordinal
        position, which collapses the solver to a fixed-step recurrence
        that cannot see wall-clock intervals.
        """
        n = len(sample.behaviors)
        if self.cfg.adaptive_time:
            times = [b[2] for b in sample.behaviors]
            return times[0], times + [sample.next_time]
        return 1.0, [float(k) for k in range(1, n + 2)]

    # -- single-sample path -------------------------------------------------

    def forward(self, sample: Sample):
        """Predict one sample; returns (p, trajectory) for downstream reuse."""
        behaviors, target, profile = bm.embed_sample(sample, self.store, self.vocab)
        if self.cfg.dynamics == "none":
            p = self._predict(behaviors, target, profile)
            return p, None

        t0, grid = self._grid(sample)
        z0 = encode_initial(profile, self.store)
        traj = solve_trajectory(self.dynamics(), z0, t0, grid, self.cfg.solver)
        p = self._predict_from_states(behaviors, target, profile, ad.stack(traj.states))
        return p, traj

    def _predict_from_states(self, behaviors, target, profile, states):
        n = behaviors.data.shape[0]
        decoded = decode(states, self.store)
        fused_beh = fuse(behaviors, ad.gather_rows(decoded, np.arange(n)))
        fused_tgt = fuse(target, ad.reshape(ad.gather_rows(decoded, np.array([n])), (bm.BEHAVIOR_DIM,)))
        return self._predict(fused_beh, fused_tgt, profile)

    def _predict(self, behaviors, target, profile):
        if self.cfg.base_kind == "din":
            pooled = bm.attentive_pool(behaviors, target, self.store)
        else:
            pooled = bm.sum_pool(behaviors)
        return bm.mlp_predict(pooled, target, profile, self.store)

    def predict_times(self, sample: Sample, query_times):
        """Probabilities at several future query times, extending one solve.

        The trajectory is solved once through the behavior timestamps and
        then extended incrementally per query time, so later queries reuse
        all earlier integration work.
        """
        query_times = [float(t) for t in query_times]
        if any(t2 < t1 for t1, t2 in zip(query_times, query_times[1:])):
            raise SolverError(f"query times must be sorted ascending: {query_times}")

        behaviors, target, profile = bm.embed_sample(sample, self.store, self.vocab)
        if self.cfg.dynamics == "none":
            with ad.no_grad():
                p = self._predict(behaviors, target, profile)
            return [p.item()] * len(query_times)

        if not self.cfg.adaptive_time:
            raise SolverError("arbitrary-time prediction requires adaptive time")
        times = [b[2] for b in sample.behaviors]
        if query_times and query_times[0] < times[-1]:
            raise SolverError(f"query time {query_times[0]} precedes last behavior {times[-1]}")

        from .ode import extend_trajectory

        out = []
        with ad.no_grad():
            z0 = encode_initial(profile, self.store)
            base_traj = solve_trajectory(self.dynamics(), z0, times[0], times, self.cfg.solver)
            dyn = self.dynamics()
            for q in query_times:
                # each query extends the cached behavior trajectory from t_N,
                # so its states match a from-scratch solve step for step
                ext = extend_trajectory(base_traj, dyn, self.cfg.solver, [q])
                states = ad.stack(ext.states)
                p = self._predict_from_states(behaviors, target, profile, states)
                out.append(p.item())
        return out

    # -- batched path ---------------------------------------------------------

    def _pack_one(self, sample: Sample) -> tuple:
        """Vocab row indices, solve grid and solver plan for one sample, cached."""
        entry = self._pack_cache.get(sample)
        if entry is not None:
            return entry
        vocab = self.vocab
        item_rows = np.array([vocab.item_row(i) for i, _, _ in sample.behaviors], dtype=np.intp)
        cat_rows = np.array([vocab.category_row(c) for _, c, _ in sample.behaviors], dtype=np.intp)
        tgt = (vocab.item_row(sample.target_item[0]), vocab.category_row(sample.target_item[1]))
        prof = vocab.user_row(sample.profile_id)
        if self.cfg.dynamics != "none":
            t0, grid = self._grid(sample)
            plan = None
            if self.cfg.solver.method != "rk4_adaptive":
                plan = make_solve_plan(t0, grid, self.cfg.solver)
        else:
            t0, grid, plan = 0.0, (), None
        next_ids = tuple(item for item, _, _ in sample.behaviors[1:])
        entry = (item_rows, cat_rows, tgt, prof, float(sample.label), t0, grid, plan, next_ids)
        if len(self._pack_cache) < self._PACK_CACHE_LIMIT:
            self._pack_cache[sample] = entry
        return entry

    def forward_batch(self, samples, guide_rng=None, guide_pool=None) -> BatchOutput:
        """Packed forward over a list of samples.

        Guide supervision is active only when a ``guide_rng`` is supplied,
        the configured mode is not "off", and dynamics exist.
        """
        if not samples:
            raise DataError("forward_batch: empty batch")
        batch = len(samples)
        packs = [self._pack_one(s) for s in samples]
        lengths = np.array([p[0].size for p in packs])
        seg = np.repeat(np.arange(batch), lengths)
        item_rows = np.concatenate([p[0] for p in packs])
        cat_rows = np.concatenate([p[1] for p in packs])
        tgt_item_rows = np.array([p[2][0] for p in packs], dtype=np.intp)
        tgt_cat_rows = np.array([p[2][1] for p in packs], dtype=np.intp)
        prof_rows = np.array([p[3] for p in packs], dtype=np.intp)
        labels = np.array([p[4] for p in packs])

        item_tab, cat_tab = self.store["embed.item"], self.store["embed.category"]
        beh_emb = ad.concat([ad.gather_rows(item_tab, item_rows), ad.gather_rows(cat_tab, cat_rows)], axis=1)
        tgt_emb = ad.concat([ad.gather_rows(item_tab, tgt_item_rows), ad.gather_rows(cat_tab, tgt_cat_rows)], axis=1)
        prof_emb = ad.gather_rows(self.store["embed.profile"], prof_rows)

        guide = Tensor(0.0)
        if self.cfg.dynamics == "none":
            fused_beh, fused_tgt = beh_emb, tgt_emb
        else:
            z0 = encode_initial(prof_emb, self.store)
            t0 = np.array([p[5] for p in packs])
            grids = [p[6] for p in packs]
            plans = [p[7] for p in packs]
            flat_states, offsets = self._solve_all(z0, t0, grids, plans)
            beh_flat = np.concatenate(
                [np.arange(off, off + n) for off, n in zip(offsets, lengths)]
            ).astype(np.intp)
            tgt_flat = np.array([off + n for off, n in zip(offsets, lengths)], dtype=np.intp)
            decoded = decode(flat_states, self.store)
            fused_beh = fuse(beh_emb, ad.gather_rows(decoded, beh_flat))
            fused_tgt = fuse(tgt_emb, ad.gather_rows(decoded, tgt_flat))
            if guide_rng is not None and self.cfg.guide_mode != "off":
                guide = self._batch_guide(
                    packs, lengths, ad.gather_rows(decoded, beh_flat), beh_emb, guide_rng,
                    guide_pool if guide_pool is not None else guide_pool_from_samples(samples),
                )

        if self.cfg.base_kind == "din":
            pooled = bm.attentive_pool_packed(fused_beh, fused_tgt, seg, batch, self.store)
        else:
            pooled = bm.sum_pool_packed(fused_beh, seg, batch)
        p = bm.mlp_predict(pooled, fused_tgt, prof_emb, self.store)
        target = bm.target_loss(p, labels)
        return BatchOutput(p=p, target=target, guide=guide, total=total_loss(target, guide, self.cfg.guide_weight))

    def _solve_all(self, z0, t0, grids, plans):
        if self.cfg.solver.method != "rk4_adaptive":
            return solve_batch(self.dynamics(), z0, t0, grids, self.cfg.solver, plans=plans)
        # adaptive stepping diverges per trajectory; integrate samples one by one
        dyn = self.dynamics()
        pieces, offsets, flat = [], [], 0
        for i, grid in enumerate(grids):
            zi = ad.reshape(ad.gather_rows(z0, np.array([i])), (LATENT_DIM,))
            traj = solve_trajectory(dyn, zi, float(t0[i]), grid, self.cfg.solver)
            pieces.append(ad.stack(traj.states))
            offsets.append(flat)
            flat += len(grid)
        return ad.concat(pieces, axis=0), offsets

    def _guide_pool_arrays(self, pool) -> tuple:
        """Pool index map plus vectorized vocab rows, cached per pool object."""
        key = id(pool)
        entry = self._pool_cache.get(key)
        if entry is None or entry[0] is not pool:
            index = {item: k for k, (item, _) in enumerate(pool)}
            item_rows = np.array([self.vocab.item_row(i) for i, _ in pool], dtype=np.intp)
            cat_rows = np.array([self.vocab.category_row(c) for _, c in pool], dtype=np.intp)
            entry = (pool, index, item_rows, cat_rows)
            self._pool_cache[key] = entry
        return entry

    def _batch_guide(self, packs, lengths, decoded_beh, beh_emb, rng, pool):
        if not pool:
            raise DataError("guide negative pool is empty")
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        sup_idx, sup_seg, excl = [], [], []
        _, pool_index, pool_item_rows, pool_cat_rows = self._guide_pool_arrays(pool)
        for i, pack in enumerate(packs):
            n = lengths[i]
            if n < 2:
                continue
            sup_idx.append(np.arange(starts[i], starts[i] + n - 1, dtype=np.intp))
            sup_seg.append(np.full(n - 1, i, dtype=np.intp))
            excl.extend(pool_index.get(nid, -1) for nid in pack[8])
        if not sup_idx:
            return Tensor(0.0)
        sup_idx = np.concatenate(sup_idx)
        sup_seg = np.concatenate(sup_seg)
        excl = np.array(excl)

        # uniform over the pool minus the true next item: redraw collisions
        idx = rng.integers(len(pool), size=excl.size)
        colliding = idx == excl
        for _ in range(1000):
            if not colliding.any():
                break
            idx[colliding] = rng.integers(len(pool), size=int(colliding.sum()))
            colliding = idx == excl
        else:
            raise DataError("guide negative pool contains only the excluded item")

        neg_emb = ad.concat(
            [
                ad.gather_rows(self.store["embed.item"], pool_item_rows[idx]),
                ad.gather_rows(self.store["embed.category"], pool_cat_rows[idx]),
            ],
            axis=1,
        )
        terms = _guide_terms(
            ad.gather_rows(decoded_beh, sup_idx),
            ad.gather_rows(beh_emb, sup_idx + 1),
            neg_emb,
            self.store,
            self.cfg.guide_mode,
        )
        batch = len(packs)
        sums = ad.reshape(ad.segment_sum(ad.reshape(terms, (-1, 1)), sup_seg, batch), (batch,))
        counts = np.maximum(lengths - 1, 1).astype(np.float64)
        per_sample = ad.mul(sums, Tensor(1.0 / counts))
        return ad.tmean(per_sample)


def safe_start_init(model: TimeStreamModel) -> TimeStreamModel:
    """Zero the time-stream couplings so the wrapped model equals its base.

    The encoder and the decoder output layer are zeroed, making the fused
    adjustment exactly zero regardless of the trajectory; dynamics
    parameters are zeroed as well so training starts from a neutral field.
    """
    store = model.store
    if model.cfg.dynamics == "none":
        return model
    store.set_("ts.encoder.weight", np.zeros((LATENT_DIM, LATENT_DIM)))
    store.set_("ts.decoder.1.weight", np.zeros((LATENT_DIM, DECODER_HIDDEN)))
    store.set_("ts.decoder.1.bias", np.zeros(LATENT_DIM))
    if model.cfg.dynamics == "simple":
        store.set_("dyn.alpha", np.zeros(LATENT_DIM))
    else:
        store.set_("dyn.w1", np.zeros((LATENT_DIM, LATENT_DIM)))
        store.set_("dyn.b1", np.zeros(LATENT_DIM))
        store.set_("dyn.w2", np.zeros((LATENT_DIM, LATENT_DIM)))
        store.set_("dyn.b2", np.zeros(LATENT_DIM))
    return model
