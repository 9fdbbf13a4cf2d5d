"""Training loop, evaluation, and arbitrary-time prediction."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, TrainConfig, apply_parameters, checkpoint_from_model, model_from_checkpoint, save_checkpoint
from .data import DataError, Sample
from .metrics import EvalReport, weighted_auc
from .model import TimeStreamModel, guide_pool_from_samples, safe_start_init


class NumericError(RuntimeError):
    """A non-finite loss or gradient aborted training."""


class Adam:
    """Adam with bias correction; buffers keyed by parameter path."""

    def __init__(self, store, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {path: np.zeros_like(p.data) for path, p in store.items()}
        self.v = {path: np.zeros_like(p.data) for path, p in store.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for path, p in self.store.items():
            g = p.grad
            m = self.m[path]
            v = self.v[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _param_norms(store) -> str:
    return ", ".join(f"{path}={np.linalg.norm(p.data):.3g}" for path, p in store.items())


def train(
    cfg: TrainConfig,
    train_samples: list,
    out_path=None,
    init_from: Checkpoint | None = None,
) -> tuple[Checkpoint, list]:
    """Optimize the configured model; returns (checkpoint, per-epoch history).

    When ``init_from`` carries only base parameters and the config asks for
    dynamics, the fresh time-stream parameters get the safe-start treatment
    so training begins exactly at the loaded base model.
    """
    if not train_samples:
        raise DataError("training set is empty")

    if init_from is not None:
        vocab = init_from.vocab
    else:
        from .basemodel import Vocab

        vocab = Vocab.from_samples(train_samples)

    model = TimeStreamModel.build(cfg.model_config(), vocab, seed=cfg.seed)
    loaded_timestream = False
    if init_from is not None:
        apply_parameters(model.store, init_from.parameters, require_all=False)
        loaded_timestream = init_from.has_timestream_params()
    if cfg.dynamics != "none" and not loaded_timestream:
        safe_start_init(model)

    shuffle_rng = np.random.default_rng([cfg.seed, 101])
    guide_rng = np.random.default_rng([cfg.seed, 202])
    use_guide = cfg.dynamics != "none" and cfg.guide_mode != "off"
    guide_pool = guide_pool_from_samples(train_samples) if use_guide else None

    optimizer = Adam(model.store, lr=cfg.learning_rate)
    n = len(train_samples)
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = {"total": 0.0, "target": 0.0, "guide": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            out = model.forward_batch(
                batch,
                guide_rng=guide_rng if use_guide else None,
                guide_pool=guide_pool,
            )
            total = out.total.item()
            if not math.isfinite(total):
                raise NumericError(
                    f"non-finite loss {total} at epoch {epoch + 1}, batch {start // cfg.batch_size}; "
                    f"parameter norms: {_param_norms(model.store)}"
                )
            model.store.zero_grad()
            out.total.backward()
            optimizer.step()
            b = len(batch)
            sums["total"] += total * b
            sums["target"] += out.target.item() * b
            sums["guide"] += out.guide.item() * b
        history.append(
            {
                "epoch": epoch + 1,
                "total": sums["total"] / n,
                "target": sums["target"] / n,
                "guide": sums["guide"] / n,
            }
        )

    ckpt = checkpoint_from_model(model, cfg)
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt, history


def score_samples(model: TimeStreamModel, samples: list, batch_size: int = 256) -> np.ndarray:
    """Forward probabilities without recording gradients."""
    scores = np.empty(len(samples))
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            out = model.forward_batch(batch)
            scores[start : start + len(batch)] = out.p.data
    return scores


def evaluate(ckpt_or_model, samples: list, batch_size: int = 256) -> EvalReport:
    """Weighted AUC of a checkpoint (or live model) over labeled samples."""
    if not samples:
        raise DataError("evaluation set is empty")
    model = ckpt_or_model if isinstance(ckpt_or_model, TimeStreamModel) else model_from_checkpoint(ckpt_or_model)
    scores = score_samples(model, samples, batch_size=batch_size)
    rows = [(s.profile_id, float(p), s.label) for s, p in zip(samples, scores)]
    return weighted_auc(rows)


def predict_at_time(ckpt: Checkpoint, sample: Sample, query_times) -> list:
    """Probabilities at each query time, reusing one incremental trajectory."""
    model = model_from_checkpoint(ckpt)
    return model.predict_times(sample, query_times)
