"""SGD training and evaluation under train/test shuffle schemes."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, iterate_batches
from .model import Model
from .shuffle import ShuffleStream, parse_mechanism
from .zoo import SurgeryPlan, apply_surgery

log = logging.getLogger(__name__)

# Scheme-matrix layout: (train scheme, test scheme) in row order.
SCHEME_PAIRS = (
    ("none", "none"),
    ("channel", "channel"),
    ("channel", "none"),
    ("none", "channel"),
    ("spatial", "spatial"),
    ("spatial", "none"),
    ("none", "spatial"),
)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: tuple[tuple[int, float], ...] | None = None
    batch_size: int = 128
    epochs: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch size and epochs must be positive")
        sched = self.resolved_schedule()
        if any(m <= 0 for _, m in sched):
            raise ValueError("schedule multipliers must be positive")
        epochs = [e for e, _ in sched]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")

    def resolved_schedule(self) -> tuple[tuple[int, float], ...]:
        """Step decay x0.1 at 50% and 75% of training unless given explicitly."""
        if self.schedule is not None:
            return tuple((int(e), float(m)) for e, m in self.schedule)
        half, three_q = round(0.5 * self.epochs), round(0.75 * self.epochs)
        if three_q <= half:
            return ((half, 0.1),)
        return ((half, 0.1), (three_q, 0.01))

    def lr_at(self, epoch: int) -> float:
        mult = 1.0
        for start, m in self.resolved_schedule():
            if epoch >= start:
                mult = m
        return self.lr * mult


def sgd_step(params: dict, grads: dict, state: dict, cfg: OptimConfig, lr: float | None = None):
    """Momentum SGD with L2 weight decay folded into the velocity.

    ``v <- m*v + g + wd*w``; ``w <- w - lr*v``.  Arrays are updated in place.
    """
    lr = cfg.lr if lr is None else lr
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient for {name}: {bad} of {g.size} entries")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(w)
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * w
        w -= lr * v
    return params, state


@dataclass(frozen=True)
class SchemeMatrixCell:
    """Which shuffle is active while training and while testing, and where."""

    train_scheme: str = "none"
    test_scheme: str = "none"
    k_last: int = 0
    layers: tuple[int, ...] | None = None
    share_skip: bool = True

    def plan(self, phase: str) -> SurgeryPlan | None:
        name, patch = parse_mechanism(self.train_scheme if phase == "train" else self.test_scheme)
        if name == "none":
            return None
        if name == "gapfc":
            raise ValueError("gapfc is an architecture change, not a test-time scheme")
        return SurgeryPlan(name, self.k_last, patch, self.share_skip, layers=self.layers)


@dataclass
class RunReport:
    epoch_loss: list[float]
    epoch_acc: list[float]
    test_top1: float | None
    seed: int
    config_digest: str
    status: str = "ok"
    last_good_epoch: int = -1
    wall_clock_s: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def eval_seed_for(seed: int) -> int:
    """Evaluation seed, always different from the training seed."""
    return int(np.random.SeedSequence([seed, 0xE7A1]).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def scheme_view(model: Model, mechanism: str, k_last: int = 0, layers=None, share_skip: bool = True) -> Model:
    """``model``'s parameters seen through a shuffle scheme (``"none"`` leaves it as is)."""
    name, patch = parse_mechanism(mechanism)
    if name == "none":
        return model
    plan = SurgeryPlan(name, k_last, patch, share_skip, layers=layers)
    return model.with_spec(apply_surgery(model.spec, plan))


def predict_logits(model: Model, images: np.ndarray, stream: ShuffleStream | None = None,
                   batch_size: int = 256) -> np.ndarray:
    dtype = next(iter(model.params.values())).data.dtype
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            xb = T.Tensor(images[start:start + batch_size].astype(dtype, copy=False))
            out.append(model.forward(xb, training=False, stream=stream).data)
    return np.concatenate(out)


def evaluate(model: Model, data: Dataset, test_scheme: str = "none", eval_seed: int = 1, passes: int = 1,
             k_last: int = 0, layers=None, batch_size: int = 256, share_skip: bool = True) -> float:
    """Top-1 accuracy; logits are averaged over ``passes`` stochastic passes when shuffling."""
    if passes < 1:
        raise ValueError("passes must be at least 1")
    view = scheme_view(model, test_scheme, k_last, layers, share_skip)
    images = data.standardize(data.images)
    if not view.has_shuffle:
        logits = predict_logits(view, images, None, batch_size)
    else:
        stream = ShuffleStream(eval_seed, "eval")
        logits = sum(predict_logits(view, images, stream, batch_size) for _ in range(passes)) / passes
    return float(np.mean(logits.argmax(axis=1) == data.labels))


def train(model: Model, data: Dataset, cfg: OptimConfig, scheme: SchemeMatrixCell | None = None,
          seed: int = 0, test_data: Dataset | None = None, augment: bool = False, passes: int = 1,
          digest_extra=None) -> RunReport:
    """Train ``model`` in place; returns per-epoch metrics and (optionally) test top-1."""
    scheme = scheme or SchemeMatrixCell()
    started = time.perf_counter()
    digest = config_digest({"optim": asdict(cfg), "scheme": asdict(scheme), "seed": seed, "augment": augment,
                            "extra": digest_extra})
    train_plan = scheme.plan("train")
    train_model = model if train_plan is None else model.with_spec(apply_surgery(model.spec, train_plan))
    rng = np.random.default_rng([seed, 0xDA7A])
    stream = ShuffleStream(seed, "train")
    dtype = next(iter(model.params.values())).data.dtype
    names = list(model.params)
    weights = {n: model.params[n].data for n in names}
    velocity: dict[str, np.ndarray] = {}
    losses, accs = [], []
    status = "ok"

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total_loss, correct, seen = 0.0, 0, 0
        try:
            for xb, yb in iterate_batches(data, cfg.batch_size, rng, augment, dtype):
                logits = train_model.forward(T.Tensor(xb), training=True, stream=stream)
                loss = T.softmax_cross_entropy(logits, yb)
                T.backward(loss)
                grads = {n: model.params[n].grad for n in names}
                sgd_step(weights, grads, velocity, cfg, lr)
                model.zero_grad()
                total_loss += float(loss.data) * len(yb)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
                seen += len(yb)
        except FloatingPointError as exc:
            log.warning("training diverged in epoch %d: %s", epoch, exc)
            T.current_tape().clear()
            status = "diverged"
            break
        losses.append(total_loss / seen)
        accs.append(correct / seen)
        log.debug("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, losses[-1], accs[-1])

    top1 = None
    if status == "ok" and test_data is not None:
        top1 = evaluate(model, test_data, scheme.test_scheme, eval_seed_for(seed), passes,
                        scheme.k_last, scheme.layers, share_skip=scheme.share_skip)
    return RunReport(losses, accs, top1, seed, digest, status, len(losses) - 1,
                     time.perf_counter() - started)
