"""Episodic and triplet training loops, early stopping and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..data.augment import AugmentSpec
from ..data.dataset import FewShotDataset
from ..data.sampling import episode_batch, sample_episode, triplet_batches
from ..errors import CapacityError, TrainingError
from ..models.model import HEADS, FewShotModel
from ..numcore import Adam, NonFiniteError, no_grad
from .checkpoint import ModelCheckpoint, snapshot
from .metrics import MetricsReport, compute_metrics

log = logging.getLogger(__name__)

# per-head defaults; "max_epochs" for episodic heads counts evaluation rounds
HEAD_DEFAULTS: dict[str, dict] = {
    "siamese": dict(batch_size=32, max_epochs=100, margin=1.0, feature_dim=64, patience=100, eval_interval=1),
    "relation": dict(n_way=4, k_shot=5, q_query=5, max_episodes=1000, patience=10),
    "matching": dict(n_way=4, k_shot=30, q_query=30, max_episodes=2000, patience=100),
    "proto": dict(n_way=4, k_shot=5, q_query=10, max_episodes=3000, patience=20, feature_dim=64),
    "hybrid": dict(n_way=4, k_shot=5, q_query=10, max_epochs=100, patience=10, feature_dim=512),
}


@dataclass
class TrainConfig:
    head: str = "hybrid"
    n_way: int = 4
    k_shot: int = 5
    q_query: int = 10
    lr: float = 1e-4
    max_episodes: int | None = None
    max_epochs: int | None = None
    eval_interval: int = 20
    patience: int = 10
    margin: float = 1.0
    batch_size: int = 32
    seed: int = 0
    feature_dim: int | None = None
    image_size: int = 64
    val_episodes: int = 40
    val_batches: int = 4
    augment: bool = False

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")

    @classmethod
    def for_head(cls, head: str, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(overrides) - known
        if bad:
            raise ValueError(f"unknown TrainConfig keys: {sorted(bad)}")
        return cls(head=head, **{**HEAD_DEFAULTS[head], **overrides})

    @property
    def episode_budget(self) -> int:
        if self.max_episodes is not None:
            return self.max_episodes
        if self.max_epochs is not None:
            return self.max_epochs * self.eval_interval
        return 1000

    def episode_config(self) -> dict:
        return {"n_way": self.n_way, "k_shot": self.k_shot, "q_query": self.q_query}


@dataclass
class EarlyStopping:
    """Stop once validation accuracy fails to strictly improve ``patience`` times in a row."""

    patience: int
    best: float = -math.inf
    bad_evals: int = 0
    n_evals: int = 0

    def update(self, val_accuracy: float) -> str:
        self.n_evals += 1
        if val_accuracy > self.best:
            self.best = val_accuracy
            self.bad_evals = 0
            return "continue"
        self.bad_evals += 1
        return "stop" if self.bad_evals >= self.patience else "continue"


def early_stop_update(state: EarlyStopping, val_accuracy: float) -> str:
    return state.update(val_accuracy)


@dataclass
class TrainResult:
    best: ModelCheckpoint
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def best_val_accuracy(self) -> float:
        return self.best.manifest["best_val_accuracy"]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _manifest(config: TrainConfig, dataset: FewShotDataset, best_acc: float, step: int,
              val_loss: float | None = None) -> dict:
    return {
        "best_val_loss": val_loss,
        "head": config.head,
        "seed": config.seed,
        "episode_config": config.episode_config(),
        "train_config": asdict(config),
        "classes": list(dataset.classes),
        "dataset_hash": dataset.manifest_hash,
        "best_val_accuracy": best_acc,
        "episode_index": step,
    }


class _LogWriter:
    def __init__(self, path: str | Path | None):
        self.records: list[dict] = []
        self.fh = open(path, "w") if path else None

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _bn_ready(model: FewShotModel) -> bool:
    from ..numcore import BatchNorm2d

    return all(m.state.initialized for m in model.modules() if isinstance(m, BatchNorm2d))


def episodic_validation(model: FewShotModel, dataset: FewShotDataset, split: str, config: TrainConfig,
                        n_episodes: int, rng: np.random.Generator) -> tuple[float, float]:
    """Mean episode accuracy and mean episode loss, in eval mode."""
    accs, losses = [], []
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for _ in range(n_episodes):
                ep = sample_episode(dataset, split, config.n_way, config.k_shot, config.q_query, rng)
                batch = episode_batch(ep, dataset.image_size)
                loss, preds = model.episode_loss(batch)
                accs.append(float(np.mean(preds == batch.query_labels)))
                losses.append(float(loss.data))
    finally:
        model.train(was_training)
    return float(np.mean(accs)), float(np.mean(losses))


def episodic_accuracy(model: FewShotModel, dataset: FewShotDataset, split: str, config: TrainConfig,
                      n_episodes: int, rng: np.random.Generator) -> float:
    return episodic_validation(model, dataset, split, config, n_episodes, rng)[0]


def _improves(acc: float, loss: float, best: tuple[float, float] | None) -> bool:
    # ties on accuracy go to the lower validation loss
    return best is None or acc > best[0] or (acc == best[0] and loss < best[1])


def train_episodic(config: TrainConfig, dataset: FewShotDataset, model: FewShotModel,
                   log_path: str | Path | None = None) -> TrainResult:
    """Sample, forward, loss, backward, Adam; validate every ``eval_interval`` episodes.

    With ``lr == 0`` the model is frozen: training episodes run in eval mode
    (after one batch-norm calibration pass if needed) and nothing changes.
    """
    if config.head == "siamese":
        raise ValueError("use train_siamese for the siamese head")
    frozen = config.lr == 0
    opt = Adam(model.trainable_parameters(), lr=config.lr)
    train_rng = _rng(config.seed, 0)
    aug = AugmentSpec() if config.augment else None
    stopper = EarlyStopping(config.patience)
    writer = _LogWriter(log_path)
    best: ModelCheckpoint | None = None
    best_key: tuple[float, float] | None = None
    stopped = False
    t0 = time.perf_counter()
    try:
        for step in range(1, config.episode_budget + 1):
            ep = sample_episode(dataset, "train", config.n_way, config.k_shot, config.q_query, train_rng)
            batch = episode_batch(ep, dataset.image_size, aug, epoch=step)
            try:
                if frozen:
                    if not _bn_ready(model):
                        model.train()
                        with no_grad():
                            model.episode_loss(batch)
                    model.eval()
                    with no_grad():
                        loss, _ = model.episode_loss(batch)
                else:
                    model.train()
                    opt.zero_grad()
                    loss, _ = model.episode_loss(batch)
                    loss.backward()
                    opt.step()
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite value at episode {step} (classes {list(ep.class_map.values())}): {exc}"
                ) from exc
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingError(f"non-finite loss at episode {step}")
            rec = {"episode": step, "train_loss": loss_val, "val_accuracy": None}
            if step % config.eval_interval == 0:
                acc, vloss = episodic_validation(model, dataset, "val", config, config.val_episodes,
                                                 _rng(config.seed, 1))
                rec["val_accuracy"] = acc
                decision = stopper.update(acc)
                if _improves(acc, vloss, best_key):
                    best_key = (acc, vloss)
                    best = snapshot(model, _manifest(config, dataset, acc, step, vloss))
                    log.info("episode %d: val accuracy %.4f, loss %.4g (new best)", step, acc, vloss)
                if decision == "stop":
                    stopped = True
            rec["elapsed_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            writer.write(rec)
            if stopped:
                break
    finally:
        writer.close()
    if best is None:
        acc = episodic_accuracy(model, dataset, "val", config, config.val_episodes, _rng(config.seed, 1))
        best = snapshot(model, _manifest(config, dataset, acc, config.episode_budget))
    model.load_state_dict(best.weights)
    model.eval()
    return TrainResult(best, writer.records, stopped)


def _fixed_triplets(dataset, split, config, n_batches, stream):
    rng = _rng(config.seed, stream)
    return [b.arrays(dataset.image_size) for b in triplet_batches(dataset, split, config.batch_size, rng, n_batches)]


def pair_validation(model: FewShotModel, arrays, margin: float) -> tuple[float, float]:
    """Pair accuracy and mean triplet loss over fixed triplet batches."""
    correct = np.concatenate([model.pair_eval(*a).correct for a in arrays])
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            losses = [float(model.triplet_loss(*a, margin).data) for a in arrays]
    finally:
        model.train(was_training)
    return float(correct.mean()), float(np.mean(losses))


def pair_accuracy(model: FewShotModel, arrays) -> float:
    correct = np.concatenate([model.pair_eval(*a).correct for a in arrays])
    return float(correct.mean())


def train_siamese(config: TrainConfig, dataset: FewShotDataset, model: FewShotModel,
                  log_path: str | Path | None = None) -> TrainResult:
    """Epoch loop over fresh triplet batches; validation on fixed held-out triplets."""
    if config.head != "siamese":
        raise ValueError("train_siamese needs the siamese head")
    frozen = config.lr == 0
    opt = Adam(model.trainable_parameters(), lr=config.lr)
    rng = _rng(config.seed, 0)
    val = _fixed_triplets(dataset, "val", config, config.val_batches, 1)
    stopper = EarlyStopping(config.patience)
    writer = _LogWriter(log_path)
    best = None
    best_key: tuple[float, float] | None = None
    stopped = False
    n_epochs = config.max_epochs if config.max_epochs is not None else 100
    t0 = time.perf_counter()
    try:
        for epoch in range(1, n_epochs + 1):
            losses = []
            for tb in triplet_batches(dataset, "train", config.batch_size, rng):
                a, p, n = tb.arrays(dataset.image_size)
                try:
                    if frozen:
                        if not _bn_ready(model):
                            model.train()
                            with no_grad():
                                model.triplet_loss(a, p, n, config.margin)
                        model.eval()
                        with no_grad():
                            loss = model.triplet_loss(a, p, n, config.margin)
                    else:
                        model.train()
                        opt.zero_grad()
                        loss = model.triplet_loss(a, p, n, config.margin)
                        loss.backward()
                        opt.step()
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite value in epoch {epoch}: {exc}") from exc
                losses.append(float(loss.data))
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": None}
            if epoch % config.eval_interval == 0:
                acc, vloss = pair_validation(model, val, config.margin)
                rec["val_accuracy"] = acc
                decision = stopper.update(acc)
                if _improves(acc, vloss, best_key):
                    best_key = (acc, vloss)
                    best = snapshot(model, _manifest(config, dataset, acc, epoch, vloss))
                stopped = decision == "stop"
            rec["elapsed_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            writer.write(rec)
            if stopped:
                break
    finally:
        writer.close()
    if best is None:
        best = snapshot(model, _manifest(config, dataset, pair_accuracy(model, val), n_epochs))
    model.load_state_dict(best.weights)
    model.eval()
    return TrainResult(best, writer.records, stopped)


def check_capacity(config: TrainConfig, dataset: FewShotDataset, splits=("train", "val")) -> None:
    """Fail before any compute if a split cannot supply the configured episodes or triplets."""
    need = 2 if config.head == "siamese" else config.k_shot + config.q_query
    ways = 2 if config.head == "siamese" else config.n_way
    for split in splits:
        per = dataset.split(split)
        if len(per) < ways:
            raise CapacityError(f"split {split!r} has {len(per)} classes, needs {ways}")
        for cls, items in per.items():
            if len(items) < need:
                raise CapacityError(
                    f"class {cls!r} in split {split!r} has {len(items)} samples, needs {need} "
                    f"(short by {need - len(items)})"
                )


def train(config: TrainConfig, dataset: FewShotDataset, model: FewShotModel | None = None,
          log_path: str | Path | None = None) -> tuple[FewShotModel, TrainResult]:
    check_capacity(config, dataset)
    if model is None:
        model = FewShotModel(config.head, image_size=dataset.image_size, feature_dim=config.feature_dim, seed=config.seed)
    fn = train_siamese if config.head == "siamese" else train_episodic
    return model, fn(config, dataset, model, log_path)


def evaluate(model: FewShotModel, dataset: FewShotDataset, split: str, n_episodes: int,
             config: TrainConfig, seed: int | None = None) -> MetricsReport:
    """Aggregate query predictions over ``n_episodes`` into one confusion matrix.

    Episodic heads: class indices are mapped back to dataset classes. The
    Siamese head uses ``n_episodes`` triplet batches; a correct triplet
    predicts the anchor's class, an incorrect one the negative's class.
    """
    seed = config.seed if seed is None else seed
    rng = _rng(seed, 2)
    cls_index = {c: i for i, c in enumerate(dataset.classes)}
    truths: list[int] = []
    preds: list[int] = []
    if model.head == "siamese":
        for tb in triplet_batches(dataset, split, config.batch_size, rng, n_episodes):
            res = model.pair_eval(*tb.arrays(dataset.image_size))
            for a, n, ok in zip(tb.anchors, tb.negatives, res.correct):
                truths.append(cls_index[a.class_label])
                preds.append(cls_index[a.class_label] if ok else cls_index[n.class_label])
    else:
        for _ in range(n_episodes):
            ep = sample_episode(dataset, split, config.n_way, config.k_shot, config.q_query, rng)
            batch = episode_batch(ep, dataset.image_size)
            p = model.predict_episode(batch)
            truths += [cls_index[ep.class_map[int(t)]] for t in batch.query_labels]
            preds += [cls_index[ep.class_map[int(q)]] for q in p]
    return compute_metrics(truths, preds, len(dataset.classes), dataset.classes, n_episodes)


def config_with(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
