"""SGD training against the pose loss, hyper-parameter sweeps and trajectory curricula."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .archs import ArchSpec, count_params
from .evaluation import ContractViolation, EvalReport, evaluate
from .inputs import InputConfig, compute_channel_means, stack_inputs
from .network import INIT_STD, Model, backward, build_model, predict, run
from .pose import DEFAULT_BETA, align_hemisphere, batch_loss, pose_errors

log = logging.getLogger(__name__)

# defaults for full-scale VGG-F training (the `full` recipe)
DEFAULT_BATCH_SIZE = 30
DEFAULT_WEIGHT_DECAY = 5e-1
DEFAULT_LR_RANGE = (1e-10, 1e-6)


class TrainingDiverged(RuntimeError):
    """Non-finite loss. ``snapshot`` holds the model after the last completed epoch."""

    def __init__(self, epoch, lr, snapshot, history):
        super().__init__(f"diverged: non-finite loss in epoch {epoch} with learning rate {lr:g}")
        self.epoch = epoch
        self.lr = lr
        self.snapshot = snapshot
        self.history = history


@dataclass(frozen=True)
class HyperParams:
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = 1e-6
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    beta: float = DEFAULT_BETA
    epochs: int = 250
    seed: int = 0
    momentum: float = 0.9
    align_hemisphere: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("weight_decay and momentum must be nonnegative")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "HyperParams":
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_position: float | None
    val_angle: float | None


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int | None = None
    best_model: Model | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.epochs)

    def to_dict(self, include_timing: bool = False) -> dict:
        """Serializable form; wall times are left out unless asked for so the file is reproducible."""
        d = {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
             "provenance": self.provenance}
        if include_timing:
            d["wall_time"] = list(self.wall_time)
        return d


@dataclass(frozen=True)
class Samples:
    """Network inputs with their target pose vectors."""

    inputs: np.ndarray
    poses: np.ndarray
    frame_ids: tuple

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_trajectories(cls, trajectories, config: InputConfig) -> "Samples":
        xs, ps, ids = [], [], []
        for t in trajectories:
            x, p, i = stack_inputs(t.frames, config, t.intrinsics)
            xs.append(x)
            ps.append(p)
            ids.extend(i)
        return cls(np.concatenate(xs), np.concatenate(ps), tuple(ids))


def fit_input_config(trajectories, config: InputConfig) -> InputConfig:
    """``config`` with channel means measured on the training trajectories."""
    total, count = 0.0, 0
    for t in trajectories:
        m = np.asarray(compute_channel_means(t.frames, config, t.intrinsics))
        total = total + m * len(t.frames)
        count += len(t.frames)
    return config.with_means(total / count)


def _better(a, b) -> bool:
    """Is validation result ``a`` = (position, angle) strictly better than ``b``?"""
    return b is None or (a[0], a[1]) < (b[0], b[1])


def train(model: Model, train_set: Samples, val_set: Samples | None, hp: HyperParams,
          callback=None):
    """Mini-batch SGD with momentum and L2 weight decay on the pose loss.

    The loss is averaged over each batch; weight decay applies to weights,
    not biases. Frames are reshuffled every epoch from a generator seeded
    with ``hp.seed`` and the last short batch is kept. Returns the final
    model and the history; ``history.best_model`` is the snapshot with the
    lowest validation position error (angle breaks ties), or the final
    model when there is no validation set. ``callback(epoch, model,
    history)`` is called after every epoch.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    if hp.batch_size > n:
        raise ValueError(f"batch_size {hp.batch_size} exceeds training set size {n}")
    model = model.copy()
    history = TrainHistory(provenance=dict(model.provenance))
    if hp.epochs == 0:
        history.best_model = model
        return model, history
    # overflow shows up as a non-finite loss and is reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_epochs(model, train_set, val_set, hp, history, callback)


def _run_epochs(model, train_set, val_set, hp, history, callback):
    n = len(train_set)
    rng = np.random.default_rng(hp.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    decay = {k: (hp.weight_decay if k.endswith(".weight") else 0.0) for k in model.params}
    best = None
    last_good = model.copy()
    t0 = time.perf_counter()
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            out, caches = run(model, train_set.inputs[idx], train=True, rng=rng, keep_cache=True)
            target = train_set.poses[idx]
            if hp.align_hemisphere:
                target = np.concatenate([target[:, :3], align_hemisphere(target[:, 3:], out[:, 3:])], axis=1)
            loss, dout = batch_loss(out, target, hp.beta)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, hp.learning_rate, last_good, history)
            total += loss * len(idx)
            grads = backward(model, caches, dout)
            for k, w in model.params.items():
                g = grads[k]
                if decay[k]:
                    g = g + decay[k] * w
                v = velocity[k]
                v *= hp.momentum
                v -= hp.learning_rate * g
                w += v
        train_loss = total / n
        if not np.isfinite(train_loss) or not all(np.isfinite(w).all() for w in model.params.values()):
            raise TrainingDiverged(epoch, hp.learning_rate, last_good, history)
        vp = va = None
        if val_set is not None and len(val_set):
            e_p, e_a = pose_errors(predict(model, val_set.inputs), val_set.poses)
            vp, va = float(e_p.mean()), float(e_a.mean())
            if _better((vp, va), best):
                best = (vp, va)
                history.best_model = model.copy()
                history.best_epoch = epoch
        history.epochs.append(EpochRecord(epoch, float(train_loss), vp, va))
        history.wall_time.append(time.perf_counter() - t0)
        last_good = model.copy()
        if callback is not None:
            callback(epoch, model, history)
        log.debug("epoch %d loss %.5f val %s", epoch, train_loss, (vp, va))
    if history.best_model is None:
        history.best_model = model.copy()
        history.best_epoch = hp.epochs
    return model, history


def split_bundle(bundle):
    """Training trajectories and the validation trajectories (test ones if none are tagged validation)."""
    bundle.check_trainable()
    return bundle.by_role("train"), bundle.by_role("validation") or bundle.by_role("test")


def finetune(pretrained, arch: ArchSpec, bundle, hp: HyperParams, config: InputConfig):
    """Train starting from a weight container instead of a random draw.

    The container's channel means are reused when they match the
    modality; otherwise they are measured on the training trajectories.
    """
    model = build_model(arch, seed=hp.seed, pretrained=pretrained)
    train_trajs, val_trajs = split_bundle(bundle)
    means = pretrained.channel_means
    if means is not None and len(means) == config.modality.channels:
        config = config.with_means(means)
    else:
        config = fit_input_config(train_trajs, config)
    model.input_config = config
    model, history = train(model, Samples.from_trajectories(train_trajs, config),
                           Samples.from_trajectories(val_trajs, config), hp)
    history.provenance = dict(model.provenance)
    return model, history


# --- sweeps ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    """Where sweep combinations are drawn from: learning rate log-uniform, the rest from lists."""

    batch_sizes: tuple = (DEFAULT_BATCH_SIZE,)
    weight_decays: tuple = (DEFAULT_WEIGHT_DECAY,)
    lr_range: tuple = DEFAULT_LR_RANGE
    betas: tuple = (DEFAULT_BETA,)
    momenta: tuple = (0.9,)

    def __post_init__(self):
        for name in ("batch_sizes", "weight_decays", "betas", "momenta"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"empty grid: no {name}")
        lo, hi = self.lr_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad learning-rate range {self.lr_range}")

    def sample(self, rng, epochs: int, seed: int) -> HyperParams:
        lo, hi = np.log10(self.lr_range[0]), np.log10(self.lr_range[1])
        lr = 10 ** rng.uniform(lo, hi) if hi > lo else self.lr_range[0]
        return HyperParams(
            batch_size=int(rng.choice(self.batch_sizes)),
            learning_rate=float(lr),
            weight_decay=float(rng.choice(self.weight_decays)),
            beta=float(rng.choice(self.betas)),
            epochs=epochs,
            seed=seed,
            momentum=float(rng.choice(self.momenta)),
        )


@dataclass(frozen=True)
class SweepEntry:
    hp: HyperParams
    val_position: float
    val_angle: float
    status: str = "ok"


@dataclass
class SweepResult:
    """Entries ranked by validation position error, then angle error; diverged runs last."""

    entries: list

    def __len__(self):
        return len(self.entries)

    @property
    def best(self) -> SweepEntry:
        return self.entries[0]

    def to_dict(self) -> dict:
        return {"ranking": "val_position, then val_angle",
                "entries": [{"hp": e.hp.to_dict(), "val_position": e.val_position,
                             "val_angle": e.val_angle, "status": e.status} for e in self.entries]}


def _sweep_one(args):
    arch, hp, train_s, val_s, config, init_std = args
    model = build_model(arch, seed=hp.seed, std=init_std)
    model.input_config = config
    try:
        model, history = train(model, train_s, val_s, hp)
    except TrainingDiverged:
        return SweepEntry(hp, float("inf"), float("inf"), "diverged")
    last = history.epochs[-1] if history.epochs else None
    if last is None or last.val_position is None:
        e_p, e_a = pose_errors(predict(model, val_s.inputs), val_s.poses)
        return SweepEntry(hp, float(e_p.mean()), float(e_a.mean()))
    rec = next(e for e in history.epochs if e.epoch == history.best_epoch)
    return SweepEntry(hp, rec.val_position, rec.val_angle)


def sweep(arch: ArchSpec, bundle, grid: SweepGrid, combos: int, epochs: int, config: InputConfig,
          seed: int = 0, init_std=INIT_STD, workers: int = 1) -> SweepResult:
    """Random search over ``grid``: ``combos`` settings, each trained for ``epochs``.

    Every run starts from the same initial weights (seeded with ``seed``)
    so two identical settings give identical results. With ``workers > 1``
    settings are trained in separate processes.
    """
    if combos < 1:
        raise ValueError("combos must be >= 1")
    train_trajs, val_trajs = split_bundle(bundle)
    config = fit_input_config(train_trajs, config)
    train_s = Samples.from_trajectories(train_trajs, config)
    val_s = Samples.from_trajectories(val_trajs, config)
    rng = np.random.default_rng(seed)
    settings = [grid.sample(rng, epochs, seed) for _ in range(combos)]
    jobs = [(arch, hp, train_s, val_s, config, init_std) for hp in settings]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            entries = list(ex.map(_sweep_one, jobs))
    else:
        entries = [_sweep_one(j) for j in jobs]
    order = sorted(range(len(entries)), key=lambda i: (entries[i].val_position, entries[i].val_angle, i))
    return SweepResult([entries[i] for i in order])


# --- curricula ---------------------------------------------------------------------------------

def run_curriculum(arch: ArchSpec, curriculum, hp: HyperParams, config: InputConfig,
                   init_std=INIT_STD, pretrained=None, meta=None) -> list:
    """Train one fresh model per stage and evaluate each on the held-out trajectory.

    Every stage starts from the same initialization (seed ``hp.seed``), so
    only the training data differs. Returns ``[(stage_index, EvalReport)]``.
    """
    if len(curriculum.stages) < 1:
        raise ValueError("curriculum has no stages")
    results = []
    size = count_params(arch)
    test_ids = None
    for i, stage in enumerate(curriculum.stages):
        model = build_model(arch, seed=hp.seed, std=init_std, pretrained=pretrained)
        cfg = fit_input_config(stage, config)
        model.input_config = cfg
        model, history = train(model, Samples.from_trajectories(stage, cfg), None, hp)
        if model.num_params() != size:
            raise ContractViolation(f"stage {i}: model has {model.num_params()} parameters, expected {size}")
        info = {"stage": i, "n_trajectories": len(stage), "train": [t.name for t in stage],
                "hp": hp.to_dict(), "final_train_loss": history.epochs[-1].train_loss if history.epochs else None}
        info.update(meta or {})
        report = evaluate(model, curriculum.test, meta=info)
        ids = tuple(f.frame_id for f in report.frames)
        if test_ids is not None and ids != test_ids:
            raise ContractViolation("curriculum stages were evaluated on different test frames")
        test_ids = ids
        results.append((i, report))
        log.info("stage %d (%d trajectories): %s", i, len(stage), report.summary())
    return results


def mean_curve(runs) -> list:
    """Average position error per stage over several curriculum runs (e.g. seeds)."""
    runs = [list(r) for r in runs]
    return [float(np.mean([r[i][1].position_mean for r in runs])) for i in range(len(runs[0]))]


def replace_hp(hp: HyperParams, **changes) -> HyperParams:
    return replace(hp, **changes)
