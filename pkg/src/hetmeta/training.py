"""Episodic meta-training and evaluation.

Each optimizer step accumulates gradients over a group of independently
sampled episodes (uniform task choice, per-class sampling without
replacement), averages them, and applies one Adam update. Meta-validation
loss is checked on a fixed set of pre-sampled episodes for early stopping;
the best-validation parameters are returned.

Checkpoints are a small versioned binary format: magic ``HMCP``, version,
a JSON metadata blob, then named little-endian float32 arrays with shapes
(see ``save_checkpoint``). Training reports serialize as one ``key=value``
record per line.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, finite_checks
from .data import CorpusSplit, SamplerConfig, sample_episode
from .errors import (
    InvalidConfigError,
    InvalidValueError,
    NumericalFailureError,
    TaskNotSampleableError,
)
from .heads import (
    GpHead,
    class_posterior,
    classification_loss,
    compute_prototypes,
    gp_predict,
    init_gp_head,
    regression_loss,
)
from .model import (
    CLASSIFICATION,
    REGRESSION,
    Episode,
    ModelConfig,
    forward_embed,
    init_model_params,
    named_parameters,
)

HEAD_PROTOTYPE = "prototype"
HEAD_GP = "gp"

CHECKPOINT_MAGIC = b"HMCP"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    episodes_per_step: int = 8      # gradient accumulation group size
    max_epochs: int = 5000          # one epoch = one pass of |meta-train| episodes
    validation_interval: int = 10   # epochs between validation checks
    patience: int = 50              # validation checks without improvement
    seed: int = 0
    head: str = HEAD_PROTOTYPE
    grad_clip: float = 5.0          # global-norm clip; 0 disables
    val_trials: int = 2             # fixed episodes per validation task
    max_skip_ratio: float = 0.01
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train_shots: tuple | None = None  # draw per-episode shots from this set
    verbose: bool = False             # print one line per validation interval

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be positive")
        if self.episodes_per_step < 1:
            raise InvalidConfigError("episodes_per_step must be >= 1")
        if self.head not in (HEAD_PROTOTYPE, HEAD_GP):
            raise InvalidConfigError(f"unknown head {self.head!r}")


@dataclass
class IntervalRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float  # accuracy for classification, MSE for regression


@dataclass
class TrainReport:
    intervals: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopping_epoch: int = 0
    wall_clock_seconds: float = 0.0
    episodes_seen: int = 0
    episodes_skipped: int = 0

    def to_text(self) -> str:
        lines = []
        for rec in self.intervals:
            lines.append(
                f"epoch={rec.epoch} train_loss={rec.train_loss:.6f} "
                f"val_loss={rec.val_loss:.6f} val_metric={rec.val_metric:.6f}"
            )
        lines.append(
            f"best_epoch={self.best_epoch} best_val_loss={self.best_val_loss:.6f} "
            f"stopping_epoch={self.stopping_epoch} "
            f"wall_clock_seconds={self.wall_clock_seconds:.3f} "
            f"episodes_seen={self.episodes_seen} episodes_skipped={self.episodes_skipped}"
        )
        return "\n".join(lines) + "\n"


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, grads: dict, state: AdamState, lr: float) -> None:
    """Textbook Adam with bias correction; leaf data references are swapped,
    never mutated in place. Aborts (raising) on any non-finite gradient."""
    for name, _ in named_params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalFailureError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = v
        # moment buffers are privately owned, updated in place
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# -- per-episode loss ----------------------------------------------------------


def episode_loss(ep: Episode, mcfg: ModelConfig, blocks, head: str,
                 gp_head: GpHead | None):
    """Forward one episode and return ``(loss, prediction)`` where prediction
    is the posterior matrix (classification) or ``(mean, variance)``."""
    z_l, z_u = forward_embed(ep, mcfg, blocks)
    if head == HEAD_PROTOTYPE:
        protos = compute_prototypes(z_l, ep.y_labeled)
        post = class_posterior(z_u, protos)
        return classification_loss(post, ep.y_unlabeled), post
    mean, var = gp_predict(z_u, z_l, ep.y_labeled, gp_head)
    return regression_loss(mean, var, ep.y_unlabeled), (mean, var)


def episode_accuracy(posteriors: np.ndarray, y_unlabeled: np.ndarray) -> float:
    """Fraction of argmax-correct predictions over the unlabeled examples."""
    return float(np.mean(np.argmax(posteriors, axis=1) == np.argmax(y_unlabeled, axis=1)))


def episode_mse(mean: np.ndarray, y_unlabeled: np.ndarray) -> float:
    return float(np.mean((mean - y_unlabeled) ** 2))


def _episode_metric(ep: Episode, prediction, head: str) -> float:
    if head == HEAD_PROTOTYPE:
        return episode_accuracy(prediction.data, ep.y_unlabeled)
    mean, _var = prediction
    return episode_mse(mean.data, ep.y_unlabeled)


# -- training loop --------------------------------------------------------------


def _draw_episode(tasks, scfg: SamplerConfig, rng, train_shots) -> Episode:
    for _ in range(100):
        ds = tasks[int(rng.integers(len(tasks)))]
        cfg = scfg
        if train_shots is not None and ds.kind == CLASSIFICATION:
            cfg = replace(scfg, shots=int(rng.choice(train_shots)))
        try:
            return sample_episode(ds, cfg, rng)
        except TaskNotSampleableError:
            continue
    raise TaskNotSampleableError("no sampleable task after 100 draws")


def _diagnose_episode(ep, mcfg, blocks, head, gp_head):
    """Re-run a failing episode with per-op checks on so the raised error
    names the offending op."""
    with finite_checks(True):
        episode_loss(ep, mcfg, blocks, head, gp_head)
    raise NumericalFailureError("loss was non-finite but the re-run did not reproduce it")


def _fixed_validation_episodes(corpus: CorpusSplit, tcfg: TrainConfig):
    rng = np.random.default_rng([tcfg.seed, 0x5EED])
    episodes = []
    shots = tcfg.train_shots
    for ds in corpus.validation:
        for trial in range(tcfg.val_trials):
            cfg = tcfg.sampler
            if shots is not None and ds.kind == CLASSIFICATION:
                cfg = replace(cfg, shots=int(shots[trial % len(shots)]))
            try:
                episodes.append(sample_episode(ds, cfg, rng))
            except TaskNotSampleableError:
                continue
    return episodes


def _validate(episodes, mcfg, blocks, head, gp_head):
    losses, metrics = [], []
    with finite_checks(False):
        for ep in episodes:
            try:
                loss, pred = episode_loss(ep, mcfg, blocks, head, gp_head)
            except NumericalFailureError:
                losses.append(float("inf"))
                continue
            value = float(loss.data)
            losses.append(value if np.isfinite(value) else float("inf"))
            metrics.append(_episode_metric(ep, pred, head))
    val_loss = float(np.mean(losses)) if losses else float("inf")
    val_metric = float(np.mean(metrics)) if metrics else float("nan")
    return val_loss, val_metric


def meta_train(corpus: CorpusSplit, mcfg: ModelConfig, tcfg: TrainConfig):
    """Run the episodic training loop and return ``(blocks, gp_head, report)``
    with the parameters rolled back to the best validation checkpoint."""
    if not corpus.train:
        raise InvalidConfigError("meta-train split is empty")
    start = time.perf_counter()
    rng = np.random.default_rng([tcfg.seed, 0x7EA1])
    init_rng = np.random.default_rng([tcfg.seed, 0x1217])
    blocks = init_model_params(mcfg, init_rng)
    gp_head = init_gp_head() if tcfg.head == HEAD_GP else None
    params = named_parameters(blocks, gp_head)

    val_episodes = _fixed_validation_episodes(corpus, tcfg)
    report = TrainReport()
    best = {name: p.data.copy() for name, p in params}
    state = AdamState()
    patience_left = tcfg.patience
    steps_per_epoch = max(1, math.ceil(len(corpus.train) / tcfg.episodes_per_step))
    interval_losses = []
    stop = False

    for epoch in range(1, tcfg.max_epochs + 1):
        for _step in range(steps_per_epoch):
            grads: dict = {}
            used = 0
            step_loss = 0.0
            for _ in range(tcfg.episodes_per_step):
                ep = _draw_episode(corpus.train, tcfg.sampler, rng, tcfg.train_shots)
                report.episodes_seen += 1
                try:
                    with finite_checks(False):
                        with Tape() as tape:
                            loss, _ = episode_loss(ep, mcfg, blocks, tcfg.head, gp_head)
                        value = float(loss.data)
                        if not np.isfinite(value):
                            _diagnose_episode(ep, mcfg, blocks, tcfg.head, gp_head)
                        tape.backward(loss)
                except (NumericalFailureError, InvalidValueError):
                    report.episodes_skipped += 1
                    if (report.episodes_seen >= 100
                            and report.episodes_skipped > tcfg.max_skip_ratio * report.episodes_seen):
                        raise NumericalFailureError(
                            f"skipped {report.episodes_skipped} of {report.episodes_seen} episodes"
                        )
                    continue
                for name, p in params:
                    if p.grad is not None:
                        acc = grads.get(name)
                        grads[name] = p.grad if acc is None else acc + p.grad
                    p.grad = None
                step_loss += value
                used += 1
            if used == 0:
                continue
            for name in grads:
                grads[name] = grads[name] / used
            interval_losses.append(step_loss / used)
            clip_gradients(grads, tcfg.grad_clip)
            try:
                adam_step(params, grads, state, tcfg.learning_rate)
            except NumericalFailureError:
                report.episodes_skipped += tcfg.episodes_per_step
                continue

        if epoch % tcfg.validation_interval == 0 or epoch == tcfg.max_epochs:
            val_loss, val_metric = _validate(val_episodes, mcfg, blocks, tcfg.head, gp_head)
            train_loss = float(np.mean(interval_losses)) if interval_losses else float("nan")
            interval_losses = []
            report.intervals.append(IntervalRecord(epoch, train_loss, val_loss, val_metric))
            if tcfg.verbose:
                print(f"epoch {epoch}: train_loss={train_loss:.4f} "
                      f"val_loss={val_loss:.4f} val_metric={val_metric:.4f}",
                      flush=True)
            if val_loss < report.best_val_loss:
                report.best_val_loss = val_loss
                report.best_epoch = epoch
                best = {name: p.data.copy() for name, p in params}
                patience_left = tcfg.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    stop = True
        report.stopping_epoch = epoch
        if stop:
            break

    for name, p in params:
        p.data = best[name]
        p.grad = None
    report.wall_clock_seconds = time.perf_counter() - start
    return blocks, gp_head, report


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalResult:
    mean: float
    stderr: float
    per_task: list

    def __str__(self):
        return f"{self.mean:.3f} +/- {self.stderr:.3f}"


def evaluate(tasks, mcfg: ModelConfig, blocks, head: str, gp_head,
             scfg: SamplerConfig, trials: int, seed: int) -> EvalResult:
    """Mean episode metric (accuracy, or MSE for the GP head) per task over
    ``trials`` sampled episodes, then mean and standard error across tasks."""
    per_task = []
    for idx, ds in enumerate(tasks):
        rng = np.random.default_rng([seed, idx])
        scores = []
        for _ in range(trials):
            try:
                ep = sample_episode(ds, scfg, rng)
            except TaskNotSampleableError:
                break
            _loss, pred = episode_loss(ep, mcfg, blocks, head, gp_head)
            scores.append(_episode_metric(ep, pred, head))
        if scores:
            per_task.append(float(np.mean(scores)))
    if not per_task:
        raise InvalidConfigError("no evaluable tasks")
    arr = np.asarray(per_task)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return EvalResult(mean=float(arr.mean()), stderr=stderr, per_task=per_task)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, named_params, meta: dict) -> None:
    """Byte layout (all integers little-endian):

    ``HMCP`` | uint32 version | uint32 meta_len | meta (UTF-8 JSON) |
    uint32 count | count x [uint16 name_len | name | uint8 ndim |
    ndim x uint32 dims | float32 data].
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(named_params)))
    for name, p in named_params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        # asarray keeps 0-d shapes (ascontiguousarray would promote them to 1-d)
        arr = np.asarray(p.data, dtype="<f4", order="C")
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(arrays, meta)`` with float32 arrays keyed by name."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidValueError(f"{path}: not a checkpoint file")
    offset = 4
    (version,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise InvalidValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    meta = json.loads(data[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        arrays[name] = arr.copy()
    return arrays, meta


def restore_model(meta: dict, arrays: dict):
    """Rebuild (mcfg, blocks, gp_head) from checkpoint metadata and weights."""
    mcfg = ModelConfig(**meta["model"])
    head = meta.get("head", HEAD_PROTOTYPE)
    blocks = init_model_params(mcfg, np.random.default_rng(0))
    gp_head = init_gp_head() if head == HEAD_GP else None
    params = named_parameters(blocks, gp_head)
    names = {name for name, _ in params}
    if names != set(arrays):
        missing = sorted(names - set(arrays))
        surplus = sorted(set(arrays) - names)
        raise InvalidValueError(
            f"checkpoint does not match the configured model "
            f"(missing {missing}, surplus {surplus})"
        )
    for name, p in params:
        if p.data.shape != arrays[name].shape:
            raise InvalidValueError(
                f"checkpoint shape {arrays[name].shape} for {name} "
                f"does not match model {p.data.shape}"
            )
        p.data = arrays[name].astype(p.data.dtype)
    return mcfg, blocks, gp_head
