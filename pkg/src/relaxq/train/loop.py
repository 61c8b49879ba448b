"""Training loop, evaluation and the post-hoc rounding baseline."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import (
    Adam,
    NonFiniteGradient,
    RngStream,
    backward,
    new_tape,
    no_grad,
    set_default_dtype,
    softmax_cross_entropy,
)
from ..nn.model import Model, build_model, grid_distance
from ..quant import Mode
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset, load_mnist, make_synthetic

LAST_CHECKPOINT = "last.ckpt.npz"
BEST_CHECKPOINT = "best.ckpt.npz"
LOG_FILE = "log.csv"


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss or gradient.

    ``checkpoint`` is the path of the last good checkpoint (``None`` when
    training runs without an output directory) and ``state`` its in-memory
    copy.
    """

    def __init__(self, message, epoch, step, checkpoint=None, state=None):
        super().__init__(message)
        self.epoch, self.step, self.checkpoint, self.state = epoch, step, checkpoint, state


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFF_FFFF for k in keys]).generate_state(1, np.uint64)[0])


@dataclass
class EvalResult:
    error: float
    loss: float
    error_std: float = 0.0
    loss_std: float = 0.0
    per_seed: list = field(default_factory=list)


def _single_pass(model: Model, ds: Dataset, phase: str, rng, batch_size: int, bn: str | None, dtype):
    wrong, loss_sum = 0, 0.0
    with no_grad():
        for x, y in ds.batches(batch_size, dtype=dtype):
            logits = model.forward(x, phase=phase, rng=rng, bn=bn)
            wrong += int(np.sum(logits.data.argmax(axis=1) != y))
            loss_sum += softmax_cross_entropy(logits, y).item() * len(y)
    return wrong / len(ds), loss_sum / len(ds)


def evaluate(model: Model, ds: Dataset, phase: str = "eval_hard", seeds=(0,), batch_size: int = 1000,
             bn: str | None = None, dtype=np.float64) -> EvalResult:
    """Top-1 error and mean cross-entropy.

    ``eval_hard`` is deterministic and runs once; stochastic phases run once
    per seed and report the mean and standard deviation.
    """
    if len(ds) == 0:
        raise ValueError("evaluate: empty dataset")
    if phase == "eval_hard":
        err, loss = _single_pass(model, ds, phase, None, batch_size, bn, dtype)
        return EvalResult(err, loss, per_seed=[(err, loss)])
    runs = [_single_pass(model, ds, phase, RngStream(s), batch_size, bn, dtype) for s in seeds]
    errs, losses = np.array(runs).T
    return EvalResult(float(errs.mean()), float(losses.mean()), float(errs.std()), float(losses.std()), runs)


def quantizer_snapshot(model: Model) -> dict:
    """Per-quantizer alpha and sigma plus the weight distance to grid."""
    row = {}
    for layer in model.compute_layers():
        for key, q in layer.quantizers().items():
            if q.mode is Mode.IDENTITY or not q.initialized:
                continue
            row[f"{key}.alpha"] = q.grid.alpha_value
            row[f"{key}.sigma"] = q.noise.sigma_value
        wq = layer.weight_quantizer
        if wq is not None and wq.initialized and wq.mode is not Mode.IDENTITY:
            row[f"{layer.name}.grid_distance"] = grid_distance(layer.weight.data, wq)
    return row


class Trainer:
    """Owns the model, optimizer and random streams of one training run."""

    def __init__(self, config: TrainConfig, train_ds: Dataset, val_ds: Dataset, out_dir: str | None = None,
                 verbose: bool = False):
        set_default_dtype(config.dtype)
        self.config = config
        self.dtype = np.dtype(config.dtype).type
        self.train_ds, self.val_ds = train_ds, val_ds
        self.out_dir = out_dir
        self.verbose = verbose
        self.model = build_model(config.model, seed=derive_seed(config.seed, 1))
        self.optimizer = Adam(self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.data_rng = RngStream(derive_seed(config.seed, 2))
        self.noise_rng = RngStream(derive_seed(config.seed, 3))
        self.epoch = 0
        self.step = 0
        self.log: list[dict] = []
        self.best_epoch = 0
        self.best_val_loss = math.inf
        self.best_state: dict | None = None
        self.initialized = False
        self._last_good: tuple[dict, dict] | None = None

    # setup

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_ds) / self.config.batch_size)

    def initialize(self) -> None:
        """Initialize grids from the weights and a random training minibatch."""
        rng = RngStream(derive_seed(self.config.seed, 4))
        idx = rng.generator.choice(len(self.train_ds), size=min(self.config.batch_size, len(self.train_ds)),
                                   replace=False)
        self.model.init_quantizers(self.train_ds.images[idx].astype(self.dtype))
        self.initialized = True

    def lr_at(self, step: int) -> float:
        """Constant, then linear decay towards zero over the last anneal epochs."""
        cfg = self.config
        total = cfg.epochs * self.steps_per_epoch
        anneal = cfg.anneal_epochs * self.steps_per_epoch
        if anneal == 0 or step < total - anneal:
            return cfg.lr
        return cfg.lr * (total - step) / anneal

    # one epoch

    def _diverged(self, message):
        ckpt = os.path.join(self.out_dir, LAST_CHECKPOINT) if self.out_dir and self._last_good else None
        return TrainingDiverged(message, self.epoch + 1, self.step, ckpt, self._last_good)

    def train_epoch(self) -> float:
        losses = []
        model, opt = self.model, self.optimizer
        for x, y in self.train_ds.batches(self.config.batch_size, self.data_rng, self.dtype):
            opt.lr = self.lr_at(self.step)
            new_tape()
            loss = softmax_cross_entropy(model.forward(x, phase="train", rng=self.noise_rng), y)
            value = loss.item()
            if not math.isfinite(value):
                raise self._diverged(f"non-finite loss {value} at step {self.step}")
            backward(loss)
            try:
                opt.step()
            except NonFiniteGradient as err:
                raise self._diverged(f"{err} at step {self.step}") from err
            opt.zero_grad()
            losses.append(value)
            self.step += 1
        return float(np.mean(losses))

    def validate(self) -> dict:
        """Validation loss / relaxed error with minibatch statistics, and hard error."""
        cfg = self.config
        seeds = [derive_seed(cfg.seed, 5, self.epoch, s) for s in range(cfg.eval_seeds)]
        relaxed = evaluate(self.model, self.val_ds, "eval_relaxed", seeds, cfg.eval_batch_size,
                           bn="batch_frozen", dtype=self.dtype)
        hard = evaluate(self.model, self.val_ds, "eval_hard", batch_size=cfg.eval_batch_size, dtype=self.dtype)
        return {"val_loss": relaxed.loss, "val_err_relaxed": relaxed.error, "val_err_hard": hard.error}

    # driver

    def run(self) -> list[dict]:
        """Train until ``config.epochs`` or early stopping; return the log."""
        if not self.initialized:
            self.initialize()
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
        cfg = self.config
        while self.epoch < cfg.epochs:
            start = time.perf_counter()
            train_loss = self.train_epoch()
            self.epoch += 1
            row = {"epoch": self.epoch, "lr": self.lr_at(self.step - 1), "train_loss": train_loss}
            row.update(self.validate())
            row.update(quantizer_snapshot(self.model))
            self.log.append(row)
            if row["val_loss"] < self.best_val_loss:
                self.best_val_loss, self.best_epoch = row["val_loss"], self.epoch
                self.best_state = self.model.state_dict()
            self._last_good = self.checkpoint_payload()
            if self.out_dir:
                save_checkpoint(os.path.join(self.out_dir, LAST_CHECKPOINT), *self._last_good)
                if self.best_epoch == self.epoch:
                    save_checkpoint(os.path.join(self.out_dir, BEST_CHECKPOINT), *self.model_payload())
                write_log(os.path.join(self.out_dir, LOG_FILE), self.log)
            if self.verbose:
                print(format_row(row, time.perf_counter() - start), flush=True)
            if cfg.patience is not None and self.epoch - self.best_epoch >= cfg.patience:
                break
        return self.log

    def restore_best(self) -> None:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)

    # checkpoints

    def model_payload(self) -> tuple[dict, dict]:
        return model_payload(self.model, self.config, self.epoch)

    def checkpoint_payload(self) -> tuple[dict, dict]:
        arrays, meta = self.model_payload()
        st = self.optimizer.state
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"adam/m/{i}"] = m
            arrays[f"adam/v/{i}"] = v
        if self.best_state is not None:
            arrays.update({f"best/{k}": v for k, v in self.best_state.items()})
        meta.update(
            kind="training",
            adam={"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                  "weight_decay": st.weight_decay, "step": st.step, "n": len(st.m)},
            rng={"data": self.data_rng.get_state(), "noise": self.noise_rng.get_state()},
            step=self.step, log=self.log, best_epoch=self.best_epoch,
            best_val_loss=self.best_val_loss if math.isfinite(self.best_val_loss) else None,
            initialized=self.initialized,
        )
        return arrays, meta

    def save(self, path) -> None:
        save_checkpoint(path, *self.checkpoint_payload())

    @classmethod
    def resume(cls, path, train_ds: Dataset, val_ds: Dataset, out_dir: str | None = None,
               verbose: bool = False) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "training":
            raise ValueError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
        trainer = cls(TrainConfig.from_dict(meta["config"]), train_ds, val_ds, out_dir, verbose)
        trainer.model.load_state_dict(_strip(arrays, "param/"))
        trainer.model.load_quantizer_meta(meta["quantizers"])
        st = trainer.optimizer.state
        a = meta["adam"]
        st.lr, st.beta1, st.beta2, st.eps = a["lr"], a["beta1"], a["beta2"], a["eps"]
        st.weight_decay, st.step = a["weight_decay"], a["step"]
        st.m = [arrays[f"adam/m/{i}"].copy() for i in range(a["n"])]
        st.v = [arrays[f"adam/v/{i}"].copy() for i in range(a["n"])]
        trainer.data_rng.set_state(meta["rng"]["data"])
        trainer.noise_rng.set_state(meta["rng"]["noise"])
        trainer.epoch, trainer.step = meta["epoch"], meta["step"]
        trainer.log = meta["log"]
        trainer.best_epoch = meta["best_epoch"]
        bvl = meta["best_val_loss"]
        trainer.best_val_loss = math.inf if bvl is None else bvl
        best = _strip(arrays, "best/")
        trainer.best_state = best or None
        trainer.initialized = meta["initialized"]
        return trainer


def load_splits(config: TrainConfig, data_dir: str | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Train / validation / test sets; validation is the tail of the training file."""
    if config.data == "mnist":
        directory = data_dir or config.data_dir
        train_full, test = load_mnist(directory, "train"), load_mnist(directory, "test")
    else:
        n = config.synthetic_n
        train_full = make_synthetic(config.synthetic_classes, n, seed=derive_seed(config.seed, 6))
        test = make_synthetic(config.synthetic_classes, max(n // 4, 1), seed=derive_seed(config.seed, 7))
        test.split = "test"
    train, val = train_full.split_tail(min(config.val_size, len(train_full) // 5))
    return train, val, test


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_model(path) -> tuple[Model, TrainConfig]:
    """Model (with its config) from a model or training checkpoint."""
    arrays, meta = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    set_default_dtype(config.dtype)
    model = build_model(config.model, seed=0)
    model.load_state_dict(_strip(arrays, "param/"))
    model.load_quantizer_meta(meta["quantizers"])
    return model, config


def model_payload(model: Model, config: TrainConfig, epoch: int = 0) -> tuple[dict, dict]:
    """Arrays and header describing a model alone (what eval / quantize need)."""
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    meta = {"kind": "model", "config": config.to_dict(), "quantizers": model.quantizer_meta(), "epoch": epoch}
    return arrays, meta


def save_model(path, model: Model, config: TrainConfig, epoch: int = 0) -> None:
    save_checkpoint(path, *model_payload(model, config, epoch))


def round_posthoc(model: Model, config: TrainConfig, bits_w: int, bits_a: int, calib: Dataset,
                  seed: int = 0) -> tuple[Model, TrainConfig]:
    """Rounding baseline: copy a full-precision model onto fresh grids.

    Grids get their range-based initial values (weights from the trained
    weights, activations from a random calibration minibatch), every
    quantizer switches to hard rounding, and batchnorm statistics are
    re-estimated under the rounded network.
    """
    spec = config.model.to_dict()
    spec.update(bits_w=bits_w, bits_a=bits_a, mode=Mode.HARD.value)
    for desc in spec["layers"]:
        desc.pop("bits_w", None)
        desc.pop("bits_a", None)
        desc.pop("mode", None)
    new_config = TrainConfig.from_dict({**config.to_dict(), "model": spec})
    rounded = build_model(new_config.model, seed=0)
    state = model.state_dict()
    for name, p in rounded.named_parameters().items():
        if name in state:
            p.data = np.array(state[name], dtype=p.data.dtype, copy=True)
    for bn, src in zip(rounded.batchnorms(), model.batchnorms()):
        bn.running_mean, bn.running_var = src.running_mean.copy(), src.running_var.copy()
    rng = RngStream(seed)
    idx = rng.generator.choice(len(calib), size=min(config.batch_size, len(calib)), replace=False)
    rounded.init_quantizers(calib.images[idx].astype(np.float64))
    rounded.reestimate_batchnorm(calib.batches(config.eval_batch_size))
    return rounded, new_config


def write_log(path, rows: list[dict]) -> None:
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def format_row(row: dict, seconds: float | None = None) -> str:
    return (f"epoch {row['epoch']:3d}  lr {row['lr']:.2e}  train {row['train_loss']:.4f}  "
            f"val {row['val_loss']:.4f}  err relaxed {row['val_err_relaxed']:.4f}  hard {row['val_err_hard']:.4f}"
            + (f"  ({seconds:.1f}s)" if seconds is not None else ""))
