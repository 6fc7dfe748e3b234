"""Training loop and top-1 evaluation.

Randomness in a run comes from one PCG64 stream seeded by ``TrainConfig.seed``.
Each epoch draws a single 64-bit word from it and derives the shuffle order,
augmentation and dropout generators from that word. The stream's state at the
end of an epoch is stored in the checkpoint, so resuming from epoch ``k``
replays epochs ``k+1..n`` exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, pcg64_to_words, save_checkpoint, words_to_pcg64
from .config import TrainConfig
from .data import Dataset, augment, iterate_epoch
from .errors import NonFiniteLossError
from .model import ModelConfig, ParameterSet, init_params, model_forward
from .optim import OptimizerState, adamw_step, clip_grad_norm, lr_at, resolve_warmup
from .tensor import cross_entropy_logits, no_grad

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "step", "train_loss", "eval_top1", "seconds")
LOG_NAME = "train_log.csv"


def predict(params: ParameterSet, config: ModelConfig, images: np.ndarray,
            batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for ``images`` as a numpy array."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model_forward(images[start:start + batch_size], params, config).data)
    return np.concatenate(out)


def evaluate_top1(params: ParameterSet, config: ModelConfig, dataset: Dataset,
                  batch_size: int = 256) -> float:
    """Fraction of samples whose arg-max logit equals the label.

    Ties resolve to the lowest class index.
    """
    logits = predict(params, config, dataset.images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def _master_stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, 0x5EED]))


def _write_log_row(path: Path, record: dict, header: bool) -> None:
    with open(path, "a" if not header else "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(LOG_HEADER)
        if record:
            writer.writerow([
                record["epoch"], record["step"], repr(record["train_loss"]),
                repr(record["eval_top1"]), f"{record['seconds']:.6f}",
            ])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {"epoch": int(r["epoch"]), "step": int(r["step"]), "train_loss": float(r["train_loss"]),
         "eval_top1": float(r["eval_top1"]), "seconds": float(r["seconds"])}
        for r in rows
    ]


def train(model_config: ModelConfig | None, train_config: TrainConfig | None, dataset: Dataset,
          checkpoint_dir, eval_dataset: Dataset | None = None, resume=None,
          single_threaded: bool = True, stop_after_epoch: int | None = None) -> list[dict]:
    """Train for ``train_config.epochs`` epochs, checkpointing after each one.

    Writes ``train_log.csv`` plus ``epoch_XXXX.ffvt`` and ``last.ffvt`` into
    ``checkpoint_dir``. ``resume`` (a Checkpoint or a path) continues a run;
    configs default to the ones stored in it. ``stop_after_epoch`` ends the
    run early without changing the schedule. Returns the per-epoch records
    written by this call.
    """
    out_dir = Path(checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_NAME

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model_config = model_config or ckpt.model_config
        train_config = train_config or ckpt.train_config
        params, state = ckpt.params, ckpt.opt_state
        master = np.random.Generator(words_to_pcg64(ckpt.rng_state))
        start_epoch, best = ckpt.epoch + 1, ckpt.best_metric
        if not log_path.exists():
            _write_log_row(log_path, {}, header=True)
    else:
        if model_config is None or train_config is None:
            raise ValueError("model_config and train_config are required unless resuming")
        params = init_params(model_config, seed=train_config.seed)
        state = OptimizerState.zeros_like(params)
        master = _master_stream(train_config.seed)
        start_epoch, best = 1, -math.inf
        _write_log_row(log_path, {}, header=True)

    if dataset.image_size != model_config.image_size:
        raise ValueError(f"dataset images are {dataset.image_size}px, model expects "
                         f"{model_config.image_size}px")
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    tc = train_config
    steps_per_epoch = math.ceil(len(dataset) / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    warmup = resolve_warmup(tc, steps_per_epoch)
    last_epoch = tc.epochs if stop_after_epoch is None else min(tc.epochs, stop_after_epoch)
    records = []

    limits = threadpool_limits(limits=1) if single_threaded else nullcontext()
    with limits:
        for epoch in range(start_epoch, last_epoch + 1):
            t0 = time.perf_counter()
            epoch_word = int(master.bit_generator.random_raw())
            dropout_rng = np.random.default_rng([epoch_word, 2])
            loss_sum, seen = 0.0, 0
            batches = iterate_epoch(dataset, tc.batch_size, shuffle_seed=epoch_word)
            for i, batch in enumerate(batches):
                if tc.flip or tc.crop_pad:
                    batch = augment(batch, tc.flip, tc.crop_pad, seed=[epoch_word, 1, i])
                params.zero_grad()
                logits = model_forward(batch.images, params, model_config, "train", dropout_rng)
                loss = cross_entropy_logits(logits, batch.labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(state.step + 1, value)
                loss.backward()
                grads = {k: p.grad.data for k, p in params.items() if p.grad is not None}
                if tc.grad_clip_norm is not None:
                    clip_grad_norm(grads, tc.grad_clip_norm)
                lr = lr_at(state.step + 1, tc, total_steps, warmup)
                adamw_step(params, grads, state, tc, lr=lr)
                loss_sum += value * len(batch)
                seen += len(batch)
            params.zero_grad()
            top1 = evaluate_top1(params, model_config, eval_dataset)
            best = max(best, top1)
            record = {"epoch": epoch, "step": state.step, "train_loss": loss_sum / seen,
                      "eval_top1": top1, "seconds": time.perf_counter() - t0}
            records.append(record)
            _write_log_row(log_path, record, header=False)
            ckpt = Checkpoint(model_config, tc, params, state, pcg64_to_words(master.bit_generator),
                              epoch, best)
            save_checkpoint(ckpt, out_dir / f"epoch_{epoch:04d}.ffvt")
            save_checkpoint(ckpt, out_dir / "last.ffvt")
            logger.info("epoch %d loss %.4f top1 %.4f", epoch, record["train_loss"], top1)
    return records
