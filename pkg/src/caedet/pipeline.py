"""Training, evaluation and scoring workflows behind the command line."""
from __future__ import annotations

import csv
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from .detect import evaluate, fit_threshold, score_frames, write_score_rows
from .errors import ConfigError, NumericError
from .model import AutoencoderModel, encoder_specs, load_checkpoint, save_checkpoint
from .optimize import Adam, AdamConfig, bce_grad, bce_loss, pixel_accuracy

log = logging.getLogger(__name__)

DATASETS = ("ped1", "ped2", "synth")
METRICS_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


@dataclass
class RunConfig:
    dataset: str = "synth"
    data: str | None = None
    epochs: int = 10
    batch: int = 16
    lr: float = 1e-3
    seed: int = 42
    scale: int = 1
    val_fraction: float = 0.15
    quantile: float = 0.99
    size: int = 256
    bottleneck: int = 32
    ckpt: str | None = None
    metrics: str | None = None
    scores: str | None = None
    out: str | None = None

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        for name in ("epochs", "batch", "lr", "scale", "size", "bottleneck"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0 <= self.quantile <= 1:
            raise ConfigError("quantile must lie in [0, 1]")
        # raises ConfigError for sizes/scales the architecture cannot take
        encoder_specs((self.size, self.size, 1), self.bottleneck, self.scale)
        return self

    def model_config(self):
        return {"input_shape": [self.size, self.size, 1], "bottleneck_dim": self.bottleneck,
                "scale_factor": self.scale, "kernel_size": [3, 3], "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _atomic_write(path, writer, mode="w"):
    """Write through a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({"newline": "", "encoding": "utf-8"} if "b" not in mode else {})) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _split_dir(root, split):
    root = Path(root)
    return root / split if (root / split).is_dir() else root


def load_split(config: RunConfig, split: str):
    """Clips (and ground truth, if any) of the configured dataset for one split."""
    if config.data is None:
        raise ConfigError("--data is required")
    size = (config.size, config.size)
    if config.dataset == "synth":
        return D.load_frame_dirs(_split_dir(config.data, split), size)
    return D.load_ucsd(config.data, config.dataset, split, size)


def _frames_loss_acc(model, frames, batch_size):
    """Mean BCE and pixel accuracy over a frame array (every frame has the same element count)."""
    if len(frames) == 0:
        return float("nan"), float("nan")
    loss = acc = 0.0
    for i in range(0, len(frames), batch_size):
        chunk = frames[i:i + batch_size]
        pred = model.forward(chunk)
        loss += bce_loss(chunk, pred) * len(chunk)
        acc += pixel_accuracy(chunk, pred) * len(chunk)
    return loss / len(frames), acc / len(frames)


def train_model(config: RunConfig, train_frames, val_frames, progress=None):
    """Adam on mean BCE reconstruction; returns (model, metric rows)."""
    rng = np.random.default_rng(config.seed)
    model = AutoencoderModel((config.size, config.size, 1), config.bottleneck, config.scale,
                             seed=config.seed, dtype=np.float32)
    opt = Adam(model.store, AdamConfig(learning_rate=config.lr))
    rows = []
    n = len(train_frames)
    if n == 0:
        raise ConfigError("no training frames")
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        tot_loss = tot_acc = 0.0
        for b, start in enumerate(range(0, n, config.batch)):
            batch = train_frames[order[start:start + config.batch]]
            model.store.zero_grads()
            pred = model.forward(batch)
            loss = bce_loss(batch, pred)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss in epoch {epoch}, batch {b}")
            model.backward(bce_grad(batch, pred))
            opt.step()
            tot_loss += loss * len(batch)
            tot_acc += pixel_accuracy(batch, pred) * len(batch)
        val_loss, val_acc = _frames_loss_acc(model, val_frames, max(config.batch, 32))
        row = {"epoch": epoch, "train_loss": tot_loss / n, "train_acc": tot_acc / n,
               "val_loss": val_loss, "val_acc": val_acc}
        rows.append(row)
        log.info("epoch %d: train_loss=%.6f train_acc=%.6f val_loss=%.6f val_acc=%.6f",
                 epoch, row["train_loss"], row["train_acc"], val_loss, val_acc)
        if progress:
            progress(row)
    return model, rows


def write_metrics(path, rows):
    def writer(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:]])
    _atomic_write(path, writer)


def run_train(config: RunConfig):
    config.validate()
    clips, _ = load_split(config, "Train")
    train_clips, val_clips = D.split_train_val(clips, config.val_fraction)
    log.info("training on %d clips (%d frames), validating on %d clips",
             len(train_clips), sum(map(len, train_clips)), len(val_clips))
    model, rows = train_model(config, D.stack_frames(train_clips), D.stack_frames(val_clips))
    if config.ckpt:
        meta = {"run": asdict(config), "epochs_completed": config.epochs, "seed": config.seed}
        path = Path(config.ckpt)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        save_checkpoint(model, tmp, optimizer_state=True, metadata=meta)
        os.replace(tmp, path)
    if config.metrics:
        write_metrics(config.metrics, rows)
    return model, rows


@dataclass
class EvalResult:
    split: str
    pixel_accuracy: float
    loss: float
    n_frames: int
    threshold: float | None = None
    detection: object = None  # EvalReport when ground truth exists
    val_false_positives: int | None = None
    scores: list | None = None

    def lines(self):
        out = [f"[reconstruction] {self.split} pixel accuracy: {self.pixel_accuracy:.6f}",
               f"[reconstruction] {self.split} mean BCE loss: {self.loss:.6f}  ({self.n_frames} frames)"]
        if self.threshold is not None:
            out.append(f"[detection] threshold (normalized score): {self.threshold:.6f}")
            out.append(f"[detection] validation false positives: {self.val_false_positives}")
        if self.detection is not None:
            r = self.detection
            auc = "undefined" if r.auc is None else f"{r.auc:.6f}"
            eer = "undefined" if r.eer is None else f"{r.eer:.6f}"
            out += [f"[detection] frame accuracy: {r.accuracy:.6f}",
                    f"[detection] precision: {r.precision:.6f}  recall: {r.recall:.6f}",
                    f"[detection] ROC-AUC: {auc}  EER: {eer}",
                    f"[detection] anomalous frames: {r.n_anomalous}/{r.n_frames}"]
        return out


def run_eval(model: AutoencoderModel, config: RunConfig, split="Test"):
    """Reconstruction accuracy on ``split`` plus frame-level detection where labels exist.

    Validation clips (normal by construction) and evaluated clips are scored
    as one set so they share the min-max normalization; the threshold is the
    configured quantile of the validation part.
    """
    clips, gt = load_split(config, split)
    if not clips:
        raise ConfigError(f"no {split} clips found")
    frames = D.stack_frames(clips)
    loss, acc = _frames_loss_acc(model, frames, 32)
    result = EvalResult(split, acc, loss, len(frames))

    train_clips = load_split(config, "Train")[0] if split != "Train" else clips
    _, val_clips = D.split_train_val(train_clips, config.val_fraction)
    reference = val_clips or train_clips
    if not val_clips:
        log.warning("empty validation split; fitting the threshold on training clips")
    scored = score_frames(model, [*reference, *clips])
    n_ref = sum(len(c) for c in reference)
    ref_scores, eval_scores = scored[:n_ref], scored[n_ref:]
    threshold = fit_threshold([s.normalized_score for s in ref_scores], config.quantile)
    result.threshold = threshold
    result.val_false_positives = int(sum(s.normalized_score > threshold for s in ref_scores))
    result.scores = eval_scores

    labels = None
    if gt is not None and all(c.clip_id in gt for c in clips):
        labels = np.concatenate([gt[c.clip_id] for c in clips])
        result.detection = evaluate(eval_scores, labels, threshold)
    else:
        log.warning("no ground truth for the %s split; detection metrics skipped", split)
    if config.scores:
        _atomic_write(config.scores, lambda fh: write_score_rows(fh, eval_scores, labels, threshold))
    return result


def run_score(model: AutoencoderModel, input_dir, scores_path, threshold=None):
    size = model.input_shape[:2]
    clips, gt = D.load_frame_dirs(input_dir, size)
    scores = score_frames(model, clips)
    labels = None
    if gt is not None and all(c.clip_id in gt for c in clips):
        labels = np.concatenate([gt[c.clip_id] for c in clips])
    if scores_path:
        _atomic_write(scores_path, lambda fh: write_score_rows(fh, scores, labels, threshold))
    return scores


def run_synth(out_dir, config: D.SyntheticConfig, train_clips=80, test_clips=10, anomaly_rate=0.3):
    """Normal-only Train split plus a Test split with anomalies."""
    out_dir = Path(out_dir)
    train, train_gt = D.generate_synthetic(config, train_clips, 0.0, prefix="clip", stream=0)
    test, test_gt = D.generate_synthetic(config, test_clips, anomaly_rate, prefix="clip", stream=1)
    D.write_dataset(out_dir / "Train", train, train_gt)
    D.write_dataset(out_dir / "Test", test, test_gt)
    return (train, train_gt), (test, test_gt)


def load_model(path, config: RunConfig | None = None):
    model = load_checkpoint(path)
    if config is not None and config.size and list(model.input_shape) != [config.size, config.size, 1]:
        raise ConfigError(f"checkpoint input shape {model.input_shape} does not match --size {config.size}")
    return model
