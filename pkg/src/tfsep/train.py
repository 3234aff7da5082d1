"""Training loop: uPIT SI-SDR on waveforms, Adam, clipping, plateau schedule, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_archive, restore_store, save_archive, store_sections
from .layers import RngState
from .model import Model, ModelConfig, build, waveform_backward, waveform_forward
from .objective import improvements, pit_loss
from .optim import Adam, PlateauSchedule, clip_gradients
from .signal import StftConfig
from .synth import DatasetManifest

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    plateau_patience: int = 7
    stop_patience: int = 15
    lr_factor: float = 0.5
    clip_norm: float = 5.0
    batch_size: int = 4
    grad_accum: int = 1
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_minutes: float | None = None

    def __post_init__(self):
        for name in ("lr", "plateau_patience", "stop_patience", "lr_factor", "clip_norm",
                     "batch_size", "grad_accum", "max_epochs", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.stop_patience < self.plateau_patience:
            raise ValueError("stop_patience must be >= plateau_patience")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def load_split(manifest: DatasetManifest, split: str):
    """Stack a split into float32 arrays ``(ids, mixtures (K, M, N), targets (K, I, N))``."""
    recs = manifest.split(split)
    if not recs:
        raise ValueError(f"manifest has no {split!r} utterances")
    pairs = [manifest.load_example(r) for r in recs]
    return ([r["id"] for r in recs],
            np.stack([p[0] for p in pairs]).astype(np.float32),
            np.stack([p[1] for p in pairs]).astype(np.float32))


def batch_loss_and_grad(model, store, stft_cfg, mixtures, targets, train, rng):
    est, cache = waveform_forward(model, store, mixtures, stft_cfg, train=train, rng=rng)
    losses, grads = [], np.zeros_like(est)
    for b in range(est.shape[0]):
        value, _, g = pit_loss(est[b], targets[b], with_grad=True)
        losses.append(value)
        grads[b] = g / est.shape[0]
    return float(np.mean(losses)), grads, cache


def evaluate(model: Model, store, stft_cfg, mixtures, targets, batch_size: int = 4) -> dict:
    """Eval-mode PIT loss and SI-SDRi/SDRi against the reference channel."""
    losses, si, sd = [], [], []
    for start in range(0, len(mixtures), batch_size):
        mix = mixtures[start:start + batch_size]
        est, _ = waveform_forward(model, store, mix, stft_cfg, train=False)
        for b in range(est.shape[0]):
            tgt = targets[start + b]
            losses.append(pit_loss(est[b], tgt)[0])
            rep = improvements(est[b], tgt, mix[b, 0])
            si.append(rep.si_sdri)
            sd.append(rep.sdri)
    return {"loss": float(np.mean(losses)), "si_sdri": float(np.mean(si)), "sdri": float(np.mean(sd))}


class Trainer:
    """Owns the mutable training state; resumable from ``last.ckpt``."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, stft_cfg: StftConfig, out_dir):
        self.model_cfg, self.cfg, self.stft_cfg = model_cfg, train_cfg, stft_cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.rng = RngState(train_cfg.seed)
        store, self.model = build(model_cfg, self.rng.spawn(0))
        self.store = store.astype(np.float32)
        self.adam = Adam(self.store, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
        self.schedule = PlateauSchedule(train_cfg.lr, train_cfg.plateau_patience, train_cfg.stop_patience,
                                        train_cfg.lr_factor)
        self.epoch = 0
        self.history: list[dict] = []

    # -- persistence --------------------------------------------------------
    def meta(self) -> dict:
        return {
            "model": self.model_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "stft": self.stft_cfg.to_dict(),
            "run": {"epoch": self.epoch, "schedule": self.schedule.state_dict(),
                    "adam": self.adam.state_dict(), "rng": self.rng.get_state()},
        }

    def save(self, path) -> None:
        sections = store_sections(self.store)
        sections["adam.m"] = self.adam.m
        sections["adam.v"] = self.adam.v
        save_archive(path, sections, self.meta())

    @classmethod
    def resume(cls, path, out_dir=None, **overrides) -> "Trainer":
        sections, meta = load_archive(path)
        train_cfg = TrainConfig.from_dict({**meta["train"], **overrides})
        trainer = cls(ModelConfig.from_dict(meta["model"]), train_cfg,
                      StftConfig.from_dict(meta["stft"]), out_dir or Path(path).parent)
        restore_store(trainer.store, sections)
        run = meta["run"]
        trainer.adam.load_state_dict(run["adam"], sections["adam.m"], sections["adam.v"])
        trainer.schedule.load_state_dict(run["schedule"])
        trainer.rng.set_state(run["rng"])
        trainer.epoch = int(run["epoch"])
        metrics = trainer.out_dir / "metrics.jsonl"
        if metrics.exists():
            trainer.history = [json.loads(x) for x in metrics.read_text().splitlines() if x.strip()]
            trainer.history = [h for h in trainer.history if h["epoch"] <= trainer.epoch]
        return trainer

    # -- loop ---------------------------------------------------------------
    def train_epoch(self, mixtures, targets) -> float:
        cfg = self.cfg
        order = self.rng.generator.permutation(len(mixtures))
        losses = []
        step_batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for k in range(0, len(step_batches), cfg.grad_accum):
            self.store.zero_grad()
            group = step_batches[k:k + cfg.grad_accum]
            for idx in group:
                loss, g, cache = batch_loss_and_grad(self.model, self.store, self.stft_cfg,
                                                     mixtures[idx], targets[idx], True, self.rng)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {self.epoch + 1}")
                waveform_backward(self.model, self.store, self.stft_cfg, cache, g / len(group))
                losses.append(loss)
            clip_gradients(self.store, cfg.clip_norm)
            self.adam.step(self.store, self.schedule.lr)
        return float(np.mean(losses))

    def fit(self, manifest: DatasetManifest, epochs: int | None = None, callback=None) -> list[dict]:
        _, tr_mix, tr_tgt = load_split(manifest, "train")
        _, va_mix, va_tgt = load_split(manifest, "val")
        return self.fit_arrays(tr_mix, tr_tgt, va_mix, va_tgt, epochs, callback)

    def fit_arrays(self, tr_mix, tr_tgt, va_mix, va_tgt, epochs=None, callback=None) -> list[dict]:
        """Train until ``max_epochs``, the stop rule, the time budget, or a truthy ``callback(record)``."""
        if tr_mix.shape[1] != self.model_cfg.M:
            raise ValueError(f"data has {tr_mix.shape[1]} channels, model expects M={self.model_cfg.M}")
        target_epoch = self.cfg.max_epochs if epochs is None else min(self.cfg.max_epochs, self.epoch + epochs)
        metrics_path = self.out_dir / "metrics.jsonl"
        t_start = time.perf_counter()
        while self.epoch < target_epoch and not self.schedule.stopped:
            t0 = time.perf_counter()
            lr = self.schedule.lr
            try:
                train_loss = self.train_epoch(tr_mix, tr_tgt)
            except (TrainingDiverged, FloatingPointError) as exc:
                raise TrainingDiverged(f"{exc}; last good checkpoint: {self.out_dir / 'last.ckpt'}") from exc
            val = evaluate(self.model, self.store, self.stft_cfg, va_mix, va_tgt, self.cfg.batch_size)
            if not np.isfinite(val["loss"]):
                raise TrainingDiverged(f"non-finite validation loss; last good checkpoint: {self.out_dir / 'last.ckpt'}")
            self.epoch += 1
            event = self.schedule.step(val["loss"])
            record = {"epoch": self.epoch, "lr": lr, "train_loss": train_loss, "val_loss": val["loss"],
                      "val_si_sdri": val["si_sdri"], "val_sdri": val["sdri"],
                      "wall_time": time.perf_counter() - t0}
            self.history.append(record)
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
            log.info("epoch %d lr %.2e train %.3f val %.3f si-sdri %.2f dB (%.1fs)", self.epoch, lr,
                     train_loss, val["loss"], val["si_sdri"], record["wall_time"])
            if event["improved"]:
                self.save(self.out_dir / "best.ckpt")
            self.save(self.out_dir / "last.ckpt")
            if callback is not None and callback(record):
                break
            if self.cfg.max_minutes and (time.perf_counter() - t_start) / 60 > self.cfg.max_minutes:
                log.info("time budget of %.1f min reached", self.cfg.max_minutes)
                break
        return self.history


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest: DatasetManifest, out_dir,
          stft_cfg: StftConfig | None = None) -> Trainer:
    if stft_cfg is None:
        sr = manifest.records[0]["sample_rate"]
        stft_cfg = StftConfig.from_ms(sr)
    trainer = Trainer(model_cfg, train_cfg, stft_cfg, out_dir)
    trainer.fit(manifest)
    return trainer
