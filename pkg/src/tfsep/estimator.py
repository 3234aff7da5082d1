"""scikit-learn style wrapper: ``Separator().fit(mixtures, targets).predict(mixtures)``."""
from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_model
from .model import preset as make_preset
from .model import waveform_forward
from .objective import improvements
from .signal import StftConfig
from .train import TrainConfig, Trainer

_MODEL_KEYS = ("D", "H", "L_layers", "dropout_rate", "use_se")


def _check_waves(x, name: str) -> np.ndarray:
    """Accept (M, N) or (K, M, N) finite float arrays; always return (K, M, N)."""
    arr = check_array(np.asarray(x), ensure_2d=False, allow_nd=True, dtype=np.float64,
                      ensure_all_finite=True, input_name=name)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (M, N) or (K, M, N), got shape {arr.shape}")
    return arr


class Separator(BaseEstimator):
    """Multichannel separator trained with uPIT SI-SDR.

    ``fit`` takes mixtures ``(K, M, N)`` and reference-channel targets
    ``(K, I, N)``; ``predict`` returns estimates ``(K, I, N)`` and ``score``
    the mean SI-SDR improvement in dB. Architecture fields left as ``None``
    come from ``preset``; the microphone and speaker counts come from the data.
    """

    def __init__(self, preset="micro", D=None, H=None, L_layers=None, dropout_rate=None, use_se=None,
                 lr=1e-3, batch_size=4, max_epochs=40, clip_norm=5.0, validation_fraction=0.2,
                 frame_len=256, hop_len=128, seed=0, work_dir=None):
        self.preset = preset
        self.D = D
        self.H = H
        self.L_layers = L_layers
        self.dropout_rate = dropout_rate
        self.use_se = use_se
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.frame_len = frame_len
        self.hop_len = hop_len
        self.seed = seed
        self.work_dir = work_dir

    def _model_config(self, n_mics: int, n_src: int):
        over = {k: getattr(self, k) for k in _MODEL_KEYS if getattr(self, k) is not None}
        return make_preset(self.preset, M=n_mics, I=n_src, **over)

    def fit(self, X, y, X_val=None, y_val=None):
        X = _check_waves(X, "X")
        y = _check_waves(y, "y")
        if X.shape[0] != y.shape[0] or X.shape[2] != y.shape[2]:
            raise ValueError(f"X {X.shape} and y {y.shape} disagree on clip count or length")
        if X_val is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must be in (0, 1) when no validation set is given")
            order = np.random.default_rng(self.seed).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if n_val >= len(X):
                raise ValueError("need at least two clips to hold one out for validation")
            X_val, y_val = X[order[:n_val]], y[order[:n_val]]
            X, y = X[order[n_val:]], y[order[n_val:]]
        else:
            X_val, y_val = _check_waves(X_val, "X_val"), _check_waves(y_val, "y_val")

        model_cfg = self._model_config(X.shape[1], y.shape[1])
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                                clip_norm=self.clip_norm, seed=self.seed)
        stft_cfg = StftConfig(self.frame_len, self.hop_len)
        work = self.work_dir or tempfile.mkdtemp(prefix="tfsep-")
        trainer = Trainer(model_cfg, train_cfg, stft_cfg, work)
        trainer.fit_arrays(X.astype(np.float32), y.astype(np.float32),
                           X_val.astype(np.float32), y_val.astype(np.float32))
        best = trainer.out_dir / "best.ckpt"
        if best.exists():
            self.store_, self.model_, _ = load_model(best)
        else:
            self.store_, self.model_ = trainer.store, trainer.model
        self.stft_config_ = stft_cfg
        self.history_ = list(trainer.history)
        self.n_mics_ = model_cfg.M
        self.n_sources_ = model_cfg.I
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "store_")
        single = np.ndim(X) == 2
        X = _check_waves(X, "X")
        if X.shape[1] != self.n_mics_:
            raise ValueError(f"X has {X.shape[1]} channels, model was fitted with {self.n_mics_}")
        out = []
        for start in range(0, len(X), self.batch_size):
            est, _ = waveform_forward(self.model_, self.store_, X[start:start + self.batch_size].astype(np.float32),
                                      self.stft_config_)
            out.append(est)
        est = np.concatenate(out).astype(np.float64)
        return est[0] if single else est

    def score(self, X, y) -> float:
        """Mean SI-SDR improvement (dB) over the reference microphone."""
        X = _check_waves(X, "X")
        y = _check_waves(y, "y")
        est = self.predict(X)
        return float(np.mean([improvements(e, t, x[0]).si_sdri for e, t, x in zip(est, y, X)]))
