"""Scikit-learn style wrapper around the residual patch classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from dla.errors import ShapeMismatchError
from dla.nn import Architecture, forward, load_checkpoint, save_checkpoint, softmax
from dla.trainer import PAPER_LR_POINTS, TrainConfig, train
from dla.volume import BONE, SOFT, VESSEL

__all__ = ["ArrayPatchSource", "VoxelClassifier", "check_labels", "check_patches"]

CLASSES = np.array([VESSEL, BONE, SOFT], dtype=np.uint8)


def check_patches(X, arch: Architecture) -> np.ndarray:
    """Validate a patch array of shape (n, S, P, P) and return it as float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    expected = (arch.n_slices, arch.patch_size, arch.patch_size)
    if X.ndim != 4 or X.shape[1:] != expected:
        raise ShapeMismatchError(f"patches must have shape (n, {', '.join(map(str, expected))}), got {X.shape}")
    return X


def check_labels(y, n=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or (n is not None and y.size != n):
        raise ShapeMismatchError("labels must be a 1D array aligned with the patches")
    if not np.isin(y, CLASSES).all():
        raise ValueError("labels must be class codes 1 (vessel), 2 (bone) or 3 (soft)")
    return y.astype(np.uint8)


class ArrayPatchSource:
    """In-memory patches exposing the ``labels``/``take`` interface used by training."""

    def __init__(self, X, y):
        self.X, self.labels = X, y

    def __len__(self):
        return int(self.labels.size)

    def take(self, rows):
        return self.X[np.asarray(rows, dtype=np.int64)]


class VoxelClassifier(ClassifierMixin, BaseEstimator):
    """Three-class tissue classifier on HU patches centred on a voxel.

    ``fit`` accepts either an in-memory array of patches with labels, or any
    source object with ``labels`` and ``take(rows)`` (such as
    :class:`dla.patches.PatchSource`), in which case ``y`` is ignored.

    Parameters
    ----------
    conv_layers, base_channels, stage_boundaries, patch_size, n_slices, input_filter, pooling
        Network shape, see :class:`dla.nn.Architecture`.
    batch_size, momentum, lr_points, max_iterations, n_workers, eval_interval, patience, min_delta, val_subsample
        Optimiser settings, see :class:`dla.trainer.TrainConfig`.
    validation_fraction : float
        Share of the training rows held out for monitoring when no
        validation set is passed to ``fit``.
    random_state : int
    """

    def __init__(self, conv_layers=8, base_channels=16, stage_boundaries=None, patch_size=41, n_slices=5,
                 input_filter=5, pooling="avg", batch_size=512, momentum=0.9, lr_points=PAPER_LR_POINTS,
                 max_iterations=2000, n_workers=2, eval_interval=100, patience=5, min_delta=0.0,
                 val_subsample=600, validation_fraction=0.1, random_state=0):
        self.conv_layers = conv_layers
        self.base_channels = base_channels
        self.stage_boundaries = stage_boundaries
        self.patch_size = patch_size
        self.n_slices = n_slices
        self.input_filter = input_filter
        self.pooling = pooling
        self.batch_size = batch_size
        self.momentum = momentum
        self.lr_points = lr_points
        self.max_iterations = max_iterations
        self.n_workers = n_workers
        self.eval_interval = eval_interval
        self.patience = patience
        self.min_delta = min_delta
        self.val_subsample = val_subsample
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _architecture(self) -> Architecture:
        return Architecture(
            conv_layers=self.conv_layers, base_channels=self.base_channels,
            stage_boundaries=self.stage_boundaries, patch_size=self.patch_size,
            n_slices=self.n_slices, input_filter=self.input_filter, pooling=self.pooling,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, momentum=self.momentum, lr_points=self.lr_points,
            max_iterations=self.max_iterations, n_workers=self.n_workers,
            eval_interval=self.eval_interval, patience=self.patience, min_delta=self.min_delta,
            val_subsample=self.val_subsample, seed=self.random_state,
        )

    def _as_source(self, X, y, arch):
        if hasattr(X, "take") and hasattr(X, "labels"):
            return X
        X = check_patches(X, arch)
        return ArrayPatchSource(X, check_labels(y, X.shape[0]))

    def fit(self, X, y=None, X_val=None, y_val=None):
        arch = self._architecture()
        cfg = self._train_config()
        source = self._as_source(X, y, arch)
        if X_val is not None:
            val = self._as_source(X_val, y_val, arch)
        else:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must lie in (0, 1) when no validation set is given")
            if not isinstance(source, ArrayPatchSource):
                raise ValueError("pass X_val explicitly when X is a patch source")
            rng = np.random.default_rng([self.random_state, 2])
            perm = rng.permutation(len(source))
            n_val = max(1, int(round(self.validation_fraction * len(source))))
            val_rows, fit_rows = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            val = ArrayPatchSource(source.X[val_rows], source.labels[val_rows])
            source = ArrayPatchSource(source.X[fit_rows], source.labels[fit_rows])
        self.params_, self.history_ = train(cfg, arch, source, val)
        self.arch_ = arch
        self.classes_ = CLASSES.copy()
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_patches(X, self.arch_)
        return softmax(forward(self.params_, self.arch_, X))

    def predict(self, X) -> np.ndarray:
        # argmax keeps the first maximum, so ties go to the lowest class code
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.arch_)

    @classmethod
    def from_checkpoint(cls, path) -> "VoxelClassifier":
        params, arch = load_checkpoint(path)
        est = cls(conv_layers=arch.conv_layers, base_channels=arch.base_channels,
                  stage_boundaries=arch.stage_boundaries, patch_size=arch.patch_size,
                  n_slices=arch.n_slices, input_filter=arch.input_filter, pooling=arch.pooling)
        est.params_, est.arch_, est.classes_ = params, arch, CLASSES.copy()
        return est
