"""Scikit-learn style classifiers wrapping the fusion networks.

Both estimators follow the usual conventions: constructor arguments are
stored untouched, fitted state lives in trailing-underscore attributes,
and ``fit`` / ``predict`` / ``decision_function`` / ``get_params`` compose
with the wider ecosystem. Training is a seeded, single-threaded
balanced-batch loop so a (config, seed) pair maps to one exact parameter
trajectory.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import DivergedLoss, InsufficientData, ShapeMismatch, TrainingError
from .fusion import MlpFusionNet, TransformerFusionNet, bce_with_logits, bce_with_logits_grad
from .nn import Adam


def check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeMismatch(f"labels must be 1-d, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (not speaking) or 1 (speaking)")
    return y.astype(np.int64)


class _FusionClassifier(ClassifierMixin, BaseEstimator):
    """Shared balanced-batch training loop; subclasses build the network."""

    def __init__(self, learning_rate=0.001, weight_decay=1e-4, max_epochs=50,
                 batch_size=128, seed=0, threshold=0.0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.threshold = threshold

    # subclass hooks -------------------------------------------------------
    def _build_net(self, X):
        raise NotImplementedError

    def _check_X(self, X) -> np.ndarray:
        raise NotImplementedError

    # sklearn surface ------------------------------------------------------
    def fit(self, X, y, sample_ids=None, forbidden_ids=None):
        """Train from a fresh initialization; returns self."""
        if self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even")
        X = self._check_X(X)
        y = check_labels(y)
        if len(X) != len(y):
            raise ShapeMismatch(f"{len(X)} inputs vs {len(y)} labels")
        self.classes_ = np.array([0, 1])
        self.net_ = self._build_net(X)
        self.optimizer_ = Adam([p for _, p in self.net_.param_items()],
                               lr=self.learning_rate, weight_decay=self.weight_decay)
        self.loss_history_ = []
        self.batch_log_ = []
        self.epochs_run_ = 0
        self._run_epochs(X, y, self.max_epochs, sample_ids, forbidden_ids)
        return self

    def continue_fit(self, X, y, additional_epochs, sample_ids=None, forbidden_ids=None):
        """Resume training from the current state without reinitializing."""
        if not hasattr(self, "net_"):
            raise TrainingError("continue_fit called before fit/restore")
        X = self._check_X(X)
        y = check_labels(y)
        self._run_epochs(X, y, additional_epochs, sample_ids, forbidden_ids)
        return self

    def _run_epochs(self, X, y, n_epochs, sample_ids, forbidden_ids):
        forbidden = set(forbidden_ids) if forbidden_ids else set()
        idx_by_class = [np.flatnonzero(y == c) for c in (0, 1)]
        half = self.batch_size // 2
        batches_per_epoch = min(len(idx_by_class[0]), len(idx_by_class[1])) // half
        if n_epochs > 0 and batches_per_epoch == 0:
            raise InsufficientData(
                f"need >= {half} segments per class for one balanced batch, "
                f"have {len(idx_by_class[0])} / {len(idx_by_class[1])}"
            )
        for _ in range(n_epochs):
            # one fresh generator per (seed, epoch): resumable mid-run
            rng = np.random.default_rng([self.seed, self.epochs_run_])
            perms = [rng.permutation(idx) for idx in idx_by_class]
            epoch_losses = []
            for b in range(batches_per_epoch):
                batch_idx = np.concatenate([perm[b * half:(b + 1) * half] for perm in perms])
                batch_idx = batch_idx[rng.permutation(len(batch_idx))]
                if sample_ids is not None:
                    ids = [sample_ids[i] for i in batch_idx]
                    leaked = forbidden.intersection(ids)
                    if leaked:
                        raise TrainingError(f"held-out segments leaked into a training batch: {sorted(leaked)[:5]}")
                    self.batch_log_.append(ids)
                loss = self._train_step(X[batch_idx], y[batch_idx])
                if not np.isfinite(loss):
                    raise DivergedLoss(
                        f"non-finite loss at epoch {self.epochs_run_}, batch {b} "
                        f"(lr={self.learning_rate})"
                    )
                epoch_losses.append(loss)
            self.loss_history_.append(float(np.mean(epoch_losses)))
            self.epochs_run_ += 1

    def _train_step(self, Xb, yb) -> float:
        logits = self.net_.forward(Xb, train=True)
        if not np.all(np.isfinite(logits)):
            raise DivergedLoss(
                f"non-finite logits at epoch {self.epochs_run_} "
                f"(lr={self.learning_rate}, weight_decay={self.weight_decay})"
            )
        loss = float(bce_with_logits(logits, yb).mean())
        dlogits = bce_with_logits_grad(logits, yb) / len(yb)
        self.net_.backward(dlogits)
        self.optimizer_.step([self.net_.grads[name] for name, _ in self.net_.param_items()])
        return loss

    def decision_function(self, X) -> np.ndarray:
        if not hasattr(self, "net_"):
            raise TrainingError("estimator is not fitted")
        X = self._check_X(X)
        return np.asarray(self.net_.forward(X, train=False), dtype=np.float64)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > self.threshold).astype(np.int64)

    # checkpoint plumbing ---------------------------------------------------
    def restore(self, X_like, tensors, optimizer_state, epochs_run, loss_history):
        """Rebuild fitted state from checkpoint tensors.

        ``optimizer_state`` carries the moment arrays keyed by parameter
        name ({"t": int, "m": {name: arr}, "v": {name: arr}}) so ordering
        is re-derived from the rebuilt network.
        """
        X_like = self._check_X(X_like)
        self.classes_ = np.array([0, 1])
        self.net_ = self._build_net(X_like)
        self.net_.load_state(tensors)
        self.optimizer_ = Adam([p for _, p in self.net_.param_items()],
                               lr=self.learning_rate, weight_decay=self.weight_decay)
        names = [name for name, _ in self.net_.param_items()]
        self.optimizer_.load_state_dict({
            "t": optimizer_state["t"],
            "m": [optimizer_state["m"][n] for n in names],
            "v": [optimizer_state["v"][n] for n in names],
        })
        self.epochs_run_ = int(epochs_run)
        self.loss_history_ = list(loss_history)
        self.batch_log_ = []
        return self


class MlpFusionClassifier(_FusionClassifier):
    """Dense fusion classifier over 1024-dim pooled visual + text vectors."""

    def __init__(self, learning_rate=0.001, weight_decay=1e-4, max_epochs=50,
                 batch_size=128, seed=0, threshold=0.0, layer_sizes=(1024, 512, 256, 1)):
        super().__init__(learning_rate, weight_decay, max_epochs, batch_size, seed, threshold)
        self.layer_sizes = layer_sizes

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != self.layer_sizes[0]:
            raise ShapeMismatch(f"expected (n, {self.layer_sizes[0]}) inputs, got {X.shape}")
        return X

    def _build_net(self, X):
        return MlpFusionNet(layer_sizes=self.layer_sizes, seed=self.seed)


class TransformerFusionClassifier(_FusionClassifier):
    """Self-attention fusion classifier over 20x512 token stacks."""

    def __init__(self, learning_rate=0.001, weight_decay=1e-4, max_epochs=50,
                 batch_size=128, seed=0, threshold=0.0, dim=512, heads=2,
                 proj_dim=768, head_hidden=256):
        super().__init__(learning_rate, weight_decay, max_epochs, batch_size, seed, threshold)
        self.dim = dim
        self.heads = heads
        self.proj_dim = proj_dim
        self.head_hidden = head_hidden

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 3 or X.shape[2] != self.dim:
            raise ShapeMismatch(f"expected (n, tokens, {self.dim}) inputs, got {X.shape}")
        return X

    def _build_net(self, X):
        return TransformerFusionNet(dim=self.dim, heads=self.heads, proj_dim=self.proj_dim,
                                    head_hidden=self.head_hidden, seed=self.seed)
