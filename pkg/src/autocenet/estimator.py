"""scikit-learn style facade over the network and trainer.

AutoCENetSegmenter accepts raw HU volumes (arrays or Volume objects),
windows and resamples them to the configured grid, trains the network,
and predicts binary masks back at the caller's resolution.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import LabelVolume, Volume, resample, window_normalize
from .errors import DimensionError
from .metrics import confusion_counts, f1_precision_sensitivity
from .network import AutoCENet, NetworkConfig, apply_ablation
from .train import Case, LossWeights, TrainConfig, train


def _as_volume_list(X, spacing, cls=Volume):
    """Accept a list of volumes or an (n, X, Y, Z) array."""
    if isinstance(X, (list, tuple)):
        items = list(X)
        if not all(isinstance(v, cls) for v in items):
            raise DimensionError(f"expected a list of {cls.__name__}")
        return items
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise DimensionError(
            f"expected (n_samples, x, y, z) array, got shape {arr.shape}")
    return [cls(arr[i], spacing) for i in range(arr.shape[0])]


class AutoCENetSegmenter(BaseEstimator):
    """Binary liver-style segmenter with a fit/predict interface.

    Parameters mirror the network and trainer configs; see NetworkConfig
    and TrainConfig for semantics. `ablation` selects a named variant.
    """

    def __init__(self, dims=(32, 32, 16), base_width=16, branch_width=16,
                 prior_up_width=4, ablation="none", lr=3e-3, epochs=20,
                 max_iterations=0, batch_size=1, augment_probability=0.8,
                 optimizer="radam", seed=0, alpha=1.0, beta=1.0, gamma=0.1,
                 w0=1.0, w1=10.0, spacing=(1.0, 1.0, 1.0)):
        self.dims = dims
        self.base_width = base_width
        self.branch_width = branch_width
        self.prior_up_width = prior_up_width
        self.ablation = ablation
        self.lr = lr
        self.epochs = epochs
        self.max_iterations = max_iterations
        self.batch_size = batch_size
        self.augment_probability = augment_probability
        self.optimizer = optimizer
        self.seed = seed
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.w0 = w0
        self.w1 = w1
        self.spacing = spacing

    def _network_config(self):
        cfg = NetworkConfig(input_dims=tuple(self.dims),
                            base_width=self.base_width,
                            context_width=self.branch_width,
                            prior_width=self.branch_width,
                            prior_up_width=self.prior_up_width,
                            contour_width=self.branch_width,
                            fusion_width=self.branch_width,
                            seed=self.seed)
        return apply_ablation(cfg, self.ablation)

    def _train_config(self):
        weights = LossWeights(alpha=self.alpha, beta=self.beta,
                              gamma=self.gamma, w0=self.w0, w1=self.w1)
        return TrainConfig(lr=self.lr, batch_size=self.batch_size,
                           epochs=self.epochs,
                           max_iterations=self.max_iterations,
                           weights=weights,
                           augment_probability=self.augment_probability,
                           optimizer=self.optimizer, seed=self.seed)

    def _prepare_image(self, vol):
        vol = window_normalize(vol)
        if vol.data.shape != tuple(self.dims):
            vol = resample(vol, self.dims)
        return vol

    def _prepare_label(self, lab):
        if lab.data.shape != tuple(self.dims):
            lab = resample(lab, self.dims)
        return lab

    def fit(self, X, y):
        images = _as_volume_list(X, self.spacing, Volume)
        labels = _as_volume_list(y, self.spacing, LabelVolume)
        if len(images) != len(labels):
            raise DimensionError(
                f"{len(images)} images but {len(labels)} labels")
        cases = [Case(id=f"case-{i:04d}",
                      image=self._prepare_image(img),
                      label=self._prepare_label(lab))
                 for i, (img, lab) in enumerate(zip(images, labels))]
        self.network_ = AutoCENet(self._network_config().validate())
        self.record_ = train(self.network_, cases,
                             self._train_config().validate())
        self.n_iterations_ = self.record_.iterations
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(
                "This AutoCENetSegmenter instance is not fitted yet.")

    def predict(self, X):
        """Binary masks at the caller's resolution, shape (n, x, y, z)."""
        self._check_fitted()
        images = _as_volume_list(X, self.spacing, Volume)
        out = []
        for img in images:
            pred = self.network_.predict(self._prepare_image(img))
            if pred.data.shape != img.data.shape:
                pred = resample(pred, img.data.shape)
            out.append(pred.data)
        return np.stack(out)

    def transform(self, X):
        """Foreground probability maps at the network resolution."""
        from . import autodiff as ad

        self._check_fitted()
        images = _as_volume_list(X, self.spacing, Volume)
        self.network_.eval()
        out = []
        for img in images:
            prep = self._prepare_image(img)
            res = self.network_.forward(
                ad.Tensor(prep.data[None, None].astype(np.float32)))
            probs = ad.channel_softmax(res.final_logits).data[0, 1]
            out.append(probs)
        return np.stack(out)

    def score(self, X, y):
        """Mean overlap score (DSC) against reference masks."""
        self._check_fitted()
        labels = _as_volume_list(y, self.spacing, LabelVolume)
        preds = self.predict(X)
        scores = []
        for pred, lab in zip(preds, labels):
            tp, fp, fn, _ = confusion_counts(
                LabelVolume(pred, lab.spacing), lab)
            f1, _, _ = f1_precision_sensitivity(tp, fp, fn)
            scores.append(f1)
        return float(np.mean(scores))
