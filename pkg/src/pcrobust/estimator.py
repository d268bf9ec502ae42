"""scikit-learn style estimators wrapping the training and defense stacks.

These make the classifiers and the outlier filter compose with pipelines,
grid search, and everything else that speaks fit/predict/transform.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .backbones import Classifier, make_spec
from .defenses import SORConfig, sor_denoise
from .meshdata import LabeledDataset, PointCloud
from .training import TrainConfig, train
from .validation import check_cloud_batch, check_labels, check_points


class PointCloudClassifier(BaseEstimator, ClassifierMixin):
    """Point-cloud classifier with a pluggable symmetric pooling operation.

    Parameters
    ----------
    backbone : str
        One of "pointnet", "deepsets", "dss", "grouped".
    pool : str
        One of "max", "sum", "median", "att", "att_gate", "pma",
        "fspool", "softpool", "deepsym".
    epochs, batch_size, lr, optimizer : training hyperparameters.
    at_steps : int
        Inner PGD steps for adversarial training; 0 trains on clean data.
    at_epsilon : float
        L-inf budget of the inner attack.
    seed : int
        Controls initialization, batch order, and attack randomness.
    """

    def __init__(self, backbone="pointnet", pool="max", epochs=30, batch_size=16,
                 lr=0.01, optimizer="adam", at_steps=0, at_epsilon=0.05, seed=0):
        self.backbone = backbone
        self.pool = pool
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.at_steps = at_steps
        self.at_epsilon = at_epsilon
        self.seed = seed

    def fit(self, X, y):
        X = check_cloud_batch(X)
        self.classes_ = np.unique(np.asarray(y))
        y = check_labels(np.searchsorted(self.classes_, y), len(self.classes_))
        spec = make_spec(self.backbone, self.pool,
                         n_classes=len(self.classes_), n_train=X.shape[1])
        dataset = LabeledDataset(
            [PointCloud(X[i].astype(np.float32), int(y[i])) for i in range(len(X))],
            [str(c) for c in self.classes_])
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          optimizer=self.optimizer, lr=self.lr,
                          at_steps=self.at_steps, at_epsilon=self.at_epsilon,
                          seed=self.seed)
        params, history, _ = train(spec, dataset, cfg)
        self.model_ = Classifier(spec, params)
        self.history_ = history
        return self

    def decision_function(self, X):
        X = check_cloud_batch(X)
        return np.atleast_2d(self.model_.logits(X))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        idx = np.argmax(self.decision_function(X), axis=1)
        return self.classes_[idx]


class SOROutlierFilter(BaseEstimator, TransformerMixin):
    """Statistical outlier removal as a transformer over clouds.

    transform maps a list of (n, 3) arrays to a list of filtered arrays;
    point counts may shrink per cloud.
    """

    def __init__(self, k=2, alpha=1.1):
        self.k = k
        self.alpha = alpha

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = SORConfig(self.k, self.alpha)
        single = not isinstance(X, (list, tuple)) and np.asarray(X).ndim == 2
        clouds = [X] if single else list(X)
        out = [sor_denoise(check_points(c), cfg)[0] for c in clouds]
        return out[0] if single else out
