"""scikit-learn style front door: fit a search policy on a hole map,
predict greedy actions for observation windows."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from pegrl.agent import greedy_action, observation_record, state_from_records
from pegrl.errors import ConfigError
from pegrl.holemap import HoleMap
from pegrl.trainer import TrainConfig, pretrain_encoder, train
from pegrl.validation import DEFAULT_WINDOW


class PegSearchEstimator(BaseEstimator):
    """Trains one model variant offline on a hole map.

    Parameters mirror the training configuration; defaults reproduce the
    published hyperparameters. fit(X) expects a HoleMap; predict(X) takes
    either a 2-D array of prebuilt state rows or a list of observation
    windows (sequences of Observation) and returns greedy action indices.
    """

    def __init__(self, variant="saprle", episodes=4000, seed=0,
                 window=DEFAULT_WINDOW, batch_size=32, learning_rate=0.001,
                 gamma=0.99, update_every=4, image_noise=2.0 / 255.0,
                 proprio_noise=0.01, pretrain_epochs=50, out_dir=None):
        self.variant = variant
        self.episodes = episodes
        self.seed = seed
        self.window = window
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.update_every = update_every
        self.image_noise = image_noise
        self.proprio_noise = proprio_noise
        self.pretrain_epochs = pretrain_epochs
        self.out_dir = out_dir

    def _config(self):
        return TrainConfig(
            variant=self.variant, episodes=self.episodes, seed=self.seed,
            window=self.window, batch_size=self.batch_size,
            learning_rate=self.learning_rate, gamma=self.gamma,
            update_every=self.update_every, image_noise=self.image_noise,
            proprio_noise=self.proprio_noise, pretrain_epochs=self.pretrain_epochs)

    def fit(self, X, y=None, log_cb=None):
        """Pre-train the encoder where the variant needs one, then run
        offline DRL against the map."""
        if not isinstance(X, HoleMap):
            raise ConfigError(f"fit expects a HoleMap, got {type(X).__name__}")
        config = self._config()
        pretrained = None
        pre_losses = []
        import time
        t0 = time.perf_counter()
        if self.variant == "aerl":
            pretrained, pre_losses = pretrain_encoder("ae", X, config, log_cb=log_cb)
        elif self.variant == "saprl":
            pretrained, pre_losses = pretrain_encoder("sap", X, config, log_cb=log_cb)
        pretrain_s = time.perf_counter() - t0
        self.model_, self.report_ = train(config, X, pretrained=pretrained,
                                          out_dir=self.out_dir, log_cb=log_cb)
        self.report_.pretrain_losses = pre_losses
        if pretrained is not None:
            self.report_.wall_clock["pretrain_s"] = pretrain_s
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this PegSearchEstimator is not fitted yet; call fit first")

    def predict(self, X):
        """Greedy action indices, one per input window/state row."""
        self._check_fitted()
        model = self.model_
        if isinstance(X, np.ndarray) and X.ndim == 2:
            states = X.astype(np.float32)
        else:
            states = np.stack([
                state_from_records(model, [observation_record(model, o) for o in win])
                for win in X])
        q = model.policy.forward_np(states)
        return np.array([greedy_action(row) for row in q])

    @property
    def convergence_episode_(self):
        self._check_fitted()
        return self.report_.convergence_episode
