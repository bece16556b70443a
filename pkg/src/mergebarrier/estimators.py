"""scikit-learn style wrappers.

Each estimator learns from one model in ``fit`` and rewrites models in
``transform``; hyperparameters are plain constructor arguments so
``get_params`` / ``set_params`` / ``clone`` work as usual.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import attack, merge, protect
from .model import ModelConfig
from .validation import as_task, check_count, check_fraction, check_model, check_positive


class MergeBarrier(TransformerMixin, BaseEstimator):
    """Protect an expert model against merging.

    ``fit(w)`` builds the projection plan and calibrates the Taylor expansion
    point on ``task``; ``transform(w)`` returns a :class:`ProtectedModel`.

    >>> mb = MergeBarrier(config=cfg, task="mod_add").fit(expert)   # doctest: +SKIP
    >>> bundle = mb.transform(expert)                               # doctest: +SKIP
    """

    def __init__(self, config=None, task="mod_add", flip_fraction=0.5, taylor_order=8,
                 rsvd_rank="auto", rsvd_enabled=True, calibration_samples=512, seed=0,
                 protect_attention=True, protect_ffn=True):
        self.config = config
        self.task = task
        self.flip_fraction = flip_fraction
        self.taylor_order = taylor_order
        self.rsvd_rank = rsvd_rank
        self.rsvd_enabled = rsvd_enabled
        self.calibration_samples = calibration_samples
        self.seed = seed
        self.protect_attention = protect_attention
        self.protect_ffn = protect_ffn

    def _protect_config(self) -> protect.ProtectConfig:
        check_fraction(self.flip_fraction, "flip_fraction")
        check_count(self.calibration_samples, "calibration_samples")
        return protect.ProtectConfig(
            flip_fraction=float(self.flip_fraction), taylor_order=int(self.taylor_order),
            rsvd_rank=self.rsvd_rank, rsvd_enabled=bool(self.rsvd_enabled),
            calibration_samples=int(self.calibration_samples), seed=int(self.seed),
            protect_attention=bool(self.protect_attention), protect_ffn=bool(self.protect_ffn))

    def fit(self, X, y=None):
        cfg = self.config or ModelConfig()
        check_model(cfg, X)
        pc = self._protect_config()
        self.config_ = cfg
        self.protect_config_ = pc
        self.plan_ = protect.build_projection(cfg, X, pc) if pc.protect_attention else None
        self.calibration_ = protect.calibrate_z0(cfg, X, as_task(self.task), pc) if pc.protect_ffn else None
        return self

    def transform(self, X):
        check_is_fitted(self, "plan_")
        check_model(self.config_, X)
        taylor = (protect.reparameterize_ffn(self.config_, X, self.calibration_, self.protect_config_)
                  if self.calibration_ is not None else None)
        return protect.build_bundle(self.config_, X, self.plan_, taylor, self.protect_config_)


class ModelMerger(BaseEstimator):
    """Merge experts into a base; ``fit(base)`` then ``transform([expert, ...])``."""

    def __init__(self, method="task_arithmetic", lam=1.0, trim_keep_fraction=0.2, drop_rate=0.5, seed=0):
        self.method = method
        self.lam = lam
        self.trim_keep_fraction = trim_keep_fraction
        self.drop_rate = drop_rate
        self.seed = seed

    def fit(self, X, y=None):
        if not isinstance(X, dict):
            raise TypeError("fit expects the base model as a mapping of named tensors")
        self.merge_config_ = merge.MergeConfig(merge.MergeMethod(self.method), float(self.lam),
                                               float(self.trim_keep_fraction), float(self.drop_rate),
                                               int(self.seed))
        self.base_ = X
        return self

    def transform(self, X):
        check_is_fitted(self, "base_")
        experts = [X] if isinstance(X, dict) else list(X)
        return merge.merge_models(self.base_, experts, self.merge_config_)

    def report(self, X) -> dict:
        check_is_fitted(self, "base_")
        experts = [X] if isinstance(X, dict) else list(X)
        return merge.merge_report(merge.task_vectors(self.base_, experts), self.merge_config_)


class ParamsDecoder(BaseEstimator):
    """Undo a permute-and-scale protection given the base model it came from."""

    def __init__(self, config=None, tau=attack.DEFAULT_TAU):
        self.config = config
        self.tau = tau

    def fit(self, X, y=None):
        cfg = self.config or ModelConfig()
        check_positive(self.tau, "tau", strict=False)
        self.config_ = cfg
        self.base_ = check_model(cfg, X)
        return self

    def transform(self, X):
        check_is_fitted(self, "base_")
        decoded, keys = attack.decode_params(self.config_, X, self.base_, float(self.tau))
        self.keys_ = keys
        return decoded
