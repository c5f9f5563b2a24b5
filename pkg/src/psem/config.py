"""Experiment configuration and the published hyperparameter grid."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from .errors import InvalidParameter
from .predictor import PredictorConfig

# Hyperparameter values of the reference grid (predictors and s-RBFN).
REFERENCE_GRID: dict[str, list] = {
    "M": [2, 5, 10, 20, 35],
    "kappa": [20, 200, 2000],
    "eta": [0.03, 0.3],
    "chi": [0.0001, 0.01, 0.1, 1],
    "epsilon": [0, 0.1, 0.35, 0.5],
    "lambda_p": [0, 0.0001, 0.01, 0.07],
    "lambda_s": [0, 3, 5],
    "gamma": [1, 2, 3, 5],
}

ALLOCATOR_NAMES = ("s-rbfn", "equal", "mse_weighted", "inverse_vol", "cvar_rp", "max_div", "hrp", "herc")


@dataclass(frozen=True)
class ExperimentConfig:
    epsilon: float = 0.1
    gamma: float = 1
    threshold_T: float = 0.0
    M: int = 10
    lambda_p: float = 0.0
    lambda_s: float = 3.0
    eta: float = 0.03
    kappa: int = 20
    chi: float = 0.01
    tau: int = 1
    lag_window: int = 1
    epochs: int = 1
    basis_kind: str = "radial"
    n_simulations: int = 100
    horizon_months: int = 1
    seed: int = 0
    allocator_name: str = "s-rbfn"
    train_len: int = 252
    offset: int = 0
    days_per_month: int = 21

    def predictor_config(self, seed: int) -> PredictorConfig:
        return PredictorConfig(kappa=self.kappa, eta=self.eta, chi=self.chi, lambda_p=self.lambda_p,
                               tau=self.tau, lag_window=self.lag_window, seed=seed, epochs=self.epochs)

    def validate(self, allow_extended: bool = True) -> "ExperimentConfig":
        """Range checks always; membership in the reference grid unless ``allow_extended``."""
        if not 0 <= self.epsilon <= 1:
            raise InvalidParameter(f"epsilon={self.epsilon} outside [0, 1]")
        if self.gamma < 1:
            raise InvalidParameter(f"gamma={self.gamma} must be >= 1")
        if self.M < 1:
            raise InvalidParameter(f"M={self.M} must be >= 1")
        if self.lambda_s < 0:
            raise InvalidParameter("lambda_s must be >= 0")
        if self.n_simulations < 1 or self.horizon_months < 1:
            raise InvalidParameter("n_simulations and horizon_months must be >= 1")
        if self.train_len < self.lag_window + self.tau + 1:
            raise InvalidParameter("train_len too short for the lag window and tau")
        if self.offset < 0 or self.seed < 0:
            raise InvalidParameter("offset and seed must be >= 0")
        if self.basis_kind not in ("gaussian", "radial"):
            raise InvalidParameter(f"basis_kind={self.basis_kind!r} must be 'gaussian' or 'radial'")
        if self.allocator_name not in ALLOCATOR_NAMES:
            raise InvalidParameter(f"allocator_name={self.allocator_name!r}; expected one of {ALLOCATOR_NAMES}")
        self.predictor_config(self.seed).validate()
        if not allow_extended:
            for key, allowed in REFERENCE_GRID.items():
                if getattr(self, key) not in allowed:
                    raise InvalidParameter(
                        f"{key}={getattr(self, key)} not in the reference grid {allowed}; "
                        "pass --allow-extended to permit it"
                    )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidParameter(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)
