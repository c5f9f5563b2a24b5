"""Predictor-structured ensembles for portfolio construction."""
from .config import ExperimentConfig
from .errors import PsemError
from .market_data import ReturnsMatrix, compute_returns, load_prices, synth_universe

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "PsemError", "ReturnsMatrix", "compute_returns", "load_prices",
           "synth_universe", "__version__"]
