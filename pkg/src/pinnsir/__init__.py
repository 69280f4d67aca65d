"""Physics-informed neural network solvers for SIR-type inverse problems."""
from .data import (
    RegionDataset,
    derive_susceptible_removed,
    load_case_csv,
    recovery_queue,
    synth_generate,
)
from .inverse_rt import RtFitConfig, fit_rt, summarize_rt
from .inverse_sir import fit_sir
from .net import NetworkConfig, TrainConfig
from .report import pearson
from .sir import CompartmentSeries, RtSeries, SirParams, effective_reproduction, sir_rk4_simulate

__version__ = "0.1.0"
