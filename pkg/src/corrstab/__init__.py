"""Edge-feature decorrelation for small neural force fields.

Train a message-passing force field with a scheduled feature-decorrelation
loss, drive molecular dynamics with it, and score trajectory stability.
"""

from .correlation import (
    CorrConfig,
    CorrMatrix,
    corr_loss_layer,
    corr_loss_total,
    dataset_corr_value,
    pearson_abs,
    sample_edges,
    select_features,
)
from .frame import Dataset, Frame, composition_counts
from .graph import EdgeGraph, build_graph
from .io import read_dataset, write_dataset
from .md import MDConfig, RefPotential, generate_dataset, langevin_force, load_preset, ref_energy_forces, run_md, step_nve
from .model import ModelParams, energy_and_forces, forces, forward, init_params, predict_batch
from .stability import StabilityConfig, force_abnormality, rdf, snapshot_index, stability_index
from .trajectory import Snapshot, TrajectoryRecord, parse_dump, write_dump
from .training import LossWeights, SchedulerConfig, TrainConfig, coeff_at, evaluate_mae, measure_overhead, total_loss, train

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
