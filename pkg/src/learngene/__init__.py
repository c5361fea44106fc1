"""Extract, inherit and evolve learngenes: small inheritable slices of convolutional networks."""

from .engine import Batch, NetworkWeights, TrainBudget, evaluate, forward, init_weights, train
from .evolution import EvolutionConfig, evolve
from .genome import LearngeneStructure, LearngeneWeights, extract_learngene, mutate, validate_structure
from .inheritance import inherit, insert_pim_layers
from .netspec import NetworkSpec, builtin_spec, parameter_fraction, validate_network_spec

__version__ = "0.1.0"

__all__ = [
    "Batch", "EvolutionConfig", "LearngeneStructure", "LearngeneWeights", "NetworkSpec", "NetworkWeights",
    "TrainBudget", "builtin_spec", "evaluate", "evolve", "extract_learngene", "forward", "inherit",
    "init_weights", "insert_pim_layers", "mutate", "parameter_fraction", "train", "validate_network_spec",
    "validate_structure",
]
