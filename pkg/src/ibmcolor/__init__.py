"""Coloured Brownian particles on the circle with local-time label swaps."""
from .model_core import ColorField, DomainError, FieldTrajectory, ModelParams
from .particles import SimConfig, simulate, simulate_replicas
from .hydro_pde import PdeConfig, solve_colored_linear, solve_colored_system, solve_heat, solve_perturbed_system
from .ldp_rate import dynamic_rate, h_minus1_a_norm_sq, sanov_initial_rate, uncolored_rate
from .experiments import Scenario, compare_sim_pde, run_scenario, tagged_variance_check

__version__ = "0.1.0"
