"""Two-truck emergency dispatching on random grid graphs."""
from .erlang import (CostTable, build_cost_table, dispatch_cost, erlang_tail, min_tail,
                     sum_min_tail)
from .experiment import ExperimentSpec, make_instance, run_experiment
from .graph import (Graph, Instance, Path, generate_grid_graph, generate_instance,
                    load_instance, save_instance, shortest_path)
from .heuristics import OsiaConfig, OsiaModel, osi_policy, osia_cost_estimate, osia_policy
from .mdp import (Evaluation, Model, Policy, StateSpace, action_set, closest_first_policy,
                  evaluate_policy, flar, policy_iteration)
from .sim import SimResult, simulate, simulate_replications

__version__ = "0.1.0"

__all__ = [
    "CostTable", "Evaluation", "ExperimentSpec", "Graph", "Instance", "Model", "OsiaConfig", "OsiaModel", "Path",
    "Policy", "SimResult", "StateSpace", "action_set", "build_cost_table",
    "closest_first_policy", "dispatch_cost", "erlang_tail", "evaluate_policy", "flar",
    "generate_grid_graph", "generate_instance", "load_instance", "make_instance", "min_tail", "osi_policy",
    "osia_cost_estimate", "osia_policy", "policy_iteration", "run_experiment", "save_instance", "shortest_path",
    "simulate", "simulate_replications", "sum_min_tail",
]
