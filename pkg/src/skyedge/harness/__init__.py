"""Scenario runner, experiments and metrics output."""
from .experiments import EXPERIMENTS, run_experiment
from .metrics import MetricsRecord, write_metrics
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario
from .sim import World, run_scenario

__all__ = ["EXPERIMENTS", "MetricsRecord", "Scenario", "ScenarioError", "World",
           "load_scenario", "parse_scenario", "run_experiment", "run_scenario",
           "write_metrics"]
