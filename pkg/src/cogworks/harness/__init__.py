from .scenario import ChaosSpec, Scenario, ScenarioStep
from .runner import run_scenario

__all__ = ["ChaosSpec", "Scenario", "ScenarioStep", "run_scenario"]
