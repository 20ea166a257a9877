"""Synthetic labeled MQTT traffic."""

from .config import (
    ATTACKER_IP,
    BROKER_IP,
    AttackSpec,
    ClientSpec,
    ScenarioConfig,
    ScenarioError,
    default_scenario,
    load_scenario,
    save_scenario,
    testbed_clients,
)
from .simulator import Simulation, benign_fraction, build_dataset, simulate, topic_matches

__all__ = [
    "ATTACKER_IP", "BROKER_IP", "AttackSpec", "ClientSpec", "ScenarioConfig", "ScenarioError", "Simulation",
    "benign_fraction", "build_dataset", "default_scenario", "load_scenario",
    "save_scenario", "simulate", "testbed_clients", "topic_matches",
]
