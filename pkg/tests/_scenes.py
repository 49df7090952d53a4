"""Hand-placed scenarios with the ego parked at the origin facing +x."""
from __future__ import annotations

import numpy as np

from omniscene.simulator import Agent, CLASS_SIZES, MapData, Scenario, _build_map

DURATION = 10


def parked_ego(duration: int = DURATION) -> np.ndarray:
    return np.zeros((duration, 4))


def still_agent(agent_id: int, x: float, y: float, cls: int = 0, z: float | None = None,
                behavior: str = "straight", duration: int = DURATION) -> Agent:
    size = CLASS_SIZES[cls]
    z = size[2] / 2 if z is None else z
    poses = np.tile([x, y, z, 0.0, 0.0], (duration, 1))
    return Agent(agent_id, cls, behavior, size, poses)


def scene(agents=(), signs=(), lights=(), lanes: bool = True) -> Scenario:
    m = _build_map(np.random.default_rng(0), None) if lanes else MapData()
    m.signs, m.lights = list(signs), list(lights)
    return Scenario("scripted", 0, parked_ego(), "stop", list(agents), m)


def mining_scene() -> Scenario:
    """Objects at 10 m ahead / 5 m left, 28 m ahead in the ego lane, 100 m
    ahead, a sign 25 m ahead and a light 45 m ahead."""
    agents = [still_agent(1, 10.0, 5.0), still_agent(2, 28.0, 0.0), still_agent(3, 100.0, 0.0)]
    return scene(agents, signs=[(200, 25.0, -3.0)], lights=[(100, 45.0, -3.0)])


# ids expected from the mining rules on ``mining_scene``
MINING_EXPECTED = {"dynamic": [1, 2], "signs": [200], "lights": []}
