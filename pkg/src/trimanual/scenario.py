"""Scenario files: everything a mission or a trial batch needs, in one JSON document."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .bimanual import HarvestSequenceSpec
from .collision import DEFAULT_INFLATION, DEFAULT_VOXEL, grid_from_points
from .errors import InvalidScenario
from .geometry import OccupancyGrid
from .kincore import ChainSpec, load_chains
from .nbv import NbvConfig
from .simworld import NoiseModel, PendulumTarget

ENVIRONMENTS = ("indoor", "outdoor")
LOCALIZATION = ("ground_truth", "perception")


@dataclass(frozen=True)
class MissionConfig:
    start_q_spot: tuple = (0.0, -0.27, 0.0, 2.19, 0.0, -0.35)
    stowed_left: tuple = (2.6, 0.0, 1.0, 1.0)
    stowed_right: tuple = (-2.6, 0.0, 1.0)
    navigation: tuple = ((0.0, 0.0, 0.0),)     # scripted body waypoints (x, y, yaw)
    max_attempts: int = 1
    max_interventions: int = 2
    localization: str = "ground_truth"
    reposition_distance: float = 1.5           # body-to-fruit distance after a scripted reposition
    navigate_duration: float = 5.0
    sensing_range: float = 3.0                 # ground-truth detection radius around the body
    nbv_move_duration: float = 3.0
    detect_duration: float = 0.1
    reach_samples: int = 200_000
    reach_voxel: float = 0.02
    reach_seed: int = 0
    surface_correction: bool = True

    def __post_init__(self):
        if self.max_attempts < 1:
            raise InvalidScenario("max_attempts must be >= 1")
        if self.localization not in LOCALIZATION:
            raise InvalidScenario(f"localization must be one of {LOCALIZATION}")
        if not self.navigation:
            raise InvalidScenario("navigation needs at least one waypoint")
        object.__setattr__(self, "navigation", tuple(tuple(map(float, w)) for w in self.navigation))
        for k in ("start_q_spot", "stowed_left", "stowed_right"):
            object.__setattr__(self, k, tuple(map(float, getattr(self, k))))

    def to_dict(self):
        d = dict(self.__dict__)
        d["navigation"] = [list(w) for w in self.navigation]
        for k in ("start_q_spot", "stowed_left", "stowed_right"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    environment: str
    chains: dict
    targets: tuple                    # PendulumTarget per fruit, harvested in order
    noise: NoiseModel = field(default_factory=NoiseModel)
    sequence: HarvestSequenceSpec = field(default_factory=HarvestSequenceSpec)
    nbv: NbvConfig = field(default_factory=NbvConfig)
    mission: MissionConfig = field(default_factory=MissionConfig)
    grid: OccupancyGrid | None = None
    self_pairs: tuple | None = None   # None: every left x right capsule pair
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise InvalidScenario(f"environment must be one of {ENVIRONMENTS}")
        for name in ("spot", "left", "right"):
            if name not in self.chains:
                raise InvalidScenario(f"scenario chains lack {name!r}")
        if not self.targets:
            raise InvalidScenario("scenario needs at least one target")
        if self.self_pairs is None:
            L, R = self.chains["left"], self.chains["right"]
            pairs = tuple(("left", i, "right", j)
                          for i in range(len(L.capsules)) for j in range(len(R.capsules)))
            object.__setattr__(self, "self_pairs", pairs)

    def with_noise(self, **kw):
        return replace(self, noise=replace(self.noise, **kw))

    def fingerprint(self):
        fp = self.__dict__.get("_fingerprint")
        if fp is None:
            fp = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()
            self.__dict__["_fingerprint"] = fp
        return fp

    def to_dict(self):
        return {
            "name": self.name,
            "environment": self.environment,
            "chains": [c.to_dict() for c in self.chains.values()],
            "targets": [t.to_dict() for t in self.targets],
            "noise": self.noise.to_dict(),
            "sequence": self.sequence.to_dict(),
            "nbv": {k: v for k, v in self.nbv.__dict__.items() if k != "ik"},
            "mission": self.mission.to_dict(),
            "scene": {"grid": None if self.grid is None else self.grid.to_dict(),
                      "self_pairs": [list(p) for p in self.self_pairs]},
        }


def _pick(d, key, default=None):
    v = d.get(key, default)
    return default if v is None else v


def scenario_from_dict(d, base_dir=None):
    """Build a Scenario, wrapping every schema problem in InvalidScenario."""
    try:
        ch = d.get("chains")
        if ch is None:
            chains = load_chains()
        elif isinstance(ch, str):
            p = Path(ch)
            chains = load_chains(p if p.is_absolute() or base_dir is None else Path(base_dir) / p)
        else:
            chains = {c.name: c for c in (ChainSpec.from_dict(x) for x in ch)}
        tg = d.get("targets") or ([d["target"]] if "target" in d else [])
        targets = []
        for t in tg:
            if "fruit" in t and "anchor" not in t:
                t = dict(t)
                fruit = np.asarray(t.pop("fruit"), float)
                t["anchor"] = (fruit + np.array([0, 0, float(t["cord_length"])])).tolist()
            targets.append(PendulumTarget.from_dict(t))
        scene = d.get("scene") or {}
        grid = None
        if scene.get("grid"):
            grid = OccupancyGrid.from_dict(scene["grid"])
        elif scene.get("obstacle_points"):
            op = scene["obstacle_points"]
            pts = op["points"] if isinstance(op, dict) else op
            vs = op.get("voxel_size", DEFAULT_VOXEL) if isinstance(op, dict) else DEFAULT_VOXEL
            inf = op.get("inflation", DEFAULT_INFLATION) if isinstance(op, dict) else DEFAULT_INFLATION
            grid = grid_from_points(pts, vs, inf)
        pairs = scene.get("self_pairs")
        pairs = None if pairs is None else tuple(tuple(p) for p in pairs)
        nbv = dict(_pick(d, "nbv", {}))
        return Scenario(
            name=str(d.get("name", "scenario")),
            environment=str(d.get("environment", "indoor")),
            chains=chains,
            targets=tuple(targets),
            noise=NoiseModel.from_dict(_pick(d, "noise", {})),
            sequence=HarvestSequenceSpec.from_dict(_pick(d, "sequence", {})),
            nbv=NbvConfig.from_dict(nbv),
            mission=MissionConfig(**_pick(d, "mission", {})),
            grid=grid,
            self_pairs=pairs,
            source={k: d[k] for k in ("calibration", "note") if k in d},
        )
    except InvalidScenario:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenario(f"bad scenario: {exc}") from exc


def load_scenario(path):
    """Load a scenario JSON file; bare names resolve to the bundled scenarios."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = Path(str(p) + ".json")
    if not p.exists():
        bundled = resources.files("trimanual.data").joinpath("scenarios", p.name)
        if bundled.is_file():
            return scenario_from_dict(json.loads(bundled.read_text()))
        raise InvalidScenario(f"scenario file {path} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidScenario(f"{path}: {exc}") from exc
    return scenario_from_dict(data, p.parent)


def bundled_scenario_path(name):
    return Path(str(resources.files("trimanual.data").joinpath("scenarios", name)))


__all__ = ["Scenario", "MissionConfig", "load_scenario", "scenario_from_dict",
           "bundled_scenario_path"]
