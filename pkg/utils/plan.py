"""
Experiment plan files.

Grammar (one setting per line):
    # comment
    key = value
    key = item1, item2, ...     (list-valued keys)
Blank lines are ignored, whitespace around keys, values and items is stripped,
and keys may appear at most once. Unknown keys are rejected.
"""
import itertools
import logging
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from diffusion.samplers import CONTROLLABLE_KINDS

logger = logging.getLogger(__name__)

LIST_KEYS = {"methods", "accelerations", "nfes", "families"}


class ExperimentPlan(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    methods: list[str] = Field(default_factory=lambda: list(CONTROLLABLE_KINDS), min_length=1)
    accelerations: list[float] = Field(default_factory=lambda: [4.0, 8.0, 12.0], min_length=1)
    nfes: list[int] = Field(default_factory=lambda: [50], min_length=1)
    families: list[Literal["modified", "original"]] = Field(default_factory=lambda: ["modified"], min_length=1)
    trials: int = Field(50, ge=1)
    sigma_e: float = Field(0.0, ge=0.0)
    seed: int = Field(0, ge=0)

    size: int = Field(64, ge=32)
    acs_fraction: float = Field(0.04, ge=0.0, lt=1.0)
    center_jitter: float = Field(0.05, ge=0.0, le=1.0)
    axis_jitter: float = Field(0.05, ge=0.0, lt=1.0)
    rotation_jitter: float = Field(5.0, ge=0.0, le=180.0)
    intensity_jitter: float = Field(0.1, ge=0.0, lt=1.0)

    ensemble_size: int = Field(500, ge=2)
    rank: int = Field(32, ge=0)
    floor: float = Field(1e-2, gt=0.0)
    train_seed: int = Field(0, ge=0)
    test_seed: int = Field(100_000, ge=0)

    T: int = Field(1000, ge=1)
    schedule: Literal["cosine", "linear"] = "cosine"
    grid: Optional[Literal["trailing", "uniform"]] = None
    ppn_noisor: Literal["random", "predicted"] = "random"
    lam: float = Field(1.0, ge=0.0, le=1.0, alias="lambda")
    zeta: float = Field(10.0, ge=0.0)
    workers: Optional[int] = Field(None, ge=1)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, methods):
        unknown = [m for m in methods if m not in CONTROLLABLE_KINDS]
        if unknown:
            raise ValueError(f"Unknown methods {unknown}; expected a subset of {CONTROLLABLE_KINDS}")
        return methods

    @field_validator("accelerations")
    @classmethod
    def _valid_accelerations(cls, accelerations):
        if any(R < 1 for R in accelerations):
            raise ValueError(f"Accelerations must be >= 1, got {accelerations}")
        return accelerations

    @field_validator("nfes")
    @classmethod
    def _valid_nfes(cls, nfes):
        if any(S < 1 for S in nfes):
            raise ValueError(f"NFE values must be >= 1, got {nfes}")
        return nfes

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.rank + 1 > self.ensemble_size:
            raise ValueError(f"rank={self.rank} needs ensemble_size >= {self.rank + 1}")
        if max(self.nfes) > self.T:
            raise ValueError(f"NFE {max(self.nfes)} exceeds T={self.T}")
        train = set(self.train_seeds)
        if train.intersection(self.test_seeds):
            raise ValueError(
                f"Train seeds [{self.train_seed}, {self.train_seed + self.ensemble_size}) overlap "
                f"test seeds [{self.test_seed}, {self.test_seed + self.trials})"
            )
        return self

    @property
    def train_seeds(self) -> range:
        return range(self.train_seed, self.train_seed + self.ensemble_size)

    @property
    def test_seeds(self) -> range:
        return range(self.test_seed, self.test_seed + self.trials)

    @property
    def total_runs(self) -> int:
        return len(self.families) * len(self.methods) * len(self.accelerations) * len(self.nfes) * self.trials

    def cells(self):
        """(family, method, R, S, trial) for every run, in sorted order."""
        return list(itertools.product(
            self.families, sorted(self.methods), sorted(self.accelerations), sorted(self.nfes), range(self.trials)
        ))


def parse_plan(text: str, source: str = "<plan>") -> ExperimentPlan:
    values = {}
    known = {name for name in ExperimentPlan.model_fields} | {"lambda"}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f"{source}:{number}: expected 'key=value', got '{raw.strip()}'")
        if key not in known or key == "lam":
            raise ValueError(f"{source}:{number}: unknown plan key '{key}'")
        if key in values:
            raise ValueError(f"{source}:{number}: duplicate plan key '{key}'")
        if key in LIST_KEYS:
            items = [item.strip() for item in value.split(",")]
            if any(not item for item in items):
                raise ValueError(f"{source}:{number}: empty item in list '{key}'")
            values[key] = items
        else:
            values[key] = value

    plan = ExperimentPlan(**values)
    logger.info(
        f"Plan {source}: {len(plan.families)} families x {len(plan.methods)} methods x "
        f"{len(plan.accelerations)} accelerations x {len(plan.nfes)} NFEs x {plan.trials} trials "
        f"= {plan.total_runs} runs"
    )
    return plan


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    if not path.exists():
        logger.error(f"Plan file not found at {path}")
        raise FileNotFoundError(path)
    return parse_plan(path.read_text(encoding="utf-8"), source=str(path))
