from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Optional, Dict, Any, Literal, Tuple

Activation = Literal["tanh", "sigmoid", "sin"]
AdMode = Literal["forward", "reverse"]
ProblemMode = Literal["forward", "inverse", "meta"]
Scheme = Literal["grid", "uniform"]
LossTerm = Literal["dynamic", "boundary", "initial", "observations"]

LOSS_TERMS: Tuple[str, ...] = ("dynamic", "boundary", "initial", "observations")


class ConfigSection(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Network Schemas
class MlpSpec(ConfigSection):
    layer_sizes: List[int] = Field(..., min_length=2)
    activation: Activation = "tanh"
    seed: int = Field(default=0, ge=0, lt=2**64)

class SpinnSpec(ConfigSection):
    axis_dims: List[int] = Field(..., min_length=1)
    rank: int = Field(..., ge=1)
    subnet_sizes: List[int] = []
    activation: Activation = "tanh"
    seed: int = Field(default=0, ge=0, lt=2**64)

class NetConfig(ConfigSection):
    kind: Literal["mlp", "spinn"] = "mlp"
    hidden: List[int] = [16, 16]
    activation: Activation = "tanh"
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    rank: int = Field(default=8, ge=1)


# Loss Schemas
class LossWeights(ConfigSection):
    dyn: float = Field(default=1.0, ge=0)
    bc: float = Field(default=1.0, ge=0)
    init: float = Field(default=1.0, ge=0)
    obs: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def _one_positive(self):
        if max(self.dyn, self.bc, self.init, self.obs) <= 0:
            raise ValueError("at least one loss weight must be positive")
        return self

    def for_term(self, term: str) -> float:
        return {"dynamic": self.dyn, "boundary": self.bc, "initial": self.init, "observations": self.obs}[term]

class MaskConfig(ConfigSection):
    dynamic: Optional[List[str]] = None
    boundary: Optional[List[str]] = None
    initial: Optional[List[str]] = None
    observations: Optional[List[str]] = None
    # Terms on which eq.* receives gradient when the mask is left to its default
    eq_terms: List[LossTerm] = ["dynamic"]


# Sampling Schemas
class SamplerSpec(ConfigSection):
    scheme: Scheme = "grid"
    n_interior: int = Field(default=64, ge=1)
    n_per_facet: Optional[int] = Field(default=None, ge=1)
    n_initial: Optional[int] = Field(default=None, ge=1)
    resample: bool = False

class ObservationConfig(ConfigSection):
    source: Literal["synthetic", "file"] = "synthetic"
    n: int = Field(default=50, ge=1)
    noise_std: float = Field(default=0.0, ge=0)
    scheme: Scheme = "uniform"
    path: Optional[str] = None

    @model_validator(mode="after")
    def _file_has_path(self):
        if self.source == "file" and not self.path:
            raise ValueError("observations.path is required when source = 'file'")
        return self


# Optimizer Schemas
class OptimizerSpec(ConfigSection):
    kind: Literal["sgd", "adam"] = "adam"
    learning_rate: float = Field(default=1e-3, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)

class SolveConfig(ConfigSection):
    n_iter: int = Field(..., ge=1)
    batch_sizes: Dict[LossTerm, int] = {}
    weights: LossWeights = LossWeights()
    mask: Optional[MaskConfig] = None
    validation_every: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)


# Run Schemas
class ProblemConfig(ConfigSection):
    id: str
    mode: ProblemMode = "forward"
    ad_mode: AdMode = "forward"
    eq: Dict[str, float] = {}
    estimate: List[str] = []
    initial_guess: Dict[str, float] = {}
    theta_ranges: Dict[str, Tuple[float, float]] = {}
    meta_eval: Dict[str, List[float]] = {}
    field_net: List[int] = [16, 16]
    time_horizon: Optional[float] = Field(default=None, gt=0)
    observations: ObservationConfig = ObservationConfig()

    @model_validator(mode="after")
    def _mode_requirements(self):
        if self.mode == "inverse" and not self.estimate:
            raise ValueError("inverse mode needs at least one name in 'estimate'")
        if self.mode == "meta" and not self.theta_ranges:
            raise ValueError("meta mode needs 'theta_ranges'")
        for name, (lo, hi) in self.theta_ranges.items():
            if lo > hi:
                raise ValueError(f"theta range for '{name}' has lo > hi")
        return self

class ReferenceConfig(ConfigSection):
    kind: Literal["analytic", "file"] = "analytic"
    path: Optional[str] = None
    points_per_axis: Optional[int] = Field(default=None, ge=2)
    validation_points_per_axis: int = Field(default=21, ge=2)

    @model_validator(mode="after")
    def _file_has_path(self):
        if self.kind == "file" and not self.path:
            raise ValueError("reference.path is required when kind = 'file'")
        return self

class RunConfig(ConfigSection):
    problem: ProblemConfig
    net: NetConfig = NetConfig()
    sampler: SamplerSpec = SamplerSpec()
    optimizer: OptimizerSpec = OptimizerSpec()
    solve: SolveConfig
    mask: MaskConfig = MaskConfig()
    reference: ReferenceConfig = ReferenceConfig()
    output_dir: Optional[str] = None


# Report Schemas
class Report(BaseModel):
    problem: str
    mode: ProblemMode
    l1re: Dict[str, float]
    l2re: Dict[str, float]
    solution_l1re: Optional[float] = None
    solution_l2re: Optional[float] = None
    estimates: Dict[str, float] = {}
    final_loss: Dict[str, float]
    n_iter: int
    seed: int
    validation_points_per_axis: int
    wall_clock_seconds: float
    config_hash: str
    config: Dict[str, Any]

class ProblemSummary(BaseModel):
    id: str
    kind: str
    modes: List[ProblemMode]
    reference: str
    description: str

class GradCheckCase(BaseModel):
    term: LossTerm
    leaf: str
    rel_error: float
    passed: bool

class GradCheckReport(BaseModel):
    problem: str
    step_size: float
    tolerance: float
    cases: List[GradCheckCase]
    mode_agreement: float
    mode_tolerance: float
    passed: bool
