from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic.v1 import BaseModel, Field, root_validator, validator

SCHEMA_VERSION = 1

Likelihood = Literal["gaussian", "bernoulli-logit"]
PriorFamily = Literal["hier-normal-noncentered", "horseshoe", "spike-and-slab"]
Method = Literal["bhip-noncentered", "bhip-horseshoe", "bhip-spikeslab", "icp"]

# Short names accepted on the command line.
MODEL_ALIASES: Dict[str, str] = {
    "noncentered": "hier-normal-noncentered",
    "horseshoe": "horseshoe",
    "spikeslab": "spike-and-slab",
}
METHOD_FAMILIES: Dict[str, str] = {
    "bhip-noncentered": "hier-normal-noncentered",
    "bhip-horseshoe": "horseshoe",
    "bhip-spikeslab": "spike-and-slab",
}


class ConfigModel(BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True


# ---------------------------------------------------------------------------
# Model / sampler / decision configuration
# ---------------------------------------------------------------------------


class Hyperparams(ConfigModel):
    mu0: float = 0.0
    mu_sd: float = Field(5.0, gt=0)
    tau_scale: float = Field(1.0, gt=0)
    sigma_obs_scale: float = Field(1.0, gt=0)
    slab_sd_scale: float = Field(1.0, gt=0)
    spike_scale_scale: float = Field(0.1, gt=0)


class ModelSpec(ConfigModel):
    # None means "pick from the dataset's target kind".
    likelihood: Optional[Likelihood] = None
    prior_family: PriorFamily = "hier-normal-noncentered"
    hyperparams: Hyperparams = Field(default_factory=Hyperparams)

    @validator("prior_family", pre=True)
    def resolve_alias(cls, v):
        if isinstance(v, str):
            return MODEL_ALIASES.get(v, v)
        return v


class SamplerConfig(ConfigModel):
    chains: int = Field(4, ge=1)
    warmup: int = Field(1000, ge=1)
    draws: int = Field(1000, ge=1)
    target_accept: float = Field(0.8, gt=0, lt=1)
    max_tree_depth: int = Field(10, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    mass_matrix: Literal["identity", "diagonal"] = "diagonal"


class DecisionConfig(ConfigModel):
    hdi_mass: float = Field(0.95, gt=0, lt=1)
    rope_mode: Literal["posterior-sd", "target-sd"] = "target-sd"
    rope_multiplier: float = Field(0.1, gt=0)
    hdi_threshold: float = Field(0.95, gt=0, lt=1)
    pooling_threshold: float = Field(0.85, gt=0, lt=1)
    z_threshold: float = Field(0.5, gt=0, lt=1)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


class PredictorDecision(BaseModel):
    index: int
    name: str
    hdi_frac_global: Optional[float] = None
    hdi_frac_local: List[float] = Field(default_factory=list)
    hdi_frac_local_min: float
    pooling_factor: Optional[float] = None
    inclusion_prob: Optional[float] = None
    lambda_mean: Optional[float] = None
    rope_halfwidth: float
    selected: bool

    @validator("hdi_frac_global", "hdi_frac_local_min")
    def check_fraction(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError(f"fraction out of [0, 1]: {v}")
        return v

    @validator("pooling_factor")
    def check_pooling(cls, v):
        if v is not None and v > 1.0 + 1e-12:
            raise ValueError(f"pooling factor above 1: {v}")
        return v


class DecisionReport(BaseModel):
    schema_version: int = SCHEMA_VERSION
    prior_family: PriorFamily
    target_name: str
    predictors: List[PredictorDecision]
    selected: List[str]
    selected_by_z: Optional[List[str]] = None
    thresholds: DecisionConfig

    def selected_indices(self) -> List[int]:
        return [p.index for p in self.predictors if p.selected]


class SubsetTest(BaseModel):
    subset: List[int]
    p_value: float
    accepted: bool


class IcpResult(BaseModel):
    schema_version: int = SCHEMA_VERSION
    alpha: float
    predictor_names: List[str]
    tests: List[SubsetTest]
    intersection: List[int]
    model_rejected: bool = False
    predictor_pvalues: List[float] = Field(default_factory=list)

    @property
    def accepted_sets(self) -> List[List[int]]:
        return [t.subset for t in self.tests if t.accepted]

    @property
    def rejected_sets(self) -> List[List[int]]:
        return [t.subset for t in self.tests if not t.accepted]

    def intersection_names(self) -> List[str]:
        return [self.predictor_names[i] for i in self.intersection]


class Metrics(BaseModel):
    precision: float
    recall: float
    f1: float
    specificity: float


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


class BusStopParams(ConfigModel):
    peak_hour: float = Field(8.0, ge=0, lt=24)
    daily_amplitude: float = 0.5
    peak_day: int = Field(4, ge=0, le=6)
    weekly_amplitude: float = 0.3
    boarding_base_rate: float = Field(8.0, gt=0)
    alighting_base_rate: float = Field(6.0, gt=0)
    boarding_coeff: float = 2.0
    alighting_coeff: float = 1.0
    # Zero is allowed so the noiseless identity Y = X3 + X4 can be generated.
    noise_sd: float = Field(1.0, ge=0)
    traffic_base: float = 1.0
    traffic_noise_sd: float = Field(0.1, ge=0)
    horizon_days: int = Field(28, ge=1)


class BenchConfig(ConfigModel):
    schema_version: int = SCHEMA_VERSION
    nodes_list: List[int] = Field(default_factory=lambda: [4])
    samples_list: List[int] = Field(default_factory=lambda: [2000])
    envs_list: List[int] = Field(default_factory=lambda: [3])
    n_dags: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    methods: List[Method] = Field(
        default_factory=lambda: ["bhip-noncentered", "icp"]
    )
    thresholds: DecisionConfig = Field(default_factory=DecisionConfig)
    sampler: SamplerConfig = Field(
        default_factory=lambda: SamplerConfig(chains=2, warmup=500, draws=500)
    )
    include_intervened_targets: bool = True
    intervene_any_node: bool = True
    edge_prob: float = Field(0.5, ge=0, le=1)
    positive_effects: bool = False
    icp_alpha: float = Field(0.05, gt=0, lt=1)

    @validator("nodes_list", "samples_list", "envs_list")
    def check_nonempty(cls, v: List[int], field) -> List[int]:
        if not v:
            raise ValueError(f"{field.name} must not be empty")
        if any(x < 1 for x in v):
            raise ValueError(f"{field.name} entries must be positive")
        return v

    @validator("nodes_list")
    def check_nodes(cls, v: List[int]) -> List[int]:
        if any(x < 2 for x in v):
            raise ValueError("nodes_list entries must be >= 2")
        return v

    @validator("methods")
    def check_methods(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("methods must not be empty")
        return list(dict.fromkeys(v))


# ---------------------------------------------------------------------------
# Command configuration
# ---------------------------------------------------------------------------


class DataSource(ConfigModel):
    path: str
    target: str = "y"
    env_column: Optional[str] = "env"
    median_split: Optional[str] = None
    target_kind: Literal["auto", "continuous", "binary"] = "auto"
    drop_columns: List[str] = Field(default_factory=list)
    standardize: bool = True

    @root_validator(skip_on_failure=True)
    def check_environment_source(cls, values):
        if values.get("median_split") is None and not values.get("env_column"):
            raise ValueError("either env_column or median_split is required")
        return values


class RunConfig(ConfigModel):
    schema_version: int = SCHEMA_VERSION
    data: DataSource
    model: ModelSpec = Field(default_factory=ModelSpec)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    decision: DecisionConfig = Field(default_factory=DecisionConfig)
    out_dir: str = "out"
    save_draws: bool = False

    @validator("schema_version")
    def check_version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v
