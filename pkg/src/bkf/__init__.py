"""Behavioral Kalman filter toolkit for LLM expectation-formation experiments."""

from .kalman import (
    BehavioralParams,
    GainVector,
    NoiseSpec,
    SignalVector,
    StateEstimate,
    behavioral_update,
    gain,
    standard_update,
    subjective_covariance,
)
from .design import (
    Persona,
    PersonaKind,
    PromptBundle,
    ScenarioSpec,
    TrialPlan,
    TrialRecord,
    build_scenario_matrix,
    parse_response,
    render_prompt,
)
from .agents import ReducedFormParams, run_campaign, synthetic_respond
from .estimation import (
    McmcConfig,
    PosteriorSummary,
    PriorSpec,
    RationalityVerdict,
    build_design,
    gibbs_fit,
    hdi,
    rationality_test,
)

__version__ = "0.1.0"

__all__ = [
    "BehavioralParams", "GainVector", "NoiseSpec", "SignalVector", "StateEstimate",
    "behavioral_update", "gain", "standard_update", "subjective_covariance",
    "Persona", "PersonaKind", "PromptBundle", "ScenarioSpec", "TrialPlan", "TrialRecord",
    "build_scenario_matrix", "parse_response", "render_prompt",
    "ReducedFormParams", "run_campaign", "synthetic_respond",
    "McmcConfig", "PosteriorSummary", "PriorSpec", "RationalityVerdict",
    "build_design", "gibbs_fit", "hdi", "rationality_test",
]
