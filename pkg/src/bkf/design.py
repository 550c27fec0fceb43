"""Factorial scenario design, prompt rendering and response parsing.

Each persona sees the four sign combinations of an equal-magnitude micro and
macro shock around a fixed baseline.  Responses are JSON objects; the parser
here is deliberately forgiving about wrapping (prose, code fences, percent
strings) and strict about the numbers it extracts.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import yaml

DEFAULT_BASELINE = 3.0
DEFAULT_DELTA = 5.0
DEFAULT_TRIALS_PER_CELL = 30
DEFAULT_TEMPERATURE = 0.7
MAGNITUDE_TOLERANCE = 0.011

SCENARIO_SIGNS = {
    "S1": (+1, +1),
    "S2": (-1, -1),
    "S3": (+1, -1),
    "S4": (-1, +1),
}
SCENARIO_IDS = tuple(SCENARIO_SIGNS)


class DesignError(ValueError):
    """Invalid scenario, persona or plan parameters."""


class ResponseParseError(ValueError):
    """Base class for agent responses that cannot be turned into a record."""


class NoJsonFound(ResponseParseError):
    def __init__(self, snippet: str = ""):
        super().__init__(f"no JSON object found in response: {snippet[:80]!r}")


class MissingField(ResponseParseError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing field {name!r}")


class NonNumericField(ResponseParseError):
    def __init__(self, name: str, value=None):
        self.name = name
        super().__init__(f"field {name!r} is not numeric: {value!r}")


class PersonaKind(str, enum.Enum):
    HOUSEHOLD = "household"
    CEO = "ceo"

    @classmethod
    def parse(cls, text: str) -> "PersonaKind":
        key = str(text).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "household": cls.HOUSEHOLD,
            "hh": cls.HOUSEHOLD,
            "ceo": cls.CEO,
            "firmceo": cls.CEO,
            "firm": cls.CEO,
        }
        try:
            return aliases[key]
        except KeyError:
            raise DesignError(f"unknown persona {text!r} (expected household/hh or ceo)") from None

    @property
    def label(self) -> str:
        return "HH" if self is PersonaKind.HOUSEHOLD else "CEO"


@dataclass(frozen=True)
class Persona:
    kind: PersonaKind
    system_text: str
    metric: str
    micro_template: str
    rationale_hint: str = ""

    def __post_init__(self) -> None:
        if not self.system_text.strip():
            raise DesignError(f"persona {self.kind.value}: system_text must be non-empty")
        if "{shock}" not in self.micro_template:
            raise DesignError(f"persona {self.kind.value}: micro_template needs a {{shock}} slot")


@lru_cache(maxsize=None)
def _persona_defaults() -> dict:
    text = resources.files("bkf").joinpath("data/personas.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def default_persona(kind: PersonaKind | str, **overrides: str) -> Persona:
    """Persona with the packaged default texts, optionally overridden field by field."""
    kind = kind if isinstance(kind, PersonaKind) else PersonaKind.parse(kind)
    base = dict(_persona_defaults()[kind.value])
    base.pop("label", None)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return Persona(kind=kind, **base)


def default_personas() -> list[Persona]:
    return [default_persona(PersonaKind.HOUSEHOLD), default_persona(PersonaKind.CEO)]


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    shock_mic: float
    shock_mac: float
    baseline: float = DEFAULT_BASELINE
    delta: float = DEFAULT_DELTA

    def __post_init__(self) -> None:
        if self.id not in SCENARIO_SIGNS:
            raise DesignError(f"unknown scenario id {self.id!r}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise DesignError(f"delta must be > 0, got {self.delta}")
        if not math.isfinite(self.baseline):
            raise DesignError(f"baseline must be finite, got {self.baseline}")
        sign_mic, sign_mac = SCENARIO_SIGNS[self.id]
        if self.shock_mic != sign_mic * self.delta or self.shock_mac != sign_mac * self.delta:
            raise DesignError(
                f"{self.id} requires shocks ({sign_mic:+d}, {sign_mac:+d}) x {self.delta}, "
                f"got ({self.shock_mic}, {self.shock_mac})"
            )

    @property
    def signal_mic_level(self) -> float:
        return self.baseline + self.shock_mic

    @property
    def signal_mac_level(self) -> float:
        return self.baseline + self.shock_mac


def build_scenario_matrix(
    baseline: float = DEFAULT_BASELINE, delta: float = DEFAULT_DELTA
) -> list[ScenarioSpec]:
    """The four scenarios S1..S4 in table order."""
    if not delta > 0:
        raise DesignError(f"delta must be > 0, got {delta}")
    return [
        ScenarioSpec(sid, sm * delta, sM * delta, baseline=baseline, delta=delta)
        for sid, (sm, sM) in SCENARIO_SIGNS.items()
    ]


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str


def _pct(value: float, signed: bool = False) -> str:
    value = value + 0.0  # drop negative zero
    return f"{value:+.1f}%" if signed else f"{value:.1f}%"


def render_prompt_for_shocks(
    persona: Persona, baseline: float, shock_mic: float, shock_mac: float
) -> PromptBundle:
    """Render the prompt for arbitrary shocks (used by the continuous sampler)."""
    personal = "internal" if persona.kind is PersonaKind.CEO else "personal"
    user = "\n".join(
        [
            f"Context: Until now, your baseline expectation for your {persona.metric} "
            f"was {_pct(baseline)}.",
            "New Information:",
            "1. Micro Update: " + persona.micro_template.format(shock=_pct(shock_mic, signed=True)),
            "2. Macro Update: National GDP growth is expected to change by "
            f"{_pct(shock_mac, signed=True)} over the next 12 months.",
            "Task Instruction: Based on your identity, update your expectation for the next "
            "12 months. Evaluate if the broad economic trend reinforces or contradicts your "
            f"{personal} update."
            + (f" In the Rationale, {persona.rationale_hint}." if persona.rationale_hint else ""),
            "Output Format: Output ONLY a single JSON object:",
            "{",
            f'  "Prior_Expectation": "{_pct(baseline)}",',
            '  "Updated_Expectation": X.XX,',
            '  "Change_Magnitude": Y.YY,',
            '  "Rationale": "Explain your signal integration logic..."',
            "}",
        ]
    )
    return PromptBundle(system=persona.system_text, user=user)


def render_prompt(persona: Persona, scenario: ScenarioSpec) -> PromptBundle:
    return render_prompt_for_shocks(
        persona, scenario.baseline, scenario.shock_mic, scenario.shock_mac
    )


# -- trial records -----------------------------------------------------------

FLAG_INCONSISTENT_MAGNITUDE = "inconsistent_change_magnitude"


@dataclass(frozen=True)
class TrialRecord:
    persona: str
    scenario_id: str
    model_id: str
    trial_index: int
    prior: float
    signal_mic_level: float
    signal_mac_level: float
    updated_expectation: float
    change_magnitude: float
    rationale: str
    raw_response: str
    timestamp: str
    prior_echo: str | None = None
    flags: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.model_id, self.persona, self.scenario_id, self.trial_index)

    def to_json(self) -> str:
        data = asdict(self)
        data["flags"] = list(self.flags)
        return json.dumps(data, ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "TrialRecord":
        data = dict(data)
        data["flags"] = tuple(data.get("flags") or ())
        return cls(**data)


def read_records(path: str | Path) -> list[TrialRecord]:
    """Load a JSONL trial file.  A torn final line (interrupted writer) is ignored."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(TrialRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            if lineno == len(lines):
                break
            raise ValueError(f"{path}:{lineno}: bad trial record: {exc}") from exc
    return records


def write_records(path: str | Path, records: Iterable[TrialRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


# -- response parsing --------------------------------------------------------

_FIELD_UPDATED = "Updated_Expectation"
_FIELD_CHANGE = "Change_Magnitude"
_FIELD_PRIOR = "Prior_Expectation"
_FIELD_RATIONALE = "Rationale"


def _balanced_object(text: str, start: int) -> str | None:
    """Substring from ``text[start] == '{'`` to its matching brace, string-aware."""
    depth = 0
    in_str = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


_TRAILING_COMMA = re.compile(r",\s*([}\]])")
_BARE_PERCENT = re.compile(r":\s*([+\-−]?\d+(?:\.\d+)?)\s*%")


def _repair(candidate: str) -> str:
    candidate = candidate.replace("“", '"').replace("”", '"')
    candidate = _TRAILING_COMMA.sub(r"\1", candidate)
    return _BARE_PERCENT.sub(lambda m: f': "{m.group(1)}%"', candidate)


def extract_json_object(raw: str) -> dict:
    """First JSON object embedded anywhere in ``raw``.

    Objects are located by balanced-brace scanning; a light repair pass
    (trailing commas, bare ``7.0%`` values, curly quotes) is tried before
    moving on to the next candidate.
    """
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            chunk = _balanced_object(raw, pos)
            if chunk is not None:
                try:
                    obj = json.loads(_repair(chunk))
                    if isinstance(obj, dict):
                        return obj
                except json.JSONDecodeError:
                    pass
        pos = raw.find("{", pos + 1)
    raise NoJsonFound(raw)


def _norm_key(key: str) -> str:
    return re.sub(r"[^a-z0-9]", "", str(key).lower())


def _lookup(obj: dict, name: str):
    target = _norm_key(name)
    for key, value in obj.items():
        if _norm_key(key) == target:
            return value
    raise MissingField(name)


def coerce_number(name: str, value) -> float:
    """Accept JSON numbers or strings like ``"7.02%"`` / ``"+4.0"``."""
    if isinstance(value, bool):
        raise NonNumericField(name, value)
    if isinstance(value, (int, float)):
        number = float(value)
    elif isinstance(value, str):
        text = value.strip().replace("−", "-").rstrip("%").strip()
        try:
            number = float(text)
        except ValueError:
            raise NonNumericField(name, value) from None
    else:
        raise NonNumericField(name, value)
    if not math.isfinite(number):
        raise NonNumericField(name, value)
    return number


@dataclass(frozen=True)
class ParsedResponse:
    updated_expectation: float
    change_magnitude: float
    rationale: str
    prior_echo: str | None


def parse_fields(raw: str) -> ParsedResponse:
    obj = extract_json_object(raw)
    updated = coerce_number(_FIELD_UPDATED, _lookup(obj, _FIELD_UPDATED))
    change = coerce_number(_FIELD_CHANGE, _lookup(obj, _FIELD_CHANGE))
    try:
        rationale = _lookup(obj, _FIELD_RATIONALE)
    except MissingField:
        rationale = ""
    try:
        prior_echo = _lookup(obj, _FIELD_PRIOR)
    except MissingField:
        prior_echo = None
    return ParsedResponse(
        updated_expectation=updated,
        change_magnitude=change,
        rationale=rationale if isinstance(rationale, str) else json.dumps(rationale),
        prior_echo=None if prior_echo is None else str(prior_echo),
    )


def parse_response(
    raw: str,
    scenario: ScenarioSpec,
    persona: Persona | PersonaKind,
    *,
    model_id: str = "",
    trial_index: int = 0,
    timestamp: str = "",
) -> TrialRecord:
    """Turn raw agent output into a :class:`TrialRecord`.

    Raises a :class:`ResponseParseError` subclass when the numbers can't be
    read.  A change magnitude that disagrees with ``updated - prior`` is kept
    and flagged.
    """
    parsed = parse_fields(raw)
    kind = persona.kind if isinstance(persona, Persona) else PersonaKind(persona)
    prior = scenario.baseline
    flags = []
    if abs(parsed.change_magnitude - (parsed.updated_expectation - prior)) > MAGNITUDE_TOLERANCE:
        flags.append(FLAG_INCONSISTENT_MAGNITUDE)
    return TrialRecord(
        persona=kind.value,
        scenario_id=scenario.id,
        model_id=model_id,
        trial_index=trial_index,
        prior=prior,
        signal_mic_level=scenario.signal_mic_level,
        signal_mac_level=scenario.signal_mac_level,
        updated_expectation=parsed.updated_expectation,
        change_magnitude=parsed.change_magnitude,
        rationale=parsed.rationale,
        raw_response=raw,
        timestamp=timestamp,
        prior_echo=parsed.prior_echo,
        flags=tuple(flags),
    )


# -- plan --------------------------------------------------------------------


@dataclass(frozen=True)
class TrialCoordinate:
    model_id: str
    persona: Persona
    scenario: ScenarioSpec
    trial_index: int

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.model_id, self.persona.kind.value, self.scenario.id, self.trial_index)


@dataclass(frozen=True)
class TrialPlan:
    personas: tuple[Persona, ...] = field(default_factory=lambda: tuple(default_personas()))
    scenarios: tuple[ScenarioSpec, ...] = field(
        default_factory=lambda: tuple(build_scenario_matrix())
    )
    trials_per_cell: int = DEFAULT_TRIALS_PER_CELL
    model_ids: tuple[str, ...] = ("synthetic",)
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "personas", tuple(self.personas))
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        if not isinstance(self.trials_per_cell, int) or self.trials_per_cell < 1:
            raise DesignError(f"trials_per_cell must be a positive integer, got {self.trials_per_cell}")
        if self.temperature < 0:
            raise DesignError(f"temperature must be >= 0, got {self.temperature}")
        if self.seed < 0:
            raise DesignError(f"seed must be non-negative, got {self.seed}")
        if not self.personas or not self.scenarios or not self.model_ids:
            raise DesignError("plan needs at least one persona, scenario and model id")

    @property
    def total_trials(self) -> int:
        return (
            len(self.personas) * len(self.scenarios) * len(self.model_ids) * self.trials_per_cell
        )

    def persona(self, kind: PersonaKind | str) -> Persona:
        kind = kind if isinstance(kind, PersonaKind) else PersonaKind.parse(kind)
        for p in self.personas:
            if p.kind is kind:
                return p
        raise DesignError(f"persona {kind.value} not in plan")

    def scenario(self, sid: str) -> ScenarioSpec:
        for s in self.scenarios:
            if s.id == sid:
                return s
        raise DesignError(f"scenario {sid} not in plan")

    def coordinates(self) -> Iterator[TrialCoordinate]:
        """Every trial in fixed order: model, persona, scenario, trial index."""
        for model_id in self.model_ids:
            for persona in self.personas:
                for scenario in self.scenarios:
                    for i in range(self.trials_per_cell):
                        yield TrialCoordinate(model_id, persona, scenario, i)
