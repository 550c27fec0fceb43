"""YAML run configuration with line-anchored validation errors.

Every section is optional; missing keys take the documented defaults::

    seed: 20250101
    design:   {baseline: 3.0, delta: 5.0, personas: {household: {...}, ceo: {...}}}
    plan:     {trials_per_cell: 30, model_ids: [synthetic], temperature: 0.7}
    agent:    {kind: rational, noise_sd: 0.0, params: {beta_prior: ..., ...}}
    endpoint: {base_url: ..., api_key_env_var: ..., max_parallel: 4, ...}
    estimation: {prior: {...}, mcmc: {...}, standardize: false, dump_draws: false}
    finetune: {n: 1000, sampler: grid, shock_range: [-5, 5], personas: [household, ceo]}
    verify:   {noise_sd: 0.0}
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agents import EndpointConfig, FinetuneConfig, ReducedFormParams, ShockSampler
from .design import (
    DEFAULT_BASELINE,
    DEFAULT_DELTA,
    DEFAULT_TEMPERATURE,
    DEFAULT_TRIALS_PER_CELL,
    Persona,
    PersonaKind,
    TrialPlan,
    build_scenario_matrix,
    default_persona,
)
from .estimation import McmcConfig, PriorSpec

DEFAULT_SEED = 20250101


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: int | None = None, source: str = ""):
        self.field = path
        self.line = line
        where = source or "config"
        if line is not None:
            where += f":{line}"
        prefix = f"{where}: {path}: " if path else f"{where}: "
        super().__init__(prefix + message)


def _line_map(text: str) -> dict[str, int]:
    root = yaml.compose(text)
    lines: dict[str, int] = {}

    def walk(node, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[path] = key_node.start_mark.line + 1
                walk(value_node, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                lines[f"{prefix}[{i}]"] = item.start_mark.line + 1
                walk(item, f"{prefix}[{i}]")

    if root is not None:
        walk(root, "")
    return lines


class _Reader:
    def __init__(self, data: dict, lines: dict[str, int], source: str):
        self.data = data
        self.lines = lines
        self.source = source

    def error(self, path: str, message: str) -> ConfigError:
        line = self.lines.get(path)
        if line is None and "." in path:
            line = self.lines.get(path.rsplit(".", 1)[0])
        return ConfigError(message, path, line, self.source)

    def section(self, path: str, allowed: set[str]) -> dict:
        node: Any = self.data
        for part in path.split(".") if path else []:
            node = node.get(part) if isinstance(node, dict) else None
            if node is None:
                return {}
        if not isinstance(node, dict):
            raise self.error(path, "must be a mapping")
        for key in node:
            if key not in allowed:
                raise self.error(f"{path}.{key}" if path else str(key),
                                 f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return node

    def number(self, sec: dict, path: str, key: str, default, *, integer=False, check=None, why=""):
        value = sec.get(key, default)
        full = f"{path}.{key}" if path else key
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(full, f"must be a number, got {value!r}")
        if integer and not float(value).is_integer():
            raise self.error(full, f"must be an integer, got {value!r}")
        if not math.isfinite(value):
            raise self.error(full, f"must be finite, got {value!r}")
        if check is not None and not check(value):
            raise self.error(full, f"{why} (got {value!r})")
        return int(value) if integer else float(value)


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    baseline: float = DEFAULT_BASELINE
    delta: float = DEFAULT_DELTA
    personas: tuple[Persona, ...] = field(
        default_factory=lambda: (default_persona("household"), default_persona("ceo"))
    )
    trials_per_cell: int = DEFAULT_TRIALS_PER_CELL
    model_ids: tuple[str, ...] = ("synthetic",)
    temperature: float = DEFAULT_TEMPERATURE
    agent_kind: str = "rational"
    agent_params: ReducedFormParams = field(default_factory=ReducedFormParams.rational)
    endpoint: EndpointConfig | None = None
    prior: PriorSpec = field(default_factory=PriorSpec)
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(seed=DEFAULT_SEED))
    standardize: bool = False
    dump_draws: bool = False
    hdi_mass: float = 0.95
    finetune_n: int = 1000
    finetune_sampler: ShockSampler = ShockSampler.GRID
    finetune_range: tuple[float, float] = (-5.0, 5.0)
    finetune_personas: tuple[str, ...] = ("household", "ceo")
    verify_noise_sd: float = 0.0
    source: str = "<defaults>"
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, seed=seed, mcmc=dataclasses.replace(self.mcmc, seed=seed)
        )

    def plan(self) -> TrialPlan:
        return TrialPlan(
            personas=self.personas,
            scenarios=tuple(build_scenario_matrix(self.baseline, self.delta)),
            trials_per_cell=self.trials_per_cell,
            model_ids=self.model_ids,
            temperature=self.temperature,
            seed=self.seed,
        )

    def finetune(self, n: int | None = None) -> FinetuneConfig:
        kinds = [PersonaKind.parse(p) for p in self.finetune_personas]
        personas = tuple(p for k in kinds for p in self.personas if p.kind is k)
        return FinetuneConfig(
            n=self.finetune_n if n is None else n,
            sampler=self.finetune_sampler,
            shock_range=self.finetune_range,
            baseline=self.baseline,
            delta=self.delta,
            personas=personas,
            seed=self.seed,
        )

    def echo(self) -> dict:
        """Effective configuration as plain data, for manifests and output echoes."""
        return {
            "seed": self.seed,
            "design": {
                "baseline": self.baseline,
                "delta": self.delta,
                "personas": {p.kind.value: dataclasses.asdict(p) | {"kind": p.kind.value}
                             for p in self.personas},
            },
            "plan": {
                "trials_per_cell": self.trials_per_cell,
                "model_ids": list(self.model_ids),
                "temperature": self.temperature,
            },
            "agent": {"kind": self.agent_kind, "params": dataclasses.asdict(self.agent_params)},
            "endpoint": None if self.endpoint is None else dataclasses.asdict(self.endpoint),
            "estimation": {
                "prior": dataclasses.asdict(self.prior),
                "mcmc": {k: v for k, v in dataclasses.asdict(self.mcmc).items()
                         if k != "chain_seeds"},
                "standardize": self.standardize,
                "dump_draws": self.dump_draws,
                "hdi_mass": self.hdi_mass,
            },
            "finetune": {
                "n": self.finetune_n,
                "sampler": self.finetune_sampler.value,
                "shock_range": list(self.finetune_range),
                "personas": list(self.finetune_personas),
            },
            "verify": {"noise_sd": self.verify_noise_sd},
        }


_TOP = {"seed", "design", "plan", "agent", "endpoint", "estimation", "finetune", "verify"}
_PERSONA_KEYS = {"system_text", "metric", "micro_template", "rationale_hint"}
_ENDPOINT_KEYS = {f.name for f in dataclasses.fields(EndpointConfig)}


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Read and validate a YAML run config.  ``None`` yields the defaults."""
    if path is None and text is None:
        return RunConfig()
    source = str(path) if path is not None else "<string>"
    if text is None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", source=source) from exc
    try:
        data = yaml.safe_load(text) or {}
        lines = _line_map(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", line=None if mark is None else mark.line + 1,
                          source=source) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", source=source)
    rd = _Reader(data, lines, source)
    top = rd.section("", _TOP)
    seed = rd.number(top, "", "seed", DEFAULT_SEED, integer=True,
                     check=lambda v: v >= 0, why="must be >= 0")

    design = rd.section("design", {"baseline", "delta", "personas"})
    baseline = rd.number(design, "design", "baseline", DEFAULT_BASELINE)
    delta = rd.number(design, "design", "delta", DEFAULT_DELTA,
                      check=lambda v: v > 0, why="must be > 0")
    persona_sec = rd.section("design.personas", {"household", "ceo"})
    personas = []
    for kind in ("household", "ceo"):
        over = rd.section(f"design.personas.{kind}", _PERSONA_KEYS) if kind in persona_sec else {}
        for key, value in over.items():
            if not isinstance(value, str) or not value.strip():
                raise rd.error(f"design.personas.{kind}.{key}", "must be a non-empty string")
        try:
            personas.append(default_persona(kind, **over))
        except ValueError as exc:
            raise rd.error(f"design.personas.{kind}", str(exc)) from exc

    plan = rd.section("plan", {"trials_per_cell", "model_ids", "temperature"})
    trials = rd.number(plan, "plan", "trials_per_cell", DEFAULT_TRIALS_PER_CELL, integer=True,
                       check=lambda v: v >= 1, why="must be >= 1")
    temperature = rd.number(plan, "plan", "temperature", DEFAULT_TEMPERATURE,
                            check=lambda v: v >= 0, why="must be >= 0")
    model_ids = plan.get("model_ids", ["synthetic"])
    if (not isinstance(model_ids, list) or not model_ids
            or not all(isinstance(m, str) and m for m in model_ids)):
        raise rd.error("plan.model_ids", "must be a non-empty list of strings")
    if len(set(model_ids)) != len(model_ids):
        raise rd.error("plan.model_ids", "must not contain duplicates")

    agent = rd.section("agent", {"kind", "noise_sd", "params"})
    kind = agent.get("kind", "rational")
    if kind not in ("rational", "synthetic"):
        raise rd.error("agent.kind", f"must be 'rational' or 'synthetic', got {kind!r}")
    noise_sd = rd.number(agent, "agent", "noise_sd", 0.0, check=lambda v: v >= 0, why="must be >= 0")
    params_sec = rd.section("agent.params", {"beta_prior", "beta_mic", "beta_mac", "beta_int"})
    if kind == "rational":
        if params_sec:
            raise rd.error("agent.params", "rational agents have fixed weights; use kind: synthetic")
        params = ReducedFormParams.rational(noise_sd)
    else:
        betas = [rd.number(params_sec, "agent.params", k, d)
                 for k, d in (("beta_prior", 0.4), ("beta_mic", 0.4), ("beta_mac", 0.2),
                              ("beta_int", 0.0))]
        params = ReducedFormParams(*betas, noise_sd=noise_sd)

    endpoint = None
    ep_sec = rd.section("endpoint", _ENDPOINT_KEYS)
    if ep_sec:
        if "base_url" not in ep_sec:
            raise rd.error("endpoint", "base_url is required")
        for secret in ("api_key", "key", "token"):
            if secret in ep_sec:
                raise rd.error(f"endpoint.{secret}", "secrets belong in the environment")
        try:
            endpoint = EndpointConfig(**{**ep_sec, "temperature": temperature})
        except (TypeError, ValueError) as exc:
            raise rd.error("endpoint", str(exc)) from exc

    est = rd.section("estimation", {"prior", "mcmc", "standardize", "dump_draws", "hdi_mass"})
    pr = rd.section("estimation.prior", {"beta_prior_cov_scale", "sigma2_shape", "sigma2_rate"})
    positive = dict(check=lambda v: v > 0, why="must be > 0")
    prior = PriorSpec(
        rd.number(pr, "estimation.prior", "beta_prior_cov_scale", 100.0, **positive),
        rd.number(pr, "estimation.prior", "sigma2_shape", 2.0, **positive),
        rd.number(pr, "estimation.prior", "sigma2_rate", 1.0, **positive),
    )
    mc = rd.section("estimation.mcmc", {"chains", "iterations", "burn_in", "thin"})
    chains = rd.number(mc, "estimation.mcmc", "chains", 4, integer=True,
                       check=lambda v: v >= 2, why="must be >= 2")
    iterations = rd.number(mc, "estimation.mcmc", "iterations", 5000, integer=True,
                           check=lambda v: v >= 1, why="must be >= 1")
    burn_in = rd.number(mc, "estimation.mcmc", "burn_in", 1000, integer=True,
                        check=lambda v: 0 <= v < iterations, why="must satisfy 0 <= burn_in < iterations")
    thin = rd.number(mc, "estimation.mcmc", "thin", 1, integer=True,
                     check=lambda v: v >= 1, why="must be >= 1")
    mcmc = McmcConfig(chains=chains, iterations=iterations, burn_in=burn_in, thin=thin, seed=seed)
    if mcmc.retained_per_chain < 100:
        raise rd.error("estimation.mcmc", "fewer than 100 retained draws per chain")
    flags = {}
    for key in ("standardize", "dump_draws"):
        flags[key] = est.get(key, False)
        if not isinstance(flags[key], bool):
            raise rd.error(f"estimation.{key}", "must be true or false")
    hdi_mass = rd.number(est, "estimation", "hdi_mass", 0.95,
                         check=lambda v: 0 < v < 1, why="must lie in (0, 1)")

    ft = rd.section("finetune", {"n", "sampler", "shock_range", "personas"})
    ft_n = rd.number(ft, "finetune", "n", 1000, integer=True, check=lambda v: v >= 1, why="must be >= 1")
    try:
        sampler = ShockSampler(ft.get("sampler", "grid"))
    except ValueError:
        raise rd.error("finetune.sampler", "must be 'grid' or 'uniform'") from None
    rng_range = ft.get("shock_range", [-5.0, 5.0])
    if (not isinstance(rng_range, list) or len(rng_range) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rng_range)
            or not rng_range[0] < rng_range[1]):
        raise rd.error("finetune.shock_range", "must be [low, high] with low < high")
    ft_personas = ft.get("personas", ["household", "ceo"])
    try:
        ft_personas = tuple(PersonaKind.parse(p).value for p in ft_personas)
    except (ValueError, TypeError) as exc:
        raise rd.error("finetune.personas", str(exc)) from None

    ver = rd.section("verify", {"noise_sd"})
    verify_noise = rd.number(ver, "verify", "noise_sd", 0.0, check=lambda v: v >= 0, why="must be >= 0")

    return RunConfig(
        seed=seed,
        baseline=baseline,
        delta=delta,
        personas=tuple(personas),
        trials_per_cell=trials,
        model_ids=tuple(model_ids),
        temperature=temperature,
        agent_kind=kind,
        agent_params=params,
        endpoint=endpoint,
        prior=prior,
        mcmc=mcmc,
        standardize=flags["standardize"],
        dump_draws=flags["dump_draws"],
        hdi_mass=hdi_mass,
        finetune_n=ft_n,
        finetune_sampler=sampler,
        finetune_range=(float(rng_range[0]), float(rng_range[1])),
        finetune_personas=ft_personas,
        verify_noise_sd=verify_noise,
        source=source,
        raw=data,
    )
