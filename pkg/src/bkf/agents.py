"""Response generators and the campaign runner.

Three backends produce agent answers for a rendered prompt:

* ``SyntheticBackend`` draws from the reduced-form linear response model,
* ``rational_backend()`` builds the same model pinned to the rational benchmark
  weights (0.4 prior, 0.4 micro, 0.2 macro, no interaction),
* ``LiveBackend`` sends the prompt to a chat-completion endpoint.

Synthetic answers are emitted as JSON text so they go through the same
parser as live ones.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

import httpx
import numpy as np

from .design import (
    DEFAULT_BASELINE,
    DEFAULT_DELTA,
    FLAG_INCONSISTENT_MAGNITUDE,
    Persona,
    PromptBundle,
    ResponseParseError,
    TrialCoordinate,
    TrialPlan,
    TrialRecord,
    build_scenario_matrix,
    default_personas,
    parse_response,
    read_records,
    render_prompt,
    render_prompt_for_shocks,
)

log = logging.getLogger("bkf.agents")

RATIONAL_WEIGHTS = (0.4, 0.4, 0.2, 0.0)
SYNTHETIC_TIMESTAMP = "1970-01-01T00:00:00+00:00"


def log_event(event: str, level: int = logging.INFO, **fields) -> None:
    """Emit one structured log line (a JSON object) on the ``bkf.agents`` logger."""
    log.log(level, json.dumps({"event": event, **fields}, sort_keys=True, default=str))


@dataclass(frozen=True)
class ReducedFormParams:
    beta_prior: float
    beta_mic: float
    beta_mac: float
    beta_int: float = 0.0
    noise_sd: float = 0.0

    def __post_init__(self) -> None:
        for name in ("beta_prior", "beta_mic", "beta_mac", "beta_int", "noise_sd"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")

    @classmethod
    def rational(cls, noise_sd: float = 0.0) -> "ReducedFormParams":
        b_prior, b_mic, b_mac, b_int = RATIONAL_WEIGHTS
        return cls(b_prior, b_mic, b_mac, b_int, noise_sd)

    def mean_response(self, prior: float, s_mic: float, s_mac: float) -> float:
        return (
            self.beta_prior * prior
            + self.beta_mic * s_mic
            + self.beta_mac * s_mac
            + self.beta_int * s_mic * s_mac
        )


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def response_json(prior: float, updated: float, rationale: str, decimals: int | None = None) -> str:
    """Agent answer in the prompt's JSON output format.

    ``decimals=None`` keeps full float precision (exact round trip through the
    parser); ``decimals=2`` gives the ``X.XX`` display used for training targets.
    """
    change = updated - prior
    if decimals is None:
        upd_txt, chg_txt = repr(float(updated)), repr(float(change))
    else:
        upd_txt = f"{round(updated, decimals) + 0.0:.{decimals}f}"
        chg_txt = f"{round(change, decimals) + 0.0:.{decimals}f}"
    return (
        "{"
        f'"Prior_Expectation": "{prior + 0.0:.1f}%", '
        f'"Updated_Expectation": {upd_txt}, '
        f'"Change_Magnitude": {chg_txt}, '
        f'"Rationale": {json.dumps(rationale)}'
        "}"
    )


def synthetic_respond(
    params: ReducedFormParams, prior: float, s_mic: float, s_mac: float, rng_seed=None
) -> tuple[float, str]:
    """Draw one reduced-form response.  Returns ``(value, json_text)``."""
    value = params.mean_response(prior, s_mic, s_mac)
    if params.noise_sd > 0:
        value += float(_as_rng(rng_seed).normal(0.0, params.noise_sd))
    rationale = (
        f"Weights {params.beta_prior:g} on the prior, {params.beta_mic:g} on the micro "
        f"signal, {params.beta_mac:g} on the macro signal, {params.beta_int:g} on their product."
    )
    return value, response_json(prior, value, rationale)


# -- live endpoint client ----------------------------------------------------


class LiveAgentError(RuntimeError):
    """Base class for chat-endpoint failures."""


class AuthError(LiveAgentError):
    pass


class Timeout(LiveAgentError):
    pass


class RateLimited(LiveAgentError):
    pass


class MalformedProviderResponse(LiveAgentError):
    pass


class ProviderError(LiveAgentError):
    """Non-retryable HTTP error other than an auth failure, or retries exhausted on 5xx."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str = ""
    api_key_env_var: str = "OPENAI_API_KEY"
    temperature: float = 0.7
    timeout: float = 60.0
    max_retries: int = 5
    max_parallel: int = 4
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    path: str = "/chat/completions"
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    model_field: str = "model"
    messages_field: str = "messages"
    temperature_field: str = "temperature"
    response_text_path: str = "choices.0.message.content"

    def __post_init__(self) -> None:
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env_var)
        if not key:
            raise AuthError(f"environment variable {self.api_key_env_var} is not set")
        return key


_RETRY_STATUS = {429, 500, 502, 503, 504}


def _dig(payload, dotted: str):
    node = payload
    for part in dotted.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node[part]
    return node


class ChatClient:
    """Stateless chat-completion caller: every request carries only system + user."""

    def __init__(
        self,
        endpoint: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self._key = endpoint.api_key()
        self._sleep = sleep
        self._http = httpx.Client(
            base_url=endpoint.base_url, timeout=endpoint.timeout, transport=transport
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _body(self, bundle: PromptBundle, model_id: str, temperature: float) -> dict:
        ep = self.endpoint
        return {
            ep.model_field: model_id,
            ep.messages_field: [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user},
            ],
            ep.temperature_field: temperature,
        }

    def complete(
        self, bundle: PromptBundle, model_id: str | None = None, temperature: float | None = None
    ) -> str:
        ep = self.endpoint
        model_id = model_id or ep.model_id
        temperature = ep.temperature if temperature is None else temperature
        headers = {ep.auth_header: f"{ep.auth_scheme} {self._key}".strip()}
        body = self._body(bundle, model_id, temperature)
        last_error: LiveAgentError | None = None
        for attempt in range(ep.max_retries + 1):
            if attempt:
                delay = min(ep.backoff_max, ep.backoff_base * 2 ** (attempt - 1))
                log_event(
                    "retry", logging.WARNING, model_id=model_id, attempt=attempt,
                    delay=delay, reason=str(last_error),
                )
                self._sleep(delay)
            try:
                resp = self._http.post(ep.path, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last_error = Timeout(f"request timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last_error = ProviderError(f"transport error: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429:
                last_error = RateLimited("HTTP 429 rate limited")
                continue
            if resp.status_code in _RETRY_STATUS:
                last_error = ProviderError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = _dig(resp.json(), ep.response_text_path)
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise MalformedProviderResponse(
                    f"no text at {ep.response_text_path!r} in provider response"
                ) from exc
            if not isinstance(text, str):
                raise MalformedProviderResponse(f"text at {ep.response_text_path!r} is not a string")
            if attempt:
                log_event("retry_succeeded", model_id=model_id, retries=attempt)
            return text
        assert last_error is not None
        log_event("retries_exhausted", logging.ERROR, model_id=model_id, error=str(last_error))
        raise last_error


def live_respond(endpoint: EndpointConfig, bundle: PromptBundle, **kwargs) -> str:
    """One-shot convenience wrapper around :class:`ChatClient`."""
    with ChatClient(endpoint, **kwargs) as client:
        return client.complete(bundle)


# -- backends ----------------------------------------------------------------


class BackendKind(str, enum.Enum):
    SYNTHETIC = "synthetic"
    RATIONAL = "rational"
    LIVE = "live"


@dataclass(frozen=True)
class SyntheticBackend:
    params: ReducedFormParams
    kind: BackendKind = BackendKind.SYNTHETIC

    def respond(self, coord: TrialCoordinate, rng: np.random.Generator) -> str:
        scn = coord.scenario
        _, text = synthetic_respond(
            self.params, scn.baseline, scn.signal_mic_level, scn.signal_mac_level, rng
        )
        return text


def rational_backend(noise_sd: float = 0.0) -> SyntheticBackend:
    return SyntheticBackend(ReducedFormParams.rational(noise_sd), kind=BackendKind.RATIONAL)


@dataclass
class LiveBackend:
    endpoint: EndpointConfig
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = time.sleep
    kind: BackendKind = BackendKind.LIVE


# -- campaign ----------------------------------------------------------------


@dataclass
class CampaignSummary:
    planned: int
    completed: int = 0
    parse_failed: int = 0
    request_failed: int = 0
    flagged: int = 0
    skipped_existing: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def failures_path(output_path: str | Path) -> Path:
    output_path = Path(output_path)
    return output_path.with_name(output_path.stem + ".failures.jsonl")


def _trim_torn_tail(path: Path) -> None:
    if not path.exists():
        return
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        with open(path, "r+b") as fh:
            fh.truncate(cut)
        log_event("torn_line_trimmed", logging.WARNING, path=str(path), bytes=len(data) - cut)


def _done_keys(output_path: Path) -> set[tuple]:
    keys: set[tuple] = set()
    if output_path.exists():
        keys.update(rec.key for rec in read_records(output_path))
    fpath = failures_path(output_path)
    if fpath.exists():
        for line in fpath.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                keys.add((row["model_id"], row["persona"], row["scenario_id"], row["trial_index"]))
    return keys


def _trial_rng(plan: TrialPlan, coord: TrialCoordinate) -> np.random.Generator:
    """Independent stream per trial, keyed by its coordinates within the plan."""
    key = (
        plan.model_ids.index(coord.model_id),
        [p.kind for p in plan.personas].index(coord.persona.kind),
        [s.id for s in plan.scenarios].index(coord.scenario.id),
        coord.trial_index,
    )
    return np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=key))


class _Appender:
    """Serializes whole-line writes to the record and failure files."""

    def __init__(self, output_path: Path):
        self._records = open(output_path, "a", encoding="utf-8")
        self._failures_path = failures_path(output_path)
        self._failures = None
        self._lock = threading.Lock()

    def record(self, rec: TrialRecord) -> None:
        with self._lock:
            self._records.write(rec.to_json() + "\n")
            self._records.flush()

    def failure(self, coord: TrialCoordinate, error: Exception, raw: str) -> None:
        row = {
            "model_id": coord.model_id,
            "persona": coord.persona.kind.value,
            "scenario_id": coord.scenario.id,
            "trial_index": coord.trial_index,
            "error": type(error).__name__,
            "message": str(error),
            "raw_response": raw,
        }
        with self._lock:
            if self._failures is None:
                self._failures = open(self._failures_path, "a", encoding="utf-8")
            self._failures.write(json.dumps(row, ensure_ascii=False) + "\n")
            self._failures.flush()

    def close(self) -> None:
        self._records.close()
        if self._failures is not None:
            self._failures.close()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_campaign(
    plan: TrialPlan,
    backend,
    output_path: str | Path,
    *,
    clock: Callable[[], str] | None = None,
) -> CampaignSummary:
    """Execute every trial of ``plan`` and append records to ``output_path``.

    Trials whose coordinates already appear in the output (or in its
    ``.failures.jsonl`` sidecar) are skipped, so an interrupted run can be
    resumed by calling this again.  Responses that fail to parse are logged
    to the sidecar and counted, never re-rolled.
    """
    output_path = Path(output_path)
    if isinstance(backend, LiveBackend):
        backend.endpoint.api_key()  # fail before touching the filesystem
    output_path.parent.mkdir(parents=True, exist_ok=True)
    _trim_torn_tail(output_path)
    _trim_torn_tail(failures_path(output_path))
    done = _done_keys(output_path)
    summary = CampaignSummary(planned=plan.total_trials)
    todo = []
    for coord in plan.coordinates():
        if coord.key in done:
            summary.skipped_existing += 1
        else:
            todo.append(coord)
    if clock is None:
        clock = _utc_now if isinstance(backend, LiveBackend) else (lambda: SYNTHETIC_TIMESTAMP)

    appender = _Appender(output_path)

    def finish(coord: TrialCoordinate, raw: str) -> None:
        try:
            rec = parse_response(
                raw, coord.scenario, coord.persona, model_id=coord.model_id,
                trial_index=coord.trial_index, timestamp=clock(),
            )
        except ResponseParseError as exc:
            summary.parse_failed += 1
            log_event("parse_failed", logging.WARNING, trial=list(coord.key), error=str(exc))
            appender.failure(coord, exc, raw)
            return
        if FLAG_INCONSISTENT_MAGNITUDE in rec.flags:
            summary.flagged += 1
            log_event("validation_flag", trial=list(coord.key), flags=list(rec.flags))
        appender.record(rec)
        summary.completed += 1

    try:
        if isinstance(backend, LiveBackend):
            _run_live(plan, backend, todo, finish, summary)
        else:
            for coord in todo:
                finish(coord, backend.respond(coord, _trial_rng(plan, coord)))
    finally:
        appender.close()
    log_event("campaign_done", **summary.as_dict())
    return summary


def _run_live(plan, backend: LiveBackend, todo, finish, summary: CampaignSummary) -> None:
    ep = backend.endpoint
    with ChatClient(ep, transport=backend.transport, sleep=backend.sleep) as client:
        with ThreadPoolExecutor(max_workers=ep.max_parallel) as pool:
            futures = {
                pool.submit(
                    client.complete,
                    render_prompt(coord.persona, coord.scenario),
                    coord.model_id,
                    plan.temperature,
                ): coord
                for coord in todo
            }
            for fut in as_completed(futures):
                coord = futures[fut]
                try:
                    raw = fut.result()
                except AuthError:
                    for other in futures:
                        other.cancel()
                    raise
                except LiveAgentError as exc:
                    summary.request_failed += 1
                    log_event("request_failed", logging.ERROR, trial=list(coord.key), error=str(exc))
                    continue
                finish(coord, raw)


# -- fine-tuning data --------------------------------------------------------


class ShockSampler(str, enum.Enum):
    GRID = "grid"
    UNIFORM = "uniform"


RATIONAL_RATIONALE = (
    "The prior and both signals are combined additively with weights 0.40 (prior), "
    "0.40 (micro update) and 0.20 (macro update), which sum to one; the two updates "
    "do not interact."
)


@dataclass(frozen=True)
class FinetuneConfig:
    n: int = 1000
    sampler: ShockSampler = ShockSampler.GRID
    shock_range: tuple[float, float] = (-5.0, 5.0)
    baseline: float = DEFAULT_BASELINE
    delta: float = DEFAULT_DELTA
    personas: tuple[Persona, ...] = field(default_factory=lambda: tuple(default_personas()))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        lo, hi = self.shock_range
        if not lo < hi:
            raise ValueError(f"shock_range must satisfy low < high, got {self.shock_range}")
        if not self.personas:
            raise ValueError("at least one persona is required")


def gen_finetune_dataset(cfg: FinetuneConfig) -> list[dict]:
    """Prompt/target pairs whose targets sit exactly on the rational plane."""
    params = ReducedFormParams.rational()
    rng = np.random.default_rng(cfg.seed)
    rows = []
    if cfg.sampler is ShockSampler.GRID:
        cells = [(p, s) for p in cfg.personas for s in build_scenario_matrix(cfg.baseline, cfg.delta)]
        for i in range(cfg.n):
            persona, scn = cells[i % len(cells)]
            rows.append(_finetune_row(params, persona, cfg.baseline, scn.shock_mic, scn.shock_mac))
    else:
        lo, hi = cfg.shock_range
        for i in range(cfg.n):
            persona = cfg.personas[i % len(cfg.personas)]
            # prompts show one decimal, so the target must use the displayed shocks
            s_mic, s_mac = (round(float(v), 1) for v in rng.uniform(lo, hi, size=2))
            rows.append(_finetune_row(params, persona, cfg.baseline, s_mic, s_mac))
    return rows


def _finetune_row(params, persona, baseline, shock_mic, shock_mac) -> dict:
    bundle = render_prompt_for_shocks(persona, baseline, shock_mic, shock_mac)
    target = params.mean_response(baseline, baseline + shock_mic, baseline + shock_mac)
    return {
        "prompt_system": bundle.system,
        "prompt_user": bundle.user,
        "completion": response_json(baseline, target, RATIONAL_RATIONALE, decimals=2),
    }


def write_finetune_dataset(path: str | Path, rows: Iterable[dict], cfg: FinetuneConfig) -> Path:
    """Write the JSONL dataset and a ``.meta.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    meta = {
        "n": cfg.n,
        "sampler": cfg.sampler.value,
        "shock_range": list(cfg.shock_range) if cfg.sampler is ShockSampler.UNIFORM else None,
        "baseline": cfg.baseline,
        "delta": cfg.delta if cfg.sampler is ShockSampler.GRID else None,
        "personas": [p.kind.value for p in cfg.personas],
        "seed": cfg.seed,
        "weights": dict(zip(("beta_prior", "beta_mic", "beta_mac", "beta_int"), RATIONAL_WEIGHTS)),
    }
    meta_path = path.with_name(path.stem + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return meta_path
