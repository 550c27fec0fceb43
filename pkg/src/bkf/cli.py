"""Command-line entry point: ``bkf <subcommand> [--config FILE] [--out DIR] ...``.

Stages communicate through files in ``--out``; every run records what it read
and wrote in ``manifest.json`` there.

Exit codes: 0 ok, 1 validation error, 2 I/O error, 3 estimation failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

from . import agents, design, estimation, reporting
from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_ESTIMATION, EXIT_VERIFY = 0, 1, 2, 3, 4

TRIALS_FILE = "trials.jsonl"
MANIFEST_FILE = "manifest.json"

log = logging.getLogger("bkf.cli")


class StageInputMissing(OSError):
    pass


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "matplotlib", "httpx", "PyYAML"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def _dump_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_manifest(
    out: Path, stage: str, cfg: RunConfig, inputs: list[Path], outputs: list[Path], extra=None
) -> Path:
    """Merge this stage's entry into the single manifest of ``out``."""
    path = out / MANIFEST_FILE
    doc = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    doc.setdefault("stages", {})
    doc["versions"] = _versions()

    def rel(p: Path) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(out.resolve()).as_posix()
        except ValueError:
            return str(p)

    doc["stages"][stage] = {
        "seed": cfg.seed,
        "config_source": cfg.source,
        "config": cfg.echo(),
        "inputs": {rel(p): sha256(p) for p in inputs},
        "outputs": {rel(p): sha256(p) for p in sorted(outputs)},
        **(extra or {}),
    }
    return _dump_json(path, doc)


def _config_inputs(args) -> list[Path]:
    return [Path(args.config)] if args.config else []


def _require(path: Path) -> Path:
    if not path.exists():
        raise StageInputMissing(f"expected stage input {path} (run the earlier stage first)")
    return path


# -- subcommands ---------------------------------------------------------------


def cmd_design(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    scenarios = design.build_scenario_matrix(cfg.baseline, cfg.delta)
    outputs = [_dump_json(out / "scenarios.json", [
        {
            "id": s.id,
            "shock_mic": s.shock_mic,
            "shock_mac": s.shock_mac,
            "baseline": s.baseline,
            "delta": s.delta,
            "signal_mic_level": s.signal_mic_level,
            "signal_mac_level": s.signal_mac_level,
        }
        for s in scenarios
    ])]
    print(f"{'id':<4}{'shock_mic':>10}{'shock_mac':>10}{'mic_level':>10}{'mac_level':>10}")
    for s in scenarios:
        print(f"{s.id:<4}{s.shock_mic:>+10.1f}{s.shock_mac:>+10.1f}"
              f"{s.signal_mic_level:>10.1f}{s.signal_mac_level:>10.1f}")
    for persona in cfg.personas:
        for s in scenarios:
            bundle = design.render_prompt(persona, s)
            text = f"[system]\n{bundle.system}\n\n[user]\n{bundle.user}\n"
            outputs.append(_write_text(out / "prompts" / f"{persona.kind.value}_{s.id}.txt", text))
            if args.verbose:
                print(f"\n=== {persona.kind.label} {s.id} ===\n{text}")
    print(f"\nwrote {len(scenarios)} scenarios and {len(outputs) - 1} prompt previews to {out}")
    write_manifest(out, "design", cfg, _config_inputs(args), outputs)
    return EXIT_OK


def _campaign(args, cfg: RunConfig, backend, stage: str) -> int:
    out = Path(args.out)
    trials = out / TRIALS_FILE
    plan = cfg.plan()
    summary = agents.run_campaign(plan, backend, trials)
    outputs = [trials, _dump_json(out / f"{stage}_summary.json", summary.as_dict())]
    failures = agents.failures_path(trials)
    if failures.exists():
        outputs.append(failures)
    print(json.dumps(summary.as_dict(), sort_keys=True))
    write_manifest(out, stage, cfg, _config_inputs(args), outputs)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    backend = agents.SyntheticBackend(
        cfg.agent_params,
        kind=agents.BackendKind.RATIONAL if cfg.agent_kind == "rational" else agents.BackendKind.SYNTHETIC,
    )
    return _campaign(args, cfg, backend, "simulate")


def cmd_run_llm(args, cfg: RunConfig) -> int:
    if cfg.endpoint is None:
        raise ConfigError("run-llm needs an 'endpoint' section with base_url", source=cfg.source)
    cfg.endpoint.api_key()  # AuthError before anything is written
    return _campaign(args, cfg, agents.LiveBackend(cfg.endpoint), "run-llm")


def _selection_tag(persona, model, scenarios) -> str:
    p = "all" if persona is None else design.PersonaKind.parse(persona).value
    m = "all" if model is None else "".join(c if c.isalnum() or c in "-." else "_" for c in model)
    tag = f"{p}_{m}"
    if scenarios:
        tag += "_" + "".join(scenarios)
    return tag


def _estimate_one(out: Path, cfg: RunConfig, records, persona, model, scenarios) -> tuple[Path, list[Path], estimation.RationalityVerdict]:
    dm = estimation.build_design(records, persona=persona, model=model, scenarios=scenarios)
    fit = estimation.gibbs_fit(dm, cfg.prior, cfg.mcmc, standardize=cfg.standardize, mass=cfg.hdi_mass)
    verdict = estimation.rationality_test(fit, mass=cfg.hdi_mass)
    tag = _selection_tag(persona, model, scenarios)
    outputs = [_dump_json(out / f"posterior_{tag}.json", fit.to_json(verdict))]
    if cfg.dump_draws:
        outputs.append(_write_text(out / f"draws_{tag}.csv", fit.draws_csv()))
    if not fit.converged:
        log.warning(json.dumps({"event": "convergence_warning", "selection": tag,
                                "max_r_hat": fit.max_r_hat}))
    print(f"[{tag}] n={dm.n} max_r_hat={fit.max_r_hat:.4f}"
          f"{'' if fit.converged else ' (WARNING: not converged)'}")
    for c in fit.coefficients:
        print(f"  {c.name:<11}{reporting.fmt(c.mean, 3):>9}  "
              f"[{reporting.fmt(c.hdi_low, 3)}, {reporting.fmt(c.hdi_high, 3)}]")
    print("  " + reporting.verdict_line(tag, verdict))
    return outputs[0], outputs, verdict


def cmd_estimate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    trials = _require(out / TRIALS_FILE)
    records = design.read_records(trials)
    scenarios = args.filter_scenario.split(",") if args.filter_scenario else None
    _, outputs, _ = _estimate_one(out, cfg, records, args.persona, args.model, scenarios)
    write_manifest(out, f"estimate:{_selection_tag(args.persona, args.model, scenarios)}",
                   cfg, _config_inputs(args) + [trials], outputs)
    return EXIT_OK


def _load_posteriors(out: Path) -> tuple[dict, dict, list[Path]]:
    summaries, verdicts, paths = {}, {}, []
    for path in sorted(out.glob("posterior_*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        sel = doc.get("config_echo", {}).get("selection", {})
        persona = sel.get("persona") or "pooled"
        model = sel.get("model") or "all"
        if sel.get("scenarios"):
            continue  # scenario subsets do not fit the table layouts
        summaries[(persona, model)] = estimation.PosteriorSummary.from_json(doc)
        if doc.get("verdict"):
            verdicts[f"{reporting.PERSONA_LABEL.get(persona, persona)} {model}"] = (
                estimation.RationalityVerdict.from_dict(doc["verdict"])
            )
        paths.append(path)
    return summaries, verdicts, paths


def build_report(out: Path) -> tuple[list[Path], list[Path], dict]:
    from . import plotting

    trials = out / TRIALS_FILE
    summaries, verdicts, posterior_paths = _load_posteriors(out)
    if not trials.exists() and not summaries:
        raise StageInputMissing(
            f"expected {trials} or posterior_*.json in {out} (run simulate/estimate first)"
        )
    inputs, outputs = [], []
    if trials.exists():
        inputs.append(trials)
        stats = reporting.descriptive_stats(design.read_records(trials))
        for layout in (reporting.Layout.TABLE_II, reporting.Layout.TABLE_IV):
            table = reporting.render_table(stats, layout)
            outputs.append(_write_text(out / f"{layout.value}.txt", table.text))
            outputs.append(_write_text(out / f"{layout.value}.csv", table.csv))
        outputs.append(_write_text(out / "plot_scenario_means.csv", reporting.scenario_means_csv(stats)))
        outputs.append(plotting.plot_scenario_means(stats, out / "figures" / "scenario_means.png"))
    if summaries:
        inputs.extend(posterior_paths)
        for layout in (reporting.Layout.TABLE_III, reporting.Layout.TABLE_V):
            table = reporting.render_table(summaries, layout)
            outputs.append(_write_text(out / f"{layout.value}.txt", table.text))
            outputs.append(_write_text(out / f"{layout.value}.csv", table.csv))
        outputs.append(_write_text(out / "plot_forest.csv", reporting.forest_csv(summaries)))
        outputs.append(plotting.plot_forest(summaries, out / "figures" / "forest.png"))
    verdict_doc = {}
    if verdicts:
        text, verdict_doc = reporting.verdict_report(verdicts)
        outputs.append(_write_text(out / "verdicts.txt", text))
        outputs.append(_dump_json(out / "verdicts.json", verdict_doc))
    return inputs, outputs, verdict_doc


def cmd_report(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    inputs, outputs, _ = build_report(out)
    for path in outputs:
        if path.suffix == ".txt":
            print(path.read_text(encoding="utf-8"))
    write_manifest(out, "report", cfg, _config_inputs(args) + inputs, outputs)
    return EXIT_OK


def cmd_gen_finetune(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    ft = cfg.finetune(n=args.n)
    rows = agents.gen_finetune_dataset(ft)
    path = out / "finetune.jsonl"
    meta = agents.write_finetune_dataset(path, rows, ft)
    print(f"wrote {len(rows)} examples ({ft.sampler.value} sampler) to {path}")
    write_manifest(out, "gen-finetune", cfg, _config_inputs(args), [path, meta])
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    """Rational generator -> estimator -> verdict; exit 0 only if every verdict passes."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trials = out / TRIALS_FILE
    # verify always starts from a clean slate of its own artifacts
    for stale in [trials, agents.failures_path(trials), *out.glob("posterior_*.json"),
                  *out.glob("draws_*.csv"), out / MANIFEST_FILE]:
        if stale.exists():
            stale.unlink()
    plan = cfg.plan()
    summary = agents.run_campaign(plan, agents.rational_backend(cfg.verify_noise_sd), trials)
    outputs = [trials]
    records = design.read_records(trials)
    selections = [(None, None)] + [(p.kind.value, None) for p in plan.personas]
    verdicts = {}
    for persona, model in selections:
        _, paths, verdict = _estimate_one(out, cfg, records, persona, model, None)
        outputs.extend(paths)
        verdicts[_selection_tag(persona, model, None)] = verdict
    _, report_outputs, _ = build_report(out)
    outputs.extend(report_outputs)
    passed = all(v.rational for v in verdicts.values()) and summary.parse_failed == 0
    print("VERIFY " + ("PASSED" if passed else "FAILED"))
    write_manifest(out, "verify", cfg, _config_inputs(args), outputs,
                   extra={"campaign": summary.as_dict(), "passed": passed})
    return EXIT_OK if passed else EXIT_VERIFY


COMMANDS = {
    "design": cmd_design,
    "simulate": cmd_simulate,
    "run-llm": cmd_run_llm,
    "estimate": cmd_estimate,
    "report": cmd_report,
    "gen-finetune": cmd_gen_finetune,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true", help="structured INFO logging")

    parser = argparse.ArgumentParser(prog="bkf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("design", parents=[common], help="scenario matrix and prompt previews")
    sub.add_parser("simulate", parents=[common], help="run the plan against a synthetic agent")
    sub.add_parser("run-llm", parents=[common], help="run the plan against a chat endpoint")
    est = sub.add_parser("estimate", parents=[common], help="Gibbs fit of the reduced form")
    est.add_argument("--persona", help="household/hh or ceo")
    est.add_argument("--model", help="model id to select")
    est.add_argument("--filter-scenario", help="comma-separated scenario ids, e.g. S1,S2")
    sub.add_parser("report", parents=[common], help="tables, verdicts, plot CSVs and figures")
    ft = sub.add_parser("gen-finetune", parents=[common], help="rational-benchmark training data")
    ft.add_argument("--n", type=int, help="number of examples (default from config: 1000)")
    sub.add_parser("verify", parents=[common], help="end-to-end rational pipeline check")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for attr in ("persona", "model", "filter_scenario", "n"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("bkf")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if args.verbose else logging.WARNING)
    root.propagate = False
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg = cfg.with_seed(args.seed)
        if args.n is not None and args.n < 1:
            raise ConfigError("--n must be >= 1")
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, design.DesignError, agents.AuthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except estimation.EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except agents.LiveAgentError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
