"""Command-line entry point: ``vpgm <subcommand> [flags]``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 provider
error, 4 structure validation failure, 5 digest mismatch in a run
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import filelock

from . import __version__
from .data import load_questions, read_jsonl, write_json, write_jsonl
from .errors import ConfigError, DigestMismatch, ProviderError, StructureFormatError, VpgmError
from .gateway import CompletionRequest, HttpProvider, MockProvider, Provider, ProviderConfig
from .graph import PgmStructure, load_structure, save_structure, validate
from .inference import load_records, run_dataset
from .metrics import (
    latent_analysis,
    make_noisy_control,
    predictions_for,
    reliability_svg,
    reliability_table,
    write_reliability_csv,
)
from .pipeline import aggregate_records, evaluate_rows, fit_records, format_report
from .prompts import DiscoverySpec, build_discovery_prompt, build_discovery_retry_prompt, parse_structure_reply
from .runner import (
    JsonEventFormatter,
    RunConfig,
    Stage,
    file_digest,
    load_config,
    make_run_id,
    require,
    run_stage,
)

log = logging.getLogger("vpgm")

EXIT_CONFIG, EXIT_PROVIDER, EXIT_VALIDATION, EXIT_DIGEST = 2, 3, 4, 5
INFER_TEMPERATURE, DISCOVER_TEMPERATURE = 0.7, 0.0


class ValidationFailure(VpgmError):
    def __init__(self, violations):
        super().__init__("structure failed validation:\n" + "\n".join(f"  - {v}" for v in violations))
        self.violations = list(violations)


def make_provider(cfg: RunConfig, default_temperature: float) -> Provider:
    temp = default_temperature if cfg.temperature is None else cfg.temperature
    pc = ProviderConfig(
        endpoint=cfg.endpoint, model=cfg.model, temperature=temp, max_tokens=cfg.max_tokens,
        timeout=cfg.timeout, max_retries=cfg.max_retries, max_parallel=cfg.max_parallel,
        api_key_env=cfg.api_key_env,
    )
    if cfg.mock_script:
        if not Path(cfg.mock_script).exists():
            raise ConfigError(f"mock script {cfg.mock_script} does not exist")
        return MockProvider.from_file(cfg.mock_script, pc)
    return HttpProvider(pc)


def _checked_structure(path, max_latents: int = 8) -> PgmStructure:
    try:
        s = load_structure(path)
    except FileNotFoundError:
        raise ConfigError(f"structure file {path} does not exist") from None
    except StructureFormatError as exc:
        raise ValidationFailure([str(exc)]) from None
    result = validate(s, max_latents=max(max_latents, 8))
    for w in result.warnings:
        log.warning("structure: %s", w)
    if not result.ok:
        raise ValidationFailure(result.messages())
    return s


def _provider_params(cfg: RunConfig, temperature: float) -> dict:
    return {
        "endpoint": None if cfg.mock_script else cfg.endpoint,
        "model": None if cfg.mock_script else cfg.model,
        "temperature": temperature if cfg.temperature is None else cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "template_dir": cfg.template_dir,
    }


# -- stage bodies -------------------------------------------------------------

def do_infer(cfg: RunConfig, structure_path, data_path, out_path) -> None:
    structure = _checked_structure(structure_path)
    questions = load_questions(data_path)
    provider = make_provider(cfg, INFER_TEMPERATURE)
    stats = run_dataset(structure, questions, cfg.samples, provider, out_path, parallel=cfg.parallel,
                        template_dir=cfg.template_dir, seed=cfg.seed)
    log.info("infer %s: %d written, %d already present, %d failed", Path(data_path).name,
             stats["written"], stats["skipped"], len(stats["failed"]))


def do_fit(cfg: RunConfig, records_path, out_path) -> dict:
    fit = fit_records(load_records(records_path), beta=cfg.beta, lam_init=cfg.lambda_init,
                      eps=cfg.epsilon_smooth)
    write_json(out_path, fit)
    log.info("fitted lambda=%.6g (converged=%s)", fit["lambda"], fit["converged"])
    return fit


def do_aggregate(records_path, fit_path, out_path) -> None:
    with open(fit_path, encoding="utf-8") as fh:
        lam = float(json.load(fh)["lambda"])
    write_jsonl(out_path, aggregate_records(load_records(records_path), lam))


def do_evaluate(cfg: RunConfig, records_path, out_path, csv_path=None, svg_path=None) -> dict:
    rows = list(read_jsonl(records_path))
    report = evaluate_rows(rows, cfg.bins)
    if not report["methods"]:
        raise ConfigError(f"{records_path} has no rows with gold labels to evaluate")
    write_json(out_path, report)
    method = cfg.method if cfg.method in report["methods"] else next(iter(report["methods"]))
    table = reliability_table(predictions_for(rows, method), cfg.bins)
    if csv_path:
        write_reliability_csv(table, csv_path)
    if svg_path:
        Path(svg_path).write_text(reliability_svg(table, f"Reliability: {method}"), encoding="utf-8")
    return report


# -- subcommands ----------------------------------------------------------------

def cmd_discover(cfg: RunConfig) -> int:
    require(cfg, "spec", "structure")
    try:
        with open(cfg.spec, encoding="utf-8") as fh:
            spec = DiscoverySpec.from_dict(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"discovery spec {cfg.spec} does not exist") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"discovery spec {cfg.spec}: {exc}") from None
    provider = make_provider(cfg, DISCOVER_TEMPERATURE)
    prompt = build_discovery_prompt(spec, cfg.template_dir)
    violations: list[str] = []
    for attempt in range(2):
        reply = provider.complete(CompletionRequest(prompt, question_id="discover", sample_index=attempt)).text
        try:
            structure = parse_structure_reply(reply)
        except StructureFormatError as exc:
            violations = [str(exc)]
        else:
            result = validate(structure, max_latents=spec.max_latents)
            violations = result.messages()
            edges = set(structure.edges)
            violations += [f"required dependency {e} is missing" for e in spec.fixed_edges if e not in edges]
            if not violations:
                for w in result.warnings:
                    log.warning("structure: %s", w)
                save_structure(structure, cfg.structure)
                log.info("wrote %s: %d latent variables, %d edges", cfg.structure,
                         len(structure.latent_ids), len(structure.edges))
                return 0
        log.warning("discovery attempt %d rejected: %s", attempt + 1, "; ".join(violations))
        prompt = build_discovery_retry_prompt(spec, reply, violations, cfg.template_dir)
    raise ValidationFailure(violations)


def cmd_infer(cfg: RunConfig) -> int:
    require(cfg, "structure", "data", "out")
    stage = Stage("infer", [cfg.structure, cfg.data, cfg.mock_script], [cfg.out],
                  {"samples": cfg.samples, "seed": cfg.seed, **_provider_params(cfg, INFER_TEMPERATURE)})
    run_stage(stage, lambda: do_infer(cfg, cfg.structure, cfg.data, cfg.out), make_run_id(cfg),
              force=cfg.force, resumable=True)
    return 0


def cmd_fit_lambda(cfg: RunConfig) -> int:
    require(cfg, "records", "out")
    stage = Stage("fit-lambda", [cfg.records], [cfg.out],
                  {"beta": cfg.beta, "lambda_init": cfg.lambda_init, "eps": cfg.epsilon_smooth})
    run_stage(stage, lambda: do_fit(cfg, cfg.records, cfg.out), make_run_id(cfg), force=cfg.force)
    return 0


def cmd_aggregate(cfg: RunConfig) -> int:
    require(cfg, "records", "fit", "out")
    stage = Stage("aggregate", [cfg.records, cfg.fit], [cfg.out], {})
    run_stage(stage, lambda: do_aggregate(cfg.records, cfg.fit, cfg.out), make_run_id(cfg), force=cfg.force)
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    require(cfg, "records", "out")
    stage = Stage("evaluate", [cfg.records], [cfg.out, cfg.reliability, cfg.svg],
                  {"bins": cfg.bins, "method": cfg.method})
    run_stage(stage, lambda: do_evaluate(cfg, cfg.records, cfg.out, cfg.reliability, cfg.svg),
              make_run_id(cfg), force=cfg.force)
    with open(cfg.out, encoding="utf-8") as fh:
        print(format_report(json.load(fh)))
    return 0


def cmd_control(cfg: RunConfig) -> int:
    require(cfg, "data", "out", "seed")
    rows = list(read_jsonl(cfg.data))
    write_jsonl(cfg.out, make_noisy_control(rows, cfg.seed))
    log.info("wrote %d records with shuffled rationales to %s", len(rows), cfg.out)
    return 0


def cmd_analyze_latents(cfg: RunConfig) -> int:
    require(cfg, "clean", "noisy", "var")
    result = latent_analysis(load_records(cfg.clean), load_records(cfg.noisy), cfg.var, cfg.threshold,
                             cfg.target).to_dict()
    text = json.dumps(result, indent=2, sort_keys=True)
    if cfg.out:
        write_json(cfg.out, result)
    print(text)
    return 0


def cmd_report(cfg: RunConfig) -> int:
    path = cfg.report or cfg.records or (str(Path(cfg.run_dir) / "report.json") if cfg.run_dir else None)
    if not path:
        raise ConfigError("missing required setting: --report or --run-dir")
    if not Path(path).exists():
        raise ConfigError(f"report {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        print(format_report(json.load(fh)))
    return 0


PIPELINE_FILES = {
    "records_dev": "records_dev.jsonl",
    "records_test": "records_test.jsonl",
    "fit": "fit.json",
    "posteriors": "posteriors.jsonl",
    "report": "report.json",
    "reliability": "report.csv",
    "svg": "report.svg",
    "manifest": "manifest.json",
}


def run_pipeline(cfg: RunConfig) -> list[str]:
    """infer (dev, test) -> fit-lambda (dev) -> aggregate (test) -> evaluate.

    Returns the names of the stages that actually ran.
    """
    require(cfg, "structure", "dev_data", "test_data", "run_dir")
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    f = {k: run_dir / v for k, v in PIPELINE_FILES.items()}
    run_id = make_run_id(cfg)

    events = logging.FileHandler(run_dir / "events.jsonl", encoding="utf-8")
    events.setFormatter(JsonEventFormatter())
    events.setLevel(logging.INFO)
    log.addHandler(events)
    lock = filelock.FileLock(str(run_dir / ".lock"), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout:
        log.removeHandler(events)
        events.close()
        raise ConfigError(f"run directory {run_dir} is locked by another process") from None
    try:
        effective = cfg.public()
        write_json(run_dir / "config.json", effective)
        infer_params = {"samples": cfg.samples, "seed": cfg.seed, **_provider_params(cfg, INFER_TEMPERATURE)}
        stages = [
            (Stage("infer-dev", [cfg.structure, cfg.dev_data, cfg.mock_script], [f["records_dev"]], infer_params),
             lambda: do_infer(cfg, cfg.structure, cfg.dev_data, f["records_dev"]), True),
            (Stage("infer-test", [cfg.structure, cfg.test_data, cfg.mock_script], [f["records_test"]], infer_params),
             lambda: do_infer(cfg, cfg.structure, cfg.test_data, f["records_test"]), True),
            (Stage("fit-lambda", [f["records_dev"]], [f["fit"]],
                   {"beta": cfg.beta, "lambda_init": cfg.lambda_init, "eps": cfg.epsilon_smooth}),
             lambda: do_fit(cfg, f["records_dev"], f["fit"]), False),
            (Stage("aggregate", [f["records_test"], f["fit"]], [f["posteriors"]], {}),
             lambda: do_aggregate(f["records_test"], f["fit"], f["posteriors"]), False),
            (Stage("evaluate", [f["posteriors"]], [f["report"], f["reliability"], f["svg"]],
                   {"bins": cfg.bins, "method": cfg.method}),
             lambda: do_evaluate(cfg, f["posteriors"], f["report"], f["reliability"], f["svg"]), False),
        ]
        ran = []
        for stage, action, resumable in stages:
            if not cfg.force and stage.up_to_date():
                log.info("skip %s (up to date)", stage.name, extra={"event": "skip", "stage": stage.name})
                continue
            if f["manifest"].exists():
                f["manifest"].unlink()
            run_stage(stage, action, run_id, force=cfg.force, resumable=resumable)
            ran.append(stage.name)
        if ran or not f["manifest"].exists():
            write_json(f["manifest"], {
                "run_id": run_id,
                "stage": "pipeline",
                "tool_version": __version__,
                "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "stages": [s.name for s, _, _ in stages],
                "outputs": {p.name: file_digest(p) for k, p in f.items() if k != "manifest"},
            })
        return ran
    finally:
        lock.release()
        log.removeHandler(events)
        events.close()


def cmd_pipeline(cfg: RunConfig) -> int:
    ran = run_pipeline(cfg)
    print(f"stages run: {', '.join(ran) if ran else 'none (all up to date)'}")
    with open(Path(cfg.run_dir) / "report.json", encoding="utf-8") as fh:
        print(format_report(json.load(fh)))
    return 0


# -- argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="TOML config file (default: $VPGM_CONFIG)")
    g.add_argument("-v", "--verbose", action="count", default=0)
    g.add_argument("-q", "--quiet", action="store_true")
    g.add_argument("--force", action="store_true", default=None, help="rerun even if outputs are up to date")


def _provider(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("provider")
    g.add_argument("--endpoint", help="base URL; requests go to {endpoint}/chat/completions")
    g.add_argument("--model")
    g.add_argument("--temperature", type=float)
    g.add_argument("--max-tokens", type=int)
    g.add_argument("--timeout", type=float)
    g.add_argument("--max-retries", type=int)
    g.add_argument("--max-parallel", type=int)
    g.add_argument("--api-key-env", help="environment variable holding the API key (default LLM_API_KEY)")
    g.add_argument("--mock-script", help="JSON map of '<question_id>/<sample_index>' to canned replies")
    g.add_argument("--template-dir", help="directory of prompt templates (default: $VPGM_TEMPLATE_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpgm", description="Verbalized PGM inference with Dirichlet posterior calibration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("discover", help="ask the model for a latent-variable structure")
    _common(p), _provider(p)
    p.add_argument("--spec", help="discovery spec JSON (task_description, example_pairs, context, constraints)")
    p.add_argument("--structure", help="output path for the PGM JSON")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("infer", help="sample M replies per question and aggregate them")
    _common(p), _provider(p)
    p.add_argument("--structure")
    p.add_argument("--data", help="questions JSONL")
    p.add_argument("--out", help="records JSONL (appended, resumable)")
    p.add_argument("-M", "--samples", type=int, help="samples per question (default 3)")
    p.add_argument("--parallel", type=int, help="questions processed concurrently")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fit-lambda", help="fit the Dirichlet concentration on dev records")
    _common(p)
    p.add_argument("--records")
    p.add_argument("--out", help="fit artifact JSON")
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda-init", type=float)
    p.add_argument("--epsilon-smooth", type=float)
    p.set_defaults(func=cmd_fit_lambda)

    p = sub.add_parser("aggregate", help="apply a fitted concentration to records")
    _common(p)
    p.add_argument("--records")
    p.add_argument("--fit")
    p.add_argument("--out", help="posteriors JSONL")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="accuracy, ECE and reliability diagram")
    _common(p)
    p.add_argument("--records", help="posteriors or records JSONL")
    p.add_argument("--out", help="report JSON")
    p.add_argument("--reliability", help="reliability table CSV")
    p.add_argument("--svg", help="reliability diagram SVG")
    p.add_argument("--bins", type=int)
    p.add_argument("--method", choices=["vpgm", "bayes_vpgm", "consistency"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("control", help="build the rationale-shuffled negative control")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("analyze-latents", help="latent-variable statistics on clean vs noisy records")
    _common(p)
    p.add_argument("--clean")
    p.add_argument("--noisy")
    p.add_argument("--var", help="mismatch indicator variable (default Z2)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--target", choices=["correct", "final_prob"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_latents)

    p = sub.add_parser("pipeline", help="infer -> fit-lambda -> aggregate -> evaluate in one run directory")
    _common(p), _provider(p)
    p.add_argument("--structure")
    p.add_argument("--dev", dest="dev_data", help="dev questions JSONL (used to fit lambda)")
    p.add_argument("--test", dest="test_data", help="test questions JSONL")
    p.add_argument("--run-dir")
    p.add_argument("-M", "--samples", type=int)
    p.add_argument("--parallel", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda-init", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--method", choices=["vpgm", "bayes_vpgm", "consistency"])
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="print a report summary")
    _common(p)
    p.add_argument("--report", help="report JSON")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.WARNING if quiet else (logging.DEBUG if verbose else logging.INFO)
    root = logging.getLogger("vpgm")
    root.setLevel(logging.DEBUG)
    for h in list(root.handlers):
        if getattr(h, "_vpgm_stderr", False):
            root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    h.setLevel(level)
    h._vpgm_stderr = True
    root.addHandler(h)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose", "quiet")}
    try:
        cfg = load_config(flags)
        return args.func(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ValidationFailure as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except ProviderError as exc:
        log.error("provider error: %s", exc)
        return EXIT_PROVIDER
    except DigestMismatch as exc:
        log.error("%s", exc)
        return EXIT_DIGEST
    except (VpgmError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
