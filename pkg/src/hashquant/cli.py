"""Command-line pipeline: oracle training, policy search, baselines,
standalone simulation, and plot-ready data export.

Exit codes: 0 success, 2 usage or configuration error, 3 malformed input
file, 4 runtime failure.
"""

from __future__ import annotations

import functools
import json
import os
import sys

import click

from . import oracle as ngp
from . import search as searchmod
from . import sim as hwsim
from .agent import DdpgAgent
from .config import ConfigError, load_config
from .images import read_ppm
from .policy import parse_policy, read_policy_json, write_policy_json
from .trace import AccessTrace, TraceFormatError

EXIT_CONFIG = 2
EXIT_MALFORMED = 3
EXIT_RUNTIME = 4


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_lines(path, lines) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def pipeline_command(f):
    """Map pipeline exceptions onto the documented exit codes."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (TraceFormatError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_MALFORMED)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_MALFORMED)
        except (ngp.TrainingError, hwsim.SimulationError, RuntimeError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


def config_options(f):
    f = click.option("--config", "config_path", required=True, type=click.Path(), help="Run configuration (TOML).")(f)
    f = click.option("--out", "out_dir", default=None, type=click.Path(), help="Override the output directory.")(f)
    f = click.option("--seed", "seed", default=None, type=int, help="Override the configured seeds.")(f)
    return f


@click.group()
def main():
    """Hardware-aware mixed-precision bit-width search for hash-encoding
    field models."""


@main.command("train-oracle")
@config_options
@pipeline_command
def cmd_train_oracle(config_path, out_dir, seed):
    """Train the quality oracle and write its checkpoint."""
    cfg = load_config(config_path, out_dir, seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    image = read_ppm(cfg.image_path)
    log_rows = ["step,loss,psnr"]
    model = ngp.train(image, cfg.ngp, cfg.train_steps, cfg.oracle_seed,
                      callback=lambda s, l, p: log_rows.append(f"{s},{l!r},{p!r}"))
    ngp.save_checkpoint(cfg.checkpoint_path, model)
    _write_lines(os.path.join(cfg.out_dir, "train_log.csv"), log_rows)
    final = ngp.psnr(ngp.render(model, None, image.width, image.height), image)
    click.echo(f"checkpoint: {cfg.checkpoint_path}")
    click.echo(f"train psnr: {final:.2f} dB over {cfg.train_steps} steps")


def _load_env(cfg):
    if not os.path.exists(cfg.checkpoint_path):
        raise ConfigError(f"checkpoint does not exist: {cfg.checkpoint_path} (run train-oracle first)")
    model = ngp.load_checkpoint(cfg.checkpoint_path)
    image = read_ppm(cfg.image_path)
    return searchmod.OracleEnv(model, image, cfg.hw, finetune_seed=cfg.search.seed)


@main.command("search")
@config_options
@pipeline_command
def cmd_search(config_path, out_dir, seed):
    """Run the episodic bit-width search and write the report."""
    cfg = load_config(config_path, out_dir, seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    env = _load_env(cfg)
    env.trace.write(os.path.join(cfg.out_dir, "trace.htrc"))
    agent = DdpgAgent(cfg.agent)
    report = searchmod.run_search(env, agent, cfg.search)
    best_policy = parse_policy(report.best["policy"])
    doc = report.to_dict()
    doc["best"]["quant_params"] = ngp.describe_quantizers(env.model, best_policy)
    _write_json(os.path.join(cfg.out_dir, "report.json"), doc)
    _write_lines(os.path.join(cfg.out_dir, "episodes.csv"), searchmod.episodes_csv_lines(report))
    write_policy_json(os.path.join(cfg.out_dir, "best_policy.json"), best_policy)
    click.echo(f"report: {os.path.join(cfg.out_dir, 'report.json')}")
    click.echo(f"best policy: {report.best['policy']} (reward {report.best['reward']:.4f})")
    if report.budget["budget_unreachable"]:
        click.echo("budget_unreachable: true")


@main.command("baseline")
@config_options
@click.option("--kind", type=click.Choice(["ptq", "qat"]), required=True)
@click.option("--bits", type=int, required=True)
@pipeline_command
def cmd_baseline(config_path, out_dir, seed, kind, bits):
    """Evaluate a uniform-precision baseline (PTQ skips fine-tuning)."""
    cfg = load_config(config_path, out_dir, seed)
    if not 1 <= bits <= 8:
        raise ConfigError(f"bits must be in [1, 8], got {bits}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    env = _load_env(cfg)
    env.baseline(cfg.search.finetune_steps)
    if kind == "ptq":
        result = searchmod.run_ptq_baseline(env, bits, cfg.search.reward_scale)
    else:
        result = searchmod.run_qat_baseline(env, bits, cfg.search.finetune_steps, cfg.search.reward_scale)
    doc = {"kind": kind, "bits": bits, **result.to_dict(),
           "quant_params": ngp.describe_quantizers(env.model, env.uniform_policy(bits))}
    click.echo(json.dumps(doc, indent=2))
    _write_json(os.path.join(cfg.out_dir, f"baseline_{kind}{bits}.json"), doc)


@main.command("simulate")
@click.argument("trace_path", type=click.Path())
@click.argument("policy_path", type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(), help="Source of the [hardware] section.")
@click.option("--out", "out_dir", default=".", type=click.Path())
@click.option("--breakdown", is_flag=True, help="Print per-stage cycles.")
@pipeline_command
def cmd_simulate(trace_path, policy_path, config_path, out_dir, breakdown):
    """Run the accelerator model on a trace file under a policy file."""
    hw = load_config(config_path).hw if config_path else hwsim.HwConfig()
    if not os.path.exists(trace_path):
        raise ConfigError(f"trace file does not exist: {trace_path}")
    if not os.path.exists(policy_path):
        raise ConfigError(f"policy file does not exist: {policy_path}")
    trace = AccessTrace.read(trace_path)
    policy = read_policy_json(policy_path)
    report = hwsim.simulate(trace, policy, hw)
    doc = report.to_dict()
    click.echo(json.dumps(doc, indent=2))
    if breakdown:
        click.echo(f"encoding: {report.encoding_cycles} cycles")
        click.echo(f"mlp: {report.mlp_cycles} cycles")
        click.echo(f"subgrid prefetch: {report.subgrid_prefetch_cycles} cycles")
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "sim_report.json"), doc)


@main.command("plotdata")
@click.argument("report_path", type=click.Path())
@click.option("--out", "out_dir", default=None, type=click.Path())
@pipeline_command
def cmd_plotdata(report_path, out_dir):
    """Export latency-vs-PSNR and reward-curve CSV series from a report."""
    if not os.path.exists(report_path):
        raise ConfigError(f"report does not exist: {report_path}")
    with open(report_path) as fh:
        doc = json.load(fh)
    try:
        baseline = doc["baseline"]
        episodes = doc["episodes"]
        best = doc["best"]
    except (KeyError, TypeError) as exc:
        raise TraceFormatError(f"malformed report: missing {exc}") from exc
    out_dir = out_dir or (os.path.dirname(os.path.abspath(report_path)) or ".")
    os.makedirs(out_dir, exist_ok=True)

    pareto = ["policy,psnr,latency,cost_efficiency"]
    rows = [(baseline["policy"], baseline["psnr_cur"], baseline["latency_cycles"], baseline["cost_efficiency"])]
    rows.extend((e["policy"], e["psnr_cur"], e["latency_cycles"], e["cost_efficiency"]) for e in episodes)
    if episodes:
        rows.append((best["policy"], best["psnr_cur"], best["latency_cycles"], best["cost_efficiency"]))
    pareto.extend(f"{p},{q!r},{l},{c!r}" for p, q, l, c in rows)
    _write_lines(os.path.join(out_dir, "pareto.csv"), pareto)

    curve = ["episode,reward,best_reward_so_far"]
    best_so_far = None
    for e in episodes:
        best_so_far = e["reward"] if best_so_far is None else max(best_so_far, e["reward"])
        curve.append(f"{e['episode']},{e['reward']!r},{best_so_far!r}")
    _write_lines(os.path.join(out_dir, "reward_curve.csv"), curve)
    click.echo(f"wrote {os.path.join(out_dir, 'pareto.csv')} and {os.path.join(out_dir, 'reward_curve.csv')}")


if __name__ == "__main__":
    main()
