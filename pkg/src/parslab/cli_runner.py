"""Command-line entry point.

    parslab <subcommand> [--config PATH] [--out DIR] [--seed N] [--quiet]
    parslab rerun --manifest DIR/manifest.json [--out DIR] [--quiet]

Every run writes its artifacts plus ``manifest.json`` into ``--out``. The
manifest stores the fully resolved config, so ``rerun`` reproduces the run
byte for byte.

Exit codes: 0 success, 1 unexpected internal error, 2 usage error,
3 config error, 4 dataset error, 5 training diverged, 6 environment error,
7 unsupported dimension, 8 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, didactic_lab, diagnostics, reports, tabular_oracle
from .config import ABLATION_VARIANTS, ConfigError, RunConfig, parse_config, parse_config_text, serialize_config, with_seed
from .data_store import (
    DatasetParseError,
    DatasetSchemaError,
    EmptySourceError,
    dataset_stats,
    load_dataset,
    save_dataset,
    write_stats_csv,
)
from .nn_core import MlpSpec, ShapeError
from .pars_trainer import DivergenceError, ParsConfig, finetune_online, load_agent, save_agent, train_offline
from .toy_envs import InfeasibleActionError, default_behavior, generate_offline_dataset, make_env_spec

SUBCOMMANDS = ("gen-data", "train-offline", "finetune", "diagnose", "didactic", "tabular-check", "ablate")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5
EXIT_ENV = 6
EXIT_DIMENSION = 7
EXIT_IO = 8

_ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (DatasetParseError, EXIT_DATA),
    (DatasetSchemaError, EXIT_DATA),
    (EmptySourceError, EXIT_DATA),
    (diagnostics.DatasetContinuityError, EXIT_DATA),
    (DivergenceError, EXIT_DIVERGED),
    (InfeasibleActionError, EXIT_ENV),
    (diagnostics.UnsupportedDimensionError, EXIT_DIMENSION),
    (ShapeError, EXIT_DATA),
    (OSError, EXIT_IO),
)


def exit_code_for(exc: BaseException) -> int:
    for cls, code in _ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_INTERNAL


class _Run:
    """Output directory, artifact bookkeeping and progress messages for one run."""

    def __init__(self, out: Path, quiet: bool):
        self.out = out
        self.quiet = quiet
        self.artifacts: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.artifacts:
            self.artifacts.append(name)
        return p

    def say(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# Shared pipeline pieces


def _env(cfg: RunConfig):
    return make_env_spec(cfg.env.env_id, **cfg.env.overrides())


def _dataset(cfg: RunConfig, run: _Run):
    if cfg.run.dataset:
        run.say(f"loading dataset {cfg.run.dataset}")
        return load_dataset(cfg.run.dataset)
    env = _env(cfg)
    beh = default_behavior(env, **cfg.behavior.overrides())
    run.say(f"generating {beh.episodes} episodes on {env.env_id}")
    ds = generate_offline_dataset(env, beh, cfg.run.seed)
    if len(ds) == 0:
        raise EmptySourceError("behavior produced no transitions")
    return ds


def _offline(cfg: RunConfig, ds, run: _Run, prefix: str = ""):
    env = _env(cfg)
    run.say(f"offline training for {cfg.pars.max_gradient_steps} gradient steps")
    actor, critics, log = train_offline(cfg.pars, ds, cfg.run.seed, env)
    log.write_csv(run.path(f"{prefix}offline_log.csv"))
    save_agent(run.path(f"{prefix}checkpoint_offline.txt"), actor, critics)
    return actor, critics, log


def _agent(cfg: RunConfig, ds, run: _Run):
    if cfg.run.checkpoint:
        run.say(f"loading checkpoint {cfg.run.checkpoint}")
        return load_agent(cfg.run.checkpoint, ds.feasible_low, ds.feasible_high)
    actor, critics, _ = _offline(cfg, ds, run)
    return actor, critics


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(cfg: RunConfig, run: _Run) -> None:
    ds = _dataset(cfg, run)
    save_dataset(ds, run.path("dataset.txt"))
    write_stats_csv(dataset_stats(ds), run.path("dataset_stats.csv"))


def cmd_train_offline(cfg: RunConfig, run: _Run) -> None:
    ds = _dataset(cfg, run)
    _offline(cfg, ds, run)


def cmd_finetune(cfg: RunConfig, run: _Run) -> None:
    ds = _dataset(cfg, run)
    agent = _agent(cfg, ds, run)
    ft = cfg.finetune
    online_cfg = cfg.pars
    for k in ("alpha", "beta", "utd_ratio"):
        if getattr(ft, k) is not None:
            online_cfg = replace(online_cfg, **{k: getattr(ft, k)})
    run.say(f"online fine-tuning for {ft.online_steps} environment steps")
    actor, critics, log = finetune_online(online_cfg, agent, _env(cfg), ds, ft.online_steps, cfg.run.seed)
    log.write_csv(run.path("online_log.csv"))
    save_agent(run.path("checkpoint_online.txt"), actor, critics)


def _action_grid(action_dim: int, resolution: int) -> np.ndarray:
    if action_dim == 1:
        return np.linspace(-1.0, 1.0, resolution)[:, None]
    if action_dim == 2:
        return didactic_lab.make_grid(1.0, resolution)
    raise diagnostics.UnsupportedDimensionError("action grids are limited to 1 or 2 dimensions")


def cmd_diagnose(cfg: RunConfig, run: _Run) -> None:
    ds = _dataset(cfg, run)
    actor, critics = _agent(cfg, ds, run)
    dg = cfg.diagnostics
    seed = cfg.run.seed
    metrics: list[tuple[str, float]] = []
    x_data = np.concatenate([ds.s, ds.a], axis=1)

    for i, c in enumerate(critics.online):
        rep = diagnostics.dormant_ratio(c, x_data, dg.dormant_threshold)
        metrics.append((f"critic{i}_dormant_ratio", rep.dormant_ratio))

    # Where do the actor's actions fall relative to the dataset's action hull?
    pi_actions = actor.act(ds.s)
    fr = diagnostics.region_fractions(diagnostics.classify_ood(ds.a, pi_actions))
    for k, v in fr.items():
        metrics.append((f"actor_action_fraction_{k}", v))

    # NTK of critic 0 against the dataset action of largest norm, at its state.
    run.say("computing NTK map")
    ref_idx = int(np.argmax(np.linalg.norm(ds.a, axis=1)))
    grid_a = _action_grid(ds.action_dim, dg.ntk_resolution)
    grid = np.concatenate([np.repeat(ds.s[ref_idx][None, :], len(grid_a), axis=0), grid_a], axis=1)
    ntk = diagnostics.ntk_similarity(critics.online[0], x_data[ref_idx], grid)
    diagnostics.write_ntk_csv(ntk, run.path("ntk.csv"))
    labels = diagnostics.classify_ood(ds.a, grid_a).labels
    for k in (diagnostics.ID, diagnostics.OOD_IN, diagnostics.OOD_OUT):
        mask = labels == k
        metrics.append((f"ntk_mean_{k}", ntk.mean_over(mask) if np.any(mask & ~ntk.flagged) else float("nan")))
    if ds.action_dim == 2:
        r = dg.ntk_resolution
        reports.write_svg_heatmap(run.path("ntk.svg"), ntk.values.reshape(r, r), title="normalized NTK")

    # Max-Q probes on an unregularized and a regularized SARSA critic.
    run.say("training SARSA probe critics")
    sd, ad = ds.state_dim, ds.action_dim
    probes = {
        "plain": (False, diagnostics.SarsaConfig(gamma=dg.probe_gamma, tau=0.02, lr=1e-3)),
        "pars": (
            True,
            diagnostics.SarsaConfig(
                gamma=dg.probe_gamma,
                tau=0.02,
                lr=1e-3,
                c_reward=dg.probe_c_reward,
                alpha=dg.probe_alpha,
                guard_multiplier=dg.probe_guard_multiplier,
            ),
        ),
    }
    for name, (ln, scfg) in probes.items():
        spec = MlpSpec(sd + ad, 1, dg.probe_hidden_dims, "relu", ln)
        q = diagnostics.train_sarsa_q(ds, spec, dg.sarsa_steps, seed, scfg)
        rep = diagnostics.max_q_probe(q, ds.s, ad, dg.maxq_steps, seed, data_actions=ds.a, high=ds.feasible_high)
        metrics.append((f"maxq_{name}_action_norm", rep.max_q_action_norm))
    metrics.append(("data_action_norm", rep.data_action_norm))
    reports.write_rows_csv(run.path("diagnostics.csv"), ["metric", "value"], metrics)


def cmd_didactic(cfg: RunConfig, run: _Run) -> None:
    d = cfg.didactic
    header = [
        "activation", "c_reward", "seed", "train_mse", "id_max", "id_mean",
        "ood_in_max", "ood_in_mean", "ood_out_max", "ood_out_mean", "ntk_ood_out_mean",
    ]
    rows = []
    for act in d.activations:
        for c in d.c_rewards:
            for k in range(d.n_seeds):
                seed = cfg.run.seed + k
                task = didactic_lab.RegressionTask(
                    kind=d.kind, c_reward=c, use_ln=d.use_ln, activation=act,
                    hidden_dims=d.hidden_dims, pa_alpha=d.pa_alpha, extent=d.extent,
                )
                run.say(f"fitting {didactic_lab.panel_name(task, seed)}")
                params = didactic_lab.fit_regressor(task, None, d.steps, seed)
                st = didactic_lab.region_stats(params, task, d.grid_resolution)
                grid = didactic_lab.make_grid(d.extent, d.grid_resolution)
                ref = task.centers[-1] + np.array([task.disc_radius, 0.0])
                ntk = diagnostics.ntk_similarity(params, ref, grid)
                out_mask = didactic_lab.region_of(task, grid) == didactic_lab.OOD_OUT_REGION
                name = didactic_lab.panel_name(task, seed)
                reports.write_grid_csv(run.path(f"{name}.csv"), grid, st.grid_values.ravel(), "prediction_over_c")
                reports.write_svg_heatmap(run.path(f"{name}.svg"), st.grid_values, title=name)
                rows.append([
                    act, c, seed, didactic_lab.training_mse(params, task, seed),
                    st.id_max, st.id_mean, st.ood_in_max, st.ood_in_mean, st.ood_out_max, st.ood_out_mean,
                    ntk.mean_over(out_mask),
                ])
    reports.write_rows_csv(run.path("didactic_summary.csv"), header, rows)


def cmd_tabular_check(cfg: RunConfig, run: _Run) -> None:
    t = cfg.tabular
    run.say(f"certifying {t.n_instances} random MDPs")
    rows = tabular_oracle.certify(
        t.n_instances, t.trials, cfg.run.seed, t.n_states, t.n_actions, t.support_density, t.gamma, t.k, t.tol
    )
    header = [f.name for f in dataclasses.fields(tabular_oracle.CertificationRow)] + ["within_gamma"]
    body = [[getattr(r, h) for h in header[:-1]] + [int(r.max_ratio <= r.gamma + 1e-12)] for r in rows]
    reports.write_rows_csv(run.path("certification.csv"), header, body)


def ablation_config(base: ParsConfig, variant: str, c_reward: float, alpha: float) -> ParsConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return replace(
        base,
        c_reward=c_reward,
        critic_ln=variant in ("ln", "ln_pa"),
        alpha=alpha if variant in ("pa", "ln_pa") else 0.0,
    )


def cmd_ablate(cfg: RunConfig, run: _Run) -> None:
    ab = cfg.ablate
    # [env] and [behavior] overrides apply when they describe the ablation's environment.
    same_env = ab.env_id == cfg.env.env_id
    env = make_env_spec(ab.env_id, **(cfg.env.overrides() if same_env else {}))
    beh = default_behavior(env, **(cfg.behavior.overrides() if same_env else {}))
    ds = generate_offline_dataset(env, beh, cfg.run.seed)
    save_dataset(ds, run.path("dataset.txt"))
    base = replace(
        cfg.pars,
        max_gradient_steps=ab.max_gradient_steps,
        hidden_dims=ab.hidden_dims,
        eval_episodes=ab.eval_episodes,
        log_interval=min(cfg.pars.log_interval, ab.max_gradient_steps),
    )
    header = ["variant", "c_reward", "status", "final_goal_rate", "final_eval_return", "final_q_data", "final_dormant_ratio"]
    rows = []
    for variant in ab.variants:
        for c in ab.c_rewards:
            pc = ablation_config(base, variant, c, ab.alpha)
            tag = f"{variant}_c{c:g}"
            run.say(f"ablation cell {tag}")
            try:
                _, _, log = train_offline(pc, ds, cfg.run.seed, env)
            except DivergenceError:
                rows.append([variant, c, "diverged", float("nan"), float("nan"), float("nan"), float("nan")])
                continue
            log.write_csv(run.path(f"{tag}/offline_log.csv"))
            last = log.rows[-1]
            rows.append([
                variant, c, "ok", last["goal_rate"], last["eval_return"], last["q_data"], last["dormant_ratio"],
            ])
    reports.write_rows_csv(run.path("ablation_summary.csv"), header, rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-offline": cmd_train_offline,
    "finetune": cmd_finetune,
    "diagnose": cmd_diagnose,
    "didactic": cmd_didactic,
    "tabular-check": cmd_tabular_check,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# Manifest


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run: _Run, subcommand: str, cfg: RunConfig, duration: float) -> Path:
    manifest = {
        "tool": "parslab",
        "version": __version__,
        "subcommand": subcommand,
        "config": serialize_config(cfg),
        "artifacts": [{"path": a, "sha256": _sha256(run.out / a)} for a in sorted(run.artifacts)],
        "duration_seconds": round(duration, 3),
    }
    path = run.out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path) -> tuple[str, RunConfig]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc.msg}") from None
    if data.get("subcommand") not in COMMANDS or "config" not in data:
        raise ConfigError(f"manifest {path} lacks a known subcommand or config")
    return data["subcommand"], parse_config_text(data["config"])


def execute(subcommand: str, cfg: RunConfig, out, quiet: bool = True) -> Path:
    """Run one subcommand and return the manifest path. Raises module errors."""
    if subcommand not in COMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    run = _Run(Path(out), quiet)
    start = time.perf_counter()
    COMMANDS[subcommand](cfg, run)
    return write_manifest(run, subcommand, cfg, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# argv handling


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parslab", description="Toy-scale offline RL experiments and diagnostics.")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="config file (defaults for everything if omitted)")
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        sp.add_argument("--seed", type=int, help="overrides [run] seed")
        sp.add_argument("--quiet", action="store_true", help="suppress progress messages")
    rp = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.subcommand == "rerun":
            subcommand, cfg = read_manifest(args.manifest)
        else:
            subcommand = args.subcommand
            cfg = parse_config(args.config) if args.config else RunConfig()
            if args.seed is not None:
                if args.seed < 0:
                    raise ConfigError("seed must be >= 0", key="seed")
                cfg = with_seed(cfg, args.seed)
        manifest = execute(subcommand, cfg, args.out, args.quiet)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = exit_code_for(exc)
        print(f"parslab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    if not args.quiet:
        print(f"wrote {manifest}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
