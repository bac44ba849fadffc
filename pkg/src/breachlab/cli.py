"""The breachlab command line.

Subcommands:
  train-versions  populate a version store via retire/replace cycles
  breach-game     run the multi-breach game and write reports + figures
  attack          craft adversarial examples against stored versions
  filter-eval     evaluate the filter on a stored attack batch
  theory-check    verify the analytic loss-gap bound by Monte-Carlo
  serve           run the filtered inference gateway

Every command takes --config (JSON document, see config.py) and repeated
--set section.key=value overrides. Exit codes: 0 success, 2 configuration
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attacks, datagen, experiment, filtering, nnet, report, transferbound, versioning
from .config import ConfigError, load_config
from .gateway import serve as gateway_serve
from .seeding import TAG_ASSIGNMENT, child_rng, child_seed
from .versioning import VersionStore

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="breachlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SEC.KEY=VAL", help="override a config key")

    p = sub.add_parser("train-versions", help="train versions into a store")
    common(p)
    p.add_argument("--count", type=int, default=1, help="number of versions to add")
    p.add_argument("--store", help="store directory (default: paths.store)")

    p = sub.add_parser("breach-game", help="run the multi-breach game")
    common(p)
    p.add_argument("--out", help="report directory (default: paths.out)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.add_argument("--threads", type=int, default=1, help="parallel trial workers")

    p = sub.add_parser("attack", help="craft adversarial examples against stored versions")
    common(p)
    p.add_argument("--store", help="store directory (default: paths.store)")
    p.add_argument("--out", required=True, help="output JSON-lines file")
    p.add_argument("--n", type=int, help="number of examples (default: scenario.n_attack_inputs)")
    p.add_argument("--versions", help="comma-separated version ids to attack "
                                      "(default: all retired, else the deployed one)")

    p = sub.add_parser("filter-eval", help="evaluate the filter on stored examples")
    common(p)
    p.add_argument("--store", help="store directory (default: paths.store)")
    p.add_argument("--adv", required=True, help="JSON-lines file from the attack command")
    p.add_argument("--out", help="report directory (default: paths.out)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("theory-check", help="verify the analytic bound")
    common(p)
    p.add_argument("--out", help="report JSON path (default: paths.out/theory_check.json)")

    p = sub.add_parser("serve", help="run the inference gateway")
    common(p)
    p.add_argument("--store", help="store directory (default: paths.store)")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced with context; exit code contract
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args, cfg) -> int:
    handlers = {
        "train-versions": cmd_train_versions,
        "breach-game": cmd_breach_game,
        "attack": cmd_attack,
        "filter-eval": cmd_filter_eval,
        "theory-check": cmd_theory_check,
        "serve": cmd_serve,
    }
    return handlers[args.command](args, cfg)


def _task_from_config(cfg):
    doc = cfg.resolved()
    return datagen.make_task(doc["task"]["kind"], doc["task"]["params"], int(doc["task"]["seed"]))


def _store_path(args, cfg) -> Path:
    path = getattr(args, "store", None) or cfg.doc["paths"]["store"]
    return Path(path)


def _out_path(args, cfg) -> Path:
    path = getattr(args, "out", None) or cfg.doc["paths"]["out"]
    return Path(path)


# ---------------------------------------------------------------------------
# commands


def cmd_train_versions(args, cfg) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    doc = cfg.resolved()
    task = _task_from_config(cfg)
    store = VersionStore(_store_path(args, cfg))
    rng = child_rng(int(doc["train"]["seed"]), TAG_ASSIGNMENT, len(store.versions))
    for _ in range(args.count):
        versioning.retire_and_replace(
            store,
            task,
            float(doc["hidden"]["spread"]),
            cfg.train_config(),
            rng,
            samples_per_label=int(doc["hidden"]["samples_per_label"]),
            latent_dim=int(doc["hidden"]["latent_dim"]),
        )
    print(f"store: {store.root}")
    print("version  status    benign_acc")
    for v in store.versions:
        print(f"{v.version_id:7d}  {v.status:8s}  {v.benign_accuracy:.4f}")
    return EXIT_OK


def cmd_breach_game(args, cfg) -> int:
    scenario = cfg.scenario()
    task = experiment.make_task(scenario)
    seeds = cfg.trial_seeds()

    def one_trial(seed):
        return experiment.run_breach_game(scenario, seed, task=task)

    workers = max(1, args.threads)
    if workers == 1:
        results = [one_trial(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_trial, seeds))

    out_dir = _out_path(args, cfg)
    paths = report.emit_report(results, out_dir, scenario_echo=cfg.resolved(),
                               figures=not args.no_figures)
    for game in results:
        print(f"trial seed {game.seed}: NBR = {game.nbr}")
    print(f"mean NBR = {np.mean([g.nbr for g in results]):.2f} over {len(results)} trial(s)")
    print("report files: " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def _load_store_with_deployed(args, cfg) -> VersionStore:
    store = VersionStore(_store_path(args, cfg))
    if store.deployed() is None:
        raise ConfigError(f"store at {_store_path(args, cfg)} has no deployed version")
    return store


def cmd_attack(args, cfg) -> int:
    doc = cfg.resolved()
    scenario = cfg.scenario()
    store = _load_store_with_deployed(args, cfg)
    task = _task_from_config(cfg)

    if args.versions:
        wanted = {int(v) for v in args.versions.split(",")}
        targets_pool = [v for v in store.versions if v.version_id in wanted]
        if len(targets_pool) != len(wanted):
            raise ConfigError(f"store lacks versions {sorted(wanted)}")
    else:
        targets_pool = list(store.retired()) or [store.deployed()]
    models = [v.model for v in targets_pool]
    model_ids = [v.version_id for v in targets_pool]

    n = args.n if args.n is not None else scenario.n_attack_inputs
    seed = int(doc["attack"]["seed"])
    attacked = experiment.surrogate_models_for_round(scenario, task, targets_pool, seed)
    x, targets = experiment.pick_attack_inputs(task, store.deployed().model, attacked, n, seed)
    if scenario.attack_kind == "prune_pgd":
        x_adv = attacks.pgd_batch(attacked, x, targets, scenario.budget)
    else:
        x_adv = experiment.craft_attacks(scenario, task, targets_pool, x, targets, seed)

    examples = []
    for i in range(len(x)):
        examples.append(
            attacks.AdvExample(
                original=x[i],
                perturbed=x_adv[i],
                target=int(targets[i]),
                kind=scenario.attack_kind,
                budget=scenario.budget,
                final_losses=[float(nnet.loss_batch(m, x_adv[i : i + 1], [targets[i]])[0]) for m in models],
                success=[bool(nnet.predict_batch(m, x_adv[i : i + 1])[0] == targets[i]) for m in models],
                seed=child_seed(seed, i),
                model_ids=model_ids,
            )
        )
    attacks.write_adv_examples(args.out, examples)
    src_rate = float(np.mean([ex.succeeded for ex in examples]))
    print(f"wrote {len(examples)} {scenario.attack_kind} examples to {args.out}")
    print(f"success on attacked version(s) {model_ids}: {src_rate:.3f}")
    return EXIT_OK


def cmd_filter_eval(args, cfg) -> int:
    store = _load_store_with_deployed(args, cfg)
    if not store.retired():
        raise ConfigError("filter-eval needs at least one retired (breached) version")
    task = _task_from_config(cfg)
    scenario = cfg.scenario()
    deployed = store.deployed()
    breached = [v.model for v in store.retired()]

    state = filtering.calibrate(deployed.model, breached, task.val_x, scenario.target_fpr)
    examples = attacks.read_adv_examples(args.adv)
    if not examples:
        raise ConfigError(f"no examples in {args.adv}")
    x_adv = np.stack([ex.perturbed for ex in examples])
    targets = np.asarray([ex.target for ex in examples])

    labels, deltas, flagged = filtering.judge_batch(x_adv, state)
    transferred = labels == targets
    benign_deltas = filtering.delta_max_batch(task.test_x, deployed.model, breached)
    fpr_realized = float(np.mean(benign_deltas >= state.threshold))
    filter_rate = float(np.mean(flagged[transferred])) if transferred.any() else 1.0

    out_dir = _out_path(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": report.REPORT_SCHEMA_VERSION,
        "scenario": cfg.resolved(),
        "calibration": filtering.calibration_report(
            state, filtering.delta_max_batch(task.val_x, deployed.model, breached)
        ),
        "n_examples": len(examples),
        "transfer_rate": float(np.mean(transferred)),
        "filter_success_on_transferred": filter_rate,
        "flag_rate_all_examples": float(np.mean(flagged)),
        "fpr_realized": fpr_realized,
        "median_gap_transferred": (
            float(np.median(deltas[transferred])) if transferred.any() else None
        ),
    }
    report_path = out_dir / "filter_eval.json"
    report_path.write_text(json.dumps(payload, indent=1, sort_keys=True, allow_nan=False))
    if not args.no_figures:
        _render_gap_histogram(benign_deltas, deltas, state.threshold, out_dir / "filter_eval.png")
    print(f"transfer rate: {payload['transfer_rate']:.3f}")
    print(f"filter success on transferred: {filter_rate:.3f}")
    print(f"realized FPR: {fpr_realized:.4f} (target {scenario.target_fpr})")
    print(f"report: {report_path}")
    return EXIT_OK


def _render_gap_histogram(benign, adversarial, threshold, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(benign, bins=40, alpha=0.6, label="benign", density=True)
    ax.hist(adversarial, bins=40, alpha=0.6, label="adversarial", density=True)
    ax.axvline(threshold, color="red", ls="--", label="threshold")
    ax.set_xlabel("max loss gap")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_theory_check(args, cfg) -> int:
    doc = cfg.resolved()
    sec = doc["theory"]
    cases = [
        {"gamma": g, "ratio": float(sec["ratio"]), "p": float(sec["p"])}
        for g in sec["gammas"]
    ]
    result = transferbound.verification_grid(cases, int(sec["n_samples"]), int(sec["seed"]))
    out = args.out or str(Path(cfg.doc["paths"]["out"]) / "theory_check.json")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps({"scenario": doc["theory"], **result}, indent=1, sort_keys=True))
    print("gamma   gap      T          p_emp    within_ci")
    for row in result["cases"]:
        print(
            f"{row['gamma']:<7g} {row['gap']:<8.4f} {row['threshold']:<10.6f} "
            f"{row['p_empirical']:<8.4f} {row['within_ci']}"
        )
    print(f"report: {out}")
    return EXIT_OK if result["all_within_ci"] else EXIT_RUNTIME


def cmd_serve(args, cfg) -> int:
    doc = cfg.resolved()
    store = _load_store_with_deployed(args, cfg)
    task = _task_from_config(cfg)
    host = args.host or doc["gateway"]["host"]
    port = args.port if args.port is not None else int(doc["gateway"]["port"])
    server = gateway_serve(
        store,
        (host, port),
        task,
        cfg.train_config(),
        spread=float(doc["hidden"]["spread"]),
        samples_per_label=int(doc["hidden"]["samples_per_label"]),
        latent_dim=int(doc["hidden"]["latent_dim"]),
        target_fpr=float(doc["gateway"]["target_fpr"]),
        seed=int(doc["gateway"]["seed"]),
    )
    print(f"gateway listening on {server.server_address[0]}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
