"""Command-line entry point: ``pointmut <command> [options]``.

Option values are resolved in increasing priority from built-in defaults, a
flat ``key = value`` file given by ``--config``, ``POINTMUT_<OPTION>``
environment variables and finally the command line itself.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    categorical_jacobian,
    default_t_grid,
    frobenius_relative_error,
    per_site_entropy,
    sampling_error_curves,
    selection_score,
)
from .estimation import Estimator, FitDivergence, TrainingConfig, fit, generate_dataset
from .generators import (
    FactorizedModel,
    FullGenerator,
    build_factorized_truth,
    build_state_dependent_truth,
    draw_site_matrices,
    interpolate_truth,
)
from .harness import (
    CURVE_COLUMNS,
    CURVE_UNITS,
    PAPER_SAMPLES,
    RunManifest,
    SweepConfig,
    default_tree,
    run_epistasis_sweep,
    run_sampling_comparison,
    run_tree_fidelity,
    timed,
)
from .io import load_dataset, load_generator, save_dataset, save_fit, save_generator, write_csv, write_trajectories
from .kernels import ExpmConfig
from .rng import derive_seed, make_rng
from .samplers import (
    GuidanceConfig,
    fixed_step_gillespie,
    guided_gillespie,
    linear_oracle,
    simulate_tree,
    tabular_oracle,
)
from .state_space import Alphabet, StateSpace
from .trees import load_tree, star_tree

log = logging.getLogger("pointmut")

ENV_PREFIX = "POINTMUT_"
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="master seed for every random stream")
    g.add_argument("--out-dir", default="out", help="directory receiving all artifacts and manifest.json")
    g.add_argument("--expm-method", choices=["uniformization", "scaling_squaring"], default="uniformization")
    g.add_argument("--expm-tol", type=float, default=1e-12, help="uniformization truncation tolerance")
    g.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")
    g.add_argument("--config", help="flat key = value file mirroring the long option names")
    g.add_argument("--paper-scale", action="store_true", help=f"use {PAPER_SAMPLES:,} samples per dataset")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _space_args(p):
    p.add_argument("--alphabet", default="ACGT")
    p.add_argument("--length", type=int, default=3)


def _fit_args(p):
    p.add_argument("--estimator", choices=[e.value for e in Estimator], default=Estimator.FACTORIZED.value)
    p.add_argument("--lr", type=float, default=None, help="learning rate (0.1 full, 0.01 factorized)")
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--snr-delta", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=None, help="records per step; omit for full batch")


def _sampling_args(p):
    p.add_argument("--model", help="generator JSON; defaults to a context-free model from --model-seed")
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--x", default="AAA", help="start sequence")
    p.add_argument("--t", type=float, default=1.0, help="branch length")
    p.add_argument("--n", type=int, default=1, help="number of independent samples")
    p.add_argument("--fixed-steps", type=int, default=None, help="take exactly this many jumps instead")
    p.add_argument("--mask", default=None, help="comma-separated sites allowed to mutate (with --fixed-steps)")


def _guidance_args(p, gamma: float):
    p.add_argument("--gamma", type=float, default=gamma)
    p.add_argument("--mode", choices=["exact", "tag"], default="tag")
    p.add_argument("--oracle", choices=["linear", "tabular"], default="linear")
    p.add_argument("--oracle-seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.0, help="oracle predictive standard deviation")
    p.add_argument("--sigma-at", choices=["parent", "child"], default="parent")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="pointmut", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-truth", parents=[common], help="draw an interpolated ground-truth generator")
    _space_args(p)
    p.add_argument("--epsilon", type=float, default=1.0)

    p = sub.add_parser("gen-data", parents=[common], help="simulate (x, y, t) records from a generator")
    p.add_argument("--truth", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--branch-rate", type=float, default=0.5)
    p.add_argument("--bins", type=int, default=512, help="Exp quantile bins for t (0 keeps raw draws)")

    p = sub.add_parser("fit", parents=[common], help="fit a model to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--truth", help="report the relative Frobenius error against this generator")
    _fit_args(p)

    p = sub.add_parser("eval-curves", parents=[common], help="KL-vs-t curves of both samplers")
    p.add_argument("--truth", required=True)
    p.add_argument("--model", required=True, help="fitted factorized model JSON")

    p = sub.add_parser("sweep", parents=[common], help="run a seeded synthetic experiment")
    p.add_argument("--experiment", choices=["epistasis", "sampling", "trees"], default="epistasis")
    p.add_argument("--epsilons", default="0,0.25,0.5,0.75,1")
    p.add_argument("--replicates", type=int, default=3)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--branch-rate", type=float, default=0.5)
    p.add_argument("--estimators", default=",".join(e.value for e in Estimator))
    p.add_argument("--snr-delta", type=float, default=None, help="fixed delta; default 1 - epsilon")
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--trees", type=int, default=200, help="number of tree replicates (trees experiment)")
    p.add_argument("--tree", help="Newick file (trees experiment); defaults to the shipped 13-leaf tree")

    p = sub.add_parser("sample", parents=[common], help="Gillespie samples from a model")
    _sampling_args(p)

    p = sub.add_parser("guide", parents=[common], help="guided Gillespie samples")
    _sampling_args(p)
    _guidance_args(p, gamma=1.0)

    p = sub.add_parser("tree-sim", parents=[common], help="simulate sequences down a tree")
    p.add_argument("--tree", help="Newick file; defaults to the shipped 13-leaf tree")
    p.add_argument("--star", type=int, default=None, help="use a star tree with this many leaves instead")
    p.add_argument("--star-length", type=float, default=0.5)
    p.add_argument("--model")
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--root", default="AAA")
    p.add_argument("--method", choices=["gillespie", "matexp"], default="gillespie")
    p.add_argument("--guided", action="store_true", help="tilt rates towards the oracle")
    _guidance_args(p, gamma=5.0)

    p = sub.add_parser("jacobian", parents=[common], help="categorical Jacobian of a factorized model")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)

    p = sub.add_parser("score", parents=[common], help="selection score log p(y|x,t) - log q(y|x,t)")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--t", type=float, required=True)

    p = sub.add_parser("entropy", parents=[common], help="per-site entropy of a factorized model")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--t", type=float, required=True)
    return parser


# -- configuration layering -----------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes and underscores are interchangeable."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _env_overrides() -> dict[str, str]:
    return {k[len(ENV_PREFIX):].lower(): v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)}


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    value = action.type(raw) if action.type else raw
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"invalid value {raw!r} for {action.dest}; choose from {list(action.choices)}")
    return value


def _apply_overrides(subparser: argparse.ArgumentParser, overrides: dict[str, str]) -> None:
    actions = {a.dest: a for a in subparser._actions}
    values = {}
    for key, raw in overrides.items():
        if key in actions and key not in ("help", "config"):
            try:
                values[key] = _convert(actions[key], raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
    subparser.set_defaults(**values)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    overrides = {}
    config_path = known.config or os.environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        if not Path(config_path).is_file():
            raise UsageError(f"config file {config_path!r} not found")
        overrides.update(read_config_file(config_path))
    overrides.update(_env_overrides())
    if overrides:
        sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        for sp in sub_action.choices.values():
            _apply_overrides(sp, overrides)
    return parser.parse_args(argv)


# -- helpers -----------------------------------------------------------------------------------


def _expm(args) -> ExpmConfig:
    return ExpmConfig(method=args.expm_method, truncation_tol=args.expm_tol)


def _config_echo(args) -> dict:
    skip = {"out_dir", "threads", "verbose", "config", "func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _default_model(space: StateSpace, seed: int) -> FactorizedModel:
    return FactorizedModel.context_free(space, draw_site_matrices(space, seed))


def _load_model(args, space: StateSpace | None = None):
    if args.model:
        return load_generator(args.model)
    return _default_model(space or StateSpace.codons(), args.model_seed)


def _make_oracle(args, space: StateSpace):
    rng = make_rng(derive_seed(args.oracle_seed, 0))
    if args.oracle == "linear":
        return linear_oracle(rng.normal(size=(space.length, space.alphabet.size)), args.sigma)
    return tabular_oracle(rng.normal(size=space.num_states), args.sigma)


def _guidance(args) -> GuidanceConfig:
    return GuidanceConfig(gamma=args.gamma, mode=args.mode, sigma_at=args.sigma_at)


# -- commands ----------------------------------------------------------------------------------


def cmd_gen_truth(args, out: Path, manifest: RunManifest) -> None:
    space = StateSpace(Alphabet.from_string(args.alphabet), args.length)
    seeds = {"factorized_truth": derive_seed(args.seed, 0), "dependent_truth": derive_seed(args.seed, 1)}
    manifest.seeds.update(seeds)
    truth = interpolate_truth(build_factorized_truth(space, seeds["factorized_truth"]),
                              build_state_dependent_truth(space, seeds["dependent_truth"]), args.epsilon)
    manifest.add(save_generator(out / "truth.json", truth, seed=args.seed, epsilon=args.epsilon,
                                manifest_hash=manifest.hash), out)


def cmd_gen_data(args, out: Path, manifest: RunManifest) -> None:
    truth = load_generator(args.truth)
    if not isinstance(truth, FullGenerator):
        raise UsageError("--truth must be a full generator")
    samples = PAPER_SAMPLES if args.paper_scale else args.samples
    seed = derive_seed(args.seed, 2)
    manifest.seeds["dataset"] = seed
    data = generate_dataset(truth, samples, args.branch_rate, make_rng(seed), bins=args.bins or None,
                            expm_cfg=_expm(args))
    manifest.add(save_dataset(out / "dataset.jsonl", data, seed=seed, truth=str(args.truth),
                              manifest_hash=manifest.hash), out)


def cmd_fit(args, out: Path, manifest: RunManifest) -> None:
    data = load_dataset(args.data)
    seed = derive_seed(args.seed, 3)
    manifest.seeds["fit"] = seed
    tc = TrainingConfig(estimator=args.estimator, learning_rate=args.lr, max_epochs=args.max_epochs,
                        patience=args.patience, snr_delta=args.snr_delta, batch_size=args.batch_size,
                        seed=seed, expm_tol=args.expm_tol)
    result = fit(data, tc)
    for path in save_fit(out, "model", result, manifest.hash):
        manifest.add(path, out)
    summary = {"estimator": tc.estimator.value, "best_epoch": result.best_epoch,
               "stopped_epoch": result.stopped_epoch, "train_loss": result.final_train_loss}
    if args.truth:
        summary["frobenius_error"] = frobenius_relative_error(result.estimated_generator(),
                                                              load_generator(args.truth))
    print(json.dumps(summary))


def cmd_eval_curves(args, out: Path, manifest: RunManifest) -> None:
    truth, model = load_generator(args.truth), load_generator(args.model)
    if not isinstance(model, FactorizedModel):
        raise UsageError("--model must be a factorized model")
    curves = sampling_error_curves(truth, model, default_t_grid(), _expm(args))
    manifest.add(write_csv(out / "curves.csv", CURVE_COLUMNS, curves.rows(), CURVE_UNITS, manifest.hash), out)


def cmd_sweep(args, out: Path, manifest: RunManifest) -> None:
    try:
        cfg = SweepConfig(epsilon_levels=[float(e) for e in args.epsilons.split(",")], replicates=args.replicates,
                          samples=PAPER_SAMPLES if args.paper_scale else args.samples,
                          branch_rate=args.branch_rate, estimators=args.estimators.split(","),
                          master_seed=args.seed, snr_delta=args.snr_delta, max_epochs=args.max_epochs,
                          expm_method=args.expm_method, expm_tol=args.expm_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest.seeds["master"] = args.seed
    if args.experiment == "epistasis":
        run_epistasis_sweep(cfg, out, args.threads, manifest)
    elif args.experiment == "sampling":
        run_sampling_comparison(cfg, out, args.threads, manifest)
    else:
        tree = load_tree(args.tree) if args.tree else default_tree()
        run_tree_fidelity(cfg, [tree] * args.trees, cfg.epsilon_levels[-1], out, manifest)


def _run_sampling(args, out: Path, manifest: RunManifest, guided: bool) -> None:
    model = _load_model(args)
    space = model.space
    x0 = space.parse(args.x)
    oracle = _make_oracle(args, space) if guided else None
    gcfg = _guidance(args) if guided else GuidanceConfig(gamma=0.0)
    seed = derive_seed(args.seed, 5)
    manifest.seeds["sampler"] = seed
    rng = make_rng(seed)
    header = {"seed": args.seed, "model_ref": args.model or f"context-free:{args.model_seed}",
              "t": args.t, "gamma": gcfg.gamma, "mode": gcfg.mode.value}
    if args.fixed_steps is not None:
        mask = [int(s) for s in args.mask.split(",")] if args.mask else None
        ends = [fixed_step_gillespie(model, x0, args.fixed_steps, rng, oracle, gcfg, mask) for _ in range(args.n)]
        header["fixed_steps"] = args.fixed_steps
        header["mask"] = mask
        path = out / "samples.jsonl"
        with path.open("w") as fh:
            fh.write(json.dumps({"header": header}) + "\n")
            for y in ends:
                fh.write(json.dumps({"end": str(y)}) + "\n")
    else:
        if args.t < 0:
            raise UsageError("--t must be non-negative")
        runs = [guided_gillespie(model, oracle, gcfg, x0, args.t, rng) for _ in range(args.n)]
        ends = [y for y, _ in runs]
        path = write_trajectories(out / "samples.jsonl", [tr for _, tr in runs], header)
    manifest.add(path, out)
    for y in ends:
        print(y)


def cmd_sample(args, out, manifest):
    _run_sampling(args, out, manifest, guided=False)


def cmd_guide(args, out, manifest):
    _run_sampling(args, out, manifest, guided=True)


def cmd_tree_sim(args, out: Path, manifest: RunManifest) -> None:
    model = _load_model(args)
    space = model.space
    if args.star:
        tree = star_tree(args.star, args.star_length)
    else:
        tree = load_tree(args.tree) if args.tree else default_tree()
    oracle = _make_oracle(args, space)
    gcfg = _guidance(args) if args.guided else None
    seed = derive_seed(args.seed, 6)
    manifest.seeds["tree"] = seed
    nodes = simulate_tree(model, space.parse(args.root), tree, make_rng(seed),
                          oracle if args.guided else None, gcfg, method=args.method)
    leaves = {leaf.name for leaf in tree.leaves()}
    rows = [(name, str(seq), name in leaves, oracle.mean(seq)) for name, seq in nodes.items()]
    path = write_csv(out / "tree_nodes.csv", ["node", "sequence", "is_leaf", "oracle_mean"], rows,
                     {"node": "name", "sequence": "symbols", "is_leaf": "bool", "oracle_mean": "oracle units"},
                     manifest.hash, {"guided": args.guided, "gamma": args.gamma if args.guided else 0.0})
    manifest.add(path, out)


def cmd_jacobian(args, out: Path, manifest: RunManifest) -> None:
    model = load_generator(args.model)
    if not isinstance(model, FactorizedModel):
        raise UsageError("--model must be a factorized model")
    res = categorical_jacobian(model, model.space.parse(args.x))
    L = model.space.length
    rows = [(i, j, res.sensitivity[i, j]) for i in range(L) for j in range(L)]
    manifest.add(write_csv(out / "jacobian.csv", ["i", "j", "S_ij"], rows,
                           {"i": "site", "j": "site", "S_ij": "Frobenius (rate units)"},
                           manifest.hash, {"x": args.x}), out)


def cmd_score(args, out: Path, manifest: RunManifest) -> None:
    model, baseline = load_generator(args.model), load_generator(args.baseline)
    space = model.space
    score = selection_score(model, baseline, space.parse(args.x), space.parse(args.y), args.t, _expm(args))
    path = out / "score.json"
    path.write_text(json.dumps({"x": args.x, "y": args.y, "t": args.t, "score": score,
                                "manifest_hash": manifest.hash}) + "\n")
    manifest.add(path, out)
    print(score)


def cmd_entropy(args, out: Path, manifest: RunManifest) -> None:
    model = load_generator(args.model)
    if not isinstance(model, FactorizedModel):
        raise UsageError("--model must be a factorized model")
    h = per_site_entropy(model, model.space.parse(args.x), args.t, _expm(args))
    manifest.add(write_csv(out / "entropy.csv", ["site", "entropy"], enumerate(h.tolist()),
                           {"site": "index", "entropy": "nats"}, manifest.hash, {"x": args.x, "t": args.t}), out)


COMMANDS = {
    "gen-truth": cmd_gen_truth, "gen-data": cmd_gen_data, "fit": cmd_fit, "eval-curves": cmd_eval_curves,
    "sweep": cmd_sweep, "sample": cmd_sample, "guide": cmd_guide, "tree-sim": cmd_tree_sim,
    "jacobian": cmd_jacobian, "score": cmd_score, "entropy": cmd_entropy,
}


def cli_main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=args.command, config=_config_echo(args))
    try:
        with timed(manifest.timings, args.command):
            COMMANDS[args.command](args, out, manifest)
    except UsageError as exc:
        print(f"pointmut {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitDivergence, FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"pointmut {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError, KeyError, IndexError) as exc:
        print(f"pointmut {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest.write(out)
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
