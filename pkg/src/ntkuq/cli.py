"""Command-line interface: kernel build, infwidth predict, ensemble run,
sweep run, fit, emit-plot."""

import argparse
import json
import sys

import numpy as np

from .errors import NtkuqError
from .kernels import ArchitectureConfig, InputSet, build_kernel_pair, save_kernel_pair
from .infwidth import bayesian_posterior, closed_form_posterior, save_posterior_jsonl
from .loss_stats import loss_stats
from .datasets import Dataset, load_event_vectors, load_idx, make_synthetic
from .finite_width import TrainConfig, run_ensemble
from .scaling import fit_power_law
from .experiment import ExperimentPlan, emit_plot_data, load_plan_file, run_plan


def _add_arch_flags(p):
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--n-out", type=int, default=1)
    p.add_argument("--lambda-b", type=float, default=1.0)
    p.add_argument("--lambda-w", type=float, default=1.0)


def _arch_from_args(args, input_dim):
    return ArchitectureConfig(
        depth=args.depth,
        input_dim=input_dim,
        hidden_width=args.width,
        n_out=args.n_out,
        lambda_b=args.lambda_b,
        lambda_w=args.lambda_w,
    )


def _add_dataset_flags(p):
    p.add_argument("--generator", default="teacher", choices=["teacher", "sinusoid"])
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--input-dim", type=int, default=8)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--events")
    p.add_argument("--energy-min", type=float, default=10.0)
    p.add_argument("--energy-max", type=float, default=100.0)


def _dataset_from_args(args, n_out=1):
    if args.idx_images:
        return load_idx(args.idx_images, args.idx_labels)
    if args.events:
        return load_event_vectors(args.events, args.energy_min, args.energy_max)
    teacher_arch = ArchitectureConfig(
        depth=3, input_dim=args.input_dim, hidden_width=32, n_out=n_out
    )
    return make_synthetic(
        args.generator,
        args.n_points,
        args.input_dim,
        args.data_seed,
        teacher_arch=teacher_arch,
        noise=args.noise,
    )


def _cmd_kernel_build(args):
    X = np.load(args.inputs)
    arch = _arch_from_args(args, X.shape[1])
    kp = build_kernel_pair(InputSet(X), arch)
    save_kernel_pair(kp, args.out)
    print(json.dumps({"count": kp.count, "layer": kp.layer, "out": args.out}))


def _cmd_infwidth_predict(args):
    X = np.load(args.inputs)
    y = np.load(args.labels)
    n_train = args.n_train
    if not 0 < n_train < X.shape[0]:
        raise ValueError("--n-train must split the input rows")
    arch = _arch_from_args(args, X.shape[1])
    kp = build_kernel_pair(InputSet(X), arch)
    train_ids = np.arange(n_train)
    test_ids = np.arange(n_train, X.shape[0])
    post_fn = bayesian_posterior if args.bayesian else closed_form_posterior
    post = post_fn(kp, train_ids, test_ids, y[:n_train])
    save_posterior_jsonl(post, args.out, ids=test_ids)
    if args.cov_out:
        from .kernels import KernelPair, save_kernel_pair as _save

        _save(KernelPair(K=post.cov, Theta=post.cov, layer=arch.depth), args.cov_out)
    if args.test_labels:
        stats = loss_stats(post, np.load(args.test_labels))
        print(stats.to_json())
    else:
        print(json.dumps({"n_test": post.n_test, "method": post.method, "out": args.out}))


def _cmd_ensemble_run(args):
    dataset = _dataset_from_args(args, n_out=args.n_out)
    arch = _arch_from_args(args, dataset.inputs.input_dim)
    n = dataset.count
    n_test, n_val, n_train = args.test_size, args.val_size, args.train_size
    if n_test + n_val + n_train > n:
        raise ValueError("splits exceed dataset size")
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(n)
    te, va, tr = perm[:n_test], perm[n_test : n_test + n_val], perm[n_test + n_val :][:n_train]
    split = {
        "x_train": dataset.inputs.points[tr],
        "y_train": dataset.labels[tr],
        "x_val": dataset.inputs.points[va],
        "y_val": dataset.labels[va],
        "x_test": dataset.inputs.points[te],
        "y_test": dataset.labels[te],
    }
    cfg = TrainConfig(
        eta=args.eta,
        lambda_b=args.lambda_b,
        lambda_w=args.lambda_w,
        optimizer=args.optimizer,
        minibatch=args.minibatch,
        patience=args.patience,
        max_epochs=args.max_epochs,
    )
    summary = run_ensemble(split, arch, cfg, args.members, args.seed)
    print(
        json.dumps(
            {
                "mu_L": summary.mu_L,
                "var_L": summary.var_L,
                "eps_L": summary.eps_L,
                "eps_se": summary.eps_se,
                "n_ok": summary.n_ok,
                "n_diverged": summary.n_diverged,
            }
        )
    )


def _plan_from_file(args):
    raw = load_plan_file(args.plan)

    def get(key, cast, default):
        return cast(raw[key]) if key in raw else default

    sizes = [int(s) for s in raw["sizes"].split(",")]
    input_dim = get("input_dim", int, 8)
    arch = ArchitectureConfig(
        depth=get("depth", int, 3),
        input_dim=input_dim,
        hidden_width=get("width", int, 64),
        n_out=get("n_out", int, 1),
        lambda_b=get("lambda_b", float, 1.0),
        lambda_w=get("lambda_w", float, 1.0),
    )
    train_cfg = None
    if get("ensemble_size", int, 0) >= 2:
        train_cfg = TrainConfig(
            eta=get("eta", float, 1.0),
            lambda_b=arch.lambda_b,
            lambda_w=arch.lambda_w,
            optimizer=raw.get("optimizer", "full_batch_gd"),
            patience=get("patience", int, 200),
            max_epochs=get("max_epochs", int, 2000),
        )
    sweep = raw.get("lambda_b_sweep", "")
    plan = ExperimentPlan(
        sizes=sizes,
        arch=arch,
        output_dir=args.out or raw["output_dir"],
        master_seed=get("master_seed", int, 0),
        test_size=get("test_size", int, 64),
        val_size=get("val_size", int, 16),
        ensemble_size=get("ensemble_size", int, 0),
        train_cfg=train_cfg,
        infinite_width=raw.get("infinite_width", "true").lower() != "false",
        bayesian=raw.get("bayesian", "false").lower() == "true",
        lambda_b_sweep=[float(v) for v in sweep.split(",") if v],
    )
    n_points = get(
        "n_points", int, plan.test_size + plan.val_size + max(sizes)
    )
    teacher_arch = ArchitectureConfig(
        depth=get("teacher_depth", int, 3),
        input_dim=input_dim,
        hidden_width=get("teacher_width", int, 32),
        n_out=arch.n_out,
    )
    dataset = make_synthetic(
        raw.get("generator", "teacher"),
        n_points,
        input_dim,
        get("data_seed", int, 0),
        teacher_arch=teacher_arch,
        noise=get("noise", float, 0.0),
    )
    return plan, dataset


def _cmd_sweep_run(args):
    plan, dataset = _plan_from_file(args)
    result = run_plan(plan, dataset)
    print(
        json.dumps(
            {
                "output_dir": result.output_dir,
                "rows": len(result.infwidth_rows),
                "ensemble_rows": len(result.summary_rows),
                "fits": sorted(result.fits),
                "flatness": result.flatness.verdict,
                "skipped": len(result.skipped),
                "config_hash": result.config_hash,
            }
        )
    )


def _cmd_fit(args):
    import csv as _csv

    with open(args.input, newline="") as f:
        reader = _csv.DictReader(f)
        pts = [(float(r[args.x_col]), float(r[args.y_col])) for r in reader]
    fit = fit_power_law(pts)
    print(
        json.dumps(
            {
                "exponent": fit.exponent,
                "intercept": fit.intercept,
                "slope_sigma": fit.slope_sigma,
                "n_points": fit.n_points,
                "r_squared": fit.r_squared,
            }
        )
    )


def _cmd_emit_plot(args):
    rows = emit_plot_data(args.store, args.quantity, out_path=args.out)
    print(json.dumps({"rows": len(rows), "out": args.out}))


def build_parser():
    parser = argparse.ArgumentParser(prog="ntkuq")
    sub = parser.add_subparsers(dest="command", required=True)

    kernel = sub.add_parser("kernel").add_subparsers(dest="action", required=True)
    p = kernel.add_parser("build")
    p.add_argument("--inputs", required=True, help=".npy file of input rows")
    p.add_argument("--out", required=True)
    _add_arch_flags(p)
    p.set_defaults(func=_cmd_kernel_build)

    infw = sub.add_parser("infwidth").add_subparsers(dest="action", required=True)
    p = infw.add_parser("predict")
    p.add_argument("--inputs", required=True)
    p.add_argument("--labels", required=True, help=".npy of train labels")
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--test-labels")
    p.add_argument("--bayesian", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--cov-out")
    _add_arch_flags(p)
    p.set_defaults(func=_cmd_infwidth_predict)

    ens = sub.add_parser("ensemble").add_subparsers(dest="action", required=True)
    p = ens.add_parser("run")
    _add_dataset_flags(p)
    _add_arch_flags(p)
    p.add_argument("--train-size", type=int, default=64)
    p.add_argument("--val-size", type=int, default=16)
    p.add_argument("--test-size", type=int, default=64)
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--optimizer", default="full_batch_gd", choices=["full_batch_gd", "adam"])
    p.add_argument("--minibatch", type=int, default=1000)
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.set_defaults(func=_cmd_ensemble_run)

    sweep = sub.add_parser("sweep").add_subparsers(dest="action", required=True)
    p = sweep.add_parser("run")
    p.add_argument("--plan", required=True, help="key = value plan file")
    p.add_argument("--out", help="override output_dir from the plan file")
    p.set_defaults(func=_cmd_sweep_run)

    p = sub.add_parser("fit")
    p.add_argument("--input", required=True, help="CSV with size/value columns")
    p.add_argument("--x-col", default="N_D")
    p.add_argument("--y-col", default="value")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("emit-plot")
    p.add_argument("--store", required=True, help="run_plan output directory")
    p.add_argument("--quantity", required=True, choices=["mu_L", "sigma_L", "eps_L"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_emit_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (NtkuqError, ValueError, OSError, KeyError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
