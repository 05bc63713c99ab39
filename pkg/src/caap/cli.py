"""Command-line entry point: ``caap <subcommand> ...``.

Subcommands: gen-data, search, train, baseline, eval, sweep-noaug, report.
Run options come from defaults, then ``--config``, then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report as R
from .backbone import load_backbone, save_backbone
from .config import dump_config, load_config
from .data import SyntheticParams, generate_synthetic, load_dataset, nearest_centroid_accuracy, split_equal, write_binary, write_csv
from .metrics import Predictions
from .pipeline import (
    RunConfig,
    RunReport,
    SearchResult,
    fold_split,
    make_report,
    policy_table,
    predict,
    run_baseline_noaug,
    run_baseline_uniform,
    run_experiment,
    search_phase,
    sweep_argmax,
    sweep_noaug,
    train_phase,
    with_overrides,
)
from .policy import load_policy_network, save_policy_network
from .regulation import RegulationState

log = logging.getLogger("caap")

# flag name -> RunConfig field (dotted for nested configs)
_VALUE_FLAGS = {
    "arch": ("arch", str),
    "epochs": ("epochs", int),
    "search_epochs": ("search_epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "weight_decay": ("weight_decay", float),
    "alpha": ("alpha", float),
    "folds": ("folds", int),
    "temperature": ("search.temperature", float),
    "n_ops": ("search.n_ops", int),
    "delta": ("search.delta", float),
    "policy_lr": ("search.policy_lr", float),
    "freq_sea": ("search.freq_sea", int),
    "relaxation": ("search.relaxation", str),
    "filter_len": ("region.filter_len", int),
    "thres": ("region.thres", float),
    "stride": ("region.stride", int),
}
_TOGGLES = {
    "diff_loss": "use_diff_loss",
    "info_region": "use_info_region",
    "balance_sampler": "use_balance_sampler",
    "regulation": "use_regulation",
    "scaling": "enable_scaling_transform",
    "prefactor": "search.mixed_prefactor",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, required=True, help="run seed (mandatory)")
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--data", required=True, help="dataset file (.csv or binary) or 'synthetic'")
    p.add_argument("--data-seed", type=int, default=0, help="generator seed when --data synthetic")
    p.add_argument("--fold", type=int, default=0, help="held-out fold index")
    p.add_argument("--out", required=True, help="output directory")
    for flag, (_, typ) in _VALUE_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)
    for flag in _TOGGLES:
        g = p.add_mutually_exclusive_group()
        g.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true", default=None)
        g.add_argument(f"--no-{flag.replace('_', '-')}", dest=flag, action="store_false")


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {"seed": args.seed}
    for flag, (field, _) in _VALUE_FLAGS.items():
        if getattr(args, flag) is not None:
            over[field] = getattr(args, flag)
    for flag, field in _TOGGLES.items():
        if getattr(args, flag) is not None:
            over[field] = getattr(args, flag)
    cfg = with_overrides(cfg, **over)
    cfg.validate()
    return cfg


def _dataset(args):
    if args.data == "synthetic":
        return generate_synthetic(seed=args.data_seed)
    return load_dataset(args.data)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_search(out: Path, res: SearchResult) -> None:
    save_backbone(res.model, out / "search_model.ckpt")
    save_policy_network(res.net, out / "policy_net.ckpt")
    st = res.regulation
    (out / "regulation.json").write_text(json.dumps({
        "alpha": st.alpha, "class_recall": st.class_recall.tolist(), "w_noaug": st.w_noaug.tolist(),
    }, indent=2) + "\n")
    R.write_rows(out / "search_log.csv", ["pass", "policy_loss"],
                 [{"pass": i, "policy_loss": R.fmt(v)} for i, v in enumerate(res.policy_losses)])
    R.write_rows(out / "search_epochs.csv", ["epoch", "train_loss", "search_val_loss"],
                 [{"epoch": i, "train_loss": R.fmt(a), "search_val_loss": R.fmt(b)}
                  for i, (a, b) in enumerate(zip(res.epoch_losses, res.search_val_losses))])


def _load_search(d: Path) -> SearchResult:
    reg = json.loads((d / "regulation.json").read_text())
    state = RegulationState(reg["alpha"], np.array(reg["class_recall"]), np.array(reg["w_noaug"]))
    return SearchResult(load_backbone(d / "search_model.ckpt"), load_policy_network(d / "policy_net.ckpt"), state, [], [], [])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    counts = tuple(int(c) for c in args.counts.split(","))
    ds = generate_synthetic(SyntheticParams(counts=counts), seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        write_csv(out, ds)
    else:
        write_binary(out, ds)
    a, b = split_equal(ds.y, args.seed)
    acc = nearest_centroid_accuracy(ds.subset(a), ds.subset(b))
    print(f"wrote {len(ds)} samples to {out}; oracle nearest-centroid accuracy={acc:.4f}")
    return 0


def cmd_search(args) -> int:
    cfg, ds, out = build_config(args), _dataset(args), _outdir(args)
    train, _ = fold_split(cfg, ds, args.fold)
    res = search_phase(cfg, train)
    _save_search(out, res)
    dump_config(cfg, out / "config.json")
    print("policy_loss=" + ",".join(R.fmt(v) for v in res.policy_losses))
    print("w_noaug=" + ",".join(R.fmt(v) for v in res.regulation.w_noaug))
    return 0


def cmd_train(args) -> int:
    cfg, ds, out = build_config(args), _dataset(args), _outdir(args)
    train, test = fold_split(cfg, ds, args.fold)
    search = _load_search(Path(args.search_dir))
    table = policy_table(cfg, train, search)
    result = train_phase(cfg, train, table)
    save_backbone(result.model, out / "task_model.ckpt")
    R.write_policy_csv(out / "policies.csv", table, cfg.transforms)
    R.write_predictions_csv(out / "predictions_caap.csv", predict(result.model, test))
    R.write_rows(out / "train_epochs.csv", ["epoch", "loss"],
                 [{"epoch": i, "loss": R.fmt(v)} for i, v in enumerate(result.epoch_losses)])
    dump_config(cfg, out / "config.json")
    print(f"wrote {out / 'predictions_caap.csv'}")
    return 0


def cmd_baseline(args) -> int:
    cfg, ds, out = build_config(args), _dataset(args), _outdir(args)
    train, test = fold_split(cfg, ds, args.fold)
    result = run_baseline_noaug(cfg, train) if args.kind == "noaug" else run_baseline_uniform(cfg, train)
    save_backbone(result.model, out / f"{args.kind}_model.ckpt")
    R.write_predictions_csv(out / f"predictions_{args.kind}.csv", predict(result.model, test))
    print(f"wrote {out / f'predictions_{args.kind}.csv'}")
    return 0


def cmd_eval(args) -> int:
    """Score prediction CSVs against a NOAUG prediction CSV."""
    noaug = R.read_predictions_csv(args.noaug)
    k = args.num_classes
    reports = [_pred_report("noaug", noaug, noaug, k)]
    for path in args.preds:
        reports.append(_pred_report(Path(path).stem.removeprefix("predictions_"), R.read_predictions_csv(path), noaug, k))
    out = _outdir(args)
    R.write_metrics_csv(out / "metrics.csv", reports)
    R.write_summary(out / "summary.txt", reports)
    print((out / "summary.txt").read_text(), end="")
    return 0


def _pred_report(method: str, preds: Predictions, noaug: Predictions, k: int) -> RunReport:
    return RunReport(method, 0, {}, [], preds, k, noaug)


def cmd_sweep(args) -> int:
    cfg, ds, out = build_config(args), _dataset(args), _outdir(args)
    train, test = fold_split(cfg, ds, args.fold)
    search = _load_search(Path(args.search_dir)) if args.search_dir else search_phase(cfg, train)
    qs = [float(q) for q in args.percentages.split(",")]
    points = sweep_noaug(cfg, train, test, search, qs, fold=args.fold)
    q_acc, q_gain = sweep_argmax(points)
    R.write_sweep_csv(out / "sweep.csv", points)
    R.sweep_chart(out / "sweep.svg", points, q_acc, q_gain)
    Path(out / "summary.txt").write_text(f"argmax_q_accuracy={q_acc:g}\nargmax_q_swise_gain={q_gain:g}\n")
    dump_config(cfg, out / "config.json")
    print(f"argmax_q_accuracy={q_acc:g} argmax_q_swise_gain={q_gain:g}")
    return 0


def cmd_report(args) -> int:
    """Full comparison (NOAUG, uniform, CAAP) over the requested folds."""
    cfg, ds, out = build_config(args), _dataset(args), _outdir(args)
    folds = [args.fold] if args.fold_only else None
    methods = tuple(args.methods.split(","))
    reports = run_experiment(cfg, ds, folds, methods=methods)
    R.write_run_dir(out, reports)
    dump_config(cfg, out / "config.json")
    print((out / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="caap", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic bias testbed")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("bin", "csv"), default="bin")
    p.add_argument("--counts", default="300,300,300")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("search", help="search phase: task model + policy network + regulation")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("train", help="train phase from a search directory")
    _add_run_flags(p)
    p.add_argument("--search-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("baseline", help="NOAUG or uniform-random-policy baseline")
    _add_run_flags(p)
    p.add_argument("--kind", choices=("noaug", "uniform"), default="noaug")
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("eval", help="metrics from prediction CSVs paired with a NOAUG run")
    p.add_argument("--noaug", required=True)
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep-noaug", help="global NoAug-percentage sweep")
    _add_run_flags(p)
    p.add_argument("--search-dir", help="reuse a saved search; otherwise search first")
    p.add_argument("--percentages", default=",".join(str(q) for q in range(0, 101, 10)))
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="run NOAUG/uniform/CAAP and write metrics.csv, summary.txt, charts")
    _add_run_flags(p)
    p.add_argument("--methods", default="noaug,uniform,caap")
    p.add_argument("--fold-only", action="store_true", help="run only --fold instead of every fold")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
