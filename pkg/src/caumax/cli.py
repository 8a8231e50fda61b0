"""Command-line pipeline: gen -> train -> select -> evaluate -> report.

Artifacts live under ``<out>/data``, ``<out>/models`` and ``<out>/results``
and each records the hash of the configuration that produced it.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import evaluation as ev
from . import selectors as sel
from .estimator import load_model, save_model
from .graph import load_network, save_network
from .scm import load_dataset, sample_observational, save_dataset
from .utils import CaumaxError, FormatError, ParameterError, atomic_write_text


class ArtifactError(CaumaxError):
    pass


class Store:
    """Paths of one run directory plus the config hash its files must carry."""

    def __init__(self, root, config_hash: str):
        self.root = Path(root)
        self.hash = config_hash

    def path(self, kind: str, name: str) -> Path:
        return self.root / kind / name

    def split(self, seed):
        return self.path("data", f"split_seed{seed}.txt")

    def dataset(self, seed):
        return self.path("data", f"observational_seed{seed}.txt")

    def model(self, seed):
        return self.path("models", f"model_seed{seed}.txt")

    def trace(self, seed):
        return self.path("models", f"trace_seed{seed}.csv")

    def selections(self, method, seed):
        return self.path("results", f"select_{method}_seed{seed}.csv")

    def report(self):
        return self.path("results", "report.csv")

    def require(self, path: Path, made_by: str) -> Path:
        if not path.exists():
            raise ArtifactError(f"missing {path}; run `caumax {made_by}` first")
        return path

    def check(self, path: Path, found: str):
        if found != self.hash:
            raise ArtifactError(f"{path} was written under config hash {found or '(none)'}, "
                                f"current config hash is {self.hash}")


def load_config(args) -> tuple[ev.ExperimentConfig, Path]:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ParameterError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ParameterError(f"{args.config}: top level must be an object")
    out = Path(args.out or raw.pop("out", "runs"))
    raw.pop("out", None)
    if args.seed:
        raw["seeds"] = args.seed
    if args.method:
        raw["methods"] = args.method
    if args.budget:
        raw["budgets"] = args.budget
    if getattr(args, "lam", None):
        raw["lambdas"] = args.lam
    try:
        cfg = ev.ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ParameterError(f"bad config: {exc}") from None
    return cfg, out


def _load_seed(store: Store, seed: int):
    path = store.require(store.split(seed), "gen")
    net, h = load_network(path)
    store.check(path, h)
    path = store.require(store.dataset(seed), "gen")
    params, data, meta = load_dataset(path)
    store.check(path, meta["config_hash"])
    return net, params, data


def _load_model(store: Store, seed: int):
    path = store.require(store.model(seed), "train")
    model, h = load_model(path)
    store.check(path, h)
    return model


def cmd_gen(cfg, store: Store):
    def one(seed):
        raw = ev.load_raw_graph(cfg, seed)
        net = ev.core_periphery_split(raw, cfg.split_p)
        if net.features_A is None:
            net = ev.synthesize_features(net, cfg.d_in, seed)
        params = ev.draw_scm_params(net.d_in, seed, **cfg.scm)
        data = sample_observational(net, params, cfg.n_samples, seed)
        save_network(net, store.split(seed), store.hash)
        save_dataset(store.dataset(seed), store.hash, params, data, store.hash)
        return seed, net
    for seed, net in ev.map_seeds(one, cfg.seeds):
        print(f"seed {seed}: |V_A|={net.n_source} |V_B|={net.n_target} "
              f"|E_AB|={len(net.edges_AB)} -> {store.dataset(seed)}")


def cmd_train(cfg, store: Store):
    def one(seed):
        net, params, data = _load_seed(store, seed)
        model, trace = ev.fit_seed(cfg, seed, net, data)
        save_model(model, store.model(seed), store.hash)
        atomic_write_text(store.trace(seed), trace.to_csv(store.hash))
        return seed, trace
    for seed, trace in ev.map_seeds(one, cfg.seeds):
        print(f"seed {seed}: best val MSE {min(trace.val_loss):.4g} at epoch {trace.best_epoch} "
              f"(mean predictor {trace.baseline_val:.4g}), stopped at {trace.stopped_epoch}")


def cmd_select(cfg, store: Store):
    def one(seed):
        net, params, _ = _load_seed(store, seed)
        need_model = any(m in ev.MODEL_METHODS for m in cfg.methods)
        model = _load_model(store, seed) if need_model else None
        results = ev.select_all(cfg, seed, net, model, params=params)
        for method in cfg.methods:
            rows = [r.csv_row() for r in results if r.method == method]
            ev.write_rows(store.selections(method, seed), rows,
                          sel.CSV_FIELDS + ["config_hash"], store.hash)
        return seed, len(results)
    for seed, count in ev.map_seeds(one, cfg.seeds):
        print(f"seed {seed}: {count} selections")


def _read_selections(store: Store, seed: int) -> list[sel.SelectionResult]:
    out = []
    for path in sorted(store.root.joinpath("results").glob(f"select_*_seed{seed}.csv")):
        for row in ev.read_csv(path):
            store.check(path, row.get("config_hash", ""))
            try:
                subset = [int(i) for i in row["subset"].split(";") if i != ""]
                out.append(sel.SelectionResult(subset, [float(row["J"])], row["method"],
                                               int(row["K"]), float(row["lambda"]),
                                               int(row["seed"]), float(row["wall_ms"])))
            except (KeyError, ValueError) as exc:
                raise FormatError(f"{path}: malformed selection row ({exc})") from None
    return out


def cmd_evaluate(cfg, store: Store):
    def one(seed):
        selections = _read_selections(store, seed)
        if not selections:
            return []
        net, params, _ = _load_seed(store, seed)
        model = None
        if any(r.method in ev.MODEL_METHODS for r in selections):
            model = _load_model(store, seed)
        return ev.evaluate_seed(cfg, seed, net, params, model, selections)
    rows = [r for rows in ev.map_seeds(one, cfg.seeds) for r in rows]
    if not rows:
        raise ArtifactError(f"no selections under {store.root / 'results'}; "
                            f"run `caumax select` first")
    ev.write_rows(store.report(), rows, ev.REPORT_FIELDS, store.hash)
    print(f"{len(rows)} rows -> {store.report()}")


def cmd_report(cfg, store: Store):
    path = store.require(store.report(), "evaluate")
    rows = ev.read_csv(path)
    for row in rows:
        store.check(path, row.get("config_hash", ""))
    agg = ev.aggregate_rows(rows, store.hash)
    ev.write_rows(store.path("results", "aggregate.csv"), agg, ev.AGGREGATE_FIELDS, store.hash)
    for method, (fields, sweep) in ev.lambda_sweep_rows(agg).items():
        ev.write_rows(store.path("results", f"lambda_sweep_{method}.csv"), sweep,
                      fields + ["config_hash"], store.hash)
    width = max(len(a["method"]) for a in agg)
    for a in agg:
        print(f"{a['method']:<{width}}  K={a['K']:<3} lambda={float(a['lambda']):<5g} "
              f"regret={float(a['regret_mean']):.4f} +/- {float(a['regret_se'] or 0):.4f}")


def cmd_selftest(cfg, store: Store):
    from .selftest import run_checks
    failed = 0
    for name, ok, detail in run_checks():
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failed += not ok
    if failed:
        raise RuntimeError(f"{failed} self-test check(s) failed")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "select": cmd_select,
            "evaluate": cmd_evaluate, "report": cmd_report, "selftest": cmd_selftest}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caumax",
                                     description="Cross-group causal influence maximization.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--method", action="append", choices=ev.ALL_METHODS,
                        help="selector (repeatable)")
    common.add_argument("--budget", type=int, action="append", help="budget K (repeatable)")
    common.add_argument("--lambda", dest="lam", type=float, action="append",
                        help="uncertainty penalty (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gen": "split the graph and draw observational data",
             "train": "fit the effect estimator per seed",
             "select": "run selectors and write their subsets",
             "evaluate": "score selections against the oracle",
             "report": "aggregate over seeds and write lambda-sweep tables",
             "selftest": "run the built-in invariant checks"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out = load_config(args)
        COMMANDS[args.command](cfg, Store(out, cfg.config_hash()))
    except CaumaxError as exc:
        print(f"caumax: error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
