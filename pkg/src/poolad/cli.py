"""Command-line surface: build-pool, detect, synth, and eval subcommands.

One command is one batch process. Mutating commands take an exclusive
lock file on the pool directory; frozen-pool detections never write.
Detect reports are JSON; --plot additionally writes the score/threshold
series as CSV and a rendered PNG figure next to it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np
from filelock import FileLock

from . import __version__
from .config import Config
from .data import (AnomalySpec, TimeSeries, gen_base_series, inject_anomaly,
                   load_csv, normalize, save_csv)
from .detect import (auc_pr, identify, range_auc_pr, threshold_epsilon,
                     threshold_mean_std, threshold_percentile, vus_pr)
from .ensemble import ensemble_scores
from .errors import (DataError, DivergenceError, IntegrityError, ParseError,
                     PoolAdError)
from .merge import MergePolicy, merge_round, refresh_meta_after_merge
from .meta import (ExpansionPolicy, MetaModel, MetaStore,
                   append_dataset_rows, expand_pool, match_models, train_meta)
from .model import TrainConfig
from .pool import construct_pool, load_pool, save_pool

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTEGRITY = 4
EXIT_DIVERGENCE = 5

STORE_NAME = os.path.join("meta", "store.csv")


def _train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                       batch_size=cfg.batch_size, mu=cfg.mu, beta=cfg.beta,
                       seed=cfg.seed, stride=cfg.stride)


def _load_config(path: str | None) -> Config:
    return Config.from_file(path) if path else Config()


def _resolver(ref: str) -> TimeSeries | None:
    """Dataset resolver for meta refresh: refs are CSV paths."""
    if not ref or not os.path.exists(ref):
        return None
    try:
        return normalize(load_csv(ref, has_labels=False))[0]
    except PoolAdError:
        return None


def _select_threshold(scores: np.ndarray, cfg: Config) -> float:
    if cfg.threshold_method == "mean_std":
        return threshold_mean_std(scores, cfg.threshold_multiplier)
    if cfg.threshold_method == "epsilon":
        return threshold_epsilon(scores)
    return threshold_percentile(scores, cfg.anomaly_ratio)


def _save_meta_artifacts(pool_dir: str, store: MetaStore,
                         meta: MetaModel | None) -> None:
    meta_dir = os.path.join(pool_dir, "meta")
    os.makedirs(meta_dir, exist_ok=True)
    store.save(os.path.join(pool_dir, STORE_NAME))
    if meta is not None:
        meta.save(meta_dir)


def _load_meta_artifacts(pool_dir: str) -> tuple[MetaStore, MetaModel]:
    store_path = os.path.join(pool_dir, STORE_NAME)
    if not os.path.exists(store_path):
        raise IntegrityError(f"missing meta store {store_path}")
    return MetaStore.load(store_path), MetaModel.load(os.path.join(pool_dir, "meta"))


def cmd_build_pool(args) -> int:
    cfg = _load_config(args.config)
    files = sorted(
        os.path.join(args.data, f) for f in os.listdir(args.data)
        if f.endswith(".csv")
    ) if os.path.isdir(args.data) else []
    if not files:
        print("no datasets", file=sys.stderr)
        return EXIT_DATA
    datasets, refs = [], []
    for path in files:
        ts = load_csv(path, has_labels=False)
        datasets.append(normalize(ts)[0])
        refs.append(os.path.abspath(path))
    tcfg = _train_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    with FileLock(os.path.join(args.out, ".lock")):
        pool = construct_pool(datasets, tcfg, cfg.hidden, cfg.segment_length,
                              dataset_tags=refs)
        store = MetaStore()
        for ts, ref in zip(datasets, refs):
            append_dataset_rows(store, pool, ts, ref, "initial")
        try:
            meta = train_meta(store, seed=cfg.seed)
            pool.manifest["meta_version"] = meta.version
        except DataError as exc:
            warnings.warn(f"meta-model not trained: {exc}")
            meta = None
        save_pool(pool, args.out)
        _save_meta_artifacts(args.out, store, meta)
    print(json.dumps({
        "pool": args.out, "models": pool.model_ids(),
        "store_rows": len(store), "config_hash": cfg.digest(),
    }, sort_keys=True))
    return EXIT_OK


def _render_plot(prefix: str, scores: np.ndarray, threshold: float,
                 ranges: list) -> list[str]:
    """Write the per-point score/threshold series as CSV and a PNG figure."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = prefix + ".csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("t,score,threshold,anomaly\n")
        labels = scores > threshold
        for i, s in enumerate(scores):
            fh.write(f"{i},{s!r},{threshold!r},{int(labels[i])}\n")

    fig, ax = plt.subplots(figsize=(10, 3.2))
    ax.plot(scores, lw=0.8, color="tab:blue", label="ensemble score")
    ax.axhline(threshold, color="tab:red", ls="--", lw=1.0, label="threshold")
    for a, b in ranges:
        ax.axvspan(a - 0.5, b + 0.5, color="tab:red", alpha=0.2)
    ax.set_xlabel("time")
    ax.set_ylabel("anomaly score")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    png_path = prefix + ".png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def cmd_detect(args) -> int:
    cfg = _load_config(args.config)
    frozen = args.frozen_pool
    no_expansion = args.no_expansion or frozen
    no_merging = args.no_merging or frozen

    pool = load_pool(args.pool)
    store, meta = _load_meta_artifacts(args.pool)
    ts = load_csv(args.input, has_labels=args.labels)
    true_labels = ts.labels
    ts, _ = normalize(ts)
    if pool.segment_length != cfg.segment_length:
        cfg.segment_length = pool.segment_length
    stride = pool.stride

    lock_path = os.path.join(args.pool, ".lock")
    lock = FileLock(lock_path) if not frozen else None
    if lock:
        lock.acquire()
    try:
        merge_policy = MergePolicy(cfg.eps_merge, cfg.eps_disscore,
                                   cfg.merge_timing)
        pool_changed = False
        if not no_merging and cfg.merge_timing == "before_test":
            pool, merged = merge_round(pool, merge_policy)
            if merged:
                store, meta = refresh_meta_after_merge(
                    pool, store, meta, _resolver, meta_seed=cfg.seed)
                pool_changed = True

        policy = ExpansionPolicy(cfg.eps_model, cfg.eps_judge_factor)
        subset, decision = match_models(meta, pool, ts, policy)
        expanded = False
        if decision == "create_new" and not no_expansion:
            tcfg = _train_config(cfg)
            pool, meta, store = expand_pool(
                pool, ts, tcfg, meta, store,
                dataset_ref=os.path.abspath(args.input),
                transfer=cfg.transfer, meta_seed=cfg.seed)
            subset = subset + [pool.models[-1]]
            expanded = pool_changed = True
        if not subset:
            warnings.warn("matched subset empty with expansion disabled; "
                          "falling back to the whole pool")
            subset = list(pool.models)

        selected, final, _ = ensemble_scores(subset, ts, cfg.top_k,
                                             cfg.seed, stride)
        threshold = _select_threshold(final, cfg)
        result = identify(final, threshold)

        report = {
            "input": os.path.abspath(args.input),
            "config_hash": cfg.digest(),
            "seed": cfg.seed,
            "pool_models": pool.model_ids(),
            "meta_version": pool.manifest.get("meta_version", 0),
            "decision": decision,
            "expanded": expanded,
            "subset": [m.model_id for m in subset],
            "selected": selected,
            "threshold_method": cfg.threshold_method,
            "scores": [float(s) for s in final],
            **result.to_dict(),
        }
        if args.labels:
            if true_labels is None or true_labels.sum() in (0, len(true_labels)):
                print("degenerate labels", file=sys.stderr)
                return EXIT_DATA
            report["metrics"] = {
                "ts_auc_pr": auc_pr(final, true_labels),
                "range_auc_pr": range_auc_pr(final, true_labels,
                                             cfg.vus_width // 2),
                "vus_pr": vus_pr(final, true_labels, cfg.vus_width),
            }

        if not no_merging and cfg.merge_timing == "after_test":
            pool, merged = merge_round(pool, merge_policy)
            if merged:
                store, meta = refresh_meta_after_merge(
                    pool, store, meta, _resolver, meta_seed=cfg.seed)
                pool_changed = True

        if args.plot:
            report["plot_files"] = _render_plot(args.plot, final,
                                                threshold, result.ranges)

        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")

        if pool_changed and not frozen:
            save_pool(pool, args.pool)
            _save_meta_artifacts(args.pool, store, meta)
    finally:
        if lock:
            lock.release()
    print(json.dumps({"report": args.report,
                      "threshold": report["threshold"],
                      "n_anomalies": report["n_anomalies"]}, sort_keys=True))
    return EXIT_OK


def parse_anomaly_spec(text: str) -> AnomalySpec:
    """Parse 'kind:start:length:magnitude:dim[,dim...]'."""
    parts = text.split(":")
    if len(parts) != 5:
        raise ParseError(f"bad anomaly spec {text!r}; expected "
                         "kind:start:length:magnitude:dims")
    kind, start, length, mag, dims = parts
    try:
        return AnomalySpec(kind, int(start), int(length), float(mag),
                           tuple(int(d) for d in dims.split(",")))
    except ValueError as exc:
        raise ParseError(f"bad anomaly spec {text!r}: {exc}") from exc


def cmd_synth(args) -> int:
    ts = gen_base_series(args.m, args.n, seed=args.seed)
    ts.labels = np.zeros(args.m, dtype=np.int64)
    for spec_text in args.anomalies or []:
        spec = parse_anomaly_spec(spec_text)
        ts = inject_anomaly(ts, spec, args.seed)
    save_csv(ts, args.out)
    print(json.dumps({"out": args.out, "m": args.m, "n": args.n,
                      "n_anomalous_points": int(ts.labels.sum())},
                     sort_keys=True))
    return EXIT_OK


def _read_column(path: str) -> np.ndarray:
    ts = load_csv(path, has_labels=False)
    if ts.n != 1:
        raise ParseError(f"{path}: expected a single data column")
    return ts.values[:, 0]


def cmd_eval(args) -> int:
    scores = _read_column(args.scores)
    labels = _read_column(args.labels).astype(np.int64)
    if labels.sum() in (0, len(labels)):
        print("degenerate labels", file=sys.stderr)
        return EXIT_DATA
    out = {
        "ts_auc_pr": auc_pr(scores, labels),
        "range_auc_pr": range_auc_pr(scores, labels, args.buffer),
        "vus_pr": vus_pr(scores, labels, args.width),
    }
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poolad",
        description="dynamic model-pool anomaly detection for "
                    "multivariate time series",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-pool", help="train the initial model pool")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="directory of training CSVs")
    p.add_argument("--out", required=True, help="pool output directory")
    p.set_defaults(func=cmd_build_pool)

    p = sub.add_parser("detect", help="run detection on one series")
    p.add_argument("--config", default=None)
    p.add_argument("--pool", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--labels", action="store_true",
                   help="input CSV carries a label column; adds metrics")
    p.add_argument("--frozen-pool", action="store_true",
                   help="no expansion, no merging, pool dir untouched")
    p.add_argument("--no-expansion", action="store_true")
    p.add_argument("--no-merging", action="store_true")
    p.add_argument("--plot", default=None, metavar="PREFIX",
                   help="write PREFIX.csv and PREFIX.png score plots")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("synth", help="emit a synthetic labeled series")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=2000)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--anomalies", nargs="*", default=[],
                   metavar="KIND:START:LEN:MAG:DIMS")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a detection against labels")
    p.add_argument("--scores", required=True, help="single-column CSV")
    p.add_argument("--labels", required=True, help="single-column CSV")
    p.add_argument("--buffer", type=int, default=8)
    p.add_argument("--width", type=int, default=16)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
