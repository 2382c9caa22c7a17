"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``ablate``, ``sweep``, ``synth``,
``plot-uplift``.  Every command reads a JSON config file, fills defaults,
echoes the effective config next to its outputs, and embeds a stable
fingerprint of that config in every file it writes.  Rerunning a command
with the same config and seed reproduces numerically identical metric files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import training as T
from .config import AblationFlags, Hyperparams, default_sweep_grid, fingerprint
from .data import (
    SplitSpec,
    SyntheticConfig,
    benchmark_splits,
    from_csv,
    generate_synthetic,
    load_acic,
    load_ihdp,
    load_jobs,
    standardize_splits,
    to_csv,
)
from .errors import ConfigError
from .metrics import OUT_OF_SAMPLE, WITHIN_SAMPLE, uplift_curve

DEFAULT_CONFIG = {
    "dataset": {
        "kind": "synthetic",
        "path": None,
        "replications": [0],
        "standardize": True,
        "synthetic": {},
    },
    "hyper": {},
    "flags": {},
    "split": {"train": 0.63, "validation": 0.27, "test": 0.10, "seed": None},
    "seeds": [0],
    "output_dir": "runs/latest",
    "sweep_grid": None,
}


@dataclass
class RunConfig:
    """Fully default-filled run description; ``fingerprint`` hashes every
    reproducibility-relevant field."""

    dataset_kind: str
    dataset_path: str
    replications: list
    standardize: bool
    synthetic: SyntheticConfig
    hyper: Hyperparams
    flags: AblationFlags
    split: SplitSpec
    split_seed_given: bool
    seeds: list
    output_dir: Path
    sweep_grid: dict
    effective: dict

    @property
    def fingerprint(self):
        payload = {k: v for k, v in self.effective.items() if k != "output_dir"}
        return fingerprint(payload)


def _deep_merge(base, update):
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            merged = dict(out[key])
            merged.update(value)
            out[key] = merged
        else:
            out[key] = value
    return out


def load_config(path, overrides=None):
    """Read a JSON config file, fill defaults, and apply CLI overrides."""
    user = {}
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise ConfigError(f"no config file at {cfg_path}")
        user = json.loads(cfg_path.read_text(encoding="utf-8"))
    cfg = _deep_merge(DEFAULT_CONFIG, user)

    overrides = overrides or {}
    if overrides.get("dataset"):
        cfg["dataset"]["kind"] = overrides["dataset"]
    if overrides.get("data_dir"):
        cfg["dataset"]["path"] = overrides["data_dir"]
    if overrides.get("replications"):
        cfg["dataset"]["replications"] = overrides["replications"]
    if overrides.get("seed") is not None:
        cfg["seeds"] = [overrides["seed"]]
    if overrides.get("out"):
        cfg["output_dir"] = overrides["out"]
    if overrides.get("encoder"):
        cfg["flags"]["encoder_kind"] = overrides["encoder"]
    for name in overrides.get("disable") or []:
        key = {"lor": "use_lor", "il": "use_imbalance", "isw": "use_isw"}.get(name)
        if key is None:
            raise ConfigError(f"--disable accepts lor,il,isw; got {name!r}")
        cfg["flags"][key] = False

    synthetic = SyntheticConfig(**cfg["dataset"]["synthetic"])
    hyper = Hyperparams(**cfg["hyper"])
    flags = AblationFlags(**cfg["flags"])
    split_cfg = dict(cfg["split"])
    split_seed_given = split_cfg.get("seed") is not None
    split = SplitSpec(
        train=split_cfg["train"], validation=split_cfg["validation"],
        test=split_cfg["test"], seed=split_cfg["seed"] if split_seed_given else 0,
    )

    effective = copy.deepcopy(cfg)
    effective["dataset"]["synthetic"] = asdict(synthetic)
    effective["hyper"] = {**asdict(hyper)}
    for key in ("expert_hidden", "tower_hidden", "head_hidden"):
        effective["hyper"][key] = list(effective["hyper"][key])
    effective["flags"] = asdict(flags)

    return RunConfig(
        dataset_kind=cfg["dataset"]["kind"],
        dataset_path=cfg["dataset"]["path"],
        replications=list(cfg["dataset"]["replications"]),
        standardize=bool(cfg["dataset"]["standardize"]),
        synthetic=synthetic, hyper=hyper, flags=flags, split=split,
        split_seed_given=split_seed_given,
        seeds=list(cfg["seeds"]),
        output_dir=Path(cfg["output_dir"]),
        sweep_grid=cfg["sweep_grid"],
        effective=effective,
    )


def load_dataset(kind, path, replication, synthetic=None):
    if kind == "synthetic":
        base = synthetic or SyntheticConfig()
        cfg = SyntheticConfig(**{**asdict(base), "seed": base.seed + replication})
        return generate_synthetic(cfg)
    if kind == "csv":
        return from_csv(path)
    if kind == "ihdp":
        return load_ihdp(path, replication)
    if kind == "jobs":
        return load_jobs(path, replication)
    if kind == "acic":
        return load_acic(path, replication)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _derived_split_seed(config, seed, replication):
    if config.split_seed_given:
        return config.split.seed
    return int(np.random.SeedSequence([seed, replication, 7]).generate_state(1)[0])


def _prepare(config, dataset, seed, replication):
    spec = SplitSpec(train=config.split.train, validation=config.split.validation,
                     test=config.split.test,
                     seed=_derived_split_seed(config, seed, replication))
    train_ds, val_ds, test_ds = benchmark_splits(dataset, spec)
    scaler = None
    if config.standardize:
        train_ds, val_ds, test_ds, scaler = standardize_splits(train_ds, val_ds, test_ds)
    return (train_ds, val_ds, test_ds), scaler, spec


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def _echo_config(config, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(config.effective)
    payload["fingerprint"] = config.fingerprint
    _write_json(out_dir / "config.effective.json", payload)


def _aggregate(reports):
    """Table-style mean/std aggregation over per-run reports."""
    agg = {}
    names = ("pehe", "eps_ate", "eps_att", "policy_risk", "auuc", "qini")
    for name in names:
        values = [r[name] for r in reports if name in r]
        if values:
            agg[name] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
    return agg


def _data_meta(dataset, kind, synthetic=None):
    meta = {"kind": kind, "n": dataset.n, "d": dataset.d,
            "outcome_type": dataset.outcome_type}
    if kind == "synthetic" and synthetic is not None:
        meta["synthetic"] = asdict(synthetic)
    return meta


def cmd_train(args):
    config = load_config(args.config, vars(args))
    out_dir = config.output_dir
    _echo_config(config, out_dir)
    fp = config.fingerprint
    runs = []
    for replication in config.replications:
        dataset = load_dataset(config.dataset_kind, config.dataset_path,
                               replication, config.synthetic)
        for seed in config.seeds:
            splits, scaler, spec = _prepare(config, dataset, seed, replication)
            result = T.train(splits, config.hyper, config.flags, seed)
            result.model.scaler = scaler
            run_dir = out_dir / f"rep{replication}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            data_meta = _data_meta(dataset, config.dataset_kind, config.synthetic)
            extra = {
                "data": data_meta,
                "data_path": config.dataset_path,
                "data_fingerprint": fingerprint(data_meta),
                "split": {"train": spec.train, "validation": spec.validation,
                          "test": spec.test, "seed": spec.seed},
                "standardize": config.standardize,
                "replication": replication,
                "seed": seed,
            }
            T.save_checkpoint(run_dir / "checkpoint.npz", result.model,
                              config.hyper, config.flags, fp, extra)
            final_model = T.build_model_like(config.hyper, config.flags,
                                             result.model.d, result.model.outcome_type,
                                             result.final_params)
            final_model.scaler = scaler
            T.save_checkpoint(run_dir / "checkpoint_final.npz", final_model,
                              config.hyper, config.flags, fp, extra)
            _write_history(run_dir / "history.csv", result.history, fp)
            within_ds = T.concat_datasets(splits[0], splits[1])
            within = T.evaluate_model(result.model, within_ds, WITHIN_SAMPLE)
            out = T.evaluate_model(result.model, splits[2], OUT_OF_SAMPLE)
            runs.append({
                "replication": replication, "seed": seed,
                "within_sample": within.to_dict(),
                "out_of_sample": out.to_dict(),
            })
    payload = {
        "fingerprint": fp,
        "runs": runs,
        "aggregate": {
            "within_sample": _aggregate([r["within_sample"] for r in runs]),
            "out_of_sample": _aggregate([r["out_of_sample"] for r in runs]),
        },
    }
    _write_json(out_dir / "metrics.json", payload)
    print(f"wrote {out_dir / 'metrics.json'}")
    return 0


def _write_history(path, history, fp):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"# fingerprint={fp}\n")
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write("iteration,pred,treat,disc,lor,iw,reg,total\n")
        for i, b in enumerate(history.iterations, start=1):
            fh.write(f"{i}," + ",".join(repr(v) for v in b.as_row()) + "\n")


def cmd_eval(args):
    model, hyper, flags, meta = T.load_checkpoint(args.checkpoint)
    kind = args.dataset or meta.get("data", {}).get("kind")
    path = args.data_dir or meta.get("data_path")
    replication = args.replication if args.replication is not None \
        else meta.get("replication", 0)
    synthetic = None
    if kind == "synthetic" and meta.get("data", {}).get("synthetic"):
        # the stored descriptor holds the base config; load_dataset applies
        # the replication offset to its seed
        synthetic = SyntheticConfig(**meta["data"]["synthetic"])
    dataset = load_dataset(kind, path, replication, synthetic)
    data_meta = _data_meta(dataset, kind, synthetic)
    if fingerprint(data_meta) != meta.get("data_fingerprint"):
        print(f"error: checkpoint/dataset fingerprint mismatch "
              f"(checkpoint {meta.get('data', {})}, dataset {data_meta})",
              file=sys.stderr)
        return 1
    split_meta = meta["split"]
    spec = SplitSpec(train=split_meta["train"], validation=split_meta["validation"],
                     test=split_meta["test"], seed=split_meta["seed"])
    train_ds, val_ds, test_ds = benchmark_splits(dataset, spec)
    if meta.get("standardize") and model.scaler is not None:
        for ds in (train_ds, val_ds, test_ds):
            ds.x = model.scaler.transform(ds.x)
    report = T.evaluate_model(model, test_ds, OUT_OF_SAMPLE)
    out_dir = Path(args.out or "runs/eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "fingerprint": meta.get("fingerprint", ""),
        "runs": [{"replication": replication, "seed": meta.get("seed", 0),
                  "out_of_sample": report.to_dict()}],
        "aggregate": {"out_of_sample": _aggregate([report.to_dict()])},
    }
    _write_json(out_dir / "metrics.json", payload)
    print(f"wrote {out_dir / 'metrics.json'}")
    return 0


_ABLATION_COLUMNS = ("encoder", "use_lor", "use_imbalance", "use_isw", "seed",
                     "scope", "pehe", "eps_ate", "eps_att", "policy_risk",
                     "auuc", "qini")


def cmd_ablate(args):
    config = load_config(args.config, vars(args))
    out_dir = config.output_dir
    _echo_config(config, out_dir)
    fp = config.fingerprint
    replication = config.replications[0]
    dataset = load_dataset(config.dataset_kind, config.dataset_path,
                           replication, config.synthetic)
    rows = []
    for seed in config.seeds:
        splits, _, _ = _prepare(config, dataset, seed, replication)
        rows.extend(T.ablate(splits, config.hyper, seed))

    def csv_row(flags, seed, scope, report):
        rec = report.to_dict()
        return [flags.encoder_kind, flags.use_lor, flags.use_imbalance,
                flags.use_isw, seed, scope] + \
            [rec.get(k, "") for k in ("pehe", "eps_ate", "eps_att",
                                      "policy_risk", "auuc", "qini")]

    table = []
    for row in rows:
        table.append(csv_row(row.flags, row.seed, WITHIN_SAMPLE, row.within))
        table.append(csv_row(row.flags, row.seed, OUT_OF_SAMPLE, row.out))
    # aggregate over seeds per configuration and scope
    agg_rows = []

    def key_of(r):
        return (r.flags.encoder_kind, r.flags.use_lor,
                r.flags.use_imbalance, r.flags.use_isw)
    for key in sorted({key_of(r) for r in rows}):
        members = [r for r in rows if key_of(r) == key]
        for scope, pick in ((WITHIN_SAMPLE, lambda r: r.within),
                            (OUT_OF_SAMPLE, lambda r: r.out)):
            agg = _aggregate([pick(r).to_dict() for r in members])
            agg_rows.append(list(key) + ["mean", scope] +
                            [agg.get(k, {}).get("mean", "")
                             for k in ("pehe", "eps_ate", "eps_att",
                                       "policy_risk", "auuc", "qini")])
    out_path = out_dir / "ablation.csv"
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# fingerprint={fp}\n")
        writer = csv.writer(fh)
        writer.writerow(_ABLATION_COLUMNS)
        writer.writerows(table)
        writer.writerows(agg_rows)
    lines = ["  ".join(str(c) for c in row) for row in [list(_ABLATION_COLUMNS)] + table + agg_rows]
    (out_dir / "ablation.txt").write_text(
        f"# fingerprint={fp}\n" + "\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_sweep(args):
    config = load_config(args.config, vars(args))
    out_dir = config.output_dir
    _echo_config(config, out_dir)
    fp = config.fingerprint
    grid = config.sweep_grid or {"alpha": list(default_sweep_grid()["alpha"])}
    replication = config.replications[0]
    seed = config.seeds[0]
    dataset = load_dataset(config.dataset_kind, config.dataset_path,
                           replication, config.synthetic)
    splits, _, _ = _prepare(config, dataset, seed, replication)
    entries = T.sweep(splits, config.hyper, grid, seed, config.flags)
    hist_dir = out_dir / "sweep_histories"
    hist_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for rank, entry in enumerate(entries):
        name = "_".join(f"{k}={v}" for k, v in sorted(entry.overrides.items()))
        if entry.history is not None:
            _write_history(hist_dir / f"{name}.history.csv", entry.history, fp)
        records.append({"rank": rank, "overrides": entry.overrides,
                        "criterion": entry.criterion if np.isfinite(entry.criterion) else None,
                        "error": entry.error})
    _write_json(out_dir / "sweep.json", {"fingerprint": fp, "results": records})
    print(f"wrote {out_dir / 'sweep.json'}")
    return 0


def cmd_synth(args):
    config = load_config(args.config, vars(args))
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = config.fingerprint
    dataset = generate_synthetic(config.synthetic)
    csv_path = out_dir / "synthetic.csv"
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write(f"# fingerprint={fp}\n")
    _append_canonical_csv(csv_path, dataset)
    sidecar = {
        "fingerprint": fp,
        "n_units": dataset.n,
        "d": dataset.d,
        "seed": config.synthetic.seed,
        "true_ate": float(np.mean(dataset.mu1 - dataset.mu0)),
        "factor_partition": {k: v.tolist() for k, v in dataset.factor_partition.items()},
    }
    _write_json(out_dir / "synthetic.meta.json", sidecar)
    print(f"wrote {csv_path}")
    return 0


def _append_canonical_csv(path, dataset):
    tmp = Path(str(path) + ".tmp")
    to_csv(dataset, tmp)
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(tmp.read_text(encoding="utf-8"))
    tmp.unlink()


def cmd_plot_uplift(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = []
    if args.scores:
        import pandas as pd
        df = pd.read_csv(args.scores, comment="#")
        for col in ("score", "t", "y"):
            if col not in df.columns:
                print(f"error: scores file needs columns score,t,y", file=sys.stderr)
                return 1
        curve = uplift_curve(df["score"].to_numpy(float), df["t"].to_numpy(int),
                             df["y"].to_numpy(float))
        curves.append((Path(args.scores).stem, curve))
    for path in args.curves or []:
        import pandas as pd
        df = pd.read_csv(path, comment="#")
        curve = df.to_numpy(float)
        curves.append((Path(path).stem, curve))
    if not curves or any(len(c) == 0 for _, c in curves):
        print("error: no curve data", file=sys.stderr)
        return 1
    out_dir = Path(args.out or "runs/plot")
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in curves:
        k, values = curve[:, 0], curve[:, 1]
        peak = values.max()
        norm = peak if peak > 0 else np.abs(values).max()
        if norm == 0:
            norm = 1.0
        ax.plot(k / k[-1], values / norm, label=label)
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("proportion of test set")
    ax.set_ylabel("normalized cumulative uplift")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "uplift_curves.png", dpi=150)
    if args.scores:
        with (out_dir / "uplift_curve.csv").open("w", encoding="utf-8") as fh:
            fh.write("k,value\n")
            for k, value in curves[0][1]:
                fh.write(f"{int(k)},{repr(float(value))}\n")
    print(f"wrote {out_dir / 'uplift_curves.png'}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="factorcfr",
        description="Counterfactual regression with softly disentangled factors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="JSON config file")
        p.add_argument("--dataset", choices=("synthetic", "csv", "ihdp", "jobs", "acic"))
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--replications", type=_parse_replications)
        p.add_argument("--disable", type=lambda s: s.split(","),
                       help="comma list of lor,il,isw")
        p.add_argument("--encoder", choices=("hd", "mmoe", "mema"))

    p_train = sub.add_parser("train", help="train and evaluate per replication")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", choices=("synthetic", "csv", "ihdp", "jobs", "acic"))
    p_eval.add_argument("--data-dir", dest="data_dir")
    p_eval.add_argument("--replication", type=int)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run the six-configuration grid")
    add_common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="grid-search loss weights")
    add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset")
    add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_plot = sub.add_parser("plot-uplift", help="plot normalized uplift curves")
    p_plot.add_argument("--scores", help="CSV with score,t,y columns")
    p_plot.add_argument("--curves", nargs="*", help="existing k,value curve CSVs")
    p_plot.add_argument("--out")
    p_plot.set_defaults(func=cmd_plot_uplift)
    return parser


def _parse_replications(text):
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except BrokenPipeError:
        code = 1
    except Exception as exc:  # surface a diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
