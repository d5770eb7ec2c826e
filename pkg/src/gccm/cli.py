"""Command-line entry point.

Every command accepts ``--config FILE``, a flat JSON object whose keys are
the option names below (underscored).  Explicit flags override the file,
and the file overrides built-in defaults.  The resolved settings are
written next to the outputs and can be fed back through ``--config``.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .denoiser import CheckpointError, GraphBatch, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .diagnostics import (
    DiagnosticsReport,
    GradcheckFixture,
    probe_heatmap,
    run_gradcheck,
    verify_lemma1,
    verify_lemma2,
    verify_lemma3,
    write_heatmap_csv,
)
from .diffusion import CONTINUOUS, DISCRETE, LabelDiffusion, schedule_for
from .graphs import (
    GRAPH_CLASSIFICATION,
    GRAPH_REGRESSION,
    NODE_CLASSIFICATION,
    SPLITS,
    Dataset,
    DatasetFormatError,
    generate_planted_pattern,
    generate_sbm_cluster,
    generate_triangle_regression,
    is_classification,
    load_dataset,
    save_dataset,
    summarize,
)
from .inference import EPS, X0, prediction_records, predict, write_predictions
from .training import CLI_VARIANTS, PERTURB_KINDS, TrainConfig, TrainingDiverged, score, train, write_metrics_csv

LEMMA2_SIZES = (2, 4, 8, 16)


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    flag: str
    type: Callable | None = None
    default: Any = None
    required: bool = False
    choices: Sequence | None = None
    help: str = ""
    switch: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _splits(text: str) -> list[float]:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("splits need three comma-separated fractions")
    return parts


def _positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


SEED = Opt("--seed", int, 0, help="base random seed")
SPLIT_OPT = Opt("--splits", _splits, [0.6, 0.2, 0.2], help="train,val,test fractions")

GEN_OPTIONS = {
    "sbm": [
        Opt("--graphs", _positive_int, required=True, help="number of graphs"),
        Opt("--nodes", _positive_int, 40, help="nodes per graph"),
        Opt("--classes", _positive_int, 4, help="number of blocks / classes"),
        Opt("--p-in", float, 0.5, help="edge probability inside a block"),
        Opt("--p-out", float, 0.05, help="edge probability across blocks"),
        Opt("--seed-fraction", float, 0.25, help="fraction of nodes whose class is revealed"),
        SPLIT_OPT,
        Opt("--out", str, required=True, help="output JSONL path"),
        SEED,
    ],
    "pattern": [
        Opt("--graphs", _positive_int, required=True),
        Opt("--nodes", _positive_int, 40),
        Opt("--pattern-size", _positive_int, 10),
        Opt("--p-bg", float, 0.1),
        Opt("--p-pattern", float, 0.6),
        SPLIT_OPT,
        Opt("--out", str, required=True),
        SEED,
    ],
    "triangles": [
        Opt("--graphs", _positive_int, required=True),
        Opt("--min-nodes", _positive_int, 8),
        Opt("--max-nodes", _positive_int, 16),
        Opt("--p-edge", float, 0.3),
        SPLIT_OPT,
        Opt("--out", str, required=True),
        SEED,
    ],
}

_TC = TrainConfig()
TRAIN_OPTIONS = [
    Opt("--data", str, required=True, help="dataset JSONL"),
    Opt("--out", str, required=True, help="output directory"),
    Opt("--variant", str, _TC.variant, choices=CLI_VARIANTS),
    Opt("--T", _positive_int, _TC.T, help="diffusion steps"),
    Opt("--alpha", float, _TC.alpha, help="time-decay ratio for t2"),
    Opt("--lambda1", float, _TC.lambda1),
    Opt("--lambda2", float, _TC.lambda2),
    Opt("--tau", float, _TC.tau),
    Opt("--T-per", _positive_int, _TC.T_per, help="perturbation steps"),
    Opt("--perturb-kind", str, _TC.perturb_kind, choices=PERTURB_KINDS),
    Opt("--epochs", int, _TC.epochs),
    Opt("--batch-size", _positive_int, _TC.batch_size),
    Opt("--learning-rate", float, _TC.learning_rate),
    Opt("--n-layers", int, _TC.n_layers),
    Opt("--d-h", _positive_int, _TC.d_h),
    Opt("--d-z", _positive_int, _TC.d_z),
    Opt("--contrastive-nodes", _positive_int, _TC.contrastive_nodes),
    Opt("--val-steps", _positive_int, _TC.val_steps),
    SEED,
]

PREDICT_OPTIONS = [
    Opt("--checkpoint", str, required=True),
    Opt("--data", str, required=True),
    Opt("--split", str, "test", choices=SPLITS),
    Opt("--out", str, required=True, help="output directory"),
    Opt("--iterative", switch=True, default=False, help="reverse diffusion instead of one step"),
    Opt("--steps", int, None, help="reverse steps for --iterative (default T)"),
    Opt("--samples", int, 1, help="independent noise draws to aggregate"),
    SEED,
]

DIAGNOSE_OPTIONS = [
    Opt("--checkpoint", str, required=True),
    Opt("--data", str, required=True),
    Opt("--split", str, "test", choices=SPLITS),
    Opt("--out", str, required=True, help="output directory"),
    Opt("--probe-t", int, None, help="heatmap timestep (default T/2)"),
    Opt("--draws", _positive_int, 20, help="random draws for the shortcut check"),
    SEED,
]

VERIFY_OPTIONS = [
    Opt("--out", str, required=True, help="output directory"),
    Opt("--draws", _positive_int, 100),
    SEED,
]

GRADCHECK_OPTIONS = [
    Opt("--out", str, required=True, help="output directory"),
    Opt("--corrupt", switch=True, default=False, help="perturb analytic gradients (harness self-test)"),
    SEED,
]


def _add_options(p: argparse.ArgumentParser, opts: Sequence[Opt]) -> None:
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of option values")
    for o in opts:
        if o.switch:
            p.add_argument(o.flag, dest=o.dest, action="store_true", default=argparse.SUPPRESS, help=o.help)
        else:
            p.add_argument(o.flag, dest=o.dest, type=o.type, choices=o.choices, default=argparse.SUPPRESS, help=o.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gccm", description="Graph label diffusion with contrastive consistency training.")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen_sub = gen.add_subparsers(dest="generator", required=True)
    for name, opts in GEN_OPTIONS.items():
        _add_options(gen_sub.add_parser(name), opts)
    _add_options(sub.add_parser("train", help="train a denoiser"), TRAIN_OPTIONS)
    _add_options(sub.add_parser("predict", help="predict a dataset split"), PREDICT_OPTIONS)
    _add_options(sub.add_parser("diagnose", help="heatmap and shortcut checks for a checkpoint"), DIAGNOSE_OPTIONS)
    _add_options(sub.add_parser("verify-lemmas", help="run the shortcut-solution checks on fresh fixtures"), VERIFY_OPTIONS)
    _add_options(sub.add_parser("gradcheck", help="finite-difference check of every training loss"), GRADCHECK_OPTIONS)
    return parser


def _options_for(ns: argparse.Namespace) -> tuple[str, list[Opt]]:
    if ns.command == "gen-data":
        return f"gen-data {ns.generator}", GEN_OPTIONS[ns.generator]
    table = {
        "train": TRAIN_OPTIONS,
        "predict": PREDICT_OPTIONS,
        "diagnose": DIAGNOSE_OPTIONS,
        "verify-lemmas": VERIFY_OPTIONS,
        "gradcheck": GRADCHECK_OPTIONS,
    }
    return ns.command, table[ns.command]


def resolve(ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    command, opts = _options_for(ns)
    known = {o.dest: o for o in opts}
    resolved = {o.dest: o.default for o in opts}
    if hasattr(ns, "config"):
        try:
            with open(ns.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        if file_cfg.get("command", command) != command:
            raise UsageError(f"config was written for {file_cfg['command']!r}, not {command!r}")
        for key, value in file_cfg.items():
            if key == "command":
                continue
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for {command}")
            o = known[key]
            if o.choices is not None and value not in o.choices:
                raise UsageError(f"{key}: {value!r} is not one of {list(o.choices)}")
            if value is not None and o.type is not None and not o.switch:
                try:
                    value = o.type(",".join(map(str, value)) if isinstance(value, list) else value)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"{key}: {exc}") from exc
            resolved[key] = value
    for dest in known:
        if hasattr(ns, dest):
            resolved[dest] = getattr(ns, dest)
    missing = [known[d].flag for d in known if known[d].required and resolved[d] is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return {"command": command, **resolved}


def write_config(cfg: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- commands ------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["seed"])
    splits = tuple(cfg["splits"])
    kind = cfg["command"].split()[1]
    try:
        if kind == "sbm":
            ds = generate_sbm_cluster(
                cfg["graphs"], cfg["nodes"], cfg["classes"], cfg["p_in"], cfg["p_out"], cfg["seed_fraction"], rng, splits
            )
        elif kind == "pattern":
            ds = generate_planted_pattern(cfg["graphs"], cfg["nodes"], cfg["pattern_size"], cfg["p_bg"], cfg["p_pattern"], rng, splits)
        else:
            ds = generate_triangle_regression(cfg["graphs"], (cfg["min_nodes"], cfg["max_nodes"]), cfg["p_edge"], rng, splits)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_config(cfg, out.with_name(out.name + ".config.json"))
    print(json.dumps(summarize(ds), sort_keys=True))
    return 0


def train_config_from(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in names})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(cfg: dict) -> int:
    tc = train_config_from(cfg)
    ds = load_dataset(cfg["data"])
    out = _out_dir(cfg)
    write_config(cfg, out / "config.json")
    try:
        state = train(ds, tc)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_metrics_csv(state.history, out / "metrics.csv")
    extra = {"train_config": tc.to_dict(), "best_epoch": state.best_epoch, "best_metric": state.best_metric}
    save_checkpoint(out / "checkpoint.json", state.best_params, state.model_config, extra)
    save_checkpoint(out / "final.json", state.params, state.model_config, {**extra, "epoch": state.epoch})
    print(json.dumps({"steps": state.step, "best_epoch": state.best_epoch, "best_val_metric": state.best_metric}))
    return 0


def _load_split(cfg: dict) -> tuple[Dataset, list]:
    ds = load_dataset(cfg["data"])
    items = ds.split(cfg["split"])
    if not items:
        raise UsageError(f"split {cfg['split']!r} is empty")
    return ds, items


def cmd_predict(cfg: dict) -> int:
    if cfg["steps"] is not None and cfg["steps"] < 1:
        raise UsageError("--steps must be at least 1")
    if cfg["samples"] < 1:
        raise UsageError("--samples must be at least 1")
    params, mc, extra = load_checkpoint(cfg["checkpoint"])
    ds, items = _load_split(cfg)
    if ds.task != mc.task or ds.d_x != mc.d_x or ds.d_k != mc.d_k:
        raise CheckpointError(
            f"checkpoint expects task={mc.task}, d_x={mc.d_x}, d_k={mc.d_k}; dataset has task={ds.task}, d_x={ds.d_x}, d_k={ds.d_k}"
        )
    n_steps = None
    if cfg["iterative"]:
        n_steps = mc.T if cfg["steps"] is None else cfg["steps"]
        if n_steps > mc.T:
            raise UsageError(f"--steps cannot exceed T={mc.T}")
    variant = extra.get("train_config", {}).get("variant")
    param = EPS if variant == "diffusion" and not is_classification(mc.task) else X0
    process = LabelDiffusion.for_task(is_classification(mc.task), mc.T, mc.d_k)
    batch = GraphBatch.from_graphs([inst.graph for inst in items])
    res = predict(params, mc, batch, process, cfg["seed"], cfg["samples"], n_steps, param)
    target = np.concatenate([inst.y for inst in items], axis=0)
    metric_name = "accuracy" if is_classification(mc.task) else "mae"
    value = score(res.y_hat, target, mc.task)
    out = _out_dir(cfg)
    write_config(cfg, out / "config.json")
    write_predictions(prediction_records(res.y_hat, batch, mc.task, res.n_samples, res.n_steps), out / "predictions.json")
    summary = {"metric": metric_name, "value": value, "split": cfg["split"], "n_forward": res.n_forward, "n_samples": res.n_samples, "n_steps": res.n_steps}
    _dump(summary, out / "metrics.json")
    print(f"{metric_name}={value:.6f} split={cfg['split']} forward_passes={res.n_forward}")
    return 0


def _lemma3_kind(select: str, x: np.ndarray) -> str:
    one_hot = bool(np.all((x == 0) | (x == 1)) and np.all(x.sum(axis=1) == 1))
    return DISCRETE if select == DISCRETE and one_hot else CONTINUOUS


def cmd_diagnose(cfg: dict) -> int:
    params, mc, extra = load_checkpoint(cfg["checkpoint"])
    ds, items = _load_split(cfg)
    if ds.task != mc.task or ds.d_x != mc.d_x or ds.d_k != mc.d_k:
        raise CheckpointError("checkpoint and dataset disagree on task or dimensions")
    tc = extra.get("train_config", {})
    batch = GraphBatch.from_graphs([inst.graph for inst in items])
    heat, probe = probe_heatmap(params, mc, batch, items, cfg["seed"], cfg["probe_t"])
    lemma1 = verify_lemma1(params, mc, items[: min(len(items), 16)], tc.get("lambda1", 1.0), tc.get("lambda2", 0.1), cfg["draws"], cfg["seed"])
    lemma2 = [verify_lemma2(n, mc.d_z, tc.get("tau", 0.5), cfg["seed"]) for n in LEMMA2_SIZES]
    T_per = min(tc.get("T_per", 10), mc.T)
    kind = _lemma3_kind(tc.get("perturb_kind", CONTINUOUS), items[0].graph.x)
    lemma3 = [verify_lemma3(params, mc, items[0].graph, T_per, schedule_for(kind, mc.T), np.random.default_rng([cfg["seed"], 3]), kind)]
    report = DiagnosticsReport(
        heat, lemma1, lemma2, lemma3, None,
        {"probe_t": probe.t, "probe_seed": probe.seed, "probe_draws": 1, "split": cfg["split"], "perturb_kind": kind},
    )
    return _finish(report, cfg, heat)


def _finish(report: DiagnosticsReport, cfg: dict, heat: np.ndarray | None = None) -> int:
    out = _out_dir(cfg)
    write_config(cfg, out / "config.json")
    report.write(out / "report.json")
    if heat is not None:
        write_heatmap_csv(heat, out / "heatmap.csv")
    d = report.to_dict()
    for key in ("lemma1", "gradcheck"):
        if d.get(key) is not None:
            print(f"{key}: {'pass' if d[key]['pass'] else 'FAIL'}")
    for key in ("lemma2", "lemma3"):
        for i, r in enumerate(d.get(key) or []):
            print(f"{key}[{i}]: {'pass' if r['pass'] else 'FAIL'}")
    if "contribution_mean" in d["meta"]:
        print(f"contribution_mean={d['meta']['contribution_mean']:.6f}")
    if not report.passed:
        print("one or more checks failed; see report.json", file=sys.stderr)
        return 1
    return 0


def lemma_fixture(seed: int) -> tuple[Dataset, ModelConfig]:
    ds = generate_sbm_cluster(4, 12, 3, 0.6, 0.1, 0.5, np.random.default_rng([seed, 0]))
    mc = ModelConfig(ds.task, ds.d_x, ds.d_k, d_h=16, d_z=16, n_layers=2, T=100)
    return ds, mc


def cmd_verify_lemmas(cfg: dict) -> int:
    seed = cfg["seed"]
    ds, mc = lemma_fixture(seed)
    # W_x and the encoder stay random, so the check covers the whole shortcut set
    random_params = init_params(mc, np.random.default_rng([seed, 1]))
    lemma1 = verify_lemma1(random_params, mc, ds.instances, 1.0, 0.1, cfg["draws"], seed)
    lemma2 = [verify_lemma2(n, mc.d_z, 0.5, seed) for n in LEMMA2_SIZES]
    lemma3 = []
    for k in range(5):
        p = init_params(mc, np.random.default_rng([seed, 10 + k]))
        lemma3.append(verify_lemma3(p, mc, ds.instances[k % len(ds.instances)].graph, 10, schedule_for(CONTINUOUS, mc.T), np.random.default_rng([seed, 20 + k])))
    report = DiagnosticsReport(None, lemma1, lemma2, lemma3, None, {"seed": seed, "fixture": "sbm 4x12, K=3"})
    return _finish(report, cfg)


def cmd_gradcheck(cfg: dict) -> int:
    fx = GradcheckFixture(seed=cfg["seed"])
    gc = run_gradcheck(fx, tasks=(NODE_CLASSIFICATION, GRAPH_CLASSIFICATION, GRAPH_REGRESSION), corrupt=cfg["corrupt"], lambda2_values=(0.0, 0.1))
    report = DiagnosticsReport(gradcheck=gc, meta={"seed": cfg["seed"]})
    return _finish(report, cfg)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "diagnose": cmd_diagnose,
    "verify-lemmas": cmd_verify_lemmas,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(ns)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gccm: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, CheckpointError, TrainingDiverged, OSError) as exc:
        print(f"gccm: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
