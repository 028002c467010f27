"""``metassm`` command line: generate, train, align, eval and replay.

Seeds: ``--seed S`` overrides the config seed.  Generation uses S directly as
the master seed.  Training initializes parameters from ``stream(S, 1)`` and
draws batches and noise from ``derive_seed(S, 2)``; alignment uses
``derive_seed(S, 3)`` and evaluation exports ``stream(S, 4)``.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure,
5 usage error, 6 replay mismatch.
"""
from __future__ import annotations

import argparse
import re
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .dynamics import export_vector_field, make_grid, vector_field_grid
from .errors import ConfigError, ContractError, DimensionError, MetaSSMError, NumericError, UsageError
from .evaluation import (
    EmbeddingDiagnostics, MetricsReport, collect_embeddings, combine_kstep, export_trajectories, forecast,
    interpolation_grid, r2_kstep, r2_reconstruction, write_json, write_kstep_csv, write_scatter_csv,
)
from .inference import EncoderConfig, Encoders, infer_embedding, infer_states
from .ssm import GenerativeModel, ModelConfig, read_in
from .synthdata import derive_seed, expand_config, generate_from_config, load_bundle, preset, stream
from .training import AlignmentJob, TrainConfig, align_few_shot, train_multisession, write_trace

log = logging.getLogger("metassm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6


# small helpers ----------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_version() -> str:
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None


def _section(cfg: dict, key: str, cls, *, allowed_extra=()) -> object:
    d = cfg.get(key, {}) or {}
    if not isinstance(d, dict):
        raise ConfigError("must be an object", key)
    known = {f.name for f in dataclasses.fields(cls)} | set(allowed_extra)
    for k in d:
        if k not in known:
            raise ConfigError("unknown key", f"{key}.{k}")
    if cls is TrainConfig:
        return TrainConfig.from_dict(d, key)
    try:
        return cls(**{k: v for k, v in d.items() if k not in allowed_extra})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), key) from None


def parse_grid(text: str) -> tuple[float, float, int]:
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise UsageError(f"--grid expects lo:hi:n, got {text!r}") from None
    if n < 1 or not hi >= lo:
        raise UsageError(f"--grid needs n >= 1 and hi >= lo, got {text!r}")
    return lo, hi, n


@contextlib.contextmanager
def _thread_cap(n: int | None):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


class RunRecorder:
    """Collects what a RunManifest needs and writes it atomically at the end."""

    def __init__(self, command: str, args: dict, out: Path):
        self.out = out
        self.t0 = time.time()
        self.data = {"command": command, "args": args, "code_version": code_version(),
                     "python": platform.python_version(), "numpy": np.__version__,
                     "inputs": {}, "outputs": {}, "seeds": {}, "config": None, "timings": {}}

    def input(self, name: str, path) -> None:
        self.data["inputs"][name] = str(Path(path).resolve())

    def output(self, path) -> None:
        p = Path(path)
        for f in sorted(p.rglob("*")) if p.is_dir() else [p]:
            if f.is_file() and f.name != "run.json":
                self.data["outputs"][f.relative_to(self.out).as_posix()] = _sha256(f)

    def time(self, label: str, seconds: float) -> None:
        self.data["timings"][label] = round(seconds, 4)

    def write(self) -> Path:
        self.data["timings"]["total"] = round(time.time() - self.t0, 4)
        path = self.out / "run.json"
        atomic_write_bytes(path, (json.dumps(self.data, indent=1, sort_keys=True) + "\n").encode())
        return path


# experiment config --------------------------------------------------------------

def load_experiment(path: str | None, overrides: dict) -> dict:
    """Resolve an experiment config plus CLI overrides into a plain dict snapshot."""
    cfg = read_json(path) if path else {}
    if not isinstance(cfg, dict):
        raise ConfigError("experiment config must be a JSON object")
    for k in cfg:
        if k not in ("seed", "data", "model", "encoders", "train", "align", "eval", "comment"):
            raise ConfigError("unknown key", k)
    cfg = json.loads(json.dumps(cfg))
    for k in ("model", "encoders", "train", "align", "eval", "data"):
        cfg.setdefault(k, {})
    if overrides.get("seed") is not None:
        cfg["seed"] = overrides["seed"]
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("must be a non-negative integer", "seed")
    if overrides.get("variant"):
        cfg["model"]["variant"] = overrides["variant"]
    if overrides.get("objective"):
        cfg["train"]["objective"] = overrides["objective"]
    if overrides.get("particles") is not None:
        cfg["train"]["particles"] = overrides["particles"]
    if overrides.get("steps") is not None:
        cfg[overrides.get("steps_section", "train")]["steps"] = overrides["steps"]
    if str(cfg["train"].get("objective", "dkf")).lower() == "dvbf":
        cfg["encoders"]["state_direction"] = "backward"
    for k, v in (overrides.get("eval") or {}).items():
        if v is not None:
            cfg["eval"][k] = v
    # validate every section eagerly so errors carry a field path
    _section(cfg, "model", ModelConfig)
    _section(cfg, "encoders", EncoderConfig)
    _section(cfg, "train", TrainConfig)
    _section(cfg, "align", TrainConfig)
    for k, v in cfg["eval"].items():
        if k not in ("context", "kstep", "split"):
            raise ConfigError("unknown key", f"eval.{k}")
    return cfg


def _dataset_dirs(cfg: dict, cli_root: str | None) -> list[Path]:
    data = cfg.get("data", {})
    root = cli_root or data.get("root")
    if not root:
        raise UsageError("no dataset root given (use --data or data.root in the config)")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    ids = data.get("ids")
    if ids is None:
        dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    else:
        dirs = [root / i for i in ids]
    if not dirs:
        raise UsageError(f"no datasets under {root}")
    return dirs


def _model_from_config(cfg: dict, bundles) -> tuple[GenerativeModel, Encoders]:
    rng = stream(cfg["seed"], 1)
    model = GenerativeModel.create(_section(cfg, "model", ModelConfig), rng)
    for b in bundles:
        model.register(b.dataset_id, b.d_y, rng)
    enc = Encoders.create(model, _section(cfg, "encoders", EncoderConfig), rng)
    return model, enc


def _eval_settings(cfg: dict, T: int) -> tuple[int, int, str]:
    ev = cfg.get("eval", {})
    context = int(ev.get("context", min(100, T // 2)))
    kstep = int(ev.get("kstep", min(50, T - context)))
    return context, kstep, ev.get("split", "test")


def _dataset_report(model, enc, bundle, dataset_id, context, kstep, split) -> tuple[MetricsReport, object]:
    y = bundle.split(split)
    if len(y) == 0:
        raise UsageError(f"dataset {dataset_id!r} has no {split!r} trials")
    ks = r2_kstep(model, enc, y, dataset_id, context, kstep)
    rep = MetricsReport(dataset_id, r2_reconstruction(model, enc, y, dataset_id), ks.r2, context, len(y))
    return rep, ks


# commands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = read_json(args.config)
    if "preset" in cfg:
        extra = {k: v for k, v in cfg.items() if k not in ("preset", "sigma_w", "seed")}
        cfg = preset(cfg["preset"], cfg.get("sigma_w"), cfg.get("seed", 0), **extra)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out)
    rec = RunRecorder("generate", vars_for_manifest(args), out)
    rec.input("config", args.config)
    rec.data["config"] = cfg
    rec.data["seeds"] = {"master": cfg.get("seed", 0)}
    t = time.time()
    entries = expand_config(cfg)
    bundles = generate_from_config(cfg, out)
    rec.time("generate", time.time() - t)
    print(f"{'dataset':<16} {'generator':<34} {'d_y':>4} {'T':>4}  splits")
    for e, b in zip(entries, bundles):
        splits = "/".join(str(len(v)) for v in b.splits.values())
        print(f"{b.dataset_id:<16} {e['spec'].name:<34} {b.d_y:>4} {b.T:>4}  {splits}")
        rec.output(out / b.dataset_id)
    rec.write()
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_experiment(args.config, {"seed": args.seed, "variant": args.variant, "objective": args.objective,
                                        "particles": args.particles, "steps": args.steps})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecorder("train", vars_for_manifest(args), out)
    dirs = _dataset_dirs(cfg, args.data)
    cfg["data"] = {**cfg["data"], "root": str(dirs[0].parent.resolve()), "ids": [d.name for d in dirs]}
    rec.data["config"] = cfg
    if args.config:
        rec.input("config", args.config)
    bundles = []
    for d in dirs:
        bundles.append(load_bundle(d))
        rec.input(f"dataset:{d.name}", d)
    model, enc = _model_from_config(cfg, bundles)
    tcfg = dataclasses.replace(_section(cfg, "train", TrainConfig), seed=derive_seed(cfg["seed"], 2))
    rec.data["seeds"] = {"master": cfg["seed"], "train": tcfg.seed}
    split = cfg["data"].get("split", "train")
    t = time.time()
    res = train_multisession(model, enc, {b.dataset_id: b.split(split) for b in bundles}, tcfg,
                             trace_path=out / "trace.csv")
    rec.time("train", time.time() - t)
    save_checkpoint(out / "model.ckpt", model, enc, meta={"command": "train", "seed": cfg["seed"],
                                                           "steps": tcfg.steps})
    rec.output(out / "trace.csv")
    rec.output(out / "model.ckpt")
    rec.write()
    if res.trace:
        last = res.trace[-1]
        print(f"trained {tcfg.steps} steps on {len(bundles)} datasets; final total {last['total']:.3f}")
    else:
        print(f"wrote untrained checkpoint for {len(bundles)} datasets")
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = load_experiment(args.config, {"seed": args.seed, "steps": args.steps, "steps_section": "align",
                                        "eval": {"context": args.context, "kstep": args.kstep}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecorder("align", vars_for_manifest(args), out)
    rec.data["config"] = cfg
    rec.input("checkpoint", args.checkpoint)
    rec.input("dataset", args.dataset)
    model, enc, _ = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.dataset)
    ds_id = args.id or bundle.dataset_id
    if ds_id in model.datasets:
        raise UsageError(f"dataset {ds_id!r} is already in the checkpoint registry")
    n_avail = len(bundle.splits.get("train", []))
    if args.ns < 1 or args.ns > n_avail:
        raise UsageError(f"--ns {args.ns} outside 1..{n_avail} available training trials")
    acfg = dataclasses.replace(_section(cfg, "align", TrainConfig), seed=derive_seed(cfg["seed"], 3))
    rec.data["seeds"] = {"master": cfg["seed"], "align": acfg.seed}
    t = time.time()
    align_few_shot(AlignmentJob(model, enc, ds_id, bundle.subset("train", args.ns).split("train")), acfg,
                   trace_path=out / "align_trace.csv")
    rec.time("align", time.time() - t)
    save_checkpoint(out / "aligned.ckpt", model, enc, meta={"command": "align", "dataset": ds_id, "n_s": args.ns})
    context, kstep, split = _eval_settings(cfg, bundle.T)
    report, _ = _dataset_report(model, enc, bundle, ds_id, context, kstep, split)
    report.extra["n_s"] = args.ns
    write_json(out / "metrics.json", report.to_dict())
    for name in ("align_trace.csv", "aligned.ckpt", "metrics.json"):
        rec.output(out / name)
    rec.write()
    print(f"{ds_id}: n_s={args.ns} recon r2 {report.recon_r2:.3f}  k={kstep} r2 {report.kstep_r2[kstep]:.3f}")
    return EXIT_OK


def _field_for(model, enc, bundle, ds_id, grid, split):
    e = infer_embedding(enc.embedding, read_in(model, ds_id, bundle.split(split))).mean.data
    return vector_field_grid(model.dynamics, e if model.dynamics.tag != "shared" else None, grid).data


def cmd_eval(args) -> int:
    if not args.datasets:
        raise UsageError("no datasets to evaluate")
    cfg = load_experiment(args.config, {"seed": args.seed, "eval": {"context": args.context, "kstep": args.kstep}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecorder("eval", vars_for_manifest(args), out)
    rec.data["config"] = cfg
    rec.data["seeds"] = {"master": cfg["seed"]}
    rec.input("checkpoint", args.checkpoint)
    model, enc, _ = load_checkpoint(args.checkpoint)
    exports = {e for part in (args.export or []) for e in part.split(",") if e}
    unknown = exports - {"field", "scatter", "interp", "kcurve"}
    if unknown:
        raise UsageError(f"unknown export kind(s): {sorted(unknown)}")
    bundles = {}
    for d in args.datasets:
        b = load_bundle(d)
        model.get(b.dataset_id)
        bundles[b.dataset_id] = b
        rec.input(f"dataset:{b.dataset_id}", d)
    reports, results = {}, {}
    t = time.time()
    for ds_id, b in bundles.items():
        context, kstep, split = _eval_settings(cfg, b.T)
        reports[ds_id], results[ds_id] = _dataset_report(model, enc, b, ds_id, context, kstep, split)
    combined = combine_kstep(results)
    rec.time("metrics", time.time() - t)
    payload = {"datasets": {k: r.to_dict() for k, r in reports.items()},
               "pooled": {str(k): v for k, v in combined["pooled"].items()},
               "macro": {str(k): v for k, v in combined["macro"].items()}}
    write_json(out / "metrics.json", payload)
    rec.output(out / "metrics.json")
    split = cfg["eval"].get("split", "test")
    if "kcurve" in exports:
        write_kstep_csv(out / "kstep.csv", {k: r.kstep_r2 for k, r in reports.items()})
        rec.output(out / "kstep.csv")
    if "scatter" in exports:
        diag = collect_embeddings(model, enc, {k: b.split(split) for k, b in bundles.items()},
                                  {k: b.spec.key_param if b.spec else float("nan") for k, b in bundles.items()})
        write_scatter_csv(out / "embeddings.csv", diag)
        rec.output(out / "embeddings.csv")
    if "field" in exports:
        if model.d_z != 2:
            raise UsageError("vector-field export needs d_z = 2")
        grid = make_grid(*parse_grid(args.grid))
        for ds_id, b in bundles.items():
            p = out / f"field_{ds_id}.txt"
            export_vector_field(p, grid, _field_for(model, enc, b, ds_id, grid, split))
            rec.output(p)
    if "interp" in exports:
        lo, hi, n = parse_grid(args.interp_grid)
        offsets = np.linspace(lo, hi, n)
        rng = stream(cfg["seed"], 4)
        for ds_id, b in bundles.items():
            y = b.split(split)[:1]
            context = min(_eval_settings(cfg, b.T)[0], y.shape[1])
            ybar = read_in(model, ds_id, y[:, :context])
            e = infer_embedding(enc.embedding, ybar).mean
            z0 = infer_states(enc.state, ybar, e).mean.data[0, -1]
            _, trajs = interpolation_grid(model, e.data, offsets, z0, args.interp_steps, rng)
            rec.output(export_trajectories(out / "interp" / ds_id, trajs)[0].parent)
    rec.write()
    print(f"{'dataset':<16} {'recon r2':>9} {'k':>4} {'k-step r2':>10}")
    for ds_id, r in reports.items():
        k = max(r.kstep_r2)
        print(f"{ds_id:<16} {r.recon_r2:>9.3f} {k:>4} {r.kstep_r2[k]:>10.3f}")
    k = max(combined["pooled"])
    print(f"{'pooled':<16} {'':>9} {k:>4} {combined['pooled'][k]:>10.3f}")
    print(f"{'macro':<16} {'':>9} {k:>4} {combined['macro'][k]:>10.3f}")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run a recorded command into a fresh directory and compare output hashes."""
    manifest = read_json(args.manifest)
    for key in ("command", "args", "outputs", "config"):
        if key not in manifest:
            raise ConfigError("missing key", key)
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="metassm-replay-"))
    with tempfile.TemporaryDirectory() as tmp:
        argv = [manifest["command"]]
        recorded = dict(manifest["args"])
        cfg_path = Path(tmp) / "config.json"
        cfg_path.write_text(json.dumps(manifest["config"]))
        recorded["config"] = str(cfg_path)
        recorded["out"] = str(out)
        for k, v in recorded.items():
            flag = "--" + k.replace("_", "-")
            if v is None or v is False or k in ("command", "threads"):
                continue
            if k in ("datasets", "export"):
                argv += [flag, *map(str, v)]
            elif v is True:
                argv.append(flag)
            else:
                argv += [flag, str(v)]
        code = main(argv)
    if code != EXIT_OK:
        return code
    fresh = json.loads((out / "run.json").read_text())["outputs"]
    diff = sorted(k for k in set(fresh) | set(manifest["outputs"]) if fresh.get(k) != manifest["outputs"].get(k))
    if diff:
        print("replay differs in: " + ", ".join(diff))
        return EXIT_MISMATCH
    print(f"replay reproduced {len(fresh)} output files bit-identically in {out}")
    return EXIT_OK


def vars_for_manifest(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("func",)}
    for k in ("config", "checkpoint", "dataset", "data", "out"):
        if d.get(k):
            d[k] = str(Path(d[k]).resolve())
    if d.get("datasets"):
        d["datasets"] = [str(Path(p).resolve()) for p in d["datasets"]]
    return d


# parser -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        # let range values such as -2:2:41 pass as arguments
        self._negative_number_matcher = re.compile(r"^-[\d.][\d.:]*$")

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metassm", description="Multi-dataset latent dynamics with dynamical embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--threads", type=int, help="cap on BLAS worker threads")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="write synthetic datasets")
    common(g, config_required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="multi-dataset pretraining")
    common(t)
    t.add_argument("--data", help="directory holding dataset folders (overrides data.root)")
    t.add_argument("--variant", help="lowrank | shared | embedding_input | linear_adapter")
    t.add_argument("--objective", help="dkf | vsmc | dvbf")
    t.add_argument("--particles", type=int, help="particles for the vsmc objective")
    t.add_argument("--steps", type=int, help="optimization steps")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("align", help="few-shot alignment of a new dataset")
    common(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True, help="dataset directory")
    a.add_argument("--id", help="dataset id to register (defaults to the bundle id)")
    a.add_argument("--ns", type=int, required=True, help="number of training trials to use")
    a.add_argument("--steps", type=int, help="alignment steps")
    a.add_argument("--kstep", type=int, help="forecast horizon K")
    a.add_argument("--context", type=int, help="forecast context length t")
    a.set_defaults(func=cmd_align)

    e = sub.add_parser("eval", help="metrics and exports")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--datasets", nargs="*", default=[], help="dataset directories")
    e.add_argument("--kstep", type=int, help="forecast horizon K")
    e.add_argument("--context", type=int, help="forecast context length t")
    e.add_argument("--export", action="append", help="field, scatter, interp, kcurve (comma separated)")
    e.add_argument("--grid", default="-2:2:41", help="vector-field grid lo:hi:n")
    e.add_argument("--interp-grid", default="-1:1:3", help="embedding offsets lo:hi:n around each anchor")
    e.add_argument("--interp-steps", type=int, default=100, help="rollout length for interpolation exports")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="re-run a recorded run.json and check outputs")
    r.add_argument("manifest")
    r.add_argument("--out", help="directory for the fresh outputs")
    r.set_defaults(func=cmd_replay)
    return p


def _setup_logging() -> None:
    level = os.environ.get("METASSM_LOG", "WARNING").upper()
    if not logging.getLevelName(level) or not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("choose a command: generate, train, align, eval, replay")
        with _thread_cap(getattr(args, "threads", None)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ContractError, DimensionError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"usage error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except MetaSSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
