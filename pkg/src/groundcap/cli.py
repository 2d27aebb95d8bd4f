"""Experiment orchestration commands.

Subcommands: generate-data, train (matcher | captioner-xe | captioner-scst),
evaluate, sweep-lambda1, export-attention. Every invocation owns one run
directory, guarded by a lock file, and leaves a manifest.json recording the
config hash and the hashes of every artifact it wrote. Exit codes: 0 success,
1 usage, 2 missing prerequisite, 3 runtime failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .data import Dataset, SyntheticConfig, generate_dataset, load_dataset, save_dataset
from .trainer import (
    BEST_CKPT,
    FINAL_CKPT,
    ExperimentConfig,
    checkpoint_meta,
    config_from_dict,
    config_to_dict,
    evaluate_split,
    load_captioner_checkpoint,
    load_matcher_checkpoint,
    matcher_dumps,
    precompute_teacher_attention,
    teacher_forced_dumps,
    train_matcher,
    train_stage1,
    train_stage2_scst,
    write_jsonl,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEPENDENCY = 2
EXIT_RUNTIME = 3

RUNS_ROOT_ENV = "GROUNDCAP_RUNS_ROOT"
MANIFEST_EXCLUDE = {"manifest.json", ".lock"}


class UsageError(Exception):
    """Bad arguments or malformed configuration."""


class DependencyError(Exception):
    """A prerequisite artifact (dataset or upstream checkpoint) is missing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); route to exit code 1
        raise UsageError(message)


# -- config files ---------------------------------------------------------------


def load_json_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {p} must hold a JSON object")
    return data


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value pairs; values parse as JSON, else raw strings."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set needs dotted.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {part} is not a config section")
        node[parts[-1]] = value
    return data


def experiment_config(args) -> tuple[ExperimentConfig, dict]:
    data = apply_overrides(load_json_file(args.config), args.overrides)
    try:
        return config_from_dict(data), data
    except ValueError as exc:
        raise UsageError(f"bad experiment config: {exc}") from exc


def config_hash(data: dict) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# -- run directories --------------------------------------------------------------


def runs_root(args) -> Path:
    if args.runs_root:
        return Path(args.runs_root)
    if os.environ.get(RUNS_ROOT_ENV):
        return Path(os.environ[RUNS_ROOT_ENV])
    return Path("runs")


class RunLock:
    """Exclusive per-directory lock; concurrent runs must use distinct dirs."""

    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.path = run_dir / ".lock"

    def __enter__(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run dir {self.run_dir} is locked by another invocation "
                f"(remove {self.path} if stale)"
            ) from None
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)
        return False


def artifact_hashes(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_dir() or path.name in MANIFEST_EXCLUDE:
            continue
        rel = path.relative_to(root).as_posix()
        out[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def write_manifest(
    root: Path,
    name: str,
    subcommand: str,
    cfg_data: dict,
    inputs: dict[str, str],
    started_at: str,
) -> None:
    manifest = {
        "run_name": name,
        "subcommand": subcommand,
        "config_hash": config_hash(cfg_data),
        "inputs": inputs,
        "outputs": artifact_hashes(root),
        "started_at": started_at,
        "ended_at": _now(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _require_dataset(path: str | Path) -> Dataset:
    p = Path(path)
    if not (p / "gen_config.json").exists():
        raise DependencyError(
            f"dataset not found at {p}; run `groundcap generate-data` first"
        )
    return load_dataset(p)


# -- subcommands -------------------------------------------------------------------


def cmd_generate_data(args) -> None:
    data = apply_overrides(load_json_file(args.config), args.overrides)
    try:
        cfg = SyntheticConfig(**data)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad dataset config: {exc}") from exc
    started = _now()
    out = Path(args.out)
    dataset = generate_dataset(cfg)
    save_dataset(dataset, out)
    write_manifest(out, out.name, "generate-data", data, {"config": str(args.config)}, started)
    print(out)


def _resolve_teacher_store(cfg: ExperimentConfig, dataset: Dataset):
    ckpt = cfg.stage1.teacher_ckpt
    if not ckpt:
        raise DependencyError(
            "distillation needs stage1.teacher_ckpt pointing at a matcher checkpoint; "
            "train the matcher stage first"
        )
    path = Path(ckpt)
    if not path.exists():
        raise DependencyError(
            f"matcher checkpoint {path} not found; train the matcher stage first"
        )
    try:
        matcher = load_matcher_checkpoint(path, dataset)
    except ValueError as exc:
        raise DependencyError(str(exc)) from exc
    want_pos = cfg.stage1.teacher == "pos-scan"
    if matcher.cfg.pos_restricted != want_pos:
        have = "pos-scan" if matcher.cfg.pos_restricted else "scan"
        raise DependencyError(
            f"teacher flavor mismatch: stage1.teacher={cfg.stage1.teacher} but "
            f"{path} holds a {have} matcher"
        )
    return precompute_teacher_attention(matcher, dataset, "train")


def _check_reward_prereqs(cfg: ExperimentConfig) -> None:
    if cfg.reward.matcher == "none":
        return
    ckpt = cfg.reward.matcher_ckpt
    if not ckpt:
        raise DependencyError(
            "matcher-based reward needs reward.matcher_ckpt; train the matcher stage first"
        )
    path = Path(ckpt)
    if not path.exists():
        raise DependencyError(
            f"matcher checkpoint {path} not found; train the matcher stage first"
        )
    meta = checkpoint_meta(path)
    if meta.get("stage") != "matcher":
        raise DependencyError(f"{path} is a {meta.get('stage')!r} checkpoint, not a matcher")
    have_pos = bool(meta["config"]["matcher"]["pos_restricted"])
    want_pos = cfg.reward.matcher == "pos-scan"
    if have_pos != want_pos:
        have = "pos-scan" if have_pos else "scan"
        raise DependencyError(
            f"reward matcher mismatch: reward.matcher={cfg.reward.matcher} but "
            f"{path} holds a {have} matcher"
        )


def cmd_train(args) -> None:
    cfg, cfg_data = experiment_config(args)
    dataset = _require_dataset(cfg.dataset_dir)
    root = runs_root(args)
    name = args.name or args.stage
    run_dir = root / name
    started = _now()
    inputs = {"config": str(args.config), "dataset": cfg.dataset_dir}
    with RunLock(run_dir):
        (run_dir / "config.json").write_text(
            json.dumps(cfg_data, sort_keys=True, indent=2) + "\n"
        )
        resume_from = None
        if args.resume and (run_dir / FINAL_CKPT).exists():
            resume_from = run_dir / FINAL_CKPT
        if args.stage == "matcher":
            train_matcher(dataset, cfg, run_dir, resume_from=resume_from)
        elif args.stage == "captioner-xe":
            store = None
            if cfg.stage1.supervision == "distill" and cfg.stage1.lambda1 != 0.0:
                store = _resolve_teacher_store(cfg, dataset)
                inputs["teacher_ckpt"] = cfg.stage1.teacher_ckpt
            train_stage1(dataset, cfg, run_dir, teacher_store=store, resume_from=resume_from)
        else:  # captioner-scst
            if not args.init_ckpt:
                raise DependencyError(
                    "captioner-scst needs --init-ckpt pointing at a captioner-xe checkpoint; "
                    "train the captioner-xe stage first"
                )
            init = Path(args.init_ckpt)
            if not init.exists():
                raise DependencyError(
                    f"checkpoint {init} not found; train the captioner-xe stage first"
                )
            _check_reward_prereqs(cfg)
            inputs["init_ckpt"] = str(init)
            if cfg.reward.matcher_ckpt:
                inputs["matcher_ckpt"] = cfg.reward.matcher_ckpt
            train_stage2_scst(dataset, cfg, run_dir, init, resume_from=resume_from)
        write_manifest(run_dir, name, f"train {args.stage}", cfg_data, inputs, started)
    print(run_dir)


def _captioner_run(args) -> tuple[Path, dict]:
    run_dir = Path(args.run)
    ckpt = run_dir / FINAL_CKPT
    if not ckpt.exists():
        raise DependencyError(f"no checkpoint at {ckpt}; train a captioner stage first")
    meta = checkpoint_meta(ckpt)
    if meta.get("stage") not in ("captioner-xe", "captioner-scst"):
        raise UsageError(
            f"{run_dir} holds a {meta.get('stage')!r} run; evaluate needs a captioner run"
        )
    return run_dir, meta


def cmd_evaluate(args) -> None:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    if args.beam > 1 and not args.skip_grounding:
        raise UsageError(
            "grounding metrics need one attention row per generated token, which beam "
            "search does not produce; use --beam 1 or pass --skip-grounding"
        )
    run_dir, meta = _captioner_run(args)
    cfg = config_from_dict(meta["config"])
    dataset = _require_dataset(args.data or cfg.dataset_dir)
    if args.split not in dataset.scenes:
        raise UsageError(f"unknown split {args.split!r}")
    started = _now()
    model = load_captioner_checkpoint(run_dir / FINAL_CKPT, dataset)
    with RunLock(run_dir):
        report = evaluate_split(model, dataset, args.split, run_dir, beam_size=args.beam)
        eval_dir = run_dir / f"eval-{args.split}"
        write_manifest(
            eval_dir,
            f"{run_dir.name}/eval-{args.split}",
            "evaluate",
            {"run": str(run_dir), "split": args.split, "beam": args.beam},
            {"checkpoint": str(run_dir / FINAL_CKPT)},
            started,
        )
    print(json.dumps(report, sort_keys=True))


def cmd_sweep_lambda1(args) -> None:
    import csv

    cfg, cfg_data = experiment_config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --values list: {exc}") from exc
    if not values:
        raise UsageError("--values must list at least one lambda1")
    dataset = _require_dataset(cfg.dataset_dir)
    store = None
    if cfg.stage1.supervision == "distill" and any(v != 0.0 for v in values):
        store = _resolve_teacher_store(cfg, dataset)
    root = runs_root(args)
    name = args.name or "sweep-lambda1"
    sweep_dir = root / name
    started = _now()
    rows = []
    with RunLock(sweep_dir):
        for value in values:
            sub_cfg = config_from_dict(copy.deepcopy(config_to_dict(cfg)))
            sub_cfg.stage1.lambda1 = value
            sub_dir = sweep_dir / f"lambda1-{value:g}"
            row = {"lambda1": f"{value:g}", "B4": "", "C": "", "S": "",
                   "F1_all": "", "F1_loc": "", "status": "ok"}
            try:
                needs_teacher = sub_cfg.stage1.supervision == "distill" and value != 0.0
                model = train_stage1(
                    dataset, sub_cfg, sub_dir, teacher_store=store if needs_teacher else None
                )
                report = evaluate_split(model, dataset, args.split, sub_dir, beam_size=1)
                row.update(
                    B4=report["B4"],
                    C=report["C"],
                    S="",
                    F1_all=report["F1_all"],
                    F1_loc=report["F1_loc"],
                )
            except Exception as exc:  # record and keep sweeping
                row["status"] = f"error: {exc}"
            rows.append(row)
        with (sweep_dir / "sweep.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["lambda1", "B4", "C", "S", "F1_all", "F1_loc", "status"]
            )
            writer.writeheader()
            writer.writerows(rows)
        write_manifest(
            sweep_dir,
            name,
            "sweep-lambda1",
            cfg_data,
            {"config": str(args.config), "values": args.values},
            started,
        )
    print(sweep_dir / "sweep.csv")


def cmd_export_attention(args) -> None:
    run_dir = Path(args.run)
    if args.model == "matcher":
        ckpt = run_dir / BEST_CKPT
        if not ckpt.exists():
            raise DependencyError(f"no checkpoint at {ckpt}; train the matcher stage first")
        meta = checkpoint_meta(ckpt)
        if meta.get("stage") != "matcher":
            raise UsageError(f"{run_dir} holds a {meta.get('stage')!r} run, not a matcher")
        cfg = config_from_dict(meta["config"])
        dataset = _require_dataset(args.data or cfg.dataset_dir)
        if args.split not in dataset.scenes:
            raise UsageError(f"unknown split {args.split!r}")
        model = load_matcher_checkpoint(ckpt, dataset)
        dumps = matcher_dumps(model, dataset, args.split)
    else:  # captioner: decoder attention under teacher forcing
        run_dir, meta = _captioner_run(args)
        cfg = config_from_dict(meta["config"])
        dataset = _require_dataset(args.data or cfg.dataset_dir)
        if args.split not in dataset.scenes:
            raise UsageError(f"unknown split {args.split!r}")
        model = load_captioner_checkpoint(run_dir / FINAL_CKPT, dataset)
        dumps = teacher_forced_dumps(model, dataset, args.split)
    out = Path(args.out) if args.out else run_dir / f"attention-{args.model}-{args.split}.jsonl"
    write_jsonl(out, dumps)
    print(out)


# -- entry point ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="groundcap", description=__doc__)
    parser.add_argument("--runs-root", default=None, help=f"run directory root (or ${RUNS_ROOT_ENV})")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("generate-data", help="build and save a synthetic dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--set", dest="overrides", action="append", default=[],
                     help="dotted.key=value config override")
    gen.set_defaults(func=cmd_generate_data)

    train = sub.add_parser("train", help="run one training stage")
    train.add_argument("stage", choices=["matcher", "captioner-xe", "captioner-scst"])
    train.add_argument("--config", required=True)
    train.add_argument("--name", default=None, help="run name (default: stage name)")
    train.add_argument("--init-ckpt", default=None,
                       help="captioner-scst: stage-1 checkpoint to start from")
    train.add_argument("--resume", action="store_true",
                       help="continue from this run's ckpt-final.bin if present")
    train.add_argument("--set", dest="overrides", action="append", default=[])
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="decode a split and write metric reports")
    ev.add_argument("run", help="captioner run directory")
    ev.add_argument("--split", default="val")
    ev.add_argument("--beam", type=int, default=1)
    ev.add_argument("--skip-grounding", action="store_true",
                    help="allow beam > 1 by dropping the F1 grounding metrics")
    ev.add_argument("--data", default=None, help="override the dataset directory")
    ev.set_defaults(func=cmd_evaluate)

    sweep = sub.add_parser("sweep-lambda1", help="stage-1 sweep over attention weights")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--values", required=True, help="comma-separated lambda1 list")
    sweep.add_argument("--name", default=None)
    sweep.add_argument("--split", default="val")
    sweep.add_argument("--set", dest="overrides", action="append", default=[])
    sweep.set_defaults(func=cmd_sweep_lambda1)

    exp = sub.add_parser("export-attention", help="dump attention matrices as JSONL")
    exp.add_argument("run", help="run directory")
    exp.add_argument("--model", required=True, choices=["matcher", "captioner"])
    exp.add_argument("--split", default="val")
    exp.add_argument("--out", default=None)
    exp.add_argument("--data", default=None, help="override the dataset directory")
    exp.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("a subcommand is required (see --help)")
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
