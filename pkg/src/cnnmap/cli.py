"""``cnnmap`` command line.

Every experiment command resolves an :class:`ExperimentConfig` (defaults <
``--recipe`` < ``--config`` file < flags), writes ``manifest.json`` into its
output directory and can be replayed with ``--config <dir>/manifest.json``.

Exit codes: 0 success, 1 usage error, 2 ingestion error, 3 training
divergence, 4 internal contract violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .archs import ArchError, count_params, preset
from .datasets import (
    IngestionError,
    RotationError,
    bundle_hash,
    load_7scenes_scene,
    load_7scenes_sequence,
    load_bundle,
    load_cambridge_sequence,
    load_tum_sequence,
    make_leave_one_out,
    save_bundle,
)
from .evaluation import (
    ContractViolation,
    EvalReport,
    build_comparison,
    curriculum_curve,
    evaluate,
    export_trajectory_plot_data,
    write_curve_csv,
)
from .experiment import OUTPUT_ROOT_ENV, ExperimentConfig, load_dataset, output_path, resolve_config
from .inputs import MissingPayloadError
from .network import ShapeError, build_model
from .synthetic import SceneSpec, generate_synthetic_scene
from .train import (
    Samples,
    TrainingDiverged,
    finetune,
    fit_input_config,
    run_curriculum,
    split_bundle,
    sweep,
    train,
)
from .weights import ContainerError, WeightContainer, export_weights, load_container, save_container

log = logging.getLogger("cnnmap")

EXIT_OK, EXIT_USAGE, EXIT_INGESTION, EXIT_DIVERGED, EXIT_CONTRACT = 0, 1, 2, 3, 4
MANIFEST_FORMAT = "cnnmap-experiment/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers -----------------------------------------------------------------------------------

def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _blob_sha256(manifest_path: Path) -> str:
    return hashlib.sha256(manifest_path.with_suffix(".bin").read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig | None, bundle=None, extra=None) -> Path:
    doc = {"format": MANIFEST_FORMAT, "command": command, "version": _version()}
    if cfg is not None:
        doc["config"] = cfg.to_dict()
        doc["arch"] = {"name": cfg.arch, "param_count": count_params(cfg.arch_spec())}
    if bundle is not None:
        doc["data"] = {"scene": bundle.scene, "hash": bundle_hash(bundle),
                       "trajectories": {t.name: {"role": t.role, "frames": len(t)} for t in bundle.trajectories}}
    doc.update(extra or {})
    return _write_json(out / "manifest.json", doc)


def _save_checkpoint(model, out: Path, name: str) -> tuple[str, str]:
    path = export_weights(model, out / "checkpoints" / f"{name}.manifest")
    return str(path.relative_to(out)), _blob_sha256(path)


def _evaluate_tests(model, bundle, out: Path, train_trajs, meta=None) -> dict:
    results = {}
    for test in bundle.by_role("test"):
        rep = evaluate(model, test, meta=meta)
        safe = test.name.replace("/", "_")
        rep.save(out / "reports" / f"{safe}.json")
        export_trajectory_plot_data(rep, train_trajs, test, out / "plot" / safe)
        results[test.name] = rep
        print(f"{test.name}: {rep.summary()}")
    return results


def _config_from_args(args) -> ExperimentConfig:
    hp = {"batch_size": args.batch_size, "learning_rate": args.lr, "weight_decay": args.weight_decay,
          "beta": args.beta, "epochs": args.epochs, "seed": args.seed, "momentum": args.momentum}
    init_std = args.init_std
    if init_std is not None and init_std != "he":
        init_std = float(init_std)
    overrides = {"arch": args.arch, "modality": args.modality, "side": args.side, "init_std": init_std,
                 "scene_scale": args.scene_scale, "out": args.out, "hp": hp}
    if args.data is not None:
        overrides["dataset"] = {"root": str(args.data)}
        if args.family is not None:
            overrides["dataset"]["family"] = args.family
    elif args.family is not None:
        overrides["dataset"] = {"family": args.family}
    if getattr(args, "weights", None) is not None:
        overrides["pretrained"] = str(args.weights)
    if getattr(args, "combos", None) is not None or getattr(args, "sweep_epochs", None) is not None:
        overrides["sweep"] = {"combos": args.combos, "epochs": args.sweep_epochs}
    if getattr(args, "workers", None) is not None:
        overrides.setdefault("sweep", {})["workers"] = args.workers
    if getattr(args, "test_trajectory", None) is not None or getattr(args, "order", None) is not None:
        overrides["curriculum"] = {"test": args.test_trajectory, "order": args.order}
    try:
        cfg = resolve_config(args.recipe, args.config, overrides)
    except (TypeError, ValueError, KeyError, ArchError) as e:
        raise UsageError(str(e)) from e
    if args.data is not None and args.family is None and cfg.dataset["family"] == "synthetic":
        # a directory given for a generated scene is a saved bundle
        cfg.dataset = {"family": "bundle", "root": str(args.data)}
    return cfg


# --- commands ----------------------------------------------------------------------------------

def cmd_validate_dataset(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise IngestionError(f"no such path {path}")
    family = args.family
    trajs = []
    if family == "tum":
        trajs = [load_tum_sequence(path, args.assoc_tolerance)]
    elif family == "7scenes":
        if (path / "TrainSplit.txt").exists():
            trajs = list(load_7scenes_scene(path).trajectories)
        else:
            trajs = [load_7scenes_sequence(path)]
    elif family == "cambridge":
        splits = args.split or [s for s in ("dataset_train.txt", "dataset_test.txt") if (path / s).exists()]
        if not splits:
            raise IngestionError(f"{path}: no dataset_train.txt or dataset_test.txt")
        trajs = [load_cambridge_sequence(path, s) for s in splits]
    else:
        trajs = list(load_bundle(path).trajectories)
    for t in trajs:
        pos = t.positions
        steps = np.linalg.norm(np.diff(pos, axis=0), axis=1) if len(pos) > 1 else np.zeros(1)
        dropped = t.meta.get("dropped", 0)
        print(f"{t.name} [{t.role}]: {len(t)} frames, {dropped} dropped")
        print(f"  position min {np.round(pos.min(0), 3).tolist()} max {np.round(pos.max(0), 3).tolist()}, "
              f"path length {steps.sum():.3f}, largest step {steps.max():.3f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SceneSpec(image_size=args.size, n_trajectories=args.trajectories,
                     frames_per_trajectory=args.frames, n_test=args.n_test)
    bundle = generate_synthetic_scene(spec, args.seed)
    out = output_path(args.out, f"synth-seed{args.seed}")
    save_bundle(bundle, out)
    h = bundle_hash(bundle)
    print(f"{bundle.scene}: {len(bundle.trajectories)} trajectories, diameter {bundle.scene_diameter():.3f} m")
    print(f"hash {h}")
    print(f"written to {out}")
    return EXIT_OK


def _train_common(cfg: ExperimentConfig, command: str) -> int:
    bundle = load_dataset(cfg.dataset)
    train_trajs, val_trajs = split_bundle(bundle)
    out = cfg.output_dir(command)
    arch = cfg.arch_spec()
    _write_manifest(out, command, cfg, bundle, {"status": "running"})
    try:
        if cfg.pretrained:
            container = load_container(cfg.pretrained)
            model, history = finetune(container, arch, bundle, cfg.hp, cfg.input_config())
        else:
            model = build_model(arch, seed=cfg.hp.seed, std=cfg.init_std)
            in_cfg = fit_input_config(train_trajs, cfg.input_config())
            model.input_config = in_cfg
            model, history = train(model, Samples.from_trajectories(train_trajs, in_cfg),
                                   Samples.from_trajectories(val_trajs, in_cfg), cfg.hp)
    except TrainingDiverged as e:
        snap, sha = _save_checkpoint(e.snapshot, out, "last-good")
        _write_json(out / "history.json", e.history.to_dict())
        _write_manifest(out, command, cfg, bundle, {"status": "diverged", "diverged": {
            "epoch": e.epoch, "learning_rate": e.lr}, "checkpoints": {"last-good": {"path": snap, "sha256": sha}}})
        raise
    checkpoints = {}
    for name, m in (("final", model), ("best", history.best_model)):
        path, sha = _save_checkpoint(m, out, name)
        checkpoints[name] = {"path": path, "sha256": sha}
    _write_json(out / "history.json", history.to_dict())
    # without a validation trajectory "best" was picked on the test data, so report the final weights
    selected = "best" if bundle.by_role("validation") else "final"
    reports = _evaluate_tests(history.best_model if selected == "best" else model, bundle, out, train_trajs,
                              {"checkpoint": selected, "best_epoch": history.best_epoch})
    _write_manifest(out, command, cfg, bundle, {
        "status": "ok", "checkpoints": checkpoints, "best_epoch": history.best_epoch, "reported": selected,
        "reports": {k: f"reports/{k.replace('/', '_')}.json" for k in reports}})
    print(f"written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_common(_config_from_args(args), "train")


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.pretrained:
        raise UsageError("finetune needs --weights (or 'pretrained' in the config)")
    return _train_common(cfg, "finetune")


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    bundle = load_dataset(cfg.dataset)
    out = cfg.output_dir("sweep")
    s = cfg.sweep
    try:
        grid = cfg.sweep_grid()
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad sweep grid: {e}") from e
    result = sweep(cfg.arch_spec(), bundle, grid, int(s["combos"]), int(s["epochs"]), cfg.input_config(),
                   seed=cfg.hp.seed, init_std=cfg.init_std, workers=int(s.get("workers", 1)))
    _write_json(out / "sweep.json", result.to_dict())
    _write_manifest(out, "sweep", cfg, bundle, {"status": "ok", "results": "sweep.json"})
    for i, e in enumerate(result.entries):
        print(f"{i + 1:2d}. lr {e.hp.learning_rate:.3g} batch {e.hp.batch_size} wd {e.hp.weight_decay:g} "
              f"beta {e.hp.beta:g}: {e.val_position:.4f} m, {e.val_angle:.2f} deg [{e.status}]")
    print(f"written to {out}")
    return EXIT_OK


def cmd_curriculum(args) -> int:
    cfg = _config_from_args(args)
    bundle = load_dataset(cfg.dataset)
    test_name = cfg.curriculum.get("test")
    if not test_name:
        tests = bundle.by_role("test")
        if not tests:
            raise UsageError("no test trajectory: set curriculum.test or --test-trajectory")
        test_name = tests[-1].name
    try:
        cur = make_leave_one_out(bundle, test_name, cfg.curriculum.get("order"))
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from e
    pretrained = load_container(cfg.pretrained) if cfg.pretrained else None
    out = cfg.output_dir("curriculum")
    results = run_curriculum(cfg.arch_spec(), cur, cfg.hp, cfg.input_config(), cfg.init_std, pretrained)
    stages = []
    for i, rep in results:
        rel = f"stages/stage-{i + 1:02d}.json"
        rep.save(out / rel)
        stages.append(rel)
        print(f"stage {i + 1} ({rep.meta['n_trajectories']} trajectories): {rep.summary()}")
    write_curve_csv(curriculum_curve(results), out / "curve.csv")
    _write_manifest(out, "curriculum", cfg, bundle, {"status": "ok", "test": test_name, "stages": stages,
                                                     "curve": "curve.csv"})
    print(f"written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .weights import import_weights

    model = import_weights(args.weights)
    if args.data is not None:
        spec = {"family": args.family or "bundle", "root": str(args.data)}
        bundle = load_dataset(spec)
    else:
        cfg = resolve_config(args.recipe, args.config)
        bundle = load_dataset(cfg.dataset)
    names = args.trajectory or [t.name for t in bundle.by_role("test")]
    if not names:
        raise UsageError("no test trajectories; pass --trajectory")
    out = output_path(args.out, "eval")
    train_trajs = bundle.by_role("train")
    reports = {}
    for name in names:
        try:
            test = bundle.get(name)
        except KeyError as e:
            raise UsageError(str(e)) from e
        rep = evaluate(model, test, modality=args.modality, raw_angle=args.raw_angle,
                       meta={"weights": str(args.weights)})
        safe = name.replace("/", "_")
        rep.save(out / "reports" / f"{safe}.json")
        export_trajectory_plot_data(rep, train_trajs, test, out / "plot" / safe, render=args.render)
        reports[name] = f"reports/{safe}.json"
        print(f"{name}: {rep.summary()}")
    _write_manifest(out, "eval", None, bundle, {"status": "ok", "weights": str(args.weights),
                                                "weights_sha256": _blob_sha256(Path(args.weights)),
                                                "reports": reports, "raw_angle": args.raw_angle})
    print(f"written to {out}")
    return EXIT_OK


def _tagged(report, run: str):
    report.meta["run"] = run
    return report


def _row_labels(reports) -> dict:
    """Row label per report: ``arch (modality)``, plus the run name where that alone is ambiguous."""
    base = [f"{r.meta.get('arch', '?')} ({r.meta.get('modality', '?')})" for r in reports]
    keys = [(b, r.meta.get("dataset")) for b, r in zip(base, reports)]
    return {id(r): (f"{b} [{r.meta['run']}]" if keys.count(k) > 1 else b)
            for b, k, r in zip(base, keys, reports)}


def _collect_reports(paths):
    reports, curves = [], []
    for p in map(Path, paths):
        if p.is_file():
            reports.append(_tagged(EvalReport.load(p), p.stem))
            continue
        if not p.is_dir():
            raise IngestionError(f"no such report or run directory {p}")
        stage_files = sorted((p / "stages").glob("stage-*.json"))
        if stage_files:
            stage_reps = [EvalReport.load(f) for f in stage_files]
            curves.append((p, [(r.meta.get("stage", i), r) for i, r in enumerate(stage_reps)]))
            reports.append(_tagged(stage_reps[-1], p.name))
        reports.extend(_tagged(EvalReport.load(f), p.name) for f in sorted((p / "reports").glob("*.json")))
    if not reports:
        raise IngestionError("no reports found")
    return reports, curves


def cmd_report(args) -> int:
    reports, curves = _collect_reports(args.runs)
    out = output_path(args.out, "report")
    out.mkdir(parents=True, exist_ok=True)
    labels = _row_labels(reports)
    parts = []
    for metric in ("position", "angle"):
        refs = {} if args.no_references else None
        table = build_comparison(reports, refs, metric, args.columns, lambda r: labels[id(r)])
        parts.append(table.render())
    text = "\n".join(parts)
    (out / "report.md").write_text(text)
    print(text)
    for i, (run, stage_reps) in enumerate(curves):
        name = "curve.csv" if len(curves) == 1 else f"curve-{i + 1}.csv"
        write_curve_csv(curriculum_curve(stage_reps), out / name)
        print(f"curve for {run} written to {out / name}")
    print(f"written to {out}")
    return EXIT_OK


def cmd_convert_weights(args) -> int:
    """Wrap an ``.npz`` of ``<layer>.weight`` / ``<layer>.bias`` arrays (kh x kw x in x out) in a container."""
    try:
        with np.load(args.source) as z:
            arrays = {k: np.asarray(z[k], dtype=np.float32 if z[k].dtype != np.float64 else np.float64)
                      for k in z.files}
    except (OSError, ValueError) as e:
        raise IngestionError(f"cannot read {args.source}: {e}") from e
    meta = {"provenance": {"converted_from": Path(args.source).name}}
    if args.arch:
        meta["arch"] = preset(args.arch, args.in_channels, None, args.head_dim).to_dict()
    if args.channel_means:
        meta["channel_means"] = [float(v) for v in args.channel_means]
    out = save_container(WeightContainer(arrays, meta), args.out)
    print(f"{len(arrays)} arrays written to {out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------------

def _add_experiment_flags(p):
    g = p.add_argument_group("experiment (flags override --config, which overrides --recipe)")
    g.add_argument("--recipe", help="shipped recipe: smoke, smoke-curriculum, full, full-tum")
    g.add_argument("--config", type=Path, help="JSON config file or a previous run's manifest.json")
    g.add_argument("--out", help=f"output directory (relative paths go under ${OUTPUT_ROOT_ENV}, default ./runs)")
    g.add_argument("--data", type=Path, help="dataset root")
    g.add_argument("--family", choices=["synthetic", "bundle", "tum", "7scenes", "cambridge"])
    g.add_argument("--arch")
    g.add_argument("--modality")
    g.add_argument("--side", type=int)
    g.add_argument("--scene-scale", type=float)
    g.add_argument("--init-std", help="Gaussian init std or 'he'")
    h = p.add_argument_group("hyper-parameters")
    h.add_argument("--batch-size", type=int)
    h.add_argument("--lr", type=float)
    h.add_argument("--weight-decay", type=float)
    h.add_argument("--beta", type=float)
    h.add_argument("--epochs", type=int)
    h.add_argument("--momentum", type=float)
    h.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cnnmap", description="Train and evaluate pose-regression convnets as scene maps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate-dataset", help="parse a dataset and print per-sequence statistics")
    p.add_argument("path", type=Path)
    p.add_argument("--family", choices=["tum", "7scenes", "cambridge", "bundle"], required=True)
    p.add_argument("--split", action="append", help="Cambridge split file (repeatable)")
    p.add_argument("--assoc-tolerance", type=float, default=0.02)
    p.set_defaults(func=cmd_validate_dataset)

    p = sub.add_parser("synth", help="generate the synthetic plane scene as a bundle directory")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--trajectories", type=int, default=4)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--n-test", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    for name, func, text in (("train", cmd_train, "train from random initialization"),
                             ("finetune", cmd_finetune, "train starting from a weight container")):
        p = sub.add_parser(name, help=text)
        _add_experiment_flags(p)
        p.add_argument("--weights", type=Path, help="pretrained weight container manifest")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="random search over hyper-parameters")
    _add_experiment_flags(p)
    p.add_argument("--combos", type=int)
    p.add_argument("--sweep-epochs", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("curriculum", help="leave-one-out curriculum: add one trajectory per stage")
    _add_experiment_flags(p)
    p.add_argument("--test-trajectory")
    p.add_argument("--order", nargs="+")
    p.add_argument("--weights", type=Path, help="optional pretrained container for every stage")
    p.set_defaults(func=cmd_curriculum)

    p = sub.add_parser("eval", help="evaluate a weight container on test trajectories")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset root (default: the dataset of --recipe/--config)")
    p.add_argument("--family", choices=["bundle", "tum", "7scenes", "cambridge"])
    p.add_argument("--recipe")
    p.add_argument("--config", type=Path)
    p.add_argument("--trajectory", action="append")
    p.add_argument("--modality")
    p.add_argument("--raw-angle", action="store_true", help="sign-sensitive angle metric")
    p.add_argument("--render", action="store_true", help="also draw trajectories.png (needs matplotlib)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="comparison tables and curriculum curves from runs or report files")
    p.add_argument("runs", nargs="+")
    p.add_argument("--columns", nargs="+")
    p.add_argument("--no-references", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("convert-weights", help="wrap an .npz of named arrays in a weight container")
    p.add_argument("source", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--arch")
    p.add_argument("--in-channels", type=int, default=3)
    p.add_argument("--head-dim", type=int, default=1000)
    p.add_argument("--channel-means", type=float, nargs="+")
    p.set_defaults(func=cmd_convert_weights)
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, str(e))
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, str(e))
    except (IngestionError, MissingPayloadError, ContainerError, RotationError) as e:
        return _fail("ingestion", EXIT_INGESTION, str(e))
    except TrainingDiverged as e:
        return _fail("diverged", EXIT_DIVERGED, str(e))
    except (ContractViolation, ShapeError) as e:
        return _fail("contract", EXIT_CONTRACT, str(e))
    except ValueError as e:
        return _fail("usage", EXIT_USAGE, str(e))
    except Exception as e:  # anything else is a bug; report it in the same structured form
        log.debug("internal error", exc_info=True)
        return _fail("internal", EXIT_CONTRACT, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
