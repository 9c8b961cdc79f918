"""Relocalisation error reports, comparison tables and plot data."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .pose import pose_errors, quat_normalize

PLOT_COLORS = {"train": "red", "test": "green", "predicted": "blue"}


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameError:
    frame_id: str
    position_error: float
    angle_error: float
    predicted: tuple  # raw network output, quaternion not normalized

    @property
    def predicted_pose(self) -> np.ndarray:
        p = np.asarray(self.predicted, dtype=float)
        return np.concatenate([p[:3], quat_normalize(p[3:])])


def mean_std(values) -> tuple:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


@dataclass
class EvalReport:
    """Per-frame errors plus mean and population std of position (m) and angle (deg)."""

    frames: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.position_mean, self.position_std = mean_std([f.position_error for f in self.frames])
        self.angle_mean, self.angle_std = mean_std([f.angle_error for f in self.frames])

    def __len__(self):
        return len(self.frames)

    @property
    def position_errors(self) -> np.ndarray:
        return np.array([f.position_error for f in self.frames])

    @property
    def angle_errors(self) -> np.ndarray:
        return np.array([f.angle_error for f in self.frames])

    @property
    def predicted(self) -> np.ndarray:
        return np.array([f.predicted for f in self.frames], dtype=float).reshape(-1, 7)

    def cell(self, metric: str) -> tuple:
        if metric == "position":
            return self.position_mean, self.position_std
        if metric == "angle":
            return self.angle_mean, self.angle_std
        raise ValueError(f"metric must be 'position' or 'angle', got {metric!r}")

    def summary(self) -> str:
        return (f"position {self.position_mean:.3f} ± {self.position_std:.3f} m, "
                f"angle {self.angle_mean:.2f} ± {self.angle_std:.2f} deg ({len(self)} frames)")

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "aggregates": {"position_mean": self.position_mean, "position_std": self.position_std,
                           "angle_mean": self.angle_mean, "angle_std": self.angle_std,
                           "std": "population"},
            "frames": [{"frame_id": f.frame_id, "position_error": f.position_error,
                        "angle_error": f.angle_error, "predicted": list(f.predicted)} for f in self.frames],
        }

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        frames = [FrameError(f["frame_id"], float(f["position_error"]), float(f["angle_error"]),
                             tuple(float(v) for v in f["predicted"])) for f in d["frames"]]
        return cls(frames, d.get("meta", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_predictions(pred, truth, frame_ids, meta=None, raw_angle: bool = False) -> EvalReport:
    pred = np.asarray(pred, dtype=float).reshape(-1, 7)
    e_p, e_a = pose_errors(pred, truth, raw=raw_angle)
    frames = [FrameError(str(fid), float(p), float(a), tuple(float(v) for v in row))
              for fid, p, a, row in zip(frame_ids, e_p, e_a, pred)]
    meta = dict(meta or {})
    meta.setdefault("angle_metric", "raw" if raw_angle else "abs")
    return EvalReport(frames, meta)


def evaluate(model, test, modality=None, meta=None, raw_angle: bool = False) -> EvalReport:
    """Run ``model`` on every frame of the ``test`` trajectory and score it.

    Inputs are rebuilt with the model's recorded input configuration.
    """
    from .archs import count_params
    from .inputs import InputConfig, Modality, stack_inputs
    from .network import predict

    if len(test.frames) == 0:
        raise ValueError("empty test trajectory")
    cfg = model.input_config
    if cfg is None:
        if modality is None:
            raise ValueError("model has no input configuration; pass a modality")
        cfg = InputConfig(modality, model.arch.input_side)
    if modality is not None and Modality.parse(modality) is not cfg.modality:
        raise ContractViolation(f"model was trained on {cfg.modality.value!r}, "
                                f"asked to evaluate {Modality.parse(modality).value!r}")
    if cfg.modality.channels != model.arch.in_channels:
        raise ContractViolation(f"{cfg.modality.value!r} has {cfg.modality.channels} channels, "
                                f"{model.arch.name} expects {model.arch.in_channels}")
    x, truth, ids = stack_inputs(test.frames, cfg, test.intrinsics)
    info = {"arch": model.arch.name, "modality": cfg.modality.value, "dataset": test.name,
            "param_count": count_params(model.arch)}
    info.update(meta or {})
    return evaluate_predictions(predict(model, x), truth, ids, info, raw_angle)


# --- comparison tables -------------------------------------------------------------------

def load_references() -> dict:
    return json.loads(resources.files("cnnmap").joinpath("data/references.json").read_text())


@dataclass
class ComparisonTable:
    metric: str
    columns: list
    rows: dict  # row name -> {column: (mean, std)}
    references: dict  # row name -> {column: value or None}

    def value(self, row: str, column: str):
        if row in self.rows:
            return self.rows[row].get(column)
        return self.references[row].get(column)

    def render(self, digits: int | None = None) -> str:
        """Markdown table; computed cells as ``mean ± std``, reference rows in italics, NA when absent."""
        if digits is None:
            digits = 3 if self.metric == "position" else 2
        unit = "m" if self.metric == "position" else "deg"
        lines = [f"| {self.metric} [{unit}] | " + " | ".join(self.columns) + " |",
                 "|" + "---|" * (len(self.columns) + 1)]
        for name, cells in self.rows.items():
            out = []
            for c in self.columns:
                v = cells.get(c)
                out.append("NA" if v is None else f"{v[0]:.{digits}f} ± {v[1]:.{digits}f}")
            lines.append(f"| {name} | " + " | ".join(out) + " |")
        for name, cells in self.references.items():
            out = ["NA" if cells.get(c) is None else f"*{cells[c]:g}*" for c in self.columns]
            lines.append(f"| *{name}* | " + " | ".join(out) + " |")
        return "\n".join(lines) + "\n"


def build_comparison(reports, references=None, metric: str = "position", columns=None,
                     row_label=None) -> ComparisonTable:
    """Architectures x datasets table from reports, plus external reference rows.

    ``references`` maps row name to ``{dataset: value}``; by default the
    shipped literature values for ``metric`` are used. ``row_label(report)``
    names the row; the default is the report's architecture.
    """
    if references is None:
        references = load_references()[metric]
    if row_label is None:
        row_label = lambda r: r.meta.get("arch", "?")  # noqa: E731
    rows: dict = {}
    seen = []
    for r in reports:
        arch, ds = row_label(r), r.meta.get("dataset", "?")
        row = rows.setdefault(arch, {})
        if ds in row:
            raise ContractViolation(f"duplicate report for ({arch}, {ds})")
        row[ds] = r.cell(metric)
        if ds not in seen:
            seen.append(ds)
    return ComparisonTable(metric, list(columns) if columns else seen, rows, dict(references))


# --- plot data -------------------------------------------------------------------------------

def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "role", "segment"])
    for x, y, z, role, seg in rows:
        w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), role, seg])
    return buf.getvalue()


def export_trajectory_plot_data(report: EvalReport, train, test, out_dir, render: bool = False) -> dict:
    """Write ``train.csv``, ``test.csv``, ``predicted.csv`` and ``plot_meta.json``.

    CSV columns are ``x, y, z, role, segment`` where role is one of
    train / test / predicted and segment names the source trajectory.
    ``plot_meta.json`` maps roles to colors. With ``render=True`` a
    top-down ``trajectories.png`` is drawn as well (needs matplotlib).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = {
        "train": [(*p, "train", t.name) for t in train for p in t.positions],
        "test": [(*p, "test", test.name) for p in test.positions],
        "predicted": [(*p[:3], "predicted", test.name) for p in report.predicted],
    }
    paths = {}
    for role, data in rows.items():
        paths[role] = out / f"{role}.csv"
        paths[role].write_text(_csv_text(data))
    paths["meta"] = out / "plot_meta.json"
    paths["meta"].write_text(json.dumps({"columns": ["x", "y", "z", "role", "segment"],
                                         "colors": PLOT_COLORS}, indent=1, sort_keys=True) + "\n")
    if render:
        paths["figure"] = render_trajectories(rows, out / "trajectories.png")
    return paths


def render_trajectories(rows: dict, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for role in ("train", "test"):
        segs: dict = {}
        for x, y, _, _, seg in rows[role]:
            segs.setdefault(seg, []).append((x, y))
        for pts in segs.values():
            pts = np.array(pts)
            ax.plot(pts[:, 0], pts[:, 1], color=PLOT_COLORS[role], lw=1)
    pred = np.array([r[:2] for r in rows["predicted"]])
    if len(pred):
        ax.scatter(pred[:, 0], pred[:, 1], s=4, color=PLOT_COLORS["predicted"])
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# --- curriculum curves -----------------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    n_trajectories: int
    position_mean: float
    angle_mean: float
    param_count: int


def curriculum_curve(stage_reports) -> list:
    """Error against number of training trajectories; the model size must stay constant."""
    stage_reports = list(stage_reports)
    if not stage_reports:
        raise ValueError("need at least one stage")
    points = []
    for stage, rep in stage_reports:
        n = int(rep.meta.get("n_trajectories", stage + 1))
        points.append(CurvePoint(n, rep.position_mean, rep.angle_mean, int(rep.meta["param_count"])))
    counts = {p.param_count for p in points}
    if len(counts) != 1:
        raise ContractViolation(f"parameter count changed across stages: {sorted(counts)}")
    return points


def write_curve_csv(points, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_trajectories", "position_mean", "angle_mean", "param_count"])
    for p in points:
        w.writerow([p.n_trajectories, repr(p.position_mean), repr(p.angle_mean), p.param_count])
    path.write_text(buf.getvalue())
    return path
