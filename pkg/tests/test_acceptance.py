"""Acceptance suite: twelve end-to-end checks, one test each.

Every check records a PASS/FAIL line with its runtime; the lines are
printed in the pytest terminal summary (see ``conftest.py``). Run alone
with ``pytest tests/test_acceptance.py``.
"""

import hashlib
import json
import math
import statistics
import time
import warnings
from contextlib import contextmanager

import numpy as np
import pytest

from cnnmap.archs import conv1_delta, count_params, preset, preset_names
from cnnmap.cli import main
from cnnmap.datasets import (
    associate,
    load_7scenes_sequence,
    load_cambridge_sequence,
    load_tum_sequence,
    make_leave_one_out,
    pose_from_matrix,
    pose_to_matrix,
    rotmat_to_quat,
)
from cnnmap.evaluation import EvalReport, build_comparison, evaluate_predictions, load_references
from cnnmap.experiment import load_dataset, resolve_config
from cnnmap.inputs import Intrinsics, Modality, depth_to_pointcloud, project_points
from cnnmap.network import backward, build_model, forward, run
from cnnmap.pose import (
    DegenerateQuaternionError,
    angular_error,
    batch_loss,
    loss_gradient,
    pose_vector_error,
    position_error,
    posenet_loss,
    quat_normalize,
    quat_to_rotmat,
)
from cnnmap.train import mean_curve, run_curriculum
from cnnmap.weights import ChecksumError, export_weights, import_weights, load_container

import fixtures
from conftest import TOY_TABLES, make_toy
from oracles import brute_nearest, loop_backproject, loop_forward

RESULTS = {}


@contextmanager
def criterion(number, title, budget=None):
    """Time a block and record PASS/FAIL for the summary; exceptions propagate."""
    note = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield note
        elapsed = time.perf_counter() - t0
        assert budget is None or elapsed < budget, f"took {elapsed:.1f} s, budget {budget} s"
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        detail = f" ({note['detail']})" if "detail" in note else ""
        RESULTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}{detail} [{elapsed:.1f} s]"
        print(RESULTS[number])


def _randomize(model, seed):
    r = np.random.default_rng(seed)
    for k, w in model.params.items():
        model.params[k] = r.normal(scale=0.5, size=w.shape)
    return model


# 1 ----------------------------------------------------------------------------------------------

def test_01_gradients_match_finite_differences():
    with criterion(1, "loss and network gradients vs central differences", budget=30) as note:
        r = np.random.default_rng(101)
        h = 1e-6
        worst_op = 0.0
        for _ in range(100):
            p_hat, p, beta = r.normal(size=7), r.normal(size=7), r.uniform(0.5, 500)
            g = loss_gradient(p_hat, p, beta)
            fd = np.array([(posenet_loss(p_hat + h * e, p, beta) - posenet_loss(p_hat - h * e, p, beta)) / (2 * h)
                           for e in np.eye(7)])
            worst_op = max(worst_op, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        worst_net = 0.0
        names = list(TOY_TABLES)
        for k in range(20):
            arch = make_toy(names[k % len(names)])
            m = _randomize(build_model(arch), 200 + k)
            x = r.normal(size=(4, arch.input_side, arch.input_side, arch.in_channels))
            target = r.normal(size=(4, 7))
            out, caches = run(m, x, keep_cache=True)
            grads = backward(m, caches, batch_loss(out, target, 3.0)[1])
            key = sorted(m.params)[r.integers(len(m.params))]
            w = m.params[key].reshape(-1)
            i = r.integers(w.size)
            old = w[i]
            w[i] = old + h
            fp = batch_loss(run(m, x)[0], target, 3.0)[0]
            w[i] = old - h
            fm = batch_loss(run(m, x)[0], target, 3.0)[0]
            w[i] = old
            fd = (fp - fm) / (2 * h)
            g = grads[key].reshape(-1)[i]
            worst_net = max(worst_net, abs(g - fd) / max(abs(g), abs(fd), 1e-8))
        note["detail"] = f"worst relative error {worst_op:.1e} analytic, {worst_net:.1e} through the net"
        assert worst_op < 1e-4
        assert worst_net < 1e-3


# 2 ----------------------------------------------------------------------------------------------

def test_02_metric_properties():
    with criterion(2, "pose metric properties and worked values", budget=5):
        r = np.random.default_rng(102)
        for _ in range(1000):
            a, b, c = r.normal(scale=5, size=(3, 3))
            assert position_error(a, c) <= position_error(a, b) + position_error(b, c) + 1e-12
            q, qh = r.normal(size=(2, 4))
            e = angular_error(q, qh)
            assert 0.0 <= e <= 90.0
            assert angular_error(q, -q) == 0.0
            assert e == angular_error(qh, q)
        s = math.sqrt(0.5)
        np.testing.assert_allclose(quat_normalize([2, 0, 0, 0]), [1, 0, 0, 0])
        np.testing.assert_allclose(quat_normalize([0, 3, 4, 0]), [0, 0.6, 0.8, 0])
        with pytest.raises(DegenerateQuaternionError):
            quat_normalize([0, 0, 0, 0])
        assert position_error([0, 0, 0], [0, 0, 0]) == 0
        assert position_error([0, 0, 0], [3, 4, 0]) == 5
        assert position_error([1, 1, 1], [2, 2, 2]) == pytest.approx(1.7320508, abs=1e-7)
        assert angular_error([1, 0, 0, 0], [1, 0, 0, 0]) == 0
        assert angular_error([1, 0, 0, 0], [0, 1, 0, 0]) == pytest.approx(90.0)
        assert angular_error([1, 0, 0, 0], [s, s, 0, 0]) == pytest.approx(45.0)
        p = np.array([1.0, 2, 3, 1, 0, 0, 0])
        assert pose_vector_error(p, p) == 0
        assert pose_vector_error(p + [3, 4, 0, 0, 0, 0, 0], p) == 5
        assert pose_vector_error(p + [0, 0, 0, 1, 0, 0, 0], p) == 1
        assert posenet_loss(p, p, 7.0) == 0
        assert posenet_loss(p + [3, 4, 0, 0, 0, 0, 0], p, 123.0) == 5
        assert posenet_loss(p + [0, 0, 0, 0, 0.1, 0, 0], p, 2.0) == pytest.approx(0.2)
        np.testing.assert_array_equal(loss_gradient(p, p), np.zeros(7))
        np.testing.assert_array_equal(loss_gradient(p + [1, 0, 0, 0, 0, 0, 0], p), [1, 0, 0, 0, 0, 0, 0])


# 3 ----------------------------------------------------------------------------------------------

BANDS = {  # million parameters with 1000-class heads
    "VGG-F": (61 * 0.98, 61 * 1.02),
    "VGG-M": (100 * 0.97, 100 * 1.03),
    "VGG-S": (100 * 0.97, 100 * 1.03),
    "VGG-16": (138 * 0.99, 138 * 1.01),
    "VGG-19": (138.0, 148.0),
}
# published exact totals of the ImageNet classifiers (configurations D and E)
EXACT = {"VGG-16": 138_357_544, "VGG-19": 143_667_240}


def test_03_parameter_counts():
    with criterion(3, "preset parameter counts within published bands", budget=5) as note:
        counts = {}
        for name, (lo, hi) in BANDS.items():
            n1000 = count_params(preset(name, head_dim=1000))
            n7 = count_params(preset(name))
            counts[name] = n1000
            assert lo * 1e6 <= n1000 <= hi * 1e6, (name, n1000)
            assert n7 < n1000
            # only the head shrinks: 4096 inputs per output unit, plus bias
            assert n1000 - n7 == (1000 - 7) * (4096 + 1)
        for name, n in EXACT.items():
            assert counts[name] == n
        note["detail"] = ", ".join(f"{k} {v / 1e6:.1f}M" for k, v in counts.items())


# 4 ----------------------------------------------------------------------------------------------

def test_04_channel_adaptation():
    with criterion(4, "every preset accepts 1/3/4/6-channel inputs", budget=120) as note:
        channels = sorted({m.channels for m in Modality})
        assert channels == [1, 3, 4, 6]
        for name in preset_names():
            ref = count_params(preset(name, 3, side=224))
            for n in channels:
                arch = preset(name, n, side=224)
                assert arch.shapes(224)[-1] == (1, 1, 7)
                assert count_params(arch) - ref == conv1_delta(arch, n)
        # a full forward pass for the fast network; the others are checked by shape propagation
        for n in channels:
            arch = preset("VGG-F", n)
            out = forward(build_model(arch, seed=n, dtype=np.float32), np.zeros((224, 224, n), np.float32))
            assert out.shape == (7,)
        note["detail"] = "VGG-F run in full, other presets shape-only"


# 5 ----------------------------------------------------------------------------------------------

def test_05_convolution_oracle():
    with criterion(5, "vectorized forward equals scalar-loop oracle"):
        r = np.random.default_rng(105)
        for k, name in enumerate(TOY_TABLES):
            arch = make_toy(name)
            m = _randomize(build_model(arch), 300 + k)
            x = r.normal(size=(arch.input_side, arch.input_side, arch.in_channels))
            np.testing.assert_allclose(forward(m, x), loop_forward(arch, m.params, x), rtol=0, atol=1e-10)


# 6 ----------------------------------------------------------------------------------------------

def test_06_dataset_parsers(tmp_path):
    with criterion(6, "TUM, 7-Scenes and Cambridge parsers"):
        expected = fixtures.write_tum(tmp_path / "tum")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            traj = load_tum_sequence(tmp_path / "tum")
        np.testing.assert_allclose(traj.pose_vectors, expected, atol=1e-12)
        kept = [float(f.frame_id) for f in traj.frames]
        gt = [t for t, _, _ in fixtures.TUM_GT]
        rgb_gt = brute_nearest(fixtures.TUM_RGB, gt, 0.02)
        rgb_depth = brute_nearest(fixtures.TUM_RGB, fixtures.TUM_DEPTH, 0.02)
        assert kept == [t for t, a, b in zip(fixtures.TUM_RGB, rgb_gt, rgb_depth) if a >= 0 and b >= 0]

        r = np.random.default_rng(106)
        for _ in range(20):
            ref = np.unique(r.uniform(0, 5, r.integers(1, 30)))
            query = r.uniform(-0.5, 5.5, 40)
            tol = r.uniform(0.005, 0.2)
            got, want = associate(query, ref, tol), brute_nearest(query, ref, tol)
            for t, g, w in zip(query, got, want):
                assert (g < 0) == (w < 0)
                if w >= 0:
                    assert abs(ref[g] - t) == abs(ref[w] - t)

        expected = fixtures.write_7scenes_seq(tmp_path / "seq-01")
        got = load_7scenes_sequence(tmp_path / "seq-01").pose_vectors
        np.testing.assert_allclose(got[:, :3], expected[:, :3], atol=1e-9)
        np.testing.assert_allclose(np.abs((got[:, 3:] * expected[:, 3:]).sum(1)), 1.0, atol=1e-9)

        expected = fixtures.write_cambridge(tmp_path / "church")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = load_cambridge_sequence(tmp_path / "church").pose_vectors
        np.testing.assert_allclose(got, expected, atol=1e-15)

        worst = 0.0
        for _ in range(100):
            q = r.normal(size=4)
            R = quat_to_rotmat(q / np.linalg.norm(q))
            worst = max(worst, np.abs(quat_to_rotmat(rotmat_to_quat(R)) - R).max())
            T = np.eye(4)
            T[:3, :3], T[:3, 3] = R, r.normal(size=3)
            np.testing.assert_allclose(pose_to_matrix(pose_from_matrix(T)), T, atol=1e-9)
        assert worst < 1e-9


# 7 ----------------------------------------------------------------------------------------------

def test_07_backprojection():
    with criterion(7, "backprojection vs loop oracle and reprojection"):
        r = np.random.default_rng(107)
        intr = Intrinsics(525.0, 520.0, 319.5, 239.5)
        depth = r.uniform(0.3, 8.0, (48, 64))
        depth[5, 7] = 0.0
        cloud = depth_to_pointcloud(depth, intr)
        np.testing.assert_array_equal(cloud, loop_backproject(depth, intr))
        valid = depth > 0
        uv = project_points(cloud[valid], intr)
        v, u = np.mgrid[0:48, 0:64]
        np.testing.assert_allclose(uv[:, 0], u[valid], atol=1e-6)
        np.testing.assert_allclose(uv[:, 1], v[valid], atol=1e-6)


# 8 and 10 share one full run of the smoke recipe ------------------------------------------------

def _sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke") / "run"
    t0 = time.perf_counter()
    code = main(["train", "--recipe", "smoke", "--out", str(out)])
    return out, code, time.perf_counter() - t0


@pytest.mark.slow
def test_08_desk_scale_learning(smoke_run, tmp_path):
    with criterion(8, "reduced network learns the synthetic scene") as note:
        out, code, seconds = smoke_run
        assert code == 0
        cfg = resolve_config("smoke")
        assert cfg.hp.epochs <= 300
        bundle = load_dataset(cfg.dataset)
        assert [t.role for t in bundle.trajectories].count("train") == 3
        diameter = bundle.scene_diameter()
        trained = EvalReport.load(out / "reports" / "traj-03.json")
        assert trained.meta["checkpoint"] == "final"
        assert main(["train", "--recipe", "smoke", "--epochs", "0", "--out", str(tmp_path / "zero")]) == 0
        untrained = EvalReport.load(tmp_path / "zero" / "reports" / "traj-03.json")
        ratio, ratio0 = trained.position_mean / diameter, untrained.position_mean / diameter
        note["detail"] = (f"e_p {100 * ratio:.1f}% of diameter after {cfg.hp.epochs} epochs, "
                          f"{100 * ratio0:.0f}% untrained, training run {seconds:.0f} s")
        assert ratio < 0.10
        assert ratio0 > 0.25
        assert seconds < 600


# 9 ----------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_09_curriculum_trend():
    with criterion(9, "more training trajectories, same network size") as note:
        runs = []
        for seed in (0, 1, 2):
            cfg = resolve_config("smoke-curriculum", overrides={"dataset": {"seed": seed}, "hp": {"seed": seed}})
            bundle = load_dataset(cfg.dataset)
            cur = make_leave_one_out(bundle, cfg.curriculum["test"])
            assert len(cur.stages) == 4
            res = run_curriculum(cfg.arch_spec(), cur, cfg.hp, cfg.input_config(), cfg.init_std)
            assert len({r.meta["param_count"] for _, r in res}) == 1
            runs.append(res)
        curve = mean_curve(runs)
        note["detail"] = "mean e_p per stage " + " ".join(f"{e:.3f}" for e in curve) + " m"
        assert curve[-1] <= curve[0]


# 10 ---------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_10_determinism(smoke_run, tmp_path):
    with criterion(10, "identical configs give identical histories and weights"):
        first, code, _ = smoke_run
        assert code == 0
        second = tmp_path / "again"
        assert main(["train", "--recipe", "smoke", "--out", str(second)]) == 0
        assert (first / "history.json").read_bytes() == (second / "history.json").read_bytes()
        for name in ("final", "best"):
            assert _sha256(first / "checkpoints" / f"{name}.bin") == _sha256(second / "checkpoints" / f"{name}.bin")
        a, b = (json.loads((d / "manifest.json").read_text()) for d in (first, second))
        assert a["checkpoints"] == b["checkpoints"]


# 11 ---------------------------------------------------------------------------------------------

def test_11_container_roundtrip(tmp_path):
    with criterion(11, "weight container round-trip and corruption check"):
        for k, name in enumerate(TOY_TABLES):
            m = _randomize(build_model(make_toy(name)), 400 + k)
            path = export_weights(m, tmp_path / f"{name}.manifest")
            back = import_weights(path)
            assert back.arch == m.arch
            assert all(back.params[p].tobytes() == m.params[p].tobytes() for p in m.params)
            blob = path.with_suffix(".bin")
            data = bytearray(blob.read_bytes())
            data[len(data) // 2] ^= 0x01
            blob.write_bytes(bytes(data))
            with pytest.raises(ChecksumError):
                load_container(path)


# 12 ---------------------------------------------------------------------------------------------

def test_12_report_arithmetic(tmp_path):
    with criterion(12, "report aggregates, NA cells and reference rows"):
        r = np.random.default_rng(112)
        truth = np.column_stack([r.normal(size=(25, 3)), np.tile([1.0, 0, 0, 0], (25, 1))])
        pred = truth + np.column_stack([r.normal(scale=0.3, size=(25, 3)), r.normal(scale=0.05, size=(25, 4))])
        rep = evaluate_predictions(pred, truth, [f"f{i}" for i in range(25)],
                                   {"arch": "VGG-F", "dataset": "St Marys Church", "param_count": 1})
        rep.save(tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        pos = [f["position_error"] for f in doc["frames"]]
        ang = [f["angle_error"] for f in doc["frames"]]
        agg = doc["aggregates"]
        assert abs(statistics.fmean(pos) - agg["position_mean"]) < 1e-12
        assert abs(statistics.pstdev(pos) - agg["position_std"]) < 1e-12
        assert abs(statistics.fmean(ang) - agg["angle_mean"]) < 1e-12
        assert abs(statistics.pstdev(ang) - agg["angle_std"]) < 1e-12

        refs = load_references()
        assert refs["position"]["PoseNet"]["St Marys Church"] == 2.65
        assert refs["angle"]["PoseNet"]["St Marys Church"] == 4.24
        cols = ["St Marys Church", "TUM Long Office"]
        pos_table = build_comparison([rep], metric="position", columns=cols).render()
        ang_table = build_comparison([rep], metric="angle", columns=cols).render()
        assert f"| VGG-F | {agg['position_mean']:.3f} ± {agg['position_std']:.3f} | NA |" in pos_table
        assert "| *PoseNet* | *2.65* | NA |" in pos_table
        assert "| *PoseNet* | *4.24* | NA |" in ang_table
        for metric, table in (("position", pos_table), ("angle", ang_table)):
            for method, cells in refs[metric].items():
                row = " | ".join("NA" if cells.get(c) is None else f"*{cells[c]:g}*" for c in cols)
                assert f"| *{method}* | {row} |" in table
