"""CLI subcommands at tiny scale: outputs, determinism, error handling."""

import struct

import numpy as np
import pytest

from heatbench.cli import main, spearman
from heatbench.netcore import Flatten, Linear, Model, make_small_cnn, save_model

from oracles import naive_aopc, naive_curve


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    """A saved random CNN and a 12-image IDX dataset."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    model = make_small_cnn((1, 8, 8), 10, rng, conv_channels=(4, 8), fc_width=16)
    model_path = root / "model.hbm"
    save_model(model, model_path)
    images = (rng.random((12, 8, 8)) * 255).astype(np.uint8)
    labels = rng.integers(0, 10, size=12).astype(np.uint8)
    data_path = root / "train-images-idx3-ubyte"
    with open(data_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, 12, 8, 8))
        f.write(images.tobytes())
    with open(root / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, 12))
        f.write(labels.tobytes())
    return model_path, data_path


def test_heatmap_writes_one_pair_per_image_method(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    out = tmp_path / "out"
    rc = main(["heatmap", "--model", str(model_path), "--data", str(data_path),
               "--methods", "lrp-ab-2,sensitivity-q2,random",
               "--samples", "2", "--out", str(out)])
    assert rc == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    jpgs = sorted(p.name for p in out.glob("*.jpg"))
    raws = sorted(p.name for p in out.glob("*.f64"))
    assert len(pngs) == 6 and len(jpgs) == 6 and len(raws) == 6
    assert "heatmap_img00000_lrp-ab-2.png" in pngs
    assert "heatmap_img00001_random.f64" in raws
    raw = np.frombuffer((out / "heatmap_img00000_lrp-ab-2.f64").read_bytes(),
                        dtype="<f8")
    assert raw.shape == (64,) and np.isfinite(raw).all()
    report = (out / "complexity.csv").read_text().splitlines()
    assert report[0] == "image_id,method,entropy_bits,png_bytes,jpeg_bytes"
    assert len(report) == 7
    manifest = (out / "manifest.txt").read_text()
    assert "status = ok" in manifest and "command = heatmap" in manifest


def test_heatmap_csv_raw_format(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    out = tmp_path / "out"
    rc = main(["heatmap", "--model", str(model_path), "--data", str(data_path),
               "--methods", "random", "--samples", "1", "--raw-format", "csv",
               "--out", str(out)])
    assert rc == 0
    rows = (out / "heatmap_img00000_random.csv").read_text().splitlines()
    assert len(rows) == 8 and len(rows[0].split(",")) == 8


def test_unknown_method_is_a_usage_error(tiny_setup, tmp_path, capsys):
    model_path, data_path = tiny_setup
    rc = main(["heatmap", "--model", str(model_path), "--data", str(data_path),
               "--methods", "gradcam", "--out", str(tmp_path / "o")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "gradcam" in err and "lrp-ab-2" in err


def test_missing_paths_are_usage_errors(tmp_path, capsys):
    rc = main(["heatmap", "--model", str(tmp_path / "nope.hbm"),
               "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "does not exist" in capsys.readouterr().err


def test_heatmap_rerun_is_byte_identical(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    out = tmp_path / "run"
    args = ["heatmap", "--model", str(model_path), "--data", str(data_path),
            "--methods", "random,lrp-eps-0.01", "--samples", "2",
            "--seed", "5", "--out", str(out)]
    assert main(args) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(args) == 0  # same manifest, same out dir
    for p in out.iterdir():
        assert p.read_bytes() == first[p.name], p.name


def test_evaluate_outputs_and_worker_independence(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    outs = []
    for tag, workers in (("w1", "1"), ("w2", "2")):
        out = tmp_path / tag
        rc = main(["evaluate", "--model", str(model_path), "--data",
                   str(data_path), "--methods", "lrp-ab-2,random",
                   "--operator", "uniform", "--window", "2", "--steps", "4",
                   "--repeats", "3", "--samples", "6", "--lerf",
                   "--workers", workers, "--out", str(out)])
        assert rc == 0
        outs.append(out)
    for name in ("curves.csv", "curves_lerf.csv", "report.csv", "aopc_steps.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    header = (outs[0] / "curves.csv").read_text().splitlines()[0]
    assert header == "image_id,method,operator,k,f_value"
    report = (outs[0] / "report.csv").read_text().splitlines()
    assert report[0] == "method,operator,AOPC,ABPC,n_images,seed"
    assert len(report) == 3  # two methods
    # curves: 2 methods x 6 images x (4 steps + 1)
    assert len((outs[0] / "curves.csv").read_text().splitlines()) == 1 + 2 * 6 * 5


def test_evaluate_random_only_relative_aopc_is_zero(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    out = tmp_path / "out"
    rc = main(["evaluate", "--model", str(model_path), "--data", str(data_path),
               "--methods", "random", "--window", "2", "--steps", "3",
               "--repeats", "2", "--samples", "4", "--out", str(out)])
    assert rc == 0
    rows = (out / "aopc_steps.csv").read_text().splitlines()[1:]
    for row in rows:
        assert row.rsplit(",", 1)[1] == "0.0"


def test_evaluate_zero_steps_gives_zero_aopc(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    out = tmp_path / "out"
    rc = main(["evaluate", "--model", str(model_path), "--data", str(data_path),
               "--methods", "random", "--window", "2", "--steps", "0",
               "--samples", "3", "--out", str(out)])
    assert rc == 0
    report = (out / "report.csv").read_text().splitlines()[1]
    assert float(report.split(",")[2]) == 0.0


def test_evaluate_linear_model_aopc_matches_enumeration(tmp_path):
    # planted linear weights, constant operator: AOPC is exactly enumerable
    rng = np.random.default_rng(3)
    w = rng.normal(size=(1, 64))
    model = Model([Flatten(), Linear(w, np.zeros(1))], (1, 8, 8), 1)
    model_path = tmp_path / "lin.hbm"
    save_model(model, model_path)
    images = (rng.random((5, 8, 8)) * 255).astype(np.uint8)
    data_path = tmp_path / "train-images-idx3-ubyte"
    with open(data_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, 5, 8, 8))
        f.write(images.tobytes())
    with open(tmp_path / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, 5))
        f.write(bytes(5))
    out = tmp_path / "out"
    rc = main(["evaluate", "--model", str(model_path), "--data", str(data_path),
               "--methods", "lrp-eps-0.01", "--operator", "constant",
               "--window", "2", "--steps", "8", "--samples", "5",
               "--out", str(out)])
    assert rc == 0
    got = float((out / "report.csv").read_text().splitlines()[1].split(",")[2])

    # oracle: rebuild orderings and trajectories step by step
    from heatbench.attribution import LrpParams, lrp
    from heatbench.netcore import forward
    from heatbench.perturbeval import build_region_grid, order_regions
    from heatbench.datahub import load_dataset, mean_image
    ds = load_dataset(data_path, "idx")
    mean = mean_image(ds)
    regions = build_region_grid(8, 8, 2)
    curves = []
    for i in range(5):
        x = ds.images[i]
        _, trace = forward(model, x)
        hm = lrp(model, trace, 0, LrpParams("epsilon", epsilon=0.01),
                 method="lrp-eps-0.01")
        ordering = order_regions(hm, regions)
        curves.append(naive_curve(model, x, list(ordering.regions), "constant",
                                  steps=8, repeats=1, seed=0, image_key=i,
                                  mean_image=mean))
    want = naive_aopc(np.asarray(curves))
    assert abs(got - want) < 1e-12


def test_perturb_study_covers_four_operators_two_directions(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    out = tmp_path / "out"
    rc = main(["perturb-study", "--model", str(model_path), "--data",
               str(data_path), "--method", "lrp-ab-2", "--window", "2",
               "--steps", "2", "--repeats", "2", "--samples", "3",
               "--out", str(out)])
    assert rc == 0
    table = (out / "study_abpc.csv").read_text().splitlines()
    assert table[0] == "operator,ABPC,AOPC_morf,repeats_used,n_images,seed"
    rows = {r.split(",")[0]: r.split(",") for r in table[1:]}
    assert set(rows) == {"uniform", "dirichlet", "constant", "blur"}
    assert rows["uniform"][3] == "2" and rows["dirichlet"][3] == "2"
    assert rows["constant"][3] == "1" and rows["blur"][3] == "1"
    for name in ("study_curves_morf.csv", "study_curves_lerf.csv"):
        body = (out / name).read_text().splitlines()[1:]
        operators = {line.split(",")[2] for line in body}
        assert operators == {"uniform", "dirichlet", "constant", "blur"}


def test_train_correlation_table_and_determinism(tiny_setup, tmp_path):
    _, data_path = tiny_setup
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        rc = main(["train-correlation", "--data", str(data_path),
                   "--epochs", "2", "--checkpoints", "3", "--samples", "4",
                   "--window", "2", "--steps", "2", "--repeats", "2",
                   "--out", str(out)])
        assert rc == 0
        outs.append(out)
    assert (outs[0] / "checkpoints.csv").read_bytes() == \
        (outs[1] / "checkpoints.csv").read_bytes()
    rows = (outs[0] / "checkpoints.csv").read_text().splitlines()
    assert rows[0] == "iteration,test_accuracy,aopc"
    assert len(rows) >= 4  # 0, intermediate, final
    assert len(list(outs[0].glob("checkpoint_*.hbm"))) == len(rows) - 1


def test_train_correlation_single_checkpoint_reports_undefined(tiny_setup, tmp_path):
    _, data_path = tiny_setup
    out = tmp_path / "out"
    rc = main(["train-correlation", "--data", str(data_path), "--epochs", "0",
               "--checkpoints", "1", "--samples", "3", "--window", "2",
               "--steps", "2", "--out", str(out)])
    assert rc == 0
    corr = (out / "correlation.csv").read_text().splitlines()
    assert corr[1].split(",") == ["1", "undefined"]


def test_config_file_with_flag_override(tiny_setup, tmp_path):
    model_path, data_path = tiny_setup
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "methods = random\n"
        "window = 2\n"
        "steps = 2\n"
        "repeats = 2  # trailing comment\n"
        "samples = 3\n"
        f"model = {model_path}\n"
        f"data = {data_path}\n")
    out = tmp_path / "out"
    rc = main(["evaluate", "--config", str(cfg), "--samples", "2",
               "--out", str(out)])
    assert rc == 0
    manifest = (out / "manifest.txt").read_text()
    assert "samples = 2" in manifest  # flag wins
    assert "window = 2" in manifest   # file value kept


def test_failed_run_marks_manifest_and_exits_nonzero(tiny_setup, tmp_path, capsys):
    model_path, data_path = tiny_setup
    out = tmp_path / "out"
    # steps beyond the region count fails inside the pipeline
    rc = main(["evaluate", "--model", str(model_path), "--data", str(data_path),
               "--methods", "random", "--window", "4", "--steps", "100",
               "--samples", "2", "--out", str(out)])
    assert rc == 1
    assert "status = failed" in (out / "manifest.txt").read_text()
    assert "error" in capsys.readouterr().err


def test_spearman_ties_and_undefined():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [30, 20, 10]) == pytest.approx(-1.0)
    assert spearman([1.0], [2.0]) is None
    assert spearman([1, 1, 1], [1, 2, 3]) is None
    # ties get average ranks: a -> (1, 2.5, 2.5, 4), rho = 4.5/sqrt(22.5)
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == \
        pytest.approx(4.5 / np.sqrt(22.5), abs=1e-12)
