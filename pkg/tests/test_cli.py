"""Command-line workflow on a handful of short synthetic sequences."""

import json

import pandas as pd
import pytest

from inertrack.checkpoint import load_checkpoint
from inertrack.cli import main
from inertrack.ingest import read_manifest

# the synthetic corpus is written at 50 Hz
RATE_OVERRIDES = ["--data.nominal_fs", "50"]
MODEL_OVERRIDES = RATE_OVERRIDES + [
    "--model.window_length", "8",
    "--data.window_length", "8",
    "--model.d_hidden", "8",
    "--model.n_heads", "2",
    "--model.depth", "1",
    "--model.kernel_size", "3",
    "--data.segment_windows", "2",
    "--data.segment_step", "16",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Four 20 s sequences and a two-step training run shared by the workflow tests."""

    root = tmp_path_factory.mktemp("cli")
    assert main(["--out", str(root), "--seed", "3", "synth", "--n", "4", "--duration", "20", "--fs", "50"]) == 0
    code = main(
        ["--out", str(root), "--seed", "3", "train", "--manifest", str(root / "manifest.tsv")]
        + MODEL_OVERRIDES
        + ["--train.max_epochs", "1", "--train.batch_size", "4", "--train.max_steps", "2"]
    )
    assert code == 0
    return root


def test_synth_splits_the_default_corpus(tmp_path) -> None:
    assert main(["--out", str(tmp_path), "synth", "--n", "25", "--duration", "20", "--fs", "50"]) == 0

    manifest = read_manifest(tmp_path / "manifest.tsv")

    assert manifest.sizes() == {"train": 15, "validation": 3, "test_seen": 3, "test_unseen": 4}
    assert len(list(tmp_path.glob("seq_*.csv"))) == 25


def test_synth_is_reproducible(tmp_path) -> None:
    for name in ("a", "b"):
        args = ["--out", str(tmp_path / name), "--seed", "9", "synth", "--n", "2", "--duration", "20", "--fs", "50"]
        assert main(args) == 0

    for name in ("seq_000.csv", "seq_001.csv", "manifest.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rejects_an_empty_corpus(tmp_path) -> None:
    assert main(["--out", str(tmp_path), "synth", "--n", "0"]) == 1


def test_bad_override_is_a_configuration_error(tmp_path) -> None:
    assert main(["--out", str(tmp_path), "synth", "--n", "1", "--model.width", "3"]) == 2
    assert main(["--out", str(tmp_path), "synth", "--n", "1", "--train.lr"]) == 2


def test_preprocess_writes_features_and_statistics(workspace) -> None:
    args = ["--out", str(workspace), "preprocess", "--manifest", str(workspace / "manifest.tsv")] + RATE_OVERRIDES

    assert main(args) == 0

    stats = json.loads((workspace / "normalization.json").read_text())
    table = pd.read_csv(workspace / "features" / "seq_000.csv")

    assert len(stats["mean"]) == len(stats["std"]) == 9
    assert table.columns[0] == "t"
    assert {"vel_x", "vel_y"} <= set(table.columns)


def test_training_writes_checkpoints_and_log(workspace) -> None:
    lines = (workspace / "train_log.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    checkpoint = load_checkpoint(workspace / "checkpoints" / "last.ckpt")

    assert [r["kind"] for r in records] == ["step", "step", "epoch"]
    assert (workspace / "checkpoints" / "best.ckpt").is_file()
    assert checkpoint.metadata["model"]["d_hidden"] == 8
    assert checkpoint.metadata["trainer"]["step"] == 2


@pytest.mark.parametrize(
    "method, initial_velocity",
    [("tfbrt", "none"), ("tfbrt-cf", "none"), ("ndi", "ground_truth"), ("ekf", "ground_truth")],
)
def test_eval_reports_the_same_schema_for_every_method(workspace, capsys, method, initial_velocity) -> None:
    args = [
        "--out", str(workspace), "eval",
        "--manifest", str(workspace / "manifest.tsv"),
        "--checkpoint", str(workspace / "checkpoints" / "last.ckpt"),
        "--split", "test_seen",
        "--method", method,
    ] + MODEL_OVERRIDES

    assert main(args) == 0

    payload = json.loads(capsys.readouterr().out)
    assert payload["method"] == method
    assert payload["initial_velocity"] == initial_velocity
    assert payload["aggregate"]["sequences"] == 1
    assert payload["aggregate"]["rte"] is None
    assert set(payload["sequences"][0]) == {
        "sequence_id", "ate", "rte", "pde", "aye_deg", "aye_unitvec", "length", "duration",
    }
    assert (workspace / f"metrics_{method}_test_seen.json").is_file()


def test_eval_is_deterministic(workspace, capsys) -> None:
    args = [
        "--out", str(workspace), "eval",
        "--manifest", str(workspace / "manifest.tsv"),
        "--checkpoint", str(workspace / "checkpoints" / "best.ckpt"),
    ] + MODEL_OVERRIDES

    main(args)
    first = capsys.readouterr().out
    main(args)

    assert capsys.readouterr().out == first


def test_eval_refuses_a_checkpoint_of_another_shape(workspace) -> None:
    args = [
        "--out", str(workspace), "eval",
        "--manifest", str(workspace / "manifest.tsv"),
        "--checkpoint", str(workspace / "checkpoints" / "last.ckpt"),
    ] + MODEL_OVERRIDES + ["--model.d_hidden", "16"]

    assert main(args) == 1


def test_track_writes_a_trace(workspace) -> None:
    sequence = read_manifest(workspace / "manifest.tsv").split("test_unseen")[0]
    trace_path = workspace / "trace.csv"
    args = [
        "--out", str(workspace), "track",
        "--checkpoint", str(workspace / "checkpoints" / "last.ckpt"),
        "--sequence", sequence,
        "--trace", str(trace_path),
    ] + MODEL_OVERRIDES

    assert main(args) == 0

    trace = pd.read_csv(trace_path)
    assert list(trace.columns) == ["t", "x", "y", "vx", "vy", "gx", "gy"]
    assert len(trace) == 1000
    assert trace["x"].iloc[0] == pytest.approx(trace["gx"].iloc[0])


def test_track_without_checkpoint_is_a_configuration_error(workspace) -> None:
    sequence = read_manifest(workspace / "manifest.tsv").split("test_unseen")[0]

    assert main(["--out", str(workspace), "track", "--sequence", sequence] + MODEL_OVERRIDES) == 2


def test_export_features_writes_one_row_per_window(workspace) -> None:
    args = [
        "--out", str(workspace), "export-features",
        "--manifest", str(workspace / "manifest.tsv"),
        "--checkpoint", str(workspace / "checkpoints" / "last.ckpt"),
        "--split", "validation",
    ] + MODEL_OVERRIDES

    assert main(args) == 0

    table = pd.read_csv(workspace / "hidden_features.csv")
    assert len(table) == 2 * 62
    assert table["heading_bin"].between(0, 9).all()
    assert table.shape[1] == 3 + 8


def test_preprocess_names_raw_magnetometer_columns(workspace, tmp_path) -> None:
    args = [
        "--out", str(tmp_path), "preprocess",
        "--manifest", str(workspace / "manifest.tsv"),
        "--data.mag_feature", "raw", "--model.mag_feature", "raw",
    ] + RATE_OVERRIDES

    assert main(args) == 0

    table = pd.read_csv(tmp_path / "features" / "seq_000.csv")
    assert {"mag_b_x", "mag_b_y", "mag_b_z"} <= set(table.columns)
    assert not any(name.startswith("dmag") for name in table.columns)


def test_eval_rejects_sequences_off_the_nominal_rate(workspace) -> None:
    args = [
        "--out", str(workspace), "eval",
        "--manifest", str(workspace / "manifest.tsv"),
        "--method", "ndi",
    ]

    assert main(args) == 1


def test_ekf_section_reaches_the_evaluated_filter(workspace, capsys) -> None:
    base = [
        "--out", str(workspace), "eval",
        "--manifest", str(workspace / "manifest.tsv"),
        "--split", "test_unseen",
    ] + RATE_OVERRIDES
    untrusting = ["--ekf.acc_noise", "1e8", "--ekf.mag_heading_noise", "1e8"]

    main(base + ["--method", "ndi"])
    ndi = json.loads(capsys.readouterr().out)
    main(base + ["--method", "ekf"] + untrusting)
    ekf = json.loads(capsys.readouterr().out)
    main(base + ["--method", "ekf"])
    tuned = json.loads(capsys.readouterr().out)

    assert ekf["aggregate"]["ate"] == pytest.approx(ndi["aggregate"]["ate"], abs=1e-4)
    assert tuned["aggregate"]["ate"] != ekf["aggregate"]["ate"]


def test_heading_drift_reports_every_sequence(workspace, capsys) -> None:
    args = [
        "--out", str(workspace), "heading-drift",
        "--manifest", str(workspace / "manifest.tsv"),
        "--split", "test_unseen",
        "--ekf.acc_noise", "0.8",
    ] + RATE_OVERRIDES

    assert main(args) == 0

    payload = json.loads(capsys.readouterr().out)
    assert payload["split"] == "test_unseen"
    assert [set(row) for row in payload["sequences"]] == [{"sequence_id", "gyro", "mag", "ekf"}]
    assert (workspace / "heading_drift_test_unseen.json").is_file()
