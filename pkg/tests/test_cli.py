"""End-to-end CLI tests: artifacts, exit codes, config layering, reruns."""

import csv
import json

import pytest

from tacalab.analysis import suppression_ratio
from tacalab.cli import COMMAND_DEFAULTS, main
from tacalab.data import default_concepts, synth_dataset
from tacalab.flow import T_MAX
from tacalab.model import ToyModel
from tacalab.probe import alignment_probe
from tacalab.serialization import load_arrays
from tacalab.tensor_math import make_rng

TINY_TRAIN = [
    "--pretrain-steps", "12", "--steps", "8", "--batch", "2", "--pairs", "8",
]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def cli_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out-dir", str(out), *TINY_TRAIN]) == 0
    return out / "checkpoint.bin"


# ---------------------------------------------------------------------------
# argument handling and exit codes
# ---------------------------------------------------------------------------


def test_unknown_command_is_validation_error():
    assert main(["frobnicate"]) == 1


def test_missing_command_is_validation_error():
    assert main([]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "suppress" in capsys.readouterr().out


def test_bad_flag_value_is_validation_error(tmp_path):
    assert main(["suppress", "--out-dir", str(tmp_path), "--mode", "bogus"]) == 1


def test_domain_error_exit_code(tmp_path):
    assert main(["suppress", "--out-dir", str(tmp_path), "--n-txt", "0"]) == 1
    assert main(["suppress", "--out-dir", str(tmp_path), "--trials", "0"]) == 1
    assert main(["train", "--out-dir", str(tmp_path), "--steps", "0"]) == 1


def test_io_error_exit_code(tmp_path):
    missing = tmp_path / "missing.bin"
    code = main(["sample", "--out-dir", str(tmp_path), "--checkpoint", str(missing)])
    assert code == 2


def test_sample_without_checkpoint_is_validation_error(tmp_path):
    assert main(["sample", "--out-dir", str(tmp_path)]) == 1


def test_sweep_without_checkpoint_is_validation_error(tmp_path):
    assert main(["sweep", "--out-dir", str(tmp_path)]) == 1


# ---------------------------------------------------------------------------
# suppress
# ---------------------------------------------------------------------------


def test_suppress_writes_expected_rows(tmp_path):
    code = main(["suppress", "--out-dir", str(tmp_path), "--trials", "50", "--heads", "3"])
    assert code == 0
    rows = read_csv(tmp_path / "suppression.csv")
    assert len(rows) == 3  # one gamma (default), three heads
    assert list(rows[0].keys()) == ["head", "gamma", "n_txt", "n_vis", "mean_mass", "ratio"]
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved["command"] == "suppress"
    assert resolved["trials"] == 50
    assert resolved["heads"] == 3


def test_suppress_mass_near_token_fraction(tmp_path):
    code = main(
        ["suppress", "--out-dir", str(tmp_path), "--trials", "400", "--heads", "1"]
    )
    assert code == 0
    rows = read_csv(tmp_path / "suppression.csv")
    assert abs(float(rows[0]["ratio"]) - 8.0 / 72.0) < 0.02


def test_suppress_gamma_raises_mass(tmp_path):
    code = main(
        [
            "suppress", "--out-dir", str(tmp_path),
            "--gammas", "1.0", "1.2", "--mode", "nonneg", "--trials", "100", "--heads", "2",
        ]
    )
    assert code == 0
    rows = read_csv(tmp_path / "suppression.csv")
    by_gamma = {}
    for r in rows:
        by_gamma.setdefault(float(r["gamma"]), {})[int(r["head"])] = float(r["ratio"])
    for head in (0, 1):
        assert by_gamma[1.2][head] > by_gamma[1.0][head]


def test_suppress_checkpoint_activations(tmp_path, cli_checkpoint):
    code = main(
        [
            "suppress", "--out-dir", str(tmp_path),
            "--checkpoint", str(cli_checkpoint), "--gammas", "1.0", "1.2",
        ]
    )
    assert code == 0
    rows = read_csv(tmp_path / "suppression.csv")
    assert len(rows) == 2 * 4  # two gammas, four heads in the default model
    code = main(
        [
            "suppress", "--out-dir", str(tmp_path),
            "--checkpoint", str(cli_checkpoint), "--block", "7",
        ]
    )
    assert code == 1  # default model has two blocks


# ---------------------------------------------------------------------------
# train / sample
# ---------------------------------------------------------------------------


def test_train_artifacts_and_determinism(tmp_path, cli_checkpoint):
    rows = read_csv(cli_checkpoint.parent / "training_log.csv")
    assert len(rows) == 12 + 8
    assert {r["phase"] for r in rows} == {"pretrain", "taca"}

    rerun = tmp_path / "rerun"
    assert main(["train", "--out-dir", str(rerun), *TINY_TRAIN]) == 0
    assert (rerun / "checkpoint.bin").read_bytes() == cli_checkpoint.read_bytes()
    assert (rerun / "training_log.csv").read_bytes() == (
        cli_checkpoint.parent / "training_log.csv"
    ).read_bytes()


def test_sample_artifacts(tmp_path, cli_checkpoint):
    code = main(
        [
            "sample", "--out-dir", str(tmp_path),
            "--checkpoint", str(cli_checkpoint), "--steps", "6", "--concept", "2",
        ]
    )
    assert code == 0
    rows = read_csv(tmp_path / "step_log.csv")
    assert len(rows) == 6
    # Shift-3 over 6 steps puts only the first step at t >= 970.
    gammas = [float(r["gamma"]) for r in rows]
    assert gammas[0] == 1.2 and set(gammas[1:]) == {1.0}
    assert (tmp_path / "sample.bin").exists()


def test_sample_metadata_records_cfg_scale(tmp_path, cli_checkpoint):
    for sub, scale in (("a", 1.0), ("b", 3.5)):
        out = tmp_path / sub
        code = main(
            [
                "sample", "--out-dir", str(out), "--checkpoint", str(cli_checkpoint),
                "--steps", "4", "--cfg-scale", str(scale),
            ]
        )
        assert code == 0
        meta, _ = load_arrays(out / "sample.bin")
        assert meta["cfg_scale"] == scale


def test_sample_gamma0_one_equals_baseline_flag(tmp_path, cli_checkpoint):
    a = tmp_path / "a"
    b = tmp_path / "b"
    common = ["--checkpoint", str(cli_checkpoint), "--steps", "5"]
    assert main(["sample", "--out-dir", str(a), *common, "--gamma0", "1.0"]) == 0
    assert main(["sample", "--out-dir", str(b), *common, "--baseline"]) == 0
    assert (a / "sample.bin").read_bytes() == (b / "sample.bin").read_bytes()
    assert (a / "step_log.csv").read_bytes() == (b / "step_log.csv").read_bytes()


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def test_sweep_grid_rows(tmp_path, cli_checkpoint):
    code = main(
        [
            "sweep", "--out-dir", str(tmp_path), "--checkpoint", str(cli_checkpoint),
            "--gamma0-grid", "1.0", "1.2", "--t-thresh-grid", "970", "950",
            "--probe-samples", "2", "--steps", "3",
        ]
    )
    assert code == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 4
    combos = {(float(r["gamma0"]), float(r["t_thresh"])) for r in rows}
    assert combos == {(1.0, 970.0), (1.0, 950.0), (1.2, 970.0), (1.2, 950.0)}
    assert all(int(r["n_samples"]) == 2 for r in rows)


def test_sweep_single_cell_matches_direct_probe(tmp_path, cli_checkpoint):
    code = main(
        [
            "sweep", "--out-dir", str(tmp_path), "--checkpoint", str(cli_checkpoint),
            "--gamma0-grid", "1.0", "--t-thresh-grid", "970",
            "--probe-samples", "2", "--steps", "3",
        ]
    )
    assert code == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 1

    # Replay the handler's RNG sequence: dataset first, then the noise draw
    # used for the activation-based suppression ratio.
    model = ToyModel.load(cli_checkpoint)
    concepts = default_concepts(n_txt=model.cfg.n_txt)
    rng = make_rng(42)
    dataset = synth_dataset(2, rng, concepts, n_vis=model.cfg.n_vis)
    x_noise = rng.standard_normal((model.cfg.n_vis, model.cfg.d_patch))
    q, k = model.attention_inputs(dataset[0].prompt, x_noise, T_MAX)[0]
    probe = alignment_probe(
        model, dataset, [1.0], concepts,
        steps=3, shift=3.0, cfg_scale=3.5, t_thresh=970.0, tau=1.0, base_seed=42,
    )[0]
    assert float(rows[0]["mean_score"]) == probe.mean_score
    assert float(rows[0]["std_err"]) == probe.std_err
    assert int(rows[0]["n_samples"]) == probe.n_samples
    ratio = suppression_ratio(q, k, model.layout, gamma=1.0, tau=1.0).ratio
    assert float(rows[0]["suppression_ratio"]) == ratio


def test_sweep_default_grid_is_three_by_three(tmp_path, cli_checkpoint):
    code = main(
        [
            "sweep", "--out-dir", str(tmp_path), "--checkpoint", str(cli_checkpoint),
            "--probe-samples", "1", "--steps", "2",
        ]
    )
    assert code == 0
    assert len(read_csv(tmp_path / "sweep.csv")) == 9


def test_sweep_deduplicates_grid_with_warning(tmp_path, cli_checkpoint, capsys):
    code = main(
        [
            "sweep", "--out-dir", str(tmp_path), "--checkpoint", str(cli_checkpoint),
            "--gamma0-grid", "1.2", "1.2", "--t-thresh-grid", "970",
            "--probe-samples", "2", "--steps", "3",
        ]
    )
    assert code == 0
    assert "duplicate gamma0 value" in capsys.readouterr().err
    assert len(read_csv(tmp_path / "sweep.csv")) == 1


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


BENCH_TINY = [
    "--n-txt", "4", "--n-vis", "16", "--heads", "2", "--head-dim", "8",
    "--reps", "3", "--run-reps", "2", "--steps", "6",
]


def test_bench_artifacts(tmp_path):
    assert main(["bench", "--out-dir", str(tmp_path), *BENCH_TINY]) == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert [r["strategy"] for r in rows] == ["baseline", "reference", "selective"]
    assert float(rows[0]["rel_factor"]) == 1.0
    assert all(float(r["median_s"]) > 0 for r in rows)
    run_rows = read_csv(tmp_path / "bench_run.csv")
    assert len(run_rows) == 1
    assert int(run_rows[0]["steps"]) == 6
    assert float(run_rows[0]["overhead_factor"]) > 0


def test_bench_precision_flag(tmp_path):
    assert main(["bench", "--out-dir", str(tmp_path), "--precision", "f32", *BENCH_TINY]) == 0
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved["precision"] == "f32"


# ---------------------------------------------------------------------------
# config layering and rerun reproducibility
# ---------------------------------------------------------------------------


def test_config_file_then_flags(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"command": "suppress", "trials": 33, "heads": 2}))
    out = tmp_path / "o1"
    assert main(["suppress", "--out-dir", str(out), "--config", str(cfg_path)]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["trials"] == 33 and resolved["heads"] == 2

    out2 = tmp_path / "o2"
    code = main(
        ["suppress", "--out-dir", str(out2), "--config", str(cfg_path), "--trials", "44"]
    )
    assert code == 0
    resolved = json.loads((out2 / "resolved_config.json").read_text())
    assert resolved["trials"] == 44 and resolved["heads"] == 2


def test_config_file_unknown_key_rejected(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"bogus": 1}))
    assert main(["suppress", "--out-dir", str(tmp_path), "--config", str(cfg_path)]) == 1


def test_config_file_command_mismatch_rejected(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"command": "bench"}))
    assert main(["suppress", "--out-dir", str(tmp_path), "--config", str(cfg_path)]) == 1


def test_config_file_missing_is_io_error(tmp_path):
    assert main(["suppress", "--out-dir", str(tmp_path), "--config", str(tmp_path / "no.json")]) == 2


def test_resolved_config_keys_exclude_paths(tmp_path):
    assert main(["suppress", "--out-dir", str(tmp_path), "--trials", "10"]) == 0
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert set(resolved) == {"command", *COMMAND_DEFAULTS["suppress"]}
    assert "out_dir" not in resolved and "config" not in resolved


def test_rerun_from_resolved_config_reproduces_outputs(tmp_path):
    first = tmp_path / "first"
    second = tmp_path / "second"
    args = ["suppress", "--trials", "60", "--heads", "2", "--gammas", "1.0", "1.3"]
    assert main([*args, "--out-dir", str(first)]) == 0
    code = main(
        ["suppress", "--out-dir", str(second), "--config", str(first / "resolved_config.json")]
    )
    assert code == 0
    assert (first / "suppression.csv").read_bytes() == (second / "suppression.csv").read_bytes()
    assert (first / "resolved_config.json").read_bytes() == (
        second / "resolved_config.json"
    ).read_bytes()
