import json
import shutil

import numpy as np
import pytest

from dcco import harness, models
from dcco.config import apply_overrides, config_from_dict, dump_config, load_raw
from dcco.errors import InvalidConfig, ParseError
from dcco.presets import PRESETS, get_preset


def run(raw, **overrides):
    return harness.run_experiment(config_from_dict({**raw, **overrides}))


def test_run_writes_all_artifacts(tiny_raw):
    result = run(tiny_raw)
    out = result.output_dir
    for name in ("config.yaml", "metrics.jsonl", "timing.jsonl", "final_model.params",
                 "best_model.params", "summary.json", "reports/0_linear.json",
                 "reports/1_finetune.json"):
        assert (out / name).exists(), name
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["round_index"] for r in records] == list(range(6))
    assert [r["probe_accuracy"] is not None for r in records] == [False, False, True] * 2
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [
        "round_0000003.ckpt", "round_0000006.ckpt"]
    assert result.rounds_completed == 6 and result.failed_at is None
    echoed = config_from_dict(load_raw(out / "config.yaml"))
    assert dump_config(echoed) == (out / "config.yaml").read_text()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["selected"] == "final"
    assert 0 <= summary["accuracy"]["0_linear"] <= 1


def test_identical_runs_are_bitwise_identical(tiny_raw, tmp_path):
    a = run(tiny_raw)
    b = run(tiny_raw, output_dir=str(tmp_path / "again"), workers=4)
    assert a.final_model.bitwise_equal(b.final_model)
    for name in ("metrics.jsonl", "final_model.params", "summary.json"):
        assert (a.output_dir / name).read_bytes() == (b.output_dir / name).read_bytes()


def test_resume_matches_uninterrupted_run(tiny_raw, tmp_path):
    full = run(tiny_raw)
    partial_dir = tmp_path / "partial"
    shutil.copytree(full.output_dir, partial_dir)
    # Simulate a crash right after the round-3 checkpoint with a stray
    # half-written metrics line beyond it.
    (partial_dir / "checkpoints" / "round_0000006.ckpt").unlink()
    (partial_dir / "final_model.params").unlink()
    lines = (partial_dir / "metrics.jsonl").read_text().splitlines()[:4]
    (partial_dir / "metrics.jsonl").write_text("\n".join(lines) + "\n")
    resumed = harness.run_experiment(
        config_from_dict({**tiny_raw, "output_dir": str(partial_dir)}), resume=True)
    assert resumed.final_model.bitwise_equal(full.final_model)
    assert (partial_dir / "metrics.jsonl").read_bytes() == \
        (full.output_dir / "metrics.jsonl").read_bytes()


def test_checkpoint_roundtrip_keeps_optimizer_state(tiny_raw):
    result = run(tiny_raw)
    server = harness.load_checkpoint(result.output_dir / "checkpoints" / "round_0000006.ckpt")
    assert server.round_index == 6
    assert server.model.bitwise_equal(result.final_model)
    assert server.optimizer.kind == "adam" and server.optimizer.step == 6
    assert set(server.optimizer.slots) == {f"{s}/{k}" for s in ("m", "v") for k in server.model}


@pytest.mark.parametrize("method", ["fedavg_cco", "fedavg_contrastive", "centralized_cco"])
def test_other_methods_run(tiny_raw, method):
    result = run(tiny_raw, method=method)
    summary = json.loads((result.output_dir / "summary.json").read_text())
    assert summary["method"] == method
    expected = "best" if method != "centralized_cco" else "final"
    assert summary["selected"] == expected


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_stops_and_is_recorded(tiny_raw):
    result = run(tiny_raw, server_optimizer={"kind": "sgd", "lr": 1e300, "schedule": "constant"})
    assert result.failed_at is not None
    summary = json.loads((result.output_dir / "summary.json").read_text())
    assert summary["failed_at"] == result.failed_at


def test_labeled_subset_is_disjoint_from_test(tiny_raw):
    splits = harness.build_splits(config_from_dict(tiny_raw))
    labeled, idx = harness.labeled_subset(splits, 0.5, 0)
    assert len(labeled) == 40
    assert not np.intersect1d(idx, splits.test_indices).size


def test_export_plot_data(tiny_raw, tmp_path):
    result = run(tiny_raw)
    out = tmp_path / "plot.csv"
    assert harness.export_plot_data(result.output_dir / "metrics.jsonl", out) == 6
    lines = out.read_text().splitlines()
    assert lines[0] == "round,loss,lr,probe_accuracy"
    assert len(lines) == 7
    assert lines[1].startswith("0,") and lines[1].endswith(",")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert harness.export_plot_data(empty, out) == 0
    assert out.read_text().splitlines() == ["round,loss,lr,probe_accuracy"]


def test_export_plot_rejects_bad_metrics(tmp_path):
    bad = tmp_path / "m.jsonl"
    bad.write_text('{"round_index": 0, "mean_client_loss": 1.0, "lr": 0.1}\n{oops\n')
    with pytest.raises(ParseError) as exc:
        harness.export_plot_data(bad, tmp_path / "o.csv")
    assert exc.value.location.endswith("m.jsonl:2")
    bad.write_text('{"round_index": 0}\n')
    with pytest.raises(ParseError):
        harness.export_plot_data(bad, tmp_path / "o.csv")


def test_verify_equivalence_report():
    report = harness.verify_equivalence(trials=5, seed=1)
    assert report["passed"] and report["max_deviation"] <= 1e-8
    assert {"clients", "counts", "dim"} <= set(report["trials"][0])
    assert not harness.verify_equivalence(trials=3, seed=1, tolerance=0.0)["passed"]
    with pytest.raises(InvalidConfig):
        harness.verify_equivalence(trials=0)


def test_partition_summary(tiny_raw):
    summary = harness.partition_summary(config_from_dict(tiny_raw))
    assert summary["num_clients"] == 40
    # Class exhaustion can force a mixed client; each one costs a fallback draw.
    mixed = round((1 - summary["single_class_fraction"]) * 40)
    assert summary["fallback_draws"] >= mixed
    assert summary["fallback_draws"] > 0 or mixed == 0
    assert summary["max_tv_to_global"] <= 1.0


def test_every_preset_parses():
    for name in PRESETS:
        raw = get_preset(name)
        raw["output_dir"] = "unused"
        config_from_dict(raw)
    with pytest.raises(InvalidConfig):
        get_preset("nope")


def test_one_sample_per_client_preset_runs_end_to_end(tmp_path):
    raw = apply_overrides(get_preset("table1-noniid-1spc"),
                          ["rounds=2", "probes=[{protocol: linear, steps: 5}]"])
    raw["output_dir"] = str(tmp_path / "smoke")
    result = harness.run_experiment(config_from_dict(raw))
    assert (result.output_dir / "reports" / "0_linear.json").exists()
    assert result.rounds_completed == 2


def test_config_errors_name_the_field(tiny_raw):
    cases = {
        "partition.samples_per_client": {"method": "fedavg_cco",
                                         "partition": {**tiny_raw["partition"],
                                                       "samples_per_client": 1,
                                                       "num_clients": 80}},
        "rounds": {"rounds": 0},
        "dataset.bogus": {"dataset": {**tiny_raw["dataset"], "bogus": 1}},
        "server_optimizer.lr": {"server_optimizer": {"lr": "fast"}},
        "probes[0].labeled_fraction": {"probes": [{"labeled_fraction": 2.0}]},
        "encoder.hidden_dims[0]": {"encoder": {**tiny_raw["encoder"], "hidden_dims": [7]}},
        "clients_per_round": {"clients_per_round": 41},
    }
    for field, change in cases.items():
        with pytest.raises(InvalidConfig) as exc:
            config_from_dict({**tiny_raw, **change})
        assert exc.value.field == field, (field, exc.value.field)


def test_dcco_accepts_one_sample_per_client(tiny_raw):
    raw = {**tiny_raw, "partition": {"num_clients": 80, "samples_per_client": 1, "alpha": 0.0}}
    assert config_from_dict(raw).partition.samples_per_client == 1


def test_yaml_overrides_and_float_forms(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("server_optimizer:\n  lr: 3e-3\nrounds: 10\n")
    raw = apply_overrides(load_raw(path), ["partition.alpha=1e3", "local_lr=1"])
    assert raw["server_optimizer"]["lr"] == 3e-3
    assert raw["partition"]["alpha"] == 1000.0
    config = config_from_dict({**raw, "partition": {**raw["partition"], "num_clients": 100}})
    assert config.local_lr == 1
    with pytest.raises(InvalidConfig):
        apply_overrides({}, ["no-equals-sign"])


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path))
    assert harness.default_output_root() == tmp_path


def test_best_model_tracks_probe_improvements(tiny_raw):
    result = run(tiny_raw)
    best, meta = models.load_params(result.output_dir / "best_model.params")
    summary = json.loads((result.output_dir / "summary.json").read_text())
    assert meta["round_index"] == summary["best_probe_round"]
