import csv
import json

import numpy as np
import pytest

from adexsbi import cli
from adexsbi.errors import ConfigError
from adexsbi.neuron import DeviceConfig, run_experiment
from adexsbi.pipeline import (RunConfig, analyze_posterior, cmd_pipeline, cmd_simulate,
                              export_report, spike_times, stage_seed, trace_metrics)
from adexsbi.snpe import Posterior, device_simulator

TINY = {
    "dataset.size": "48", "ae.epochs": "1", "ae.batch_size": "8",
    "snpe.rounds": "2", "snpe.sims_per_round": "30", "snpe.batch_size": "10", "snpe.n_atoms": "5",
    "snpe.max_epochs": "1", "analysis.n_samples": "20", "analysis.n_predictive": "2",
    "analysis.n_baseline": "10", "analysis.bins": "8",
}


def write_config(path, values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


# -- config ------------------------------------------------------------------------

def test_config_defaults_and_overrides(tmp_path):
    dev = tmp_path / "dev.cfg"
    DeviceConfig(current_sigma=3.0).save(dev)
    cfg = RunConfig.from_file(write_config(tmp_path / "run.cfg", {"device.config": "dev.cfg",
                                                                  "device.g_L": "12", "snpe.rounds": "3"}))
    assert cfg.device.current_sigma == 3.0 and cfg.device.g_L == 12.0
    assert cfg.snpe.rounds == 3 and cfg.snpe.sims_per_round == 1000
    assert cfg.snpe.target.tolist() == [200, 500, 200, 300]


@pytest.mark.parametrize("values", [{"nosection": "1"}, {"foo.bar": "1"}, {"snpe.bogus": "1"},
                                    {"snpe.rounds": "x"}, {"snpe.rounds": "0"},
                                    {"dataset.split": "0.5,0.5,0.5"}, {"device.config": "missing.cfg"},
                                    {"snpe.target_codes": "1,2,3"}, {"analysis.n_baseline": "5"}])
def test_config_errors(values):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(values)


def test_config_hash_changes_iff_field_changes():
    base = RunConfig.from_mapping({})
    assert RunConfig.from_mapping({"snpe.rounds": "20"}).hash() == base.hash()
    keys = {"device.g_L": "11", "dataset.size": "10", "ae.epochs": "3", "snpe.n_atoms": "5",
            "analysis.bins": "9"}
    hashes = {RunConfig.from_mapping({k: v}).hash() for k, v in keys.items()}
    assert len(hashes) == len(keys) and base.hash() not in hashes


def test_stage_seeds_distinct():
    assert len({stage_seed(1, s) for s in ("generate", "train-ae", "infer", "analyze")}) == 4
    assert stage_seed(1, "infer") == stage_seed(1, "infer") != stage_seed(2, "infer")


# -- metrics ------------------------------------------------------------------------

def test_trace_metrics_identity_and_offset():
    x = run_experiment([200, 500, 200, 300], DeviceConfig(), 0)
    mse, dcount, dt = trace_metrics(x, x)
    assert mse == 0 and dcount == 0 and len(dt) > 0 and np.all(dt == 0)
    y = np.clip(x + np.float32(1 / 1023), 0, None)
    z = np.full(1024, 0.25)
    assert trace_metrics(z, z + 1 / 1023)[0] == pytest.approx(9.56e-7, rel=1e-3)
    assert trace_metrics(x, y)[0] == pytest.approx((1 / 1023) ** 2, rel=1e-3)


def test_spike_detection_counts_device_spikes():
    from adexsbi.neuron import run_experiment_detailed
    agree = 0
    rng = np.random.default_rng(0)
    for _ in range(20):
        e = run_experiment_detailed(rng.integers(0, 1023, 4), DeviceConfig(), int(rng.integers(1e6)))
        agree += abs(len(spike_times(e.normalized)) - len(e.raw.spike_times)) <= 1
    assert agree >= 18


def test_trial_to_trial_spike_counts_close():
    dev = DeviceConfig()
    a = run_experiment([200, 500, 200, 300], dev, 1)
    b = run_experiment([200, 500, 200, 300], dev, 2)
    mse, dcount, dt = trace_metrics(a, b)
    assert abs(dcount) <= 2 and mse > 0


# -- simulate -------------------------------------------------------------------------

def test_cmd_simulate_csv(tmp_path):
    dev = DeviceConfig()
    trace = cmd_simulate(dev, [200, 500, 200, 300], 3, tmp_path / "a.csv", tmp_path / "s.csv")
    cmd_simulate(dev, [200, 500, 200, 300], 3, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert "time_ms" in rows[0][0] and dev.hash() in rows[0][1]
    assert len(rows) == 1025
    assert np.array_equal(np.array([float(r[1]) for r in rows[1:]], dtype=np.float32), trace)
    assert len(list(csv.reader(open(tmp_path / "s.csv")))) > 1


# -- CLI ------------------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path):
    out = tmp_path / "t.csv"
    assert cli.main(["simulate", "--codes", "1,2,3,4", "--seed", "0", "--out", str(out)]) == 0
    assert cli.main(["simulate", "--codes", "1,2,3,4", "--out", str(out)]) == 1  # --seed missing
    assert cli.main(["simulate", "--codes", "1,2,3,2000", "--seed", "0", "--out", str(out)]) == 1
    assert cli.main(["simulate", "--codes", "1,2,3,4", "--seed", "0", "--set", "device.nope=1",
                     "--out", str(out)]) == 1
    assert cli.main(["train-ae", "--seed", "0", "--dataset", str(tmp_path / "none.bin"),
                     "--out", str(tmp_path / "ae")]) == 1
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage" * 10)
    assert cli.main(["train-ae", "--seed", "0", "--dataset", str(bad), "--out", str(tmp_path / "ae")]) == 2


def test_cli_stages(tmp_path):
    cfg = write_config(tmp_path / "run.cfg", TINY)
    base = ["--config", str(cfg), "--seed", "5"]
    assert cli.main(["gen-dataset", *base, "--out", str(tmp_path / "d.bin")]) == 0
    assert cli.main(["train-ae", *base, "--dataset", str(tmp_path / "d.bin"),
                     "--out", str(tmp_path / "ae")]) == 0
    assert cli.main(["infer", *base, "--ae", str(tmp_path / "ae" / "best.ckpt"),
                     "--out", str(tmp_path / "inf")]) == 0
    assert cli.main(["analyze", *base, "--posterior", str(tmp_path / "inf" / "posterior.ckpt"),
                     "--out", str(tmp_path / "an")]) == 0
    rows = list(csv.reader(open(tmp_path / "an" / "samples.csv")))
    assert len(rows) == 21 and all(len(r) == 4 for r in rows)


# -- pipeline -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = RunConfig.from_mapping(TINY)
    manifest = cmd_pipeline(cfg, 11, out)
    return cfg, out, manifest


def test_pipeline_manifest(pipeline_run):
    _, out, manifest = pipeline_run
    assert [s["name"] for s in manifest["stages"]] == ["generate", "train-ae", "infer", "analyze"]
    assert all(s["status"] == "ran" and s["seconds"] >= 0 for s in manifest["stages"])
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk["config_hash"] == manifest["config_hash"]
    for stage in on_disk["stages"]:
        for rel in stage["outputs"]:
            assert (out / rel).is_file()


def test_pipeline_resume(pipeline_run):
    cfg, out, _ = pipeline_run
    again = cmd_pipeline(cfg, 11, out)
    assert [s["status"] for s in again["stages"]] == ["skipped"] * 4
    (out / "posterior.ckpt").unlink()
    redo = cmd_pipeline(cfg, 11, out)
    assert [s["status"] for s in redo["stages"]] == ["skipped", "skipped", "ran", "ran"]


def test_pipeline_csvs_parse_back(pipeline_run):
    cfg, out, _ = pipeline_run
    a = out / "analysis"
    samples = np.loadtxt(a / "samples.csv", delimiter=",", skiprows=1)
    assert samples.shape == (cfg.analysis.n_samples, 4)
    marg = list(csv.DictReader(open(a / "marginals.csv")))
    assert len(marg) == 4 * cfg.analysis.bins
    assert sum(int(r["count"]) for r in marg) == 4 * cfg.analysis.n_samples
    pred = list(csv.reader(open(a / "predictive_traces.csv")))
    assert len(pred) == 1025 and len(pred[0]) == 2 + cfg.analysis.n_predictive + cfg.analysis.n_baseline
    pairs = list(csv.reader(open(a / "pairs.csv")))
    assert len(pairs) == 1 + 6 * cfg.analysis.n_samples
    for name in ("marginals.svg", "pairs.svg", "predictive.svg"):
        assert (a / name).read_text().startswith("<svg")
    report = json.loads((a / "report.json").read_text())
    assert "corr_b_gtauw" in report and len(report["median"]) == 4


def test_analyze_reproducible_bytes(pipeline_run, tmp_path):
    cfg, out, _ = pipeline_run
    post = Posterior.load(out / "posterior.ckpt")
    sim = device_simulator(cfg.device)
    dirs = []
    for k in range(2):
        rep = analyze_posterior(post, sim, 30, 7, 2, 10, cfg.snpe.target)
        export_report(rep, tmp_path / str(k), 8)
        dirs.append(tmp_path / str(k))
    for f in sorted(p.name for p in dirs[0].iterdir()):
        assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()


def test_analyze_requires_baseline_trials(pipeline_run):
    cfg, out, _ = pipeline_run
    post = Posterior.load(out / "posterior.ckpt")
    with pytest.raises(ValueError):
        analyze_posterior(post, device_simulator(cfg.device), 10, 0, 2, 5, cfg.snpe.target)
