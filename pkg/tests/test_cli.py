import csv
import json

import numpy as np
import pytest
from scipy import stats

from neurospex import cli
from neurospex.objectives import MetricsReport

SMALL_MANIFEST = {"subjects": 2, "trials_per_subject": 3, "trial_duration_s": 2.0, "val_trials": 1}
TINY_MODEL = {"n_x": 16, "adc_blocks": 1, "ca_tcn_repeats": 1, "tcn_units_per_repeat": 1, "tcn_hidden": 16}
QUICK_TRAIN = {"steps_per_epoch": 2, "max_epochs": 1, "hop_s": 0.25, "max_val_segments": 6}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "manifest.json.in", SMALL_MANIFEST)
    assert cli.main(["generate", "--config", cfg, "--out", str(root / "corpus")]) == 0
    return root / "corpus"


def run_config(tmp_path, corpus, seed=0, **model):
    return write_json(
        tmp_path / f"run{seed}.json",
        {"toy": True, "model": dict(TINY_MODEL, **model), "train": dict(QUICK_TRAIN, seed=seed), "corpus": str(corpus)},
    )


# -- generate ---------------------------------------------------------------------------

def test_generate_default_toy_manifest(tmp_path, monkeypatch):
    calls = {}

    def fake_build(manifest, out, workers=1):
        calls["manifest"] = manifest
        (out / "manifest.json").parent.mkdir(parents=True, exist_ok=True)

    monkeypatch.setattr(cli, "build_corpus", fake_build)
    assert cli.main(["generate", "--out", str(tmp_path / "c")]) == 0
    m = calls["manifest"]
    assert (m.subjects, m.trials_per_subject, m.trial_duration_s) == (4, 4, 60.0)


def test_generate_writes_corpus(corpus):
    assert len(list(corpus.glob("subject_*/trial_*"))) == 6
    doc = json.loads((corpus / "manifest.json").read_text())
    assert sum(t["split"] == "test" for t in doc["trials"]) == 2


def test_generate_refuses_existing_without_force(corpus, capsys):
    assert cli.main(["generate", "--out", str(corpus)]) == 1
    assert "--force" in capsys.readouterr().err


def test_generate_force_overwrites(tmp_path):
    cfg = write_json(tmp_path / "m.json", dict(SMALL_MANIFEST, trials_per_subject=2, val_trials=0))
    out = tmp_path / "c"
    assert cli.main(["generate", "--config", cfg, "--out", str(out)]) == 0
    before = (out / "subject_0/trial_0/mixture.wav").read_bytes()
    assert cli.main(["generate", "--config", cfg, "--out", str(out), "--force", "--seed", "5"]) == 0
    assert (out / "subject_0/trial_0/mixture.wav").read_bytes() != before


def test_generate_full_manifest_dry_run(tmp_path):
    cfg = write_json(tmp_path / "full.json", {"preset": "full"})
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "p"), "--dry-run"]) == 0
    plan = json.loads((tmp_path / "p/plan.json").read_text())
    assert len(plan["trials"]) == 128
    assert plan["total_hours"] == pytest.approx(12.8)


@pytest.mark.parametrize("doc", ["{not json", json.dumps({"subjects": 0}), json.dumps({"colour": 1}), json.dumps([1, 2])])
def test_generate_invalid_manifest(tmp_path, doc, capsys):
    p = tmp_path / "bad.json"
    p.write_text(doc)
    assert cli.main(["generate", "--config", str(p), "--out", str(tmp_path / "x")]) == 1
    assert "error" in capsys.readouterr().err


# -- usage and runtime errors --------------------------------------------------------------

def test_usage_errors_exit_one():
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["generate"]) == 1
    assert cli.main(["train", "--seed", "x"]) == 1
    assert cli.main(["ablate"]) == 1


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "generate" in capsys.readouterr().out


def test_runtime_failure_exits_two(tmp_path, capsys):
    cfg = write_json(tmp_path / "r.json", {"toy": True, "model": TINY_MODEL, "train": QUICK_TRAIN})
    assert cli.main(["train", "--config", cfg, "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert "failed" in capsys.readouterr().err


# -- train / evaluate / report -----------------------------------------------------------------

def test_train_then_evaluate(corpus, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", run_config(tmp_path, corpus), "--out", str(out)]) == 0
    assert (out / "best.json").exists() and (out / "config.json").exists()
    assert cli.main(["train", "--config", run_config(tmp_path, corpus), "--out", str(out)]) == 1
    assert cli.main(["evaluate", str(out), "--corpus", str(corpus), "--split", "test"]) == 0
    rows = read_rows(out / "metrics_test.csv")
    manifest = json.loads((corpus / "manifest.json").read_text())
    n_test = sum(t["split"] == "test" for t in manifest["trials"])
    # 2 s trials, 0.5 s windows at the training hop of 0.25 s
    assert len(rows) == n_test * 7


def test_report_two_runs(tmp_path):
    rng = np.random.default_rng(0)
    base = [{"subject": 0, "trial": 0, "segment": i, "si_sdr": rng.normal(3, 1), "si_sdri": rng.normal(3, 1)} for i in range(20)]
    better = [dict(r, si_sdri=r["si_sdri"] + 2 + rng.normal(0, 0.5), si_sdr=r["si_sdr"] + 2) for r in base]
    MetricsReport(base).write(tmp_path / "runs/a", "metrics_test")
    MetricsReport(better).write(tmp_path / "runs/b", "metrics_test")
    assert cli.main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == 0
    table = read_rows(tmp_path / "rep/report_test.csv")
    assert [r["run"] for r in table] == ["a", "b"]
    assert set(table[0]) == {"run", "segments", "si_sdr", "si_sdri", "p_vs_first"}
    assert float(table[1]["p_vs_first"]) < 1e-3
    violin = read_rows(tmp_path / "rep/violin_test.csv")
    assert len(violin) == 40 and set(violin[0]) == {"run", "subject", "trial", "segment", "si_sdri"}
    text = (tmp_path / "rep/report_test.txt").read_text()
    assert "SI-SDR" in text and "SI-SDRi" in text and "PESQ" not in text


def test_report_includes_stoi_when_present(tmp_path):
    rows = [{"subject": 0, "trial": 0, "segment": i, "si_sdr": 1.0 * i, "si_sdri": 0.5 * i, "stoi": 0.7} for i in range(4)]
    MetricsReport(rows).write(tmp_path / "r", "metrics_val")
    assert cli.main(["report", str(tmp_path / "r"), "--split", "val"]) == 0
    assert set(read_rows(tmp_path / "r/report_val.csv")[0]) == {"run", "segments", "si_sdr", "si_sdri", "stoi", "p_vs_first"}


def test_report_without_results(tmp_path):
    assert cli.main(["report", str(tmp_path)]) == 1


@pytest.mark.parametrize("seed", range(5))
def test_paired_t_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, 30)
    b = a + rng.normal(0.3, 1, 30)
    t, p = cli.paired_t_test(a, b)
    ref = stats.ttest_rel(a, b)
    assert t == pytest.approx(ref.statistic, rel=1e-10)
    assert p == pytest.approx(ref.pvalue, rel=1e-8)


# -- ablation -----------------------------------------------------------------------------------

def ablation_spec(tmp_path, corpus, grid, **kw):
    doc = {"grid": grid, "seeds": [0], "corpus": str(corpus), "model": TINY_MODEL, "train": QUICK_TRAIN}
    doc.update(kw)
    return write_json(tmp_path / "spec.json", doc)


def test_ablation_spec_validation():
    with pytest.raises(ValueError):
        cli.AblationSpec.from_dict({"grid": [["lstm", "ca", 1]]})
    with pytest.raises(ValueError):
        cli.AblationSpec.from_dict({"grid": [["adc", "ca", 3]]})
    with pytest.raises(ValueError):
        cli.AblationSpec.from_dict({"grid": "table9"})
    spec = cli.AblationSpec.from_dict({"grid": "table2"})
    assert [c[2] for c in spec.grid] == [1, 2, 4, 6, 8] and spec.splits == ["test"]
    spec = cli.AblationSpec.from_dict({"grid": "table1"})
    assert spec.grid == [("direct", "direct", 1), ("adc", "direct", 1), ("sa", "ca", 1), ("conv", "ca", 1), ("adc", "ca", 1)]
    assert spec.splits == ["val"]


def test_ablation_table1_rows(corpus, tmp_path):
    spec = ablation_spec(tmp_path, corpus, "table1")
    assert cli.main(["ablate", "--config", spec, "--out", str(tmp_path / "abl")]) == 0
    rows = read_rows(tmp_path / "abl/ablation.csv")
    assert [(r["eeg_variant"], r["fusion_variant"]) for r in rows] == [
        ("direct", "direct"), ("adc", "direct"), ("sa", "ca"), ("conv", "ca"), ("adc", "ca")
    ]
    # the consolidated table is exactly recomputable from the per-cell CSVs
    for r in rows:
        cell = tmp_path / "abl" / cli.cell_name((r["eeg_variant"], r["fusion_variant"], int(r["adc_blocks"])), 0)
        per_cell = MetricsReport.read_csv(cell / "metrics_val.csv").metric("si_sdri").value
        assert abs(float(r["val_si_sdri"]) - per_cell) < 1e-9


def test_ablation_table2_rows(corpus, tmp_path, monkeypatch):
    seen = []
    monkeypatch.setattr(cli, "run_training", lambda cfg, out, **kw: seen.append(cfg.model.adc_blocks))
    spec = ablation_spec(tmp_path, corpus, "table2")
    assert cli.main(["ablate", "--config", spec, "--out", str(tmp_path / "abl")]) == 0
    assert seen == [1, 2, 4, 6, 8]
    assert [int(r["adc_blocks"]) for r in read_rows(tmp_path / "abl/ablation.csv")] == [1, 2, 4, 6, 8]


def test_ablation_failed_cell_is_recorded(corpus, tmp_path):
    # three heads cannot split 64 EEG channels, so the attention variant fails while conv trains
    spec = ablation_spec(tmp_path, corpus, [["sa", "ca", 1], ["conv", "ca", 1]], model=dict(TINY_MODEL, heads=3), splits=["val"])
    assert cli.main(["ablate", "--config", spec, "--out", str(tmp_path / "abl")]) == 0
    cells = {r["cell"]: r for r in read_rows(tmp_path / "abl/cells.csv")}
    assert cells["sa_ca_n1_seed0"]["status"] == "failed" and "heads" in cells["sa_ca_n1_seed0"]["error"]
    assert cells["conv_ca_n1_seed0"]["status"] == "ok"
    rows = read_rows(tmp_path / "abl/ablation.csv")
    assert rows[0]["n_seeds"] == "0" and rows[1]["n_seeds"] == "1"


def test_single_cell_ablation_equals_manual_run(corpus, tmp_path):
    spec = ablation_spec(tmp_path, corpus, [["adc", "ca", 1]], splits=["test"])
    assert cli.main(["ablate", "--config", spec, "--out", str(tmp_path / "abl")]) == 0
    manual = tmp_path / "manual"
    cfg = run_config(tmp_path, corpus, eeg_variant="adc", fusion_variant="ca", adc_blocks=1)
    assert cli.main(["train", "--config", cfg, "--out", str(manual)]) == 0
    assert cli.main(["evaluate", str(manual), "--corpus", str(corpus), "--split", "test"]) == 0
    cell = tmp_path / "abl/adc_ca_n1_seed0"
    assert (cell / "best.bin").read_bytes() == (manual / "best.bin").read_bytes()
    assert (cell / "metrics_test.csv").read_text() == (manual / "metrics_test.csv").read_text()
