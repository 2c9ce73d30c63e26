import json
from pathlib import Path

import pytest

from diseasemix.cli import main
from diseasemix.manifest import RunManifest, file_digest
from diseasemix.stats import ECI_CATEGORIES


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    code = run(["generate", "--out", out, "--seed", 11, "--m", 40, "--v", 12,
                "--k", 3, "--target-mean", 60])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def rates_dir(tmp_path_factory, cohort_dir):
    out = tmp_path_factory.mktemp("rates")
    assert run(["rates", "--cohort", cohort_dir, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def fit_dir(tmp_path_factory, cohort_dir, rates_dir):
    out = tmp_path_factory.mktemp("fit")
    code = run(["fit", "--cohort", cohort_dir, "--out", out, "--model", "pdm",
                "--k", 3, "--chains", 2, "--burnin", 10, "--samples", 20,
                "--seed", 3, "--rates-file", rates_dir / "rate_table.csv"])
    assert code == 0
    return out


def test_generate_outputs(cohort_dir):
    for name in ("diagnoses.csv", "demographics.csv", "vocabulary.txt",
                 "rates_true.csv", "eci_map.csv", "truth_theta.csv",
                 "truth_phi.csv", "truth_gamma.csv", "truth_z.csv",
                 "manifest.json"):
        assert (cohort_dir / name).exists(), name
    manifest = RunManifest.read(cohort_dir / "manifest.json")
    assert manifest.subcommand == "generate"
    assert manifest.master_seed == 11
    for rel, digest in manifest.outputs.items():
        assert file_digest(cohort_dir / rel) == digest


def test_generate_deterministic_digests(tmp_path, cohort_dir):
    out = tmp_path / "again"
    assert run(["generate", "--out", out, "--seed", 11, "--m", 40, "--v", 12,
                "--k", 3, "--target-mean", 60]) == 0
    a = RunManifest.read(cohort_dir / "manifest.json").outputs
    b = RunManifest.read(out / "manifest.json").outputs
    assert a == b


def test_generate_refuses_nonempty_out(cohort_dir, capsys):
    code = run(["generate", "--out", cohort_dir, "--seed", 1])
    assert code == 2
    assert "--force" in capsys.readouterr().err


def test_generate_requires_seed(tmp_path, capsys):
    code = run(["generate", "--out", tmp_path / "x"])
    assert code == 2
    assert "--seed" in capsys.readouterr().err


def test_seed_from_config_file(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("seed = 11\nm = 10\nv = 6\nk = 2\n")
    out = tmp_path / "from-config"
    assert run(["generate", "--config", config, "--out", out]) == 0
    manifest = RunManifest.read(out / "manifest.json")
    assert manifest.master_seed == 11
    assert manifest.config["m"] == 10


def test_flags_override_config(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("seed = 11\nm = 10\nv = 6\nk = 2\n")
    out = tmp_path / "override"
    assert run(["generate", "--config", config, "--out", out, "--m", "8"]) == 0
    assert RunManifest.read(out / "manifest.json").config["m"] == 8


def test_generate_preset_patient_count(tmp_path):
    out = tmp_path / "preset"
    assert run(["generate", "--out", out, "--seed", 1, "--preset", "osteoporosis"]) == 0
    demo = (out / "demographics.csv").read_text().strip().splitlines()
    assert len(demo) - 1 == 388


def test_rates_outputs(rates_dir):
    assert (rates_dir / "rate_fit.csv").exists()
    assert (rates_dir / "rate_table.csv").exists()
    header = (rates_dir / "rate_fit.csv").read_text().splitlines()[0]
    assert header == "code,sex,coef_index,value,deviance,converged"


def test_fit_pdm_outputs(fit_dir):
    for name in ("theta.csv", "phi.csv", "diagnostics.csv", "gamma.csv",
                 "acceptance.csv", "manifest.json"):
        assert (fit_dir / name).exists(), name


def test_fit_pdm_without_rates_is_actionable(tmp_path, cohort_dir, capsys):
    code = run(["fit", "--cohort", cohort_dir, "--out", tmp_path / "nofit",
                "--model", "pdm", "--seed", 1])
    assert code == 2
    err = capsys.readouterr().err
    assert "rates" in err and "--rates-file" in err


def test_fit_lda_small(tmp_path, cohort_dir):
    out = tmp_path / "lda"
    code = run(["fit", "--cohort", cohort_dir, "--out", out, "--model", "lda",
                "--k", 3, "--chains", 1, "--burnin", 10, "--samples", 20,
                "--seed", 2])
    assert code == 0
    assert (out / "theta.csv").exists()
    assert not (out / "gamma.csv").exists()


def test_missing_cohort_is_data_error(tmp_path, capsys):
    code = run(["rates", "--cohort", tmp_path / "nope", "--out", tmp_path / "r"])
    assert code == 3


def test_posterior_cluster_survive_eci_embed(tmp_path, cohort_dir, rates_dir, fit_dir):
    posterior_dir = tmp_path / "post"
    assert run(["posterior", "--cohort", cohort_dir, "--fit", fit_dir,
                "--out", posterior_dir,
                "--rates-file", rates_dir / "rate_table.csv"]) == 0
    lines = (posterior_dir / "posterior.csv").read_text().strip().splitlines()
    assert lines[0] == "patient_id,topic,weight"
    assert len(lines) - 1 == 40 * 3

    cluster_dir = tmp_path / "clust"
    assert run(["cluster", "--features-file", posterior_dir / "posterior.csv",
                "--out", cluster_dir, "--g-min", 2, "--g-max", 3, "--seed", 4]) == 0
    assert (cluster_dir / "assignments.csv").exists()

    surv_dir = tmp_path / "surv"
    assert run(["survive", "--cohort", cohort_dir,
                "--assignments", cluster_dir / "assignments.csv",
                "--out", surv_dir, "--algorithm", "kmeans", "--g", 2]) == 0
    grid = (surv_dir / "p_grid.csv").read_text().strip().splitlines()
    assert grid[0] == "algorithm,G,chi_square,degrees_of_freedom,p_value,error"
    assert (surv_dir / "km.svg").exists()
    assert (surv_dir / "km_curves.csv").exists()

    eci_dir = tmp_path / "eci"
    assert run(["eci", "--cohort", cohort_dir, "--mapping", cohort_dir / "eci_map.csv",
                "--out", eci_dir]) == 0
    header = (eci_dir / "eci.csv").read_text().splitlines()[0]
    assert header.startswith("patient_id,score,band,")
    assert len(header.split(",")) == 3 + 29

    embed_dir = tmp_path / "emb"
    assert run(["embed", "--fit", fit_dir, "--out", embed_dir,
                "--perplexity", 2.5, "--tsne-iters", 260, "--seed", 5]) == 0
    assert (embed_dir / "embedding.svg").exists()
    emb_lines = (embed_dir / "embedding.csv").read_text().strip().splitlines()
    assert len(emb_lines) - 1 == 12  # one row per code


def test_pipeline_and_replay(tmp_path, cohort_dir):
    out = tmp_path / "pipe"
    args = ["pipeline", "--cohort", cohort_dir, "--out", out, "--model", "pdm",
            "--k", 3, "--chains", 1, "--burnin", 10, "--samples", 15,
            "--seed", 9, "--g-min", 2, "--g-max", 3,
            "--perplexity", 2.5, "--tsne-iters", 260]
    assert run(args) == 0
    for name in ("rate_table.csv", "theta.csv", "posterior.csv", "assignments.csv",
                 "p_grid.csv", "selection.csv", "km_curves.csv", "km.svg",
                 "report.csv", "report.txt", "embedding.csv", "embedding.svg",
                 "manifest.json"):
        assert (out / name).exists(), name
    grid = (out / "p_grid.csv").read_text().strip().splitlines()
    assert len(grid) - 1 == 3 * 2  # algorithms x G values
    report = (out / "report.csv").read_text()
    for category in ECI_CATEGORIES:
        assert f"eci_{category}" in report

    # same master seed, second run: identical numeric outputs
    out2 = tmp_path / "pipe2"
    assert run(args[:4] + [out2] + args[5:]) == 0
    a = RunManifest.read(out / "manifest.json").outputs
    b = RunManifest.read(out2 / "manifest.json").outputs
    assert a == b

    # replay from the manifest reproduces every digest
    replay_out = tmp_path / "replayed"
    assert run(["replay", "--manifest", out / "manifest.json",
                "--out", replay_out]) == 0


def test_replay_detects_changed_inputs(tmp_path, cohort_dir, rates_dir):
    out = tmp_path / "fit-replay"
    assert run(["fit", "--cohort", cohort_dir, "--out", out, "--model", "lda",
                "--k", 2, "--chains", 1, "--burnin", 5, "--samples", 10,
                "--seed", 8]) == 0
    manifest_path = out / "manifest.json"
    payload = json.loads(manifest_path.read_text())
    some_input = next(iter(payload["inputs"]))
    original = Path(some_input).read_bytes()
    try:
        Path(some_input).write_bytes(original + b"\n# tampered\n")
        assert run(["replay", "--manifest", manifest_path,
                    "--out", tmp_path / "r2"]) == 3
    finally:
        Path(some_input).write_bytes(original)
    assert run(["replay", "--manifest", manifest_path, "--out", tmp_path / "r3"]) == 0


def test_unknown_model_usage_error(tmp_path, cohort_dir, capsys):
    code = run(["fit", "--cohort", cohort_dir, "--out", tmp_path / "bad",
                "--model", "vae", "--seed", 1])
    assert code == 2
