import json
import shutil

import pytest
import yaml

from ddmd.cli import EXIT_CONFIG, EXIT_LOCKED, EXIT_MISSING, EXIT_OK, EXIT_RUNTIME, main, tree_digest

FAST = ["--preset", "smoke", "--set", "train.iterations=6", "--set", "autoencoder.epochs=2"]


def ddmd(out, *args):
    return main([args[0], "--out", str(out), *FAST, *args[1:]])


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "full"
    assert ddmd(out, "run", "--variant", "full") == EXIT_OK
    return out


def test_run_produces_all_artifacts(full_run):
    for rel in ("config.yaml", "data/manifest.json", "ae1/descriptor.json", "ae2/descriptor.json",
                "features/scores.json", "features/histogram.csv", "diffusion/full/descriptor.json",
                "diffusion/full/loss.csv", "samples/full/index.json", "eval/full/summary.json",
                "eval/full/per_image.csv"):
        assert (full_run / rel).is_file(), rel
    stage = json.loads((full_run / "stages" / "train-diff-full.json").read_text())
    assert set(stage) >= {"config_hash", "seeds", "inputs", "outputs"}
    assert set(stage["inputs"]) == {"data", "ae1", "ae2"}
    assert not (full_run / ".ddmd.lock").exists()


def test_synth_is_reproducible(tmp_path):
    assert ddmd(tmp_path / "a", "synth", "--seed", "7") == EXIT_OK
    assert ddmd(tmp_path / "b", "synth", "--seed", "7") == EXIT_OK
    assert tree_digest(tmp_path / "a" / "data") == tree_digest(tmp_path / "b" / "data")
    assert ddmd(tmp_path / "c", "synth", "--seed", "8") == EXIT_OK
    assert tree_digest(tmp_path / "a" / "data") != tree_digest(tmp_path / "c" / "data")


def test_zero_normal_slices_is_a_config_error(tmp_path, capsys):
    assert ddmd(tmp_path / "x", "synth", "--n-normal", "0") == EXIT_CONFIG
    assert "n_normal" in capsys.readouterr().err


def test_missing_prerequisites_name_the_stage(tmp_path, capsys):
    assert ddmd(tmp_path / "x", "train-diff", "--variant", "mini") == EXIT_MISSING
    assert "synth" in capsys.readouterr().err
    assert ddmd(tmp_path / "x", "synth") == EXIT_OK
    assert ddmd(tmp_path / "x", "features") == EXIT_MISSING
    assert "train-ae" in capsys.readouterr().err
    assert ddmd(tmp_path / "x", "sample", "--variant", "mini") == EXIT_MISSING


def test_variant_mismatch_with_checkpoint(full_run, capsys):
    code = ddmd(full_run, "sample", "--variant", "light", "--checkpoint", str(full_run / "diffusion" / "full"))
    assert code == EXIT_CONFIG
    assert "variant" in capsys.readouterr().err


def test_rerun_is_idempotent(full_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(full_run, out)
    before = json.loads((out / "stages" / "train-diff-full.json").read_text())
    assert ddmd(out, "train-ae", "--variant", "full") == EXIT_OK
    assert ddmd(out, "train-diff", "--variant", "full") == EXIT_OK
    after = json.loads((out / "stages" / "train-diff-full.json").read_text())
    assert after == before
    assert tree_digest(out / "ae1") == tree_digest(full_run / "ae1")


def test_config_drift_warns_or_fails(full_run, tmp_path, capsys, caplog):
    out = tmp_path / "drift"
    shutil.copytree(full_run, out)
    drift = ["--set", "data.lesion_contrast=0.9"]
    assert ddmd(out, "features", "--variant", "full", "--strict", *drift) == EXIT_CONFIG
    assert "changed since" in capsys.readouterr().err
    assert ddmd(out, "features", "--variant", "full", *drift) == EXIT_OK
    assert "changed since 'train-ae-mixture'" in caplog.text


def test_lock_sentinel(tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".ddmd.lock").write_text("123")
    assert ddmd(out, "synth") == EXIT_LOCKED
    assert ".ddmd.lock" in capsys.readouterr().err


def test_divergence_is_a_runtime_failure(tmp_path):
    out = tmp_path / "nan"
    assert ddmd(out, "synth") == EXIT_OK
    code = ddmd(out, "train-diff", "--variant", "mini", "--set", "train.lr=1e30", "--set", "train.iterations=30")
    assert code == EXIT_RUNTIME


def test_init_config_round_trips(tmp_path, capsys):
    assert main(["init-config", "--preset", "smoke", "--seed", "3"]) == EXIT_OK
    d = yaml.safe_load(capsys.readouterr().out)
    assert d["seed"] == 3 and d["data"]["H"] == 32
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(d))
    assert main(["init-config", "--config", str(path), "--write", str(tmp_path / "d.yaml")]) == EXIT_OK
    assert yaml.safe_load((tmp_path / "d.yaml").read_text()) == d


def test_bad_config_values(tmp_path):
    assert main(["init-config", "--set", "nope.key=1"]) == EXIT_CONFIG
    assert main(["init-config", "--set", "sampler.threshold=1.5"]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("[1, 2")
    assert main(["init-config", "--config", str(bad)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--variant", "huge"])
    assert exc.value.code == 2


def test_report(full_run, capsys):
    assert ddmd(full_run, "report", "--variant", "full") == EXIT_OK
    rep = json.loads((full_run / "report.json").read_text())
    assert "full" in rep["evaluations"]
    assert "inter_global" in rep["discrepancy"]


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "ddmd", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "train-diff" in proc.stdout
