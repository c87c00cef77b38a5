import csv
import json

import pytest
import yaml

from distillkit.cli import main, manifest_config, verify_manifest
from distillkit.config import ConfigError, load_config, parse_config

SMALL = {
    "data": {"name": "mini", "classes": 3, "per_class": 12, "test_per_class": 6, "image_shape": [3, 8, 8]},
    "distill": {"ipc": 2, "batch_real": 6, "iterations": 3, "checkpoint_every": 2,
                "extractor": {"family": "convnet", "image_size": 8, "width": 8}},
    "embedder": {"epochs": 2, "spec": {"family": "convnet", "image_size": 8, "width": 8}},
    "eval": {"arch": {"family": "convnet", "image_size": 8, "width": 4}, "repeats": 2,
             "recipe": {"epochs": 2, "batch_size": 16}},
    "continual": {"steps": 3, "buffer_per_class": 2, "orders": 2, "nets": 1},
}


def _write(path, tree):
    path.write_text(yaml.safe_dump(tree))
    return str(path)


@pytest.fixture
def small_cfg(tmp_path):
    return _write(tmp_path / "small.yaml", SMALL)


@pytest.fixture(scope="module")
def distilled(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "small.yaml", SMALL)
    assert main(["distill", "--config", cfg, "--out", str(root / "run"), "--quiet"]) == 0
    return root / "run", cfg


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_distill_writes_manifest(distilled):
    out, _ = distilled
    manifest = json.loads((out / "manifest.json").read_text())
    names = {f["path"] for f in manifest["files"]}
    assert {"config.yaml", "synthetic.npz", "synthetic.json", "iterations.csv", "embedder.npz"} <= names
    assert "checkpoint_000002.npz" in names
    assert manifest["command"] == "distill" and manifest["version"]
    assert verify_manifest(out)
    assert len(_rows(out / "iterations.csv")) == 3


def test_manifest_config_round_trip(distilled):
    out, cfg = distilled
    assert manifest_config(out) == load_config(cfg)
    assert load_config(out / "config.yaml") == load_config(cfg)


def test_tampered_output_fails_verification(distilled, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(distilled[0], copy)
    with open(copy / "iterations.csv", "a") as f:
        f.write("\n")
    assert not verify_manifest(copy)


def test_rerun_is_reproducible(distilled, tmp_path):
    out, cfg = distilled
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "again"), "--quiet"]) == 0
    for name in ("synthetic.npz", "synthetic.json", "embedder.npz"):
        assert (out / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    strip = lambda rows: [{k: v for k, v in r.items() if k != "ms"} for r in rows]  # noqa: E731
    assert strip(_rows(out / "iterations.csv")) == strip(_rows(tmp_path / "again" / "iterations.csv"))


def test_seed_flag_changes_run(distilled, tmp_path):
    out, cfg = distilled
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "s"), "--seed", "5", "--quiet"]) == 0
    assert manifest_config(tmp_path / "s").distill.seed == 5
    assert (out / "synthetic.npz").read_bytes() != (tmp_path / "s" / "synthetic.npz").read_bytes()


def test_eval_checkpoint_report(distilled, tmp_path):
    out, cfg = distilled
    code = main(["eval", "--config", cfg, "--out", str(tmp_path / "e"), "--checkpoint", str(out / "synthetic.npz"),
                 "--quiet"])
    assert code == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["repeats"] == 2 and len(report["accuracies"]) == 2
    assert report["trained_on"] == "distill"
    assert verify_manifest(tmp_path / "e")


@pytest.mark.parametrize("baseline", ["random", "kcenter", "full"])
def test_eval_baselines(small_cfg, tmp_path, baseline):
    assert main(["eval", "--config", small_cfg, "--out", str(tmp_path), "--baseline", baseline, "--quiet"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["source"] in (f"coreset:{baseline}", "full")


def test_eval_needs_one_source(small_cfg, tmp_path, capsys):
    assert main(["eval", "--config", small_cfg, "--out", str(tmp_path), "--quiet"]) == 2
    assert _error(capsys)["field"] == "checkpoint"


def test_xarch_table(distilled, tmp_path):
    out, cfg = distilled
    assert main(["xarch", "--config", cfg, "--out", str(tmp_path), "--checkpoint", str(out / "synthetic"),
                 "--quiet"]) == 0
    rows = _rows(tmp_path / "xarch.csv")
    assert [r["arch"] for r in rows] == ["convnet", "resnet18", "alexnet", "vgg11"]
    assert float(rows[0]["drop"]) == 0.0


def test_sweep_rows(small_cfg, tmp_path):
    code = main(["sweep", "--config", small_cfg, "--out", str(tmp_path), "--axis", "beta",
                 "--values", "0.1,1,2", "--quiet"])
    assert code == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert [float(r["value"]) for r in rows] == [0.1, 1.0, 2.0]
    assert all(r["status"] == "ok" for r in rows)
    assert manifest_config(tmp_path).sweep.values == (0.1, 1.0, 2.0)


def test_sweep_bad_values(small_cfg, tmp_path, capsys):
    assert main(["sweep", "--config", small_cfg, "--out", str(tmp_path), "--values", "a,b"]) == 2
    assert _error(capsys)["field"] == "sweep.values"


def test_continual_csv(small_cfg, tmp_path):
    assert main(["continual", "--config", small_cfg, "--out", str(tmp_path), "--quiet"]) == 0
    rows = _rows(tmp_path / "continual.csv")
    assert [(r["method"], r["step"]) for r in rows] == [(m, str(s)) for m in ("distill", "random") for s in (1, 2, 3)]


def test_diagnose_two_checkpoints(distilled, tmp_path):
    out, cfg = distilled
    code = main(["diagnose", "--config", cfg, "--out", str(tmp_path), "--embedder", str(out / "embedder"),
                 "--checkpoint", str(out / "checkpoint_000002"), "--checkpoint", str(out / "synthetic"), "--quiet"])
    assert code == 0
    records = json.loads((tmp_path / "diagnostics.json").read_text())["records"]
    assert len(records) == 2
    assert all(len(r["dispersion"]) == 3 for r in records)
    assert len(_rows(tmp_path / "projection_syn_1.csv")) == 6
    assert len(_rows(tmp_path / "projection_real.csv")) == 36


def test_zero_lr_rejected(tmp_path, capsys):
    tree = dict(SMALL, distill=dict(SMALL["distill"], optimizer={"lr": 0}))
    cfg = _write(tmp_path / "bad.yaml", tree)
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = _error(capsys)
    assert err["exit"] == 2 and err["error"] == "config"
    assert "optimizer.lr" in err["field"]


def test_unknown_key_named(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.yaml", {"distill": {"ipcc": 3}})
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert _error(capsys)["field"] == "distill.ipcc"


def test_wrong_type_named(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.yaml", {"distill": {"ipc": "ten"}})
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert _error(capsys)["field"] == "distill.ipc"


def test_malformed_yaml(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("distill: [unclosed\n")
    assert main(["distill", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_missing_inputs_are_io_errors(tmp_path, small_cfg, capsys):
    assert main(["distill", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 4
    assert _error(capsys)["error"] == "io"
    assert main(["eval", "--config", small_cfg, "--out", str(tmp_path / "o"),
                 "--checkpoint", str(tmp_path / "nope")]) == 4


def test_missing_image_folder(tmp_path, capsys):
    cfg = _write(tmp_path / "f.yaml", {"data": {"source": "folder", "train_path": str(tmp_path / "none"),
                                                "test_path": str(tmp_path / "none")}})
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "o")]) == 4


@pytest.mark.parametrize("value", ["0", "-2", "many"])
def test_thread_env_validated(small_cfg, tmp_path, monkeypatch, capsys, value):
    monkeypatch.setenv("DISTILLKIT_THREADS", value)
    assert main(["distill", "--config", small_cfg, "--out", str(tmp_path)]) == 2
    assert _error(capsys)["field"] == "DISTILLKIT_THREADS"


def test_dataset_name_mismatch():
    with pytest.raises(ConfigError) as info:
        parse_config({"data": {"name": "a"}, "distill": {"dataset": "b"}})
    assert info.value.field == "distill.dataset"
