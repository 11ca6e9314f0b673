import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from siaa import checkpoint
from siaa.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, ablation_grid, main
from siaa.config import ConfigError, load_config, parse_config
from siaa.data import load_dataset, load_images, read_image
from siaa.toy import write_toy_experiment

SMALL = dict(version=1, seed=0, train_per_class=60, val_per_class=10, epochs=10, detector_epochs=10,
             embed_dim=64, augment_detector=False, augment_attacker=False)


def write_config(path, **overrides):
    path = Path(path)
    path.write_text(yaml.safe_dump({**SMALL, **overrides}))
    return path


def run(config, out, *command):
    return main(["--config", str(config), "--out", str(out), *command])


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Toy folders, a config, and an output directory holding a trained head and detector."""
    root = tmp_path_factory.mktemp("exp")
    paths = write_toy_experiment(root / "data")
    config = write_config(root / "exp.yaml", **paths)
    out = root / "out"
    assert run(config, out, "train-head") == EXIT_OK
    assert run(config, out, "train-detector") == EXIT_OK
    return {"root": root, "config": config, "out": out, "paths": paths}


def read_table(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- config parsing


def test_fractions_and_relative_paths(tmp_path):
    (tmp_path / "d").mkdir()
    cfg = write_config(tmp_path / "c.yaml", epsilon="8/255", alpha="2/255", detector_data="d")
    config = load_config(cfg)
    assert config.epsilon == 8 / 255 and config.alpha == 2 / 255
    assert config.detector_data == str(tmp_path / "d")


def test_seed_flag_overrides_and_is_required(tmp_path):
    raw = {k: v for k, v in SMALL.items() if k != "seed"}
    with pytest.raises(ConfigError):
        parse_config(raw)
    assert parse_config(raw, seed=7).seed == 7
    assert parse_config(SMALL, seed=7).seed == 7


@pytest.mark.parametrize("bad", [
    {"version": 2},
    {"unknown_key": 1},
    {"epochs": "ten"},
    {"epochs": 2.5},
    {"augment_detector": "yes"},
    {"epsilon": "8/0"},
    {"ablate_depths": 2},
    {"backbone": {"name": "toy"}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        parse_config({**SMALL, **bad})


def test_config_hash_tracks_values():
    a, b = parse_config(SMALL), parse_config({**SMALL, "seed": 1})
    assert a.hash() == parse_config(dict(SMALL)).hash()
    assert a.hash() != b.hash()


# ---------------------------------------------------------------- exit codes


def test_missing_dataset_is_a_config_error(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", detector_data=str(tmp_path / "nope"))
    assert run(cfg, tmp_path / "out", "train-detector") == EXIT_CONFIG
    assert not (tmp_path / "out" / "detector.safetensors").exists()


def test_missing_config_file(tmp_path):
    assert run(tmp_path / "absent.yaml", tmp_path / "out", "train-head") == EXIT_CONFIG


def test_siaa_without_head_is_missing_artifact(experiment, tmp_path):
    assert run(experiment["config"], tmp_path, "attack", "--attack", "siaa") == EXIT_MISSING
    assert run(experiment["config"], tmp_path, "attack", "--attack", "pgd-l") == EXIT_MISSING


def test_whitebox_without_detector_is_missing_artifact(experiment, tmp_path):
    assert run(experiment["config"], tmp_path, "attack", "--attack", "pgd") == EXIT_MISSING
    assert run(experiment["config"], tmp_path, "evaluate", "--attack", "pgd-vit") == EXIT_MISSING


def test_unknown_subcommand_exits_via_argparse(experiment):
    with pytest.raises(SystemExit):
        main(["--config", str(experiment["config"]), "frobnicate"])


# ---------------------------------------------------------------- train-head


def test_train_head_outputs(experiment):
    out = experiment["out"]
    assert (out / "fphead.safetensors").is_file()
    trace = read_table(out / "fphead_trace.csv")
    assert [int(r["epoch"]) for r in trace] == list(range(SMALL["epochs"]))
    assert all(float(r["total"]) >= 0 for r in trace)
    assert (out / "attacker_manifest.csv").is_file()


def test_train_head_rerun_is_bit_identical(experiment, tmp_path):
    assert run(experiment["config"], tmp_path, "train-head") == EXIT_OK
    for name in ("fphead.safetensors", "fphead_trace.csv", "attacker_manifest.csv"):
        assert (tmp_path / name).read_bytes() == (experiment["out"] / name).read_bytes()


def test_seed_change_changes_checkpoint(experiment, tmp_path):
    assert main(["--config", str(experiment["config"]), "--out", str(tmp_path), "--seed", "5",
                 "train-head"]) == EXIT_OK
    assert checkpoint.file_hash(tmp_path / "fphead.safetensors") != \
        checkpoint.file_hash(experiment["out"] / "fphead.safetensors")


def test_provenance_sidecar(experiment):
    side = json.loads((experiment["out"] / "provenance" / "train-head.json").read_text())
    assert side["config_hash"] == load_config(experiment["config"]).hash()
    assert side["seed"] == 0 and side["resolved_config"]["epochs"] == SMALL["epochs"]
    for name, digest in side["artifacts"].items():
        assert checkpoint.file_hash(experiment["out"] / name) == digest


# ---------------------------------------------------------------- attack / evaluate


@pytest.mark.parametrize("attack", ["siaa", "pgd", "pgd-vit", "pgd-l"])
def test_attack_outputs_respect_budget(experiment, attack):
    out = experiment["out"]
    assert run(experiment["config"], out, "attack", "--attack", attack) == EXIT_OK
    test = load_images(load_dataset(experiment["paths"]["test_data"]))
    adv = load_images(load_dataset(out / f"attack-{attack}"))
    assert adv.ids == test.ids
    assert np.abs(adv.images - test.images).max() <= 8 / 255 + 1e-9
    meta = [json.loads(line) for line in (out / f"attack-{attack}" / "metadata.jsonl").read_text().splitlines()]
    assert len(meta) == len(test)
    assert all(m["attack"] == attack and len(m["objective_trace"]) == 14 for m in meta)
    assert all(m["linf"] <= 8 / 255 + 1e-9 for m in meta)


def test_zero_budget_attack_reproduces_inputs(experiment, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", **experiment["paths"], epsilon=0.0,
                       fphead=str(experiment["out"] / "fphead.safetensors"))
    assert run(cfg, tmp_path / "out", "attack", "--attack", "siaa") == EXIT_OK
    test_root = Path(experiment["paths"]["test_data"])
    for entry in load_dataset(test_root).entries:
        produced = tmp_path / "out" / "attack-siaa" / entry.path
        assert produced.read_bytes() == (test_root / entry.path).read_bytes()


def test_evaluate_report_and_records(experiment):
    out = experiment["out"]
    if not (out / "attack-siaa").exists():
        assert run(experiment["config"], out, "attack", "--attack", "siaa") == EXIT_OK
    assert run(experiment["config"], out, "evaluate", "--attack", "siaa") == EXIT_OK
    report = json.loads((out / "report-siaa.json").read_text())
    m = report["metrics"]
    assert m["total"] == 60 and m["pre_auc"] >= 0.95
    assert m["asr"] >= 0.8 and m["post_auc"] < m["pre_auc"]
    records = read_table(out / "records-siaa.csv")
    assert len(records) == 60
    flipped = sum(r["label"] == r["pre_label"] != r["post_label"] for r in records)
    assert flipped == m["flipped"]
    first = report["metrics"]
    assert run(experiment["config"], out, "evaluate", "--attack", "siaa") == EXIT_OK
    assert json.loads((out / "report-siaa.json").read_text())["metrics"] == first


def test_identity_adversarial_directory_gives_zero_asr(experiment, tmp_path):
    assert run(experiment["config"], tmp_path, "evaluate", "--attack", "siaa",
               "--adversarial", experiment["paths"]["test_data"]) == EXIT_MISSING  # no detector in tmp_path
    cfg = write_config(tmp_path / "c.yaml", **experiment["paths"],
                       detector=str(experiment["out"] / "detector.safetensors"))
    assert run(cfg, tmp_path, "evaluate", "--attack", "siaa",
               "--adversarial", experiment["paths"]["test_data"]) == EXIT_OK
    m = json.loads((tmp_path / "report-siaa.json").read_text())["metrics"]
    assert m["asr"] == 0.0 and m["flipped"] == 0
    assert m["pre_auc"] == m["post_auc"]
    assert m["mean_ssim"] == 1.0 and m["mean_wpsnr"] is None


def test_single_backbone_transfer_matches_evaluation(experiment, tmp_path):
    assert run(experiment["config"], tmp_path, "transfer") == EXIT_OK
    rows = read_table(tmp_path / "transfer.csv")
    assert len(rows) == 1 and rows[0]["source"] == rows[0]["target"] == "toy"
    out = experiment["out"]
    if not (out / "attack-siaa").exists():
        run(experiment["config"], out, "attack", "--attack", "siaa")
    assert run(experiment["config"], out, "evaluate", "--attack", "siaa") == EXIT_OK
    m = json.loads((out / "report-siaa.json").read_text())["metrics"]
    assert float(rows[0]["asr"]) == m["asr"]
    assert float(rows[0]["post_auc"]) == m["post_auc"]


# ---------------------------------------------------------------- ablate / export


def test_ablation_row_per_combination(experiment, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", **experiment["paths"], ablate_depths=[1, 2],
                       ablate_few_shot=[0, 20], ablate_aug_off=[False], ablate_swap=[False, True])
    assert run(cfg, tmp_path / "out", "ablate") == EXIT_OK
    rows = read_table(tmp_path / "out" / "ablation.csv")
    assert len(rows) == len(ablation_grid(load_config(cfg))) == 8
    keys = {(r["l1_depth"], r["l2_train"], r["l3_aug_unknown"], r["l4_dataset_swap"]) for r in rows}
    assert len(keys) == 8
    assert {r["l2_train"] for r in rows} == {"ALL", "20"}
    assert all(0 <= float(r["asr"]) <= 1 for r in rows)


def test_ablation_missing_attacker_side(experiment, tmp_path):
    paths = {k: v for k, v in experiment["paths"].items() if k != "attacker_data"}
    cfg = write_config(tmp_path / "c.yaml", **paths, ablate_depths=[1], ablate_swap=[True])
    assert run(cfg, tmp_path / "out", "ablate") == EXIT_CONFIG


@pytest.mark.parametrize("layer", ["fphead", "detector"])
def test_export_embeddings(experiment, layer):
    out = experiment["out"]
    assert run(experiment["config"], out, "export-embeddings", "--layer", layer) == EXIT_OK
    with open(out / f"embeddings-{layer}.tsv", newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    stages = {r["stage"] for r in rows}
    assert stages == {"backbone", "layer1"}
    assert len(rows) == 2 * 60


def test_exported_rows_match_direct_features(experiment):
    from siaa.cli import get_backbone

    out = experiment["out"]
    if not (out / "embeddings-fphead.tsv").exists():
        run(experiment["config"], out, "export-embeddings")
    with open(out / "embeddings-fphead.tsv", newline="") as f:
        row = next(csv.DictReader(f, delimiter="\t"))
    backbone = get_backbone(load_config(experiment["config"]))
    img = read_image(Path(experiment["paths"]["test_data"]) / row["id"])
    direct = backbone(img[None])[0].detach().numpy()
    np.testing.assert_allclose(np.array(row["vector"].split(), dtype=float), direct, rtol=1e-12, atol=1e-15)
