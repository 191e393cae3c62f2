import json
from pathlib import Path

import numpy as np
import pytest

from querywatch.data import QueryStream
from querywatch.harness.checkpoint import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_tensors,
    load_trained,
    save_tensors,
    save_trained,
)
from querywatch.harness.cli import main
from querywatch.harness.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    from_dict,
    load_config,
)
from querywatch.harness.experiments import pca3, read_csv, window_invariant
from querywatch.models import classifier_specs, Classifier
from querywatch.numerics import Rng, init_params
from querywatch.vae import VaeConfig, build_reference, build_vae, encode_mu
from querywatch.data import Dataset

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


# config


def test_defaults_and_json_round_trip():
    cfg = ExperimentConfig()
    assert cfg.detector.widths == (1.0, 5.0, 10.0, 15.0, 20.0)
    assert from_dict(json.loads(cfg.to_json())) == cfg


def test_overrides_parse_json_values():
    cfg = apply_overrides(ExperimentConfig(), ["detector.m=50", "attack.dilutions=[50, 10]", "mode=defend"])
    assert cfg.detector.m == 50 and cfg.attack.dilutions == (50.0, 10.0) and cfg.mode == "defend"


@pytest.mark.parametrize(
    "override,key",
    [
        ("detector.mm=3", "detector.mm"),
        ("nosuch.m=3", "nosuch"),
        ("detector.m=abc", "detector.m"),
        ("detector.m=5", "detector.m"),
        ("vae.recon_on_outliers=1", "vae.recon_on_outliers"),
        ("attack.fgsm_kind=pgd", "attack.fgsm_kind"),
        ("detector.deltas=[0.5, 0.25]", "detector.deltas"),
        ("mode=audit", "mode"),
    ],
)
def test_bad_overrides_name_the_key(override, key):
    with pytest.raises(ConfigError) as e:
        apply_overrides(ExperimentConfig(), [override])
    assert e.value.key == key


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(bad)
    assert load_config(SMOKE).attack.stream_length == 200


def test_sub_seeds_are_stable_and_distinct():
    a, b = ExperimentConfig(seed=1), ExperimentConfig(seed=1)
    assert a.sub_seed("vae") == b.sub_seed("vae")
    assert a.sub_seed("vae") != a.sub_seed("g") != ExperimentConfig(seed=2).sub_seed("g")


# checkpoints


def _trained_parts():
    specs = classifier_specs(6, 2, (4,))
    g = Classifier(specs, init_params(specs, Rng(0)))
    vae = build_vae(6, VaeConfig(hidden=(5,), latent_dim=3), Rng(1))
    ds = Dataset(np.random.default_rng(0).uniform(size=(7, 6)), np.zeros(7, int), 2)
    return g, vae, build_reference(vae, ds), ds


def test_trained_checkpoint_round_trip(tmp_path):
    g, vae, ref, ds = _trained_parts()
    save_trained(tmp_path / "ck", g, vae, ref)
    g2, vae2, ref2 = load_trained(tmp_path / "ck")
    np.testing.assert_array_equal(g2.predict_proba(ds.X), g.predict_proba(ds.X))
    np.testing.assert_array_equal(encode_mu(vae2, ds.X), encode_mu(vae, ds.X))
    np.testing.assert_array_equal(ref2.u, ref.u)
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert {"f_enc/L0.W", "f_mu/L0.W", "f_sigma/L0.W", "f_dec/L0.W", "u"} <= set(manifest["groups"])


def test_tensor_layout_is_contiguous_little_endian(tmp_path):
    t = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([7.5])}
    save_tensors(tmp_path, t)
    raw = np.frombuffer((tmp_path / "weights.bin").read_bytes(), "<f8")
    np.testing.assert_array_equal(raw, [0, 1, 2, 3, 4, 5, 7.5])
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["groups"]["b"] == {"shape": [1], "offset": 6, "count": 1}


def test_checkpoint_errors_are_distinct(tmp_path):
    save_tensors(tmp_path, {"a": np.zeros((2, 3))})
    with pytest.raises(CheckpointShapeError):
        load_tensors(tmp_path, {"a": (3, 2)})
    with pytest.raises(CheckpointShapeError):
        load_tensors(tmp_path, {"missing": (1,)})
    m = json.loads((tmp_path / "manifest.json").read_text())
    (tmp_path / "weights.bin").write_bytes(b"\0" * 40)
    with pytest.raises(CheckpointTruncatedError):
        load_tensors(tmp_path)
    m["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointVersionError):
        load_tensors(tmp_path)
    with pytest.raises(CheckpointError, match="train"):
        load_trained(tmp_path / "none")


# analysis helpers


def test_pca_beats_random_projections():
    g = np.random.default_rng(0)
    Z = g.normal(size=(200, 8)) * np.array([5, 4, 3, 1, 1, 0.5, 0.2, 0.1])
    coords, rank = pca3(Z)
    assert rank == 8
    captured = (coords**2).sum()
    Zc = Z - Z.mean(0)
    for _ in range(200):
        Q, _ = np.linalg.qr(g.normal(size=(8, 3)))
        assert ((Zc @ Q) ** 2).sum() <= captured + 1e-9
    # coordinates are uncorrelated and ordered by variance
    C = np.cov(coords.T)
    assert abs(C[0, 1]) < 1e-8 and C[0, 0] >= C[1, 1] >= C[2, 2]


def test_pca_degenerate_rank_is_zero_padded():
    Z = np.outer(np.arange(10.0), [1.0, 2.0, 0.0, 0.0])
    coords, rank = pca3(Z)
    assert rank == 1 and np.all(coords[:, 1:] == 0)
    assert pca3(np.ones((4, 3)))[1] == 0


def test_window_invariant_detects_misalignment():
    tags = (["NPD"] * 25 + ["PD"] * 75) * 4
    s = QueryStream(np.zeros((400, 1)), tags)
    assert window_invariant(s, 25)
    bad = list(tags)
    bad[99] = "NPD"
    assert not window_invariant(QueryStream(np.zeros((400, 1)), bad), 25)


# CLI


def test_cli_reports_config_and_checkpoint_errors(tmp_path, capsys):
    assert main(["sweep", "--out", str(tmp_path), "--set", "detector.bogus=1"]) == 2
    assert "detector.bogus" in capsys.readouterr().err
    assert main(["sweep", "--out", str(tmp_path / "empty")]) == 2
    assert "run `train` first" in capsys.readouterr().err


@pytest.mark.slow
def test_cli_smoke_pipeline(tmp_path):
    out = tmp_path / "run"
    assert main(["all", "--config", str(SMOKE), "--out", str(out)]) == 0
    for name in ("alarm_matrix.csv", "stream_summary.csv", "defense.csv", "projection.csv",
                 "evasion_report.csv", "dilution.csv", "train_report.json", "log.jsonl"):
        assert (out / name).exists(), name
    rows = read_csv(out / "dilution.csv")
    assert all(r["window_invariant"] == "True" for r in rows)
    logs = [json.loads(l) for l in (out / "log.jsonl").read_text().splitlines()]
    assert all("event" in l and "level" in l for l in logs)
    assert main(["monitor-replay", "--config", str(SMOKE), "--out", str(out), "--stream", "PD"]) == 0
    assert (out / "replay").is_dir()
