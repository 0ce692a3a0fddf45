import json

import numpy as np
import pytest

from onsetkit.audio import OnsetAnnotations, save_annotations
from onsetkit.cli import main
from onsetkit.errors import DivergenceError
from onsetkit.models import build_model, save_model


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clicorpus")
    code = main(["synth", "--out", str(root), "--files", "2", "--duration", "5",
                 "--seed", "3"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("climodel") / "v1.model"
    save_model(build_model("tcn_v1", seed=0), path)
    return path


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["eval"]) == 1
    assert main(["synth", "--out", "x", "--no-such-flag"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_help_exits_zero():
    assert main(["--help"]) == 0
    assert main(["detect", "--help"]) == 0


def test_eval_identical_files(tmp_path, capsys):
    ann = OnsetAnnotations(np.array([0.5, 1.0, 2.25]))
    save_annotations(ann, tmp_path / "ref.onsets")
    assert main(["eval", str(tmp_path / "ref.onsets"), str(tmp_path / "ref.onsets"),
                 "--tolerance", "0.025"]) == 0
    assert capsys.readouterr().out.strip() == "P=1.000 R=1.000 F1=1.000"


def test_eval_respects_tolerance(tmp_path, capsys):
    save_annotations(OnsetAnnotations(np.array([1.0, 2.0])), tmp_path / "ref.onsets")
    save_annotations(OnsetAnnotations(np.array([1.02, 2.02])), tmp_path / "est.onsets")
    main(["eval", str(tmp_path / "est.onsets"), str(tmp_path / "ref.onsets")])
    assert "F1=1.000" in capsys.readouterr().out
    main(["eval", str(tmp_path / "est.onsets"), str(tmp_path / "ref.onsets"),
          "--tolerance", "0.01"])
    assert "F1=0.000" in capsys.readouterr().out


def test_eval_missing_file_is_data_error(tmp_path, capsys):
    save_annotations(OnsetAnnotations(np.array([1.0])), tmp_path / "ref.onsets")
    assert main(["eval", str(tmp_path / "absent.onsets"), str(tmp_path / "ref.onsets")]) == 2
    assert "error" in capsys.readouterr().err


def test_synth_refuses_overwrite(corpus, capsys):
    assert main(["synth", "--out", str(corpus), "--files", "2", "--duration", "5"]) == 2
    assert "force" in capsys.readouterr().err
    assert main(["synth", "--out", str(corpus), "--files", "2", "--duration", "5",
                 "--seed", "3", "--force"]) == 0


def test_synth_corpus_config(tmp_path):
    spec = {"instruments": [{"name": "solo", "role": "voicing", "profile_seed": 2}],
            "files_per_instrument": 2, "file_duration": 5.0, "tempo": 170.0, "seed": 1}
    (tmp_path / "corpus.json").write_text(json.dumps(spec))
    assert main(["synth", "--out", str(tmp_path / "c"), "--config",
                 str(tmp_path / "corpus.json")]) == 0
    assert (tmp_path / "c" / "solo_01.wav").exists()
    assert (tmp_path / "c" / "solo_02.wav").exists()


def test_features_command(corpus, tmp_path, capsys):
    wav = next(corpus.glob("*.wav"))
    out = tmp_path / "f.npz"
    assert main(["features", str(wav), "--out", str(out)]) == 0
    data = np.load(out)
    assert data["values"].shape == (500, 81)
    assert int(data["frame_rate"]) == 100


def test_detect_then_eval_runs(corpus, model_file, tmp_path, capsys):
    wav = str(corpus / "drone_tone_02.wav")
    est = tmp_path / "est.onsets"
    assert main(["detect", str(model_file), wav, "--out", str(est)]) == 0
    assert est.exists()
    assert main(["eval", str(est), str(corpus / "drone_tone_02.onsets")]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("P=") and "F1=" in last


def test_pretrain_finetune_cli(corpus, tmp_path):
    base = tmp_path / "base.model"
    assert main(["pretrain", str(corpus), "--out", str(base), "--variant", "tcn_v1",
                 "--instruments", "snap_noise", "--epochs", "1", "--seed", "0"]) == 0
    assert base.exists()
    adapted = tmp_path / "adapted.model"
    assert main(["finetune", str(base), str(corpus), "ring_bell", "--out", str(adapted),
                 "--freeze", "ft_Conv3", "--epochs", "1", "--seed", "0"]) == 0
    assert adapted.exists()
    # bad freeze id is a usage error
    assert main(["finetune", str(base), str(corpus), "ring_bell", "--out", str(adapted),
                 "--freeze", "ft_Out", "--epochs", "1"]) == 1


def test_grid_and_report_cli(corpus, model_file, tmp_path, capsys):
    config = {
        "corpus": str(corpus),
        "base_models": {"tcn_v1": str(model_file)},
        "models": ["tcn_v1"],
        "instruments": ["drone_tone", "snap_noise"],
        "freeze_configs": ["ft", "ft_Conv3"],
        "epochs": 1,
        "out_dir": str(tmp_path / "results"),
    }
    (tmp_path / "exp.json").write_text(json.dumps(config))
    assert main(["grid", "--config", str(tmp_path / "exp.json")]) == 0
    csv_path = tmp_path / "results" / "results.csv"
    assert csv_path.exists()
    assert (tmp_path / "results" / "summary.md").exists()
    assert (tmp_path / "results" / "config.json").exists()
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 2 + 4  # format comment + header + 4 rows
    assert main(["report", str(csv_path), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.md").exists()


def test_divergence_maps_to_exit_3(monkeypatch, corpus, model_file, tmp_path, capsys):
    import onsetkit.cli as cli

    def explode(*a, **kw):
        raise DivergenceError(4)

    monkeypatch.setattr(cli, "finetune", explode)
    code = main(["finetune", str(model_file), str(corpus), "ring_bell",
                 "--out", str(tmp_path / "x.model"), "--epochs", "1"])
    assert code == 3
    assert "epoch 4" in capsys.readouterr().err
