import json
import tempfile
from pathlib import Path

import pytest

from fmnet.core.container import read_tensor
from fmnet.main import main


def tiny_config(out: Path, **overrides) -> dict:
    body = {
        "scenario": {"render_dims": [16, 16]},
        "network": {
            "block_widths": [4, 6, 8], "depth": 1, "clip_len": 3, "lstm_hidden": 5, "fc_dim": 6,
            "input_dims": [16, 16, 3],
        },
        "data": {"train_sequences": 2, "val_sequences": 1, "clips_per_sequence": 2},
        "train": {
            "batch_size": 2, "episodes": 2, "stage1_episodes": 1, "lr_drop_after": 1,
            "paths": ["PH", "FL"], "seed": 3,
        },
        "out_dir": str(out),
    }
    body.update(overrides)
    return body


def write_config(directory: Path, body: dict) -> str:
    path = directory / "config.json"
    path.write_text(json.dumps(body), encoding="utf-8")
    return str(path)


def test_missing_config_is_usage_error():
    """Testa arquivo de configuração inexistente: código 2."""
    with tempfile.TemporaryDirectory() as tmp:
        assert main(["train", "--config", str(Path(tmp) / "nada.json")]) == 2


def test_unknown_key_is_usage_error():
    """Testa chave fora do esquema: código 2."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), {"train": {"batch": 16}})
        assert main(["train", "--config", config]) == 2


def test_unknown_path_is_config_error():
    """Testa caminho de mimetismo inexistente: código 3."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), {"train": {"paths": ["PX"]}})
        assert main(["train", "--config", config]) == 3


def test_unknown_preset_is_config_error():
    """Testa preset inexistente: código 3."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), {"preset": "kitti"})
        assert main(["train", "--config", config]) == 3


def test_render_dims_mismatch_is_config_error():
    """Testa render_dims diferente de input_dims: código 3."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), {"scenario": {"render_dims": [16, 16]}})
        assert main(["train", "--config", config]) == 3


def test_missing_data_is_data_error():
    """Testa treino sem dados gerados: código 4."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), tiny_config(Path(tmp) / "out"))
        assert main(["train", "--config", config]) == 4


def test_missing_subcommand_exits_with_usage():
    """Testa chamada sem subcomando."""
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == 2


def test_eval_requires_checkpoint():
    """Testa eval sem --checkpoint: código 2."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), tiny_config(Path(tmp) / "out"))
        assert main(["eval", "--config", config]) == 2


def test_check_inflate_passes(capsys):
    """Testa check-inflate numa rede mínima em 64 bits."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), tiny_config(Path(tmp) / "out"))
        code = main(["check-inflate", "--config", config, "--trials", "2", "--float64"])
    assert code == 0
    assert capsys.readouterr().out.startswith("PASS, max_err=")


def test_pipeline_end_to_end(capsys):
    """Testa gen-data, train, eval e export-embeddings sobre a mesma pasta de saída."""
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "out"
        config = write_config(Path(tmp), tiny_config(out))

        assert main(["gen-data", "--config", config]) == 0
        assert (out / "data" / "train" / "train-0000-c000" / "aux_psp_high").exists()
        assert (out / "data" / "val" / "val-0000-c001" / "aux_flow_low").exists()

        assert main(["train", "--config", config]) == 0
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert set(report) == {"stage1", "final"}
        assert (out / "seed.txt").read_text(encoding="utf-8").strip() == "3"
        assert (out / "metrics.csv").exists()

        checkpoint = str(out / "checkpoints" / "final")
        assert main(["eval", "--config", config, "--checkpoint", checkpoint]) == 0
        evaluated = json.loads((out / "eval.json").read_text(encoding="utf-8"))
        assert evaluated["mae"] == pytest.approx(report["final"]["mae"], rel=1e-6)

        assert (Path(checkpoint) / "eval.json").exists()

        assert main(["export-embeddings", "--config", config, "--checkpoint", checkpoint, "--level", "middle"]) == 0
        assert read_tensor(out / "embeddings_middle").shape == (2, 7)

        assert main(["check-inflate", "--config", config, "--checkpoint", checkpoint, "--float64"]) == 0


def test_gen_data_is_reproducible():
    """Testa gen-data --seed 7 duas vezes: diretórios de dados idênticos byte a byte."""
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp), tiny_config(Path(tmp) / "out"))
        trees = []
        for name in ("a", "b"):
            out = Path(tmp) / name
            assert main(["gen-data", "--config", config, "--seed", "7", "--out", str(out)]) == 0
            data = out / "data"
            trees.append({p.relative_to(data).as_posix(): p.read_bytes() for p in sorted(data.rglob("*")) if p.is_file()})
        assert (Path(tmp) / "a" / "seed.txt").read_text(encoding="utf-8").strip() == "7"
    assert "train/manifest.json" in trees[0]
    assert trees[0] == trees[1]
