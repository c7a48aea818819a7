import json

import numpy as np
import pytest

from spikedisc.cli import EXIT_CONFIG, EXIT_NUMERIC, main


def write_cfg(path, **kw):
    lines = [f"{k} = {json.dumps(v)}" for k, v in kw.items() if not isinstance(v, dict)]
    for k, v in kw.items():
        if isinstance(v, dict):
            lines.append(f"[{k}]")
            lines += [f"{kk} = {json.dumps(vv)}" for kk, vv in v.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.toml"
    spec.write_text("[avtoy]\nn_classes = 3\nper_class = 12\n")
    assert main(["gen-data", "--spec", str(spec), "--seed", "0", "--out", str(root / "data")]) == 0
    common = dict(T=2, epochs=1, batch_size=16, data_dir=str(root / "data"),
                  model={"num_classes": 3}, optimizer={"lr": 0.01})
    for mod in ("visual", "audio"):
        cfg = write_cfg(root / f"{mod}.toml", modality=mod, out_dir=str(root / mod), **common)
        assert main(["train", "--config", cfg]) == 0
    return root


def test_eval_and_analyze(workspace, capsys):
    root = workspace
    assert main(["eval", "--ckpt", str(root / "visual" / "last.ckpt"), "--data", str(root / "data"),
                 "--split", "train", "--export-features", str(root / "v.npy"),
                 "--confusion", str(root / "conf.csv")]) == 0
    assert (root / "conf.csv").read_text().count("\n") == 3
    capsys.readouterr()
    assert main(["analyze", "--bank", str(root / "v.npy"), "--out", str(root / "ana"),
                 "--ckpt", str(root / "visual" / "last.ckpt"), "--data", str(root / "data")]) == 0
    report = json.loads((root / "ana" / "report.json").read_text())
    assert report["lemmas"]["lemma2_max_deviation"] < 1e-12
    assert (root / "ana" / "bank_distances.csv").exists()
    assert (root / "ana" / "bank_distances.classes.json").exists()


def test_fuse(workspace):
    root = workspace
    cfg = write_cfg(root / "fusion.toml", modality="fusion", T=2, epochs=1, data_dir=str(root / "data"),
                    out_dir=str(root / "fusion"))
    assert main(["fuse", "--visual", str(root / "visual" / "last.ckpt"),
                 "--audio", str(root / "audio" / "last.ckpt"), "--config", cfg]) == 0
    assert main(["eval", "--ckpt", str(root / "fusion" / "last.ckpt"), "--data", str(root / "data")]) == 0


def test_config_errors_exit_2(workspace, tmp_path, capsys):
    bad = write_cfg(tmp_path / "bad.toml", modality="radar")
    assert main(["train", "--config", bad]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(workspace / "data")]) == EXIT_CONFIG
    # audio checkpoint against visual-only expectations: wrong modality for fuse
    assert main(["fuse", "--visual", str(workspace / "audio" / "last.ckpt"),
                 "--audio", str(workspace / "audio" / "last.ckpt"),
                 "--config", write_cfg(tmp_path / "f.toml", modality="fusion", data_dir=str(workspace / "data"))]) \
        == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_numeric_fault_exit_3(workspace, tmp_path):
    from spikedisc.io import load_checkpoint, save_checkpoint

    arrays, meta = load_checkpoint(workspace / "visual" / "last.ckpt")
    key = next(k for k in arrays if k.startswith("param/"))
    arrays[key] = np.full_like(arrays[key], np.nan)
    save_checkpoint(tmp_path / "nan.ckpt", arrays, meta)
    code = main(["eval", "--ckpt", str(tmp_path / "nan.ckpt"), "--data", str(workspace / "data")])
    assert code == EXIT_NUMERIC


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("gen-data", "train", "eval", "fuse", "analyze"):
        assert cmd in out
