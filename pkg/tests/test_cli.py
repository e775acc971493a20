import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from fuzzyoc import cli
from fuzzyoc.config import config_from_mapping, config_to_mapping, load_config, save_config
from fuzzyoc.data import ConfigError, load_manifest
from fuzzyoc.trainer import DivergenceError, TrainConfig

TINY = "epochs: {warmup: 1, finetune: 1, main: 2}\nrepetitions: 1\nheads_per_type: 2\nbatch_size: 16\n"


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-synce", "--out", str(root), "--certain", "18", "--fuzzy", "10", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    (base / "c.yaml").write_text(TINY)
    assert cli.main(["train", "--config", str(base / "c.yaml"), "--data", str(data), "--out",
                     str(base / "out")]) == 0
    return base


def test_gen_synce_outputs(data, tmp_path, capsys):
    for kind in ("ideal", "real", "fuzzy"):
        assert (data / f"manifest_{kind}.csv").is_file()
    assert (data / "synce_meta.csv").is_file()
    cli.main(["gen-synce", "--out", str(tmp_path / "d"), "--certain", "18", "--fuzzy", "10", "--seed", "1"])
    assert "certain=   18 fuzzy=   10" in capsys.readouterr().out
    for kind in ("ideal", "real", "fuzzy"):
        assert sha(data / f"manifest_{kind}.csv") == sha(tmp_path / "d" / f"manifest_{kind}.csv")
    n_rows = len((data / "manifest_fuzzy.csv").read_text().splitlines()) - 1
    assert n_rows == 18 * 3 + 10 * 2


def test_train_writes_run_directory(trained):
    out = trained / "out"
    for name in ("config.yaml", "metrics.csv", "best.pt", "last.pt", "state.pt"):
        assert (out / name).is_file()
    assert load_config(out / "config.yaml") == load_config(trained / "c.yaml")


def test_foc_light_single_phase(data, tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("epochs: {main: 1}\nbatch_size: 16\n")
    assert cli.main(["train", "--config", str(tmp_path / "c.yaml"), "--data", str(data), "--mode", "foc-light",
                     "--out", str(tmp_path / "o")]) == 0
    assert "phases: main\n" in capsys.readouterr().out
    phases = {line.split(",")[0] for line in (tmp_path / "o" / "metrics.csv").read_text().splitlines()[1:]}
    assert phases == {"main"}


def test_resume_identical(data, trained, tmp_path):
    args = ["train", "--config", str(trained / "c.yaml"), "--data", str(data), "--out", str(tmp_path / "o")]
    assert cli.main(args + ["--stop-after-epochs", "3"]) == 0
    assert not (tmp_path / "o" / "best.pt").exists()
    assert cli.main(args + ["--resume"]) == 0
    assert (tmp_path / "o" / "metrics.csv").read_text() == (trained / "out" / "metrics.csv").read_text()


def test_eval_consistency_plot(data, trained, tmp_path):
    ckpt = trained / "out" / "best.pt"
    rep = tmp_path / "rep.json"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--report", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert report["checkpoint_sha256"] == sha(ckpt)
    assert report["n"] == 18 + 10 + 10
    con = tmp_path / "con.json"
    assert cli.main(["consistency", "--checkpoint", str(ckpt), "--data", str(data), "--report", str(con),
                     "--from-report", str(rep)]) == 0
    c = json.loads(con.read_text())
    assert c["consistency"]["overall"] == report["consistency"]["overall"]
    assert c["consistency"]["per_cluster"] == report["consistency"]["per_cluster"]
    figs = tmp_path / "figs"
    assert cli.main(["plot", "--metrics", str(trained / "out" / "metrics.csv"), "--report", str(rep),
                     "--out", str(figs)]) == 0
    for name in ("losses.png", "per_class_f1.png", "clusters.png"):
        assert (figs / name).stat().st_size > 1000


def test_eval_oracle_checkpoint(data, trained, tmp_path, monkeypatch):
    # a perfect oracle: normal heads emit the one-hot hard label of each image
    split = load_manifest(data, data / "manifest_fuzzy.csv")
    table = {}
    for s in split.labeled + split.validation + split.unlabeled:
        table[s.image.tobytes()] = int(np.argmax(s.label.probs))
    import fuzzyoc.evaluator as ev

    def oracle(model, images, batch_size=512):
        y = np.array([table[img.tobytes()] for img in images])
        h = model.cfg.heads_per_type
        normal = np.tile(np.eye(model.cfg.k_gt)[y], (h, 1, 1))
        over = np.tile(np.eye(model.cfg.k)[y], (h, 1, 1))
        return normal, over

    monkeypatch.setattr(ev, "forward_heads", oracle)
    rep = tmp_path / "r.json"
    assert cli.main(["eval", "--checkpoint", str(trained / "out" / "best.pt"), "--data", str(data),
                     "--report", str(rep)]) == 0
    best = json.loads(rep.read_text())["best"]
    assert best["normal"]["macro_f1"] == 1.0 and best["overcluster"]["macro_f1"] == 1.0


def test_rerun_is_idempotent(data, trained, tmp_path, monkeypatch):
    digests = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        assert cli.main(["train", "--config", str(trained / "c.yaml"), "--data", str(data), "--out", "o"]) == 0
        assert cli.main(["eval", "--checkpoint", "o/best.pt", "--data", str(data), "--report", "r.json"]) == 0
        digests.append([sha(d / "o" / "metrics.csv"), sha(d / "r.json"), sha(d / "o" / "best.pt")])
    assert digests[0] == digests[1]


def test_env_overrides(data, trained, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FUZZYOC_DATA_ROOT", str(data))
    monkeypatch.setenv("FUZZYOC_SEED", "7")
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(trained / "c.yaml"), "--mode", "foc-light", "--out", str(out)]) == 0
    assert load_config(out / "config.yaml").seed == 7
    assert cli.main(["train", "--config", str(trained / "c.yaml"), "--mode", "foc-light", "--seed", "3",
                     "--out", str(tmp_path / "p")]) == 0
    assert load_config(tmp_path / "p" / "config.yaml").seed == 3
    monkeypatch.setenv("FUZZYOC_SEED", "x")
    assert cli.main(["train", "--out", str(tmp_path / "q")]) == 2
    assert "FUZZYOC_SEED" in capsys.readouterr().err


def test_exit_codes(data, tmp_path, capsys, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("epochs: {main: 1}\nlearning_rate: 0.1\n")
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    bad.write_text("lambda_u: -1\n")
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path / "o")]) == 2
    assert "lambda" in capsys.readouterr().err
    assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--data", str(data),
                     "--report", str(tmp_path / "r.json")]) == 3
    assert cli.main(["plot", "--out", str(tmp_path / "f")]) == 2

    import fuzzyoc.trainer as tr

    def boom(*a, **k):
        raise DivergenceError("non-finite supervised loss (nan)")

    monkeypatch.setattr(tr, "train_step", boom)
    (tmp_path / "c.yaml").write_text(TINY)
    assert cli.main(["train", "--config", str(tmp_path / "c.yaml"), "--data", str(data),
                     "--out", str(tmp_path / "d")]) == 4
    assert "non-finite" in capsys.readouterr().err


def _plankton_fixture(root, n=60, k=10, size=24):
    """Grayscale images with multi-annotator vote columns, some disagreeing."""
    rng = np.random.default_rng(0)
    (root / "img").mkdir(parents=True)
    lines = ["path,split," + ",".join(f"vote_{c}" for c in range(k))]
    expect = {"certain": 0, "fuzzy": 0, "unlabeled": 0}
    for i in range(n):
        c = i % k
        arr = (rng.random((size, size)) * 40).astype(np.uint8)
        arr[4 + c: 10 + c, 4:20] = 200
        Image.fromarray(arr, mode="L").save(root / "img" / f"p{i:03d}.png")
        votes = np.zeros(k, int)
        if i >= 50:
            split = "unlabeled"
            expect["unlabeled"] += 1
        elif i % 5 == 4:
            votes[c], votes[(c + 1) % k] = 3, 2
            split = "auto"
            expect["fuzzy"] += 1
        else:
            votes[c] = 5
            split = "auto"
            expect["certain"] += 1
        lines.append(f"img/p{i:03d}.png,{split}," + ",".join(map(str, votes)))
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    return expect


def test_plankton_manifest_roundtrip(tmp_path):
    expect = _plankton_fixture(tmp_path)
    split = load_manifest(tmp_path, tmp_path / "manifest.csv", val_fraction=0.2, seed=0)
    assert split.num_classes == 10
    assert len(split.labeled) + len(split.validation) == expect["certain"]
    assert len(split.unlabeled) == expect["fuzzy"] + expect["unlabeled"]
    assert split.labeled[0].image.shape == (24, 24, 1)
    fuzzy = [s for s in split.unlabeled if s.label is not None]
    assert all(np.allclose(sorted(s.label.probs)[-2:], [0.4, 0.6]) for s in fuzzy)
    (tmp_path / "c.yaml").write_text("epochs: {main: 1}\nbatch_size: 16\n")
    assert cli.main(["train", "--config", str(tmp_path / "c.yaml"), "--data", str(tmp_path),
                     "--manifest", str(tmp_path / "manifest.csv"), "--mode", "foc-light",
                     "--out", str(tmp_path / "run")]) == 0
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "best.pt"), "--data", str(tmp_path),
                     "--manifest", str(tmp_path / "manifest.csv"), "--split", "val",
                     "--report", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["n"] == len(split.validation)
    assert len(rep["best"]["normal"]["per_class_f1"]) == 10


# config file handling

def test_config_roundtrip(tmp_path):
    cfg = config_from_mapping({"epochs": {"main": 7}, "lr": {"main": 3e-4}, "augmentation": {"hue": 0.0},
                               "k": 48, "seed": 4})
    assert (cfg.epochs_main, cfg.lr_main, cfg.augmentation.hue, cfg.k, cfg.seed) == (7, 3e-4, 0.0, 48, 4)
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert config_from_mapping(config_to_mapping(TrainConfig())) == TrainConfig()
    assert config_from_mapping({"mode": "foc-light"}) == TrainConfig.light()


@pytest.mark.parametrize("raw, key", [
    ({"epoch": {"main": 1}}, "epoch.main"),
    ({"batch_size": 2.5}, "batch_size"),
    ({"mi_on_labeled": "yes"}, "mi_on_labeled"),
    ({"k": True}, "k"),
    ({"mode": "foc-light", "heads_per_type": 5}, "heads_per_type"),
])
def test_config_errors(raw, key):
    with pytest.raises(ConfigError, match=key):
        config_from_mapping(raw)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")
    (tmp_path / "l.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "l.yaml")
