import csv
import json
from dataclasses import replace

import pytest

from mtpar.cli import main
from mtpar.data import default_specs, read_header
from mtpar.model import load_checkpoint


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "specs.json"
    p.write_text(json.dumps([replace(s, n_samples=40, n_max=6).to_dict() for s in default_specs()[:2]]))
    return p


def test_gen_stats_align_train_evaluate(tmp_path, spec_file, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--spec", str(spec_file), "--seed", "1", "--out", str(data)]) == 0
    files = sorted(str(p) for p in data.glob("*.bin"))
    assert [read_header(f).dataset_id for f in files] == [0, 1]

    freq = tmp_path / "freq.csv"
    assert main(["stats", "--out", str(freq), *files]) == 0
    rows = list(csv.DictReader(freq.open()))
    assert len(rows) == 40 and rows[0].keys() == {"dataset", "element", "count"}

    aligned = tmp_path / "aligned"
    aligned.mkdir()
    assert main(["align", "--ref", "0", "--out-dir", str(aligned), *files]) == 0
    assert all(read_header(p).aligned for p in aligned.glob("*.bin"))

    cfg = tmp_path / "run.cfg"
    cfg.write_text("batch_local = 4\nepochs = 1\nhidden = 6\nhead_width = 6\n")
    ck = tmp_path / "m.ckpt"
    args = ["train", "--mode", "taskpar", "--config", str(cfg), "--data", *files, "--mesh", "2x1",
            "--out", str(ck), "--backend", "thread"]
    assert main(args) == 0
    assert sorted(load_checkpoint(ck).heads) == [0, 1]
    assert (tmp_path / "m.metrics.csv").exists()

    mae = tmp_path / "mae.csv"
    assert main(["evaluate", "--ckpt", str(ck), "--data", *files, "--out", str(mae)]) == 0
    assert mae.read_text().startswith("model,mae_energy_0,mae_energy_1")


def test_single_spec_to_file(tmp_path):
    p = tmp_path / "one.json"
    p.write_text(json.dumps(replace(default_specs()[2], n_samples=5, n_max=5).to_dict()))
    out = tmp_path / "ds2.bin"
    assert main(["gen-data", "--spec", str(p), "--out", str(out)]) == 0
    assert read_header(out).count == 5


def test_bench_strong(tmp_path, spec_file):
    data = tmp_path / "data"
    main(["gen-data", "--spec", str(spec_file), "--seed", "1", "--out", str(data)])
    files = sorted(str(p) for p in data.glob("*.bin"))
    out = tmp_path / "bench"
    rc = main(["bench", "strong", "--mode", "base", "taskpar", "--mesh-list", "1x1", "2x1", "--beff", "8",
               "--data", *files, "--epochs", "1", "--backend", "thread", "--out", str(out)])
    assert rc == 0
    assert {p.name for p in out.iterdir()} == {"scaling.csv", "comm.csv", "scaling.svg"}


def test_errors_are_reported_not_raised(tmp_path, spec_file, capsys):
    data = tmp_path / "data"
    main(["gen-data", "--spec", str(spec_file), "--out", str(data)])
    files = [str(p) for p in data.glob("*.bin")]
    rc = main(["train", "--mode", "taskpar", "--data", *files, "--mesh", "3x1", "--out", str(tmp_path / "x"),
               "--backend", "thread"])
    assert rc == 2
    assert "one per sub-group" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--mode", "base", "--data", *files, "--mesh", "3y1", "--out", "x"])
    assert main(["bench", "weak", "--data", *files, "--out", str(tmp_path / "b")]) == 2
