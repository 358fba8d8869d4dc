from pathlib import Path

import pytest

from shiftvar import cli
from shiftvar.cli import ERROR_PREFIX, config_hash, main, read_csv, resolve_config
from shiftvar.toy import ToyModel

DATA = Path(__file__).parent / "data" / "sweep"
SMALL = ["--canvas", "24", "--glyph-size", "7", "--stroke", "2", "--sigma", "1.75",
         "--channels", "2", "--iters", "6", "--batch", "4"]


def run_ok(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    assert code == 0, err
    return out, err


def train_small(tmp_path, capsys, *extra):
    out, _ = run_ok(["toy-train", "--out", str(tmp_path), *SMALL, *extra], capsys)
    return Path(out.strip())


def eval_golden(out, capsys, *extra):
    argv = ["shift-eval", "--out", str(out), "--manifest", str(DATA / "manifest.txt"),
            "--detections", str(DATA / "dets"), "--r", "1", "--target-h", "20", "--target-w", "20",
            *extra]
    stdout, _ = run_ok(argv, capsys)
    return Path(stdout.strip())


# -- configuration ---------------------------------------------------------


def test_flags_override_config_file(tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("# toy run\nchannels = 3\nlr = 0.5  # comment\nglyph-size = 9\n")
    cfg = resolve_config("toy-train", {"lr": "0.25"}, conf)
    assert (cfg["channels"], cfg["lr"], cfg["glyph_size"]) == (3, 0.25, 9)
    assert cfg["iters"] == cli.DEFAULTS["toy-train"]["iters"]


@pytest.mark.parametrize("text", ["bogus = 1\n", "channels\n", "channels = many\n"])
def test_bad_config_file_rejected(tmp_path, text):
    conf = tmp_path / "c.txt"
    conf.write_text(text)
    with pytest.raises(cli.CliError):
        resolve_config("toy-train", {}, conf)


def test_config_hash_stability():
    a = resolve_config("toy-train", {"seed": "3"})
    b = resolve_config("toy-train", {"seed": 3, "threads": "8", "out": "elsewhere"})
    c = resolve_config("toy-train", {"seed": "4"})
    assert config_hash("toy-train", a) == config_hash("toy-train", b) != config_hash("toy-train", c)
    assert len(config_hash("toy-train", a)) == 16


def test_seed_range():
    with pytest.raises(cli.CliError):
        resolve_config("toy-train", {"seed": "-1"})
    assert resolve_config("toy-train", {"seed": str(2**64 - 1)})["seed"] == 2**64 - 1


def test_invalid_strategy_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["toy-train", "--strategy", "maxpool"])
    assert exc.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_unknown_key_in_config_file_is_single_line_error(tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("colour = blue\n")
    assert main(["toy-train", "--config", str(conf), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(ERROR_PREFIX) and "colour" in err[0]


# -- toy commands ----------------------------------------------------------


def test_toy_train_is_bit_identical(tmp_path, capsys):
    a = train_small(tmp_path / "a", capsys, "--strategy", "strided_conv", "--seed", "1")
    b = train_small(tmp_path / "b", capsys, "--strategy", "strided_conv", "--seed", "1")
    assert a.name == b.name
    for name in ("checkpoint.bin", "loss.csv", "meta.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(read_csv(a / "loss.csv")) == 6
    model = ToyModel.load(open(a / "checkpoint.bin", "rb"))
    assert model.strategy.value == "strided_conv" and model.seed == 1


def test_toy_train_threads_env_does_not_change_run_dir(tmp_path, capsys, monkeypatch):
    a = train_small(tmp_path, capsys)
    monkeypatch.setenv("EQUIVAR_THREADS", "2")
    b = train_small(tmp_path, capsys)
    assert a == b


def test_toy_sweep_three_strategies(tmp_path, capsys):
    ckpts = []
    for s in ("strided_conv", "binomial", "avg_pool"):
        ckpts += ["--checkpoint", str(train_small(tmp_path / "train", capsys, "--strategy", s) / "checkpoint.bin")]
    argv = ["toy-sweep", "--out", str(tmp_path / "sweep"), "--canvas", "24", "--glyph-size", "7", *ckpts]
    d = Path(run_ok(argv, capsys)[0].strip())
    stats = read_csv(d / "stats.csv")
    assert [row["strategy"] for row in stats] == ["strided_conv", "binomial", "avg_pool"]
    assert all("dominant_period" in row for row in stats)
    svg_text = (d / "sweep.svg").read_text()
    assert svg_text.count("<polyline") == 3 and "href" not in svg_text
    for s in ("strided_conv", "binomial", "avg_pool"):
        assert len(read_csv(d / f"sweep_{s}.csv")) == 24 - 6
    first = {p.name: p.read_bytes() for p in d.iterdir()}
    run_ok(argv, capsys)
    assert {p.name: p.read_bytes() for p in d.iterdir()} == first


def test_toy_sweep_constant_model_is_flat(tmp_path, capsys):
    m = ToyModel("binomial", channels=2)
    head = m.layers[-2][1]
    head.weight.value[...] = 0
    ck = tmp_path / "flat.bin"
    ck.write_bytes(m.to_bytes())
    d = Path(run_ok(["toy-sweep", "--out", str(tmp_path), "--canvas", "24", "--glyph-size", "7",
                     "--checkpoint", str(ck)], capsys)[0].strip())
    (row,) = read_csv(d / "stats.csv")
    assert float(row["amplitude"]) == 0.0 and row["dominant_period"] == "0"


def test_toy_sweep_missing_checkpoint(tmp_path, capsys):
    assert main(["toy-sweep", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nope.bin")]) == 1
    assert capsys.readouterr().err.startswith(ERROR_PREFIX)


# -- shift-eval / report ---------------------------------------------------


def test_shift_eval_matches_golden(tmp_path, capsys):
    d = eval_golden(tmp_path, capsys)
    assert (d / "shifts.csv").read_text() == (DATA / "golden.csv").read_text()
    deltas = read_csv(d / "delta_hmean.csv")
    assert [(row["r"], row["delta_hmean"]) for row in deltas] == [("0", "0.000000"), ("1", "1.000000")]
    dev = read_csv(d / "deviation.csv")
    assert [(row["dev_min"], row["dev_max"]) for row in dev] == [
        ("0.000000", "0.000000"), ("-0.666667", "0.333333")]
    svg_text = (d / "shift_eval.svg").read_text()
    assert svg_text.startswith("<svg") or svg_text.startswith("<?xml")
    first = {p.name: p.read_bytes() for p in d.iterdir()}
    eval_golden(tmp_path, capsys)
    assert {p.name: p.read_bytes() for p in d.iterdir()} == first


def test_shift_eval_r0_single_point(tmp_path, capsys):
    argv = ["shift-eval", "--out", str(tmp_path), "--manifest", str(DATA / "manifest.txt"),
            "--detections", str(DATA / "dets"), "--r", "0", "--target-h", "22", "--target-w", "22"]
    d = Path(run_ok(argv, capsys)[0].strip())
    assert len(read_csv(d / "shifts.csv")) == 1
    assert read_csv(d / "delta_hmean.csv")[0]["delta_hmean"] == "0.000000"


def test_shift_eval_missing_detection_file(tmp_path, capsys):
    code = main(["shift-eval", "--out", str(tmp_path), "--manifest", str(DATA / "manifest.txt"),
                 "--detections", str(DATA / "dets"), "--r", "2", "--target-h", "18", "--target-w", "18"])
    err = capsys.readouterr().err
    assert code == 1 and err.startswith(ERROR_PREFIX) and "scene" in err and len(err.strip().splitlines()) == 1


def test_shift_eval_needs_one_detector_source(tmp_path, capsys):
    assert main(["shift-eval", "--out", str(tmp_path), "--manifest", str(DATA / "manifest.txt")]) == 1
    assert capsys.readouterr().err.startswith(ERROR_PREFIX)


def test_report_rows_and_dedup(tmp_path, capsys, caplog):
    d = eval_golden(tmp_path, capsys)
    out, _ = run_ok(["report", str(d), "--r", "1"], capsys)
    lines = out.strip().splitlines()
    assert lines[0] == "strategy,dataset,config_hash,hmean_shift0,r,delta_hmean"
    assert lines[1:] == [f"strided_conv,manifest,{d.name},0.666667,1,1.000000"]
    copy = tmp_path / "copy"
    copy.mkdir()
    for p in d.iterdir():
        (copy / p.name).write_bytes(p.read_bytes())
    with caplog.at_level("WARNING", logger="shiftvar"):
        out, _ = run_ok(["report", str(d), str(copy), "--r", "1"], capsys)
    assert len(out.strip().splitlines()) == 2
    assert any("duplicates" in rec.message for rec in caplog.records)


def test_report_missing_directory(tmp_path, capsys):
    missing = tmp_path / "gone"
    assert main(["report", str(missing)]) == 1
    err = capsys.readouterr().err
    assert err.startswith(ERROR_PREFIX) and str(missing) in err
