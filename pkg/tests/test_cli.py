import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from queuenet import cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_exact_mmc_wait_probability(capsys):
    code, out, _ = run(["exact-mmc", "--lambda", 1, "--mu", 1, "--c", 2, "--l", 10], capsys)
    assert code == 0
    rec = json.loads(out)
    assert len(rec["probs"]) == 10
    assert 1 - rec["probs"][0] - rec["probs"][1] == pytest.approx(1 / 3)
    assert rec["wait_probability"] == pytest.approx(1 / 3)


def test_unstable_input_is_validation_error(capsys):
    code, out, err = run(["exact-mmc", "--lambda", 3, "--mu", 1, "--c", 2], capsys)
    assert code == 1 and out == ""
    rec = json.loads(err)
    assert rec["command"] == "exact-mmc" and "unstable" in rec["message"]


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["exact-mmc", "--mu", "1", "--c", "2", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_baseline_single(capsys):
    code, out, _ = run(["baseline", "--lambda", 1, "--mu", 1, "--c", 2, "--variant", "exact_markovian"], capsys)
    assert code == 0 and json.loads(out)["mean_L"] == pytest.approx(4 / 3)


def test_pipeline_and_replay(workdir, capsys):
    steps = [
        ["gen-data", "--system", "ggc", "--count", 6, "--arrivals", 5000, "--seed", 3, "--out", "d.jsonl"],
        ["train", "--data", "d.jsonl", "--out", "m.bin", "--epochs", 2, "--hidden", "8,8", "--seed", 1],
        ["infer", "--model", "m.bin", "--in", "d.jsonl", "--out", "p.jsonl"],
        ["baseline", "--meta", "d.jsonl", "--variant", "klb", "--out", "b.jsonl"],
        ["evaluate", "--truth", "d.jsonl", "--pred", "nn=p.jsonl", "--pred", "klb=b.jsonl", "--out", "r.csv"],
        ["optimize", "--model", "m.bin", "--arrival", CONFIGS / "arrival_exp.json",
         "--service-shape", CONFIGS / "service_gamma_scv4.json", "--out", "surface.csv"],
        ["simulate", "--spec", CONFIGS / "mm2_rho08.json", "--arrivals", 5000, "--out", "sim.json"],
        ["ci", "--spec", CONFIGS / "mm2_rho08.json", "--reps", 3, "--arrivals", 5000, "--out", "ci.json"],
        ["exact-mmc", "--mu", 0.6, "--c", 2, "--out", "mmc.json"],
    ]
    for argv in steps:
        code, _, err = run(argv, capsys)
        assert code == 0, err
    for out in ("d.jsonl", "m.bin", "p.jsonl", "b.jsonl", "r.csv", "surface.csv", "sim.json", "ci.json", "mmc.json"):
        manifest = json.loads(Path(out + ".manifest.json").read_text())
        assert set(manifest) >= {"command", "argv", "flags", "seed", "schema", "started", "finished", "inputs",
                                 "outputs"}
        code, stdout, err = run(["replay", "--manifest", out + ".manifest.json", "--outdir", "replayed"], capsys)
        assert code == 0, err
        assert json.loads(stdout)["identical"]
        assert (workdir / "replayed" / out).read_bytes() == (workdir / out).read_bytes()

    rows = list(csv.DictReader(open("r.csv")))
    assert len(rows) == 32 and sum(int(r["count"]) for r in rows) == 6
    surface = list(csv.reader(open("surface.csv")))
    assert surface[0] == ["kind", "rate", "c", "EL", "cost"]
    assert len(surface) == 1 + 2000 + 1 and surface[-1][0] == "optimum"


def test_replay_detects_changed_input(workdir, capsys):
    run(["gen-data", "--system", "ggc", "--count", 2, "--arrivals", 3000, "--out", "d.jsonl"], capsys)
    run(["baseline", "--meta", "d.jsonl", "--out", "b.jsonl"], capsys)
    Path("d.jsonl").write_text(Path("d.jsonl").read_text().replace('"c": ', '"c":  '))
    code, _, err = run(["replay", "--manifest", "b.jsonl.manifest.json", "--outdir", "rep"], capsys)
    assert code == 1 and "inputs changed" in json.loads(err)["message"]


def test_inputs_not_mutated(workdir, capsys):
    run(["gen-data", "--system", "gg2", "--count", 2, "--arrivals", 3000, "--out", "d.jsonl"], capsys)
    before = Path("d.jsonl").read_bytes()
    run(["train", "--data", "d.jsonl", "--out", "m.bin", "--epochs", 1, "--hidden", "4"], capsys)
    run(["infer", "--model", "m.bin", "--in", "d.jsonl", "--out", "p.jsonl"], capsys)
    run(["evaluate", "--truth", "d.jsonl", "--pred", "p.jsonl", "--out", "r.csv"], capsys)
    assert Path("d.jsonl").read_bytes() == before
    assert Path("r.csv").exists()


def test_evaluate_row_count_mismatch(workdir, capsys):
    run(["gen-data", "--system", "ggc", "--count", 3, "--arrivals", 3000, "--out", "d.jsonl"], capsys)
    run(["gen-data", "--system", "ggc", "--count", 2, "--arrivals", 3000, "--out", "e.jsonl"], capsys)
    code, _, err = run(["evaluate", "--truth", "d.jsonl", "--pred", "e.jsonl", "--out", "r.csv"], capsys)
    assert code == 1
    assert "row counts differ" in json.loads(err)["message"]
    assert not Path("r.csv").exists()


def test_testset2_then_batch_simulate(workdir, capsys):
    code, _, _ = run(["testset2", "--system", "gg2", "--out", "t.jsonl"], capsys)
    assert code == 0
    lines = Path("t.jsonl").read_text().splitlines()
    assert len(lines) == 3601
    Path("few.jsonl").write_text("\n".join(lines[:4]) + "\n")
    code, _, err = run(["simulate", "--spec", "few.jsonl", "--arrivals", 3000, "--jobs", 2, "--out", "s.jsonl"],
                       capsys)
    assert code == 0, err
    code, _, err = run(["simulate", "--spec", "few.jsonl", "--arrivals", 3000, "--jobs", 1, "--out", "s1.jsonl"],
                       capsys)
    assert Path("s.jsonl").read_bytes() == Path("s1.jsonl").read_bytes()
    rows = [json.loads(x) for x in Path("s.jsonl").read_text().splitlines()[1:]]
    assert [r["index"] for r in rows] == [0, 1, 2]
    # the simulated utilisation feeds the heterogeneous segmentation
    code, _, err = run(["evaluate", "--truth", "s.jsonl", "--pred", "s.jsonl", "--meta", "few.jsonl",
                        "--out", "r.csv"], capsys)
    assert code == 0, err


def test_jobs_default_from_environment(monkeypatch):
    monkeypatch.setenv(cli.JOBS_ENV, "3")
    args = cli.build_parser().parse_args(["gen-data", "--system", "ggc", "--count", "1", "--out", "x"])
    assert args.jobs == 3
    monkeypatch.setenv(cli.JOBS_ENV, "junk")
    assert cli._default_jobs() == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "queuenet", "exact-mmc", "--mu", "2", "--c", "1", "--l", "3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["probs"] == pytest.approx([0.5, 0.25, 0.125])
