"""Command line interface behavior."""

import csv
import io

from nlfeti.cli import main
from nlfeti.harness import CSV_HEADER


def test_solve_prints_record_rows(capsys):
    rc = main(["solve", "--set", "kernel.family=constant",
               "--set", "kernel.delta=0.25", "--set", "mesh.n=8",
               "--set", "partition.k1=2", "--set", "partition.k2=2"])
    assert rc == 0
    out = capsys.readouterr().out.strip().splitlines()
    row = out[-1].split(",")
    assert len(row) == len(CSV_HEADER.split(","))
    assert row[5] == "feti"


def test_solve_with_config_file_and_exports(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "kernel.family = constant\n"
        "kernel.delta = 0.25\n"
        "mesh.n = 8\n"
        "partition.k1 = 2\n"
        "partition.k2 = 2\n"
        "solver = cg\n"
    )
    sol = tmp_path / "solution.csv"
    art = tmp_path / "artifacts"
    rc = main(["solve", "--config", str(cfg), "--solver", "both",
               "--out", str(sol), "--export-mm", str(art)])
    assert rc == 0
    assert sol.exists()
    assert (art / "A.mtx").exists()
    assert (art / "rhs.csv").exists()
    header = (art / "A.mtx").read_text().splitlines()[0]
    assert header.startswith("%%MatrixMarket matrix coordinate")
    out = capsys.readouterr().out
    assert "feti" in out and "cg" in out


def test_solve_determinism_bitwise(tmp_path):
    args = ["solve", "--set", "kernel.family=peridynamic",
            "--set", "kernel.delta=0.25", "--set", "mesh.n=8",
            "--set", "partition.k1=2", "--set", "partition.k2=2"]
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_study_writes_csv(tmp_path, capsys):
    out = tmp_path / "report.csv"
    rc = main(["study", "--out", str(out),
               "--set", "study=strong_scaling",
               "--set", "kernel.delta=0.125", "--set", "mesh.n=16"])
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["K"] for r in rows] == ["1x1", "2x2", "4x4"]
    assert all(int(r["iterations"]) >= 0 for r in rows)


def test_dump_subdivision(tmp_path):
    out = tmp_path / "sub.csv"
    rc = main(["dump-subdivision", "--out", str(out),
               "--set", "kernel.delta=0.25", "--set", "mesh.n=8",
               "--set", "partition.k1=2", "--set", "partition.k2=2"])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "element,x,y,zeta,subdomains"
    assert len(lines) > 1


def test_bad_config_key_fails_cleanly(capsys):
    rc = main(["solve", "--set", "mesh.resolution=8"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
