import json

import pytest

from learngene.evolution import EvolutionConfig, evolve
from learngene.genome import LearngeneStructure
from learngene.netspec import parameter_fraction, spec_from_dict
from learngene.report import COLUMNS, ReportError, build_report, write_report
from learngene.data import synthetic_dataset


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = EvolutionConfig(population_size=4, tournament_size=2, generations=3, n_train_classes=6, n_val_classes=2,
                          train_epochs=1, critic_epochs=1)
    result = evolve(cfg, synthetic_dataset(n_classes=8, per_class=12, size=16), out_dir=d)
    return d, result


def test_csv_shape(run_dir):
    d, _ = run_dir
    rep = write_report(d)
    lines = (d / "report.csv").read_text().splitlines()
    assert lines[0] == ",".join(COLUMNS) and len(lines) == 4
    assert (d / "summary.txt").read_text() == rep.summary


def test_report_idempotent(run_dir, tmp_path):
    d, _ = run_dir
    write_report(d, tmp_path / "a")
    write_report(d, tmp_path / "b")
    for name in ("report.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fraction_matches_netspec(run_dir):
    d, result = run_dir
    rep = build_report(d)
    spec = spec_from_dict(json.loads((d / "run.json").read_text())["spec"])
    best = result.best().gene
    assert rep.rows[-1]["best_param_fraction"] == pytest.approx(parameter_fraction(best.structure, spec), abs=1e-12)
    for row in rep.rows:
        assert row["best_param_fraction"] == pytest.approx(row["best_param_fraction_logged"], abs=1e-12)


def test_missing_records(tmp_path):
    with pytest.raises(ReportError):
        build_report(tmp_path)
