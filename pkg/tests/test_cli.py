import csv
import json
import subprocess
import sys

import pytest

from learngene.cli import main

CONFIG = """
dataset_format = synthetic
population_size = 4
tournament_size = 2
generations = 2
n_train_classes = 6
n_val_classes = 2
train_epochs = 1
critic_epochs = 1
finetune_epochs = 1
probe_iterations = 0 2
episodes = 2
k_shot = 2
query_per_class = 3
seeds = 0 1
output_dir = run
"""


@pytest.fixture(scope="module")
def evolved(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.ini").write_text(CONFIG)
    assert main(["evolve", "--config", str(d / "c.ini"), "--seed", "7"]) == 0
    return d


def test_evolve_outputs(evolved):
    run = evolved / "run"
    assert (run / "generations.jsonl").exists() and (run / "best_gene.lg").exists()
    assert json.loads((run / "run.json").read_text())["config"]["master_seed"] == 7


def test_inherit_and_validate(evolved, tmp_path, capsys):
    gene = evolved / "run" / "best_gene.lg"
    out = tmp_path / "d.ckpt"
    assert main(["inherit", "--gene", str(gene), "--target", "mini-vgg-8", "--out", str(out),
                 "--plan", str(tmp_path / "plan.json")]) == 0
    assert out.exists()
    assert json.loads((tmp_path / "plan.json").read_text())["pim_positions"] == [2, 4]
    assert main(["validate", "--gene", str(gene)]) == 0
    assert main(["validate", "--spec", "mini-res-8"]) == 0


def test_eval_probe_episodic_report(evolved, tmp_path):
    cfg, gene = str(evolved / "c.ini"), str(evolved / "run" / "best_gene.lg")
    assert main(["eval", "--gene", gene, "--config", cfg, "--seed", "7", "--out", str(tmp_path / "e.json")]) == 0
    assert main(["probe", "--gene", gene, "--config", cfg, "--seed", "7"]) == 0
    assert main(["episodic", "--gene", gene, "--config", cfg, "--seed", "7", "--target", "mini-vgg-6-N"]) == 0
    assert main(["report", str(evolved / "run")]) == 0
    rows = list(csv.DictReader((evolved / "run" / "report.csv").open()))
    assert len(rows) == 2


def test_ablation_no_mutation_constant_structures(tmp_path):
    (tmp_path / "c.ini").write_text(CONFIG.replace("generations = 2", "generations = 3"))
    assert main(["evolve", "--config", str(tmp_path / "c.ini"), "--ablation", "no_mutation",
                 "--out", str(tmp_path / "r")]) == 0
    records = [json.loads(l) for l in (tmp_path / "r" / "generations.jsonl").read_text().splitlines()]
    roots = {i["gene_id"]: i["structure"] for i in records[0]["individuals"]}
    seen = dict(roots)
    for rec in records[1:]:
        for ind in rec["individuals"]:
            assert ind["structure"] == seen[ind["parent_id"]]
            seen[ind["gene_id"]] = ind["structure"]


def test_identical_runs_identical_records(tmp_path):
    (tmp_path / "c.ini").write_text(CONFIG)
    for name in ("a", "b"):
        assert main(["evolve", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "generations.jsonl").read_bytes() == (tmp_path / "b" / "generations.jsonl").read_bytes()


def test_grad_check_command():
    assert main(["grad-check", "--spec", "mini-res-6", "--coords", "3"]) == 0
    assert main(["grad-check", "--spec", "mini-res-6", "--size", "8"]) == 2


def test_usage_errors(capsys):
    assert main(["evolve", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["validate"]) == 1


def test_runtime_error_exit_2(tmp_path, capsys):
    assert main(["inherit", "--gene", str(tmp_path / "none.lg"), "--target", "mini-vgg-6", "--out",
                 str(tmp_path / "x")]) == 2
    (tmp_path / "bad.ini").write_text("population_size = -3\n")
    assert main(["evolve", "--config", str(tmp_path / "bad.ini")]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "learngene", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "evolve" in r.stdout
