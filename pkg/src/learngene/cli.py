"""Command line entry point: ``learngene <command> ...``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config, with_overrides
from .data import downsample, digits_dataset, load_dataset, subset, synthetic_dataset
from .engine import TrainBudget, gradient_check, init_weights
from .evolution import ABLATIONS, dataset_arrays, evolve, partition_world
from .genome import validate_structure
from .inheritance import inherit_with_plan
from .netspec import builtin_spec, spec_from_json, validate_network_spec

log = logging.getLogger("learngene")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="learngene", description="Evolve, inherit and evaluate learngenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="key = value run configuration")
        sp.add_argument("--seed", type=int, help="override master_seed")

    e = sub.add_parser("evolve", help="run the generational loop")
    with_config(e)
    e.add_argument("--resume", help="evolution checkpoint to continue from")
    e.add_argument("--ablation", choices=ABLATIONS)
    e.add_argument("--workers", type=int)
    e.add_argument("--out", help="run directory (default: output_dir from the config)")

    i = sub.add_parser("inherit", help="initialise a descendant network from a gene")
    i.add_argument("--gene", required=True)
    i.add_argument("--target", required=True, help="builtin spec name or spec JSON file")
    i.add_argument("--classes", type=int, default=10, help="head size of the descendant")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--pim", type=int, nargs="*", help="explicit PIM insertion positions")
    i.add_argument("--out", required=True)
    i.add_argument("--plan", help="also write the inheritance plan as JSON")

    for name, help_text in (("eval", "fine-tune gene vs scratch on held-out classes"),
                            ("probe", "accuracy after a few update iterations"),
                            ("episodic", "n-way k-shot episodes on held-out classes")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--gene", required=True)
        with_config(sp)
        sp.add_argument("--target", help="descendant spec (default: the evolved spec)")
        sp.add_argument("--out", help="write the result as JSON here")

    r = sub.add_parser("report", help="summarise a run directory")
    r.add_argument("run_dir")
    r.add_argument("--out", help="directory for report.csv and summary.txt")

    g = sub.add_parser("grad-check", help="compare analytic and numeric gradients")
    g.add_argument("--spec", default="mini-res-6")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coords", type=int, default=20)
    g.add_argument("--size", type=int, default=16, help="input side length")

    v = sub.add_parser("validate", help="check a spec file, a gene, or a config")
    v.add_argument("--spec", help="builtin name or spec JSON file")
    v.add_argument("--gene")
    v.add_argument("--config")
    return p


# ---------------------------------------------------------------------------

def resolve_spec(name_or_path: str, input_shape=(3, 16, 16), head_classes: int = 10):
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        return spec_from_json(path.read_text())
    return builtin_spec(name_or_path, input_shape, head_classes)


def load_run_dataset(cfg: RunConfig):
    """The configured dataset after class-size capping and downsampling."""
    fmt = cfg.dataset_format
    if fmt == "digits":
        ds = digits_dataset()
    elif fmt == "synthetic":
        ds = synthetic_dataset(n_classes=cfg.evolution.n_train_classes + cfg.evolution.n_val_classes + 2)
    else:
        if cfg.dataset is None:
            raise ValueError("config sets no dataset")
        ds = load_dataset(cfg.dataset, fmt)
    if cfg.max_per_class:
        ds = subset(ds, per_class=cfg.max_per_class, seed=cfg.evolution.master_seed)
    if cfg.image_size and ds.shape[0] != cfg.image_size:
        ds = downsample(ds, cfg.image_size)
    return ds


def heldout_classes(cfg: RunConfig, labels) -> tuple[int, ...]:
    evo = cfg.evolution
    world = partition_world(labels, evo.n_train_classes, evo.n_val_classes, evo.master_seed)
    return tuple(sorted(world.val_classes + world.novelty_classes))


def _write_json(path, payload) -> None:
    checkpoint.atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return with_overrides(cfg, seed=args.seed, ablation=getattr(args, "ablation", None),
                          workers=getattr(args, "workers", None))


def cmd_evolve(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    ds = load_run_dataset(cfg)
    result = evolve(cfg.evolution, ds, out_dir=out, resume=args.resume,
                    on_generation=lambda r: print(f"generation {r['generation']}: pool critic mean "
                                                  f"{r['pool_mean_critic_score']:.4f}", flush=True))
    if result.pool:
        checkpoint.save_gene(out / "best_gene.lg", result.best().gene)
    print(f"wrote {out}")
    return 0


def cmd_inherit(args) -> int:
    gene = checkpoint.load_gene(args.gene)
    shape = gene.source_spec.input_shape if gene.source_spec is not None else (3, 16, 16)
    target = resolve_spec(args.target, shape, args.classes)
    weights, plan, _ = inherit_with_plan(gene, target, np.random.default_rng(args.seed), args.pim)
    checkpoint.save_weights(args.out, weights)
    if args.plan:
        checkpoint.atomic_write_text(args.plan, plan.to_json() + "\n")
    print(f"wrote {args.out} ({target.name}, PIM positions {plan.pim_positions})")
    return 0


def _eval_setup(args):
    from .protocols import ProtocolError

    cfg = _config(args)
    gene = checkpoint.load_gene(args.gene)
    ds = load_run_dataset(cfg)
    images, labels = dataset_arrays(ds)
    classes = heldout_classes(cfg, labels)
    if len(classes) < 2:
        raise ProtocolError("fewer than two held-out classes")
    shape = images.shape[1:]
    spec = resolve_spec(args.target or cfg.evolution.spec, shape, len(classes))
    return cfg, gene, images, labels, classes, spec


def cmd_eval(args) -> int:
    from .protocols import finetune_compare

    cfg, gene, images, labels, classes, spec = _eval_setup(args)
    budget = TrainBudget(cfg.finetune_epochs, cfg.finetune_lr, cfg.evolution.train_batch_size, cfg.finetune_momentum)
    res = finetune_compare(gene, images, labels, classes, spec, budget, cfg.seeds)
    for s, g, b in zip(res.seeds, res.gene_acc, res.scratch_acc):
        print(f"seed {s}: learngene {100 * g:.2f}  scratch {100 * b:.2f}")
    print(f"learngene wins {res.wins}/{len(res.seeds)}")
    if args.out:
        _write_json(args.out, {"classes": list(classes), "seeds": res.seeds, "gene_acc": res.gene_acc,
                               "scratch_acc": res.scratch_acc})
    return 0


def cmd_probe(args) -> int:
    from .protocols import probe_instinct

    cfg, gene, images, labels, classes, spec = _eval_setup(args)
    table = probe_instinct(gene, images, labels, classes, spec, cfg.probe_iterations, cfg.seeds,
                           cfg.probe_lr, cfg.probe_batch_size, momentum=cfg.probe_momentum)
    print(table.format())
    if args.out:
        _write_json(args.out, {"classes": list(classes), "rows": table.summary()})
    return 0


def cmd_episodic(args) -> int:
    from .protocols import episodic_eval

    cfg, gene, images, labels, classes, spec = _eval_setup(args)
    budget = TrainBudget(cfg.finetune_epochs, cfg.finetune_lr, cfg.evolution.train_batch_size, cfg.finetune_momentum)
    out = {}
    for label, g in (("learngene", gene), ("random_init", None)):
        res = episodic_eval(g, images, labels, classes, cfg.n_way, cfg.k_shot, cfg.episodes, budget, spec,
                            seed=cfg.seeds[0], query_per_class=cfg.query_per_class)
        print(f"{label:12s} {res.format()}")
        out[label] = {"mean": res.mean, "ci95": res.ci95, "accuracies": res.accuracies}
    if args.out:
        _write_json(args.out, out)
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    rep = write_report(args.run_dir, args.out)
    print(rep.summary, end="")
    return 0


def cmd_grad_check(args) -> int:
    spec = resolve_spec(args.spec, (3, args.size, args.size), 3)
    problems = validate_network_spec(spec)
    if problems:
        raise ValueError("; ".join(map(str, problems)))
    rng = np.random.default_rng(args.seed)
    weights = init_weights(spec, rng)
    from .engine import Batch
    batch = Batch(rng.random((2,) + spec.input_shape).astype(np.float32), rng.integers(0, 3, size=2))
    res = gradient_check(weights, batch, coords_per_kind=args.coords, seed=args.seed)
    worst = 0.0
    for kind, rows in res.items():
        errs = [r["rel_error"] for r in rows] or [0.0]
        print(f"{kind:10s} max relative error {max(errs):.3e} over {len(rows)} coordinates")
        worst = max(worst, max(errs))
    return 0 if worst <= 1e-4 else 2


def cmd_validate(args) -> int:
    if not (args.spec or args.gene or args.config):
        raise UsageError("validate needs --spec, --gene or --config")
    problems = []
    spec = None
    if args.spec:
        spec = resolve_spec(args.spec)
        problems += [f"spec: {v}" for v in validate_network_spec(spec)]
    if args.gene:
        gene = checkpoint.load_gene(args.gene)
        against = spec or gene.source_spec
        if against is None:
            raise UsageError("gene carries no source spec; pass --spec")
        problems += [f"gene: {v}" for v in validate_structure(gene.structure, against)]
    if args.config:
        load_config(args.config)
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 2


COMMANDS = {
    "evolve": cmd_evolve, "inherit": cmd_inherit, "eval": cmd_eval, "probe": cmd_probe,
    "episodic": cmd_episodic, "report": cmd_report, "grad-check": cmd_grad_check, "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"learngene: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"learngene: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
