"""Command-line interface.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .cohort import SyntheticCohortConfig, generate_cohort, load_cohort, save_cohort
from .config import ConfigError, load_config, preset_config
from .knowledge_bank import HTTPLLMClient, KnowledgeBank, LLMClientConfig, StubLLMClient
from .shapley import TooManyPlayers, exact_shapley
from .train import LOG_COLUMNS, NumericFailure, Trainer

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("holodx")


def _run_config(args):
    cfg = load_config(args.config, args.preset) if args.config else preset_config(args.preset or "toy")
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _load_bank(path):
    if not os.path.exists(path):
        raise ConfigError(f"knowledge bank {path} does not exist")
    return KnowledgeBank.load(path)


def _write_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


# -- subcommands ------------------------------------------------------------------

def cmd_gen_cohort(args):
    cfg = SyntheticCohortConfig(n_subjects=args.n, class_balance=args.balance, volume_side=args.volume_side,
                                image_signal=args.image_signal, factor_signal=args.factor_signal,
                                knowledge_signal=args.knowledge_signal, missing_rate=args.missing_rate,
                                seed=args.seed if args.seed is not None else 0)
    if args.kind == "knowledge-only":
        cfg = dataclasses.replace(cfg, image_signal=0.0, factor_signal=0.0, knowledge_signal=True)
    elif args.kind == "null":
        cfg = dataclasses.replace(cfg, image_signal=0.0, factor_signal=0.0, knowledge_signal=False)
    cohort = generate_cohort(cfg.validate())
    save_cohort(cohort, args.out)
    print(f"wrote {len(cohort.train)}/{len(cohort.val)}/{len(cohort.test)} subjects to {args.out}")
    return EXIT_OK


def _client(args):
    if args.client == "stub":
        return StubLLMClient()
    return HTTPLLMClient(LLMClientConfig.load(args.llm_config))


def cmd_kb(args):
    if args.kb_cmd == "generate":
        bank = KnowledgeBank.load(args.bank) if os.path.exists(args.bank) else KnowledgeBank()
        factors = args.factors
        if not factors:
            if not args.cohort:
                raise ConfigError("kb generate needs --factors or --cohort")
            factors = load_cohort(args.cohort).schema.names
        client = _client(args)
        for f in factors:
            bank.generate(f, client)
        bank.persist(args.bank)
        print(f"bank {args.bank}: {len(bank)} entries")
    elif args.kb_cmd == "add-expert":
        bank = KnowledgeBank.load(args.bank) if os.path.exists(args.bank) else KnowledgeBank()
        bank.add_expert(args.factor, args.text)
        bank.persist(args.bank)
    else:
        bank = _load_bank(args.bank)
        factors = args.factors or sorted(bank.entries)
        for f in factors:
            entry = bank.lookup(f)
            print(f"[{f}]")
            print(entry.render() if entry else "(no entry)")
    return EXIT_OK


def _apply_flags(cfg, args):
    t = cfg.train
    if args.no_kag:
        t.use_kag = False
    if args.no_memory:
        t.use_memory = False
    if args.no_knowledge:
        t.use_knowledge = False
    if args.no_kdc:
        t.use_kdc = False
    if args.itc_queue is not None:
        t.itc_queue = args.itc_queue == "on"
    if args.loss_mask:
        t.loss_mask = tuple(x for x in args.loss_mask.split(",") if x)
    if args.pmm_normalize:
        cfg.model.pmm_normalize = True
    if args.epochs is not None:
        t.epochs = args.epochs
    if args.max_steps is not None:
        t.max_steps = args.max_steps
    return cfg.validate()


def _atomic_save(trainer, path):
    tmp = path + ".tmp"
    ckpt.save_checkpoint(trainer, tmp)
    os.replace(tmp, path)


def cmd_train(args):
    cohort = load_cohort(args.cohort)
    bank = _load_bank(args.bank)
    missing = [f for f in cohort.schema.names if f not in bank]
    if missing:
        log.warning("knowledge bank has no entry for %s", ", ".join(missing))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "checkpoint.ckpt")
    log_path = os.path.join(args.out, "train_log.tsv")
    if args.resume:
        trainer = ckpt.load_checkpoint(args.resume, cohort.schema, bank, cohort.train)
        trainer.log_path = log_path
        cfg = trainer.cfg
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        if args.max_steps is not None:
            cfg.train.max_steps = args.max_steps
    else:
        cfg = _apply_flags(_run_config(args), args)
        trainer = Trainer(cfg, cohort.schema, bank, cohort.train, log_path=log_path)
    if cohort.config.volume_side != cfg.model.volume_side:
        raise ConfigError(f"cohort volumes are {cohort.config.volume_side}^3 but the model expects "
                          f"{cfg.model.volume_side}^3")
    epoch_rows = []

    def on_epoch_end(tr):
        row = {"epoch": tr.epoch}
        if cohort.val:
            row.update({f"val_{k}": v for k, v in tr.evaluate(cohort.val).as_dict().items()})
        epoch_rows.append(row)
        _atomic_save(tr, path)

    try:
        trainer.fit(on_epoch_end=on_epoch_end)
    except NumericFailure as e:
        log.error("%s; last good checkpoint kept at %s", e, path)
        return EXIT_NUMERIC
    _atomic_save(trainer, path)
    with open(os.path.join(args.out, "epochs.json"), "w", encoding="utf-8") as fh:
        json.dump(epoch_rows, fh, indent=2, sort_keys=True)
    print(f"trained {trainer.step_count} steps; checkpoint {path}")
    return EXIT_OK


def _restore(args):
    cohort = load_cohort(args.cohort)
    bank = _load_bank(args.bank)
    return cohort, ckpt.load_checkpoint(args.checkpoint, cohort.schema, bank)


def cmd_eval(args):
    cohort, trainer = _restore(args)
    metrics = trainer.evaluate(cohort.split(args.split))
    _write_json({"split": args.split, **metrics.as_dict()}, args.out)
    return EXIT_OK


def cmd_explain(args):
    cohort, trainer = _restore(args)
    records = cohort.split(args.split)
    if args.subject:
        match = [r for r in records if r.subject_id == args.subject]
        if not match:
            raise ConfigError(f"subject {args.subject} not in split {args.split}")
        record = match[0]
    else:
        record = records[args.index]
    try:
        report = exact_shapley(trainer.model, trainer.featurizer, record, limit=args.limit)
    except TooManyPlayers as e:
        raise ConfigError(str(e)) from None
    _write_json({"subject": record.subject_id, **report.as_dict(), "ranked": report.ranked()}, args.out)
    return EXIT_OK


def cmd_dump_prototypes(args):
    header, arrays = ckpt.read_checkpoint(args.checkpoint)
    protos = {k: v for k, v in arrays.items() if k.startswith("prototype/")}
    meta = {"source": os.path.basename(args.checkpoint), "memory": header["memory"]}
    ckpt.write_checkpoint(args.out, meta, protos)
    print(f"wrote {len(protos)} prototype tensors to {args.out}")
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import LAYER_TYPES, check_layer

    kinds = args.layers or list(LAYER_TYPES)
    ok = True
    for kind in kinds:
        reports = [check_layer(kind, s, args.tolerance) for s in range(args.seeds)]
        worst = max(r.max_error for r in reports)
        passed = all(r.passed for r in reports)
        ok &= passed
        print(f"{kind:6s} max_rel_err={worst:.3e} {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _read_log(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        for k in LOG_COLUMNS:
            r[k] = None if r[k] == "NA" else float(r[k])
    return rows


def cmd_report(args):
    rows = _read_log(os.path.join(args.run, "train_log.tsv"))
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    terms = LOG_COLUMNS[3:]  # loss terms, total, grad_norm
    with open(os.path.join(out, "loss_curve.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\t".join(("epoch", "steps") + terms) + "\n")
        for epoch in sorted({int(r["epoch"]) for r in rows}):
            part = [r for r in rows if int(r["epoch"]) == epoch]
            means = []
            for t in terms:
                vals = [r[t] for r in part if r[t] is not None]
                means.append(f"{np.mean(vals):.6f}" if vals else "NA")
            fh.write("\t".join([str(epoch), str(len(part))] + means) + "\n")
    epochs_path = os.path.join(args.run, "epochs.json")
    if os.path.exists(epochs_path):
        with open(epochs_path, encoding="utf-8") as fh:
            epochs = json.load(fh)
        cols = sorted({k for e in epochs for k in e} - {"epoch"})
        with open(os.path.join(out, "metrics.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\t".join(["epoch"] + cols) + "\n")
            for e in epochs:
                fh.write("\t".join([str(e["epoch"])] + ["NA" if e.get(c) is None else str(e[c]) for c in cols]) + "\n")
    print(f"report written to {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="holodx", description="Knowledge- and memory-injected diagnosis toolkit.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", choices=("toy", "paper-scale"), default=None)
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-cohort", help="write a synthetic cohort directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--kind", choices=("blob", "knowledge-only", "null"), default="blob")
    g.add_argument("--balance", type=float, default=0.5)
    g.add_argument("--volume-side", type=int, default=32)
    g.add_argument("--image-signal", type=float, default=1.0)
    g.add_argument("--factor-signal", type=float, default=1.0)
    g.add_argument("--knowledge-signal", action="store_true")
    g.add_argument("--missing-rate", type=float, default=0.15)
    g.set_defaults(func=cmd_gen_cohort)

    kb = sub.add_parser("kb", help="manage the clinical knowledge bank")
    kbs = kb.add_subparsers(dest="kb_cmd", required=True)
    kg = kbs.add_parser("generate")
    kg.add_argument("--bank", required=True)
    kg.add_argument("--factors", nargs="*")
    kg.add_argument("--cohort")
    kg.add_argument("--client", choices=("stub", "http"), default="stub")
    kg.add_argument("--llm-config")
    ke = kbs.add_parser("add-expert")
    ke.add_argument("--bank", required=True)
    ke.add_argument("--factor", required=True)
    ke.add_argument("--text", required=True)
    ks = kbs.add_parser("show")
    ks.add_argument("--bank", required=True)
    ks.add_argument("--factors", nargs="*")
    kb.set_defaults(func=cmd_kb)

    t = sub.add_parser("train", help="train a model on a cohort")
    t.add_argument("--cohort", required=True)
    t.add_argument("--bank", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--no-kag", action="store_true")
    t.add_argument("--no-memory", action="store_true")
    t.add_argument("--no-knowledge", action="store_true")
    t.add_argument("--no-kdc", action="store_true")
    t.add_argument("--loss-mask", help="comma-separated terms to drop: itc,kdc,res_i,res_t,cls")
    t.add_argument("--itc-queue", choices=("on", "off"))
    t.add_argument("--pmm-normalize", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "metrics on a split"),
                              ("explain", cmd_explain, "exact Shapley factor attribution")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--cohort", required=True)
        e.add_argument("--bank", required=True)
        e.add_argument("--split", choices=("train", "val", "test"), default="test")
        e.add_argument("--out")
        if name == "explain":
            e.add_argument("--subject")
            e.add_argument("--index", type=int, default=0)
            e.add_argument("--limit", type=int, default=12)
        e.set_defaults(func=func)

    d = sub.add_parser("dump-prototypes", help="export prototype memories in checkpoint format")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_prototypes)

    gc = sub.add_parser("grad-check", help="finite-difference audit of every layer type")
    gc.add_argument("--seeds", type=int, default=10)
    gc.add_argument("--layers", nargs="*")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.set_defaults(func=cmd_grad_check)

    r = sub.add_parser("report", help="loss-curve and metric tables from a training run")
    r.add_argument("--run", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ckpt.CheckpointVersionError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
