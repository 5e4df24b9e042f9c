"""Command-line entry point: ``dhce {gen,train,eval,predict,gradcheck,inspect}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError, load_checkpoint
from .ehr import DataError, SynthConfig, generate_synthetic, load_dataset, write_dataset, write_vocabulary
from .events import EncoderError
from .hypergraph import build_dynamic_hypergraph, format_entry

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dhce")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("DHCE_LOG", "info").lower()
    if level not in ("error", "info", "debug"):
        level = "info"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _tsv(*cols) -> None:
    print("\t".join(str(c) for c in cols))


def cmd_gen(args) -> int:
    cfg = SynthConfig(
        n_patients=args.n_patients,
        vocab_size=args.vocab_size,
        visits_per_patient=(args.min_visits, args.max_visits),
        codes_per_visit=(args.min_codes, args.max_codes),
        chronic_persistence=args.chronic_persistence,
        rules=harness.parse_rules(args.rules, args.vocab_size, args.seed),
        event_noise=args.event_noise,
        seed=args.seed,
    )
    data = generate_synthetic(cfg)
    write_dataset(data, args.out)
    if args.vocab_out:
        write_vocabulary(data.vocabulary, args.vocab_out)
    _tsv("patients", len(data.patients))
    _tsv("codes", len(data.vocabulary))
    _tsv("rules", len(cfg.rules))
    return EXIT_OK


def cmd_train(args) -> int:
    config = harness.read_config(args.config) if args.config else harness.TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(harness.TrainConfig)
                 if getattr(args, f.name, None) is not None}
    config = config.with_overrides(overrides)
    if not config.checkpoint:
        config = config.with_overrides({"checkpoint": "dhce.ckpt"})
    result = harness.train(config)
    _tsv("epoch", "steps", "train_loss", "val_p10")
    for e in result.log:
        _tsv(e.epoch, e.steps, f"{e.train_loss:.10g}", f"{e.val_p10:.10g}")
    log.info("best epoch %d, checkpoint written to %s", result.best_epoch, config.checkpoint)
    if config.report_dir:
        from .report import write_training_report

        for path in write_training_report(result.log, config.report_dir):
            log.info("wrote %s", path)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    reports = {"dhce": harness.evaluate(ckpt, data, args.k)}
    if args.baseline_data:
        from .events import make_encoder

        enc = make_encoder(ckpt.encoder)
        train_inputs = harness.prepare_all(load_dataset(args.baseline_data), ckpt.vocabulary, enc)
        test_inputs = harness.prepare_all(data, ckpt.vocabulary, enc)
        reports["frequency"] = harness.evaluate_frequency_baseline(train_inputs, test_inputs, args.k)
    _tsv("model", "metric", "value")
    for name, rep in reports.items():
        for metric, value in rep.rows():
            _tsv(name, metric, value)
    if args.report_dir:
        from .report import write_eval_report

        for path in write_eval_report(reports, args.report_dir):
            log.info("wrote %s", path)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lines = [ln for ln in Path(args.patient_file).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{args.patient_file}: no patient lines")
    _tsv("patient_id", "rank", "code", "score")
    for line in lines:
        from .ehr import parse_patient_line

        pid = parse_patient_line(line)[0].patient_id
        ranked = harness.predict_next(ckpt, line)
        for rank, (code, score) in enumerate(ranked[: args.top] if args.top else ranked, start=1):
            _tsv(pid, rank, code, f"{score:.10g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = harness.gradcheck_suite(args.seed, eps=args.eps)
    _tsv("parameter", "max_rel_error", "status")
    failed = 0
    for name, err in errors.items():
        ok = err < args.tol
        failed += not ok
        _tsv(name, f"{err:.3e}", "ok" if ok else "FAIL")
    _tsv("overall", f"{max(errors.values()):.3e}", "ok" if not failed else "FAIL")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_inspect(args) -> int:
    data = load_dataset(args.data, args.vocab)
    try:
        patient = data.patient(args.patient_id)
    except KeyError:
        raise DataError(f"no patient {args.patient_id!r} in {args.data}") from None
    dyn = build_dynamic_hypergraph(patient, data.vocabulary, args.chronic_window)
    for t, (visit, entry) in enumerate(zip(patient.visits, dyn.entries), start=1):
        codes = sorted(visit.codes, key=data.vocabulary.index.get)
        print(f"== visit {t}: {' '.join(codes)}")
        print(format_entry(entry, data.vocabulary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dhce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic JSONL dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--vocab-out")
    g.add_argument("--n-patients", type=int, default=500)
    g.add_argument("--vocab-size", type=int, default=80)
    g.add_argument("--min-visits", type=int, default=3)
    g.add_argument("--max-visits", type=int, default=8)
    g.add_argument("--min-codes", type=int, default=2)
    g.add_argument("--max-codes", type=int, default=5)
    g.add_argument("--chronic-persistence", type=float, default=0.5)
    g.add_argument("--rules", default="random:40:0.9", help="random:N:p or a>b:p;c>d:p")
    g.add_argument("--event-noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model; any config key may be given as --key VALUE")
    t.add_argument("--config")
    for f in fields(harness.TrainConfig):
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        t.add_argument(*flags, dest=f.name, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="precision@k of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baseline-data", help="training JSONL for the code-frequency baseline")
    e.add_argument("--k", type=int, nargs="+", default=list(harness.EVAL_KS))
    e.add_argument("--report-dir")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank codes for each patient's next visit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patient-file", required=True)
    p.add_argument("--top", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="full-model finite-difference gradient check")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=harness.GRADCHECK_TOL)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="print a patient's hypergraphs and partitions")
    i.add_argument("--data", required=True)
    i.add_argument("--patient-id", required=True)
    i.add_argument("--vocab")
    i.add_argument("--chronic-window", type=int, default=1)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, CheckpointError, EncoderError, FileNotFoundError, UnicodeDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (harness.NumericError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
