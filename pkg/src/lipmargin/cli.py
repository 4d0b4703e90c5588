"""Command line entry point: ``lipmargin {run,train,certify,attack,detect,report}``.

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import margin_pvalue as pv
from .attacks import AttackConfig, adversarial_dataset, transfer_eval
from .data import Dataset
from .exceptions import ConfigurationError, LipMarginError, StageError
from .harness import (
    RunReport,
    build_dataset,
    derive_seed,
    emit_report,
    load_config,
    resolve_config,
    run_experiment,
    train_models,
)
from .lipschitz import certify_dataset, lipschitz_bounds
from .nn import load, save

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


def _config(args):
    cfg = load_config(args.config) if args.config else resolve_config({})
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out_dir", None):
        cfg["out_dir"] = args.out_dir
    return cfg


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return Dataset.load(args.data)
    return build_dataset(cfg)


def _split(data, which):
    return data if which == "all" else data.subset(which)


def cmd_run(args):
    cfg = _config(args)
    report, _ = run_experiment(cfg)
    acc = report.accuracy
    print(f"wrote {cfg['out_dir']}/report.json")
    print(f"clean acc  surrogate {acc['clean_acc_surrogate']:.4f}  target {acc['clean_acc_target']:.4f}")
    print(f"fgsm acc   surrogate {acc['adv_acc_surrogate']:.4f}  target {acc['adv_acc_target']:.4f}")
    print(f"termination: {report.train_history['termination_reason']}")


def cmd_train(args):
    cfg = _config(args)
    try:
        data = _dataset(args, cfg)
        baseline, target, history = train_models(cfg, data)
    except LipMarginError as exc:
        raise StageError("train", exc) from exc
    os.makedirs(os.path.join(cfg["out_dir"], "models"), exist_ok=True)
    if baseline is not None:
        save(baseline, os.path.join(cfg["out_dir"], "models", "baseline.json"))
    save(target, os.path.join(cfg["out_dir"], "models", "target.json"))
    with open(os.path.join(cfg["out_dir"], "history.json"), "w") as fh:
        json.dump(history.to_dict(), fh, indent=2, sort_keys=True)
    last = history.iterations[-1]
    print(f"{history.termination_reason} after {len(history)} outer iterations; "
          f"{last.n_violated} violated, min label margin {last.min_label_margin:.6g}")


def cmd_certify(args):
    cfg = _config(args)
    try:
        model = load(args.model)
        data = _split(_dataset(args, cfg), args.split)
        cc = cfg["certify"]
        seed = derive_seed(cfg["seed"], "certify")
        bound = lipschitz_bounds(model, int(cc["power_iters"]), float(cc["tol"]), seed)
        mc = args.mc_samples if args.mc_samples is not None else cc.get("mc_samples")
        report = certify_dataset(model, data.features, bound, mc_samples=mc,
                                 mc_points=cc.get("mc_points"), seed=seed)
    except (LipMarginError, OSError) as exc:
        raise StageError("certify", exc) from exc
    os.makedirs(cfg["out_dir"], exist_ok=True)
    path = os.path.join(cfg["out_dir"], "certification.csv")
    with open(path, "w", newline="") as fh:
        fh.write(report.to_csv())
    print(f"L_inf <= {bound.L_inf:.6g}, L_2 <= {bound.L_2:.6g}; wrote {path}")
    print(json.dumps(report.summary(), indent=2, sort_keys=True))


def cmd_attack(args):
    cfg = _config(args)
    try:
        surrogate = load(args.surrogate)
        data = _split(_dataset(args, cfg), args.split)
        att = AttackConfig.from_dict(cfg["attack"])
        if args.epsilon is not None:
            att = AttackConfig(**{**cfg["attack"], "epsilon": args.epsilon})
        adv = adversarial_dataset(surrogate, data, att)
        target = load(args.target) if args.target else surrogate
        result = transfer_eval(surrogate, target, data.features, data.labels, att)
    except (LipMarginError, OSError) as exc:
        raise StageError("attack", exc) from exc
    os.makedirs(cfg["out_dir"], exist_ok=True)
    path = os.path.join(cfg["out_dir"], "adversarial.npz")
    adv.save(path)
    print(f"wrote {path}")
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_detect(args):
    cfg = _config(args)
    dc = cfg["detect"]
    try:
        model = load(args.model)
        data = build_dataset(cfg)
        tr = data.train
        seed = derive_seed(cfg["seed"], "detect")
        if dc["mode"] == "pooled":
            lm = pv.collect_log_margins(model, tr.features, tr.labels)
            gmm = pv.select_order_bic(lm.values, dc["K_max"], seed, dc["restarts"])
            train_p = pv.pvalue_from_log_margin(gmm, lm.values)
            doc = gmm.to_dict()
        else:
            gmm, train_p = {}, []
            for c in range(model.num_classes):
                lm = pv.collect_log_margins(model, tr.features, tr.labels, c)
                gmm[c] = pv.select_order_bic(lm.values, dc["K_max"], seed + c, dc["restarts"],
                                             class_id=c)
                train_p.append(pv.pvalue_from_log_margin(gmm[c], lm.values))
            train_p = np.concatenate(train_p)
            doc = [g.to_dict() for g in gmm.values()]
        threshold = pv.threshold_for_fpr(None, None, float(dc["target_fpr"]),
                                         training_pvalues=train_p)
        test = Dataset.load(args.data) if args.data else data.heldout
        result = pv.detect(model, gmm, test.features, threshold)
    except (LipMarginError, OSError) as exc:
        raise StageError("detect", exc) from exc
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "gmm.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(os.path.join(cfg["out_dir"], "detection.csv"), "w", newline="") as fh:
        fh.write(result.to_csv())
    print(f"threshold {threshold:.6g}; flagged {int(result.flagged.sum())} of "
          f"{len(result.flagged)} ({result.flag_rate:.2%})")


def cmd_report(args):
    try:
        report = RunReport.load(args.report)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigurationError(f"cannot read report {args.report}: {exc}") from exc
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.report))
    try:
        emit_report(report, out_dir)
    except LipMarginError as exc:
        raise StageError("report", exc) from exc
    acc = report.accuracy
    print(f"{'inputs':<8}{'surrogate':>12}{'target':>12}")
    print(f"{'clean':<8}{acc['clean_acc_surrogate']:>12.4f}{acc['clean_acc_target']:>12.4f}")
    print(f"{'fgsm':<8}{acc['adv_acc_surrogate']:>12.4f}{acc['adv_acc_target']:>12.4f}")
    for name, rate in report.detection["flag_rate"].items():
        print(f"flag rate {name:<8} {rate:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="lipmargin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out-dir", help="override out_dir")

    p = sub.add_parser("run", help="full pipeline: train, attack, certify, detect, report")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train the baseline and the margin-constrained model")
    common(p)
    p.add_argument("--data", help="dataset .npz instead of the configured one")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="certified purity radii for a saved model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "heldout", "all"), default="train")
    p.add_argument("--mc-samples", type=int)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack", help="FGSM against a surrogate, evaluated on a target")
    common(p)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--target")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "heldout", "all"), default="heldout")
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", help="fit log-margin GMMs and score test samples")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset .npz to score (default: held-out split)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="re-emit CSV files from an existing report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
