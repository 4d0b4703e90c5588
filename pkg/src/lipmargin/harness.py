"""Experiment configuration, the end-to-end pipeline, and report files.

One JSON config drives everything.  Every random stage gets its own seed,
derived from the master seed and the stage name, so adding a stage never
perturbs the ones before it.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses, margin_pvalue as pv
from .attacks import AttackConfig, accuracy, fgsm
from .data import Dataset, generate_blobs, load_idx
from .exceptions import ConfigurationError, InputError, StageError
from .lipschitz import certify_dataset, lipschitz_bounds
from .nn import Model, forward, save
from .training import DualConfig, pretrain, train

logger = logging.getLogger(__name__)

POPULATIONS = (
    "train_label_margin",
    "heldout_label_margin",
    "heldout_decision_margin",
    "fgsm_decision_margin",
)

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "kind": "blobs",
        "num_classes": 3,
        "dim": 20,
        "n_per_class": 300,
        "heldout_per_class": 300,
        "noise_sigma": 1.0,
        "center_scale": 0.7,
    },
    "model": {"hidden_dims": [32], "output_rectified": False},
    "baseline_train": {"epochs": 30, "lr": 0.05, "batch_size": 32},
    "margin_train": {
        "mu": 1.0,
        "delta": 2.0,
        "max_outer_iters": 10,
        "inner_epochs": 3,
        "lr": 0.001,
        "batch_size": 32,
        "loss_kind": "dual",
        "update_rule": "multiplicative",
        "pretrain_epochs": 30,
        "pretrain_lr": 0.05,
    },
    "attack": {"epsilon": 1.0},
    "certify": {"mc_samples": 1000, "mc_points": 20, "power_iters": 10000, "tol": 1e-12},
    "detect": {"mode": "pooled", "K_max": 10, "restarts": 5, "target_fpr": 0.05},
    "histogram_bins": 50,
    "out_dir": "out",
}

_SECTIONS = {"seed", "dataset", "model", "baseline_train", "margin_train", "attack", "certify",
             "detect", "histogram_bins", "out_dir"}


def derive_seed(master: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "dataset":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigurationError`."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    raw = dict(raw)
    if "dataset" in raw and raw["dataset"].get("kind", "blobs") == "blobs":
        raw["dataset"] = {**DEFAULT_CONFIG["dataset"], **raw["dataset"]}
    cfg = _merge(DEFAULT_CONFIG, raw)
    try:
        int(cfg["seed"])
        kind = cfg["dataset"].get("kind")
        if kind not in ("blobs", "idx"):
            raise ConfigurationError(f"dataset.kind must be 'blobs' or 'idx', got {kind!r}")
        if kind == "idx" and not {"images", "labels"} <= set(cfg["dataset"]):
            raise ConfigurationError("idx datasets need 'images' and 'labels' paths")
        mt = dict(cfg["margin_train"])
        mt.setdefault("seed", 0)
        DualConfig.from_dict(mt)
        AttackConfig.from_dict(cfg["attack"])
        if cfg["detect"].get("mode") not in ("pooled", "per_class"):
            raise ConfigurationError("detect.mode must be 'pooled' or 'per_class'")
        if not 0 <= float(cfg["detect"]["target_fpr"]) <= 1:
            raise ConfigurationError("detect.target_fpr must lie in [0, 1]")
        if int(cfg["histogram_bins"]) < 1:
            raise ConfigurationError("histogram_bins must be positive")
        if cfg["baseline_train"] is not None:
            int(cfg["baseline_train"]["epochs"])
    except ConfigurationError:
        raise
    except (InputError, KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(raw)


def build_dataset(cfg: dict) -> Dataset:
    ds = cfg["dataset"]
    seed = derive_seed(cfg["seed"], "data")
    if ds["kind"] == "blobs":
        return generate_blobs(
            ds["n_per_class"], ds["num_classes"], ds["dim"],
            centers_seed=ds.get("centers_seed", seed),
            noise_sigma=ds["noise_sigma"],
            sample_seed=ds.get("sample_seed", seed + 1),
            center_scale=ds["center_scale"],
            heldout_per_class=ds["heldout_per_class"],
        )
    data = load_idx(ds["images"], ds["labels"], ds.get("num_classes"))
    if "heldout_images" in ds:
        held = load_idx(ds["heldout_images"], ds["heldout_labels"], data.num_classes)
        split = np.concatenate([np.full(len(data), "train"), np.full(len(held), "heldout")])
        return Dataset(np.vstack([data.features, held.features]),
                       np.concatenate([data.labels, held.labels]), split,
                       max(data.num_classes, held.num_classes),
                       {"train": data.provenance, "heldout": held.provenance})
    frac = float(ds.get("heldout_fraction", 0.5))
    order = np.random.default_rng(seed).permutation(len(data))
    split = np.full(len(data), "train")
    split[order[: int(round(frac * len(data)))]] = "heldout"
    return Dataset(data.features, data.labels, split, data.num_classes, data.provenance)


def build_model(cfg: dict, num_classes: int, input_dim: int, stage: str) -> Model:
    dims = [input_dim, *cfg["model"]["hidden_dims"], num_classes]
    return Model.init(dims, seed=derive_seed(cfg["seed"], stage),
                      output_rectified=bool(cfg["model"]["output_rectified"]))


def train_models(cfg: dict, data: Dataset):
    """Cross-entropy baseline (or None) and the margin-trained model with its history."""
    tr = data.train
    baseline = None
    if cfg["baseline_train"] is not None:
        bt = cfg["baseline_train"]
        baseline = build_model(cfg, data.num_classes, data.input_dim, "baseline_init")
        baseline.output_rectified = False
        pretrain(baseline, tr.features, tr.labels, epochs=int(bt["epochs"]), lr=float(bt["lr"]),
                 batch_size=int(bt.get("batch_size", 32)),
                 seed=derive_seed(cfg["seed"], "baseline_train"))
    mt = dict(cfg["margin_train"])
    mt.setdefault("seed", derive_seed(cfg["seed"], "margin_train"))
    target = build_model(cfg, data.num_classes, data.input_dim, "margin_init")
    target, history = train(target, tr.features, tr.labels, DualConfig.from_dict(mt))
    return baseline, target, history


def shared_histograms(populations: dict, bins: int) -> dict:
    """Histograms of every population over one common set of uniform bins."""
    pooled = np.concatenate([np.asarray(v, dtype=np.float64) for v in populations.values()])
    pooled = pooled[np.isfinite(pooled)]
    if pooled.size == 0:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(pooled.min()), float(pooled.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    out = {"bin_edges": edges.tolist(), "counts": {}}
    for name, values in populations.items():
        values = np.asarray(values, dtype=np.float64)
        counts, _ = np.histogram(values[np.isfinite(values)], bins=edges)
        out["counts"][name] = counts.tolist() if values.size else []
    return out


def _sanitize(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if math.isfinite(obj) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class RunReport:
    config: dict
    train_history: dict
    histograms: dict
    accuracy: dict
    certification: dict
    detection: dict
    margins: dict = field(default_factory=dict)
    lipschitz: dict = field(default_factory=dict)
    gmm: dict | list = field(default_factory=dict)
    bc_correspondence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _sanitize(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def run_experiment(config, out_dir=None, write=True):
    """Execute the whole pipeline; ``config`` is a dict or a JSON path."""
    cfg = load_config(config) if isinstance(config, (str, os.PathLike)) else resolve_config(config)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    seed = cfg["seed"]
    artifacts = {}

    with _Stage("data"):
        data = build_dataset(cfg)
        tr, ho = data.train, data.heldout
        if len(tr) == 0 or len(ho) == 0:
            raise InputError("both train and heldout splits must be nonempty")

    with _Stage("train"):
        baseline, target, history = train_models(cfg, data)
        artifacts["baseline"], artifacts["target"] = baseline, target

    with _Stage("attack"):
        surrogate = baseline if baseline is not None else target
        att = AttackConfig.from_dict(cfg["attack"])
        X_adv = fgsm(surrogate, ho.features, ho.labels, att)
        acc = {
            "clean_acc_target": accuracy(target, ho.features, ho.labels),
            "adv_acc_target": accuracy(target, X_adv, ho.labels),
            "clean_acc_surrogate": accuracy(surrogate, ho.features, ho.labels),
            "adv_acc_surrogate": accuracy(surrogate, X_adv, ho.labels),
            "surrogate": "baseline" if baseline is not None else "target",
            "epsilon": att.epsilon,
        }
        artifacts["adversarial"] = Dataset(
            X_adv, ho.labels, ho.split, data.num_classes,
            {**ho.provenance, "surrogate_model_hash": surrogate.param_hash(),
             "epsilon": att.epsilon})

    with _Stage("margins"):
        train_logits = forward(target, tr.features)
        ho_logits = forward(target, ho.features)
        adv_logits = forward(target, X_adv)
        pops = {
            "train_label_margin": losses.label_margin(train_logits, tr.labels),
            "heldout_label_margin": losses.label_margin(ho_logits, ho.labels),
            "heldout_decision_margin": losses.decision_margin(ho_logits)[0],
            "fgsm_decision_margin": losses.decision_margin(adv_logits)[0],
        }
        decided = losses.decision_margin(ho_logits)[1]
        correct = decided == ho.labels
        mismatched = int(np.count_nonzero(
            pops["heldout_label_margin"][correct] != pops["heldout_decision_margin"][correct]))
        if mismatched:
            raise AssertionError(
                f"{mismatched} correctly classified held-out samples have label margin "
                "!= decision margin")
        bc = {"n_correct_heldout": int(correct.sum()), "mismatches": mismatched, "holds": True}
        hist = shared_histograms(pops, int(cfg["histogram_bins"]))
        margin_summary = {
            name: {"n": int(v.size), "min": float(v.min()), "median": float(np.median(v)),
                   "max": float(v.max()), "frac_below_mu": float(np.mean(v < cfg["margin_train"]["mu"]))}
            for name, v in pops.items()
        }

    with _Stage("certify"):
        cc = cfg["certify"]
        cert_seed = derive_seed(seed, "certify")
        bound = lipschitz_bounds(target, max_iters=int(cc["power_iters"]), tol=float(cc["tol"]),
                                 seed=cert_seed)
        cert = certify_dataset(target, tr.features, bound, mc_samples=cc.get("mc_samples"),
                               mc_points=cc.get("mc_points"), seed=cert_seed)
        artifacts["certification"] = cert

    with _Stage("detect"):
        dc = cfg["detect"]
        det_seed = derive_seed(seed, "detect")
        if dc["mode"] == "pooled":
            lm = pv.collect_log_margins(target, tr.features, tr.labels, pv.POOLED)
            gmm = pv.select_order_bic(lm.values, dc["K_max"], det_seed, dc["restarts"])
            train_p = pv.pvalue_from_log_margin(gmm, lm.values)
            gmm_doc = gmm.to_dict()
        else:
            gmm, train_p = {}, []
            for c in range(data.num_classes):
                lm = pv.collect_log_margins(target, tr.features, tr.labels, c)
                gmm[c] = pv.select_order_bic(lm.values, dc["K_max"], det_seed + c,
                                             dc["restarts"], class_id=c)
                train_p.append(pv.pvalue_from_log_margin(gmm[c], lm.values))
            train_p = np.concatenate(train_p)
            gmm_doc = [g.to_dict() for g in gmm.values()]
        threshold = pv.threshold_for_fpr(None, None, float(dc["target_fpr"]),
                                         training_pvalues=train_p)
        results = {
            "train": pv.detect(target, gmm, tr.features, threshold),
            "heldout": pv.detect(target, gmm, ho.features, threshold),
            "fgsm": pv.detect(target, gmm, X_adv, threshold),
        }
        artifacts["detection"] = results
        detection = {
            "threshold": threshold,
            "target_fpr": float(dc["target_fpr"]),
            "mode": dc["mode"],
            "training_flag_rate": float(np.mean(train_p < threshold)),
            "flag_rate": {k: r.flag_rate for k, r in results.items()},
            "median_pvalue": {k: float(np.median(r.pvalue)) for k, r in results.items()},
        }

    report = RunReport(
        config=cfg,
        train_history=history.to_dict(),
        histograms=hist,
        accuracy=acc,
        certification=cert.summary(),
        detection=detection,
        margins=margin_summary,
        lipschitz=bound.to_dict(),
        gmm=gmm_doc,
        bc_correspondence=bc,
    )
    if write:
        with _Stage("report"):
            emit_report(report, cfg["out_dir"], artifacts)
    return report, artifacts


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def histogram_csv(report: RunReport, population: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_left", "bin_right", "count"])
    edges = report.histograms["bin_edges"]
    counts = report.histograms["counts"].get(population) or []
    for i, count in enumerate(counts):
        w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(count)])
    return buf.getvalue()


def accuracy_csv(report: RunReport) -> str:
    acc = report.accuracy
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["inputs", "surrogate", "target"])
    w.writerow(["clean", repr(acc["clean_acc_surrogate"]), repr(acc["clean_acc_target"])])
    w.writerow(["fgsm", repr(acc["adv_acc_surrogate"]), repr(acc["adv_acc_target"])])
    return buf.getvalue()


def detection_csv(results: dict) -> str:
    """Detection rows for every population, tagged in a trailing column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "decided_class", "margin", "pvalue", "flagged", "population"])
    for name, res in results.items():
        body = res.to_csv().splitlines()[1:]
        for line in body:
            w.writerow(line.split(",") + [name])
    return buf.getvalue()


def emit_report(report: RunReport, out_dir, artifacts: dict | None = None):
    """Write report.json, per-population histogram CSVs, accuracy.csv, and,
    when the run artifacts are supplied, certification.csv, detection.csv and
    the trained models / adversarial set."""
    try:
        os.makedirs(os.path.join(out_dir, "histograms"), exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        _write(path, text)
        written.append(path)

    put("report.json", report.to_json())
    for name in POPULATIONS:
        put(os.path.join("histograms", f"{name}.csv"), histogram_csv(report, name))
    put("accuracy.csv", accuracy_csv(report))
    if artifacts:
        if artifacts.get("certification") is not None:
            put("certification.csv", artifacts["certification"].to_csv())
        if artifacts.get("detection") is not None:
            put("detection.csv", detection_csv(artifacts["detection"]))
        os.makedirs(os.path.join(out_dir, "models"), exist_ok=True)
        for key in ("baseline", "target"):
            if artifacts.get(key) is not None:
                path = os.path.join(out_dir, "models", f"{key}.json")
                save(artifacts[key], path)
                written.append(path)
        if artifacts.get("adversarial") is not None:
            path = os.path.join(out_dir, "adversarial.npz")
            artifacts["adversarial"].save(path)
            written.append(path)
    return written
