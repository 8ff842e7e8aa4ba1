"""Classification and regression metrics, model comparison and signal importance.

Reports serialize to JSON with sorted keys so identical runs produce identical
bytes. The document layout is described by ``schemas/report.schema.json``.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import msgp
from .baselines import kcca_fit, kcca_project, logistic_train
from .data import (
    GlycemicLabel,
    WindowedDataset,
    holdout_split,
    sparsity_filter,
    standardize_apply,
    standardize_fit,
)
from .exceptions import GlucoctxError, InputShapeError

log = logging.getLogger(__name__)

REPORT_VERSION = 1
MODEL_KINDS = ("lr", "kcca", "gp", "gp_social", "gp_context")
_GP_MODES = {"gp": "none", "gp_social": "early_fusion", "gp_context": "shared_latent"}
LABELS = (GlycemicLabel.HYPO, GlycemicLabel.EU, GlycemicLabel.HYPER)


@dataclass
class EvalReport:
    model_name: str
    per_class: dict  # label name -> (precision, recall, support)
    overall_precision: float
    overall_recall: float
    macro_precision: float
    macro_recall: float
    rmse: float = None
    config_digest: str = ""
    undefined_precision: tuple = ()  # labels whose precision had a zero denominator
    failed: bool = False
    error: str = ""

    @property
    def n_test(self):
        return int(sum(v[2] for v in self.per_class.values()))

    def metrics(self):
        return {
            "per_class": {name: {"precision": p, "recall": r, "support": s}
                          for name, (p, r, s) in self.per_class.items()},
            "overall_precision": self.overall_precision,
            "overall_recall": self.overall_recall,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "rmse": self.rmse,
            "undefined_precision": list(self.undefined_precision),
            "failed": self.failed,
            "error": self.error,
        }

    def to_dict(self):
        return {"report_version": REPORT_VERSION, "model_name": self.model_name,
                "metrics": self.metrics(), "config_digest": self.config_digest}


@dataclass(frozen=True)
class ImportanceEntry:
    signal_name: str
    rmse_after_adding: float
    delta: float  # base_rmse - rmse_after_adding; positive means the signal helps


@dataclass
class ImportanceReport:
    base_rmse: float
    entries: list = field(default_factory=list)
    config_digest: str = ""

    def to_dict(self):
        return {"report_version": REPORT_VERSION, "model_name": "stepwise_importance",
                "metrics": {"base_rmse": self.base_rmse, "entries": [asdict(e) for e in self.entries]},
                "config_digest": self.config_digest}


def reports_to_json(reports):
    """Serialize reports into the versioned JSON document (stable bytes)."""
    doc = {"report_version": REPORT_VERSION, "reports": [r.to_dict() for r in reports]}
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def report_schema():
    text = resources.files("glucoctx").joinpath("schemas/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def digest(obj):
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


def data_digest(splits):
    h = hashlib.sha256()
    for train, test in splits:
        for part in (train, test):
            for arr in (part.V, part.S, part.y_value, part.y_label):
                h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
            h.update(",".join(part.side_names).encode("utf-8"))
    return h.hexdigest()


# --------------------------------------------------------------------------
# metrics


def _as_codes(labels):
    return np.array([int(v) for v in np.asarray(labels).ravel()], dtype=int)


def precision_recall(preds, truth, model_name=""):
    """Per-class precision and recall plus support-weighted and macro averages.

    A class never predicted has precision 0 and is listed in
    ``undefined_precision``; likewise recall is 0 for a class with no support.
    """
    p = _as_codes(preds)
    t = _as_codes(truth)
    if p.size != t.size:
        raise InputShapeError(f"{p.size} predictions but {t.size} truth labels")
    if t.size < 1:
        raise InputShapeError("need at least one prediction")
    per_class, undefined = {}, []
    for label in LABELS:
        tp = int(np.sum((p == label) & (t == label)))
        predicted = int(np.sum(p == label))
        support = int(np.sum(t == label))
        if predicted == 0:
            undefined.append(str(label))
        per_class[str(label)] = (tp / predicted if predicted else 0.0, tp / support if support else 0.0, support)
    supports = np.array([v[2] for v in per_class.values()], dtype=float)
    precisions = np.array([v[0] for v in per_class.values()])
    recalls = np.array([v[1] for v in per_class.values()])
    weights = supports / supports.sum()
    return EvalReport(model_name, per_class, float(weights @ precisions), float(weights @ recalls),
                      float(precisions.mean()), float(recalls.mean()), undefined_precision=tuple(undefined))


def rmse(pred_values, truth_values):
    pred = np.asarray(pred_values, dtype=float).ravel()
    truth = np.asarray(truth_values, dtype=float).ravel()
    if pred.size != truth.size:
        raise InputShapeError(f"{pred.size} predictions but {truth.size} truth values")
    if pred.size < 1:
        raise InputShapeError("need at least one value")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


# --------------------------------------------------------------------------
# model runs


def make_splits(users, seed=0, window_len=6, horizon=6, policy="drop", test_minutes=None, thresholds=None):
    """Per-user (train, test) windowed pairs from an iterable of (series, side)."""
    kwargs = {"seed": seed, "window_len": window_len, "horizon": horizon, "policy": policy}
    if test_minutes is not None:
        kwargs["test_minutes"] = test_minutes
    if thresholds is not None:
        kwargs["thresholds"] = thresholds
    splits = []
    for series, side in users:
        train, test, _ = holdout_split(series, side, **kwargs)
        splits.append((train, test))
    return splits


def _train_config(spec, seed):
    keys = ("latent_dim", "max_iters", "max_points", "head_restarts", "infer_max_iters", "rel_tol")
    kwargs = {k: spec[k] for k in keys if k in spec}
    return msgp.TrainConfig(context_mode=_GP_MODES[spec["kind"]], seed=seed, **kwargs)


def _fit_predict(spec, train, test, seed):
    """Labels and (for GP models) mean predictions on ``test``."""
    kind = spec["kind"]
    if kind in _GP_MODES:
        model = msgp.train(train.V, train.S, train.y_value, _train_config(spec, seed), labels=train.y_label)
        S_test = test.S if model.config.context_mode != "none" else None
        latents = msgp.infer_latents(model, test.V, S_test)
        labels = [int(msgp.argmax_label(p)) for p in msgp.class_probabilities(model, latents)]
        mean, _ = msgp.predict_values(model, test.V, S_test, latents=latents)
        return np.array(labels, dtype=int), mean
    X_train = np.hstack([train.V, train.S])
    X_test = np.hstack([test.V, test.S])
    stats = standardize_fit(X_train)
    X_train, X_test = standardize_apply(stats, X_train), standardize_apply(stats, X_test)
    l2 = spec.get("l2", 1e-4)
    if kind == "lr":
        return logistic_train(X_train, train.y_label, l2).predict(X_test), None
    if kind == "kcca":
        dv = train.V.shape[1]
        d = spec.get("latent_dim", 5)
        kc = kcca_fit(X_train[:, :dv], X_train[:, dv:], reg=spec.get("reg", 1e-3), d=d)
        Z_train = kc.train_projections()
        Z_test = kcca_project(kc, X_test[:, :dv], X_test[:, dv:])
        return logistic_train(Z_train, train.y_label, l2).predict(Z_test), None
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def _run_spec(spec, splits, seed, pooled):
    parts = [WindowedDataset.concat([tr for tr, _ in splits]), WindowedDataset.concat([te for _, te in splits])]
    work = [tuple(parts)] if pooled else splits
    preds, means = [], []
    for train, test in work:
        if len(test) == 0:
            continue
        labels, mean = _fit_predict(spec, train, test, seed)
        preds.append(labels)
        means.append(mean)
    truth = np.concatenate([te.y_label for _, te in work if len(te)])
    report = precision_recall(np.concatenate(preds), truth, spec["name"])
    if means and means[0] is not None:
        report.rmse = rmse(np.concatenate(means), np.concatenate([te.y_value for _, te in work if len(te)]))
    return report


def compare_models(dataset, model_specs, seed=0, pooled=False):
    """Train and score every model spec on the same splits.

    ``dataset`` is a list of per-user ``(train, test)`` WindowedDataset pairs.
    Each spec is a dict with ``name`` and ``kind`` (one of ``MODEL_KINDS``)
    plus optional settings such as ``latent_dim``, ``max_iters``,
    ``max_points``, ``l2`` and ``reg``. With ``pooled`` a single model is fit
    on all users; otherwise one model per user and predictions are pooled.
    A model that fails yields a report with ``failed`` set.
    """
    splits = list(dataset)
    if not splits:
        raise InputShapeError("dataset has no splits")
    base = data_digest(splits)
    reports = []
    for spec in model_specs:
        spec = dict(spec)
        spec.setdefault("name", spec.get("kind", ""))
        config_digest = digest({"spec": spec, "seed": seed, "pooled": pooled, "data": base})
        try:
            report = _run_spec(spec, splits, seed, pooled)
        except (GlucoctxError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("model %s failed: %s", spec["name"], exc)
            report = EvalReport(spec["name"], {str(lab): (0.0, 0.0, 0) for lab in LABELS}, 0.0, 0.0, 0.0, 0.0,
                                failed=True, error=f"{type(exc).__name__}: {exc}")
        report.config_digest = config_digest
        reports.append(report)
    return reports


def _pooled_rmse(splits, config, side_names):
    preds, truth = [], []
    for train, test in splits:
        if len(test) == 0:
            continue
        if side_names:
            train, test = train.select_side(side_names), test.select_side(side_names)
        model = msgp.train(train.V, train.S, train.y_value, config, labels=train.y_label)
        mean, _ = msgp.predict_values(model, test.V, test.S if side_names else None)
        preds.append(mean)
        truth.append(test.y_value)
    return rmse(np.concatenate(preds), np.concatenate(truth))


def stepwise_importance(dataset, candidate_signals, cfg=None):
    """Rank context signals by how much each alone lowers the forecast RMSE.

    The base model uses glucose only; every candidate is then added on its own
    (shared latent space, retrained from scratch) and its RMSE recorded.
    ``candidate_signals`` maps a signal name to the context columns it covers
    (a plain list of column names makes one signal per column).
    """
    cfg = cfg or msgp.TrainConfig()
    splits = list(dataset)
    if not isinstance(candidate_signals, dict):
        candidate_signals = {name: [name] for name in candidate_signals}
    base_rmse = _pooled_rmse(splits, _with_mode(cfg, "none"), [])
    entries = []
    with_ctx = _with_mode(cfg, "shared_latent")
    for name, columns in candidate_signals.items():
        after = _pooled_rmse(splits, with_ctx, list(columns))
        entries.append(ImportanceEntry(name, after, base_rmse - after))
    entries.sort(key=lambda e: -e.delta)
    return ImportanceReport(base_rmse, entries, digest({
        "config": asdict(cfg), "candidates": {k: list(v) for k, v in candidate_signals.items()},
        "data": data_digest(splits)}))


def _with_mode(cfg, mode):
    return msgp.TrainConfig(**{**asdict(cfg), "context_mode": mode})


def sparsity_study(users, min_bg_values, model_specs, seed=0, pooled=False, **split_kwargs):
    """Re-run :func:`compare_models` on the users left by each ``min_bg`` threshold.

    ``users`` maps user_id to ``(series, side)``. Report names carry the
    threshold as ``"<name>@min_bg=<t>"``; a threshold that leaves no users
    yields failed reports.
    """
    out = []
    for t in min_bg_values:
        kept = sparsity_filter(users, t)
        specs = [dict(s, name=f"{s.get('name', s['kind'])}@min_bg={t}") for s in model_specs]
        if not kept:
            for spec in specs:
                out.append(EvalReport(spec["name"], {str(lab): (0.0, 0.0, 0) for lab in LABELS}, 0.0, 0.0,
                                      0.0, 0.0, config_digest=digest({"spec": spec, "seed": seed, "data": None}),
                                      failed=True, error=f"no user has at least {t} readings"))
            continue
        splits = make_splits(kept.values(), seed=seed, **split_kwargs)
        out.extend(compare_models(splits, specs, seed, pooled))
    return out
