"""Command-line front end: ``glucoctx <command> [--config FILE] [--key value ...]``.

Every setting can come from a ``key=value`` config file (``#`` starts a
comment) or from the matching ``--key`` flag; flags win. Exit codes are
0 on success, 1 for usage errors, 2 for data errors and 3 for numerical
failures.
"""

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, msgp
from .data import (
    DEFAULT_THRESHOLDS,
    PHYSIOLOGICAL_FLOOR,
    WEEK_MINUTES,
    SynthConfig,
    WindowedDataset,
    categorize_array,
    history_windows,
    parse_series_csv,
    synth_generate,
    write_glucose_csv,
    write_side_csv,
)
from .evaluation import (
    MODEL_KINDS,
    compare_models,
    digest,
    make_splits,
    precision_recall,
    reports_to_json,
    rmse,
    sparsity_study,
    stepwise_importance,
)
from .exceptions import (
    ConfigError,
    DataError,
    FitFailureError,
    IllConditionedKernelError,
    InputShapeError,
    MissingValueError,
    NumericInputError,
)
from .optim import finite_diff_check

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = {
    "synth": "write a seeded synthetic glucose/context data set",
    "train": "fit one model per user (or pooled) on the training split",
    "predict": "forecast from every complete window with trained models",
    "evaluate": "score trained models and/or baselines on the held-out split",
    "importance": "rank context signals by forecast RMSE reduction",
    "sparsity": "repeat the comparison over user-sparsity thresholds",
    "gradcheck": "finite-difference check of the latent objective gradient",
}
GRADCHECK_TOL = 1e-4


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _csv_list(text):
    return [item.strip() for item in str(text).split(",") if item.strip()]


# name -> (parser, default, is_path, help)
SETTINGS = {
    "glucose": (str, None, True, "glucose CSV (user_id,timestamp_min,bg_mgdl)"),
    "side": (str, None, True, "context CSV (user_id,timestamp_min,<features...>)"),
    "out": (str, None, True, "output directory"),
    "model_dir": (str, None, True, "directory of trained models (default <out>/models for train)"),
    "seed": (int, 0, False, "seed for every random choice"),
    "context_mode": (str, "shared_latent", False, "none, early_fusion or shared_latent"),
    "window_len": (int, 6, False, "glucose readings per input window"),
    "horizon": (int, 6, False, "steps ahead of the window end that are predicted"),
    "latent_dim": (int, 5, False, "latent dimension q"),
    "policy": (str, "drop", False, "missing-value policy: drop or forward_fill"),
    "hypo_below": (float, DEFAULT_THRESHOLDS[0], False, "hypoglycemia threshold (mg/dl)"),
    "hyper_above": (float, DEFAULT_THRESHOLDS[1], False, "hyperglycemia threshold (mg/dl)"),
    "test_minutes": (int, WEEK_MINUTES, False, "length of the held-out interval per user"),
    "max_iters": (int, 200, False, "latent optimization iteration budget"),
    "max_points": (int, 0, False, "training windows per model (0 keeps all)"),
    "pooled": (_bool, False, False, "fit one model across users instead of one per user"),
    "models": (_csv_list, [], False, f"comparison models for evaluate/sparsity: {','.join(MODEL_KINDS)}"),
    "steps": (int, 1, False, "recursive forecast steps for predict"),
    "min_bg": (lambda t: [int(x) for x in _csv_list(t)], [0], False, "sparsity thresholds (readings per user)"),
    "candidates": (_csv_list, [], False, "context columns ranked by importance (default: all)"),
    "n_users": (int, 3, False, "synth: number of users"),
    "points_per_user": (int, 500, False, "synth: readings per user"),
    "n_informative": (int, 2, False, "synth: informative context columns"),
    "n_noise_features": (int, 0, False, "synth: pure-noise context columns"),
    "context_informative": (_bool, True, False, "synth: whether ctx_* columns carry signal"),
    "noise_sd": (float, 3.0, False, "synth: glucose measurement noise (mg/dl)"),
}

REQUIRED = {
    "synth": ("out",),
    "train": ("glucose", "out"),
    "predict": ("glucose", "model_dir", "out"),
    "evaluate": ("glucose", "out"),
    "importance": ("glucose", "side", "out"),
    "sparsity": ("glucose", "out"),
    "gradcheck": (),
}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def thresholds(self):
        return (self.hypo_below, self.hyper_above)

    def split_kwargs(self):
        return {"window_len": self.window_len, "horizon": self.horizon, "policy": self.policy,
                "test_minutes": self.test_minutes, "thresholds": self.thresholds}

    def train_config(self, mode=None):
        return msgp.TrainConfig(latent_dim=self.latent_dim, max_iters=self.max_iters, seed=self.seed,
                                context_mode=mode or self.context_mode, max_points=self.max_points)

    def digest(self):
        """Hash of every result-affecting setting; input files count by content, not location."""
        settings = {k: v for k, v in self.values.items() if not SETTINGS[k][2]}
        for key in ("glucose", "side"):
            path = self.values[key]
            if path and Path(path).is_file():
                settings[key + "_sha256"] = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        return digest(settings)


def read_config_file(path):
    """Parse ``key=value`` lines; unknown keys raise ConfigError."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(command, config_path, overrides):
    """Merge defaults, config file and flag overrides into a RunConfig.

    Relative paths in the config file are taken relative to the file; paths
    given as flags are taken relative to the working directory.
    """
    values = {k: spec[1] for k, spec in SETTINGS.items()}
    sources = []
    if config_path:
        base = Path(config_path).resolve().parent
        sources.append((read_config_file(config_path), base))
    sources.append(({k: v for k, v in overrides.items() if v is not None}, Path.cwd()))
    for raw, base in sources:
        for key, text in raw.items():
            parse, _, is_path, _ = SETTINGS[key]
            try:
                value = parse(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
            values[key] = str((base / value).resolve()) if is_path else value
    missing = [k for k in REQUIRED[command] if values[k] is None]
    if missing:
        raise ConfigError(f"{command} needs: {', '.join('--' + k.replace('_', '-') for k in missing)}")
    if values["context_mode"] not in msgp.CONTEXT_MODES:
        raise ConfigError(f"context_mode must be one of {', '.join(msgp.CONTEXT_MODES)}")
    if values["policy"] not in ("drop", "forward_fill"):
        raise ConfigError("policy must be drop or forward_fill")
    bad = [m for m in values["models"] if m not in MODEL_KINDS]
    if bad:
        raise ConfigError(f"unknown model kinds {bad}; choose from {', '.join(MODEL_KINDS)}")
    return RunConfig(values)


def _out_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def _load_users(cfg):
    return parse_series_csv(cfg.glucose, cfg.side)


def _user_file(user_id):
    return f"{user_id}.npz"


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    users = synth_generate(SynthConfig(
        n_users=cfg.n_users, points_per_user=cfg.points_per_user, seed=cfg.seed,
        n_informative=cfg.n_informative, n_noise_features=cfg.n_noise_features,
        context_informative=cfg.context_informative, noise_sd=cfg.noise_sd))
    out = _out_dir(cfg)
    write_glucose_csv(out / "glucose.csv", [u.series for u in users])
    write_side_csv(out / "side.csv", [u.side for u in users])
    _write_json(out / "synth.json", {"config_digest": cfg.digest(), "users": [u.series.user_id for u in users]})
    print(f"wrote {len(users)} users to {out}")


def cmd_train(cfg):
    users = _load_users(cfg)
    out = _out_dir(cfg)
    model_dir = Path(cfg.model_dir) if cfg.model_dir else out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config()
    provenance = {"config_digest": cfg.digest(), "package_version": __version__}
    summary = {}
    items = _training_sets(users, cfg)
    for user_id, train in items:
        model = msgp.train(train.V, train.S if train.S.shape[1] else None, train.y_value, tc, labels=train.y_label)
        msgp.save_model(model, model_dir / _user_file(user_id), provenance={**provenance, "user_id": user_id})
        summary[user_id] = {"n_train": int(len(train)), "objective": model.objective_value,
                            "converged": model.converged, "iterations": len(model.objective_trace) - 1}
    _write_json(out / "train_summary.json", {"config_digest": cfg.digest(), "models": summary})
    print(f"trained {len(summary)} model(s) into {model_dir}")


def _training_sets(users, cfg):
    splits = make_splits(users.values(), seed=cfg.seed, **cfg.split_kwargs())
    if cfg.pooled:
        return [("pooled", WindowedDataset.concat([tr for tr, _ in splits]))]
    return [(user_id, tr) for user_id, (tr, _) in zip(users, splits)]


def _model_for(model_dir, user_id):
    for name in (_user_file(user_id), _user_file("pooled")):
        path = Path(model_dir) / name
        if path.is_file():
            return msgp.load_model(path)
    raise DataError(f"no model for user {user_id!r} in {model_dir}")


def cmd_predict(cfg):
    users = _load_users(cfg)
    out = _out_dir(cfg)
    rows = []
    for user_id, (series, side) in users.items():
        model = _model_for(cfg.model_dir, user_id)
        V, S, t_end = history_windows(series, side, model.window_len, cfg.policy)
        if V.shape[0] == 0:
            continue
        S_use = S if model.config.context_mode != "none" else None
        latents = msgp.infer_latents(model, V, S_use)
        first = [int(msgp.argmax_label(p)) for p in msgp.class_probabilities(model, latents)]
        means, variances = msgp.recursive_forecast_batch(model, V, S_use, cfg.steps)
        later = categorize_array(np.maximum(means, PHYSIOLOGICAL_FLOOR), cfg.thresholds)
        for i, t in enumerate(t_end):
            for step in range(cfg.steps):
                label = first[i] if step == 0 else int(later[i, step])
                rows.append((user_id, int(t), step + 1, repr(float(means[i, step])),
                             repr(float(variances[i, step])), str(msgp.GlycemicLabel(label))))
    lines = ["user_id,timestamp_min,step,pred_mean_mgdl,pred_var,pred_label"]
    lines += [",".join(str(v) for v in row) for row in rows]
    _write_text(out / "predictions.csv", "\n".join(lines) + "\n")
    _write_json(out / "predictions.meta.json", {"config_digest": cfg.digest(), "rows": len(rows)})
    print(f"wrote {len(rows)} predictions to {out / 'predictions.csv'}")


def _evaluate_trained(cfg, users, splits):
    preds, truth, means, values = [], [], [], []
    name = None
    for user_id, (_, test) in zip(users, splits):
        if len(test) == 0:
            continue
        model = _model_for(cfg.model_dir, user_id)
        name = name or {"none": "gp", "early_fusion": "gp_social", "shared_latent": "gp_context"}[
            model.config.context_mode]
        S = test.S if model.config.context_mode != "none" else None
        latents = msgp.infer_latents(model, test.V, S)
        preds.append([int(msgp.argmax_label(p)) for p in msgp.class_probabilities(model, latents)])
        means.append(msgp.predict_values(model, test.V, S, latents=latents)[0])
        truth.append(test.y_label)
        values.append(test.y_value)
    if not preds:
        raise DataError("no held-out windows to evaluate")
    report = precision_recall(np.concatenate(preds), np.concatenate(truth), f"trained:{name}")
    report.rmse = rmse(np.concatenate(means), np.concatenate(values))
    report.config_digest = cfg.digest()
    return report


def _specs(cfg):
    return [{"name": kind, "kind": kind, "latent_dim": cfg.latent_dim, "max_iters": cfg.max_iters,
             "max_points": cfg.max_points} for kind in cfg.models]


def cmd_evaluate(cfg):
    users = _load_users(cfg)
    out = _out_dir(cfg)
    splits = make_splits(users.values(), seed=cfg.seed, **cfg.split_kwargs())
    reports = []
    if cfg.model_dir:
        reports.append(_evaluate_trained(cfg, users, splits))
    if cfg.models:
        reports.extend(compare_models(splits, _specs(cfg), cfg.seed, cfg.pooled))
    if not reports:
        raise ConfigError("evaluate needs --model-dir, --models or both")
    _write_text(out / "report.json", reports_to_json(reports))
    for r in reports:
        status = "FAILED " + r.error if r.failed else f"overall precision {r.overall_precision:.3f}"
        print(f"{r.model_name}: {status}")


def cmd_importance(cfg):
    users = _load_users(cfg)
    out = _out_dir(cfg)
    names = next(iter(users.values()))[1].feature_names
    candidates = cfg.candidates or list(names)
    unknown = [c for c in candidates if c not in names]
    if unknown:
        raise DataError(f"candidate columns not in {cfg.side}: {unknown}")
    splits = make_splits(users.values(), seed=cfg.seed, **cfg.split_kwargs())
    report = stepwise_importance(splits, candidates, cfg.train_config("shared_latent"))
    _write_text(out / "importance.json", reports_to_json([report]))
    print(f"base rmse {report.base_rmse:.3f}")
    for e in report.entries:
        print(f"{e.signal_name}: rmse {e.rmse_after_adding:.3f} (delta {e.delta:+.3f})")


def cmd_sparsity(cfg):
    users = _load_users(cfg)
    out = _out_dir(cfg)
    specs = _specs(cfg) or [{"name": "gp_context", "kind": "gp_context", "latent_dim": cfg.latent_dim,
                             "max_iters": cfg.max_iters, "max_points": cfg.max_points}]
    reports = sparsity_study(users, cfg.min_bg, specs, cfg.seed, cfg.pooled, **cfg.split_kwargs())
    _write_text(out / "sparsity.json", reports_to_json(reports))
    for r in reports:
        print(f"{r.model_name}: " + ("FAILED " + r.error if r.failed else f"{r.overall_precision:.3f}"))


def gradcheck_error(seed):
    """Max relative finite-difference error of the packed objective gradient on a random instance."""
    Q, pv, ps, V, S = msgp.gradcheck_instance(seed)
    packed = msgp._PackedObjective(V, S, Q.shape[1], pv.jitter, ps.jitter)
    return finite_diff_check(packed.f, packed.g, packed.pack(Q, pv, ps), step=1e-6)


def cmd_gradcheck(cfg):
    err = gradcheck_error(cfg.seed)
    print(f"max relative error {err:.3e}")
    if not err <= GRADCHECK_TOL:
        raise FloatingPointError(f"gradient check failed: {err:.3e} > {GRADCHECK_TOL:g}")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "importance": cmd_importance, "sparsity": cmd_sparsity, "gradcheck": cmd_gradcheck}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="glucoctx", description="Glucose forecasting with context signals.")
    parser.add_argument("--version", action="version", version=f"glucoctx {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for command, text in COMMANDS.items():
        p = sub.add_parser(command, help=text, description=text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (_, default, _, text) in SETTINGS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"{text} (default: {default})")
    return parser


def dispatch(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"choose a command: {', '.join(COMMANDS)}")
        overrides = {k: getattr(args, k) for k in SETTINGS}
        cfg = resolve_config(args.command, args.config, overrides)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        HANDLERS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IllConditionedKernelError, FitFailureError, NumericInputError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MissingValueError, InputShapeError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
