"""Command-line interface: ``mlsurv {synth,train,evaluate,explain}``.

Every command reads an optional strict JSON config (``--config``), applies
flag overrides, writes the resolved config to ``<out>/run_config.json`` and
then its outputs next to it. Running again from that file reproduces the
outputs byte for byte. Diagnostics go to stderr; the exit status is 0 only
when nothing went wrong.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


from . import gradteam, metrics
from .data.clinical import NormalizationStats, encode_clinical, load_modality_mapping
from .data.manifest import build_cohorts, load_cohort, write_manifest
from .data.synthetic import SignalSpec, generate_synthetic_cohort
from .data.volume import preprocess_volume
from .encoding import LABELS, build_time_grid, interval_index
from .errors import (CheckpointError, ConfigurationError, DataError, TrainingError, UndefinedMetricError,
                     UsageError)
from .mtlr import survival_at
from .network import (MODALITIES, EncoderConfig, SurvivalModel, TrainConfig, load_checkpoint, predict_cohort,
                      save_checkpoint, train)

log = logging.getLogger("mlsurv")

COMMANDS = ("synth", "train", "evaluate", "explain")
CONFIG_NAME = "run_config.json"
CHECKPOINT_NAME = "model.ckpt"
REPORT_VERSION = 1


@dataclass
class SynthSettings:
    n: int = 200
    signal: dict = field(default_factory=dict)  # SignalSpec overrides


@dataclass
class TrainSettings:
    manifest: str = ""
    labels: list = field(default_factory=lambda: list(LABELS))  # labels whose loss is switched on
    modality: str = "multimodal"
    K: int = 16
    encoder: dict = field(default_factory=dict)  # EncoderConfig overrides
    optimizer: dict = field(default_factory=dict)  # TrainConfig overrides
    modality_codes: Optional[str] = None  # JSON mapping file for treatment modality tokens


@dataclass
class EvaluateSettings:
    checkpoint: str = ""
    manifest: str = ""
    split: str = "test"
    horizons: list = field(default_factory=lambda: [1.0, 2.0, 3.0])
    resamples: int = 1000
    level: float = 0.95
    modality_codes: Optional[str] = None


@dataclass
class ExplainSettings:
    checkpoint: str = ""
    manifest: str = ""
    patient: str = ""
    label: str = "os"  # or "all"
    interval: Optional[int] = None
    time: Optional[float] = None  # years; mapped onto the checkpoint's grid
    mode: str = "score"
    modality_codes: Optional[str] = None


SECTIONS = {"synth": SynthSettings, "train": TrainSettings, "evaluate": EvaluateSettings,
            "explain": ExplainSettings}


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: str = "out"
    settings: object = None

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "out": self.out,
                self.command: dataclasses.asdict(self.settings)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(data: dict, allowed: set, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")


NESTED = {"signal": SignalSpec, "encoder": EncoderConfig, "optimizer": TrainConfig}
# fields set from the top level of the run config rather than inside the nested block
OWNED = {SignalSpec: set(), EncoderConfig: {"seed", "modality", "K", "labels"},
         TrainConfig: {"seed", "label_weights"}}


def _resolved(target, overrides: dict, owned: set) -> dict:
    """Defaults of ``target`` merged with ``overrides``, as JSON-ready values."""
    out = {}
    for f in dataclasses.fields(target):
        if f.name in owned:
            continue
        v = overrides.get(f.name, f.default if f.default is not dataclasses.MISSING else f.default_factory())
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def parse_run_config(data: dict, command: str) -> RunConfig:
    """Validate a config mapping for ``command``; unknown keys anywhere are rejected."""
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command {command!r}")
    _check_keys(data, {"command", "seed", "out"} | set(COMMANDS), "config")
    if data.get("command", command) != command:
        raise ConfigurationError(f"config was written for {data['command']!r}, not {command!r}")
    cls = SECTIONS[command]
    section = data.get(command, {})
    _check_keys(section, _field_names(cls), command)
    section = dict(section)
    for key, target in NESTED.items():
        if key in _field_names(cls):
            owned = OWNED.get(target, set())
            _check_keys(section.get(key, {}), _field_names(target) - owned, f"{command}.{key}")
            section[key] = _resolved(target, section.get(key, {}), owned)
    try:
        settings = cls(**section)
        _check_types(settings, command)
        seed = int(data.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {command} settings: {exc}") from None
    return RunConfig(command, seed, str(data.get("out", "out")), settings)


_TYPES = {"int": (int,), "float": (int, float), "str": (str,), "list": (list,), "dict": (dict,)}


def _check_types(settings, command: str):
    for f in dataclasses.fields(settings):
        v = getattr(settings, f.name)
        name = f.type.removeprefix("Optional[").removesuffix("]")
        if v is None and f.type.startswith("Optional["):
            continue
        if isinstance(v, bool) or not isinstance(v, _TYPES[name]):
            raise ConfigurationError(f"{command}.{f.name} must be {name}, got {v!r}")


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# --------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    s: SynthSettings = cfg.settings
    try:
        spec = SignalSpec(**_tuple_fields(s.signal))
    except TypeError as exc:
        raise ConfigurationError(f"invalid signal spec: {exc}") from None
    cohort = generate_synthetic_cohort(int(s.n), spec, seed=cfg.seed)
    path = write_manifest(cohort, out)
    return {"manifest": str(path)}


def _codes(path):
    return load_modality_mapping(path) if path else None


def _encoder_config(s: TrainSettings, seed: int) -> EncoderConfig:
    if s.modality not in MODALITIES:
        raise ConfigurationError(f"modality must be one of {MODALITIES}, got {s.modality!r}")
    return EncoderConfig(**_tuple_fields(s.encoder), labels=LABELS, K=int(s.K), modality=s.modality, seed=seed)


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    s: TrainSettings = cfg.settings
    unknown = [lab for lab in s.labels if lab not in LABELS]
    if unknown or not s.labels:
        raise ConfigurationError(f"labels must be a non-empty subset of {LABELS}, got {s.labels}")
    enc = _encoder_config(s, cfg.seed)
    loaded = load_cohort(s.manifest, _codes(s.modality_codes))
    cohorts, stats = build_cohorts(loaded, enc.volume_extents, modality_codes=_codes(s.modality_codes))
    tr, va = cohorts["train"], cohorts["validation"]
    grid = build_time_grid(tr.event_times(), enc.K)
    model = SurvivalModel(enc, grid)
    model.normalization = dataclasses.asdict(stats)
    weights = tuple(1.0 if lab in s.labels else 0.0 for lab in LABELS)
    tc = TrainConfig(**_tuple_fields(s.optimizer), label_weights=weights, seed=cfg.seed)
    result = train(model, tr, va, tc)
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(result.model, ckpt)
    loss_csv = out / "loss_log.csv"
    with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e in result.history:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])
    log.info("best validation loss at epoch %d of %d", result.best_epoch, len(result.history))
    return {"checkpoint": str(ckpt), "loss_log": str(loss_csv)}


def _stats_for(model: SurvivalModel) -> Optional[NormalizationStats]:
    if model.normalization is not None:
        return NormalizationStats(**model.normalization)
    log.warning("checkpoint carries no clinical normalization; refitting on the manifest's train split")
    return None


def _metric(errors: list, where: str, fn):
    try:
        return fn()
    except (UndefinedMetricError, DataError) as exc:
        errors.append(f"{where}: {exc}")
        return {"error": str(exc)}


def evaluate_report(model: SurvivalModel, cohort, s: EvaluateSettings, seed: int, out: Path):
    """Metrics report dict and the list of per-metric errors; writes KM CSVs into ``out``."""
    if len(cohort) == 0:
        raise DataError(f"split {s.split!r} has no patients")
    surv, risk = predict_cohort(model, cohort)
    errors: list = []
    per_label = {}
    for si, lab in enumerate(model.labels):
        t, e, r = cohort.times[:, si], cohort.events[:, si], risk[:, si]

        def c_index():
            return metrics.bootstrap_ci(metrics.concordance_index, (r, t, e), s.resamples, s.level,
                                        seed=seed).to_dict()

        entry = {"n": int(len(t)), "events": int(e.sum()), "c_index": _metric(errors, f"{lab} c_index", c_index)}
        aurocs = []
        for tau in s.horizons:
            score = 1.0 - survival_at(surv[:, si], model.grid, float(tau))

            def auc(score=score, tau=float(tau)):
                return metrics.bootstrap_ci(lambda a, b, c: metrics.auroc_at_horizon(a, b, c, tau),
                                            (score, t, e), s.resamples, s.level, seed=seed).to_dict()

            aurocs.append({"horizon_years": float(tau), **_metric(errors, f"{lab} auroc@{tau}", auc)})
        entry["auroc"] = aurocs

        def km_logrank():
            high, low = metrics.median_risk_split(r)
            if not high or not low:
                raise UndefinedMetricError("median split left one group empty")
            curves = {"high": metrics.kaplan_meier(t[high], e[high]), "low": metrics.kaplan_meier(t[low], e[low])}
            km_path = out / f"km_{lab}.csv"
            metrics.write_km_csv(km_path, curves)
            lr = metrics.log_rank(t[high], e[high], t[low], e[low])
            return {"statistic": lr.statistic, "p_value": lr.p_value, "n_high": len(high), "n_low": len(low),
                    "observed_high": lr.observed_a, "expected_high": lr.expected_a, "km_csv": km_path.name}

        entry["log_rank"] = _metric(errors, f"{lab} log_rank", km_logrank)
        per_label[lab] = entry
    report = {"version": REPORT_VERSION, "split": s.split, "n_patients": len(cohort), "seed": seed,
              "resamples": s.resamples, "level": s.level, "horizons_years": [float(h) for h in s.horizons],
              "risk_score": "negative restricted mean survival over the grid",
              "labels": per_label}
    return report, errors


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    s: EvaluateSettings = cfg.settings
    if s.resamples < 1 or not 0 < s.level < 1:
        raise ConfigurationError("resamples must be positive and level inside (0, 1)")
    if any(float(h) <= 0 for h in s.horizons):
        raise ConfigurationError("horizons must be positive")
    model = load_checkpoint(s.checkpoint)
    loaded = load_cohort(s.manifest, _codes(s.modality_codes))
    cohorts, _ = build_cohorts(loaded, model.config.volume_extents, _stats_for(model),
                               _codes(s.modality_codes))
    if s.split not in cohorts:
        raise ConfigurationError(f"split must be one of {tuple(cohorts)}, got {s.split!r}")
    report, errors = evaluate_report(model, cohorts[s.split], s, cfg.seed, out)
    path = out / "metrics.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for msg in errors:
        print(f"mlsurv evaluate: undefined metric: {msg}", file=sys.stderr)
    return {"report": str(path), "errors": errors}


def cmd_explain(cfg: RunConfig, out: Path) -> dict:
    s: ExplainSettings = cfg.settings
    model = load_checkpoint(s.checkpoint)
    labels = list(model.labels) if s.label == "all" else [s.label]
    for lab in labels:
        if lab not in model.labels:
            raise ConfigurationError(f"unknown label {lab!r}; choose from {model.labels} or 'all'")
    if (s.interval is None) == (s.time is None):
        raise ConfigurationError("give exactly one of interval and time")
    if s.time is not None:
        if not float(s.time) > 0:
            raise ConfigurationError(f"time must be positive, got {s.time}")
        k = interval_index(model.grid, float(s.time))
    else:
        k = int(s.interval)
    loaded = load_cohort(s.manifest, _codes(s.modality_codes))
    rejected = dict(loaded.rejected)
    if s.patient in rejected:
        raise DataError(f"patient {s.patient} was rejected: {rejected[s.patient]}")
    if s.patient not in loaded.ids:
        raise DataError(f"patient {s.patient!r} is not in {s.manifest}")
    j = loaded.ids.index(s.patient)
    stats = _stats_for(model)
    if stats is None:
        _, stats = build_cohorts(loaded, model.config.volume_extents)
    volume = preprocess_volume(loaded.volumes[j], model.config.volume_extents)
    clinical = encode_clinical(loaded.records[j], stats, _codes(s.modality_codes))
    written = {}
    for lab in labels:
        amap = gradteam.activation_map(model, volume, clinical, lab, k, s.patient, s.mode)
        written[lab] = gradteam.export_map(amap, out / f"{s.patient}_{lab}_k{k:02d}")
    return {"interval": k, "maps": written}


RUNNERS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "explain": cmd_explain}


# --------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlsurv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="master seed (data, init, shuffling, bootstrap)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
        return sp

    sp = common(sub.add_parser("synth", help="write a synthetic cohort manifest"))
    sp.add_argument("--n", type=int, help="number of patients")

    sp = common(sub.add_parser("train", help="train a model on a manifest"))
    sp.add_argument("--manifest")
    sp.add_argument("--labels", help="comma-separated labels to train on, e.g. os")
    sp.add_argument("--modality", choices=MODALITIES)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--K", type=int, dest="K", help="number of time intervals")

    sp = common(sub.add_parser("evaluate", help="metrics report for a checkpoint"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--split", choices=("train", "validation", "test"))
    sp.add_argument("--horizons", help="comma-separated horizons in years")
    sp.add_argument("--resamples", type=int)

    sp = common(sub.add_parser("explain", help="activation maps for one patient"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--patient")
    sp.add_argument("--label", help="label name or 'all'")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--interval", type=int, help="1-based grid interval")
    g.add_argument("--time", type=float, help="time in years, mapped onto the grid")
    sp.add_argument("--mode", choices=("score", "log_pmf"))
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
    data = dict(data)
    section = dict(data.get(args.command, {})) if isinstance(data.get(args.command, {}), dict) else {}
    for key in ("seed", "out"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "seed", "out", "verbose") and v is not None}
    if "labels" in overrides:
        overrides["labels"] = [v.strip() for v in overrides["labels"].split(",") if v.strip()]
    if "horizons" in overrides:
        try:
            overrides["horizons"] = [float(v) for v in overrides["horizons"].split(",")]
        except ValueError:
            raise ConfigurationError(f"horizons must be numbers, got {args.horizons!r}") from None
    if "epochs" in overrides:
        section["optimizer"] = {**section.get("optimizer", {}), "epochs": overrides.pop("epochs")}
    if args.command == "explain" and ("interval" in overrides or "time" in overrides):
        section.pop("interval", None)
        section.pop("time", None)
    section.update(overrides)
    data[args.command] = section
    return parse_run_config(data, args.command)


def run(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(cfg.dumps(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out}: {exc}") from exc
    return RUNNERS[cfg.command](cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = run(cfg)
    except (ConfigurationError, DataError, CheckpointError, TrainingError, UsageError, UndefinedMetricError,
            OSError) as exc:
        print(f"mlsurv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if result.get("errors"):
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
