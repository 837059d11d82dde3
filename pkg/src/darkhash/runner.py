"""Experiment orchestration: one TOML config fully determines a run.

All randomness flows from the root seed through named substreams
(data / init / victim / surrogate / attack / eval / defense) so an
ablation perturbs only its own knob. Metric files contain no clocks or
environment state, so re-running an identical config writes byte-identical
metric JSON; wall-clock timings live only in the run record.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import datasets, defenses, evaluation, hashspace, models, trigger

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

DEFAULT_TRIGGER_FRACTION = 24.0 / 224.0  # reference trigger size over image side


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


def derive_seed(root: int, name: str) -> int:
    """Stable named substream of the root seed."""
    digest = hashlib.sha256(f"{root}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _section(raw: dict, name: str, cls):
    data = dict(raw.get(name, {}))
    if "lambda" in data:  # python keyword
        data["lam"] = data.pop("lambda")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # synthetic | folder
    classes: int = 10
    per_class: int = 200
    image_size: int = 16
    noise_std: float = 0.05
    channels: int = 3
    path: str | None = None
    manifest: str | None = None


@dataclass
class VictimSection:
    method: str = "central"  # central | pairwise
    k_bits: int = 16
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    fc_dim: int = 256
    conv_channels: tuple[int, ...] = (16, 32)


@dataclass
class SurrogateSection:
    kind: str = "heldout"  # heldout | gaussian | folder
    count: int = 2000
    classes: int = 100
    noise_std: float = 0.05
    mu: float = 0.5
    sigma: float = 1.0
    path: str | None = None
    manifest: str | None = None


@dataclass
class TriggerSection:
    size: int | None = None  # default: round(image_size * 24/224), floor 1
    location: str = "LR"
    transparency: float = 1.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    pattern_png: str | None = None


@dataclass
class AttackSection:
    lam: float = 15.0
    poisoning_rate: float = 0.1
    # "auto" picks the shadow class from victim responses on the surrogate
    target_class: int | str = "auto"
    freeze: str = "all-conv"
    distance_loss: str = "huber"
    modules: str = "ABC"
    # benign-vs-backdoor balance; the benign and backdoor terms are sums
    # over sets of different sizes, so their ratio is a free calibration
    ben_weight: float = 2.5
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 500


@dataclass
class EvalSection:
    top_n: list[int] = field(default_factory=lambda: [1, 10, 100])
    probe_queries: int = 100


@dataclass
class DefenseSection:
    prune_rates: list[float] = field(default_factory=lambda: [0.0, 0.3, 0.5, 0.8])
    finetune_epochs: int = 10
    finetune_learning_rate: float = 1e-3
    strip_overlays: int = 16
    strip_inputs: int = 100


@dataclass
class ExperimentConfig:
    seed: int = 7
    out_dir: str = "runs/run"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    victim: VictimSection = field(default_factory=VictimSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    defense: DefenseSection = field(default_factory=DefenseSection)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, overrides)


def config_from_dict(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    raw = dict(raw)
    nested = {"dataset", "victim", "surrogate", "trigger", "attack", "eval", "defense"}
    top = {k: v for k, v in raw.items() if k not in nested}
    unknown = set(top) - {"seed", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = ExperimentConfig(
        seed=int(top.get("seed", 7)),
        out_dir=str(top.get("out_dir", "runs/run")),
        dataset=_section(raw, "dataset", DatasetSection),
        victim=_section(raw, "victim", VictimSection),
        surrogate=_section(raw, "surrogate", SurrogateSection),
        trigger=_section(raw, "trigger", TriggerSection),
        attack=_section(raw, "attack", AttackSection),
        eval=_section(raw, "eval", EvalSection),
        defense=_section(raw, "defense", DefenseSection),
    )
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset.kind not in ("synthetic", "folder"):
        raise ConfigError(f"dataset.kind {cfg.dataset.kind!r} unknown")
    if cfg.victim.method not in ("central", "pairwise"):
        raise ConfigError(f"victim.method {cfg.victim.method!r} unknown")
    if cfg.surrogate.kind not in ("heldout", "gaussian", "folder"):
        raise ConfigError(f"surrogate.kind {cfg.surrogate.kind!r} unknown")
    if cfg.trigger.location not in trigger.LOCATIONS:
        raise ConfigError(f"trigger.location {cfg.trigger.location!r} unknown")
    if not (0.0 < cfg.attack.poisoning_rate < 1.0):
        raise ConfigError("attack.poisoning_rate must be in (0, 1)")
    if cfg.attack.lam < 0:
        raise ConfigError("attack.lambda must be >= 0")
    if cfg.dataset.kind == "folder" and not cfg.dataset.path:
        raise ConfigError("dataset.kind='folder' requires dataset.path")


# --- deterministic builders ---------------------------------------------------


def load_bundle(cfg: ExperimentConfig) -> datasets.DatasetBundle:
    d = cfg.dataset
    if d.kind == "folder":
        return datasets.ingest_image_folder(d.path, d.manifest,
                                            image_size=d.image_size)
    return datasets.generate_synthetic_mainset(
        classes=d.classes, per_class=d.per_class, image_size=d.image_size,
        noise_std=d.noise_std, seed=derive_seed(cfg.seed, "data"),
        channels=d.channels)


def build_surrogate(cfg: ExperimentConfig) -> list[datasets.LabeledImage]:
    s = cfg.surrogate
    seed = derive_seed(cfg.seed, "surrogate")
    if s.kind == "heldout":
        return datasets.generate_heldout_surrogate(
            count=s.count, image_size=cfg.dataset.image_size, classes=s.classes,
            noise_std=s.noise_std, seed=seed, channels=cfg.dataset.channels)
    if s.kind == "gaussian":
        return datasets.generate_gaussian_surrogate(
            count=s.count, image_size=cfg.dataset.image_size, mu=s.mu,
            sigma=s.sigma, seed=seed, classes=s.classes,
            channels=cfg.dataset.channels)
    bundle = datasets.ingest_image_folder(s.path, s.manifest,
                                          image_size=cfg.dataset.image_size)
    return bundle.train + bundle.query + bundle.database


def trigger_from_config(cfg: ExperimentConfig) -> trigger.TriggerSpec:
    t = cfg.trigger
    size = t.size
    if size is None:
        size = max(1, round(cfg.dataset.image_size * DEFAULT_TRIGGER_FRACTION))
    if t.pattern_png:
        return trigger.load_trigger_png(t.pattern_png, size, t.location,
                                        t.transparency)
    return trigger.solid_trigger(size, cfg.dataset.channels, t.color,
                                 t.location, t.transparency)


def attack_config(cfg: ExperimentConfig, victim: models.HashModel,
                  surrogate: list[datasets.LabeledImage]) -> attack_mod.AttackConfig:
    a = cfg.attack
    target = a.target_class
    if target == "auto":
        target = attack_mod.select_shadow_class(victim, surrogate)
        log.info("auto-selected shadow target class %d", target)
    return attack_mod.AttackConfig(
        trigger=trigger_from_config(cfg),
        lam=a.lam,
        poisoning_rate=a.poisoning_rate,
        target_class=int(target),
        distance_loss=a.distance_loss,
        freeze=a.freeze,
        modules=frozenset(a.modules),
        ben_weight=a.ben_weight,
        train=models.TrainConfig(
            optimizer="rmsprop", learning_rate=a.learning_rate,
            batch_size=a.batch_size, epochs=a.epochs,
            seed=derive_seed(cfg.seed, "attack")),
    )


def triggered_copies(images, spec: trigger.TriggerSpec, seed: int):
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=len(images))
    return [trigger.apply_trigger(im, spec, seed=int(s))
            for im, s in zip(images, seeds)]


# --- run records ----------------------------------------------------------------


@dataclass
class RunRecord:
    stage: str
    config: dict
    content_hash: str
    metrics: dict
    timings: dict
    artifacts: dict

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"run_record_{self.stage}.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2,
                                   sort_keys=True))
        return path


class _Timer:
    def __init__(self):
        self.marks: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def mark(self, name: str) -> None:
        now = time.perf_counter()
        self.marks[name] = round(now - self._t0, 4)
        self._t0 = now


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"{what} not found at {path}; run the producing stage first")
    return path


# --- stages ---------------------------------------------------------------------


def stage_gen_data(cfg: ExperimentConfig) -> RunRecord:
    out = _outdir(cfg)
    timer = _Timer()
    bundle = load_bundle(cfg)
    manifest = datasets.export_bundle(bundle, out / "data")
    surrogate = build_surrogate(cfg)
    surrogate_bundle = datasets.DatasetBundle(
        train=surrogate, query=[], database=[],
        class_count=surrogate[0].label.shape[0] if surrogate else 0)
    surrogate_manifest = datasets.export_bundle(surrogate_bundle, out / "data" / "surrogate")
    timer.mark("gen_data")
    record = RunRecord(
        stage="gen-data", config=cfg.snapshot(), content_hash=cfg.content_hash(),
        metrics={"train": len(bundle.train), "query": len(bundle.query),
                 "database": len(bundle.database), "surrogate": len(surrogate)},
        timings=timer.marks,
        artifacts={"manifest": str(manifest),
                   "surrogate_manifest": str(surrogate_manifest)})
    record.write(out)
    return record


def stage_train_victim(cfg: ExperimentConfig) -> RunRecord:
    out = _outdir(cfg)
    timer = _Timer()
    bundle = load_bundle(cfg)
    timer.mark("data")
    v = cfg.victim
    model = models.build_model(
        k_bits=v.k_bits, image_size=cfg.dataset.image_size,
        in_channels=cfg.dataset.channels, conv_channels=tuple(v.conv_channels),
        fc_dim=v.fc_dim, seed=derive_seed(cfg.seed, "init"))
    tc = models.TrainConfig(optimizer=v.optimizer, learning_rate=v.learning_rate,
                            batch_size=v.batch_size, epochs=v.epochs,
                            seed=derive_seed(cfg.seed, "victim"))
    trainer = (models.train_victim_central if v.method == "central"
               else models.train_victim_pairwise)
    trainer(model, bundle, tc)
    timer.mark("train")
    db = evaluation.build_code_database(model, bundle.database)
    benign_map = evaluation.map_score(model, bundle.query, db)
    timer.mark("eval")
    ckpt = out / "victim.dhm1"
    models.save_checkpoint(model, ckpt, tc)
    metrics_path = out / "victim_metrics.json"
    metrics_path.write_text(json.dumps({"map": benign_map}, indent=2, sort_keys=True))
    record = RunRecord(
        stage="train-victim", config=cfg.snapshot(), content_hash=cfg.content_hash(),
        metrics={"map": benign_map}, timings=timer.marks,
        artifacts={"checkpoint": str(ckpt), "metrics": str(metrics_path)})
    record.write(out)
    return record


def stage_attack(cfg: ExperimentConfig) -> RunRecord:
    out = _outdir(cfg)
    timer = _Timer()
    victim, _ = models.load_checkpoint(_require(out / "victim.dhm1", "victim checkpoint"))
    surrogate = build_surrogate(cfg)
    acfg = attack_config(cfg, victim, surrogate)
    timer.mark("setup")
    backdoored, history, _split = attack_mod.run_attack(victim, surrogate, acfg)
    timer.mark("attack")
    ckpt = out / "backdoored.dhm1"
    models.save_checkpoint(backdoored, ckpt, acfg.train)
    log_path = out / "attack_log.csv"
    attack_mod.write_attack_log(history, log_path)
    final = history[-1] if history else {}
    record = RunRecord(
        stage="attack", config=cfg.snapshot(), content_hash=cfg.content_hash(),
        metrics={"target_class": acfg.target_class,
                 **{k: final.get(k) for k in
                    ("loss_total", "loss_ben", "loss_bac", "loss_tpa")}},
        timings=timer.marks,
        artifacts={"checkpoint": str(ckpt), "attack_log": str(log_path)})
    record.write(out)
    return record


def _load_eval_model(out: Path) -> tuple[models.HashModel, bool]:
    bd = out / "backdoored.dhm1"
    if bd.exists():
        return models.load_checkpoint(bd)[0], True
    victim = _require(out / "victim.dhm1", "victim checkpoint")
    return models.load_checkpoint(victim)[0], False


def evaluate_model(cfg: ExperimentConfig, model: models.HashModel,
                   backdoored: bool, use_kernel: bool = False,
                   out: Path | None = None) -> evaluation.EvalReport:
    """Shared evaluation protocol for victims and backdoored models."""
    bundle = load_bundle(cfg)
    db = evaluation.build_code_database(model, bundle.database)
    query_codes = models.encode_codes(model, bundle.query)
    query_labels = datasets.stack_labels(bundle.query)
    kernel_eval = None
    if use_kernel:
        from . import kernel as kernel_mod

        kernel_eval = kernel_mod.KernelEvaluator.load()
        db_blob = hashspace.dhc1_bytes(db)
        q_blob = hashspace.dhc1_bytes(
            hashspace.CodeDatabase(codes=query_codes, labels=query_labels))
        benign_map = kernel_eval.map(q_blob, db_blob)
    else:
        benign_map = evaluation.map_from_codes(query_codes, query_labels, db)
    report = evaluation.EvalReport(
        map=benign_map,
        pr_points=evaluation.pr_curve_from_codes(query_codes, query_labels, db),
        precision_at={n: evaluation.precision_at_topn_from_codes(
            query_codes, query_labels, db, n) for n in cfg.eval.top_n},
    )
    if backdoored:
        spec = trigger_from_config(cfg)
        triggered = triggered_copies(bundle.query, spec,
                                     derive_seed(cfg.seed, "eval"))
        probes = triggered[:cfg.eval.probe_queries]
        target = evaluation.identify_target_class(model, probes, db)
        report.identified_target = target
        trig_codes = models.encode_codes(model, triggered)
        if kernel_eval is not None:
            t_blob = hashspace.dhc1_bytes(hashspace.CodeDatabase(
                codes=trig_codes, labels=datasets.stack_labels(triggered)))
            report.t_map = kernel_eval.map(t_blob, db_blob, target=target)
        else:
            report.t_map = evaluation.t_map_from_codes(trig_codes, db, target)
        if out is not None:
            target_labels = np.zeros_like(query_labels)
            target_labels[:, target] = 1
            evaluation.write_pr_csv(
                evaluation.pr_curve_from_codes(trig_codes, target_labels, db),
                out / "pr_triggered.csv")
    if out is not None:
        hashspace.write_dhc1(db, out / "database.dhc")
        hashspace.write_dhc1(
            hashspace.CodeDatabase(codes=query_codes, labels=query_labels),
            out / "queries.dhc")
        evaluation.write_pr_csv(report.pr_points, out / "pr_points.csv")
        _plot_pr(report.pr_points, out / "pr_curve.png")
    return report


def stage_evaluate(cfg: ExperimentConfig, use_kernel: bool = False) -> RunRecord:
    out = _outdir(cfg)
    timer = _Timer()
    model, backdoored = _load_eval_model(out)
    report = evaluate_model(cfg, model, backdoored, use_kernel, out)
    timer.mark("evaluate")
    report_path = out / "eval_report.json"
    report_path.write_text(report.to_json())
    metrics = {"map": report.map, "t_map": report.t_map,
               "identified_target": report.identified_target}
    artifacts = {"report": str(report_path),
                 "pr_points": str(out / "pr_points.csv"),
                 "database_codes": str(out / "database.dhc"),
                 "query_codes": str(out / "queries.dhc"),
                 "pr_plot": str(out / "pr_curve.png"),
                 "pr_plot_svg": str(out / "pr_curve.svg")}
    if (out / "pr_triggered.csv").exists():
        artifacts["pr_triggered"] = str(out / "pr_triggered.csv")
    record = RunRecord(
        stage="evaluate", config=cfg.snapshot(), content_hash=cfg.content_hash(),
        metrics=metrics, timings=timer.marks, artifacts=artifacts)
    record.write(out)
    return record


def stage_defend(cfg: ExperimentConfig) -> RunRecord:
    out = _outdir(cfg)
    timer = _Timer()
    backdoored, _ = models.load_checkpoint(
        _require(out / "backdoored.dhm1", "backdoored checkpoint"))
    bundle = load_bundle(cfg)
    spec = trigger_from_config(cfg)
    triggered = triggered_copies(bundle.query, spec, derive_seed(cfg.seed, "eval"))
    db = evaluation.build_code_database(backdoored, bundle.database)
    target = evaluation.identify_target_class(
        backdoored, triggered[:cfg.eval.probe_queries], db)
    d = cfg.defense

    def score(model: models.HashModel) -> tuple[float, float]:
        mdb = evaluation.build_code_database(model, bundle.database)
        return (evaluation.map_score(model, bundle.query, mdb),
                evaluation.t_map_score(model, triggered, mdb, target))

    sweep = []
    for rate in d.prune_rates:
        m, t = score(defenses.defend_prune(backdoored, rate))
        sweep.append((rate, m, t))
    defenses.write_sweep_csv(sweep, out / "prune_sweep.csv")
    timer.mark("prune")

    ft_cfg = models.TrainConfig(
        optimizer="rmsprop", learning_rate=d.finetune_learning_rate,
        batch_size=cfg.victim.batch_size, epochs=d.finetune_epochs,
        seed=derive_seed(cfg.seed, "defense"))
    defended = defenses.defend_finetune(backdoored, bundle, ft_cfg,
                                        method=cfg.victim.method)
    ft_map, ft_tmap = score(defended)
    timer.mark("finetune")

    n = d.strip_inputs
    strip = defenses.defend_strip(
        backdoored, clean_inputs=bundle.query[:n], triggered_inputs=triggered[:n],
        overlay_pool=bundle.train[:max(4 * d.strip_overlays, 64)], db=db,
        n_overlays=d.strip_overlays, seed=derive_seed(cfg.seed, "defense"))
    defenses.write_entropy_csv(strip, out / "strip_entropies.csv")
    timer.mark("strip")

    base_map, base_tmap = score(backdoored)
    summary = {
        "target": target,
        "baseline": {"map": base_map, "t_map": base_tmap},
        "finetune": {"map": ft_map, "t_map": ft_tmap,
                     "epochs": d.finetune_epochs},
        "prune_sweep": [{"rate": r, "map": m, "t_map": t} for r, m, t in sweep],
        "strip": {"far": strip.far, "threshold": strip.threshold},
    }
    report_path = out / "defense_report.json"
    report_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    record = RunRecord(
        stage="defend", config=cfg.snapshot(), content_hash=cfg.content_hash(),
        metrics={"finetune_t_map": ft_tmap, "strip_far": strip.far,
                 "prune_final_t_map": sweep[-1][2] if sweep else None},
        timings=timer.marks,
        artifacts={"report": str(report_path),
                   "prune_sweep": str(out / "prune_sweep.csv"),
                   "strip_entropies": str(out / "strip_entropies.csv")})
    record.write(out)
    return record


# --- ablation -------------------------------------------------------------------

ABLATION_KNOBS = ("lambda", "poisoning_rate", "trigger_size", "location",
                  "transparency", "surrogate_count", "freeze_depth",
                  "learning_rate", "seed", "module_mask")


def apply_knob(cfg: ExperimentConfig, knob: str, value) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    if knob == "lambda":
        cfg.attack.lam = float(value)
    elif knob == "poisoning_rate":
        cfg.attack.poisoning_rate = float(value)
    elif knob == "trigger_size":
        cfg.trigger.size = int(value)
    elif knob == "location":
        cfg.trigger.location = str(value)
    elif knob == "transparency":
        cfg.trigger.transparency = float(value)
    elif knob == "surrogate_count":
        cfg.surrogate.count = int(value)
    elif knob == "freeze_depth":
        cfg.attack.freeze = f"first-n:{int(value)}"
    elif knob == "learning_rate":
        cfg.attack.learning_rate = float(value)
    elif knob == "seed":
        cfg.seed = int(value)
    elif knob == "module_mask":
        cfg.attack.modules = str(value)
    else:
        raise ConfigError(f"unknown ablation knob {knob!r}; "
                          f"choose from {ABLATION_KNOBS}")
    return cfg


def run_attack_point(cfg: ExperimentConfig,
                     victim: models.HashModel) -> evaluation.EvalReport:
    """One attack + evaluation with everything in memory (ablation inner loop)."""
    surrogate = build_surrogate(cfg)
    acfg = attack_config(cfg, victim, surrogate)
    backdoored, _, _ = attack_mod.run_attack(copy.deepcopy(victim), surrogate, acfg)
    return evaluate_model(cfg, backdoored, backdoored=True)


def stage_ablate(cfg: ExperimentConfig, knob: str, values: list) -> RunRecord:
    out = _outdir(cfg)
    timer = _Timer()
    victims: dict[int, models.HashModel] = {}

    def victim_for(point_cfg: ExperimentConfig) -> models.HashModel:
        if point_cfg.seed not in victims:
            ckpt = out / "victim.dhm1"
            if point_cfg.seed == cfg.seed and ckpt.exists():
                victims[point_cfg.seed] = models.load_checkpoint(ckpt)[0]
            else:
                record = stage_train_victim(
                    dataclasses.replace(point_cfg,
                                        out_dir=str(out / "ablate" / f"seed{point_cfg.seed}")))
                victims[point_cfg.seed] = models.load_checkpoint(
                    Path(record.artifacts["checkpoint"]))[0]
        return victims[point_cfg.seed]

    rows = []
    for value in values:
        point_cfg = apply_knob(cfg, knob, value)
        try:
            report = run_attack_point(point_cfg, victim_for(point_cfg))
            rows.append((value, report.map, report.t_map, ""))
        except Exception as exc:  # sweep must survive single-point failures
            log.exception("ablation point %s=%r failed", knob, value)
            rows.append((value, "", "", f"{type(exc).__name__}: {exc}"))
    csv_path = out / f"ablate_{knob}.csv"
    import csv as _csv

    with open(csv_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["knob_value", "map", "t_map", "error"])
        writer.writerows(rows)
    timer.mark("ablate")
    record = RunRecord(
        stage=f"ablate-{knob}", config=cfg.snapshot(),
        content_hash=cfg.content_hash(),
        metrics={"points": len(values),
                 "failed": sum(1 for r in rows if r[3])},
        timings=timer.marks, artifacts={"sweep": str(csv_path)})
    record.write(out)
    return record


def stage_report(cfg: ExperimentConfig) -> RunRecord:
    """Collect run records and metric files into a human-readable summary."""
    out = _outdir(cfg)
    timer = _Timer()
    lines = ["# Run summary", ""]
    for record_file in sorted(out.glob("run_record_*.json")):
        rec = json.loads(record_file.read_text())
        lines.append(f"## {rec['stage']}")
        lines.append(f"- config hash: `{rec['content_hash'][:12]}`")
        for key, value in rec.get("metrics", {}).items():
            lines.append(f"- {key}: {value}")
        for key, value in rec.get("timings", {}).items():
            lines.append(f"- time[{key}]: {value}s")
        lines.append("")
    for sweep_csv in sorted(out.glob("ablate_*.csv")) + [out / "prune_sweep.csv"]:
        if Path(sweep_csv).exists():
            _plot_sweep(Path(sweep_csv))
            lines.append(f"- sweep plot: {Path(sweep_csv).with_suffix('.png').name}")
    summary = out / "summary.md"
    summary.write_text("\n".join(lines))
    timer.mark("report")
    record = RunRecord(
        stage="report", config=cfg.snapshot(), content_hash=cfg.content_hash(),
        metrics={}, timings=timer.marks, artifacts={"summary": str(summary)})
    record.write(out)
    return record


def _plot_pr(points: list[tuple[float, float]], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    recall, precision = zip(*points)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(recall, precision, marker="o")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path)
    fig.savefig(path.with_suffix(".svg"))
    plt.close(fig)


def _plot_sweep(csv_path: Path) -> None:
    import csv as _csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs, maps, tmaps = [], [], []
    with open(csv_path, newline="") as fh:
        for row in _csv.DictReader(fh):
            key = "knob_value" if "knob_value" in row else "rate"
            try:
                maps.append(float(row["map"]))
                tmaps.append(float(row["t_map"]))
                xs.append(row[key])
            except (ValueError, TypeError):
                continue
    if not xs:
        return
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, maps, marker="o", label="mAP")
    ax.plot(xs, tmaps, marker="s", label="t-mAP")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(csv_path.with_suffix(".png"))
    plt.close(fig)
