"""Run configuration and the pipeline behind each CLI subcommand.

A run directory holds everything one experiment produces; see
``engine.paths.build_run_paths`` for the layout. Each pipeline function
checks its prerequisites, refuses to overwrite finished artifacts unless
``force`` is set, and writes its outputs atomically.
"""

import copy
import json
import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from types import SimpleNamespace

from slides import storage
from slides.generator import generate_virtual_slide
from slides.geometry import GeometryError, ResolutionSpec, check_base_side, validate_resolution
from slides.tiling import extract_triples_many, slide_geometry

from . import backbone, checkpoints, evaluation, mainbody, plots, training
from .backbone import BackboneConfig, validate_backbone
from .json_utils import atomic_json_dump, load_json, log_event
from .paths import build_run_paths

DEFAULT_CONFIG = {
    "seed": 0,
    "resolution": {
        "factors": [16, 4, 1],
        "patch_size": 256,
    },
    "data": {
        "n_slides": 10,
        "base_side": 4096,
        "n_classes": 4,
        "split": [7, 1, 2],
        "probe_slides": 1,
        "workers": 4,
    },
    "backbone": {
        "base_channels": 16,
        "encoder_blocks": 3,
        "decoder_blocks": 3,
    },
    "gaps": {
        "tau": 0.5,
        "mode": "per_branch",
        "calibration_triples": 32,
    },
    "meta_fusion": {
        "hidden": 256,
        "generate_biases": False,
    },
    "train": {
        "epochs_step1": 30,
        "epochs_step2": 10,
        "epochs_step3": 10,
        "plain_fusion_epochs": 10,
        "batch_size": 32,
        "learning_rate": 1e-4,
    },
}

GAP_MODES = ("per_branch", "shared")
BASELINES = ("multi-branch", "meta-raw", "plain-fusion", "non-gap")
PLOTS = ("gaps", "trend", "fusion-trend", "branch-trend")
PLOT_FORMATS = ("png", "svg")
LAYER_STATS_FILE = "layer_stats.json"


class PrerequisiteError(RuntimeError):
    pass


class RunLockedError(RuntimeError):
    pass


class ArtifactExistsError(RuntimeError):
    pass


class ConfigError(ValueError):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class DataConfig:
    n_slides: int
    base_side: int
    n_classes: int
    split: tuple[int, int, int]
    probe_slides: int
    workers: int


@dataclass(frozen=True)
class GapConfig:
    tau: float
    mode: str
    calibration_triples: int


@dataclass(frozen=True)
class MetaFusionConfig:
    hidden: int
    generate_biases: bool


@dataclass(frozen=True)
class RunConfig:
    seed: int
    resolution: ResolutionSpec
    data: DataConfig
    backbone: BackboneConfig
    gaps: GapConfig
    meta_fusion: MetaFusionConfig
    train: training.TrainConfig
    raw: dict

    def to_dict(self):
        return copy.deepcopy(self.raw)


def load_config(path):
    with open(path, "r") as f:
        return json.load(f)


def normalize_config(config):
    normalized = copy.deepcopy(DEFAULT_CONFIG)
    if not isinstance(config, dict):
        return normalized
    for section, defaults in DEFAULT_CONFIG.items():
        value = config.get(section)
        if isinstance(defaults, dict):
            if isinstance(value, dict):
                for key in defaults:
                    if key in value:
                        normalized[section][key] = copy.deepcopy(value[key])
        elif value is not None:
            normalized[section] = value
    return normalized


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def validate_config(config):
    errors = []
    if not isinstance(config, dict):
        return ["config must be a JSON object"]
    unknown = sorted(set(config) - set(DEFAULT_CONFIG))
    for section in unknown:
        errors.append(f"unknown config section '{section}'")
    for section, defaults in DEFAULT_CONFIG.items():
        if isinstance(defaults, dict) and section in config:
            if not isinstance(config[section], dict):
                errors.append(f"{section} must be an object")
                continue
            for key in sorted(set(config[section]) - set(defaults)):
                errors.append(f"unknown key '{section}.{key}'")
    cfg = normalize_config(config)

    if not _is_int(cfg["seed"]) or cfg["seed"] < 0:
        errors.append("seed must be a non-negative integer")

    resolution = cfg["resolution"]
    resolution_errors = validate_resolution(resolution["factors"], resolution["patch_size"])
    errors.extend(resolution_errors)

    data = cfg["data"]
    for key in ("n_slides", "base_side", "n_classes", "probe_slides", "workers"):
        if not _is_int(data[key]):
            errors.append(f"data.{key} must be an integer")
    split = data["split"]
    if not isinstance(split, list) or len(split) != 3 or not all(_is_int(v) and v >= 1 for v in split):
        errors.append("data.split must be three positive integers (train, subtrain, test)")
    elif _is_int(data["n_slides"]) and sum(split) != data["n_slides"]:
        errors.append(f"data.split {split} must add up to data.n_slides ({data['n_slides']})")
    elif _is_int(data["probe_slides"]) and not 0 <= data["probe_slides"] < split[0]:
        errors.append("data.probe_slides must be >= 0 and smaller than the number of training slides")
    if _is_int(data["n_classes"]) and not 2 <= data["n_classes"] <= 254:
        errors.append("data.n_classes must be between 2 and 254")
    if _is_int(data["workers"]) and data["workers"] < 1:
        errors.append("data.workers must be >= 1")
    if not resolution_errors and _is_int(data["base_side"]):
        try:
            spec = ResolutionSpec(tuple(resolution["factors"]), resolution["patch_size"])
            check_base_side(data["base_side"], spec)
            if data["base_side"] < spec.patch_size:
                errors.append(f"data.base_side {data['base_side']} is smaller than the patch size")
        except GeometryError as exc:
            errors.append(f"data.base_side: {exc}")

    bb = cfg["backbone"]
    if not all(_is_int(bb[k]) for k in bb):
        errors.append("backbone values must be integers")
    elif _is_int(data["n_classes"]):
        errors.extend(validate_backbone(SimpleNamespace(n_classes=data["n_classes"], **bb)))
        patch_size = resolution["patch_size"]
        if _is_int(patch_size) and bb["encoder_blocks"] >= 1 and patch_size % 2 ** bb["encoder_blocks"]:
            errors.append(
                f"resolution.patch_size {patch_size} must be divisible by 2**backbone.encoder_blocks"
            )

    gaps = cfg["gaps"]
    if not isinstance(gaps["tau"], (int, float)) or isinstance(gaps["tau"], bool) or gaps["tau"] < 0:
        errors.append("gaps.tau must be a non-negative number")
    if gaps["mode"] not in GAP_MODES:
        errors.append(f"gaps.mode must be one of {', '.join(GAP_MODES)}")
    if not _is_int(gaps["calibration_triples"]) or gaps["calibration_triples"] < 1:
        errors.append("gaps.calibration_triples must be a positive integer")

    mf = cfg["meta_fusion"]
    if not _is_int(mf["hidden"]) or mf["hidden"] < 1:
        errors.append("meta_fusion.hidden must be a positive integer")
    if not isinstance(mf["generate_biases"], bool):
        errors.append("meta_fusion.generate_biases must be true or false")

    train = cfg["train"]
    if not isinstance(train["learning_rate"], (int, float)) or isinstance(train["learning_rate"], bool):
        errors.append("train.learning_rate must be a number")
    else:
        errors.extend(training.validate_train_config(SimpleNamespace(**train)))
    return errors


def build_run_config(config):
    errors = validate_config(config)
    if errors:
        raise ConfigError(errors)
    cfg = normalize_config(config)
    data = cfg["data"]
    return RunConfig(
        seed=cfg["seed"],
        resolution=ResolutionSpec(tuple(cfg["resolution"]["factors"]), cfg["resolution"]["patch_size"]),
        data=DataConfig(
            n_slides=data["n_slides"],
            base_side=data["base_side"],
            n_classes=data["n_classes"],
            split=tuple(data["split"]),
            probe_slides=data["probe_slides"],
            workers=data["workers"],
        ),
        backbone=BackboneConfig(n_classes=data["n_classes"], **cfg["backbone"]),
        gaps=GapConfig(**cfg["gaps"]),
        meta_fusion=MetaFusionConfig(**cfg["meta_fusion"]),
        train=training.TrainConfig(seed=cfg["seed"], **cfg["train"]),
        raw=cfg,
    )


def load_run_config(paths):
    if not os.path.exists(paths.config_path):
        raise PrerequisiteError(f"{paths.root} has no config.json; run `msn gen-data` first")
    return build_run_config(load_config(paths.config_path))


@contextmanager
def run_lock(paths):
    """Exclusive flock on the run directory for the duration of one subcommand."""
    import fcntl

    os.makedirs(paths.root, exist_ok=True)
    fd = os.open(paths.lock_file, os.O_CREAT | os.O_RDWR, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        os.close(fd)
        raise RunLockedError(f"run directory {paths.root} is in use by another msn process")
    try:
        os.ftruncate(fd, 0)
        os.write(fd, str(os.getpid()).encode("utf-8"))
        yield paths
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def _refuse_existing(path, what, force):
    if os.path.exists(path) and not force:
        raise ArtifactExistsError(f"{what} already exists at {path}; pass --force to overwrite")


def _require(path, what, command):
    if not checkpoints.checkpoint_exists(path):
        raise PrerequisiteError(f"missing {what} ({path}); run `{command}` first")
    return path


def generate_data(config, run_dir, *, force=False):
    """Write virtual slides, the slide-level split and the normalized config."""
    paths = build_run_paths(run_dir, create=False)
    run_config = build_run_config(config)
    with run_lock(paths):
        if storage.list_slides(paths.slides_dir):
            _refuse_existing(paths.splits_path, "generated data", force)
            shutil.rmtree(paths.slides_dir)
        paths = build_run_paths(run_dir)
        atomic_json_dump(run_config.to_dict(), paths.config_path)
        data = run_config.data
        slide_ids = []
        checksums = {}
        for index in range(data.n_slides):
            slide_id = f"slide_{index:03d}"
            img = generate_virtual_slide(
                run_config.seed * 1000 + index,
                data.base_side,
                data.n_classes,
                run_config.resolution,
                slide_id=slide_id,
            )
            directory = storage.save_slide(img, os.path.join(paths.slides_dir, slide_id))
            checksums[slide_id] = storage.slide_checksum(directory)
            slide_ids.append(slide_id)
        assignment = storage.assign_splits(slide_ids, data.split, run_config.seed)
        storage.save_splits(assignment, paths.splits_path)
        log_event(logging.INFO, "data_generated", run=paths.root, slides=len(slide_ids), splits=assignment)
        return checksums


@dataclass
class LoadedData:
    split: object
    images: dict
    triples_by_slide: dict
    geometries: dict


def load_dataset(paths, run_config):
    if not os.path.exists(paths.splits_path):
        raise PrerequisiteError(f"{paths.root} has no generated slides; run `msn gen-data` first")
    assignment = storage.load_splits(paths.splits_path)
    slide_ids = sorted(assignment)
    images = [storage.load_slide(os.path.join(paths.slides_dir, s)) for s in slide_ids]
    triples = extract_triples_many(images, run_config.resolution, workers=run_config.data.workers)
    triples_by_slide = {s: t for s, t in zip(slide_ids, triples)}
    geometries = {
        img.slide_id: slide_geometry(img, run_config.resolution, slide_index=index)
        for index, img in enumerate(images)
    }
    split = storage.build_dataset_split(triples_by_slide, assignment, probe_slides=run_config.data.probe_slides)
    return LoadedData(
        split=split,
        images={img.slide_id: img for img in images},
        triples_by_slide=triples_by_slide,
        geometries=geometries,
    )


def _load_meta(paths):
    path = _require(paths.step_checkpoint(1), "meta-branch checkpoint (step 1)", "msn train --step 1")
    return checkpoints.load_store(path)


def _load_profiles(paths, run_config):
    profiles = {}
    for branch in ("x1", "x2"):
        path = paths.gap_profile(branch)
        if not os.path.exists(path):
            raise PrerequisiteError(f"missing gap profile {path}; run `msn analyze-gaps` first")
        profiles[branch] = mainbody.load_profile(path)
    if run_config.gaps.mode == "shared":
        profiles = mainbody.shared_profiles(profiles)
    return profiles


def _calibration_batch(triples, branch, limit):
    return training.make_batch(triples[:limit]).x[branch]


def analyze_gaps(run_dir, *, force=False):
    paths = build_run_paths(run_dir)
    run_config = load_run_config(paths)
    with run_lock(paths):
        _refuse_existing(paths.gap_profile("x1"), "gap profiles", force)
        meta = _load_meta(paths)
        data = load_dataset(paths, run_config)
        calibration = data.split.subtrain[: run_config.gaps.calibration_triples]
        if not calibration:
            raise PrerequisiteError("the sub-training split is empty; cannot calibrate gap layers")
        limit = len(calibration)
        x3 = _calibration_batch(calibration, "x3", limit)
        profiles = {}
        stats = {}
        for branch in ("x1", "x2"):
            xk = _calibration_batch(calibration, branch, limit)
            profiles[branch] = mainbody.detect_gaps(
                meta, x3, xk, run_config.gaps.tau, run_config.backbone, branch=branch
            )
            mainbody.save_profile(profiles[branch], paths.gap_profile(branch))
        for branch in ("x1", "x2", "x3"):
            layer_stats = backbone.activation_stats(
                meta, _calibration_batch(calibration, branch, limit), run_config.backbone
            )
            stats[branch] = [{"layer": s.layer, "mean": s.mean, "variance": s.variance} for s in layer_stats]
        atomic_json_dump(stats, os.path.join(paths.gaps_dir, LAYER_STATS_FILE))
        plots.plot_gap_stats(stats, profiles, os.path.join(paths.plots_dir, "gaps.png"))
        return profiles


def _save_fusion(path, ml, weights, sigma_bar):
    extra = dict(weights.as_tensors())
    extra["sigma_bar"] = sigma_bar.values
    return checkpoints.save_store(ml, path, extra=extra)


def train_step(run_dir, step, *, use_train_split=False, force=False):
    paths = build_run_paths(run_dir)
    run_config = load_run_config(paths)
    if step not in (1, 2, 3):
        raise ValueError(f"unknown training step {step}")
    with run_lock(paths):
        target = paths.step_checkpoint(step, train_split=use_train_split)
        _refuse_existing(target, f"step {step} checkpoint", force)
        suffix = "_train" if use_train_split and step > 1 else ""
        cfg = run_config
        if step == 1:
            data = load_dataset(paths, cfg)
            store, log = training.step1_train_meta(data.split.train, cfg.backbone, cfg.train, probe=data.split.probe)
            checkpoints.save_store(store, target)
        elif step == 2:
            meta = _load_meta(paths)
            profiles = _load_profiles(paths, cfg)
            data = load_dataset(paths, cfg)
            triples = data.split.train if use_train_split else data.split.subtrain
            memrm, log = training.step2_train_memrm(
                triples, meta, profiles, cfg.backbone, cfg.resolution, cfg.train, probe=data.split.probe
            )
            checkpoints.save_store(checkpoints.combine_stores(memrm), target)
        else:
            meta = _load_meta(paths)
            flag = " --use-train-split" if use_train_split else ""
            step2 = _require(
                paths.step_checkpoint(2, train_split=use_train_split),
                "Mem-RM checkpoint (step 2)",
                f"msn train --step 2{flag}",
            )
            memrm = checkpoints.split_store(checkpoints.load_store(step2), ("x1", "x2"))
            profiles = evaluation.profiles_from_memrm(memrm)
            data = load_dataset(paths, cfg)
            triples = data.split.train if use_train_split else data.split.subtrain
            ml, weights, sigma_bar, log = training.step3_train_fusion(
                triples,
                meta,
                memrm,
                profiles,
                cfg.backbone,
                cfg.resolution,
                cfg.train,
                probe=data.split.probe,
                hidden=cfg.meta_fusion.hidden,
                generate_biases=cfg.meta_fusion.generate_biases,
            )
            _save_fusion(target, ml, weights, sigma_bar)
        log.write_csv(paths.train_log(step, suffix=suffix))
        log_event(logging.INFO, "train_step_complete", step=step, train_split=use_train_split, checkpoint=target)
        return target


def train_baseline(run_dir, baseline, *, force=False):
    paths = build_run_paths(run_dir)
    run_config = load_run_config(paths)
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}")
    cfg = run_config
    ratio = training.fusion_ratio(cfg.resolution)
    ml_spec = training.meta_learner_spec(
        cfg.backbone, hidden=cfg.meta_fusion.hidden, generate_biases=cfg.meta_fusion.generate_biases
    )
    with run_lock(paths):
        target = paths.baseline_checkpoint(baseline)
        _refuse_existing(target, f"{baseline} baseline", force)
        if baseline == "multi-branch":
            data = load_dataset(paths, cfg)
            stores, log = training.train_independent_branches(
                data.split.train, cfg.backbone, cfg.train, probe=data.split.probe
            )
            checkpoints.save_store(checkpoints.combine_stores(stores), target)
            provider = training.IndependentBranches(stores, cfg.backbone)
            ml, weights, sigma_bar, fusion_log = training.train_meta_fusion(
                provider, data.split.subtrain, ml_spec, ratio, cfg.train, probe=data.split.probe
            )
            _save_fusion(paths.baseline_checkpoint("multi-branch-fusion"), ml, weights, sigma_bar)
            log.extend(fusion_log)
        elif baseline == "meta-raw":
            meta = _load_meta(paths)
            data = load_dataset(paths, cfg)
            provider = training.RawMetaBranches(meta, cfg.backbone)
            ml, weights, sigma_bar, log = training.train_meta_fusion(
                provider, data.split.subtrain, ml_spec, ratio, cfg.train, probe=data.split.probe
            )
            _save_fusion(target, ml, weights, sigma_bar)
        elif baseline == "plain-fusion":
            meta = _load_meta(paths)
            step2 = _require(paths.step_checkpoint(2), "Mem-RM checkpoint (step 2)", "msn train --step 2")
            memrm = checkpoints.split_store(checkpoints.load_store(step2), ("x1", "x2"))
            provider = training.MSNBranches(
                meta, memrm, evaluation.profiles_from_memrm(memrm), cfg.backbone, cfg.resolution
            )
            data = load_dataset(paths, cfg)
            store, log = training.train_plain_fusion(
                provider, data.split.subtrain, cfg.backbone.n_classes, ratio, cfg.train, probe=data.split.probe
            )
            checkpoints.save_store(store, target)
        else:
            meta = _load_meta(paths)
            profiles = _load_profiles(paths, cfg)
            candidates = cfg.backbone.head_index
            profiles = {b: mainbody.non_gap_layers(p, candidates) for b, p in profiles.items()}
            data = load_dataset(paths, cfg)
            memrm, log = training.step2_train_memrm(
                data.split.subtrain, meta, profiles, cfg.backbone, cfg.resolution, cfg.train, probe=data.split.probe
            )
            checkpoints.save_store(checkpoints.combine_stores(memrm), target)
        log.write_csv(paths.baseline_log(baseline))
        log_event(logging.INFO, "baseline_complete", baseline=baseline, checkpoint=target)
        return target


def evaluate_run(run_dir, *, ablations=False, force=False):
    paths = build_run_paths(run_dir)
    run_config = load_run_config(paths)
    cfg = run_config
    with run_lock(paths):
        report_path = os.path.join(paths.reports_dir, "report.json")
        _refuse_existing(report_path, "evaluation report", force)
        data = load_dataset(paths, cfg)
        batch_size = cfg.train.batch_size
        test = data.split.test
        msn_report, provider, fusion = evaluation.evaluate_msn(
            paths, cfg.backbone, cfg.resolution, test, batch_size=batch_size
        )
        reports = [msn_report]
        if ablations:
            rows = [r for r in evaluation.ABLATION_ROWS if r != "msn"]
            reports = evaluation.run_ablations(
                paths, cfg.backbone, cfg.resolution, test, batch_size=batch_size, rows=rows
            )
            reports.insert(evaluation.ABLATION_ROWS.index("msn"), msn_report)
        single = backbone.init_backbone(cfg.backbone, 0).num_elements()
        extra = evaluation.param_ratios(
            msn_report, single, evaluation.multi_branch_backbone_count(reports, cfg.backbone)
        )
        ratio = training.fusion_ratio(cfg.resolution)
        for slide_id in data.split.slides_in("test"):
            maps = evaluation.predict_slide(
                provider,
                data.triples_by_slide[slide_id],
                data.geometries[slide_id],
                fusion=fusion,
                ratio=ratio,
                batch_size=batch_size,
            )
            evaluation.save_label_png(maps["fusion"], os.path.join(paths.reports_dir, f"pred_{slide_id}.png"))
            img = data.images[slide_id]
            plots.plot_visual(
                img.levels[0],
                img.label_levels[0],
                maps,
                cfg.backbone.n_classes,
                os.path.join(paths.plots_dir, f"visual_{slide_id}.png"),
            )
        json_path, md_path = evaluation.write_report(reports, paths.reports_dir, extra=extra)
        log_event(logging.INFO, "evaluation_complete", report=json_path, rows=[r.name for r in reports], **extra)
        return reports


def make_plot(run_dir, what, *, fmt="png"):
    paths = build_run_paths(run_dir)
    if what not in PLOTS:
        raise ValueError(f"unknown plot {what!r}")
    if fmt not in PLOT_FORMATS:
        raise ValueError(f"unknown plot format {fmt!r}")

    def out(name):
        return os.path.join(paths.plots_dir, f"{name}.{fmt}")

    with run_lock(paths):
        if what == "gaps":
            stats_path = os.path.join(paths.gaps_dir, LAYER_STATS_FILE)
            if not os.path.exists(stats_path):
                raise PrerequisiteError(f"missing {stats_path}; run `msn analyze-gaps` first")
            profiles = {b: mainbody.load_profile(paths.gap_profile(b)) for b in ("x1", "x2")}
            return plots.plot_gap_stats(load_json(stats_path), profiles, out("gaps"))
        if what == "trend":
            logs = _read_logs({f"step {k}": paths.train_log(k) for k in (1, 2, 3)}, "msn train --step <k>")
            return plots.plot_train_trend(logs, out("trend"))
        if what == "fusion-trend":
            logs = _read_logs(
                {"meta fusion": paths.train_log(3), "w/o meta": paths.baseline_log("plain-fusion")},
                "msn train --step 3 / --baseline plain-fusion",
            )
            return plots.plot_fusion_trend(logs, out("fusion_trend"))
        logs = _read_logs(
            {"Mem-RM": paths.train_log(2), "multi-branch": paths.baseline_log("multi-branch")},
            "msn train --step 2 / --baseline multi-branch",
        )
        return plots.plot_branch_trend(logs, out("branch_trend"))


def _read_logs(sources, command):
    logs = {}
    for label, path in sources.items():
        if not os.path.exists(path):
            raise PrerequisiteError(f"missing training log {path}; run `{command}` first")
        logs[label] = training.TrainLog.read_csv(path)
    return logs
