"""mIoU evaluation, parameter accounting and the ablation harness."""

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from slides.stitching import stitch

from . import backbone, checkpoints, mainbody, meta_fusion
from .json_utils import atomic_json_dump, log_event
from .metrics import IoUResult, confusion_matrix, iou_from_confusion, miou
from .tensor_ops import crop_and_upsample
from .training import (
    IndependentBranches,
    MSNBranches,
    RawMetaBranches,
    fused_logits,
    fusion_ratio,
    iterate_batches,
)

__all__ = [
    "ABLATION_ROWS",
    "EvalReport",
    "IoUResult",
    "MissingArtifactError",
    "count_params",
    "evaluate_provider",
    "miou",
    "run_ablations",
]

BRANCHES = ("x1", "x2", "x3")
COMPONENTS = ("backbone", "memrm", "meta_fm", "fusion")
ABLATION_ROWS = ("meta-branch", "multi-branch", "msn", "msn*", "w/o meta", "non-gap layers")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, artifact, command, path=None):
        super().__init__(f"missing {artifact} at {path}; run `msn train {command}` first")
        self.artifact = artifact
        self.command = command
        self.path = path


@dataclass
class EvalReport:
    name: str
    branch_miou: dict[str, float]
    fusion_miou: float | None
    per_class: dict[str, dict[int, float]] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        values = list(self.branch_miou.values())
        if self.fusion_miou is not None:
            values.append(self.fusion_miou)
        for per_class in self.per_class.values():
            values.extend(per_class.values())
        bad = [v for v in values if not 0.0 <= v <= 1.0]
        if bad:
            raise ValueError(f"{self.name}: IoU values outside [0, 1]: {bad}")
        self.param_counts = {c: int(self.param_counts.get(c, 0)) for c in COMPONENTS}

    @property
    def total_params(self):
        return sum(self.param_counts.values())

    def to_dict(self):
        return {
            "name": self.name,
            "branch_miou": dict(self.branch_miou),
            "fusion_miou": self.fusion_miou,
            "per_class": {k: {str(c): v for c, v in pc.items()} for k, pc in self.per_class.items()},
            "param_counts": dict(self.param_counts),
            "total_params": self.total_params,
        }


def count_params(groups):
    """Element counts per named group; a group is a tensor mapping or a list of them."""
    counts = {}
    for name, group in groups.items():
        members = group if isinstance(group, (list, tuple)) else [group]
        counts[name] = sum(int(t.numel()) for member in members for t in member.values())
    counts["total"] = sum(counts.values())
    return counts


def evaluate_provider(name, provider, triples, n_classes, *, batch_size=8, fusion=None, ratio=None, params=None):
    if not triples:
        raise ValueError(f"{name}: no triples to evaluate")
    confusions = {b: np.zeros((n_classes, n_classes), dtype=np.int64) for b in BRANCHES}
    fused = np.zeros((n_classes, n_classes), dtype=np.int64)
    for batch in iterate_batches(triples, batch_size, shuffle=False):
        predictions = provider.predict(batch)
        for branch, logits in predictions.items():
            confusions[branch] += confusion_matrix(logits.argmax(dim=1), batch.y[branch], n_classes)
        if fusion is not None:
            out1, out2 = provider.fusion_inputs(batch)
            with torch.no_grad():
                logits = fused_logits(out1, out2, fusion, ratio)
            fused += confusion_matrix(logits.argmax(dim=1), batch.y["x1"], n_classes)
    results = {b: iou_from_confusion(c) for b, c in confusions.items()}
    if fusion is not None:
        results["fusion"] = iou_from_confusion(fused)
    report = EvalReport(
        name=name,
        branch_miou={b: results[b].miou for b in BRANCHES},
        fusion_miou=results["fusion"].miou if fusion is not None else None,
        per_class={k: r.per_class for k, r in results.items()},
        param_counts=params or {},
    )
    log_event(
        logging.INFO,
        "evaluation_row",
        name=name,
        branch_miou={b: round(v, 4) for b, v in report.branch_miou.items()},
        fusion_miou=None if report.fusion_miou is None else round(report.fusion_miou, 4),
        total_params=report.total_params,
    )
    return report


def require_checkpoint(path, artifact, command):
    if not checkpoints.checkpoint_exists(path):
        raise MissingArtifactError(artifact, command, path)
    return path


def load_meta(paths):
    path = require_checkpoint(paths.step_checkpoint(1), "meta-branch checkpoint (step 1)", "--step 1")
    return checkpoints.load_store(path)


def load_memrm(path, artifact, command):
    store = checkpoints.load_store(require_checkpoint(path, artifact, command))
    return checkpoints.split_store(store, ("x1", "x2"))


def profiles_from_memrm(memrm):
    """Gap profiles implied by the adapters that were actually trained."""
    return {
        branch: mainbody.GapProfile(branch, (), 0.0, mainbody.memrm_layers(store))
        for branch, store in memrm.items()
    }


def load_fusion(path, artifact, command):
    require_checkpoint(path, artifact, command)
    ml = checkpoints.load_store(path)
    names = [n for n in checkpoints.extra_names(path) if n.startswith(meta_fusion.FUSION_PREFIX)]
    tensors = {name: checkpoints.load_extra(path, name) for name in names}
    return ml, meta_fusion.FusionWeights.from_tensors(tensors)


def load_plain_fusion(path):
    store = checkpoints.load_store(require_checkpoint(path, "plain fusion checkpoint", "--baseline plain-fusion"))
    return store, meta_fusion.FusionWeights.from_tensors(store)


def _msn_provider(paths, config, spec, *, train_split=False):
    meta = load_meta(paths)
    suffix = " --use-train-split" if train_split else ""
    memrm = load_memrm(
        paths.step_checkpoint(2, train_split=train_split), "Mem-RM checkpoint (step 2)", f"--step 2{suffix}"
    )
    return MSNBranches(meta, memrm, profiles_from_memrm(memrm), config, spec)


def _msn_params(provider, ml):
    return {
        "backbone": provider.meta.num_elements(),
        "memrm": sum(s.num_elements() for s in provider.memrm.values()),
        "meta_fm": ml.num_elements(),
    }


def evaluate_msn(paths, config, spec, triples, *, batch_size=8, train_split=False, name="msn"):
    provider = _msn_provider(paths, config, spec, train_split=train_split)
    suffix = " --use-train-split" if train_split else ""
    ml, fusion = load_fusion(
        paths.step_checkpoint(3, train_split=train_split), "meta fusion checkpoint (step 3)", f"--step 3{suffix}"
    )
    report = evaluate_provider(
        name,
        provider,
        triples,
        config.n_classes,
        batch_size=batch_size,
        fusion=fusion,
        ratio=fusion_ratio(spec),
        params=_msn_params(provider, ml),
    )
    return report, provider, fusion


def run_ablations(paths, config, spec, triples, *, batch_size=8, rows=ABLATION_ROWS):
    """Evaluate every ablation row; missing artifacts name the command that builds them."""
    reports = []
    ratio = fusion_ratio(spec)
    n_classes = config.n_classes
    for row in rows:
        if row == "meta-branch":
            meta = load_meta(paths)
            ml, fusion = load_fusion(
                paths.baseline_checkpoint("meta-raw"), "meta-branch fusion checkpoint", "--baseline meta-raw"
            )
            report = evaluate_provider(
                row,
                RawMetaBranches(meta, config),
                triples,
                n_classes,
                batch_size=batch_size,
                fusion=fusion,
                ratio=ratio,
                params={"backbone": meta.num_elements(), "meta_fm": ml.num_elements()},
            )
        elif row == "multi-branch":
            path = require_checkpoint(
                paths.baseline_checkpoint("multi-branch"), "independent branch checkpoints", "--baseline multi-branch"
            )
            stores = checkpoints.split_store(checkpoints.load_store(path), BRANCHES)
            ml, fusion = load_fusion(
                paths.baseline_checkpoint("multi-branch-fusion"),
                "multi-branch fusion checkpoint",
                "--baseline multi-branch",
            )
            report = evaluate_provider(
                row,
                IndependentBranches(stores, config),
                triples,
                n_classes,
                batch_size=batch_size,
                fusion=fusion,
                ratio=ratio,
                params={
                    "backbone": sum(s.num_elements() for s in stores.values()),
                    "meta_fm": ml.num_elements(),
                },
            )
        elif row in ("msn", "msn*"):
            report, _, _ = evaluate_msn(
                paths, config, spec, triples, batch_size=batch_size, train_split=row == "msn*", name=row
            )
        elif row == "w/o meta":
            provider = _msn_provider(paths, config, spec)
            store, fusion = load_plain_fusion(paths.baseline_checkpoint("plain-fusion"))
            params = {
                "backbone": provider.meta.num_elements(),
                "memrm": sum(s.num_elements() for s in provider.memrm.values()),
                "fusion": store.num_elements(),
            }
            report = evaluate_provider(
                row, provider, triples, n_classes, batch_size=batch_size, fusion=fusion, ratio=ratio, params=params
            )
        elif row == "non-gap layers":
            meta = load_meta(paths)
            memrm = load_memrm(paths.baseline_checkpoint("non-gap"), "non-gap Mem-RM checkpoint", "--baseline non-gap")
            provider = MSNBranches(meta, memrm, profiles_from_memrm(memrm), config, spec)
            report = evaluate_provider(
                row,
                provider,
                triples,
                n_classes,
                batch_size=batch_size,
                params={"backbone": meta.num_elements(), "memrm": sum(s.num_elements() for s in memrm.values())},
            )
        else:
            raise ValueError(f"unknown ablation row {row!r}")
        reports.append(report)
    return reports


def param_ratios(msn_report, single_backbone, multi_branch_backbones):
    """Parameter totals relative to one backbone.

    ``multi_branch_backbones`` is the element count of the independent-branch
    backbones (the multi-branch row's ``param_counts["backbone"]`` when it was
    evaluated).
    """
    msn_total = sum(msn_report.param_counts[c] for c in ("backbone", "memrm", "meta_fm"))
    return {
        "single_backbone": int(single_backbone),
        "msn_ratio": msn_total / single_backbone,
        "multi_branch_ratio": multi_branch_backbones / single_backbone,
    }


def multi_branch_backbone_count(reports, config):
    """Backbone elements of the multi-branch row, or of three fresh backbones without one."""
    for report in reports:
        if report.name == "multi-branch" and "backbone" in report.param_counts:
            return int(report.param_counts["backbone"])
    stores = [backbone.init_backbone(config, seed) for seed in range(len(BRANCHES))]
    return count_params({"backbone": stores})["backbone"]


def predict_slide(provider, triples, geometry, *, fusion=None, ratio=None, batch_size=8):
    """Stitch X1, S2' and (optionally) fused predictions onto the top pyramid level."""
    collected = {"x1": [], "x2": []}
    if fusion is not None:
        collected["fusion"] = []
    for batch in iterate_batches(triples, batch_size, shuffle=False):
        out1, out2 = provider.fusion_inputs(batch)
        with torch.no_grad():
            maps = {"x1": out1.logits, "x2": crop_and_upsample(out2.logits, ratio)}
            if fusion is not None:
                maps["fusion"] = fused_logits(out1, out2, fusion, ratio)
        for key, logits in maps.items():
            probs = torch.softmax(logits, dim=1).numpy()
            collected[key].extend(zip(batch.patch_ids, probs))
    return {key: stitch(preds, geometry) for key, preds in collected.items()}


def save_label_png(labels, path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)
    return path


def write_report(reports, reports_dir, *, extra=None):
    payload = {"rows": [r.to_dict() for r in reports], **(extra or {})}
    json_path = os.path.join(reports_dir, "report.json")
    md_path = os.path.join(reports_dir, "report.md")
    atomic_json_dump(payload, json_path)
    lines = [
        "| Method | X1 mIoU (%) | X2 mIoU (%) | X3 mIoU (%) | Fusion mIoU (%) | # Param (M) |",
        "|---|---|---|---|---|---|",
    ]
    for r in reports:
        fusion = "-" if r.fusion_miou is None else f"{100 * r.fusion_miou:.1f}"
        lines.append(
            f"| {r.name} | {100 * r.branch_miou['x1']:.1f} | {100 * r.branch_miou['x2']:.1f} | "
            f"{100 * r.branch_miou['x3']:.1f} | {fusion} | {r.total_params / 1e6:.3f} |"
        )
    lines += ["", "| Method | backbone | Mem-RM | Meta-FM | fusion | total |", "|---|---|---|---|---|---|"]
    for r in reports:
        counts = r.param_counts
        lines.append(
            f"| {r.name} | {counts['backbone']} | {counts['memrm']} | {counts['meta_fm']} | "
            f"{counts['fusion']} | {r.total_params} |"
        )
    if extra:
        lines += [""] + [f"- {key}: {value:.4g}" if isinstance(value, float) else f"- {key}: {value}" for key, value in extra.items()]
    tmp_path = f"{md_path}.tmp"
    with open(tmp_path, "w") as handle:
        handle.write("\n".join(lines) + "\n")
    os.replace(tmp_path, md_path)
    return json_path, md_path
