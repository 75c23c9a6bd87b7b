"""Optimizer, batching and the three training steps.

Step 1 trains the meta-branch on X3. Step 2 freezes it and trains one set of
Mem-RM adapters per non-meta branch. Step 3 freezes everything and trains the
meta-learner that generates the fusion weights. The baselines used by the
ablations (independent branches, plain fusion) share the same loop.
"""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import backbone, mainbody, meta_fusion
from .json_utils import log_event
from .losses import LabelRangeError, cross_entropy
from .metrics import confusion_matrix, iou_from_confusion
from .tensor_ops import crop_and_upsample

__all__ = [
    "AdamState",
    "Batch",
    "FreezeAudit",
    "FreezeViolationError",
    "IndependentBranches",
    "LabelRangeError",
    "MSNBranches",
    "NonFiniteGradientError",
    "RawMetaBranches",
    "TrainConfig",
    "TrainLog",
    "adam_step",
    "cross_entropy",
    "step1_train_meta",
    "step2_train_memrm",
    "step3_train_fusion",
    "train_independent_branches",
    "train_meta_fusion",
    "train_plain_fusion",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOSS_SANITY_TOLERANCE = 0.05
LOG_FIELDS = ("epoch", "head", "loss", "miou", "seconds")


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for {name}")
        self.name = name


class FreezeViolationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_step1: int = 30
    epochs_step2: int = 10
    epochs_step3: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    plain_fusion_epochs: int = 10

    def __post_init__(self):
        errors = validate_train_config(self)
        if errors:
            raise ValueError("; ".join(errors))


def validate_train_config(config):
    errors = []
    for name in ("epochs_step1", "epochs_step2", "epochs_step3", "batch_size", "plain_fusion_epochs"):
        value = getattr(config, name)
        if not isinstance(value, int) or value < 1:
            errors.append(f"train.{name} must be a positive integer")
    if not config.learning_rate > 0:
        errors.append("train.learning_rate must be > 0")
    return errors


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    head: str
    loss: float
    miou: float
    seconds: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def add(self, epoch, head, loss, miou, seconds):
        if not math.isfinite(loss):
            raise ArithmeticError(f"non-finite loss {loss} for {head} at epoch {epoch}")
        previous = [r.epoch for r in self.records if r.head == head]
        if previous and epoch <= previous[-1]:
            raise ValueError(f"epoch {epoch} for {head} does not follow epoch {previous[-1]}")
        record = LogRecord(int(epoch), head, float(loss), float(miou), float(seconds))
        self.records.append(record)
        return record

    def heads(self):
        return list(dict.fromkeys(r.head for r in self.records))

    def losses(self, head):
        return [r.loss for r in self.records if r.head == head]

    def mious(self, head):
        return [r.miou for r in self.records if r.head == head]

    def extend(self, other):
        self.records.extend(other.records)
        return self

    def write_csv(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(LOG_FIELDS)
            for r in self.records:
                writer.writerow([r.epoch, r.head, repr(r.loss), repr(r.miou), f"{r.seconds:.3f}"])
        os.replace(tmp_path, path)
        return path

    @classmethod
    def read_csv(cls, path):
        log = cls()
        with open(path, newline="") as handle:
            for row in csv.DictReader(handle):
                log.records.append(
                    LogRecord(
                        epoch=int(row["epoch"]),
                        head=row["head"],
                        loss=float(row["loss"]),
                        miou=float(row["miou"]),
                        seconds=float(row["seconds"]),
                    )
                )
        return log


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update of the trainable tensors of ``params`` in place."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        if not params.is_trainable(name):
            continue
        if name not in state.m:
            state.m[name] = torch.zeros_like(params[name])
            state.v[name] = torch.zeros_like(params[name])
        m = state.m[name].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v = state.v[name].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        update = (m / bc1) / ((v / bc2).sqrt() + state.eps)
        params.assign(name, params[name] - lr * update)
    return params, state


class FreezeAudit:
    """Checksums of stores that must not change while another store trains."""

    def __init__(self, stores):
        self._stores = dict(stores)
        self._checksums = {name: store.checksum() for name, store in self._stores.items()}

    def verify(self, context=""):
        changed = [name for name, store in self._stores.items() if store.checksum() != self._checksums[name]]
        if changed:
            raise FreezeViolationError(f"frozen stores changed {context}: {changed}")

    @property
    def checksums(self):
        return dict(self._checksums)


@dataclass(frozen=True)
class Batch:
    patch_ids: tuple[int, ...]
    x: dict
    y: dict

    def __len__(self):
        return len(self.patch_ids)


def make_batch(triples, *, dtype=torch.float32):
    """Stack triples into NCHW image tensors and (N, P, P) label tensors per branch."""
    if not triples:
        raise ValueError("cannot build an empty batch")
    x = {}
    y = {}
    for branch in ("x1", "x2", "x3"):
        images = np.stack([t.image(branch) for t in triples])
        x[branch] = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous().to(dtype)
        labels = np.stack([t.label(branch) for t in triples]).astype(np.int64)
        y[branch] = torch.from_numpy(labels)
    return Batch(patch_ids=tuple(t.patch_id for t in triples), x=x, y=y)


def iterate_batches(triples, batch_size, *, seed=0, epoch=0, shuffle=True, dtype=torch.float32):
    order = np.arange(len(triples))
    if shuffle:
        order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(triples))
    for start in range(0, len(order), batch_size):
        yield make_batch([triples[i] for i in order[start : start + batch_size]], dtype=dtype)


def _branch_output(logits, tapped, weights, config):
    return meta_fusion.BranchOutput(
        logits=logits,
        features=tapped[config.head_index - 1],
        head_weight=weights[config.head_weight],
        head_bias=weights[config.head_bias],
    )


class MSNBranches:
    """Frozen meta-branch with per-branch Mem-RM adapters."""

    name = "msn"

    def __init__(self, meta, memrm, profiles, config, spec):
        self.meta = meta
        self.memrm = dict(memrm)
        self.profiles = dict(profiles)
        self.config = config
        self.spec = spec

    def ratio(self, branch):
        return self.spec.footprint_ratio(self.spec.factors[("x1", "x2").index(branch)], self.spec.bottom)

    def _gap_union(self):
        return sorted(set().union(*(p.gap_layers for p in self.profiles.values())))

    def branch_forward(self, batch, branch, memory=None, *, memrm=None, relu_masks=None):
        if memory is None:
            _, memory = mainbody.meta_forward(
                self.meta, batch.x["x3"], self._gap_union(), batch.patch_ids, self.config
            )
        return mainbody.nonmeta_forward(
            self.meta,
            memrm if memrm is not None else self.memrm[branch],
            memory,
            batch.x[branch],
            self.profiles[branch],
            self.ratio(branch),
            batch.patch_ids,
            self.config,
            taps={self.config.head_index - 1},
            relu_masks=relu_masks,
        )

    @torch.no_grad()
    def predict(self, batch):
        logits3, memory = mainbody.meta_forward(
            self.meta, batch.x["x3"], self._gap_union(), batch.patch_ids, self.config
        )
        out = {"x3": logits3}
        for branch in ("x1", "x2"):
            out[branch] = self.branch_forward(batch, branch, memory)[0]
        return out

    @torch.no_grad()
    def fusion_inputs(self, batch):
        _, memory = mainbody.meta_forward(self.meta, batch.x["x3"], self._gap_union(), batch.patch_ids, self.config)
        outputs = []
        for branch in ("x1", "x2"):
            logits, tapped = self.branch_forward(batch, branch, memory)
            outputs.append(_branch_output(logits, tapped, self.meta, self.config))
        return tuple(outputs)

    def stores(self):
        return {"meta": self.meta, **{f"memrm_{b}": s for b, s in self.memrm.items()}}


class RawMetaBranches:
    """The frozen meta-branch applied unchanged to every resolution."""

    name = "meta-branch"

    def __init__(self, meta, config):
        self.meta = meta
        self.config = config

    @torch.no_grad()
    def predict(self, batch):
        return {b: backbone.forward(self.meta, batch.x[b], self.config)[0] for b in ("x1", "x2", "x3")}

    @torch.no_grad()
    def fusion_inputs(self, batch):
        outputs = []
        for branch in ("x1", "x2"):
            logits, tapped = backbone.forward(self.meta, batch.x[branch], self.config, taps={self.config.head_index - 1})
            outputs.append(_branch_output(logits, tapped, self.meta, self.config))
        return tuple(outputs)

    def stores(self):
        return {"meta": self.meta}


class IndependentBranches:
    """One separately trained backbone per resolution."""

    name = "multi-branch"

    def __init__(self, stores, config):
        self.branch_stores = dict(stores)
        self.config = config

    @torch.no_grad()
    def predict(self, batch):
        return {
            b: backbone.forward(self.branch_stores[b], batch.x[b], self.config)[0] for b in ("x1", "x2", "x3")
        }

    @torch.no_grad()
    def fusion_inputs(self, batch):
        outputs = []
        for branch in ("x1", "x2"):
            store = self.branch_stores[branch]
            logits, tapped = backbone.forward(store, batch.x[branch], self.config, taps={self.config.head_index - 1})
            outputs.append(_branch_output(logits, tapped, store, self.config))
        return tuple(outputs)

    def stores(self):
        return {f"branch_{b}": s for b, s in self.branch_stores.items()}


def fused_logits(out1, out2, weights, ratio):
    return meta_fusion.fuse(out1.logits, crop_and_upsample(out2.logits, ratio), weights)


def _probe_miou(triples, batch_size, predict, n_classes, branch):
    if not triples:
        return float("nan")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for batch in iterate_batches(triples, batch_size, shuffle=False):
        with torch.no_grad():
            logits = predict(batch)
        pred = logits.argmax(dim=1)
        confusion += confusion_matrix(pred, batch.y[branch], n_classes)
    return iou_from_confusion(confusion).miou


def _check_initial_loss(loss, n_classes, head):
    expected = math.log(n_classes)
    if abs(loss - expected) > LOSS_SANITY_TOLERANCE * expected:
        logging.warning(
            "Initial %s loss %.4f is not within %.0f%% of ln(%d)=%.4f",
            head,
            loss,
            LOSS_SANITY_TOLERANCE * 100,
            n_classes,
            expected,
        )


def _fit(
    store,
    loss_fn,
    triples,
    epochs,
    train_config,
    *,
    head,
    step,
    log,
    shuffle_seed=None,
    probe_fn=None,
    audit=None,
    on_epoch_end=None,
):
    """Adam over shuffled batches; returns the best store on the probe (else the last)."""
    if not triples:
        raise ValueError(f"no training triples for {head}")
    state = AdamState()
    seed = train_config.seed if shuffle_seed is None else shuffle_seed
    best_store = None
    best_miou = -math.inf
    batch_index = 0
    for epoch in range(1, epochs + 1):
        started = time.monotonic()
        total = 0.0
        count = 0
        for batch in iterate_batches(triples, train_config.batch_size, seed=seed, epoch=epoch, dtype=store.dtype):
            loss, grads = backbone.value_and_grad(store, loss_fn, batch, batch_id=(head, epoch, batch_index))
            adam_step(store, grads, state, train_config.learning_rate)
            total += float(loss) * len(batch)
            count += len(batch)
            batch_index += 1
        if audit is not None:
            audit.verify(f"during {head} epoch {epoch}")
        if on_epoch_end is not None:
            on_epoch_end(epoch)
        miou = probe_fn(store) if probe_fn is not None else float("nan")
        seconds = time.monotonic() - started
        mean_loss = total / max(count, 1)
        log.add(epoch, head, mean_loss, miou, seconds)
        log_event(
            logging.INFO,
            "epoch_complete",
            step=step,
            head=head,
            epoch=epoch,
            loss=round(mean_loss, 6),
            miou=None if math.isnan(miou) else round(miou, 4),
            seconds=round(seconds, 3),
        )
        if probe_fn is None or math.isnan(miou):
            best_store = store
        elif miou > best_miou:
            best_miou = miou
            best_store = store.copy()
    return best_store


def step1_train_meta(triples, config, train_config, *, probe=(), shuffle_seed=None, branch="x3", head="S3"):
    """Train a full backbone on one resolution; the returned store is frozen."""
    seed = train_config.seed if shuffle_seed is None else shuffle_seed
    store = backbone.init_backbone(config, train_config.seed)
    log = TrainLog()

    def loss_fn(weights, batch):
        logits, _ = backbone.forward(weights, batch.x[branch], config)
        return cross_entropy(logits, batch.y[branch])

    first = next(iterate_batches(triples, train_config.batch_size, seed=seed, epoch=1))
    with torch.no_grad():
        _check_initial_loss(float(loss_fn(store, first)), config.n_classes, head)

    def probe_fn(current):
        return _probe_miou(
            probe,
            train_config.batch_size,
            lambda b: backbone.forward(current, b.x[branch], config)[0],
            config.n_classes,
            branch,
        )

    best = _fit(
        store,
        loss_fn,
        triples,
        train_config.epochs_step1,
        train_config,
        head=head,
        step=1,
        log=log,
        shuffle_seed=seed,
        probe_fn=probe_fn if probe else None,
    )
    return best.freeze(), log


def step2_train_memrm(triples, meta, profiles, config, spec, train_config, *, probe=()):
    """Train one Mem-RM set per non-meta branch against the frozen meta-branch."""
    if meta.trainable_names():
        raise mainbody.UnfrozenMetaBranchError("step 2 needs the frozen step-1 meta-branch")
    audit = FreezeAudit({"meta": meta})
    log = TrainLog()
    trained = {}
    for offset, branch in enumerate(("x1", "x2")):
        profile = profiles[branch]
        memrm = mainbody.init_memrm_params(config, profile.gap_layers, train_config.seed + offset, dtype=meta.dtype)
        branches = MSNBranches(meta, {branch: memrm}, {branch: profile}, config, spec)

        def loss_fn(weights, batch, _branches=branches, _branch=branch):
            logits, _ = _branches.branch_forward(batch, _branch, memrm=weights)
            return cross_entropy(logits, batch.y[_branch])

        def probe_fn(current, _branches=branches, _branch=branch):
            return _probe_miou(
                probe,
                train_config.batch_size,
                lambda b: _branches.branch_forward(b, _branch, memrm=current)[0],
                config.n_classes,
                _branch,
            )

        head = f"S{branch[1]}"
        best = _fit(
            memrm,
            loss_fn,
            triples,
            train_config.epochs_step2,
            train_config,
            head=head,
            step=2,
            log=log,
            shuffle_seed=train_config.seed + offset,
            probe_fn=probe_fn if probe else None,
            audit=audit,
        )
        trained[branch] = best.freeze()
        log_event(
            logging.INFO,
            "memrm_trained",
            branch=branch,
            gap_layers=profile.gap_layers,
            params=best.num_elements(),
        )
    audit.verify("after step 2")
    return trained, log


def _fusion_probe(provider, probe, weights_fn, ratio, n_classes, batch_size):
    def predict(batch):
        out1, out2 = provider.fusion_inputs(batch)
        return fused_logits(out1, out2, weights_fn(), ratio)

    return _probe_miou(probe, batch_size, predict, n_classes, "x1")


def collect_sigmas(provider, triples, ratio, batch_size):
    sigmas = []
    for batch in iterate_batches(triples, batch_size, shuffle=False):
        out1, out2 = provider.fusion_inputs(batch)
        sigmas.append(meta_fusion.build_sigma(out1, out2, batch.y["x1"], ratio, provenance=batch.patch_ids))
    return sigmas


def train_meta_fusion(provider, triples, spec, ratio, train_config, *, probe=(), head="S"):
    """Train the meta-learner on top of frozen branches; returns ml, test-time weights, sigma_bar, log."""
    ml = meta_fusion.init_meta_learner(spec, train_config.seed)
    audit = FreezeAudit(provider.stores())
    log = TrainLog()
    epoch_sigmas = []

    def loss_fn(weights, batch):
        out1, out2 = provider.fusion_inputs(batch)
        sigma = meta_fusion.build_sigma(out1, out2, batch.y["x1"], ratio, provenance=batch.patch_ids)
        epoch_sigmas.append(sigma)
        fusion = meta_fusion.generate_weights(weights, sigma, spec)
        return cross_entropy(fused_logits(out1, out2, fusion, ratio), batch.y["x1"])

    current = {}

    def on_epoch_end(epoch):
        current["sigmas"] = list(epoch_sigmas)
        epoch_sigmas.clear()

    def probe_fn(store):
        weights, _ = meta_fusion.finalize_inference_weights(store, current["sigmas"], spec)
        return _fusion_probe(provider, probe, lambda: weights, ratio, spec.n_classes, train_config.batch_size)

    best = _fit(
        ml,
        loss_fn,
        triples,
        train_config.epochs_step3,
        train_config,
        head=head,
        step=3,
        log=log,
        probe_fn=probe_fn if probe else None,
        audit=audit,
        on_epoch_end=on_epoch_end,
    )
    best.freeze()
    weights, sigma_bar = meta_fusion.finalize_inference_weights(
        best, collect_sigmas(provider, triples, ratio, train_config.batch_size), spec
    )
    audit.verify("after fusion training")
    return best, weights, sigma_bar, log


def step3_train_fusion(
    triples, meta, memrm, profiles, config, spec, train_config, *, probe=(), hidden=None, generate_biases=False
):
    provider = MSNBranches(meta, memrm, profiles, config, spec)
    ml_spec = meta_learner_spec(config, hidden=hidden, generate_biases=generate_biases)
    return train_meta_fusion(provider, triples, ml_spec, fusion_ratio(spec), train_config, probe=probe)


def fusion_ratio(spec):
    """m1 / m2: how far S2 must be cropped to cover X1's footprint."""
    return spec.footprint_ratio(spec.factors[0], spec.factors[1])


def train_plain_fusion(provider, triples, n_classes, ratio, train_config, *, probe=(), epochs=None, head="S"):
    """The two fusion convolutions trained directly, without the meta-learner."""
    store = meta_fusion.init_plain_fusion(n_classes, train_config.seed + 1)
    audit = FreezeAudit(provider.stores())
    log = TrainLog()

    def loss_fn(weights, batch):
        out1, out2 = provider.fusion_inputs(batch)
        return cross_entropy(
            fused_logits(out1, out2, meta_fusion.FusionWeights.from_tensors(weights), ratio), batch.y["x1"]
        )

    def probe_fn(current):
        return _fusion_probe(
            provider,
            probe,
            lambda: meta_fusion.FusionWeights.from_tensors(current),
            ratio,
            n_classes,
            train_config.batch_size,
        )

    best = _fit(
        store,
        loss_fn,
        triples,
        epochs or train_config.plain_fusion_epochs,
        train_config,
        head=head,
        step=3,
        log=log,
        probe_fn=probe_fn if probe else None,
        audit=audit,
    )
    audit.verify("after plain fusion training")
    return best.freeze(), log


def train_independent_branches(triples, config, train_config, *, probe=()):
    """Three full backbones from the same init, shuffled independently, one per resolution."""
    stores = {}
    log = TrainLog()
    for offset, branch in enumerate(("x1", "x2", "x3"), start=1):
        store, branch_log = step1_train_meta(
            triples,
            config,
            train_config,
            probe=probe,
            shuffle_seed=train_config.seed + offset,
            branch=branch,
            head=f"S{branch[1]}",
        )
        stores[branch] = store
        log.extend(branch_log)
        log_event(logging.INFO, "independent_branch_trained", branch=branch, shuffle_offset=offset)
    return stores, log


def meta_learner_spec(config, *, hidden=None, generate_biases=False):
    return meta_fusion.MetaLearnerSpec(
        c_last=config.c_last,
        n_classes=config.n_classes,
        hidden=hidden or meta_fusion.DEFAULT_HIDDEN,
        generate_biases=generate_biases,
    )
