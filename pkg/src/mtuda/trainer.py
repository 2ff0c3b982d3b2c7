"""UDA training loop, loss assembly, metrics and label-free model selection.

One adaptation step builds four views per image pair -- augmented source,
source rendered in target style, augmented target, target rendered in source
style -- runs the teacher on weak views for pseudo-labels and attention, runs
the student on all strong/stylized views, and combines

    w1*seg + w2*consistency + w3*prototype + w4*aalp + w5*contrast

During warm-up only the source segmentation term is active and no target
image is touched.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import aalp as aalp_mod
from .contrastive import ContrastiveBatch, NegativeQueue, glcl_loss
from .data import STRONG, WEAK, AugmentationPolicy, LabeledImage, augment, split_cases
from .mean_teacher import EmaSchedule, consistency_loss, dice_loss, ema_update, make_pseudo_labels
from .prototypes import PrototypeBank, batch_prototypes, downsample_labels, momentum_update, prototype_loss
from .segnet import NetworkConfig, SegNet, load_arrays
from .style import stylize

log = logging.getLogger(__name__)

LOSS_NAMES = ("seg", "consistency", "pro", "aalp", "contrast")
MODULES = ("mt", "pa", "aalp", "glcl")


class LossDivergence(FloatingPointError):
    def __init__(self, component, last_good=None):
        super().__init__(f"non-finite loss component: {component}")
        self.component = component
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    loss_weights: tuple = (1.0, 1.0, 0.1, 1.0, 0.5)
    beta: float = 0.04
    keep_fraction: float = 0.8
    temperature: float = 0.07
    lambda_mix: float = 0.5
    gamma: float = 0.05
    delta: float = 0.025
    prototype_momentum: float = 0.01
    ema: EmaSchedule = EmaSchedule(0.99, 0.999, 1000)
    epochs: int = 120
    warmup_epochs: int = 50
    batch_size: int = 8
    lr_encoder: float = 6e-5
    lr_decoder: float = 6e-4
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"
    seeds: tuple = (0, 1, 2, 3, 4)
    style_method: str = "fft"
    histogram_bins: int = 256
    patch_strategy: str = "attention"
    modules: tuple = MODULES
    queue_capacity: int = 512
    positive_selection: str = "search"
    cosine_denominator: str = "product"
    target_prototype_source: str = "teacher"
    patch_fraction: float = 0.25
    global_downsample: int = 2
    grad_clip: float = 1.0
    val_fraction: float = 0.2
    selection_metric: str = "iou"
    eval_batch_size: int = 32
    weak_aug: AugmentationPolicy = WEAK
    strong_aug: AugmentationPolicy = STRONG
    network: NetworkConfig = NetworkConfig()

    def __post_init__(self):
        if len(self.loss_weights) != 5 or any(w < 0 for w in self.loss_weights):
            raise ValueError("loss_weights must be five non-negative numbers")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.style_method not in ("fft", "histogram"):
            raise ValueError(f"unknown style_method {self.style_method!r}")
        if self.patch_strategy not in ("attention", "random"):
            raise ValueError(f"unknown patch_strategy {self.patch_strategy!r}")
        bad = set(self.modules) - set(MODULES)
        if bad:
            raise ValueError(f"unknown modules {sorted(bad)}")
        if self.target_prototype_source not in ("teacher", "student"):
            raise ValueError("target_prototype_source must be teacher or student")
        if self.selection_metric not in ("iou", "dice"):
            raise ValueError("selection_metric must be iou or dice")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must be in (0, 1]")
        if not 0 <= self.lambda_mix <= 1:
            raise ValueError("lambda_mix must be in [0, 1]")

    @property
    def adapts(self):
        return self.warmup_epochs < self.epochs

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("ema"), dict):
            d["ema"] = EmaSchedule(**d["ema"])
        if isinstance(d.get("network"), dict):
            d["network"] = NetworkConfig.from_dict(d["network"])
        for key in ("weak_aug", "strong_aug"):
            if isinstance(d.get(key), dict):
                a = dict(d[key])
                if "blur_sigma_range" in a:
                    a["blur_sigma_range"] = tuple(a["blur_sigma_range"])
                d[key] = AugmentationPolicy(**a)
        for key in ("loss_weights", "seeds", "modules"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# --------------------------------------------------------------------------
# metrics


def _counts(pred, truth, cls):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p, t = pred == cls, truth == cls
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn


def iou_from_counts(tp, fp, fn):
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def dice_from_counts(tp, fp, fn):
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def iou(pred, truth, cls):
    return iou_from_counts(*_counts(pred, truth, cls))


def dice_score(pred, truth, cls):
    return dice_from_counts(*_counts(pred, truth, cls))


def selection_score(metric_source: float, metric_pseudo: float) -> float:
    return metric_source + 0.5 * metric_pseudo


@dataclass
class EvalReport:
    per_class_iou: list
    per_class_dice: list
    mean_dice: float
    foreground_iou: float
    selection_score: float | None = None
    epoch: int | None = None
    seed: int | None = None
    source_val_metric: float | None = None
    metric_pseudo: float | None = None
    losses: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


def report_from_predictions(pred, truth, num_classes, **extra):
    counts = [_counts(pred, truth, c) for c in range(num_classes)]
    ious = [iou_from_counts(*c) for c in counts]
    dices = [dice_from_counts(*c) for c in counts]
    fg = dices[1:] if num_classes > 1 else dices
    return EvalReport(ious, dices, float(np.mean(fg)), ious[-1] if num_classes > 1 else ious[0], **extra)


def total_loss(components: dict, weights, warmup: bool = False):
    """Weighted sum of the five loss components; warm-up keeps only ``seg``."""
    total = 0.0
    for name, w in zip(LOSS_NAMES, weights):
        value = components.get(name, 0.0)
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not bool(torch.isfinite(v).all()):
            raise LossDivergence(name)
        if warmup and name != "seg":
            continue
        total = total + w * value
    return total


# --------------------------------------------------------------------------
# prediction helpers


def _stack_pixels(cases):
    return np.stack([np.asarray(c.pixels, dtype=np.float32) for c in cases])


@torch.no_grad()
def predict_probs(model, images, batch_size=32):
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size]).to(dtype)
        out.append(torch.softmax(model(x).logits, dim=1))
    return torch.cat(out)


def predict(model, images, batch_size=32):
    return predict_probs(model, images, batch_size).argmax(dim=1).numpy()


def evaluate(model, cases, num_classes=None, batch_size=32, **extra) -> EvalReport:
    """Pixel-aggregated metrics of ``model`` on labeled ``cases``."""
    num_classes = num_classes or model.config.num_classes
    images = _stack_pixels(cases)
    truth = np.stack([c.mask for c in cases])
    return report_from_predictions(predict(model, images, batch_size), truth, num_classes, **extra)


def pseudo_agreement(student, teacher, target_images, keep_fraction, metric="iou", batch_size=32):
    """Foreground agreement of student predictions with teacher pseudo-labels on valid pixels."""
    probs = predict_probs(teacher, target_images, batch_size)
    pl = make_pseudo_labels(probs, keep_fraction)
    pred = predict(student, target_images, batch_size)
    valid = pl.valid.numpy()
    labels = pl.labels.numpy()
    counts = _counts(pred[valid], labels[valid], probs.shape[1] - 1)
    return iou_from_counts(*counts) if metric == "iou" else dice_from_counts(*counts)


def _metric(report, metric):
    return report.foreground_iou if metric == "iou" else report.per_class_dice[-1]


# --------------------------------------------------------------------------
# one step


@dataclass
class StepBatch:
    src_strong: torch.Tensor
    src_weak: torch.Tensor
    src_labels: torch.Tensor
    tgt_strong: torch.Tensor = None
    tgt_weak: torch.Tensor = None
    src_to_tgt: torch.Tensor = None
    tgt_to_src: torch.Tensor = None
    random_patches: tuple = None  # (source selections, target selections)


@dataclass
class AdaptState:
    src_bank: PrototypeBank
    tgt_bank: PrototypeBank
    queue: NegativeQueue


@dataclass
class StepOutput:
    total: torch.Tensor
    components: dict
    src_bank: PrototypeBank = None
    tgt_bank: PrototypeBank = None
    teacher_vectors: torch.Tensor = None
    pseudo: object = None
    selections: tuple = None


def patch_geometry(cfg: TrainConfig, H, W):
    ph = max(1, int(round(H * cfg.patch_fraction)))
    pw = max(1, int(round(W * cfg.patch_fraction)))
    stride0 = cfg.network.stages[0].stride
    grid = (H // cfg.global_downsample // stride0, W // cfg.global_downsample // stride0)
    return (ph, pw), grid


def _saliency_selections(attention_maps, image_size, patch_size, grid):
    vec = aalp_mod.saliency_vectors(attention_maps).detach().double().cpu().numpy()
    side = math.isqrt(vec.shape[1])
    out = []
    for v in vec:
        values = v.reshape(side, side)
        sal = aalp_mod.SaliencyMap(values, float(values.mean()))
        out.append(aalp_mod.select_patch(sal, image_size, patch_size, grid))
    return out


def compute_step_losses(student: SegNet, teacher: SegNet, batch: StepBatch, state: AdaptState,
                        cfg: TrainConfig, warmup: bool) -> StepOutput:
    """Loss components for one step. Pure: banks/queue are returned, not mutated."""
    C = student.config.num_classes
    B = batch.src_strong.shape[0]
    zero = batch.src_strong.new_zeros(())
    comps = {name: zero for name in LOSS_NAMES}

    if warmup:
        out = student(batch.src_strong)
        comps["seg"] = dice_loss(torch.softmax(out.logits, 1), batch.src_labels)
        return StepOutput(total_loss(comps, cfg.loss_weights, warmup=True), comps)

    mods = set(cfg.modules)
    H, W = batch.src_strong.shape[-2:]
    patch_size, grid = patch_geometry(cfg, H, W)

    with torch.no_grad():
        teacher.eval()
        t_tgt = teacher(batch.tgt_weak, capture_attention=True)
        pseudo = make_pseudo_labels(torch.softmax(t_tgt.logits, 1), cfg.keep_fraction)
        t_src = teacher(batch.src_weak, capture_attention=True)
        teacher_vectors = torch.cat([teacher.project_global(t_src.fused_features),
                                     teacher.project_global(t_tgt.fused_features)])

    student.train()
    views = torch.cat([batch.src_strong, batch.src_to_tgt, batch.tgt_strong, batch.tgt_to_src])
    out = student(views)
    probs = torch.softmax(out.logits, 1)
    p_s, p_s2t, p_t, p_t2s = probs.split(B)
    f_s, f_s2t, f_t, f_t2s = out.fused_features.split(B)

    comps["seg"] = dice_loss(torch.cat([p_s, p_s2t]), torch.cat([batch.src_labels, batch.src_labels]))
    pseudo2 = type(pseudo)(torch.cat([pseudo.labels, pseudo.labels]), torch.cat([pseudo.valid, pseudo.valid]),
                           pseudo.keep_fraction)
    comps["consistency"] = consistency_loss(torch.cat([p_t, p_t2s]), pseudo2)

    src_bank, tgt_bank = state.src_bank, state.tgt_bank
    if "pa" in mods:
        size = f_s.shape[-2:]
        zs, present_s = batch_prototypes(f_s, downsample_labels(batch.src_labels, size), None, C)
        f_tp = t_tgt.fused_features if cfg.target_prototype_source == "teacher" else f_t
        zt, present_t = batch_prototypes(f_tp, downsample_labels(pseudo.labels, size),
                                         downsample_labels(pseudo.valid.to(torch.uint8), size).bool(), C)
        src_bank = momentum_update(state.src_bank, zs, present_s)
        tgt_bank = momentum_update(state.tgt_bank, zt, present_t)
        comps["pro"] = prototype_loss(src_bank, tgt_bank)

    selections = None
    if "aalp" in mods:
        if cfg.patch_strategy == "attention":
            sel_s = _saliency_selections(t_src.attention_maps, (H, W), patch_size, grid)
            sel_t = _saliency_selections(t_tgt.attention_maps, (H, W), patch_size, grid)
        else:
            sel_s, sel_t = batch.random_patches
        selections = (sel_s, sel_t)
        src_terms = aalp_mod.auxiliary_terms(student, batch.src_strong, batch.src_labels, None, sel_s,
                                             cfg.global_downsample, cfg.cosine_denominator)
        tgt_terms = aalp_mod.auxiliary_terms(student, batch.tgt_strong, pseudo.labels, pseudo.valid, sel_t,
                                             cfg.global_downsample, cfg.cosine_denominator)
        comps["aalp"] = aalp_mod.aalp_loss(src_terms, tgt_terms, cfg.gamma, cfg.delta)

    if "glcl" in mods:
        loc = student.project_local(out.fused_features).split(B)
        glo = student.project_global(out.fused_features).split(B)
        cb = ContrastiveBatch(loc[0], loc[1], loc[2], loc[3], glo[0], glo[1], glo[2], glo[3], cfg.temperature)
        comps["contrast"] = glcl_loss(cb, state.queue, cfg.lambda_mix, positive=cfg.positive_selection)

    total = total_loss(comps, cfg.loss_weights)
    return StepOutput(total, comps, src_bank, tgt_bank, teacher_vectors, pseudo, selections)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_checkpoint: dict
    history: list
    best_epoch: int
    snapshots: dict = field(default_factory=dict)


def _views(cases, idx, policy_weak, policy_strong, seeds, with_mask):
    weak, strong, masks = [], [], []
    for i, s in zip(idx, seeds):
        c = cases[i]
        img = LabeledImage(np.asarray(c.pixels), c.mask if with_mask else None, c.domain_tag, c.case_id)
        w = augment(img, policy_weak, int(s))
        st = augment(img, policy_strong, int(s))
        weak.append(w.pixels)
        strong.append(st.pixels)
        if with_mask:
            masks.append(st.mask)
    return np.stack(weak), np.stack(strong), (np.stack(masks) if with_mask else None)


def _lr_factor(step, total_steps):
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / max(total_steps, 1)))


def _make_optimizer(student, config):
    enc, dec = student.param_groups()
    return torch.optim.AdamW([{"params": enc, "lr": config.lr_encoder},
                              {"params": dec, "lr": config.lr_decoder}],
                             weight_decay=config.weight_decay)


def _fresh_state(config, seed, dtype=torch.float32):
    torch.manual_seed(seed)
    student = SegNet(config.network).to(dtype)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = _make_optimizer(student, config)
    C = config.network.num_classes
    D = config.network.fpn_channels
    rngs = {name: np.random.default_rng([seed, k]) for k, name in
            enumerate(("source_order", "target_sample", "augment", "patch"))}
    return {
        "student": student, "teacher": teacher, "optimizer": opt, "step": 0, "epoch": 0,
        "rngs": rngs,
        "adapt": AdaptState(PrototypeBank.empty(C, D, config.prototype_momentum, dtype),
                            PrototypeBank.empty(C, D, config.prototype_momentum, dtype),
                            NegativeQueue(config.queue_capacity, config.network.global_proj_dim, dtype)),
        "history": [], "best": None,
    }


def _snapshot(st):
    return copy.deepcopy(st)


def train(config: TrainConfig, source_data, target_data, seed: int = 0, resume=None,
          snapshot_epochs=(), on_epoch=None) -> TrainResult:
    """Run warm-up then adaptation; keep the checkpoint with the best selection score.

    ``target_data`` is only ever read through ``.pixels``. ``resume`` accepts
    a snapshot from ``TrainResult.snapshots`` of a run with the same seed and
    schedule; runs that differ only in loss modules share their warm-up this
    way. Selection only considers post-warm-up epochs when adaptation is on.
    """
    config.network.check_input(*np.shape(source_data[0].pixels))
    config.network.check_projection(*np.shape(source_data[0].pixels))
    split = split_cases([c.case_id for c in source_data], config.val_fraction, seed)
    train_src = [c for c in source_data if c.case_id in set(split.train)]
    val_src = [c for c in source_data if c.case_id in set(split.val)] or train_src
    target_images = _stack_pixels(target_data) if target_data else None
    val_images = _stack_pixels(val_src)
    val_truth = np.stack([c.mask for c in val_src])
    if config.adapts and not target_data:
        raise ValueError("adaptation requires target images")

    st = _snapshot(resume) if resume is not None else _fresh_state(config, seed)
    student, teacher = st["student"], st["teacher"]
    if resume is not None:
        st["optimizer"] = _make_optimizer(student, config)
        st["optimizer"].load_state_dict(st.pop("optimizer_state"))
    opt = st["optimizer"]
    if config.adapts and st["best"] is not None and st["best"]["epoch"] <= config.warmup_epochs:
        # a snapshot's best may predate this run's selection window
        st["best"] = None
    rngs = st["rngs"]
    B = config.batch_size
    steps_per_epoch = math.ceil(len(train_src) / B)
    total_steps = steps_per_epoch * config.epochs
    base_lrs = (config.lr_encoder, config.lr_decoder)
    H, W = np.shape(source_data[0].pixels)
    patch_size, grid = patch_geometry(config, H, W)
    C = config.network.num_classes
    snapshots = {}

    for epoch in range(st["epoch"], config.epochs):
        warm = epoch < config.warmup_epochs
        order = rngs["source_order"].permutation(len(train_src))
        sums = {n: 0.0 for n in LOSS_NAMES}
        for k in range(steps_per_epoch):
            idx = order[k * B:(k + 1) * B]
            if len(idx) < B:
                idx = np.concatenate([idx, order[:B - len(idx)]])
            s_seeds = rngs["augment"].integers(0, 2**31, size=len(idx))
            s_weak, s_strong, s_mask = _views(train_src, idx, config.weak_aug, config.strong_aug, s_seeds, True)
            batch = StepBatch(torch.from_numpy(s_strong), torch.from_numpy(s_weak),
                              torch.from_numpy(s_mask.astype(np.int64)))
            if not warm:
                t_idx = rngs["target_sample"].integers(0, len(target_data), size=len(idx))
                t_seeds = rngs["augment"].integers(0, 2**31, size=len(idx))
                t_weak, t_strong, _ = _views(target_data, t_idx, config.weak_aug, config.strong_aug, t_seeds, False)
                s2t = np.stack([stylize(s_strong[i], target_images[t_idx[i]], config.style_method,
                                        config.beta, config.histogram_bins) for i in range(len(idx))])
                t2s = np.stack([stylize(t_strong[i], np.asarray(train_src[idx[i]].pixels), config.style_method,
                                        config.beta, config.histogram_bins) for i in range(len(idx))])
                batch.tgt_weak = torch.from_numpy(t_weak)
                batch.tgt_strong = torch.from_numpy(t_strong)
                batch.src_to_tgt = torch.from_numpy(s2t)
                batch.tgt_to_src = torch.from_numpy(t2s)
                if config.patch_strategy == "random":
                    prng = rngs["patch"]
                    batch.random_patches = (
                        [aalp_mod.random_patch((H, W), patch_size, prng, grid) for _ in idx],
                        [aalp_mod.random_patch((H, W), patch_size, prng, grid) for _ in idx])

            factor = _lr_factor(st["step"], total_steps)
            for g, base in zip(opt.param_groups, base_lrs):
                g["lr"] = base * factor
            student.train()
            try:
                res = compute_step_losses(student, teacher, batch, st["adapt"], config, warm)
            except LossDivergence as exc:
                exc.last_good = _best_checkpoint(st, config, seed, split)
                raise
            opt.zero_grad(set_to_none=True)
            res.total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(student.parameters(), config.grad_clip)
            opt.step()
            ema_update(teacher, student, config.ema.alpha(st["step"]))
            st["step"] += 1
            student.step_count = st["step"]
            if not warm:
                if res.src_bank is not None:
                    st["adapt"].src_bank = res.src_bank.detached()
                    st["adapt"].tgt_bank = res.tgt_bank.detached()
                if "glcl" in config.modules:
                    st["adapt"].queue.push(res.teacher_vectors)
            for n in LOSS_NAMES:
                sums[n] += float(res.components[n].detach()) if torch.is_tensor(res.components[n]) else float(res.components[n])

        # epoch-end selection (no target labels involved)
        val_pred = predict(student, val_images, config.eval_batch_size)
        val_report = report_from_predictions(val_pred, val_truth, C)
        m_src = _metric(val_report, config.selection_metric)
        m_pseudo = (pseudo_agreement(student, teacher, target_images, config.keep_fraction,
                                     config.selection_metric, config.eval_batch_size)
                    if target_images is not None else 0.0)
        score = selection_score(m_src, m_pseudo)
        val_report.epoch, val_report.seed = epoch + 1, seed
        val_report.selection_score = score
        val_report.source_val_metric = m_src
        val_report.metric_pseudo = m_pseudo
        val_report.losses = {n: sums[n] / steps_per_epoch for n in LOSS_NAMES}
        st["history"].append(val_report)
        st["epoch"] = epoch + 1
        eligible = (epoch >= config.warmup_epochs) if config.adapts else True
        if eligible and (st["best"] is None or score > st["best"]["score"]):
            st["best"] = {"score": score, "epoch": epoch + 1,
                          "student": copy.deepcopy(student.state_dict()),
                          "teacher": copy.deepcopy(teacher.state_dict()),
                          "adapt": copy.deepcopy(st["adapt"]),
                          "step": st["step"], "m_src": m_src, "m_pseudo": m_pseudo}
        log.info("seed %d epoch %d score %.4f src %.4f pseudo %.4f losses %s", seed, epoch + 1, score,
                 m_src, m_pseudo, {k: round(v, 4) for k, v in val_report.losses.items()})
        if on_epoch is not None:
            on_epoch(val_report)
        if epoch + 1 in snapshot_epochs:
            snap = copy.deepcopy({k: v for k, v in st.items() if k != "optimizer"})
            snap["optimizer_state"] = copy.deepcopy(opt.state_dict())
            snapshots[epoch + 1] = snap

    best = _best_checkpoint(st, config, seed, split)
    return TrainResult(best, st["history"], st["best"]["epoch"] if st["best"] else 0, snapshots)


def _best_checkpoint(st, config, seed, split):
    best = st["best"]
    if best is None:
        student_state, teacher_state = st["student"].state_dict(), st["teacher"].state_dict()
        info = {"epoch": st["epoch"], "score": None, "m_src": None, "m_pseudo": None, "step": st["step"]}
    else:
        student_state, teacher_state = best["student"], best["teacher"]
        info = best
    arrays = {f"student/{k}": v.detach().cpu().numpy().copy() for k, v in student_state.items()}
    arrays.update({f"teacher/{k}": v.detach().cpu().numpy().copy() for k, v in teacher_state.items()})
    ad = info.get("adapt") or st["adapt"]
    arrays["bank/source/prototypes"] = ad.src_bank.prototypes.numpy().copy()
    arrays["bank/source/initialized"] = ad.src_bank.initialized.numpy().copy()
    arrays["bank/target/prototypes"] = ad.tgt_bank.prototypes.numpy().copy()
    arrays["bank/target/initialized"] = ad.tgt_bank.initialized.numpy().copy()
    arrays["queue/entries"] = ad.queue.entries.numpy().copy()
    header = {
        "format": "mtuda-checkpoint/1",
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "network_digest": config.network.digest(),
        "seed": seed,
        "epoch": info["epoch"],
        "step_count": info["step"],
        "selection_score": info["score"],
        "source_val_metric": info["m_src"],
        "metric_pseudo": info["m_pseudo"],
        "queue_total_pushed": ad.queue.total_pushed,
        "split": {"train": list(split.train), "val": list(split.val)},
    }
    return {"arrays": arrays, "header": header}


def config_hash(config: TrainConfig) -> str:
    import hashlib
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, checkpoint) -> None:
    """Named-array ``.npz`` with the JSON header stored under ``__header__``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.frombuffer(json.dumps(checkpoint["header"], sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __header__=header, **checkpoint["arrays"])
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        arrays = {k: z[k].copy() for k in z.files if k != "__header__"}
    return {"arrays": arrays, "header": header}


def models_from_checkpoint(checkpoint):
    config = TrainConfig.from_dict(checkpoint["header"]["config"])
    student, teacher = SegNet(config.network), SegNet(config.network)
    load_arrays(student, checkpoint["arrays"], "student/")
    load_arrays(teacher, checkpoint["arrays"], "teacher/")
    student.step_count = teacher.step_count = checkpoint["header"]["step_count"]
    return student, teacher, config


def recompute_selection(checkpoint, source_data, target_data):
    """Selection score of a checkpoint from its source-val split and target images."""
    student, teacher, config = models_from_checkpoint(checkpoint)
    val_ids = set(checkpoint["header"]["split"]["val"]) or set(checkpoint["header"]["split"]["train"])
    val = [c for c in source_data if c.case_id in val_ids]
    rep = evaluate(student, val, config.network.num_classes, config.eval_batch_size)
    m_src = _metric(rep, config.selection_metric)
    m_pseudo = pseudo_agreement(student, teacher, _stack_pixels(target_data), config.keep_fraction,
                                config.selection_metric, config.eval_batch_size) if target_data else 0.0
    return selection_score(m_src, m_pseudo), m_src, m_pseudo
