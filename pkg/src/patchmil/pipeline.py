"""Training loop, stratified k-fold cross-validation and classification metrics."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .config import DECISION_RULES, RunConfig, TrainConfig
from .data import DatasetManifest, ImageSample, Normalization, load_sample
from .encoder import EncoderConfig, load_encoder_state, read_state_dict
from .extraction import sample_patch_mask
from .losses import LossBreakdown, LossConfig, cross_entropy, total_loss, weakly_supervised_loss
from .mil import masked_select, micm_select, noisy_or_loss
from .model import ModelOutput, PatchMILModel, load_model, save_model

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
REPORT_COLUMNS = ("accuracy", "precision", "recall", "f1")


class TrainingError(RuntimeError):
    pass


# --- data ---------------------------------------------------------------------


@dataclass
class SampleSet:
    """Decoded samples stacked into tensors, ready for batching."""

    ids: list[str]
    pixels: torch.Tensor  # M x C x H x W
    labels: torch.Tensor  # M, int64
    patch_masks: torch.Tensor  # M x N, bool
    original_sizes: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, indices: Sequence[int]) -> "SampleSet":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return SampleSet(
            [self.ids[i] for i in idx.tolist()],
            self.pixels[idx],
            self.labels[idx],
            self.patch_masks[idx],
            [self.original_sizes[i] for i in idx.tolist()] if self.original_sizes else [],
        )

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[ImageSample],
        patch_size: int,
        band_width: int,
        overlap_threshold: float,
    ) -> "SampleSet":
        if not samples:
            raise ValueError("no samples")
        pixels = torch.stack(
            [torch.from_numpy(np.array(s.pixels)).permute(2, 0, 1) for s in samples]
        ).float()
        masks = np.stack([sample_patch_mask(s, patch_size, band_width, overlap_threshold) for s in samples])
        return cls(
            [s.id for s in samples],
            pixels,
            torch.as_tensor([s.label for s in samples], dtype=torch.long),
            torch.as_tensor(masks, dtype=torch.bool),
            [tuple(s.original_size) for s in samples],
        )


def load_samples(
    manifest: DatasetManifest,
    encoder: EncoderConfig,
    normalization: Normalization | None = None,
    band_width: int = 12,
    overlap_threshold: float = 0.25,
    workers: int = 0,
) -> SampleSet:
    def one(entry):
        return load_sample(entry, encoder.input_size, normalization)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, manifest.entries))
    else:
        samples = [one(e) for e in manifest.entries]
    return SampleSet.from_samples(samples, encoder.patch_size, band_width, overlap_threshold)


# --- metrics ------------------------------------------------------------------


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_predictions(cls, labels: Iterable[int], predictions: Iterable[int]) -> "Metrics":
        y = np.asarray(list(labels), dtype=int)
        p = np.asarray(list(predictions), dtype=int)
        if y.shape != p.shape:
            raise ValueError("labels and predictions differ in length")
        return cls(
            tp=int(((y == 1) & (p == 1)).sum()),
            fp=int(((y == 0) & (p == 1)).sum()),
            fn=int(((y == 1) & (p == 0)).sum()),
            tn=int(((y == 0) & (p == 0)).sum()),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_row(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def summarize_folds(rows: Sequence[Mapping[str, float]]) -> dict[str, float]:
    """Column-wise mean of per-fold metric rows."""
    if not rows:
        raise ValueError("no folds to summarize")
    keys = list(rows[0])
    return {k: math.fsum(r[k] for r in rows) / len(rows) for k in keys}


@dataclass
class CrossValReport:
    rows: list[dict[str, float]]
    rule: str = "micm_masked"

    @property
    def average(self) -> dict[str, float]:
        return summarize_folds(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("fold", *REPORT_COLUMNS))
        for i, row in enumerate(self.rows, start=1):
            writer.writerow((i, *(f"{row[c]:.6f}" for c in REPORT_COLUMNS)))
        avg = self.average
        writer.writerow(("average", *(f"{avg[c]:.6f}" for c in REPORT_COLUMNS)))
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"decision rule: {self.rule}", f"{'fold':<8}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>7}"]

        def fmt(name, r):
            return (
                f"{name:<8}{100 * r['accuracy']:>7.1f}%{100 * r['precision']:>7.1f}%"
                f"{100 * r['recall']:>7.1f}%{r['f1']:>7.2f}"
            )

        lines += [fmt(f"Fold {i}", r) for i, r in enumerate(self.rows, start=1)]
        lines.append(fmt("Average", self.average))
        return "\n".join(lines) + "\n"


# --- folds --------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[int, ...], ...]
    labels: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_indices(self, fold: int) -> list[int]:
        return sorted(i for j, f in enumerate(self.folds) if j != fold for i in f)

    def class_counts(self) -> list[tuple[int, int]]:
        out = []
        for f in self.folds:
            pos = sum(self.labels[i] for i in f)
            out.append((len(f) - pos, pos))
        return out


def _labels_of(data) -> list[int]:
    if isinstance(data, DatasetManifest):
        return data.labels
    return [int(v) for v in data]


def stratified_kfold(data: DatasetManifest | Sequence[int], k: int = 5, seed: int = 0) -> FoldSplit:
    """Stratified partition into ``k`` folds.

    Each class is shuffled with ``seed``; the classes are then concatenated
    and dealt round-robin, which keeps fold sizes within one of each other and
    per-fold class counts within one of proportional.
    """
    labels = _labels_of(data)
    counts = (labels.count(0), labels.count(1))
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > min(counts):
        raise ValueError(f"k={k} exceeds the smaller class count {min(counts)}")
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for cls in (1, 0):
        members = np.array([i for i, y in enumerate(labels) if y == cls])
        order.extend(rng.permutation(members).tolist())
    folds: list[list[int]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(idx)
    return FoldSplit(tuple(tuple(sorted(f)) for f in folds), tuple(labels))


def stratified_split(
    indices: Sequence[int], labels: Sequence[int], fraction: float, seed: int = 0
) -> tuple[list[int], list[int]]:
    """Hold out ``fraction`` of each class in ``indices``; returns (train, holdout)."""
    rng = np.random.default_rng(seed)
    train, held = [], []
    for cls in (0, 1):
        members = [i for i in indices if labels[i] == cls]
        perm = rng.permutation(members).tolist() if members else []
        n_held = int(round(fraction * len(perm)))
        if len(perm) > 1:
            n_held = min(n_held, len(perm) - 1)
        held.extend(perm[:n_held])
        train.extend(perm[n_held:])
    return sorted(train), sorted(held)


# --- model --------------------------------------------------------------------


def build_model(config: RunConfig, seed: int | None = None) -> PatchMILModel:
    torch.manual_seed(config.seed if seed is None else seed)
    model = PatchMILModel(config.encoder, config.head_hidden)
    if config.paths.pretrained:
        path = Path(config.paths.pretrained)
        report = load_encoder_state(model.encoder, read_state_dict(path), source=str(path))
        log.info("loaded %d/%d encoder tensors from %s", report.loaded, report.total, path)
    return model.to(DTYPES[config.train.precision])


def compute_loss(
    output: ModelOutput, labels: torch.Tensor, loss_cfg: LossConfig, selection: str = "max"
) -> LossBreakdown:
    probs = output.instance_probs
    cls_probs = output.cls_probs
    if selection == "noisy_or":
        per_cls = cross_entropy(labels, cls_probs, loss_cfg.eps)
        l_cls = per_cls.mean()
        l_mil = noisy_or_loss(probs, labels, loss_cfg.eps)
        return LossBreakdown(l_cls, l_mil, total_loss(l_mil, l_cls, loss_cfg.lam), per_cls, l_mil.expand(len(labels)))
    _, selected = micm_select(probs)
    return weakly_supervised_loss(labels, cls_probs, selected, loss_cfg)


# --- prediction and evaluation ------------------------------------------------


@dataclass
class Predictions:
    ids: list[str]
    labels: np.ndarray
    cls_prob: np.ndarray  # positive-class probability of the class head
    instance_prob: np.ndarray  # M x N positive-class probability per patch
    selected_index: np.ndarray  # unmasked most-positive patch
    masked_index: np.ndarray  # most-positive patch inside the edge mask
    masked_prob: np.ndarray

    def decide(self, rule: str = "micm_masked", threshold: float = 0.5) -> np.ndarray:
        micm = self.masked_prob >= threshold
        cls = self.cls_prob >= threshold
        if rule == "micm_masked":
            out = micm
        elif rule == "cls_head":
            out = cls
        elif rule == "either":
            out = micm | cls
        else:
            raise ValueError(f"unknown decision rule {rule!r}")
        return out.astype(int)

    def score(self, rule: str = "micm_masked") -> np.ndarray:
        if rule == "micm_masked":
            return self.masked_prob
        if rule == "cls_head":
            return self.cls_prob
        return np.maximum(self.masked_prob, self.cls_prob)


@torch.no_grad()
def predict(model: PatchMILModel, data: SampleSet, batch_size: int = 64) -> Predictions:
    if len(data) == 0:
        raise ValueError("empty fold")
    model.eval()
    dtype = next(model.parameters()).dtype
    cls_prob, inst, sel, midx, mprob = [], [], [], [], []
    for start in range(0, len(data), batch_size):
        x = data.pixels[start : start + batch_size].to(dtype)
        out = model(x)
        probs = out.instance_probs
        i, _ = micm_select(probs)
        mi, mp = masked_select(probs, data.patch_masks[start : start + batch_size])
        cls_prob.append(out.cls_probs[:, 1])
        inst.append(probs[..., 1])
        sel.append(i)
        midx.append(mi)
        mprob.append(mp)
    cat = lambda ts: torch.cat(ts).cpu().numpy()  # noqa: E731
    return Predictions(
        list(data.ids),
        data.labels.cpu().numpy(),
        cat(cls_prob).astype(np.float64),
        cat(inst).astype(np.float64),
        cat(sel),
        cat(midx),
        cat(mprob).astype(np.float64),
    )


def evaluate(
    model: PatchMILModel | str | os.PathLike,
    data: SampleSet,
    rule: str = "micm_masked",
    threshold: float = 0.5,
) -> Metrics:
    if not isinstance(model, PatchMILModel):
        model = load_model(model)[0]
    preds = predict(model, data)
    return Metrics.from_predictions(preds.labels, preds.decide(rule, threshold))


def localization_hit_rate(selected: Sequence[int], planted: Sequence[Iterable[int]]) -> float:
    """Fraction of images whose selected patch is one of its planted patches."""
    if len(selected) != len(planted):
        raise ValueError("selected and planted differ in length")
    if not selected:
        raise ValueError("no images")
    hits = sum(int(s) in set(p) for s, p in zip(selected, planted))
    return hits / len(selected)


# --- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: PatchMILModel
    loss_curve: list[float]
    val_accuracy: list[float]
    best_epoch: int
    checkpoint: Path | None = None


def _optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for pid, state in sd["state"].items():
        for key, value in state.items():
            tensors[f"optimizer.state.{pid}.{key}"] = torch.as_tensor(value)
    return tensors, {"param_groups": sd["param_groups"]}


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: Mapping[str, torch.Tensor], meta: Mapping) -> None:
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, value in tensors.items():
        if not name.startswith("optimizer.state."):
            continue
        pid, key = name[len("optimizer.state.") :].split(".", 1)
        state.setdefault(int(pid), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, torch.Tensor):
        return value.item() if value.numel() == 1 else value.tolist()
    return value


def _run_epoch(
    model: PatchMILModel,
    data: SampleSet,
    opt: torch.optim.Optimizer,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    generator: torch.Generator,
    step_offset: int,
) -> float:
    model.train()
    dtype = next(model.parameters()).dtype
    perm = torch.randperm(len(data), generator=generator)
    total, count = 0.0, 0
    for b, start in enumerate(range(0, len(data), cfg.batch_size)):
        idx = perm[start : start + cfg.batch_size]
        x = data.pixels[idx].to(dtype)
        y = data.labels[idx]
        breakdown = compute_loss(model(x), y, loss_cfg, cfg.selection)
        loss = breakdown.l_all
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step_offset + b}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        total += loss.item() * len(idx)
        count += len(idx)
    return total / count


@torch.no_grad()
def _val_loss(model: PatchMILModel, data: SampleSet, loss_cfg: LossConfig, selection: str) -> float:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(data.pixels.to(dtype))
    return compute_loss(out, data.labels, loss_cfg, selection).l_all.item()


def train(
    model: PatchMILModel,
    train_set: SampleSet,
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    val_set: SampleSet | None = None,
    out_dir: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
    seed: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Optimize ``L_all`` on ``train_set``; keep the best validation epoch.

    ``out_dir`` receives ``best.npz`` (model only) and ``last.npz`` (model,
    optimizer, scheduler and shuffling RNG state) after every epoch;
    ``resume_from`` takes a ``last.npz`` and continues up to ``cfg.epochs``.
    """
    if len(train_set) == 0:
        raise TrainingError("empty fold")
    model.to(DTYPES[cfg.precision])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=cfg.restart_period, T_mult=cfg.restart_mult
    )
    generator = torch.Generator().manual_seed(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    curve: list[float] = []
    val_acc: list[float] = []
    best_key = (-math.inf, -math.inf)
    best_epoch = -1
    best_state = None
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)

    if resume_from is not None:
        loaded, extras, meta = load_model(resume_from)
        model.load_state_dict(loaded.state_dict())
        state = meta["train_state"]
        _restore_optimizer(opt, extras, state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        generator.set_state(extras["rng.generator"])
        start_epoch = state["epoch"]
        curve = list(state["loss_curve"])
        val_acc = list(state["val_accuracy"])
        best_key = tuple(state["best_key"])
        best_epoch = state["best_epoch"]
        best_path = Path(resume_from).with_name("best.npz")
        if best_path.is_file():
            best_state = load_model(best_path)[0].state_dict()

    for epoch in range(start_epoch, cfg.epochs):
        mean_loss = _run_epoch(model, train_set, opt, cfg, loss_cfg, generator, epoch * steps_per_epoch)
        sched.step()
        curve.append(mean_loss)
        if val_set is not None and len(val_set):
            acc = evaluate(model, val_set, cfg.decision_rule).accuracy
            key = (acc, -_val_loss(model, val_set, loss_cfg, cfg.selection))
        else:
            acc = float("nan")
            key = (0.0, -mean_loss)
        val_acc.append(acc)
        if key > best_key:
            best_key, best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())
            if out is not None:
                save_model(model, out / "best.npz", extra_metadata={"epoch": epoch})
        log.info("epoch %d loss %.6f val_acc %.4f", epoch + 1, mean_loss, acc)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if out is not None:
            opt_tensors, opt_meta = _optimizer_tensors(opt)
            save_model(
                model,
                out / "last.npz",
                extra_tensors={**opt_tensors, "rng.generator": generator.get_state()},
                extra_metadata={
                    "train_state": {
                        "epoch": epoch + 1,
                        "loss_curve": curve,
                        "val_accuracy": val_acc,
                        "best_key": list(best_key),
                        "best_epoch": best_epoch,
                        "optimizer": _jsonable(opt_meta),
                        "scheduler": _jsonable(sched.state_dict()),
                    }
                },
            )

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(
        model=model,
        loss_curve=curve,
        val_accuracy=val_acc,
        best_epoch=best_epoch,
        checkpoint=(out / "best.npz") if out is not None else None,
    )


# --- cross-validation ---------------------------------------------------------


@dataclass
class CrossValResult:
    split: FoldSplit
    metrics: dict[str, list[Metrics]]
    reports: dict[str, CrossValReport]


def crossvalidate(
    manifest: DatasetManifest,
    config: RunConfig,
    out_dir: str | os.PathLike | None = None,
    data: SampleSet | None = None,
) -> CrossValResult:
    """Train on k-1 folds, test on the held-out fold, for every fold.

    All decision rules are evaluated side by side; ``metrics.csv`` holds the
    configured rule and ``metrics_<rule>.csv`` every rule.
    """
    k = config.folds
    split = stratified_kfold(manifest, k, config.seed)
    if data is None:
        data = load_samples(
            manifest,
            config.encoder,
            config.data.normalization,
            config.extraction.band_width,
            config.extraction.overlap_threshold,
            config.train.num_workers,
        )
    labels = manifest.labels
    out = Path(out_dir) if out_dir is not None else None
    metrics: dict[str, list[Metrics]] = {rule: [] for rule in DECISION_RULES}
    for i in range(k):
        trainval = split.train_indices(i)
        train_idx, val_idx = stratified_split(trainval, labels, config.train.val_fraction, config.seed + i)
        fold_seed = config.seed + i
        model = build_model(config, seed=fold_seed)
        result = train(
            model,
            data.subset(train_idx),
            config.train,
            config.loss,
            val_set=data.subset(val_idx) if val_idx else None,
            out_dir=(out / f"fold{i + 1}") if out is not None else None,
            seed=fold_seed,
        )
        preds = predict(result.model, data.subset(split.folds[i]))
        for rule in DECISION_RULES:
            metrics[rule].append(Metrics.from_predictions(preds.labels, preds.decide(rule)))
        log.info("fold %d/%d accuracy %.4f", i + 1, k, metrics[config.train.decision_rule][-1].accuracy)
    reports = {rule: CrossValReport([m.as_row() for m in ms], rule) for rule, ms in metrics.items()}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        primary = reports[config.train.decision_rule]
        (out / "metrics.csv").write_text(primary.to_csv(), encoding="utf-8")
        for rule, report in reports.items():
            (out / f"metrics_{rule}.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "report.txt").write_text(
            "\n".join(reports[r].to_text() for r in DECISION_RULES), encoding="utf-8"
        )
    return CrossValResult(split, metrics, reports)
