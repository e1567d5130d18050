"""Training loop, evaluation, hyperparameter sweeps and the module ablation grid."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import pseudolabel
from . import tensor as T
from .backbone import Backbone
from .checkpoint import Checkpoint
from .config import RunConfig
from .datagen import DatasetManifest
from .errors import DataError, LoadError, TrainingDiverged
from .metrics import ScoredPredictions, classification_report, metrics_csv, precision_at_recall, roc_auc
from .refiner import PatchRefiner, image_loss, infer, total_loss
from .teacher import ModelPair, PatchModel, apply_plan, augment_plan, ema_update, flip_token_grid, patch_loss

log = logging.getLogger(__name__)

NORMAL_CLASS = 0


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D tensors (biases, norms)."""

    def __init__(self, named_params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = OrderedDict(named_params)
        self.wd, self.betas, self.eps = weight_decay, betas, eps
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd and p.ndim >= 2:
                p.data *= 1 - lr * self.wd
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def lr_at(cfg: RunConfig, step: int, total: int, steps_per_epoch: int) -> float:
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class Model:
    """Everything a run owns: student/teacher pair and the image-level refiner."""

    cfg: RunConfig
    pair: ModelPair
    refiner: PatchRefiner

    @property
    def student(self) -> PatchModel:
        return self.pair.student

    @property
    def backbone(self) -> Backbone:
        return self.pair.student.backbone

    def trainable(self):
        yield from (("student/" + n, p) for n, p in self.student.named_parameters())
        yield from (("image_head/" + n, p) for n, p in self.refiner.head.named_parameters())


def build_model(cfg: RunConfig) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    backbone = Backbone(cfg.backbone, rng)
    student = PatchModel(backbone, cfg.n_classes, rng)
    refiner = PatchRefiner(cfg.backbone.token_dim, cfg.n_classes, cfg.n_groups, rng,
                           NORMAL_CLASS, cfg.cluster_seed)
    return Model(cfg, ModelPair(student, cfg.ema_lambda), refiner)


def task_labels(class_index: np.ndarray, task: str) -> np.ndarray:
    class_index = np.asarray(class_index, dtype=np.int64)
    return (class_index != NORMAL_CLASS).astype(np.int64) if task == "det" else class_index


# -- checkpoints ---------------------------------------------------------------

def to_checkpoint(model: Model, opt: AdamW | None = None, epoch: int = 0,
                  rng_state: dict | None = None) -> Checkpoint:
    blobs = OrderedDict()
    for n, p in model.student.named_parameters():
        blobs["student/" + n] = p.data
    for n, p in model.pair.teacher.named_parameters():
        blobs["teacher/" + n] = p.data
    for n, p in model.refiner.head.named_parameters():
        blobs["image_head/" + n] = p.data
    step = 0
    if opt is not None:
        step = opt.t
        for n in opt.params:
            blobs["adam_m/" + n] = opt.m[n]
        for n in opt.params:
            blobs["adam_v/" + n] = opt.v[n]
    return Checkpoint(model.cfg.to_text(), blobs, epoch, step, rng_state or {})


def from_checkpoint(ck: Checkpoint) -> Model:
    cfg = ck.config
    model = build_model(cfg)
    try:
        model.student.load_state_dict(ck.group("student"))
        model.pair.teacher.load_state_dict(ck.group("teacher"))
        model.refiner.head.load_state_dict(ck.group("image_head"))
    except (KeyError, T.ShapeError) as exc:
        raise LoadError(f"checkpoint does not fit its config: {exc}") from exc
    return model


def load_model(path, expected: RunConfig | None = None) -> Model:
    return from_checkpoint(ckpt_io.load(path, expected))


# -- training ------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    image_loss: float
    patch_loss: float
    kept_fraction: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.image_loss:.6f}\t{self.patch_loss:.6f}\t{self.kept_fraction:.4f}\t{self.lr:.6g}"


def train_step(model: Model, opt: AdamW, images: np.ndarray, labels: np.ndarray,
               aug_seeds: np.ndarray, lr: float):
    """One optimisation step. Returns (image loss, patch loss or nan, kept fraction)."""
    cfg = model.cfg
    grid_side = cfg.backbone.grid_side
    plans = [augment_plan(int(s), *images.shape[1:3]) for s in aug_seeds] if cfg.strong_augment else None
    student_in = np.stack([apply_plan(x, p) for x, p in zip(images, plans)]) if plans else images

    pseudo = None
    if cfg.use_plt:
        teacher_preds = model.pair.teacher_predict(images)
        pseudo = pseudolabel.generate(teacher_preds, labels, cfg.delta, NORMAL_CLASS,
                                      cfg.filter_distressed, cfg.filter_normal)
        if plans:
            pseudo.labels = np.stack([flip_token_grid(l, p, grid_side) for l, p in zip(pseudo.labels, plans)])
            pseudo.keep_mask = np.stack([flip_token_grid(k, p, grid_side) for k, p in zip(pseudo.keep_mask, plans)])
        grid, student_preds = model.student(student_in)
        lp = patch_loss(student_preds, pseudo)
    else:
        grid = model.backbone(student_in)
        lp = None

    _, _, sel = model.refiner(grid)
    li = image_loss(sel, labels)
    loss = total_loss(li, lp, cfg.patch_loss_weight)
    if not np.isfinite(loss.item()):
        raise TrainingDiverged("non-finite loss")
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    if cfg.use_plt:
        ema_update(model.pair)
    kept = float(pseudo.keep_mask.mean()) if pseudo is not None else float("nan")
    return li.item(), (lp.item() if lp is not None else float("nan")), kept


def train(cfg: RunConfig, manifest: DatasetManifest, out_dir=None, images: np.ndarray | None = None,
          progress=None) -> tuple[Model, list]:
    """Train from scratch; writes ``epoch_XXX.ckpt``, ``last.ckpt`` and ``train_log.tsv`` if ``out_dir``."""
    if images is None:
        images = manifest.load_images()
    labels = task_labels(manifest.labels(), cfg.task)
    n = len(labels)
    if n == 0:
        raise DataError("empty training manifest")
    if labels.max() >= cfg.n_classes:
        raise DataError(f"labels exceed {cfg.n_classes} classes; check task and num_classes")

    model = build_model(cfg)
    opt = AdamW(model.trainable(), cfg.weight_decay)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = data_rng.permutation(n)
        sums = np.zeros(3)
        counts = np.zeros(3)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            seeds = data_rng.integers(0, 2**31 - 1, size=len(idx))
            lr = lr_at(cfg, step, total, steps_per_epoch)
            try:
                vals = train_step(model, opt, images[idx], labels[idx], seeds, lr)
            except (TrainingDiverged, T.NumericError) as exc:
                raise TrainingDiverged(
                    f"{exc}: non-finite values at epoch {epoch} batch {b} (step {step}); "
                    f"run seed {cfg.seed}, augmentation seeds {seeds.tolist()}, images {idx.tolist()}"
                ) from exc
            for j, v in enumerate(vals):
                if np.isfinite(v):
                    sums[j] += v
                    counts[j] += 1
            step += 1
        means = np.divide(sums, counts, out=np.full(3, np.nan), where=counts > 0)
        entry = EpochLog(epoch, *means, lr)
        history.append(entry)
        log.info("epoch %d  L_i %.4f  L_p %.4f  kept %.3f", epoch, *means)
        if progress is not None:
            progress(entry)
        if out is not None:
            ck = to_checkpoint(model, opt, epoch, data_rng.bit_generator.state)
            ck.save(out / f"epoch_{epoch:03d}.ckpt")
            ck.save(out / "last.ckpt")
            (out / "train_log.tsv").write_text(
                "epoch\timage_loss\tpatch_loss\tkept_fraction\tlr\n" + "".join(h.line() + "\n" for h in history)
            )
    model.opt = opt  # type: ignore[attr-defined]
    model.rng_state = data_rng.bit_generator.state  # type: ignore[attr-defined]
    return model, history


# -- evaluation ------------------------------------------------------------------

def score(model: Model, images: np.ndarray):
    return infer(model.backbone, model.refiner, images)


def evaluate(model: Model, manifest: DatasetManifest, task: str | None = None,
             images: np.ndarray | None = None) -> OrderedDict:
    """Detection metrics always; Top-1 and macro-F1 too when the model recognises classes."""
    task = task or model.cfg.task
    if images is None:
        images = manifest.load_images()
    res = score(model, images)
    cls = manifest.labels()
    detected = task_labels(cls, "det")
    scored = ScoredPredictions(res.distress_score, detected)
    out = OrderedDict()
    out["auc"] = roc_auc(scored)
    out["p@r90"] = precision_at_recall(scored, 0.90)
    out["p@r95"] = precision_at_recall(scored, 0.95)
    if task == "rec":
        if model.cfg.task != "rec":
            raise LoadError("recognition metrics need a recognition checkpoint")
        rec = ScoredPredictions(res.distress_score, cls, res.predicted)
        out["top1"], out["macro_f1"] = classification_report(rec, model.cfg.n_classes)
    else:
        out["accuracy"] = float(np.mean((res.predicted != NORMAL_CLASS) == (detected == 1)))
    return out


def evaluate_csv(model: Model, manifest: DatasetManifest, task: str | None = None,
                 images: np.ndarray | None = None) -> str:
    return metrics_csv(evaluate(model, manifest, task, images).items(), model.cfg.hash)


# -- experiments -----------------------------------------------------------------

SWEEP_PARAMS = {"k": ("k", int), "delta-rel": ("delta_rel", float), "delta_rel": ("delta_rel", float)}


def sweep(cfg: RunConfig, param: str, values, train_manifest: DatasetManifest, test_manifest: DatasetManifest,
          out_dir=None) -> str:
    """One train/eval run per value, same seed. Returns ``param,value,metric,score,config_hash`` CSV."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose from k, delta-rel")
    if not values:
        raise ValueError("no sweep values")
    key, cast = SWEEP_PARAMS[param]
    train_x, test_x = train_manifest.load_images(), test_manifest.load_images()
    lines = ["param,value,metric,score,config_hash"]
    for v in values:
        run_cfg = cfg.replace(**{key: cast(v)})
        sub = Path(out_dir) / f"{key}={v}" if out_dir is not None else None
        model, _ = train(run_cfg, train_manifest, sub, images=train_x)
        for metric, val in evaluate(model, test_manifest, images=test_x).items():
            lines.append(f"{key},{v},{metric},{val:.6f},{run_cfg.hash}")
    return "\n".join(lines) + "\n"


ABLATIONS = OrderedDict([
    ("baseline", {"use_plt": False, "k": 1}),
    ("refiner", {"use_plt": False}),
    ("teacher", {"use_plt": True, "k": 1}),
    ("teacher+refiner", {"use_plt": True}),
])


def ablation(cfg: RunConfig, train_manifest, test_manifest, names=None, out_dir=None) -> OrderedDict:
    """Module ablation grid: ``{name: metrics}`` for broad/slim head with and without the teacher."""
    train_x, test_x = train_manifest.load_images(), test_manifest.load_images()
    results = OrderedDict()
    for name in names or ABLATIONS:
        run_cfg = cfg.replace(**ABLATIONS[name])
        sub = Path(out_dir) / name if out_dir is not None else None
        model, _ = train(run_cfg, train_manifest, sub, images=train_x)
        results[name] = evaluate(model, test_manifest, images=test_x)
    return results
