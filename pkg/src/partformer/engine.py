"""Training loop, evaluation, feature extraction and the whole-loss gradient check."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import RunConfig, config_from_text
from .data import DatasetIndex, PKSampler, Sample, augment, load_image, normalize, parse_name, scan_dataset
from .losses import ClassifierBank, LossWeights, total_loss
from .metrics import EvalReport, cmc_map, distance_matrix, fuse, head_diversity
from .model import PartFormer
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training or checking hit a non-finite or out-of-tolerance number."""


# ---------------------------------------------------------------- optimizer


def lr_at(step: int, total: int, base: float, warmup_frac: float, min_ratio: float) -> float:
    """Linear warmup then cosine decay from ``base`` to ``base * min_ratio``."""
    warmup = int(round(warmup_frac * total))
    if step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    return base * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))


class SGD:
    """Momentum SGD with coupled L2 weight decay: v = mu v + g + wd p; p -= lr v."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= p.data.dtype.type(lr) * v


# ---------------------------------------------------------------- model assembly


@dataclass
class Trainable:
    cfg: RunConfig
    model: PartFormer
    bank: ClassifierBank

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.model.params, **self.bank.params}

    def loss(self, images, cams, labels) -> tuple[Tensor, dict[str, float], object]:
        fs = self.model.forward(images, cams)
        use_global = self.model.cfg.hdb_cls or not self.model.cfg.enable_hdb
        total, terms = total_loss(fs, labels, self.bank, self.cfg.loss_weights(), use_global=use_global)
        return total, terms, fs


def build(cfg: RunConfig, num_classes: int, num_cameras: int, dtype=None) -> Trainable:
    dtype = cfg.np_dtype if dtype is None else dtype
    mcfg = cfg.model_config(num_cameras)
    model = PartFormer(mcfg, seed=cfg.run.seed, dtype=dtype)
    bank = ClassifierBank(mcfg.embed_dim, num_classes, mcfg.num_parts, seed=cfg.run.seed + 1,
                          dtype=dtype, neck=cfg.ablation.neck)
    return Trainable(cfg, model, bank)


def save_checkpoint(path, tr: Trainable, step: int, num_classes: int, num_cameras: int) -> None:
    tensors = {k: p.data for k, p in tr.params.items()}
    tensors["meta.num_classes"] = np.array(num_classes, dtype=np.int64)
    tensors["meta.num_cameras"] = np.array(num_cameras, dtype=np.int64)
    ckpt.save(path, tensors, tr.cfg.to_text(), step)


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[Trainable, int]:
    """Rebuild a model from a checkpoint; ``cfg`` (if given) must agree with the echo."""
    c = ckpt.load(path)
    echo = config_from_text(c.config_text)
    if cfg is not None:
        shape_keys = [k for k in echo.to_flat() if k.startswith(("model.", "ablation."))]
        diff = [k for k in shape_keys if echo.to_flat()[k] != cfg.to_flat()[k]]
        if diff:
            raise ckpt.CheckpointError(f"config disagrees with checkpoint on {', '.join(diff)}")
    else:
        cfg = echo
    meta_c = int(c.tensors.pop("meta.num_classes"))
    meta_k = int(c.tensors.pop("meta.num_cameras"))
    dtype = next(iter(c.tensors.values())).dtype
    tr = build(cfg, meta_c, meta_k, dtype=dtype)
    params = tr.params
    if set(params) != set(c.tensors):
        missing = set(params) ^ set(c.tensors)
        raise ckpt.CheckpointError(f"parameter names differ: {sorted(missing)}")
    for k, p in params.items():
        if p.shape != c.tensors[k].shape:
            raise ckpt.CheckpointError(f"{k}: checkpoint shape {c.tensors[k].shape} vs model {p.shape}")
        p.data = c.tensors[k]
    return tr, c.step


def import_weights(tr: Trainable, path) -> list[str]:
    """Copy every tensor of a container whose name and shape match a model
    parameter (e.g. externally converted backbone weights). Returns the names copied."""
    c = ckpt.load(path)
    copied = []
    for k, p in tr.model.params.items():
        src = c.tensors.get(k)
        if src is not None and src.shape == p.shape:
            p.data = src.astype(p.dtype)
            copied.append(k)
    if not copied:
        raise ckpt.CheckpointError(f"{path}: no tensor matches a model parameter")
    log.info("imported %d of %d model tensors from %s", len(copied), len(tr.model.params), path)
    return copied


# ---------------------------------------------------------------- data in memory


@dataclass
class LoadedSplit:
    samples: list[Sample]
    images: np.ndarray  # uint8 (n, H, W, 3)

    @property
    def pids(self) -> np.ndarray:
        return np.array([s.pid for s in self.samples], dtype=np.int64)

    @property
    def cams(self) -> np.ndarray:
        return np.array([s.cam for s in self.samples], dtype=np.int64)


def load_split(index: DatasetIndex, split: str) -> LoadedSplit:
    samples = index.split(split)
    imgs = np.stack([load_image(s.path) for s in samples]) if samples else np.zeros((0, 1, 1, 3), np.uint8)
    return LoadedSplit(samples, imgs)


# ---------------------------------------------------------------- inference


def extract_features(model: PartFormer, images: np.ndarray, cams, batch: int = 64,
                     use_global: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Fused L2-normalized features and last-block attention rows, no graph recorded."""
    feats, rows = [], []
    cams = np.asarray(cams)
    with T.no_grad():
        for i in range(0, len(images), batch):
            x = normalize(images[i : i + batch], dtype=model.dtype)
            fs = model.forward(x, cams[i : i + batch])
            feats.append(fuse(fs, use_global=use_global))
            rows.append(fs.attn_rows.data)
    return np.concatenate(feats), np.concatenate(rows)


def evaluate_model(tr: Trainable, query: LoadedSplit, gallery: LoadedSplit) -> EvalReport:
    use_global = tr.model.cfg.hdb_cls or not tr.model.cfg.enable_hdb
    qf, qa = extract_features(tr.model, query.images, query.cams, use_global=use_global)
    gf, ga = extract_features(tr.model, gallery.images, gallery.cams, use_global=use_global)
    rep = cmc_map(distance_matrix(qf, gf), query.pids, query.cams, gallery.pids, gallery.cams)
    rep.extra["head_offdiag_gram"] = head_diversity(np.concatenate([qa, ga]))
    return rep


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    trainable: Trainable
    history: list[dict] = field(default_factory=list)
    report: EvalReport | None = None
    best_map: float = -1.0
    steps: int = 0

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history if "loss" in h]


def train(cfg: RunConfig, index: DatasetIndex | None = None, out_dir: str | Path | None = None,
          fixed_batch: Sequence[int] | None = None, max_steps: int | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the full schedule. ``fixed_batch`` repeats one batch of train indices
    every step (optimization smoke tests); ``max_steps`` truncates the run."""
    index = scan_dataset(cfg.run.data_root) if index is None else index
    train_split = load_split(index, "train")
    if not train_split.samples:
        raise FileNotFoundError(f"no training images under {cfg.run.data_root}")
    labels = np.array([index.class_index[s.pid] for s in train_split.samples], dtype=np.int64)
    num_cameras = max(index.num_cameras, 1)
    tr = build(cfg, index.num_classes, num_cameras)
    if cfg.run.init_ckpt:
        import_weights(tr, cfg.run.init_ckpt)
    params = tr.params
    opt = SGD(params, cfg.optim.momentum, cfg.optim.weight_decay)
    sampler = PKSampler(labels, cfg.sampler.P, cfg.sampler.K, seed=cfg.run.seed)

    total_steps = cfg.optim.epochs * len(sampler)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "metrics.jsonl", "w")

    query, gallery = load_split(index, "query"), load_split(index, "gallery")

    result = TrainResult(tr)

    def emit(rec):
        result.history.append(rec)
        if log_f is not None:
            log_f.write(json.dumps(rec) + "\n")
            log_f.flush()
        if on_record is not None:
            on_record(rec)

    def run_eval(epoch, step):
        rep = evaluate_model(tr, query, gallery)
        emit({"epoch": epoch, "step": step, **{f"eval.{k}": v for k, v in rep.to_dict().items()}})
        if out is not None and rep.mAP > result.best_map:
            save_checkpoint(out / "best.ckpt", tr, step, index.num_classes, num_cameras)
        result.best_map = max(result.best_map, rep.mAP)
        return rep

    step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.optim.epochs):
            batches = sampler.batches(epoch) if fixed_batch is None else (list(fixed_batch) for _ in range(len(sampler)))
            for batch_id, batch in enumerate(batches):
                if step >= total_steps:
                    break
                lr = lr_at(step, total_steps, cfg.lr, cfg.optim.warmup_frac, cfg.optim.min_lr_ratio)
                rng = np.random.default_rng([cfg.run.seed, 17, step])
                raw = train_split.images[batch]
                if cfg.run.augment and fixed_batch is None:
                    raw = np.stack([augment(im, rng) for im in raw])
                x = normalize(raw, dtype=cfg.np_dtype)
                loss, terms, _ = tr.loss(x, train_split.cams[batch], labels[batch])
                if not np.isfinite(loss.data).all():
                    dump = {"epoch": epoch, "batch_id": batch_id, "step": step,
                            "indices": list(map(int, batch)), "terms": terms}
                    if out is not None:
                        (out / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                    raise NumericError(f"non-finite loss at epoch {epoch} batch {batch_id} (step {step}): {terms}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                emit({"epoch": epoch, "step": step, "lr": lr, "loss": float(loss.data), **terms})
                step += 1
            if step >= total_steps:
                break
            if cfg.optim.eval_every and (epoch + 1) % cfg.optim.eval_every == 0 and epoch + 1 < cfg.optim.epochs:
                run_eval(epoch, step)
        result.steps = step
        log.info("trained %d steps in %.1fs", step, time.perf_counter() - t0)
        if query.samples and gallery.samples:
            result.report = run_eval(cfg.optim.epochs - 1, step)
        if out is not None:
            save_checkpoint(out / "final.ckpt", tr, step, index.num_classes, num_cameras)
    finally:
        if log_f is not None:
            log_f.close()
    return result


# ---------------------------------------------------------------- whole-loss gradient check


def micro_batch(cfg: RunConfig, n: int = 2, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic normalized pixel batch with distinct labels and cameras."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, cfg.model.img_height, cfg.model.img_width, 3))
    labels = np.arange(n) % max(2, n)
    cams = np.arange(n) % 2
    return x, labels, cams


def gradcheck_report(cfg: RunConfig, max_coords: int = 6, step: float = 1e-5, seed: int = 0,
                     num_classes: int = 4) -> dict[str, float]:
    """Max relative error per named parameter for the full objective on a
    2-image micro-batch, double precision. Parameters are first perturbed away
    from their (partly zero) initialization so that no term is degenerate."""
    tr = build(cfg, num_classes=num_classes, num_cameras=2, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for k, p in tr.params.items():
        p.data = p.data + rng.normal(0, 0.05 if "classifier" not in k else 0.5, size=p.shape)
    x, y, cams = micro_batch(cfg, 2, seed)

    def f():
        return tr.loss(x, cams, y)[0]

    return T.grad_check_params(f, tr.params, step=step, max_coords=max_coords, seed=seed)


def extract_paths(tr: Trainable, paths: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Features for image files whose names carry id/camera; returns the failures too."""
    imgs, ids, cams, failed = [], [], [], []
    for p in paths:
        try:
            pid, cam = parse_name(Path(p).name)
            img = load_image(p)
            if img.shape[:2] != (tr.model.cfg.img_height, tr.model.cfg.img_width):
                raise ValueError(f"image size {img.shape[:2]} does not match the model")
            if cam >= tr.model.cfg.num_cameras:
                raise ValueError(f"camera {cam} unknown to the model")
        except (OSError, ValueError) as e:
            failed.append(f"{p}: {e}")
            continue
        imgs.append(img)
        ids.append(pid)
        cams.append(cam)
    c = tr.model.cfg.embed_dim
    if not imgs:
        return np.zeros((0, c), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64), failed
    use_global = tr.model.cfg.hdb_cls or not tr.model.cfg.enable_hdb
    feats, _ = extract_features(tr.model, np.stack(imgs), cams, use_global=use_global)
    return feats, np.asarray(ids, np.int64), np.asarray(cams, np.int64), failed
