"""
Training loops, LR schedule, early stopping and per-fold evaluation.

Run directory layout::

    <runs_root>/<name>/fold-<k>/config.snapshot
                               /history.csv
                               /epoch-<n>.ckpt
                               /best.ckpt
                               /eval.csv
                               /predictions.csv
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from . import constants as C
from .checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from .config import DEFAULTS, format_config, section
from .dataio import FundusDataset, Manifest, fold_partition, kfold_split, write_folds
from .errors import InvalidConfigError, InvalidInputError, InvalidStateError, UndefinedMetricError
from .fagnet import FagNetConfig, build_fagnet
from .fgcnet import FgcNetConfig, build_fgcnet, make_generator
from .losses import (ClfParams, LatentMoments, alf_loss, discriminator_l2, gender_loss,
                     kl_divergence, reconstruction_l1, tlf_fgc_loss)
from .metrics import (EvalBatch, classification_report, confusion_counts, cumulative_scores,
                      mcs_table, regression_metrics)

logger = logging.getLogger(__name__)

PREDICTIONS_FILE = "predictions.csv"
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_loss"]
FGC_TERM_COLUMNS = ["recon_l1", "disc_l2", "kl"]


@dataclass(frozen=True)
class TrainConfig:
    name: str = "run"
    initial_lr: float = C.INITIAL_LR
    beta1: float = C.ADAM_BETA1
    beta2: float = C.ADAM_BETA2
    lr_decay_factor: float = C.LR_DECAY_FACTOR
    lr_decay_every: int = C.LR_DECAY_EVERY
    batch_size: int = C.BATCH_SIZE
    max_epochs: int = C.MAX_EPOCHS
    early_stop_patience: int = C.EARLY_STOP_PATIENCE
    weight_decay: float = C.WEIGHT_DECAY
    folds: int = C.NUM_FOLDS
    val_fraction: float = C.VAL_FRACTION
    checkpoint_every: int = C.CHECKPOINT_EVERY
    seed: int = C.DEFAULT_SEED
    device: str = "cpu"

    def __post_init__(self):
        for name in ("initial_lr", "lr_decay_factor"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidConfigError("Adam betas must lie in [0, 1)")
        if self.lr_decay_every < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfigError("lr_decay_every, batch_size and max_epochs must be at least 1")
        if self.early_stop_patience < 0 or self.weight_decay < 0 or self.checkpoint_every < 0:
            raise InvalidConfigError("patience, weight_decay and checkpoint_every must be nonnegative")
        if self.folds < 2:
            raise InvalidConfigError(f"folds must be at least 2, got {self.folds}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @classmethod
    def from_config(cls, cfg):
        values = section(cfg, "train")
        values.pop("model", None)
        return cls(**values)


@dataclass
class FoldEvaluation:
    """Scores of one checkpoint on one fold's test images."""
    kind: str
    head: str
    fold_id: int
    samples: int
    regression: object = None
    cumulative: dict = field(default_factory=dict)
    mcs: dict = field(default_factory=dict)
    counts: object = None
    gender: object = None
    recon_l1: float = math.nan

    def row(self):
        """Flat table row; column names follow the CV tables."""
        row = {"fold": self.fold_id, "samples": self.samples}
        if self.kind == "fgcnet":
            row["recon_L1"] = self.recon_l1
        if self.regression is not None:
            row.update({"MAE": self.regression.mae, "MSE": self.regression.mse, "R2": self.regression.r_squared})
            row.update({f"CS_{j}": v for j, v in self.cumulative.items()})
            row.update({f"MCS-{J}": v for J, v in self.mcs.items()})
        if self.counts is not None:
            row.update({"TP": self.counts.tp, "FP": self.counts.fp, "TN": self.counts.tn, "FN": self.counts.fn})
        if self.gender is not None:
            row.update({
                "Specificity": self.gender.specificity, "Sensitivity": self.gender.sensitivity,
                "PPV": self.gender.ppv, "NPV": self.gender.npv,
                "F1": self.gender.f1, "Accuracy": self.gender.accuracy_percent,
            })
        return row


@dataclass
class RunResult:
    history: list
    best_checkpoint: Path
    evaluation: FoldEvaluation = None
    seconds: float = 0.0
    fold_dir: Path = None
    stopped_early: bool = False

    def column(self, name):
        return [row[name] for row in self.history]


def lr_at_epoch(config, epoch):
    """initial_lr x decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise InvalidInputError(f"epoch must be nonnegative, got {epoch}")
    return config.initial_lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def early_stop_check(history, patience):
    """
    True once the monitored loss has gone ``patience`` epochs without a new minimum.

    An epoch improves only if it is strictly below every earlier value.
    """
    if len(history) == 0:
        raise InvalidInputError("loss history is empty")
    best = int(np.argmin(history))
    stale = len(history) - 1 - best
    return stale > 0 and stale >= patience


def fold_dir_for(train_config, fold_id, runs_root=None):
    return Path(runs_root or C.RUNS_DIR) / train_config.name / f"fold-{fold_id}"


def run_config(kind, model_config, train_config, loss_params=None):
    """Full flat config (every DEFAULTS key) describing a run, for config.snapshot."""
    cfg = dict(DEFAULTS)
    cfg["train.model"] = kind
    cfg.update({f"train.{k}": v for k, v in asdict(train_config).items()})
    for key, value in model_config.to_dict().items():
        if key == "kl_variant":
            cfg["loss.kl_variant"] = value
        else:
            cfg[f"{kind}.{key}"] = value
    if loss_params is not None:
        cfg.update({"loss.psi": loss_params.psi, "loss.varphi": loss_params.varphi, "loss.J": loss_params.J})
    return cfg


def _splits(manifest):
    by_split = {name: [] for name in C.SPLITS}
    for i, record in enumerate(manifest):
        by_split[record.split].append(i)
    return {name: manifest.subset(idx) for name, idx in by_split.items()}


def _loader(manifest, image_size, batch_size, cache, seed=None):
    dataset = FundusDataset(manifest, image_size, cache=cache)
    if seed is None:
        return DataLoader(dataset, batch_size=batch_size, shuffle=False)
    return DataLoader(dataset, batch_size=batch_size, shuffle=True, generator=make_generator(seed))


def _adam(params, tc):
    return torch.optim.Adam(params, lr=tc.initial_lr, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)


def _scheduler(optimizer, tc):
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda epoch: lr_at_epoch(tc, epoch) / tc.initial_lr)


def validation_loss(step, loader):
    """Sample-weighted mean of ``step(batch)`` over ``loader``; NaN when it is empty."""
    step.reset()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in loader:
            loss, _ = step(batch)
            n = batch[0].shape[0]
            total += float(loss) * n
            count += n
    return total / count if count else math.nan


def _prepare(manifest, tc, fold_id, runs_root):
    parts = _splits(manifest)
    if len(parts["train"]) == 0:
        raise InvalidInputError(f"fold {fold_id}: training split is empty")
    if len(parts["val"]) == 0:
        logger.warning(f"fold {fold_id}: no validation split, monitoring the training loss")
    fold_dir = fold_dir_for(tc, fold_id, runs_root)
    fold_dir.mkdir(parents=True, exist_ok=True)
    return parts, fold_dir


def min_train_batch(input_size):
    """Smallest batch FGC-Net can train on: its bottleneck batch-norm needs two values per channel."""
    return 2 if input_size // C.SIZE_DIVISOR == 1 else 1


def _fit(name, tc, parts, fold_dir, train_step, val_step, image_size, cache, save, extra_columns=(),
         min_batch=1):
    """
    Shared epoch loop.

    ``train_step(batch)`` runs forward, backward and the optimizer steps and
    returns ``(loss, terms)``; ``val_step`` is the no-grad counterpart.
    ``save(path, extra)`` writes a checkpoint. A trailing batch smaller than
    ``min_batch`` is skipped.
    """
    loader = _loader(parts["train"], image_size, tc.batch_size, cache, seed=tc.seed)
    val_loader = _loader(parts["val"], image_size, tc.batch_size, cache) if len(parts["val"]) else None
    best_path = fold_dir / C.BEST_CHECKPOINT_FILE
    history, monitored = [], []
    stopped_early = False
    singleton_warned = False
    for epoch in range(tc.max_epochs):
        lr = train_step.optimizers[0].param_groups[0]["lr"]
        total, count = 0.0, 0
        term_sums = {c: 0.0 for c in extra_columns}
        for batch in loader:
            n = batch[0].shape[0]
            if n < min_batch:
                if not singleton_warned:
                    logger.warning(f"{name}: dropping a trailing batch of {n} (batch-norm needs {min_batch})")
                    singleton_warned = True
                continue
            loss, terms = train_step(batch)
            total += float(loss) * n
            count += n
            for c in extra_columns:
                term_sums[c] += float(terms[c]) * n
        train_loss = total / count if count else math.nan
        if not math.isfinite(train_loss):
            raise InvalidStateError(f"{name}: training loss is not finite at epoch {epoch + 1}")
        val_loss = validation_loss(val_step, val_loader) if val_loader is not None else math.nan
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": train_loss, "val_loss": val_loss}
        row.update({c: term_sums[c] / count for c in extra_columns})
        history.append(row)
        logger.info(f"{name} epoch {epoch + 1}: lr={lr:.3g} train_loss={train_loss:.6f} val_loss={val_loss:.6f}")

        monitored.append(val_loss if val_loader is not None else train_loss)
        if int(np.argmin(monitored)) == len(monitored) - 1:
            save(best_path, {"epoch": epoch + 1, "monitored_loss": float(monitored[-1])})
        if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            save(fold_dir / f"epoch-{epoch + 1}.ckpt", {"epoch": epoch + 1})
        for scheduler in train_step.schedulers:
            scheduler.step()
        if early_stop_check(monitored, tc.early_stop_patience):
            logger.info(f"{name}: early stopping after epoch {epoch + 1}")
            stopped_early = True
            break

    pd.DataFrame(history, columns=HISTORY_COLUMNS + list(extra_columns)).to_csv(
        fold_dir / C.HISTORY_FILE, index=False)
    logger.info(f"Wrote {fold_dir / C.HISTORY_FILE}")
    return history, best_path, stopped_early


class _Step:
    """Callable wrapper that carries the optimizers and schedulers of a run."""

    def __init__(self, fn, optimizers=(), schedulers=(), reset=None):
        self.fn = fn
        self.optimizers = list(optimizers)
        self.schedulers = list(schedulers)
        self._reset = reset

    def reset(self):
        if self._reset is not None:
            self._reset()

    def __call__(self, batch):
        return self.fn(batch)


def _finish(fold_id, parts, fold_dir, best_path, cache):
    if not len(parts["test"]):
        return None
    return evaluate_fold(best_path, parts["test"], fold_id, out_dir=fold_dir, cache=cache)


def train_fagnet(model_config, train_config, manifest, fold_id, loss_params=None,
                 runs_root=None, cache_images=True):
    """
    Trains FAG-Net on the ``train`` records of ``manifest``.

    The age head minimizes ALF; the gender head minimizes cross-entropy.
    Validation loss (on ``val`` records) drives best-checkpoint selection and
    early stopping. When ``test`` records are present the best checkpoint is
    evaluated on them and ``eval.csv`` is written.

    Raises:
        InvalidInputError: The training split is empty.
    """
    tc = train_config
    loss_params = loss_params or ClfParams()
    started = time.perf_counter()
    parts, fold_dir = _prepare(manifest, tc, fold_id, runs_root)
    (fold_dir / C.CONFIG_SNAPSHOT_FILE).write_text(
        format_config(run_config("fagnet", model_config, tc, loss_params)), encoding="utf-8")

    device = torch.device(tc.device)
    torch.manual_seed(tc.seed)
    model = build_fagnet(model_config).to(device)
    optimizer = _adam(model.parameters(), tc)

    def objective(batch):
        images, ages, genders = (t.to(device) for t in batch)
        if model_config.head == "age":
            return alf_loss(ages, model(images), loss_params), {}
        return gender_loss(model(images, return_logits=True), genders), {}

    def train_step(batch):
        model.train()
        optimizer.zero_grad()
        loss, terms = objective(batch)
        loss.backward()
        optimizer.step()
        return loss.detach(), terms

    def val_step(batch):
        model.eval()
        return objective(batch)

    def save(path, extra):
        save_checkpoint(path, "fagnet", model_config, {"model": model}, extra)

    history, best_path, stopped = _fit(
        f"fagnet/{model_config.head} fold {fold_id}", tc, parts, fold_dir,
        _Step(train_step, [optimizer], [_scheduler(optimizer, tc)]), _Step(val_step),
        model_config.input_size, cache_images, save)
    evaluation = _finish(fold_id, parts, fold_dir, best_path, cache_images)
    return RunResult(history=history, best_checkpoint=best_path, evaluation=evaluation,
                     seconds=time.perf_counter() - started, fold_dir=fold_dir, stopped_early=stopped)


def train_fgcnet(model_config, train_config, manifest, fold_id, runs_root=None, cache_images=True):
    """
    Trains the FGC-Net generator and its age-regressing discriminator jointly.

    Each step back-propagates TLF-FGC once: the generator receives gradients
    from all three terms and the discriminator, which appears only in the L2
    term, from that term alone. Both parameter sets have their own Adam
    optimizer on the same schedule.
    """
    tc = train_config
    started = time.perf_counter()
    min_batch = min_train_batch(model_config.input_size)
    if tc.batch_size < min_batch:
        raise InvalidConfigError(f"fgcnet at input size {model_config.input_size} needs "
                                 f"train.batch_size >= {min_batch}, got {tc.batch_size}")
    parts, fold_dir = _prepare(manifest, tc, fold_id, runs_root)
    if len(parts["train"]) < min_batch:
        raise InvalidInputError(f"fold {fold_id}: fgcnet needs at least {min_batch} training images")
    (fold_dir / C.CONFIG_SNAPSHOT_FILE).write_text(
        format_config(run_config("fgcnet", model_config, tc)), encoding="utf-8")
    logger.debug(f"KL variant {model_config.kl_variant}, epsilon variant {model_config.eps_variant}, "
                 f"skips {'summed' if model_config.use_skips else 'disabled'}")

    device = torch.device(tc.device)
    torch.manual_seed(tc.seed)
    generator, discriminator = build_fgcnet(model_config)
    generator.to(device)
    discriminator.to(device)
    opt_g = _adam(generator.parameters(), tc)
    opt_d = _adam(discriminator.parameters(), tc)
    noise = make_generator(tc.seed + 1)

    def objective(batch, rng):
        images, ages, _ = (t.to(device) for t in batch)
        generated, state = generator(images, ages, generator=rng)
        recon = reconstruction_l1(generated, images)
        d_l2 = discriminator_l2(discriminator(images), discriminator(generated), ages)
        kl = kl_divergence(LatentMoments(state.mu_l, state.sigma_m), model_config.kl_variant)
        terms = {"recon_l1": recon.detach(), "disc_l2": d_l2.detach(), "kl": kl.detach()}
        return tlf_fgc_loss(recon, d_l2, kl), terms

    def train_step(batch):
        generator.train()
        discriminator.train()
        opt_g.zero_grad()
        opt_d.zero_grad()
        loss, terms = objective(batch, noise)
        loss.backward()
        opt_g.step()
        opt_d.step()
        return loss.detach(), terms

    val_noise = [None]

    def reset_val_noise():
        val_noise[0] = make_generator(tc.seed + 2)

    def val_step(batch):
        generator.eval()
        discriminator.eval()
        return objective(batch, val_noise[0])

    def save(path, extra):
        save_checkpoint(path, "fgcnet", model_config,
                        {"generator": generator, "discriminator": discriminator}, extra)

    history, best_path, stopped = _fit(
        f"fgcnet fold {fold_id}", tc, parts, fold_dir,
        _Step(train_step, [opt_g, opt_d], [_scheduler(opt_g, tc), _scheduler(opt_d, tc)]),
        _Step(val_step, reset=reset_val_noise),
        model_config.input_size, cache_images, save, extra_columns=FGC_TERM_COLUMNS, min_batch=min_batch)
    evaluation = _finish(fold_id, parts, fold_dir, best_path, cache_images)
    return RunResult(history=history, best_checkpoint=best_path, evaluation=evaluation,
                     seconds=time.perf_counter() - started, fold_dir=fold_dir, stopped_early=stopped)


def _test_records(manifest, fold_id):
    test = [i for i, r in enumerate(manifest) if r.split == "test"]
    if test:
        return manifest.subset(test)
    if len(manifest) == 0:
        raise InvalidInputError(f"fold {fold_id}: nothing to evaluate")
    logger.info(f"fold {fold_id}: manifest has no test split, evaluating all {len(manifest)} records")
    return manifest


def _write_predictions(path, kind, ids, actual, predicted):
    columns = C.AGE_PREDICTION_COLUMNS if kind == "age" else C.GENDER_PREDICTION_COLUMNS
    pd.DataFrame(dict(zip(columns, (ids, actual, predicted))), columns=columns).to_csv(path, index=False)


def evaluate_fold(checkpoint, manifest, fold_id, out_dir=None, cache=True, seed=C.DEFAULT_SEED):
    """
    Eval-mode inference of a checkpoint on a fold's test records.

    Args:
        checkpoint (str | Path | Checkpoint): Checkpoint file or loaded checkpoint.
        manifest (Manifest): Records with ``split == "test"`` are scored; a
            manifest without test records is scored whole.
        fold_id (int): Reported fold number.
        out_dir (Path | None): When given, ``eval.csv`` and ``predictions.csv``
            are written there.
        seed (int): Sampling seed for FGC-Net reconstructions.

    Returns:
        FoldEvaluation

    Raises:
        CompatibilityError: The checkpoint does not fit its stored config.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    test = _test_records(manifest, fold_id)
    size = ckpt.config.input_size
    loader = _loader(test, size, C.BATCH_SIZE, cache)
    ids = [r.image_path for r in test]

    if ckpt.kind == "fagnet":
        model = ckpt.models["model"]
        head = ckpt.config.head
        outputs = []
        with torch.no_grad():
            for images, _, _ in loader:
                outputs.append(model.predict(images).cpu())
        outputs = torch.cat(outputs)
        evaluation = FoldEvaluation(kind="fagnet", head=head, fold_id=fold_id, samples=len(test))
        if head == "age":
            batch = EvalBatch(test.ages, outputs.double().numpy())
            evaluation.regression = regression_metrics(batch)
            evaluation.cumulative = cumulative_scores(batch)
            evaluation.mcs = mcs_table(batch)
            prediction = (batch.actual, batch.predicted)
        else:
            predicted = [C.GENDERS[i] for i in outputs.argmax(dim=1).tolist()]
            actual = [r.gender for r in test]
            evaluation.counts = confusion_counts(actual, predicted)
            try:
                evaluation.gender = classification_report(evaluation.counts)
            except UndefinedMetricError as e:
                logger.warning(f"fold {fold_id}: gender report undefined ({e})")
            prediction = (actual, predicted)
    else:
        generator = ckpt.models["generator"]
        discriminator = ckpt.models["discriminator"]
        rng = make_generator(seed)
        recon_total, disc_ages = 0.0, []
        with torch.no_grad():
            for images, ages, _ in loader:
                generated, _ = generator(images, ages, generator=rng)
                recon_total += float(reconstruction_l1(generated, images)) * images.shape[0]
                disc_ages.append(discriminator(images).cpu())
        batch = EvalBatch(test.ages, torch.cat(disc_ages).double().numpy())
        evaluation = FoldEvaluation(kind="fgcnet", head="age", fold_id=fold_id, samples=len(test),
                                    regression=regression_metrics(batch), recon_l1=recon_total / len(test))
        evaluation.cumulative = cumulative_scores(batch)
        evaluation.mcs = mcs_table(batch)
        prediction = (batch.actual, batch.predicted)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([evaluation.row()]).to_csv(out_dir / C.EVAL_FILE, index=False)
        _write_predictions(out_dir / PREDICTIONS_FILE, evaluation.head, ids, *prediction)
        logger.info(f"Wrote {out_dir / C.EVAL_FILE}")
    return evaluation


def run_cross_validation(cfg, manifest, runs_root=None, fold_ids=None):
    """
    Trains and evaluates every requested fold of a subject-grouped k-fold split.

    Args:
        cfg (dict): Effective run configuration (see config.load_config).
        manifest (Manifest): All labelled records.
        fold_ids (list[int] | None): Subset of folds to run; all when None.

    Returns:
        list[RunResult]: One per fold, in fold order.
    """
    tc = TrainConfig.from_config(cfg)
    kind = cfg["train.model"]
    if kind not in ("fagnet", "fgcnet"):
        raise InvalidConfigError(f"train.model must be fagnet or fgcnet, got {kind!r}")
    folds = kfold_split(manifest, tc.folds, tc.seed)
    run_root = Path(runs_root or C.RUNS_DIR) / tc.name
    run_root.mkdir(parents=True, exist_ok=True)
    write_folds(manifest, folds, run_root / "folds.csv")

    results = []
    for fold in folds:
        if fold_ids and fold.fold_id not in fold_ids:
            continue
        train, val, test = fold_partition(manifest, folds, fold.fold_id, tc.val_fraction, tc.seed)
        fold_manifest = Manifest(train.records + val.records + test.records, train.provenance)
        logger.info(f"Fold {fold.fold_id}/{len(folds)}: {len(train)} train, {len(val)} val, {len(test)} test images")
        if kind == "fagnet":
            result = train_fagnet(FagNetConfig.from_config(cfg), tc, fold_manifest, fold.fold_id,
                                  loss_params=ClfParams(varphi=cfg["loss.varphi"], J=cfg["loss.J"], psi=cfg["loss.psi"]),
                                  runs_root=runs_root, cache_images=cfg["data.cache_images"])
        else:
            result = train_fgcnet(FgcNetConfig.from_config(cfg), tc, fold_manifest, fold.fold_id,
                                  runs_root=runs_root, cache_images=cfg["data.cache_images"])
        results.append(result)
    return results
