"""End-to-end debiasing experiments.

The central objects are a small MLP encoder and a linear head. Stage 1
pretrains two encoders on unlabeled inputs with a contrastive loss: the
"biased" one adds a decorrelation penalty on its output features, which
starves it of feature diversity and glues it to the easy (spurious)
signal; the "main" one trains without the penalty. Stage 2 trains a
linear head on the frozen biased encoder, collects the samples it gets
wrong, and trains the final head on the main encoder with those samples
upweighted. A supervised variant (erm_train) applies the same penalty
directly to a classifier for the diagnostic experiments.

All randomness flows from one integer seed through named substreams, so
adding a consumer in one stage never shifts the draws of another.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .data import BiasedDataset, augment_image_batch, augment_vector_batch, split
from .losses import UpweightSpec, cross_entropy, debias_loss, stage1_loss
from .nn import (
    AdamState,
    DenseNet,
    MomentumState,
    ScheduleConfig,
    adam_step,
    apply,
    backward,
    cosine_lr,
    forward,
    make_linear_head,
    sgd_momentum_step,
)
from .spectral import effective_rank, rank_loss, rank_loss_grad, svd_values

RANK_EVAL_BATCH = 256


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG derived from (seed, name). Streams with different
    names never share draws, so stage A consuming more randomness cannot
    perturb stage B."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    )


@dataclass
class ExperimentConfig:
    """Hyperparameters for every stage. One instance describes a full run;
    stages read only the fields they use."""

    lambda_reg: float = 0.0
    lambda_up: float = 8.0
    tau: float = 0.07
    epochs: int = 40
    batch_size: int = 128
    base_lr: float = 3e-4
    warmup_epochs: int = 8
    weight_decay: float = 1e-4
    latent_dim: int = 64
    hidden_dims: tuple[int, ...] = (128, 128)
    proj_hidden: int = 128
    proj_dim: int = 64
    head_iters: int = 3000
    head_lr: float = 1e-2
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    finetune_momentum: float = 0.9
    finetune_weight_decay: float = 0.1
    seed: int = 0
    modality: str = "vector"
    dataset: str = ""

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.lambda_up < 1:
            raise ValueError(f"lambda_up must be >= 1, got {self.lambda_up}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.epochs < 1 or self.batch_size < 4:
            raise ValueError("need epochs >= 1 and batch_size >= 4")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}"
            )
        if self.weight_decay < 0 or self.finetune_weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.latent_dim < 2 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("latent_dim must be >= 2 and hidden widths >= 1")
        if self.head_iters < 1 or self.finetune_epochs < 0:
            raise ValueError("need head_iters >= 1 and finetune_epochs >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.modality not in ("vector", "cmnist-image"):
            raise ValueError(f"unknown modality {self.modality!r}")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)


@dataclass
class Model:
    """An encoder plus the linear head reading class logits off it."""

    encoder: DenseNet
    head: DenseNet

    def logits(self, X) -> np.ndarray:
        return apply(self.head, apply(self.encoder, X))

    def predict(self, X) -> np.ndarray:
        # np.argmax keeps the smallest index on ties
        return np.argmax(self.logits(X), axis=1)

    def copy(self) -> "Model":
        return Model(self.encoder.copy(), self.head.copy())


@dataclass
class ErrorSet:
    """Indices of labeled samples the biased route misclassifies, plus the
    prediction snapshot they came from."""

    indices: np.ndarray
    predictions: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).ravel()
        self.predictions = np.asarray(self.predictions, dtype=np.int64).ravel()
        if self.indices.size != np.unique(self.indices).size:
            raise ValueError("error indices must be unique")
        if self.indices.size and (
            self.indices.min() < 0 or self.indices.max() >= self.predictions.shape[0]
        ):
            raise ValueError("error index outside the labeled set")

    def __len__(self) -> int:
        return self.indices.size


@dataclass
class MetricsReport:
    """Evaluation summary, all accuracies in percent."""

    bias_conflict_acc: float
    bias_aligned_acc: float
    unbiased_acc: float
    group_table: list[dict] = field(default_factory=list)
    eff_rank: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and np.isnan(x) else x

        return {
            "bias_conflict_acc": clean(self.bias_conflict_acc),
            "bias_aligned_acc": clean(self.bias_aligned_acc),
            "unbiased_acc": clean(self.unbiased_acc),
            "group_table": self.group_table,
            "eff_rank": clean(self.eff_rank),
            "precision": clean(self.precision),
            "recall": clean(self.recall),
        }


# ------------------------------------------------------------------ helpers


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the per-epoch log rows
    completed before the failure so callers can persist them."""

    def __init__(self, message: str, log: list[dict] | None = None):
        super().__init__(message)
        self.log = log or []


def _check_input_dim(encoder: DenseNet, X: np.ndarray, where: str) -> None:
    if X.shape[1] != encoder.in_dim:
        raise ValueError(
            f"{where}: encoder expects inputs of width {encoder.in_dim}, "
            f"dataset rows have width {X.shape[1]}"
        )


def _check_finite(loss: float, stage: str, epoch: int, step: int,
                  log: list[dict] | None = None) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(
            f"{stage} diverged: loss {loss} at epoch {epoch}, step {step}", log
        )


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator,
                   drop_small: int = 1):
    """Shuffled consecutive minibatches; trailing batches smaller than
    drop_small are skipped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= drop_small:
            yield idx


def _representation_rank(encoder: DenseNet, X: np.ndarray) -> float:
    """Mean effective rank of encoder outputs over fixed-size batches.

    Uses non-overlapping batches of RANK_EVAL_BATCH rows; a trailing
    partial batch is dropped when at least one full batch exists, so the
    estimate is not skewed by a tiny remainder.
    """
    n = X.shape[0]
    ranks = []
    for start in range(0, n, RANK_EVAL_BATCH):
        chunk = X[start:start + RANK_EVAL_BATCH]
        if chunk.shape[0] < RANK_EVAL_BATCH and ranks:
            break
        ranks.append(effective_rank(svd_values(apply(encoder, chunk))))
    return float(np.mean(ranks))


def _make_schedule(cfg: ExperimentConfig, steps_per_epoch: int) -> ScheduleConfig:
    total = cfg.epochs * steps_per_epoch
    return ScheduleConfig(cfg.base_lr, cfg.warmup_epochs * steps_per_epoch, total)


def _augment_batch(X: np.ndarray, rng: np.random.Generator, cfg: ExperimentConfig,
                   feature_std: np.ndarray | None, image_shape) -> np.ndarray:
    if cfg.modality == "vector":
        return augment_vector_batch(X, rng, feature_std)
    return augment_image_batch(X, rng, image_shape)


# ----------------------------------------------------------------- erm_train


def erm_train(ds: BiasedDataset, cfg: ExperimentConfig,
              lambda_reg: float | None = None,
              target: str = "y") -> tuple[Model, list[dict]]:
    """Supervised training: cross-entropy plus the decorrelation penalty on
    the representations feeding the head.

    lambda_reg overrides cfg.lambda_reg when given; 0 is plain training.
    target selects which label the classifier learns ("y" or "b", the
    latter for the reversed diagnostic). Returns the model and a per-epoch
    log of loss, penalty share, lr and representation rank.
    """
    lam = cfg.lambda_reg if lambda_reg is None else float(lambda_reg)
    if lam < 0:
        raise ValueError(f"lambda_reg must be >= 0, got {lam}")
    if target not in ("y", "b"):
        raise ValueError(f"target must be 'y' or 'b', got {target!r}")
    labels = ds.y if target == "y" else ds.b
    classes = ds.num_classes if target == "y" else ds.num_bias_classes
    n, m = ds.inputs.shape

    encoder = DenseNet.init([m, *cfg.hidden_dims, cfg.latent_dim],
                            stream(cfg.seed, "erm-encoder-init"))
    head = make_linear_head(cfg.latent_dim, classes, stream(cfg.seed, "erm-head-init"))
    params = encoder.params() + head.params()
    state = AdamState.init(params)
    batch_rng = stream(cfg.seed, "erm-batches")
    # trailing batches of a single sample are skipped
    steps_per_epoch = n // cfg.batch_size + (1 if n % cfg.batch_size >= 2 else 0)
    if steps_per_epoch == 0:
        raise ValueError(f"dataset of {n} samples is too small to train on")
    schedule = _make_schedule(cfg, steps_per_epoch)
    probe = ds.inputs[:min(RANK_EVAL_BATCH, n)]

    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        ce_sum, reg_sum, count = 0.0, 0.0, 0
        for idx in _epoch_batches(n, cfg.batch_size, batch_rng, drop_small=2):
            rep, enc_cache = forward(encoder, ds.inputs[idx])
            logits, head_cache = forward(head, rep)
            ce, dlogits = cross_entropy(logits, labels[idx])
            head_grads, drep = backward(head, head_cache, dlogits)
            loss = ce
            if lam > 0:
                penalty = rank_loss(rep)
                loss += lam * penalty
                drep = drep + lam * rank_loss_grad(rep)
                reg_sum += penalty
            enc_grads, _ = backward(encoder, enc_cache, drep)
            _check_finite(loss, "erm_train", epoch, step, log)
            lr = cosine_lr(schedule, min(step, schedule.total_steps))
            adam_step(params, enc_grads + head_grads, state, lr,
                      weight_decay=cfg.weight_decay)
            ce_sum += ce
            count += 1
            step += 1
        log.append({
            "epoch": epoch,
            "loss": float(ce_sum / count + lam * reg_sum / count),
            "ce": float(ce_sum / count),
            "rank_term": float(reg_sum / count),
            "lr": float(cosine_lr(schedule, min(step, schedule.total_steps))),
            "eff_rank": _representation_rank(encoder, probe),
        })
    return Model(encoder, head), log


# ----------------------------------------------------------------- pretraining


def pretrain_biased(ds: BiasedDataset, cfg: ExperimentConfig
                    ) -> tuple[DenseNet, list[dict]]:
    """Stage 1 for the biased encoder: contrastive loss on projected views
    plus cfg.lambda_reg times the decorrelation penalty on raw encoder
    outputs. Labels are never read. The projection head is discarded;
    returns the encoder and a per-epoch log (loss, eff_rank, lr)."""
    n, m = ds.inputs.shape
    if n < cfg.batch_size:
        raise ValueError(
            f"dataset of {n} samples is smaller than one batch ({cfg.batch_size})"
        )
    encoder = DenseNet.init([m, *cfg.hidden_dims, cfg.latent_dim],
                            stream(cfg.seed, "pretrain-encoder-init"))
    proj = DenseNet.init([cfg.latent_dim, cfg.proj_hidden, cfg.proj_dim],
                         stream(cfg.seed, "pretrain-proj-init"))
    params = encoder.params() + proj.params()
    state = AdamState.init(params)
    batch_rng = stream(cfg.seed, "pretrain-batches")
    aug_rng = stream(cfg.seed, "pretrain-augment")

    feature_std = ds.inputs.std(axis=0) if cfg.modality == "vector" else None
    image_shape = tuple(ds.meta.get("image_shape", (3, 28, 28)))
    steps_per_epoch = n // cfg.batch_size
    schedule = _make_schedule(cfg, steps_per_epoch)
    probe = ds.inputs[:min(RANK_EVAL_BATCH, n)]

    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        loss_sum, count = 0.0, 0
        for idx in _epoch_batches(n, cfg.batch_size, batch_rng,
                                  drop_small=cfg.batch_size):
            X = ds.inputs[idx]
            v1 = _augment_batch(X, aug_rng, cfg, feature_std, image_shape)
            v2 = _augment_batch(X, aug_rng, cfg, feature_std, image_shape)
            views = np.concatenate([v1, v2], axis=0)
            rep, enc_cache = forward(encoder, views)
            emb, proj_cache = forward(proj, rep)
            loss, grad_views, grad_proj = stage1_loss(rep, emb, cfg.tau,
                                                      cfg.lambda_reg)
            _check_finite(loss, "pretrain", epoch, step, log)
            proj_grads, drep = backward(proj, proj_cache, grad_proj)
            enc_grads, _ = backward(encoder, enc_cache, drep + grad_views)
            lr = cosine_lr(schedule, min(step, schedule.total_steps))
            adam_step(params, enc_grads + proj_grads, state, lr,
                      weight_decay=cfg.weight_decay)
            loss_sum += loss
            count += 1
            step += 1
        log.append({
            "epoch": epoch,
            "loss": float(loss_sum / count),
            "eff_rank": _representation_rank(encoder, probe),
            "lr": float(cosine_lr(schedule, min(step, schedule.total_steps))),
        })
    return encoder, log


def pretrain_main(ds: BiasedDataset, cfg: ExperimentConfig
                  ) -> tuple[DenseNet, list[dict]]:
    """Stage 1 for the main encoder: the identical routine with the penalty
    switched off."""
    return pretrain_biased(ds, replace(cfg, lambda_reg=0.0))


# ------------------------------------------------------------- linear heads


def _train_head(reps: np.ndarray, labels: np.ndarray, classes: int,
                cfg: ExperimentConfig, rng_name: str,
                error_indices: np.ndarray | None = None,
                lambda_up: float = 1.0, iters: int | None = None) -> DenseNet:
    """Train a linear head on frozen representations by minibatch Adam.

    With error_indices set, those samples are upweighted by lambda_up;
    lambda_up = 1 reduces to plain cross-entropy bit for bit.
    """
    n = reps.shape[0]
    if n == 0:
        raise ValueError("cannot train a head on an empty labeled set")
    head = make_linear_head(reps.shape[1], classes, stream(cfg.seed, rng_name + "-init"))
    state = AdamState.init(head.params())
    rng = stream(cfg.seed, rng_name + "-batches")
    steps = cfg.head_iters if iters is None else iters
    err = np.zeros(n, dtype=bool)
    if error_indices is not None:
        err[error_indices] = True
    for step in range(steps):
        idx = rng.integers(0, n, min(cfg.batch_size, n))
        logits, cache = forward(head, reps[idx])
        batch_err = np.flatnonzero(err[idx])
        loss, dlogits = debias_loss(logits, labels[idx],
                                    UpweightSpec(batch_err, lambda_up))
        _check_finite(loss, "head training", 0, step)
        grads, _ = backward(head, cache, dlogits)
        adam_step(head.params(), grads, state, cfg.head_lr)
    return head


def identify_error_set(biased_encoder: DenseNet, ds: BiasedDataset,
                       cfg: ExperimentConfig) -> ErrorSet:
    """Freeze the biased encoder, fit a linear head on the labeled set, and
    collect every sample it misclassifies. Argmax ties resolve to the
    smallest class index."""
    if len(ds) == 0:
        raise ValueError("labeled set is empty")
    _check_input_dim(biased_encoder, ds.inputs, "identify_error_set")
    reps = apply(biased_encoder, ds.inputs)
    head = _train_head(reps, ds.y, ds.num_classes, cfg, "error-head")
    predictions = np.argmax(apply(head, reps), axis=1)
    indices = np.flatnonzero(predictions != ds.y)
    return ErrorSet(indices, predictions)


def debiased_linear_eval(main_encoder: DenseNet, ds: BiasedDataset,
                         error_set: ErrorSet | None, lambda_up: float,
                         cfg: ExperimentConfig,
                         test: BiasedDataset | None = None
                         ) -> tuple[Model, MetricsReport]:
    """Train the final linear head on the frozen main encoder with the
    error-set samples upweighted. The encoder is never touched. Metrics are
    computed on `test` when given, else on the labeled set itself."""
    if error_set is not None and len(ds) and error_set.predictions.shape[0] != len(ds):
        raise ValueError(
            f"error set built for {error_set.predictions.shape[0]} samples, "
            f"labeled set has {len(ds)}"
        )
    _check_input_dim(main_encoder, ds.inputs, "debiased_linear_eval")
    reps = apply(main_encoder, ds.inputs)
    indices = error_set.indices if error_set is not None else None
    head = _train_head(reps, ds.y, ds.num_classes, cfg, "debias-head",
                       error_indices=indices, lambda_up=lambda_up)
    model = Model(main_encoder, head)
    report = evaluate(model, test if test is not None else ds)
    if error_set is not None:
        report.precision, report.recall = error_set_quality(error_set, ds)
    return model, report


def finetune_semisup(model: Model, ds: BiasedDataset,
                     error_set: ErrorSet | None, lambda_up: float,
                     cfg: ExperimentConfig,
                     test: BiasedDataset | None = None
                     ) -> tuple[Model, MetricsReport]:
    """Update the whole model (encoder and head) on the labeled set with the
    upweighted loss, using heavy-ball SGD and strong weight decay. The
    input model is left untouched; a finetuned copy is returned."""
    tuned = model.copy()
    n = len(ds)
    if n == 0:
        raise ValueError("labeled set is empty")
    err = np.zeros(n, dtype=bool)
    if error_set is not None:
        if error_set.predictions.shape[0] != n:
            raise ValueError(
                f"error set built for {error_set.predictions.shape[0]} samples, "
                f"labeled set has {n}"
            )
        err[error_set.indices] = True
    params = tuned.encoder.params() + tuned.head.params()
    state = MomentumState.init(params)
    batch_rng = stream(cfg.seed, "finetune-batches")
    step = 0
    for epoch in range(cfg.finetune_epochs):
        for idx in _epoch_batches(n, cfg.batch_size, batch_rng, drop_small=2):
            rep, enc_cache = forward(tuned.encoder, ds.inputs[idx])
            logits, head_cache = forward(tuned.head, rep)
            batch_err = np.flatnonzero(err[idx])
            loss, dlogits = debias_loss(logits, ds.y[idx],
                                        UpweightSpec(batch_err, lambda_up))
            _check_finite(loss, "finetune", epoch, step)
            head_grads, drep = backward(tuned.head, head_cache, dlogits)
            enc_grads, _ = backward(tuned.encoder, enc_cache, drep)
            sgd_momentum_step(params, enc_grads + head_grads, state,
                              cfg.finetune_lr, momentum=cfg.finetune_momentum,
                              weight_decay=cfg.finetune_weight_decay)
            step += 1
    report = evaluate(tuned, test if test is not None else ds)
    if error_set is not None:
        report.precision, report.recall = error_set_quality(error_set, ds)
    return tuned, report


# ------------------------------------------------------------------ metrics


def evaluate(model: Model, test: BiasedDataset) -> MetricsReport:
    """Accuracies over conflicting, aligned and all samples, a per-(y, b)
    group breakdown, and the effective rank of the representations."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    pred = model.predict(test.inputs)
    correct = pred == test.y

    def acc(mask) -> float:
        return 100.0 * float(correct[mask].mean()) if mask.any() else float("nan")

    table = []
    for yv in range(test.num_classes):
        for bv in range(test.num_bias_classes):
            mask = (test.y == yv) & (test.b == bv)
            cnt = int(mask.sum())
            if cnt == 0:
                continue  # absent groups are omitted, not reported as zero
            table.append({
                "y": yv,
                "b": bv,
                "n": cnt,
                "acc": 100.0 * float(correct[mask].mean()),
            })
    return MetricsReport(
        bias_conflict_acc=acc(~test.aligned),
        bias_aligned_acc=acc(test.aligned),
        unbiased_acc=100.0 * float(correct.mean()),
        group_table=table,
        eff_rank=_representation_rank(model.encoder, test.inputs),
    )


def error_set_quality(error_set: ErrorSet, ds: BiasedDataset
                      ) -> tuple[float, float]:
    """Precision and recall (percent) of the error set against the
    ground-truth conflicting samples. An empty error set has undefined
    precision (NaN) and zero recall."""
    conflicting = np.flatnonzero(~ds.aligned)
    hits = np.intersect1d(error_set.indices, conflicting).size
    precision = 100.0 * hits / len(error_set) if len(error_set) else float("nan")
    recall = 100.0 * hits / conflicting.size if conflicting.size else float("nan")
    return precision, recall


def bias_metric(encoder: DenseNet, ds: BiasedDataset,
                cfg: ExperimentConfig) -> float:
    """How biased a frozen representation is: the accuracy of a linear probe
    predicting the bias label divided by that of a probe predicting the
    target label, both on a held-out half of ds."""
    train, test = split(ds, (0.5, 0.5),
                        seed=int(stream(cfg.seed, "probe-split").integers(2**31)))
    reps_tr = apply(encoder, train.inputs)
    reps_te = apply(encoder, test.inputs)
    head_y = _train_head(reps_tr, train.y, train.num_classes, cfg, "probe-y")
    head_b = _train_head(reps_tr, train.b, train.num_bias_classes, cfg, "probe-b")
    acc_y = float(np.mean(np.argmax(apply(head_y, reps_te), axis=1) == test.y))
    acc_b = float(np.mean(np.argmax(apply(head_b, reps_te), axis=1) == test.b))
    if acc_y == 0.0:
        raise ValueError("target probe accuracy is zero; ratio undefined")
    return acc_b / acc_y


def rank_trajectory(bias_ratios, make_dataset, make_testset,
                    cfg: ExperimentConfig, target: str = "y") -> list[dict]:
    """Plain supervised training across a family of bias ratios.

    make_dataset(r) must return the training set for ratio r and
    make_testset() the unbiased evaluation set. Records the representation
    rank and unbiased accuracy per ratio.
    """
    test = make_testset()
    labels = test.y if target == "y" else test.b
    rows = []
    for r in bias_ratios:
        ds = make_dataset(float(r))
        model, _ = erm_train(ds, cfg, lambda_reg=0.0, target=target)
        acc = 100.0 * float(np.mean(model.predict(test.inputs) == labels))
        rows.append({
            "r": float(r),
            "eff_rank": _representation_rank(model.encoder, test.inputs),
            "unbiased_acc": acc,
        })
    return rows
