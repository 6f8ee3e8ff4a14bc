"""Loss, AdamW, cosine schedule, early-stopped fitting and the three protocols.

Protocols:

* ``baseline``   - init, then fit on memes (early stop on minimum val loss).
* ``image_stilt`` - init, freeze the text adapter, fit on image-only data
  (early stop on maximum meme-val weighted F1), unfreeze, then the baseline
  meme stage.
* ``text_stilt`` - mirror image of ``image_stilt``.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .core import TRAIN, DeterministicRng
from .data import ClassCounts, class_counts, to_batch
from .errors import ConfigError, TrainingDivergedError
from .model import ModelConfig, backward, forward, init_model, predict_logits, set_freeze

BASELINE = "baseline"
IMAGE_STILT = "image_stilt"
TEXT_STILT = "text_stilt"
APPROACHES = (BASELINE, IMAGE_STILT, TEXT_STILT)

MIN_VAL_LOSS = "min_val_loss"
MAX_VAL_F1 = "max_val_weighted_f1"


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 5e-5
    lr_min: float = 1.5e-5
    max_epochs: int = 40
    batch_size: int = 32
    betas: tuple = (0.5, 0.9)
    weight_decay: float = 0.9
    eps: float = 1e-8
    amsgrad: bool = False
    dropout: float = 0.2
    patience: int = 5
    early_stop_criterion: str = MIN_VAL_LOSS

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.amsgrad:
            raise ConfigError("amsgrad is not supported")
        if self.early_stop_criterion not in (MIN_VAL_LOSS, MAX_VAL_F1):
            raise ConfigError(f"unknown early_stop_criterion {self.early_stop_criterion!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def memes(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def unimodal(cls, **overrides):
        base = cls(lr_max=1e-5, lr_min=5e-6, max_epochs=60, early_stop_criterion=MAX_VAL_F1)
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- loss ----------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    w: tuple

    @classmethod
    def from_counts(cls, counts):
        n = counts.as_array().astype(np.float64)
        total = n.sum()
        if total <= 0:
            raise ConfigError("cannot derive loss weights from an empty training set")
        return cls(tuple(float(v) for v in 1.0 - n / total))

    @classmethod
    def from_records(cls, records):
        return cls.from_counts(class_counts(records))


def weighted_ce_loss(logits, labels, weights):
    """Class-weighted cross-entropy, normalized by the summed sample weights.

    Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights.w, dtype=np.float64)[labels]
    w_sum = w.sum()
    if w_sum <= 0:
        raise ConfigError("sum of sample weights is zero; loss undefined")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(labels.size)
    loss = -(w * log_probs[rows, labels]).sum() / w_sum
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad *= (w / w_sum)[:, None]
    return float(loss), grad


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, state, lr, betas=(0.5, 0.9), weight_decay=0.9, eps=1e-8):
    """One decoupled-weight-decay Adam step over every trainable tensor."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.tensors.items():
        if not p.trainable:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps) + lr * weight_decay * p.value
    params.bump()


def cosine_lr(epoch, config):
    frac = epoch / config.max_epochs
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + math.cos(math.pi * frac))


# -- early stopping --------------------------------------------------------------

class EarlyStopping:
    """Tracks the best criterion value.

    ``update`` returns True once more than ``patience`` consecutive epochs
    have passed without a strict improvement.
    """

    def __init__(self, patience, maximize):
        self.patience = patience
        self.maximize = maximize
        self.best = None
        self.best_epoch = None
        self.bad_epochs = 0

    def improved(self, value):
        if not math.isfinite(value):
            return False
        if self.best is None:
            return True
        return value > self.best if self.maximize else value < self.best

    def update(self, epoch, value):
        if self.improved(value):
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs > self.patience


# -- fitting ---------------------------------------------------------------------

@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_value: float
    stage: str


def _minibatches(n, batch_size, perm):
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _take(inputs, idx):
    return type(inputs)(inputs.image[idx], inputs.text[idx])


def evaluate_split(params, inputs, labels, loss_weights):
    logits = predict_logits(params, inputs)
    loss, _ = weighted_ce_loss(logits, labels, loss_weights)
    preds = logits.argmax(axis=1)
    report = metrics.evaluate(labels, preds)
    return loss, report, logits


def fit(params, train, val, config, rng, stage="memes", loss_weights=None):
    """Train ``params`` in place and restore the best epoch's weights.

    ``train`` and ``val`` are ``(ModalityInput, labels)`` pairs. Loss weights
    default to the inverse-frequency weights of ``train``.
    """
    train_x, train_y = train
    val_x, val_y = val
    n = train_y.size
    if n < 2 or val_y.size == 0:
        raise ConfigError(f"stage {stage}: need >= 2 training rows and a non-empty val set")
    if loss_weights is None:
        counts = np.bincount(train_y, minlength=3)
        loss_weights = LossWeights.from_counts(ClassCounts(*(int(c) for c in counts)))

    opt = OptimizerState()
    maximize = config.early_stop_criterion == MAX_VAL_F1
    stopper = EarlyStopping(config.patience, maximize)
    best_snapshot = params.snapshot()
    history = []

    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config)
        perm = rng.permutation(n)
        loss_sum = 0.0
        grad_norms = {"image_adapter": 0.0, "text_adapter": 0.0}
        for b, idx in enumerate(_minibatches(n, config.batch_size, perm)):
            params.zero_grad()
            trace = forward(params, _take(train_x, idx), TRAIN, rng, dropout=config.dropout)
            loss, dlogits = weighted_ce_loss(trace.logits, train_y[idx], loss_weights)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"stage {stage}: non-finite loss at epoch {epoch + 1}, batch {b}, lr {lr:.3e}"
                )
            backward(params, trace, dlogits)
            for key in grad_norms:
                grad_norms[key] = max(grad_norms[key], params.grad_norm(key))
            adamw_step(params, opt, lr, config.betas, config.weight_decay, config.eps)
            loss_sum += loss * idx.size

        val_loss, report, _ = evaluate_split(params, val_x, val_y, loss_weights)
        value = report.weighted_f1 if maximize else val_loss
        stop = stopper.update(epoch + 1, value)
        if stopper.best_epoch == epoch + 1:
            best_snapshot = params.snapshot()
        history.append({
            "epoch": epoch + 1,
            "stage": stage,
            "train_loss": loss_sum / n,
            "val_loss": val_loss,
            "val_weighted_f1": report.weighted_f1,
            "lr": lr,
            "image_adapter_grad_norm": grad_norms["image_adapter"],
            "text_adapter_grad_norm": grad_norms["text_adapter"],
        })
        if stop:
            break

    params.restore(best_snapshot)
    params.zero_grad()
    return FitResult(history, stopper.best_epoch, stopper.best, stage)


# -- protocols ---------------------------------------------------------------------

@dataclass
class ProtocolSpec:
    kind: str
    memes: tuple                       # (manifest, splits)
    intermediate: tuple = None         # (manifest, splits) for the STILT kinds
    meme_config: TrainConfig = field(default_factory=TrainConfig.memes)
    intermediate_config: TrainConfig = field(default_factory=TrainConfig.unimodal)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    meme_train: list = None            # sampled subset; defaults to the full train split

    def validate(self):
        if self.kind not in APPROACHES:
            raise ConfigError(f"unknown protocol kind {self.kind!r}")
        if self.kind == BASELINE:
            return
        if self.intermediate is None:
            raise ConfigError(f"{self.kind} needs an intermediate dataset")
        records = self.intermediate[1]["train"]
        if not records:
            raise ConfigError(f"{self.kind}: intermediate dataset has no train records")
        want = "image" if self.kind == IMAGE_STILT else "text"
        bad = [r.id for r in records if r.kind != want]
        if bad:
            raise ConfigError(
                f"{self.kind}: intermediate data must be {want}-only; offending ids {bad[:3]}"
            )
        if self.intermediate[0].dimension != self.memes[0].dimension:
            raise ConfigError("intermediate and meme datasets have different dimensions")


@dataclass
class ProtocolResult:
    kind: str
    stages: list                 # FitResult per stage, in order
    test_ids: list
    test_labels: np.ndarray
    test_logits: np.ndarray
    test_predictions: np.ndarray
    report: metrics.MetricReport
    params: object = field(repr=False, default=None)

    @property
    def history(self):
        return [row for st in self.stages for row in st.history]


def run_protocol(spec):
    spec.validate()
    meme_manifest, meme_splits = spec.memes
    if spec.model_config.dim != meme_manifest.dimension:
        raise ConfigError(
            f"model dim {spec.model_config.dim} != dataset dimension {meme_manifest.dimension}"
        )
    rng = DeterministicRng(spec.seed)
    params = init_model(spec.model_config, rng.spawn(0))
    meme_train = spec.meme_train if spec.meme_train is not None else meme_splits["train"]
    val = to_batch(meme_splits["val"], meme_manifest)
    stages = []

    if spec.kind != BASELINE:
        inter_manifest, inter_splits = spec.intermediate
        set_freeze(
            params,
            freeze_image_adapter=spec.kind == TEXT_STILT,
            freeze_text_adapter=spec.kind == IMAGE_STILT,
        )
        stages.append(fit(
            params,
            to_batch(inter_splits["train"], inter_manifest),
            val,
            spec.intermediate_config,
            rng.spawn(1),
            stage="intermediate",
        ))
        set_freeze(params, False, False)

    stages.append(fit(
        params, to_batch(meme_train, meme_manifest), val, spec.meme_config, rng.spawn(2), stage="memes",
    ))

    test_records = meme_splits["test"]
    test_x, test_y = to_batch(test_records, meme_manifest)
    logits = predict_logits(params, test_x)
    preds = logits.argmax(axis=1)
    return ProtocolResult(
        kind=spec.kind,
        stages=stages,
        test_ids=[r.id for r in test_records],
        test_labels=test_y,
        test_logits=logits,
        test_predictions=preds,
        report=metrics.evaluate(test_y, preds),
        params=params,
    )
