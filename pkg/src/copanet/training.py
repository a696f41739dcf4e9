"""SGD training loop: momentum, weight decay, staged LR schedule, He init,
checkpointing and evaluation.

The recipe: SGD with momentum 0.9 and weight decay 1e-4, learning rate 0.1
divided by 10 at fixed fractions of the epoch budget, He-normal init, and
test error taken from the final epoch (no early stopping). Weight decay
applies to conv and linear weights only, never to BN gamma/beta or biases.
"""

import gc
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import engine, models
from .errors import ConfigurationError, DataError, UsageError

_DTYPE_TAGS = {1: np.float32, 2: np.float64, 3: np.int64, 4: np.uint8}
_TAG_FOR = {np.dtype(v): k for k, v in _DTYPE_TAGS.items()}

CHECKPOINT_MAGIC = b"COPACKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainPlan:
    total_epochs: int = 300
    base_lr: float = 0.1
    lr_drop_fractions: tuple = (0.6, 0.8)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    precision: int = 32
    augment: bool = False

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(
                f"batch_size must be >= 2 (batch norm needs batch statistics), got {self.batch_size}")
        fr = self.lr_drop_fractions
        if any(not 0.0 < f < 1.0 for f in fr) or list(fr) != sorted(set(fr)):
            raise ConfigurationError(
                f"lr_drop_fractions must be strictly increasing in (0, 1), got {fr}")
        if self.precision not in (32, 64):
            raise ConfigurationError(f"precision must be 32 or 64, got {self.precision}")


def plan_digest(plan):
    text = json.dumps(plan.__dict__, sort_keys=True, default=list)
    return hashlib.sha256(text.encode()).hexdigest()


def lr_at(epoch, plan):
    """Learning rate for a 0-based epoch under the staged drop schedule."""
    if not 0 <= epoch < plan.total_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {plan.total_epochs})")
    # 1e-9 nudge so decimal fractions floor to the intended epoch boundary
    drops = sum(1 for f in plan.lr_drop_fractions
                if epoch >= int(f * plan.total_epochs + 1e-9))
    return plan.base_lr * plan.lr_drop_factor ** drops


def he_init(module, rng):
    """He-normal initialization over a parameter registry.

    Conv and linear weights draw from Normal(0, sqrt(2 / fan_in)); BN gamma
    is 1, beta 0, biases 0. ``module`` is anything with a parameters() dict.
    """
    for name, p in module.parameters().items():
        if name.endswith(".w"):
            shape = p.data.shape
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            p.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(p.data.dtype)
        elif name.endswith(".gamma"):
            p.data = np.ones_like(p.data)
        else:  # beta, bias
            p.data = np.zeros_like(p.data)


def decays(name):
    """Weight decay applies to conv/linear weights only."""
    return name.endswith(".w")


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """One momentum-SGD update: v <- momentum*v + grad + wd*param;
    param <- param - lr*v. Mutates params and velocity in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ConfigurationError(f"{name}: grad shape {g.shape} vs param {p.data.shape}")
        wd = weight_decay if decays(name) else 0.0
        v = velocity[name]
        v *= momentum
        v += g
        if wd:
            v += wd * p.data
        p.data -= lr * v


class SGD:
    """Momentum SGD over a model's parameter registry."""

    def __init__(self, model, plan):
        self.model = model
        self.plan = plan
        self.velocity = {name: np.zeros_like(p.data)
                         for name, p in model.parameters().items()}

    def step(self, lr):
        params = self.model.parameters()
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise UsageError(f"{name} has no gradient; run backward first")
            grads[name] = p.grad
        sgd_step(params, grads, self.velocity, lr, self.plan.momentum, self.plan.weight_decay)


def evaluate(model, dataset, normalizer, batch_size=250):
    """Eval-mode loss and error rate over a dataset."""
    total_loss = 0.0
    wrong = 0
    n = len(dataset)
    with engine.no_grad():
        for idx in data_mod.iterate_batches(n, batch_size):
            x = engine.Tensor(normalizer.normalize(dataset.images[idx]))
            labels = dataset.labels[idx]
            logits = model.forward(x, training=False)
            loss = engine.softmax_cross_entropy(logits, labels)
            total_loss += float(loss.data) * len(idx)
            wrong += int((logits.data.argmax(axis=1) != labels).sum())
    return total_loss / n, wrong / n


def train(model, train_set, plan, normalizer=None, test_set=None, log_path=None):
    """Train for plan.total_epochs and return per-epoch log rows.

    Each row is (epoch, lr, train_loss, train_error, test_error); test_error
    is None when no test set is supplied. A non-finite loss aborts with a
    NumericError naming the first offending layer.
    """
    if normalizer is None:
        normalizer = data_mod.Normalizer.fit(train_set.images)
    rng = np.random.default_rng(plan.seed)
    opt = SGD(model, plan)
    n = len(train_set)
    normalized = normalizer.normalize(train_set.images)
    log = []

    # the tape breaks its own reference cycles in backward, so the cycle
    # collector only adds scan overhead inside this hot loop
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        _run_epochs(model, plan, normalized, train_set.labels, test_set,
                    normalizer, rng, opt, n, log)
    finally:
        if gc_was_enabled:
            gc.enable()

    if log_path is not None:
        write_log_csv(log, log_path)
    return log


def _run_epochs(model, plan, normalized, labels_all, test_set, normalizer, rng, opt, n, log):
    for epoch in range(plan.total_epochs):
        lr = lr_at(epoch, plan)
        epoch_loss = 0.0
        wrong = 0
        for idx in data_mod.iterate_batches(n, plan.batch_size, rng=rng):
            images = normalized[idx]
            if plan.augment:
                images = data_mod.augment_batch(images, rng)
            x = engine.Tensor(images)
            labels = labels_all[idx]

            logits = model.forward(x, training=True, rng=rng)
            loss = engine.softmax_cross_entropy(logits, labels)
            engine.check_finite(loss, context=f"epoch {epoch}")
            model.zero_grad()
            loss.backward()
            opt.step(lr)

            epoch_loss += float(loss.data) * len(idx)
            wrong += int((logits.data.argmax(axis=1) != labels).sum())

        test_err = None
        if test_set is not None:
            _, test_err = evaluate(model, test_set, normalizer)
        log.append((epoch, lr, epoch_loss / n, wrong / n, test_err))


def write_log_csv(log, path):
    with open(path, "w") as fh:
        fh.write("epoch,lr,train_loss,train_error,test_error\n")
        for epoch, lr, tl, te, test_err in log:
            last = "" if test_err is None else repr(float(test_err))
            fh.write(f"{epoch},{lr!r},{tl!r},{te!r},{last}\n")


# ---------------------------------------------------------------------------
# checkpoints

def _write_record(fh, name, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise UsageError(f"cannot checkpoint dtype {arr.dtype} for {name!r}")
    encoded = name.encode()
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_record(fh):
    name_len, = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode()
    tag, ndim = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    dt = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
    raw = fh.read(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
    arr = np.frombuffer(raw, dtype=dt).reshape(shape)
    return name, arr.astype(_DTYPE_TAGS[tag])


def save_checkpoint(path, model, epoch=0, rng=None, plan=None):
    """Write a versioned checkpoint: config, parameters, BN running stats,
    epoch, RNG state and plan digest."""
    config_text = models.config_to_text(model.config)
    meta = {
        "epoch": int(epoch),
        "config_text": config_text,
        "plan_digest": plan_digest(plan) if plan is not None else "",
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    records = list(model.parameters().items()) + list(model.buffers().items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(hashlib.sha256(config_text.encode()).digest())
        meta_blob = json.dumps(meta).encode()
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(records)))
        for name, item in records:
            _write_record(fh, name, item.data if isinstance(item, engine.Tensor) else item)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint. Returns (model, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
        version, = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32)
        meta_len, = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode())
        if hashlib.sha256(meta["config_text"].encode()).digest() != digest:
            raise DataError(f"{path}: config digest mismatch, file corrupt")
        n_records, = struct.unpack("<I", fh.read(4))
        records = dict(_read_record(fh) for _ in range(n_records))

    config = models.config_from_mapping(models.parse_flat_text(meta["config_text"]))
    model = models.build(config)
    params = model.parameters()
    buffers = model.bn_states()
    for name, arr in records.items():
        if name in params:
            if params[name].data.shape != arr.shape:
                raise DataError(f"{path}: record {name!r} shape {arr.shape} vs "
                                f"model {params[name].data.shape}")
            params[name].data = arr
        elif name.endswith(".running_mean"):
            buffers[name[:-len(".running_mean")]].running_mean = arr
        elif name.endswith(".running_var"):
            buffers[name[:-len(".running_var")]].running_var = arr
        else:
            raise DataError(f"{path}: unknown record {name!r}")
    missing = set(params) - set(records)
    if missing:
        raise DataError(f"{path}: missing parameter records: {sorted(missing)[:3]}...")
    return model, meta
