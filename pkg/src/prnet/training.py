"""Adam + poly-decay training loop, evaluation, and checkpoint persistence.

Checkpoint container layout (all integers little-endian):

    bytes 0-3    magic "PRNC"
    bytes 4-7    format version (uint32)
    bytes 8-15   metadata length in bytes (uint64)
    ...          metadata: canonical UTF-8 JSON (sorted keys, no spaces)
    ...          payload: raw float32 arrays, back to back

The metadata's "tensors" list fixes the payload order: each entry carries
name, shape and byte offset. Names are prefixed "p/" (parameter), "m/" and
"v/" (Adam moments). Training state (epoch/iteration counters, the shuffle
generator state, attention permutations, the full training plan) rides in
the metadata, which makes save -> load -> save byte-identical and lets a
resumed run reproduce the uninterrupted run's remaining trajectory bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .data import SegmentationSample
from .model import PRNet, PRNetConfig
from .tensor import Tensor, backward, no_grad

CHECKPOINT_MAGIC = b"PRNC"
CHECKPOINT_VERSION = 1


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - iteration/max_iter)^power, evaluated per iteration."""
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return lr0 * (1.0 - iteration / max_iter) ** power


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, named_params, **hypers) -> "AdamState":
        state = cls(**hypers)
        for name, p in named_params:
            state.m[name] = np.zeros(p.shape, dtype=np.float32)
            state.v[name] = np.zeros(p.shape, dtype=np.float32)
        return state


def adam_step(named_params, state: AdamState, lr: float) -> None:
    """One in-place update over all parameters; increments the shared step
    counter once."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in named_params:
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient; run backward first")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    input_hw: tuple[int, int]
    plan: dict
    progress: dict
    adam_hypers: dict
    rng_state: dict
    permutations: dict
    tensors: dict[str, np.ndarray]  # keys "p/...", "m/...", "v/..."

    def metadata(self) -> dict:
        directory = []
        offset = 0
        for name, arr in self.tensors.items():
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 4
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config,
            "input_hw": list(self.input_hw),
            "plan": self.plan,
            "progress": self.progress,
            "adam": self.adam_hypers,
            "rng": self.rng_state,
            "permutations": self.permutations,
            "tensors": directory,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, 8)
    meta = json.loads(blob[16 : 16 + meta_len].decode("utf-8"))
    payload = blob[16 + meta_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return Checkpoint(
        config=meta["config"],
        input_hw=tuple(meta["input_hw"]),
        plan=meta["plan"],
        progress=meta["progress"],
        adam_hypers=meta["adam"],
        rng_state=meta["rng"],
        permutations=meta["permutations"],
        tensors=tensors,
    )


def _snapshot(model: PRNet, adam: AdamState, plan: dict, progress: dict, rng) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        tensors[f"p/{name}"] = p.data.astype(np.float32, copy=True)
    for name in adam.m:
        tensors[f"m/{name}"] = adam.m[name].copy()
    for name in adam.v:
        tensors[f"v/{name}"] = adam.v[name].copy()
    return Checkpoint(
        config=model.config.to_dict(),
        input_hw=model.input_hw,
        plan=dict(plan),
        progress=dict(progress),
        adam_hypers={"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
        rng_state=rng.bit_generator.state,
        permutations=model.cfa_permutations(),
        tensors=tensors,
    )


def build_model(ckpt: Checkpoint) -> PRNet:
    """Reconstruct the network a checkpoint was saved from, bitwise."""
    config = PRNetConfig.from_dict(ckpt.config)
    model = PRNet(config, input_hw=ckpt.input_hw, seed=0)
    model.set_cfa_permutations(ckpt.permutations)
    for name, p in model.named_parameters():
        stored = ckpt.tensors.get(f"p/{name}")
        if stored is None:
            raise ValueError(f"checkpoint is missing parameter {name}")
        if tuple(stored.shape) != p.shape:
            raise ValueError(
                f"checkpoint parameter {name} has shape {stored.shape}, model expects {p.shape}"
            )
        p.data = stored.astype(p.data.dtype, copy=True)
    return model


def _restore_adam(ckpt: Checkpoint, model: PRNet) -> AdamState:
    h = ckpt.adam_hypers
    state = AdamState(beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], t=h["t"])
    for name, _ in model.named_parameters():
        state.m[name] = ckpt.tensors[f"m/{name}"].copy()
        state.v[name] = ckpt.tensors[f"v/{name}"].copy()
    return state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainRecord:
    iteration: int
    epoch: int
    lr: float
    loss: float

    def line(self) -> str:
        return f"iter={self.iteration}\tepoch={self.epoch}\tlr={self.lr:.10e}\tloss={self.loss:.10e}"


@dataclass
class TrainResult:
    records: list[TrainRecord]
    checkpoint: Checkpoint
    model: PRNet


def format_log(records) -> str:
    return "\n".join(r.line() for r in records) + ("\n" if records else "")


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    if not dataset:
        raise ValueError("dataset is empty")
    hw = dataset[0].image.shape[1:]
    for s in dataset:
        if s.image.shape[1:] != hw:
            raise ValueError(
                f"all samples must share one extent; {s.source_id} is {s.image.shape[1:]}, expected {hw}"
            )
    images = np.stack([s.image for s in dataset]).astype(np.float32)
    masks = np.stack([s.mask for s in dataset]).astype(np.int64)
    return images, masks, hw


def _run_epochs(
    model: PRNet,
    adam: AdamState,
    shuffle_rng: np.random.Generator,
    images: np.ndarray,
    masks: np.ndarray,
    plan: dict,
    start_epoch: int,
    records: list[TrainRecord],
    out_dir,
) -> Checkpoint:
    n = images.shape[0]
    bs = plan["batch_size"]
    iters_per_epoch = n // bs
    max_iter = plan["max_iter"]
    iteration = start_epoch * iters_per_epoch
    named = list(model.named_parameters())
    ckpt = None
    for epoch in range(start_epoch, plan["epochs"]):
        perm = shuffle_rng.permutation(n)
        for b in range(iters_per_epoch):
            idx = perm[b * bs : (b + 1) * bs]
            x = Tensor(images[idx])
            y = masks[idx]
            logits = model(x)
            loss = losses.combined_loss(logits, y)
            model.zero_grad()
            backward(loss)
            lr = poly_lr(iteration, max_iter, plan["lr0"], plan["power"])
            adam_step(named, adam, lr)
            records.append(TrainRecord(iteration, epoch, lr, float(loss.item())))
            iteration += 1
        done = epoch + 1
        every = plan.get("checkpoint_every", 0)
        at_boundary = every and done % every == 0
        if at_boundary or done == plan["epochs"]:
            ckpt = _snapshot(
                model, adam, plan, {"epoch": done, "iteration": iteration}, shuffle_rng
            )
            if out_dir is not None and at_boundary and done != plan["epochs"]:
                save_checkpoint(ckpt, Path(out_dir) / f"checkpoint_epoch_{done}.prnc")
    return ckpt


def train(
    config: PRNetConfig,
    dataset: list[SegmentationSample],
    epochs: int,
    batch_size: int,
    seed: int = 0,
    lr0: float = 1e-4,
    power: float = 0.9,
    checkpoint_every: int = 0,
    out_dir=None,
) -> TrainResult:
    """Run the full recipe: per-epoch seeded shuffle with last-partial-batch
    dropping, CE+Dice loss, Adam with per-iteration poly decay. The poly
    horizon max_iter = epochs * (len(dataset) // batch_size) is fixed up
    front; the last step uses iteration = max_iter - 1, so its lr stays
    positive. The whole run is a pure function of (config, dataset, seed)."""
    images, masks, hw = _dataset_arrays(dataset)
    n = images.shape[0]
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    if int(masks.max()) >= config.num_classes:
        raise ValueError(
            f"dataset contains label {int(masks.max())} but the model has "
            f"{config.num_classes} classes"
        )
    plan = {
        "epochs": epochs,
        "batch_size": batch_size,
        "lr0": lr0,
        "power": power,
        "max_iter": epochs * (n // batch_size),
        "seed": seed,
        "checkpoint_every": checkpoint_every,
    }
    model_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    model = PRNet(config, input_hw=hw, seed=model_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    adam = AdamState.for_params(model.named_parameters())
    records: list[TrainRecord] = []
    ckpt = _run_epochs(model, adam, shuffle_rng, images, masks, plan, 0, records, out_dir)
    return TrainResult(records, ckpt, model)


def resume(ckpt: Checkpoint, dataset: list[SegmentationSample], out_dir=None) -> TrainResult:
    """Continue a checkpointed run to the end of its stored plan. With the
    same dataset this reproduces the uninterrupted run bitwise."""
    images, masks, hw = _dataset_arrays(dataset)
    if hw != tuple(ckpt.input_hw):
        raise ValueError(f"dataset extent {hw} does not match checkpoint {ckpt.input_hw}")
    model = build_model(ckpt)
    adam = _restore_adam(ckpt, model)
    shuffle_rng = np.random.default_rng(0)
    shuffle_rng.bit_generator.state = ckpt.rng_state
    start_epoch = ckpt.progress["epoch"]
    if start_epoch >= ckpt.plan["epochs"]:
        raise ValueError("checkpoint is already at the end of its training plan")
    records: list[TrainRecord] = []
    final = _run_epochs(
        model, adam, shuffle_rng, images, masks, ckpt.plan, start_epoch, records, out_dir
    )
    return TrainResult(records, final, model)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def predict_masks(model: PRNet, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Argmax class masks for a stack of images (M, 3, H, W) -> (M, H, W)."""
    out = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = model(Tensor(images[start : start + batch_size].astype(np.float32)))
            out.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(out, axis=0)


def evaluate(
    model: PRNet,
    dataset: list[SegmentationSample],
    class_names: list[str] | None = None,
    per_image: bool = False,
    batch_size: int = 4,
) -> losses.ClassReport:
    """Predict every sample and score foreground Dice against the masks."""
    images, masks, hw = _dataset_arrays(dataset)
    k = model.config.num_classes
    if int(masks.max()) >= k:
        raise ValueError(
            f"dataset labels reach {int(masks.max())} but the checkpointed model "
            f"only has {k} classes"
        )
    pred = predict_masks(model, images, batch_size=batch_size)
    return losses.evaluate_dsc(
        pred, masks, k, class_names=class_names, per_image=per_image
    )
