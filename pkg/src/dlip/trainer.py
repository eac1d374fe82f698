"""Deterministic desk-scale training loop.

One process, one thread of control: assemble a batch (images plus freshly
sampled sub-captions), run both encoders forward, evaluate the combined
objective, backpropagate analytically, and apply a decoupled-weight-decay
adaptive-moment update under a linear-warmup cosine-decay schedule.

Determinism contract: in f64 mode a (config, seed, corpus) triple fixes the
whole run, and resuming from a checkpoint reproduces the remaining steps
bit-identically. Per-epoch shuffles derive from SeedSequence([seed, 1,
epoch]); per-step sub-caption seeds are drawn from a live PCG64 generator
whose state is serialized into checkpoints.
"""

import dataclasses
import json
import math
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .captions import (
    KIND_RAW,
    CaptionRecord,
    SubCaptionSet,
    build_batch,
    build_subcaption_set,
    load_dataset,
)
from .encoders import (
    DualEncoder,
    EncoderConfig,
    ParamSet,
    Tokenizer,
    load_image_tensor,
    save_weights,
)
from .errors import (
    CorruptCheckpoint,
    DataError,
    NonFiniteLoss,
    UnknownConfigKey,
    VersionMismatch,
)
from .losses import (
    finite_diff_check,
    grouping_boundary_state,
    total_loss,
)


@dataclass
class TrainConfig:
    """Run parameters. Every field is settable from a flat key=value file."""

    # objective
    batch_size: int = 64
    epochs: int = 32
    k_subcaptions: int = 10
    sigma: float = 0.0
    lambda_mpcl: float = 1.0
    lambda_s: float = 0.7
    cross_image_negatives: bool = False
    caption_mode: str = "sampled"  # sampled | raw
    # optimizer
    learning_rate: float = 5e-4
    weight_decay: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup_iters: int = 2000
    schedule: str = "cosine_decay"
    grad_clip_norm: float = 10.0
    grad_clip_enabled: bool = True
    total_steps: int = 0  # 0 = epochs * steps_per_epoch
    # run
    seed: int = 0
    numeric_mode: str = "f32"  # f32 | f64
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    # encoders
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    hidden_mult: int = 4
    patch_grid_h: int = 4
    patch_grid_w: int = 4
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    max_len: int = 77
    param_seed: int = 0

    def __post_init__(self):
        if self.schedule != "cosine_decay":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.numeric_mode not in ("f32", "f64"):
            raise ValueError(f"numeric_mode must be f32 or f64, got {self.numeric_mode!r}")
        if self.caption_mode not in ("sampled", "raw"):
            raise ValueError(f"caption_mode must be sampled or raw, got {self.caption_mode!r}")
        if self.k_subcaptions < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size, epochs and k_subcaptions must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.numeric_mode == "f64" else np.float32

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            embed_dim=self.embed_dim,
            patch_grid=(self.patch_grid_h, self.patch_grid_w),
            image_size=(self.image_h, self.image_w),
            channels=self.channels,
            depth=self.depth,
            heads=self.heads,
            hidden_mult=self.hidden_mult,
            max_len=self.max_len,
            param_seed=self.param_seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse a flat key=value config. '#' starts a comment; blank lines are
    skipped; unknown keys raise UnknownConfigKey."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: Dict[str, object] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UnknownConfigKey(f"line {line_no}: expected key=value, got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in fields:
            raise UnknownConfigKey(f"line {line_no}: unknown config key {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "int" or ftype is int:
                values[key] = int(value)
            elif ftype == "float" or ftype is float:
                values[key] = float(value)
            elif ftype == "bool" or ftype is bool:
                if value.lower() not in _BOOL_WORDS:
                    raise ValueError(f"not a boolean: {value!r}")
                values[key] = _BOOL_WORDS[value.lower()]
            else:
                values[key] = value
        except ValueError as e:
            raise UnknownConfigKey(f"line {line_no}: bad value for {key!r}: {e}") from e
    merged = (base or TrainConfig()).to_dict()
    merged.update(values)
    try:
        return TrainConfig.from_dict(merged)
    except ValueError as e:
        raise UnknownConfigKey(str(e)) from e


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base)


def format_config(config: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    return "\n".join(lines) + "\n"


# ---- learning-rate schedule ----

def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 over warmup_iters, then cosine decay to 0 at
    config.total_steps (which must be resolved to a positive value)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    peak = config.learning_rate
    warm = config.warmup_iters
    total = config.total_steps
    if total <= 0:
        raise ValueError("config.total_steps must be resolved before lr_at")
    if warm > 0 and step < warm:
        return peak * step / warm
    if step >= total:
        return 0.0
    span = max(1, total - warm)
    progress = (step - warm) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---- run state ----

@dataclass
class TrainBatch:
    image_ids: List[str]
    images: np.ndarray           # (N, C, H, W)
    texts: List[List[str]]       # N rows of K sampled sub-captions


class RunState:
    """Everything a resumed run needs: params, moments, rng, step counter."""

    def __init__(self, config: TrainConfig, model: DualEncoder, tokenizer: Tokenizer):
        self.config = config
        self.model = model
        self.tokenizer = tokenizer
        self.step = 0
        n = model.params.size
        self.m = np.zeros(n, dtype=model.dtype)
        self.v = np.zeros(n, dtype=model.dtype)
        self.rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([config.seed, 2]))
        )
        self.loss_history: deque = deque(maxlen=100)
        self._decay_mask = model.params.decay_mask_flat()


def init_run_state(config: TrainConfig, tokenizer: Tokenizer) -> RunState:
    model = DualEncoder(config.encoder_config(), tokenizer.vocab_size, dtype=config.dtype)
    return RunState(config, model, tokenizer)


# ---- one optimizer step ----

def train_step(state: RunState, batch: TrainBatch) -> Dict[str, float]:
    """Forward, analytic backward, AdamW update. Mutates state; returns the
    step's metrics (loss parts, tau and lr used, pre-clip gradient norm)."""
    config = state.config
    model = state.model
    n = len(batch.image_ids)
    k = config.k_subcaptions
    flat_texts = [txt for row in batch.texts for txt in row]
    if len(flat_texts) != n * k:
        raise ValueError(f"expected {n * k} texts, got {len(flat_texts)}")

    tokens = state.tokenizer.encode_batch(flat_texts)  # (N*K, max_len)
    # trimming trailing all-pad columns is pure speed: masked attention and
    # masked mean pooling make padding inert
    longest = int(np.max(np.sum(tokens != Tokenizer.PAD_ID, axis=1)))
    tokens = tokens[:, : max(1, longest)]

    text_flat, t_cache = model.encode_text(tokens)
    text_vectors = text_flat.reshape(n, k, -1)
    image_globals, patches, i_cache = model.encode_image(
        batch.images.astype(model.dtype, copy=False)
    )
    tau = model.tau
    out = total_loss(
        image_globals,
        text_vectors,
        patches,
        config.sigma,
        tau,
        config.lambda_mpcl,
        config.lambda_s,
        config.cross_image_negatives,
    )
    if not math.isfinite(out.value):
        raise NonFiniteLoss(state.step, batch.image_ids)

    grads = model.params.zeros_like()
    model.encode_text_backward(
        out.grad_text_vectors.reshape(n * k, -1).astype(model.dtype, copy=False),
        t_cache,
        grads,
    )
    model.encode_image_backward(
        out.grad_image_globals.astype(model.dtype, copy=False),
        out.grad_patches.astype(model.dtype, copy=False),
        i_cache,
        grads,
    )
    # d(loss)/d(s) for tau = exp(-s) is -tau * d(loss)/d(tau)
    grads["logit_s"] = np.array(-tau * out.grad_tau, dtype=model.dtype)

    g = grads.flat()
    if not np.all(np.isfinite(g)):
        raise NonFiniteLoss(state.step, batch.image_ids)
    grad_norm = float(np.linalg.norm(g.astype(np.float64)))
    if config.grad_clip_enabled and grad_norm > config.grad_clip_norm:
        g = g * (config.grad_clip_norm / grad_norm)

    lr = lr_at(state.step, config)
    t = state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * (g * g)
    m_hat = state.m / (1.0 - b1 ** t)
    v_hat = state.v / (1.0 - b2 ** t)
    theta = model.params.flat()
    update = lr * (m_hat / (np.sqrt(v_hat) + config.adam_eps))
    update = update + (lr * config.weight_decay) * np.where(state._decay_mask, theta, 0.0)
    model.params.load_flat(theta - update)
    model.clamp_logit_scale()

    metrics = {
        "step": state.step,
        "total": out.value,
        "mpcl": out.parts.get("mpcl", 0.0),
        "sub": out.parts.get("grouping", 0.0),
        "tau": tau,
        "lr": lr,
        "grad_norm": grad_norm,
    }
    state.step += 1
    state.loss_history.append(out.value)
    return metrics


# ---- run-state checkpoint file ----
#
# Byte layout, little-endian:
#   magic   4 bytes  "DLRS"
#   version u32      1
#   hlen    u32      JSON header length
#   header  UTF-8 JSON: config, step, rng state, loss history, vocab, dtype
#   3 payloads (params, first moment, second moment), each:
#     u64 byte length, then raw array bytes in the header's dtype

_STATE_MAGIC = b"DLRS"
_STATE_VERSION = 1


def save_checkpoint(state: RunState, path) -> None:
    header = {
        "config": state.config.to_dict(),
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "loss_history": list(state.loss_history),
        "vocab": state.tokenizer.id_to_token(),
        "dtype": np.dtype(state.model.dtype).name,
        "param_names": state.model.params.names(),
    }
    hbytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    payloads = [
        np.ascontiguousarray(state.model.params.flat()),
        np.ascontiguousarray(state.m),
        np.ascontiguousarray(state.v),
    ]
    with open(path, "wb") as f:
        f.write(_STATE_MAGIC)
        f.write(struct.pack("<I", _STATE_VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for arr in payloads:
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def load_checkpoint(path) -> RunState:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _STATE_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _STATE_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_STATE_VERSION}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: bad header: {e}") from e

    config = TrainConfig.from_dict(header["config"])
    tokenizer = Tokenizer.from_token_list(header["vocab"], config.max_len)
    state = init_run_state(config, tokenizer)
    if header.get("param_names") != state.model.params.names():
        raise CorruptCheckpoint(f"{path}: parameter name order mismatch")
    dtype = np.dtype(header["dtype"])

    offset = 12 + hlen
    arrays = []
    for _ in range(3):
        if len(blob) < offset + 8:
            raise CorruptCheckpoint(f"{path}: truncated payload")
        (nbytes,) = struct.unpack("<Q", blob[offset : offset + 8])
        offset += 8
        if len(blob) < offset + nbytes:
            raise CorruptCheckpoint(f"{path}: truncated payload")
        arrays.append(
            np.frombuffer(blob[offset : offset + nbytes], dtype=dtype.newbyteorder("<"))
            .astype(dtype)
        )
        offset += nbytes
    if offset != len(blob):
        raise CorruptCheckpoint(f"{path}: trailing bytes")
    params, m, v = arrays
    if params.size != state.model.params.size:
        raise CorruptCheckpoint(
            f"{path}: {params.size} params, config implies {state.model.params.size}"
        )
    state.model.params.load_flat(params)
    state.m = m.copy()
    state.v = v.copy()
    state.step = int(header["step"])
    state.rng.bit_generator.state = header["rng"]
    state.loss_history = deque(header["loss_history"], maxlen=100)
    return state


# ---- full training run ----

def _metric_str(x: float) -> str:
    """Shortest round-trip decimal form, so equal values format equally."""
    return repr(float(x))


METRICS_HEADER = "step,total,mpcl,sub,tau,lr,grad_norm"


def format_metrics_row(metrics: Dict[str, float]) -> str:
    return ",".join(
        [str(int(metrics["step"]))]
        + [_metric_str(metrics[k]) for k in ("total", "mpcl", "sub", "tau", "lr", "grad_norm")]
    )


def _dataset_texts(records: Sequence[CaptionRecord]) -> List[str]:
    texts: List[str] = []
    for rec in records:
        texts.append(rec.raw_caption)
        texts.extend(rec.short_captions)
        for sentences in rec.long_captions:
            texts.extend(sentences)
    return texts


def load_split(data_dir) -> Optional[Dict[str, List[str]]]:
    path = Path(data_dir) / "split.json"
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        split = json.load(f)
    if not isinstance(split, dict) or "train" not in split or "test" not in split:
        raise DataError(f"{path}: expected an object with 'train' and 'test' id lists")
    return {"train": list(split["train"]), "test": list(split["test"])}


def load_images(data_dir, image_ids: Sequence[str]) -> Dict[str, np.ndarray]:
    images = {}
    img_dir = Path(data_dir) / "images"
    for image_id in image_ids:
        images[image_id] = load_image_tensor(img_dir / f"{image_id}.dlt")
    return images


def build_caption_sets(
    records: Sequence[CaptionRecord], caption_mode: str
) -> Dict[str, SubCaptionSet]:
    """caption_mode 'sampled' uses the full candidate pool; 'raw' restricts
    the pool to the raw caption alone (the CLIP-style ablation arm)."""
    sets = {}
    for rec in records:
        if caption_mode == "raw":
            sets[rec.image_id] = SubCaptionSet(rec.image_id, [(rec.raw_caption, KIND_RAW, -1)])
        else:
            sets[rec.image_id] = build_subcaption_set(rec)
    return sets


def run_training(
    config: TrainConfig,
    data_dir,
    out_dir,
    resume_from=None,
    log_fn=None,
    stop_after_steps=None,
) -> Dict[str, object]:
    """Train on a prepared corpus directory; write metrics.csv, model.dlip
    and run.ckpt under out_dir. With resume_from, the checkpoint's config
    takes over and training continues to the configured total steps; metrics
    rows already on disk for completed steps are kept, so the finished file
    matches an uninterrupted run. stop_after_steps ends the session early
    after that many steps, leaving run.ckpt ready to resume."""
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = load_dataset(data_dir / "captions.jsonl")
    split = load_split(data_dir)
    by_id = {rec.image_id: rec for rec in records}
    if split is None:
        train_ids = [rec.image_id for rec in records]
    else:
        train_ids = [i for i in split["train"] if i in by_id]
        if len(train_ids) != len(split["train"]):
            raise DataError("split.json lists train ids missing from captions.jsonl")
    train_records = [by_id[i] for i in train_ids]

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        config = state.config
    else:
        tokenizer = Tokenizer.build(_dataset_texts(train_records), config.max_len)
        state = init_run_state(config, tokenizer)

    n_train = len(train_records)
    steps_per_epoch = n_train // config.batch_size
    if steps_per_epoch < 1:
        raise DataError(
            f"batch_size {config.batch_size} exceeds the {n_train} training images"
        )
    total_steps = config.total_steps or config.epochs * steps_per_epoch
    config = dataclasses.replace(config, total_steps=total_steps)
    state.config = config

    images = load_images(data_dir, train_ids)
    sets = build_caption_sets(train_records, config.caption_mode)
    k = config.k_subcaptions
    bs = config.batch_size

    # Keep on-disk rows for steps the checkpoint already covers, drop any a
    # crash may have written past it, then append as we go.
    metrics_path = out_dir / "metrics.csv"
    kept_rows: List[str] = []
    if resume_from is not None and metrics_path.exists():
        lines = metrics_path.read_text(encoding="utf-8").splitlines()
        kept_rows = [
            row for row in lines[1:] if row and int(row.split(",", 1)[0]) < state.step
        ]
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(METRICS_HEADER + "\n")
        for row in kept_rows:
            f.write(row + "\n")

    metrics_rows: List[str] = []
    start_step = state.step
    finished = True
    perm_epoch = -1
    perm: Optional[np.ndarray] = None
    with open(metrics_path, "a", encoding="utf-8", newline="\n") as f:
        for step in range(start_step, total_steps):
            epoch = step // steps_per_epoch
            if epoch != perm_epoch:
                epoch_rng = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence([config.seed, 1, epoch]))
                )
                perm = epoch_rng.permutation(n_train)
                perm_epoch = epoch
            pos = (step % steps_per_epoch) * bs
            idx = perm[pos : pos + bs]
            batch_ids = [train_ids[i] for i in idx]
            sample_seed = int(state.rng.integers(0, 2**63))
            row_sets = [sets[i] for i in batch_ids]
            sampled = build_batch(row_sets, k, sample_seed)
            texts = [
                [row_sets[i].candidates[c][0] for c in sampled.sampled[i]]
                for i in range(len(batch_ids))
            ]
            batch = TrainBatch(
                image_ids=batch_ids,
                images=np.stack([images[i] for i in batch_ids]),
                texts=texts,
            )
            metrics = train_step(state, batch)
            row = format_metrics_row(metrics)
            metrics_rows.append(row)
            f.write(row + "\n")
            if log_fn is not None and (
                step % max(1, total_steps // 20) == 0 or step == total_steps - 1
            ):
                log_fn(
                    f"step {step}/{total_steps} total {metrics['total']:.4f} "
                    f"tau {metrics['tau']:.4f} lr {metrics['lr']:.2e}"
                )
            if config.checkpoint_every > 0 and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out_dir / "run.ckpt")
            if stop_after_steps is not None and state.step - start_step >= stop_after_steps:
                finished = state.step >= total_steps
                break

    save_checkpoint(state, out_dir / "run.ckpt")
    if finished:
        save_weights(out_dir / "model.dlip", state.model, state.tokenizer)
    with open(out_dir / "config.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(format_config(config))
    return {
        "steps": state.step,
        "finished": finished,
        "final_loss": state.loss_history[-1] if state.loss_history else None,
        "out_dir": str(out_dir),
        "metrics_rows": metrics_rows,
    }


# ---- whole-chain gradient check ----

def full_chain_check(
    directions: int = 16,
    h: float = 1e-5,
    seed: int = 0,
    sigma: float = 0.0,
    depth: int = 1,
) -> "GradCheckReport":
    """Finite-difference the whole pipeline: flat params -> encoders ->
    total_loss. Exercises every backward contract in one scalar function."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 3])))
    config = EncoderConfig(
        embed_dim=6,
        patch_grid=(2, 2),
        image_size=(8, 8),
        channels=2,
        depth=depth,
        heads=2,
        hidden_mult=2,
        max_len=9,
        param_seed=seed,
    )
    vocab_size = 13
    n, k = 3, 2
    tokens = rng.integers(0, vocab_size, size=(n * k, config.max_len)).astype(np.int32)
    tokens[:, -2:] = Tokenizer.PAD_ID  # some padding to exercise the masks
    tokens[:, 0] = np.maximum(tokens[:, 0], 1)
    images = rng.standard_normal((n, config.channels, *config.image_size))

    model = DualEncoder(config, vocab_size, dtype=np.float64)
    theta0 = model.params.flat()

    def forward(flat):
        model.params.load_flat(flat)
        text_flat, t_cache = model.encode_text(tokens)
        g, p, i_cache = model.encode_image(images)
        return text_flat.reshape(n, k, -1), g, p, t_cache, i_cache

    def fn(inputs):
        (flat,) = inputs
        t, g, p, t_cache, i_cache = forward(flat)
        tau = float(np.exp(-model.params["logit_s"]))
        out = total_loss(g, t, p, sigma, tau, 1.0, 0.7)
        grads = model.params.zeros_like()
        model.encode_text_backward(out.grad_text_vectors.reshape(n * k, -1), t_cache, grads)
        model.encode_image_backward(out.grad_image_globals, out.grad_patches, i_cache, grads)
        grads["logit_s"] = np.array(-tau * out.grad_tau, dtype=np.float64)
        return out.value, [grads.flat()]

    def boundary(inputs):
        (flat,) = inputs
        t, g, p, t_cache, i_cache = forward(flat)
        bits = [grouping_boundary_state(t, p, sigma)]
        # relu sign masks from both encoders' FFNs
        for block_caches in (t_cache[3], i_cache[1]):
            for block_cache in block_caches:
                u = block_cache[4]
                bits.append((u > 0).ravel().astype(np.int64))
        return np.concatenate(bits)

    report = finite_diff_check(
        fn,
        [theta0],
        directions=directions,
        h=h,
        seed=seed,
        boundary_state=boundary,
        name=f"full_chain depth={depth} sigma={sigma:g}",
    )
    model.params.load_flat(theta0)
    return report
