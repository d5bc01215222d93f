"""SGD-with-momentum training, evaluation, augmentation and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import Dataset
from .model import ArchSpec, ConfigError, NetworkGraph, build
from .tensor import Rng, precision, resolve_dtype

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    lr_decay_epochs: list = field(default_factory=list)
    lr_decay_factor: float = 10.0
    weight_decay: float = 0.0
    max_shift_px: int = 4
    horizontal_flip: bool = True
    seed: int = 0
    dtype: str = "float32"
    max_steps: int | None = None  # stop early after this many optimizer steps
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("lr0", "momentum", "lr_decay_factor", "weight_decay"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name} must be a number, got {v!r}")
        for name in ("epochs", "batch_size", "max_shift_px", "seed", "eval_batch_size"):
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be an integer, got {getattr(self, name)!r}")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.max_shift_px < 0:
            raise ConfigError("max_shift_px must be >= 0")
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]
        resolve_dtype(self.dtype)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr0 / factor^k where k counts decay epochs already reached (epochs are 0-based)."""
    k = sum(epoch >= e for e in cfg.lr_decay_epochs)
    return cfg.lr0 / cfg.lr_decay_factor**k


# ---------------------------------------------------------------------------
# augmentation


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    H, W = img.shape[:2]
    if abs(dy) >= H or abs(dx) >= W:
        return out
    out[max(dy, 0): H + min(dy, 0), max(dx, 0): W + min(dx, 0)] = img[max(-dy, 0): H - max(dy, 0), max(-dx, 0): W - max(dx, 0)]
    return out


def shift_image(img, dy, dx):
    """Translate by (dy, dx) pixels (positive = down / right), zero fill."""
    return _shift(np.asarray(img), int(dy), int(dx))


def augment_batch(images, rng: Rng, cfg: TrainConfig):
    s = cfg.max_shift_px
    B = len(images)
    if s == 0 and not cfg.horizontal_flip:
        return images
    dy = rng.integers(-s, s + 1, size=B) if s else np.zeros(B, int)
    dx = rng.integers(-s, s + 1, size=B) if s else np.zeros(B, int)
    flip = rng.random(B) < 0.5 if cfg.horizontal_flip else np.zeros(B, bool)
    out = np.empty_like(images)
    for b in range(B):
        img = images[b, :, ::-1] if flip[b] else images[b]
        out[b] = _shift(img, dy[b], dx[b]) if (dy[b] or dx[b]) else img
    return out


def augment(image, rng: Rng, cfg: TrainConfig):
    """Random integer shift in [-s, s] per axis (zero fill) and a horizontal flip with p = 0.5."""
    return augment_batch(np.asarray(image)[None], rng, cfg)[0]


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float, weight_decay: float = 0.0):
    """v <- mu v - lr g; w <- w + v, updating ``params`` in place."""
    for name, w in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name}")
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * w
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= momentum
        v -= lr * g.astype(w.dtype, copy=False)
        w += v


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    step: int = 0
    velocity: dict = field(default_factory=dict)
    rng: Rng | None = None
    metrics: list = field(default_factory=list)


def evaluate(graph: NetworkGraph, ds: Dataset, batch_size: int = 256):
    """(top-1 accuracy, mean cross-entropy) in eval mode."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    dt = graph.dtype
    correct, total_loss = 0, 0.0
    with precision(dt):
        for s in range(0, len(ds), batch_size):
            xb = ds.images[s: s + batch_size].astype(dt, copy=False)
            yb = ds.labels[s: s + batch_size]
            try:
                logits = graph.forward(xb, train=False)
                loss, _ = ops.softmax_xent_loss(logits, yb)
            except ValueError:
                where = graph.first_nonfinite(xb, train=False)
                if where is None:
                    raise
                raise DivergenceError(f"evaluation produced non-finite values; first in {where}") from None
            total_loss += loss * len(yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(ds), total_loss / len(ds)


def _finite_or_raise(graph, xb, loss, grads, epoch, step):
    if math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values()):
        return
    where = graph.first_nonfinite(xb)
    if where is None:
        bad = next((k for k, g in grads.items() if not np.all(np.isfinite(g))), None)
        where = f"gradient of {bad}" if bad else "loss"
    raise DivergenceError(f"training diverged at epoch {epoch + 1}, step {step}: first non-finite value in {where}")


def gate_health(graph: NetworkGraph, ds: Dataset, batch_size: int = 256, threshold: float = 0.999):
    """Gate units whose output is one-hot (max_j g_ij >= threshold) on every sample of ``ds``."""
    from .introspect import collect_gates

    saturated = []
    for layer_id, gates in collect_gates(graph, ds.images, batch_size).items():
        for i, g in enumerate(gates):
            if g.max(axis=1).min() >= threshold:
                saturated.append((layer_id, i))
    return saturated


def train(graph: NetworkGraph, ds: Dataset, cfg: TrainConfig, val: Dataset | None = None, *,
          state: TrainState | None = None, log_path=None, checkpoint_path=None, on_epoch=None):
    """Run (or resume) training up to ``cfg.epochs``. Returns ``(graph, state)``.

    Each epoch appends one metrics record to ``state.metrics`` (and to
    ``log_path`` as a JSON line). With ``checkpoint_path`` the state is saved
    after every epoch.
    """
    if len(ds) == 0:
        raise ValueError("training set is empty")
    classes = graph.spec.classes if graph.spec else None
    if classes is not None and ds.labels.max() >= classes:
        raise ValueError(f"labels reach {ds.labels.max()} but the classifier has {classes} outputs")
    dt = resolve_dtype(cfg.dtype)
    if graph.dtype != dt:
        graph.astype(dt)
    state = state or TrainState(rng=Rng(cfg.seed, (7,)))
    if state.rng is None:
        state.rng = Rng(cfg.seed, (7,))
    N = len(ds)
    with precision(dt):
        while state.epoch < cfg.epochs:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            epoch = state.epoch
            lr = learning_rate(cfg, epoch)
            order = state.rng.permutation(N)
            tot_loss, tot_correct, seen = 0.0, 0, 0
            for s in range(0, N, cfg.batch_size):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    break
                idx = order[s: s + cfg.batch_size]
                xb = augment_batch(ds.images[idx], state.rng, cfg).astype(dt, copy=False)
                yb = ds.labels[idx]
                try:
                    logits = graph.forward(xb, train=True)
                    loss, grad = ops.softmax_xent_loss(logits, yb)
                except ValueError:
                    # softmax refuses non-finite logits; report where they first appear
                    _finite_or_raise(graph, xb, math.nan, {}, epoch, state.step)
                    raise
                graph.backward(grad.astype(dt, copy=False))
                grads = graph.named_grads()
                _finite_or_raise(graph, xb, loss, grads, epoch, state.step)
                sgd_step(graph.named_params(), grads, state.velocity, lr, cfg.momentum, cfg.weight_decay)
                state.step += 1
                tot_loss += loss * len(idx)
                tot_correct += int((logits.argmax(axis=1) == yb).sum())
                seen += len(idx)
            rec = {"epoch": epoch + 1, "lr": lr, "steps": state.step,
                   "train_loss": tot_loss / max(seen, 1), "train_acc": tot_correct / max(seen, 1)}
            if val is not None and len(val):
                rec["val_acc"], rec["val_loss"] = evaluate(graph, val, cfg.eval_batch_size)
            state.metrics.append(rec)
            state.epoch += 1
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, graph, state, cfg)
            if on_epoch is not None:
                on_epoch(rec)
    if val is not None and len(val) and graph.routers():
        for layer_id, i in gate_health(graph, val, cfg.eval_batch_size):
            log.warning("gate %d of router %s is saturated on every validation sample", i, layer_id)
    return graph, state


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"RNETCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, version, header length


class CheckpointError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": obj.dtype.str}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=np.dtype(obj["dtype"]))
        return {k: _unjson(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unjson(v) for v in obj]
    return obj


@dataclass
class Checkpoint:
    arch: dict
    epoch: int
    step: int
    params: dict
    velocity: dict
    buffers: dict
    rng_state: dict | None
    config: dict | None
    metrics: list


def save_checkpoint(path, graph: NetworkGraph, state: TrainState, cfg: TrainConfig | None = None):
    groups = [("param", graph.named_params()), ("velocity", state.velocity), ("buffer", graph.named_buffers())]
    manifest, blobs, off = [], [], 0
    for group, tensors in groups:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            manifest.append({"group": group, "name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                             "offset": off, "nbytes": len(raw)})
            blobs.append(raw)
            off += len(raw)
    header = {
        "arch": graph.spec.to_dict() if graph.spec else None,
        "epoch": state.epoch,
        "step": state.step,
        "rng": _jsonable(state.rng.get_state()) if state.rng else None,
        "config": cfg.to_dict() if cfg else None,
        "metrics": state.metrics,
        "tensors": manifest,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated at offset {len(data)} while reading the {_PREFIX.size}-byte prefix")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    hend = _PREFIX.size + hlen
    if len(data) < hend:
        raise CheckpointError(f"{path}: truncated at offset {len(data)}; header needs bytes up to {hend}")
    try:
        header = json.loads(data[_PREFIX.size:hend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header at offset {_PREFIX.size}: {e}") from None
    groups = {"param": {}, "velocity": {}, "buffer": {}}
    for t in header["tensors"]:
        start = hend + t["offset"]
        stop = start + t["nbytes"]
        if stop > len(data):
            raise CheckpointError(f"{path}: truncated at offset {len(data)}; tensor {t['name']} needs bytes [{start}, {stop})")
        arr = np.frombuffer(data, dtype=np.dtype(t["dtype"]), count=t["nbytes"] // np.dtype(t["dtype"]).itemsize, offset=start)
        groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(np.dtype(t["dtype"]).newbyteorder("="))
    expected_end = hend + sum(t["nbytes"] for t in header["tensors"])
    if len(data) != expected_end:
        raise CheckpointError(f"{path}: {len(data) - expected_end} trailing bytes after offset {expected_end}")
    return Checkpoint(header["arch"], header["epoch"], header["step"], groups["param"], groups["velocity"],
                      groups["buffer"], _unjson(header["rng"]), header["config"], header["metrics"])


def restore(graph: NetworkGraph, ckpt: Checkpoint) -> TrainState:
    """Load checkpoint tensors into ``graph`` (which must match its architecture)."""
    if graph.spec is not None and ckpt.arch is not None and graph.spec.to_dict() != ckpt.arch:
        raise CheckpointError("checkpoint architecture does not match the graph: "
                              f"{ckpt.arch} vs {graph.spec.to_dict()}")
    current = graph.named_params()
    if set(current) != set(ckpt.params):
        missing = sorted(set(current) ^ set(ckpt.params))[:5]
        raise CheckpointError(f"parameter names differ from the checkpoint, e.g. {missing}")
    for name, arr in ckpt.params.items():
        if current[name].shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} in checkpoint, {current[name].shape} in graph")
        graph.set_array(name, arr.copy())
    for name, arr in ckpt.buffers.items():
        graph.set_array(name, arr.copy())
    rng = Rng.from_state(ckpt.rng_state) if ckpt.rng_state else None
    return TrainState(ckpt.epoch, ckpt.step, {k: v.copy() for k, v in ckpt.velocity.items()}, rng, list(ckpt.metrics))


def build_from_checkpoint(ckpt: Checkpoint):
    spec = ArchSpec.from_dict(ckpt.arch)
    dtype = next(iter(ckpt.params.values())).dtype.type if ckpt.params else None
    with precision(dtype or np.float32):
        graph = build(spec)
    state = restore(graph, ckpt)
    return graph, state
