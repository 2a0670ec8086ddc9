"""AdamW, plateau LR halving, early stopping, checkpoints, and the epoch loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Sample, augment, to_batch
from .losses import LossWeights, combined_loss, confusion
from .model import Eagle, EagleConfig

log = logging.getLogger(__name__)

IMPROVE_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch: int = 4
    max_epochs: int = 100
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    early_stop_patience: int = 30
    dice_weight: float = 1.0
    bce_weight: float = 1.0

    def __post_init__(self):
        for name in ("lr", "eps", "batch", "max_epochs", "plateau_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"OptimConfig.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"OptimConfig.weight_decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        for name in ("plateau_patience", "early_stop_patience"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"OptimConfig.{name} must be an integer >= 1, got {v}")
        LossWeights(self.dice_weight, self.bce_weight)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.dice_weight, self.bce_weight)


@dataclass
class TrainState:
    lr: float
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    epochs_since_best: int = 0
    plateau_best: float = math.inf
    plateau_bad: int = 0
    seed: int = 0
    stop_reason: str | None = None
    history: list = field(default_factory=list)

    def scalars(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("history")
        return d


# --------------------------------------------------------------------------
# optimizer


def adamw_step(theta, grad, m, v, step: int, lr: float, cfg: OptimConfig) -> None:
    """One in-place AdamW update with bias-corrected moments and decoupled decay.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """
    if not torch.isfinite(grad).all():
        raise FloatingPointError("adamw_step: non-finite gradient")
    m.mul_(cfg.beta1).add_(grad, alpha=1 - cfg.beta1)
    v.mul_(cfg.beta2).addcmul_(grad, grad, value=1 - cfg.beta2)
    m_hat = m / (1 - cfg.beta1 ** step)
    v_hat = v / (1 - cfg.beta2 ** step)
    theta.sub_(lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta))


class AdamW:
    def __init__(self, named_params, cfg: OptimConfig):
        self.cfg = cfg
        self.params = dict(named_params)
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in {name}")
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            adamw_step(p, g, self.m[name], self.v[name], self.step_count, lr, self.cfg)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"optim.m.{k}": t for k, t in self.m.items()}
        out.update({f"optim.v.{k}": t for k, t in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict, step_count: int) -> None:
        for k in self.params:
            self.m[k].copy_(tensors[f"optim.m.{k}"])
            self.v[k].copy_(tensors[f"optim.v.{k}"])
        self.step_count = step_count


# --------------------------------------------------------------------------
# schedule and stopping


def plateau_scheduler(state: TrainState, val_loss: float, cfg: OptimConfig) -> TrainState:
    """Halve (``plateau_factor``) the LR after ``plateau_patience`` epochs without strict improvement."""
    if val_loss < state.plateau_best - IMPROVE_EPS:
        state.plateau_best = val_loss
        state.plateau_bad = 0
    else:
        state.plateau_bad += 1
        if state.plateau_bad >= cfg.plateau_patience:
            state.lr *= cfg.plateau_factor
            state.plateau_bad = 0
    return state


def early_stop(state: TrainState, val_loss: float, cfg: OptimConfig) -> str:
    """Returns ``"stop"`` (with ``state.stop_reason`` set) or ``"continue"``; call once per epoch."""
    if val_loss < state.best_val_loss - IMPROVE_EPS:
        state.best_val_loss = val_loss
        state.epochs_since_best = 0
    else:
        state.epochs_since_best += 1
    if state.epochs_since_best >= cfg.early_stop_patience:
        state.stop_reason = "early_stop"
        return "stop"
    if state.epoch >= cfg.max_epochs:
        state.stop_reason = "max_epochs"
        return "stop"
    return "continue"


# --------------------------------------------------------------------------
# checkpoints
#
#   magic b"EAGLECKP" | u32 version | u32 header length | header (UTF-8 JSON)
#   u32 tensor count | per tensor:
#       u16 name length | name (UTF-8) | dtype tag (1 byte) | u8 ndim
#       ndim x u32 dims | row-major little-endian payload

CKPT_MAGIC = b"EAGLECKP"
CKPT_VERSION = 1
_CKPT_TAGS = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}


def _tag_for(t: torch.Tensor) -> bytes:
    return {torch.float32: b"f", torch.float64: b"d", torch.int64: b"q"}[t.dtype]


def save_checkpoint(path, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    hdr = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu()
        tag = _tag_for(t)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + tag + struct.pack("<B", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(np.ascontiguousarray(t.numpy(), dtype=_CKPT_TAGS[tag]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    try:
        version, hlen = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(raw[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            tag = raw[pos:pos + 1]
            (ndim,) = struct.unpack_from("<B", raw, pos + 1)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dt = _CKPT_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
            tensors[name] = torch.from_numpy(arr.copy())
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return header, tensors


def model_tensors(model: Eagle) -> dict[str, torch.Tensor]:
    return {f"model.{k}": v for k, v in model.state_dict().items()}


def save_model(path, model: Eagle, extra: dict | None = None, optim: AdamW | None = None) -> None:
    header = {"model": model.cfg.to_dict(), **(extra or {})}
    tensors = model_tensors(model)
    if optim is not None:
        header["optim_step"] = optim.step_count
        tensors.update(optim.state_tensors())
    save_checkpoint(path, header, tensors)


def config_mismatch(expected: dict, found: dict) -> list[str]:
    keys = sorted(set(expected) | set(found))
    return [k for k in keys if _norm(expected.get(k)) != _norm(found.get(k))]


def _norm(v):
    return list(v) if isinstance(v, (list, tuple)) else v


def load_model(path, expect: EagleConfig | None = None) -> tuple[Eagle, dict]:
    header, tensors = load_checkpoint(path)
    if "model" not in header:
        raise CheckpointError(f"{path}: header has no model config")
    cfg = EagleConfig(**header["model"])
    if expect is not None:
        bad = config_mismatch(expect.to_dict(), cfg.to_dict())
        if bad:
            raise CheckpointError(f"config/checkpoint mismatch in fields: {', '.join(bad)}")
    model = Eagle(cfg)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    own = model.state_dict()
    bad = [k for k in own if k not in state or tuple(own[k].shape) != tuple(state[k].shape)]
    extra = [k for k in state if k not in own]
    if bad or extra:
        raise CheckpointError(f"checkpoint tensors do not match model: {', '.join((bad + extra)[:10])}")
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
    model.eval()
    return model, header


# --------------------------------------------------------------------------
# evaluation and the loop


@torch.no_grad()
def predict(model: Eagle, samples: Sequence[Sample], batch: int = 4) -> torch.Tensor:
    model.eval()
    outs = []
    for i in range(0, len(samples), batch):
        x, _ = to_batch(samples[i:i + batch])
        outs.append(model(x))
    return torch.cat(outs)


def evaluate(model: Eagle, samples: Sequence[Sample], batch: int = 4, threshold: float = 0.5,
             weights: LossWeights = LossWeights()) -> dict:
    """Pixel-pooled loss and DSC / precision / recall over ``samples`` in eval mode."""
    if not samples:
        raise ValueError("evaluate: empty split")
    probs = predict(model, samples, batch)
    _, y = to_batch(samples)
    counts = confusion(y, probs, threshold)
    out = {"loss": float(combined_loss(y, probs, weights)), **counts.scores(), "n": len(samples)}
    out["per_sample"] = [
        {"id": s.meta.get("id", str(i)), **confusion(y[i], probs[i], threshold).scores()}
        for i, s in enumerate(samples)
    ]
    return out


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch] for i in range(0, n, batch)]
    # BatchNorm at the 1x1 bottleneck needs more than one sample per batch.
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train_loop(
    model_cfg: EagleConfig,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    optim_cfg: OptimConfig = OptimConfig(),
    seed: int = 0,
    out_dir=None,
    use_augment: bool = True,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Eagle, TrainState]:
    """Train from scratch; writes ``best.ckpt``, ``last.ckpt`` and ``metrics.jsonl`` when ``out_dir`` is set.

    ``on_epoch`` receives each metric record; a truthy return ends training.
    """
    if not train_set:
        raise ValueError("train_loop: empty training split")
    if not val_set:
        raise ValueError("train_loop: empty validation split")
    torch.manual_seed(seed)
    model = Eagle(model_cfg)
    opt = AdamW(model.named_parameters(), optim_cfg)
    state = TrainState(lr=optim_cfg.lr, seed=seed)
    weights = optim_cfg.loss_weights
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    while True:
        state.epoch += 1
        model.train()
        rng = np.random.default_rng([seed, state.epoch])
        losses = []
        for idx in _batches(len(train_set), optim_cfg.batch, rng):
            items = [train_set[i] for i in idx]
            if use_augment:
                items = [augment(s, [seed, state.epoch, int(i)]) for s, i in zip(items, idx)]
            x, y = to_batch(items)
            opt.zero_grad()
            loss = combined_loss(y, model(x), weights)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite training loss at epoch {state.epoch}, step {state.step}")
            loss.backward()
            opt.step(state.lr)
            state.step += 1
            losses.append(loss.item())

        ev = evaluate(model, val_set, optim_cfg.batch, weights=weights)
        if not math.isfinite(ev["loss"]):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {state.epoch}")
        record = {
            "epoch": state.epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": ev["loss"],
            "lr": state.lr,
            "dsc": ev["dsc"],
            "precision": ev["precision"],
            "recall": ev["recall"],
        }
        state.history.append(record)
        improved = ev["loss"] < state.best_val_loss - IMPROVE_EPS
        decision = early_stop(state, ev["loss"], optim_cfg)
        plateau_scheduler(state, ev["loss"], optim_cfg)
        log.info("epoch %d train %.4f val %.4f dsc %.4f lr %.2e", state.epoch, record["train_loss"],
                 record["val_loss"], record["dsc"], record["lr"])
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            extra = {"state": state.scalars(), "optim": dataclasses.asdict(optim_cfg)}
            if improved:
                save_model(out / "best.ckpt", model, extra, opt)
            save_model(out / "last.ckpt", model, extra, opt)
        if on_epoch is not None and on_epoch(record):
            state.stop_reason = "callback"
            break
        if decision == "stop":
            break
    return model, state
