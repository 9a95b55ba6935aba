"""Training loop: warmup+cosine schedule, two learning-rate groups, global
gradient clipping, decoupled weight decay, optional frozen-teacher
distillation on interleaved pair batches, metrics logging, checkpointing.

Determinism: batch choice, description choice, and drop-path noise all derive
from (config seed, step), so a run is a pure function of its config and data,
and resuming from a checkpoint replays the same trajectory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .graph import GraphError, KnowledgeGraph, sample_batch
from .model import KgModel, ModelConfig

CHECKPOINT_MAGIC = b"KGCK"
CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    """A loss went non-finite; carries the last good checkpoint if any."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    warmup: int = 100
    lr_encoders: float = 1e-5
    lr_fusion: float = 1e-3
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    batch_size: int = 16
    pair_ratio: float = 0.0
    pair_batch_size: int = 8
    kd: bool = False
    use_clip: bool = False
    use_e2e: bool = True
    use_e2r: bool = True
    use_g2e: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0 <= self.warmup < self.steps):
            raise ValueError(f"warmup {self.warmup} must lie in [0, steps={self.steps})")
        if self.lr_encoders <= 0 or self.lr_fusion <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.pair_ratio <= 1.0):
            raise ValueError("pair_ratio must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(step: int, peak: float, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over warmup, then cosine peak -> 0 at the final step."""
    if not (0 <= step <= cfg.steps):
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup:
        return peak * step / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    progress = (step - cfg.warmup) / span
    return peak * 0.5 * (1.0 + np.cos(np.pi * progress))


def is_pair_step(step: int, ratio: float) -> bool:
    """Deterministic interleave hitting the ratio to within one batch."""
    return int((step + 1) * ratio) > int(step * ratio)


class AdamW:
    """Adaptive moments with decoupled weight decay on matrix-shaped
    parameters only (gains, biases, and the temperature are exempt)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, groups: dict[str, list[tuple[str, ad.Tensor]]], lrs: dict[str, float],
             weight_decay: float, clip_norm: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        self.t += 1
        sq = 0.0
        for _, params in groups.items():
            for _, p in params:
                if p.grad is not None:
                    sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(sq))
        coef = clip_norm / norm if (clip_norm > 0 and norm > clip_norm) else 1.0
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for group, params in groups.items():
            lr = lrs[group]
            for name, p in params:
                g = (p.grad if p.grad is not None else np.zeros_like(p.data)) * coef
                m = self.m.setdefault(name, np.zeros_like(p.data))
                v = self.v.setdefault(name, np.zeros_like(p.data))
                m += (1.0 - self.beta1) * (g - m)
                v += (1.0 - self.beta2) * (g * g - v)
                update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
                if weight_decay > 0 and p.data.ndim >= 2:
                    p.data -= lr * weight_decay * p.data
                p.data -= lr * update
        return norm

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out


@dataclass
class TrainState:
    """Everything a run needs to continue. There is no mutable RNG object:
    every random draw derives from (cfg.seed, step), so seed and step counter
    together ARE the generator state."""

    model: KgModel
    opt: AdamW
    cfg: TrainConfig
    step: int = 0
    teacher: KgModel | None = None


class Trainer:
    def __init__(self, model: KgModel, cfg: TrainConfig, graph: KnowledgeGraph,
                 pairs: list | None = None, teacher: KgModel | None = None,
                 out_dir: str | Path | None = None, state: TrainState | None = None):
        cfg.validate()
        if cfg.use_e2r and graph.n_relations > model.cfg.n_relations:
            raise GraphError(
                f"graph has {graph.n_relations} relations but the model classifies "
                f"{model.cfg.n_relations}")
        if cfg.kd and teacher is None:
            raise ValueError("distillation requested but no teacher given")
        if cfg.pair_ratio > 0 and not pairs:
            raise ValueError("pair_ratio > 0 requires pairs")
        self.model = model
        self.cfg = cfg
        self.graph = graph
        self.pairs = pairs or []
        self.teacher = teacher
        self.state = state if state is not None else TrainState(
            model=model, opt=AdamW(), cfg=cfg, teacher=teacher)
        self.groups = model.param_groups()
        self.out_dir = Path(out_dir) if out_dir else None
        self.metrics_path: Path | None = None
        self._metrics_file = None
        self.last_checkpoint: str | None = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.metrics_path = self.out_dir / "metrics.jsonl"
            mode = "a" if self.state.step > 0 else "w"
            self._metrics_file = open(self.metrics_path, mode, encoding="utf-8")
        if self.teacher is not None:
            self.teacher_digest = parameter_digest(self.teacher)

    @classmethod
    def resume(cls, state: TrainState, graph: KnowledgeGraph, pairs: list | None = None,
               out_dir: str | Path | None = None) -> "Trainer":
        """Continue a loaded run; the remaining trajectory replays exactly."""
        return cls(state.model, state.cfg, graph, pairs=pairs,
                   teacher=state.teacher, out_dir=out_dir, state=state)

    # ------------------------------------------------------------------

    def _step_rng(self, tag: int) -> np.random.Generator:
        return np.random.default_rng((self.cfg.seed, self.state.step, tag))

    def _batch_seed(self, tag: int) -> int:
        return (self.cfg.seed * 1_000_003 + self.state.step) * 7 + tag

    def train_step(self) -> obj.LossReport:
        cfg = self.cfg
        step = self.state.step
        if step >= cfg.steps:
            raise ValueError(f"step {step} beyond configured {cfg.steps}")
        drop_rng = self._step_rng(0)
        pair_step = cfg.pair_ratio > 0 and is_pair_step(step, cfg.pair_ratio)
        losses: dict[str, ad.Tensor] = {}
        kd_term = clip_term = None
        if pair_step:
            # a pair step normally contributes only the distillation term and
            # the plain contrastive loss over the same pairs is reported as a
            # baseline; use_clip promotes it into the total (pair warm starts)
            idx = self._step_rng(1).choice(len(self.pairs), size=min(cfg.pair_batch_size, len(self.pairs)),
                                           replace=False)
            images = [self.pairs[i][0] for i in idx]
            captions = [self.pairs[i][1] for i in idx]
            pair_losses = self.model.pair_losses(
                images, captions, teacher=self.teacher if cfg.kd else None,
                rng=drop_rng, training=True)
            clip_term = pair_losses["clip"]
            kd_term = pair_losses.get("kd")
        else:
            # the draw needs pairwise-distinct tails, so the incoming index
            # size (distinct tail entities) caps the batch, not the triplet count
            batch = sample_batch(self.graph, min(cfg.batch_size, len(self.graph.incoming)),
                                 self._batch_seed(2))
            losses = self.model.kg_losses(
                batch, use_e2e=cfg.use_e2e, use_e2r=cfg.use_e2r, use_g2e=cfg.use_g2e,
                graph=self.graph, rng=drop_rng, training=True)

        try:
            total, report = obj.total_loss(
                losses.get("e2e"), losses.get("e2r"), losses.get("g2e"), kd_term,
                clip_baseline=clip_term, include_clip=cfg.use_clip,
                dtype=self.model.dtype)
        except FloatingPointError as exc:
            raise NumericalAbort(
                f"step {step}: {exc}; last good checkpoint: {self.last_checkpoint}",
                self.last_checkpoint) from exc

        lrs = {name: lr_at(step, peak, cfg) for name, peak in
               (("encoders", cfg.lr_encoders), ("fusion", cfg.lr_fusion))}
        if losses or kd_term is not None or (cfg.use_clip and clip_term is not None):
            ad.zero_grads(self.model.params())
            total.backward()
            grad_norm = self.state.opt.step(self.groups, lrs, cfg.weight_decay, cfg.clip_norm)
        else:
            grad_norm = 0.0
        self.state.step += 1
        if self._metrics_file:
            line = {"step": step, "pair_step": pair_step, "grad_norm": round(grad_norm, 6),
                    "lr_encoders": lrs["encoders"], "lr_fusion": lrs["fusion"],
                    **report.to_dict()}
            self._metrics_file.write(json.dumps(line) + "\n")
            self._metrics_file.flush()
        if cfg.checkpoint_every and self.out_dir and self.state.step % cfg.checkpoint_every == 0:
            path = self.out_dir / f"step{self.state.step:06d}.ckpt"
            checkpoint_save(self.state, path)
            self.last_checkpoint = str(path)
        return report

    def run(self, until: int | None = None, callback=None) -> obj.LossReport | None:
        """Advance to ``until`` (default: configured steps). ``callback(step,
        trainer)`` may return True to stop early."""
        report = None
        target = self.cfg.steps if until is None else min(until, self.cfg.steps)
        while self.state.step < target:
            report = self.train_step()
            if callback is not None and callback(self.state.step, self):
                break
        if self.teacher is not None and parameter_digest(self.teacher) != self.teacher_digest:
            raise RuntimeError("teacher parameters changed during training")
        return report

    def close(self) -> None:
        if self._metrics_file:
            self._metrics_file.close()
            self._metrics_file = None


# ---------------------------------------------------------------------------
# checkpointing


def parameter_digest(model: KgModel) -> str:
    h = hashlib.sha256()
    for name, p in model.named_params():
        h.update(name.encode())
        h.update(np.asarray(p.data).tobytes())
    return h.hexdigest()


def _collect_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {f"param.{n}": p.data for n, p in state.model.named_params()}
    tensors.update({f"opt.{k}": arr for k, arr in state.opt.state_tensors().items()})
    if state.teacher is not None:
        tensors.update({f"teacher.{n}": p.data for n, p in state.teacher.named_params()})
    return tensors


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    """Binary layout: magic, version, sha256 of everything after the digest,
    header length, JSON header, raw tensor payload."""
    tensors = _collect_tensors(state)
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])  # tobytes() below copies in C order
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str, "offset": len(payload),
                        "nbytes": arr.nbytes})
        payload.extend(arr.tobytes())
    header = json.dumps({
        "step": state.step,
        "opt_t": state.opt.t,
        "model_config": state.model.cfg.to_dict(),
        "train_config": state.cfg.to_dict(),
        "teacher_config": state.teacher.cfg.to_dict() if state.teacher else None,
        "vocab": state.model.vocab,
        "tensors": entries,
    }).encode("utf-8")
    body = struct.pack("<Q", len(header)) + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(digest)
        f.write(body)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Verify and parse a checkpoint; returns (header, tensors by name)."""
    data = Path(path).read_bytes()
    if len(data) < 48 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = data[8:40]
    body = data[40:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch (truncated or corrupted)")
    header_len = struct.unpack_from("<Q", body, 0)[0]
    header = json.loads(body[8:8 + header_len].decode("utf-8"))
    payload = body[8 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])) \
            .reshape(entry["shape"]).copy()
    return header, tensors


def checkpoint_load(path: str | Path) -> TrainState:
    header, tensors = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict(header["model_config"])
    model = KgModel(model_cfg, vocab=header["vocab"])
    named = dict(model.named_params())
    teacher = None
    teacher_named: dict[str, ad.Tensor] = {}
    if header.get("teacher_config"):
        teacher = KgModel(ModelConfig.from_dict(header["teacher_config"]), vocab=header["vocab"])
        teacher_named = dict(teacher.named_params())
    opt = AdamW()
    opt.t = header["opt_t"]
    for name, arr in tensors.items():
        if name.startswith("param."):
            target = named[name[len("param."):]]
        elif name.startswith("teacher."):
            target = teacher_named[name[len("teacher."):]]
        elif name.startswith("opt.m."):
            opt.m[name[len("opt.m."):]] = arr
            continue
        elif name.startswith("opt.v."):
            opt.v[name[len("opt.v."):]] = arr
            continue
        else:
            raise ValueError(f"{path}: unknown tensor entry {name}")
        if target.data.shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        target.data = arr.astype(target.data.dtype, copy=True)
    cfg = TrainConfig(**header["train_config"])
    return TrainState(model=model, opt=opt, cfg=cfg, step=header["step"], teacher=teacher)
