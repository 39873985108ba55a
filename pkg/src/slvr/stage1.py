"""Supervised latent training: visual alignment, semantic alignment, answer CE."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import model as M
from .numerics import ops, serialize
from .numerics.optim import Adam
from .numerics.rng import Rng
from .numerics.tensor import DimensionError, NumericError, Tensor, as_tensor
from .synthworld import MultiQuerySample, RegionSample, WorldConfig, featurize

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss_total", "loss_vis", "loss_sem", "loss_ans", "wallclock_ms")


class TrainingDiverged(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class Stage1Config:
    lr: float = 3e-3
    steps: int = 1500
    warmup_steps: int = 50
    min_lr_frac: float = 0.05
    batch_size: int = 32
    w_vis: float = 1.0
    w_sem: float = 1.0
    w_ans: float = 1.0
    seed: int = 0
    eval_every: int = 500
    target_seed: int = 17
    anchor_query: str = "q1"  # "q1" | "mean"
    record_wallclock: bool = False

    def validate(self) -> None:
        if min(self.w_vis, self.w_sem, self.w_ans) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.lr <= 0 or not 0.0 <= self.min_lr_frac <= 1.0 or self.warmup_steps < 0:
            raise ConfigurationError("lr must be > 0, min_lr_frac in [0, 1], warmup_steps >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")
        if self.anchor_query not in ("q1", "mean"):
            raise ConfigurationError(f"anchor_query must be 'q1' or 'mean', got {self.anchor_query!r}")


def learning_rate(config: Stage1Config, step: int) -> float:
    """Linear warmup then cosine decay to ``min_lr_frac * lr`` (``step`` is 1-based)."""
    if step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = max(1, config.steps - config.warmup_steps)
    frac = min(1.0, (step - config.warmup_steps) / span)
    floor = config.min_lr_frac
    return config.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


# -- losses ---------------------------------------------------------------------------

def target_projection(d_v: int, d_model: int, seed: int) -> np.ndarray:
    """Frozen map from encoder feature width to model width (unit-scale output)."""
    return Rng(seed, 0x7A6E).normal((d_v, d_model)) / math.sqrt(d_v * d_model)


def loss_vis(h_vis, targets) -> Tensor:
    """Sum over region tokens of the squared L2 gap to the projected encoder features."""
    h_vis, targets = as_tensor(h_vis), as_tensor(targets)
    if h_vis.shape[0] != targets.shape[0]:
        raise DimensionError(f"loss_vis: {h_vis.shape[0]} latents vs {targets.shape[0]} targets")
    return ops.mse(h_vis, targets, reduction="sum_over_tokens")


def loss_sem(e_hat, e) -> Tensor:
    """(1/d_e) ||e_hat - e||^2."""
    e_hat, e = as_tensor(e_hat), as_tensor(e)
    if e_hat.shape != e.shape:
        raise DimensionError(f"loss_sem: {e_hat.shape} vs {e.shape}")
    return ops.mse(e_hat, e, reduction="mean_over_dims")


@dataclass
class PreparedSet:
    """Region samples with sequences, alignment targets and supervision cached."""

    seqs: list
    targets: list        # per-sample [T_v, d_model] projected encoder features
    embeddings: np.ndarray  # [N, d_e]
    answers: np.ndarray     # [N]

    def __len__(self) -> int:
        return len(self.seqs)


def prepare(samples: list[RegionSample], world: WorldConfig, cfg: M.ModelConfig,
            target_seed: int = 17) -> PreparedSet:
    proj = target_projection(cfg.d_v, cfg.d_model, target_seed)
    seqs, targets = [], []
    for s in samples:
        feats = featurize(s.scene, world.featurizer_seed, world.feature_proj_dim)
        seq = M.build_sequence(feats, s.bbox, s.question, s.scene.grid, cfg.context, cfg.max_seq_len)
        seqs.append(seq)
        targets.append(feats[list(seq.roi)] @ proj)
    return PreparedSet(seqs, targets, np.stack([s.embedding for s in samples]),
                       np.array([s.answer for s in samples]))


def loss_stage1(params, cfg: M.ModelConfig, data: PreparedSet, idx, weights) -> tuple[Tensor, dict]:
    """Weighted batch-mean of the three terms; returns ``(total, breakdown)``.

    ``weights`` is ``(w_vis, w_sem, w_ans)``.
    """
    w_vis, w_sem, w_ans = weights
    idx = np.asarray(idx)
    b = len(idx)
    seqs = [data.seqs[i] for i in idx]
    lay = M.layout_encode(cfg, seqs)
    enc = M.encode(params, cfg, lay)
    targets = np.concatenate([data.targets[i] for i in idx], axis=0)
    l_vis = ops.scale(loss_vis(enc.h_vis, targets), 1.0 / b)
    e_hat = M.project_semantic(params["proj_W"], enc.z_sem)
    l_sem = ops.scale(loss_sem(e_hat, data.embeddings[idx]), 1.0 / b)
    dec = M.decode(params, cfg, enc, M.layout_decode(cfg, lay, np.arange(b), [s.question for s in seqs]))
    logits = ops.reshape(ops.index(dec.logits, (slice(None), 0)), (b, cfg.vocab_size))
    l_ans = ops.softmax_cross_entropy(logits, data.answers[idx])
    total = ops.add(ops.add(ops.scale(l_vis, w_vis), ops.scale(l_sem, w_sem)), ops.scale(l_ans, w_ans))
    breakdown = {"loss_total": total.item(), "loss_vis": l_vis.item(),
                 "loss_sem": l_sem.item(), "loss_ans": l_ans.item()}
    return total, breakdown


def eval_loss(arrays: dict[str, np.ndarray], cfg: M.ModelConfig, data: PreparedSet,
              weights, n: int = 256, batch: int = 64) -> dict:
    """Loss breakdown over the first ``n`` samples (no gradient)."""
    params = M.as_params(arrays, requires_grad=False)
    n = min(n, len(data))
    acc = {k: 0.0 for k in ("loss_total", "loss_vis", "loss_sem", "loss_ans")}
    for start in range(0, n, batch):
        idx = np.arange(start, min(start + batch, n))
        _, br = loss_stage1(params, cfg, data, idx, weights)
        for k in acc:
            acc[k] += br[k] * len(idx)
    return {k: v / n for k, v in acc.items()}


def greedy_accuracy(arrays: dict[str, np.ndarray], cfg: M.ModelConfig, data: PreparedSet,
                    batch: int = 128) -> float:
    params = M.as_params(arrays, requires_grad=False)
    correct = 0
    for start in range(0, len(data), batch):
        idx = np.arange(start, min(start + batch, len(data)))
        seqs = [data.seqs[i] for i in idx]
        lay = M.layout_encode(cfg, seqs)
        enc = M.encode(params, cfg, lay)
        dec = M.decode(params, cfg, enc, M.layout_decode(cfg, lay, np.arange(len(idx)), [s.question for s in seqs]))
        pred = dec.logits.data[:, 0, :].argmax(axis=1)
        correct += int((pred == data.answers[idx]).sum())
    return correct / len(data)


# -- training loop --------------------------------------------------------------------

@dataclass
class Stage1Result:
    params: dict[str, np.ndarray]
    optimizer: Adam
    metrics: list[dict]
    step: int


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_csv(rows: list[dict], columns=METRIC_COLUMNS, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) if r.get(c, "") != "" else "" for c in columns])
    return buf.getvalue()


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Mini-batch for ``step``; a pure function of (seed, step) so resumes replay exactly."""
    return np.sort(Rng(seed, 0xBA7C, step).choice(n, size=min(batch_size, n), replace=False))


def train_stage1(config: Stage1Config, data: PreparedSet, cfg: M.ModelConfig,
                 init: dict[str, np.ndarray] | None = None, optimizer: Adam | None = None,
                 start_step: int = 0, checkpoint_path=None, checkpoint_every: int = 0,
                 meta: dict | None = None, stop_step: int | None = None) -> Stage1Result:
    """Adam on the combined loss. Step ``k`` (1-based) logs the loss of the
    parameters before its update.

    ``stop_step`` interrupts the run after that step (the learning-rate
    schedule still follows ``config.steps``); the checkpoint is then marked
    incomplete so it can be resumed.

    On a non-finite loss the last written checkpoint is left untouched and
    :class:`TrainingDiverged` is raised.
    """
    config.validate()
    arrays = init if init is not None else M.init_params(cfg, config.seed)
    params = M.as_params(arrays)
    opt = optimizer or Adam(config.lr)
    weights = (config.w_vis, config.w_sem, config.w_ans)
    rows: list[dict] = []
    t0 = time.perf_counter()
    step = start_step
    last = config.steps if stop_step is None else min(stop_step, config.steps)
    for step in range(start_step + 1, last + 1):
        idx = batch_indices(config.seed, step, len(data), config.batch_size)
        try:
            total, br = loss_stage1(params, cfg, data, idx, weights)
            if not math.isfinite(br["loss_total"]):
                raise TrainingDiverged(f"stage-1 loss is {br['loss_total']} at step {step}")
            total.backward()
            opt.lr = learning_rate(config, step)
            params = opt.step(params)
        except NumericError as exc:
            raise TrainingDiverged(f"stage-1 diverged at step {step}: {exc}") from exc
        wall = round((time.perf_counter() - t0) * 1000) if config.record_wallclock else 0
        rows.append({"step": step, **br, "wallclock_ms": wall})
        if config.eval_every and step % config.eval_every == 0:
            log.info("stage1 step %d total=%.4f vis=%.4f sem=%.5f ans=%.4f", step,
                     br["loss_total"], br["loss_vis"], br["loss_sem"], br["loss_ans"])
        if checkpoint_path and checkpoint_every and step % checkpoint_every == 0 and step < config.steps:
            save_stage1_checkpoint(checkpoint_path, M.param_arrays(params), opt, cfg, config, step,
                                   complete=False, meta=meta)
    result = Stage1Result(M.param_arrays(params), opt, rows, step)
    if checkpoint_path:
        save_stage1_checkpoint(checkpoint_path, result.params, opt, cfg, config, step,
                               complete=step == config.steps, meta=meta)
    return result


def save_stage1_checkpoint(path, arrays, opt: Adam, cfg: M.ModelConfig, config: Stage1Config,
                           step: int, complete: bool, meta: dict | None = None) -> None:
    info = {"stage": 1, "complete": complete, "step": step, "seed": config.seed,
            "model_config": asdict(cfg), "stage1_config": asdict(config)}
    if meta:
        info.update(meta)
    M.save_checkpoint(path, arrays, info, extra=opt.state_arrays())


# -- anchors --------------------------------------------------------------------------

def region_key(scene_hash: str, bbox) -> str:
    return f"{scene_hash[:16]}-{'-'.join(str(int(v)) for v in bbox)}"


class AnchorStore:
    """Frozen per-region reference latents."""

    def __init__(self, entries: dict[str, tuple[np.ndarray, np.ndarray]] | None = None):
        self._entries: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for k, (z, h) in (entries or {}).items():
            z, h = np.array(z), np.array(h)
            z.flags.writeable = False
            h.flags.writeable = False
            self._entries[k] = (z, h)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def get(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        """``(z_sem_bar [d_model], H_vis_bar [T_v, d_model])``."""
        try:
            return self._entries[key]
        except KeyError:
            raise ConfigurationError(f"no anchor stored for region key {key!r}") from None

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in sorted(self._entries):
            z, h = self._entries[k]
            out[f"anchor/{k}/z_sem"] = z
            out[f"anchor/{k}/H_vis"] = h
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AnchorStore":
        entries: dict[str, list] = {}
        for name, arr in arrays.items():
            _, key, field_ = name.split("/")
            entries.setdefault(key, [None, None])[0 if field_ == "z_sem" else 1] = arr
        return cls({k: (v[0], v[1]) for k, v in entries.items()})

    def save(self, path) -> None:
        serialize.save(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "AnchorStore":
        return cls.from_arrays(serialize.load(path))


def sample_region_key(s: MultiQuerySample | RegionSample) -> str:
    return region_key(s.scene.content_hash(), s.bbox)


def multiquery_sequences(samples: list[MultiQuerySample], world: WorldConfig, cfg: M.ModelConfig):
    """``(q1 sequence, q2 sequence)`` per sample."""
    out = []
    for s in samples:
        feats = featurize(s.scene, world.featurizer_seed, world.feature_proj_dim)
        out.append((
            M.build_sequence(feats, s.bbox, s.q1, s.scene.grid, cfg.context, cfg.max_seq_len),
            M.build_sequence(feats, s.bbox, s.q2, s.scene.grid, cfg.context, cfg.max_seq_len),
        ))
    return out


def extract_anchors(arrays: dict[str, np.ndarray], meta: dict, samples: list[MultiQuerySample],
                    world: WorldConfig, anchor_query: str = "q1", batch: int = 128) -> AnchorStore:
    """Latents of the frozen stage-1 model for every region in ``samples``."""
    if meta.get("stage") != 1 or not meta.get("complete", False):
        raise ConfigurationError("anchor extraction needs a completed stage-1 checkpoint")
    cfg = M.config_from_meta(meta)
    params = M.as_params(arrays, requires_grad=False)
    pairs = multiquery_sequences(samples, world, cfg)
    entries: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for start in range(0, len(samples), batch):
        chunk = range(start, min(start + batch, len(samples)))
        views = [0] if anchor_query == "q1" else [0, 1]
        zs, hs = [], []
        for v in views:
            enc = M.encode(params, cfg, M.layout_encode(cfg, [pairs[i][v] for i in chunk]))
            zs.append(enc.z_sem.data)
            hs.append(enc.h_vis.data)
        z = zs[0] if len(zs) == 1 else (zs[0] + zs[1]) / 2.0
        h = hs[0] if len(hs) == 1 else (hs[0] + hs[1]) / 2.0
        offsets = np.cumsum([0] + [pairs[i][0].t_v for i in chunk])
        for j, i in enumerate(chunk):
            key = sample_region_key(samples[i])
            entries.setdefault(key, (z[j], h[offsets[j]:offsets[j + 1]]))
    return AnchorStore(entries)
