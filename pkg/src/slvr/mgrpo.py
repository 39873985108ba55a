"""Multi-query group relative policy optimization over region-anchored groups.

Each group is one region with two queries and ``G`` sampled rollouts per
query. Rollout latents are the region/semantic latents of the rollout's own
forward pass plus stored Gaussian exploration noise, which is replayed when
the surrogate is re-evaluated under the current parameters.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .numerics import ops
from .numerics.optim import Adam
from .numerics.rng import Rng
from .numerics.tensor import NumericError, Tensor
from .stage1 import AnchorStore, ConfigurationError, TrainingDiverged, multiquery_sequences, sample_region_key
from .synthworld import MultiQuerySample, WorldConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "mean_r_ans", "mean_r_cons", "mean_r_stab", "mean_total",
                  "clip_fraction", "kl", "eval_Q1", "eval_Q2", "eval_Both")

KL_FLOOR = 1e-12
NORM_EPS = 1e-12


@dataclass
class MgrpoConfig:
    G: int = 8
    clip_eps: float = 0.2
    beta: float = 0.04
    lambda_sem: float = 1.0
    lambda_vis: float = 0.1
    w_cons: float = 0.5
    w_stab: float = 0.5
    tau_sem: float = 0.5
    tau_vis: float = 0.5
    sigma_lat: float = 0.05
    temperature: float = 1.0
    steps: int = 300
    lr: float = 1e-4
    seed: int = 0
    advantage_scope: str = "whole_group"  # "whole_group" | "per_query"
    reward_mode: str = "composite"        # "composite" | "hybrid"
    query_mode: str = "paired"            # "paired" | "independent" | "single"
    kl_target: str = "old"                # "old" | "stage1_ref"
    groups_per_step: int = 16
    num_groups: int = 512
    inner_steps: int = 1
    answer_len: int = 1
    eval_every: int = 50
    adv_eps: float = 1e-8

    def validate(self) -> None:
        if self.G < 2:
            raise ConfigurationError("G must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError("clip_eps must lie in (0, 1)")
        if self.beta < 0 or self.tau_sem < 0 or self.tau_vis < 0 or self.sigma_lat < 0:
            raise ConfigurationError("beta, margins and sigma_lat must be >= 0")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        choices = {"advantage_scope": ("whole_group", "per_query"), "reward_mode": ("composite", "hybrid"),
                   "query_mode": ("paired", "independent", "single"), "kl_target": ("old", "stage1_ref")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if min(self.steps, self.groups_per_step, self.num_groups, self.inner_steps, self.answer_len) < 1:
            raise ConfigurationError("steps, groups_per_step, num_groups, inner_steps, answer_len must be >= 1")


@dataclass
class RewardBreakdown:
    r_ans: float
    r_cons: float
    r_stab: float
    total: float


@dataclass
class Rollout:
    query: int                      # 1 or 2
    g: int
    h_vis: np.ndarray               # [T_v, d_model] latents the answer was conditioned on
    z_sem: np.ndarray               # [d_model]
    h_noise: np.ndarray
    z_noise: np.ndarray
    tokens: tuple[int, ...]
    old_logprobs: np.ndarray        # [|O|]
    old_dists: np.ndarray           # [|O|, V]
    ref_dists: np.ndarray | None = None
    reward: RewardBreakdown | None = None
    advantage: float = 0.0

    @property
    def prediction(self) -> int:
        return self.tokens[0]


@dataclass
class RolloutGroup:
    key: str
    sample: MultiQuerySample
    queries: tuple[int, ...]        # subset of (1, 2)
    rollouts: list[Rollout] = field(default_factory=list)
    anchor: tuple[np.ndarray, np.ndarray] | None = None

    def question(self, i: int):
        return self.sample.q1 if i == 1 else self.sample.q2

    def gold(self, i: int) -> int:
        return self.sample.answer1 if i == 1 else self.sample.answer2


# -- rewards -----------------------------------------------------------------------

def reward_answer(pred: int, gold: int) -> int:
    return int(pred == gold)


def reward_consistency(z1, z2, h1, h2, lambda_sem: float, lambda_vis: float) -> float:
    """Cross-query consistency for one pairing; the factor 2 counts both ordered pairs."""
    h1, h2 = np.asarray(h1, dtype=np.float64), np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError(f"paired rollouts disagree on region length: {h1.shape} vs {h2.shape}")
    sem = np.linalg.norm(np.asarray(z1, dtype=np.float64) - np.asarray(z2, dtype=np.float64))
    vis = np.linalg.norm(h1 - h2, axis=-1).mean()
    return -2.0 * (lambda_sem * sem + lambda_vis * vis)


def reward_stability(z, h, z_bar, h_bar, tau_sem: float, tau_vis: float) -> float:
    """Margin hinge on drift from the stored stage-1 latents."""
    h, h_bar = np.asarray(h, dtype=np.float64), np.asarray(h_bar, dtype=np.float64)
    if h.shape != h_bar.shape:
        raise ValueError(f"anchor has {h_bar.shape[0]} region tokens, rollout has {h.shape[0]}")
    sem = np.linalg.norm(np.asarray(z, dtype=np.float64) - np.asarray(z_bar, dtype=np.float64))
    vis = np.linalg.norm(h - h_bar, axis=-1).mean()
    return -max(0.0, sem - tau_sem) - max(0.0, vis - tau_vis)


def compute_group_rewards(group: RolloutGroup, config: MgrpoConfig) -> None:
    by_query: dict[int, dict[int, Rollout]] = {}
    for r in group.rollouts:
        by_query.setdefault(r.query, {})[r.g] = r
    paired = config.query_mode == "paired" and len(by_query) == 2
    for r in group.rollouts:
        r_ans = reward_answer(r.prediction, group.gold(r.query))
        r_cons = 0.0
        if paired:
            a, b = by_query[1][r.g], by_query[2][r.g]
            r_cons = reward_consistency(a.z_sem, b.z_sem, a.h_vis, b.h_vis, config.lambda_sem, config.lambda_vis)
        z_bar, h_bar = group.anchor
        r_stab = reward_stability(r.z_sem, r.h_vis, z_bar, h_bar, config.tau_sem, config.tau_vis)
        if config.reward_mode == "composite":
            total = r_ans + config.w_cons * r_cons + config.w_stab * r_stab
        else:
            total = float(r_ans)
        r.reward = RewardBreakdown(float(r_ans), float(r_cons), float(r_stab), float(total))


def compute_advantages(rewards, query_ids, scope: str = "whole_group", eps: float = 1e-8) -> np.ndarray:
    """Group-relative advantages ``(R - mean) / (std + eps)`` over the chosen scope."""
    rewards = np.asarray(rewards, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    if scope == "whole_group":
        scopes = [np.arange(len(rewards))]
    elif scope == "per_query":
        scopes = [np.flatnonzero(query_ids == q) for q in np.unique(query_ids)]
    else:
        raise ConfigurationError(f"unknown advantage scope {scope!r}")
    adv = np.zeros_like(rewards)
    for idx in scopes:
        if len(idx) < 2:
            raise ConfigurationError("an advantage scope needs at least 2 rollouts")
        r = rewards[idx]
        if r.max() == r.min():
            continue  # the mean of equal floats can round off r; keep Â exactly 0
        adv[idx] = (r - r.mean()) / (r.std() + eps)
    return adv


def assign_advantages(group: RolloutGroup, config: MgrpoConfig) -> None:
    adv = compute_advantages([r.reward.total for r in group.rollouts], [r.query for r in group.rollouts],
                             config.advantage_scope, config.adv_eps)
    for r, a in zip(group.rollouts, adv):
        r.advantage = float(a)


def kl_divergence(p, q) -> float:
    """KL(p || q) = sum p ln(p/q); q is floored at 1e-12 where p > 0."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(q[support] <= 0):
        warnings.warn("kl_divergence: q has zero mass where p > 0; flooring at 1e-12", RuntimeWarning)
    qs = np.maximum(q[support], KL_FLOOR)
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(qs))))


def clipped_token_term(ratio: float, advantage: float, eps: float) -> float:
    return min(ratio * advantage, min(max(ratio, 1.0 - eps), 1.0 + eps) * advantage)


# -- sampling ------------------------------------------------------------------------

@dataclass
class GroupBatch:
    """Groups plus the cached sequences used to run them."""

    groups: list[RolloutGroup]
    seqs: list           # per group: (q1 sequence, q2 sequence)


def _group_queries(config: MgrpoConfig) -> list[tuple[int, ...]]:
    if config.query_mode == "paired":
        return [(1, 2)]
    if config.query_mode == "single":
        return [(1,)]
    return [(1,), (2,)]


def _decode_rows(params, cfg, enc, batch: GroupBatch, rows, prefixes, h_noise, z_noise):
    lay = M.layout_decode(cfg, enc.layout, [g for g, _ in rows],
                          [batch.seqs[g][i - 1].question for g, i in rows], prefixes)
    return M.decode(params, cfg, enc, lay, h_noise, z_noise)


def sample_groups(old_arrays: dict[str, np.ndarray], cfg: M.ModelConfig, samples: list[MultiQuerySample],
                  seqs: list, anchors: AnchorStore, config: MgrpoConfig, rng: Rng,
                  ref_arrays: dict[str, np.ndarray] | None = None) -> GroupBatch:
    """Roll out ``G`` answers per query for each sample under the frozen old policy."""
    groups: list[RolloutGroup] = []
    gseqs = []
    for s, sq in zip(samples, seqs):
        key = sample_region_key(s)
        if key not in anchors:
            raise ConfigurationError(f"no anchor stored for region key {key!r}")
        for qs in _group_queries(config):
            groups.append(RolloutGroup(key, s, qs, anchor=anchors.get(key)))
            gseqs.append(sq)
    batch = GroupBatch(groups, gseqs)
    old = M.as_params(old_arrays, requires_grad=False)
    enc = M.encode(old, cfg, M.layout_encode(cfg, [sq[0] for sq in gseqs]))
    d = cfg.d_model
    rows, h_noise, z_noise = [], [], []
    for gi, grp in enumerate(groups):
        t_v = gseqs[gi][0].t_v
        for i in grp.queries:
            for g in range(config.G):
                rows.append((gi, i))
                h_noise.append(rng.normal((t_v, d), std=config.sigma_lat) if config.sigma_lat else np.zeros((t_v, d)))
                z_noise.append(rng.normal(d, std=config.sigma_lat) if config.sigma_lat else np.zeros(d))
    h_flat, z_arr = np.concatenate(h_noise, axis=0), np.stack(z_noise)
    tokens = [[] for _ in rows]
    logps = [[] for _ in rows]
    dists = [[] for _ in rows]
    dec = None
    for t in range(config.answer_len):
        dec = _decode_rows(old, cfg, enc, batch, rows, [tuple(tk) for tk in tokens], h_flat, z_arr)
        last = dec.logits.data[:, -1, :]
        for j in range(len(rows)):
            tok, lp, probs = M.sample_from_logits(last[j], config.temperature, rng)
            tokens[j].append(tok)
            logps[j].append(lp)
            dists[j].append(probs)
    ref_d = None
    if ref_arrays is not None:
        ref = M.as_params(ref_arrays, requires_grad=False)
        ref_enc = M.encode(ref, cfg, M.layout_encode(cfg, [sq[0] for sq in gseqs]))
        prefixes = [tuple(tk[:-1]) for tk in tokens]
        ref_d = M.softmax_np(_decode_rows(ref, cfg, ref_enc, batch, rows, prefixes, h_flat, z_arr).logits.data)
    h_lat = dec.h_vis.data
    z_lat = dec.z_sem.data
    off = 0
    counters = {}
    for j, (gi, i) in enumerate(rows):
        t_v = gseqs[gi][0].t_v
        g = counters.get((gi, i), 0)
        counters[(gi, i)] = g + 1
        groups[gi].rollouts.append(Rollout(
            query=i, g=g, h_vis=h_lat[off:off + t_v], z_sem=z_lat[j],
            h_noise=h_flat[off:off + t_v], z_noise=z_arr[j], tokens=tuple(tokens[j]),
            old_logprobs=np.array(logps[j]), old_dists=np.stack(dists[j]),
            ref_dists=None if ref_d is None else ref_d[j],
        ))
        off += t_v
    for grp in groups:
        compute_group_rewards(grp, config)
        assign_advantages(grp, config)
    return batch


def sample_group(old_arrays, cfg: M.ModelConfig, sample: MultiQuerySample, anchors: AnchorStore,
                 config: MgrpoConfig, rng: Rng, world: WorldConfig | None = None) -> RolloutGroup:
    """Single-region convenience wrapper around :func:`sample_groups` (paired queries)."""
    seqs = multiquery_sequences([sample], world or WorldConfig(), cfg)
    paired = MgrpoConfig(**{**asdict(config), "query_mode": "paired"})
    return sample_groups(old_arrays, cfg, [sample], seqs, anchors, paired, rng).groups[0]


# -- objective -----------------------------------------------------------------------

def _segment_mean_matrix(lengths) -> np.ndarray:
    total = int(np.sum(lengths))
    m = np.zeros((len(lengths), total))
    off = 0
    for k, n in enumerate(lengths):
        m[k, off:off + n] = 1.0 / n
        off += n
    return m


def surrogate_objective(params: dict[str, Tensor], cfg: M.ModelConfig, batch: GroupBatch,
                        config: MgrpoConfig) -> tuple[Tensor, dict]:
    """Clipped group-relative surrogate minus the KL penalty (to be maximized).

    Each group contributes the mean over its queries and rollouts; groups are
    averaged. Returns the objective and diagnostics (``clip_fraction``, ``kl``,
    ``ratio_max_dev``).
    """
    groups = batch.groups
    enc = M.encode(params, cfg, M.layout_encode(cfg, [sq[0] for sq in batch.seqs]))
    rows, prefixes, h_noise, z_noise, weights, adv, old_lp, old_d, ref_d = [], [], [], [], [], [], [], [], []
    for gi, grp in enumerate(groups):
        w = 1.0 / (len(groups) * len(grp.rollouts))
        for r in grp.rollouts:
            rows.append((gi, r.query))
            prefixes.append(r.tokens[:-1])
            h_noise.append(r.h_noise)
            z_noise.append(r.z_noise)
            weights.append(w)
            adv.append(r.advantage)
            old_lp.append(r.old_logprobs)
            old_d.append(r.old_dists)
            ref_d.append(r.ref_dists)
    n_tok = len(prefixes[0]) + 1
    dec = _decode_rows(params, cfg, enc, batch, rows, prefixes, np.concatenate(h_noise, axis=0), np.stack(z_noise))
    logp = ops.log_softmax(dec.logits, axis=-1)                      # [R, n, V]
    n_rows = len(rows)
    tok = np.array([list(grp_r.tokens) for grp in groups for grp_r in grp.rollouts])
    lp_tok = ops.index(logp, (np.arange(n_rows)[:, None], np.arange(n_tok)[None, :], tok))  # [R, n]
    old_lp = np.stack(old_lp)
    ratio = ops.exp(ops.sub(lp_tok, old_lp))
    a = np.repeat(np.asarray(adv)[:, None], n_tok, axis=1)
    eps = config.clip_eps
    term = ops.minimum(ops.mul(ratio, a), ops.mul(ops.clip(ratio, 1.0 - eps, 1.0 + eps), a))
    w = np.asarray(weights)
    surrogate = ops.sum(ops.mul(ops.mean(term, axis=1), w))

    target = np.stack(ref_d) if config.kl_target == "stage1_ref" else np.stack(old_d)
    p = ops.exp(logp)
    kl_rows = ops.mean(ops.sum(ops.mul(p, ops.sub(logp, np.log(np.maximum(target, KL_FLOOR)))), axis=2), axis=1)
    kl = ops.sum(ops.mul(kl_rows, w))
    objective = ops.sub(surrogate, ops.scale(kl, config.beta))

    if config.reward_mode == "hybrid":
        objective = ops.add(objective, _hybrid_penalties(dec, batch, rows, config))

    r = ratio.data
    stats = {
        "clip_fraction": float(np.mean((r < 1.0 - eps) | (r > 1.0 + eps))),
        "kl": kl.item(),
        "surrogate": surrogate.item(),
        "ratio_max_dev": float(np.max(np.abs(r - 1.0))),
    }
    return objective, stats


def _hybrid_penalties(dec, batch: GroupBatch, rows, config: MgrpoConfig) -> Tensor:
    """Differentiable consistency and stability terms added to the objective."""
    groups = batch.groups
    t_vs = [batch.seqs[gi][0].t_v for gi, _ in rows]
    offsets = np.concatenate([[0], np.cumsum(t_vs)])
    z_bar = np.stack([groups[gi].anchor[0] for gi, _ in rows])
    h_bar = np.concatenate([groups[gi].anchor[1] for gi, _ in rows], axis=0)
    sem_gap = ops.norm(ops.sub(dec.z_sem, z_bar), axis=-1, eps=NORM_EPS)
    vis_gap = ops.matmul(_segment_mean_matrix(t_vs),
                         ops.reshape(ops.norm(ops.sub(dec.h_vis, h_bar), axis=-1, eps=NORM_EPS), (-1, 1)))
    stab = ops.add(ops.relu(ops.sub(sem_gap, config.tau_sem)),
                   ops.relu(ops.sub(ops.reshape(vis_gap, (-1,)), config.tau_vis)))
    total = ops.scale(ops.mean(stab), -config.w_stab)

    pairs_a, pairs_b = [], []
    index = {}
    for j, (gi, i) in enumerate(rows):
        index.setdefault((gi, i), []).append(j)
    for gi, grp in enumerate(groups):
        if len(grp.queries) == 2 and config.query_mode == "paired":
            pairs_a += index[(gi, 1)]
            pairs_b += index[(gi, 2)]
    if pairs_a:
        za = ops.index(dec.z_sem, np.array(pairs_a))
        zb = ops.index(dec.z_sem, np.array(pairs_b))
        sem = ops.norm(ops.sub(za, zb), axis=-1, eps=NORM_EPS)
        ha_idx = np.concatenate([np.arange(offsets[j], offsets[j + 1]) for j in pairs_a])
        hb_idx = np.concatenate([np.arange(offsets[j], offsets[j + 1]) for j in pairs_b])
        tok_gap = ops.norm(ops.sub(ops.index(dec.h_vis, ha_idx), ops.index(dec.h_vis, hb_idx)), axis=-1, eps=NORM_EPS)
        vis = ops.reshape(ops.matmul(_segment_mean_matrix([t_vs[j] for j in pairs_a]),
                                     ops.reshape(tok_gap, (-1, 1))), (-1,))
        cons = ops.scale(ops.add(ops.scale(sem, config.lambda_sem), ops.scale(vis, config.lambda_vis)), -2.0)
        total = ops.add(total, ops.scale(ops.mean(cons), config.w_cons))
    return total


# -- training --------------------------------------------------------------------------

@dataclass
class Stage2Result:
    params: dict[str, np.ndarray]
    optimizer: Adam
    metrics: list[dict]
    step: int


def group_indices(seed: int, step: int, pool: int, n: int) -> np.ndarray:
    return np.sort(Rng(seed, 0x57A6, step).choice(pool, size=min(n, pool), replace=False))


def train_stage2(config: MgrpoConfig, samples: list[MultiQuerySample], world: WorldConfig,
                 init: dict[str, np.ndarray], meta: dict, anchors: AnchorStore,
                 eval_samples: list[MultiQuerySample] | None = None, optimizer: Adam | None = None,
                 start_step: int = 0, ref_arrays: dict[str, np.ndarray] | None = None,
                 checkpoint_fn=None, checkpoint_every: int = 0, stop_step: int | None = None) -> Stage2Result:
    """Outer loop: snapshot the old policy, sample groups, take ``inner_steps``
    ascent steps on the surrogate, log reward components.

    ``stop_step`` interrupts the run after that step; the final checkpoint is
    then marked incomplete.
    """
    from .evalharness import evaluate

    config.validate()
    cfg = M.config_from_meta(meta)
    pool = samples[: config.num_groups]
    missing = [sample_region_key(s) for s in pool if sample_region_key(s) not in anchors]
    if missing:
        raise ConfigurationError(f"anchors missing for {len(missing)} regions, e.g. {missing[0]!r}")
    seqs = multiquery_sequences(pool, world, cfg)
    if config.kl_target == "stage1_ref" and ref_arrays is None:
        ref_arrays = init
    params = M.as_params(init)
    opt = optimizer or Adam(config.lr)
    rows: list[dict] = []
    step = start_step
    last = config.steps if stop_step is None else min(stop_step, config.steps)
    for step in range(start_step + 1, last + 1):
        old_arrays = M.param_arrays(params)
        idx = group_indices(config.seed, step, len(pool), config.groups_per_step)
        rng = Rng(config.seed, 0x5A3B, step)
        batch = sample_groups(old_arrays, cfg, [pool[i] for i in idx], [seqs[i] for i in idx], anchors,
                              config, rng, ref_arrays if config.kl_target == "stage1_ref" else None)
        clip_fr, kls = [], []
        for _ in range(config.inner_steps):
            try:
                objective, stats = surrogate_objective(params, cfg, batch, config)
            except NumericError as exc:
                raise TrainingDiverged(f"stage-2 diverged at step {step}: {exc}") from exc
            if not math.isfinite(objective.item()):
                raise TrainingDiverged(f"stage-2 objective is {objective.item()} at step {step}")
            ops.scale(objective, -1.0).backward()
            try:
                params = opt.step(params)
            except NumericError as exc:
                raise TrainingDiverged(f"stage-2 diverged at step {step}: {exc}") from exc
            clip_fr.append(stats["clip_fraction"])
            kls.append(stats["kl"])
        rolls = [r for grp in batch.groups for r in grp.rollouts]
        row = {
            "step": step,
            "mean_r_ans": float(np.mean([r.reward.r_ans for r in rolls])),
            "mean_r_cons": float(np.mean([r.reward.r_cons for r in rolls])),
            "mean_r_stab": float(np.mean([r.reward.r_stab for r in rolls])),
            "mean_total": float(np.mean([r.reward.total for r in rolls])),
            "clip_fraction": float(np.mean(clip_fr)),
            "kl": float(np.mean(kls)),
        }
        if eval_samples is not None and config.eval_every and (step % config.eval_every == 0 or step == config.steps):
            res = evaluate(M.param_arrays(params), cfg, eval_samples, world)
            row.update(eval_Q1=res.q1, eval_Q2=res.q2, eval_Both=res.both)
            log.info("stage2 step %d r_ans=%.3f Q1=%.1f Q2=%.1f Both=%.1f", step, row["mean_r_ans"],
                     res.q1, res.q2, res.both)
        rows.append(row)
        if checkpoint_fn and checkpoint_every and step % checkpoint_every == 0 and step < config.steps:
            checkpoint_fn(M.param_arrays(params), opt, step, complete=False)
    result = Stage2Result(M.param_arrays(params), opt, rows, step)
    if checkpoint_fn:
        checkpoint_fn(result.params, opt, step, complete=step == config.steps)
    return result
