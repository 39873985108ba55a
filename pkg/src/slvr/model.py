"""Tiny causal transformer policy with a region latent segment and a semantic latent.

Token layout (full-image context)::

    [patch x H*W] <vis_start> [roi slot x T_v] <vis_end> <sem> [question] [answer prefix]

The forward pass runs in two phases over one causal model:

* **encode** runs the prefix up to ``<sem>``; final-layer hidden states at the
  roi slots form ``H_vis`` and the state at ``<sem>`` forms ``z_sem``.
* **decode** feeds those latents back as the input embeddings of their own
  positions (optionally perturbed by exploration noise), appends
  ``<vis_end>``, the question and any answer prefix, and reads answer logits at
  the last position. Image-prefix keys/values are reused from the encode phase.

Feeding latents back is what makes the answer a function of the latents, so
latent perturbations and latent-level rewards have an effect on the policy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ops
from .numerics import serialize
from .numerics.rng import Rng
from .numerics.tensor import DimensionError, Tensor, as_tensor
from .synthworld import SEM, VIS_END, VIS_START, VOCAB

NEG_INF = -1e9


class CapacityError(ValueError):
    pass


class BoundsError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_v: int = 32
    d_e: int = 64
    vocab_size: int = len(VOCAB)
    max_seq_len: int = 160
    grid_h: int = 8
    grid_w: int = 8
    mlp_ratio: int = 2
    context: str = "full"  # "full" | "roi_only"
    init_seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.context not in ("full", "roi_only"):
            raise ValueError(f"context must be 'full' or 'roi_only', got {self.context!r}")
        for name in ("d_model", "n_layers", "n_heads", "d_v", "d_e", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w


# -- token construction ------------------------------------------------------------

def roi_indices(bbox, grid) -> tuple[int, ...]:
    """Row-major linear indices of the patches inside an inclusive bbox."""
    r0, c0, r1, c1 = (int(v) for v in bbox)
    h, w = int(grid[0]), int(grid[1])
    if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
        raise BoundsError(f"bbox {tuple(bbox)} outside a {h}x{w} grid")
    return tuple(r * w + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))


@dataclass(frozen=True)
class TokenSequence:
    """One input sequence plus its segment map.

    ``kinds[k]`` is ``patch``, ``special``, ``roi`` or ``text``; ``values[k]``
    is the patch cell index, special token id, 1-based roi slot index or text
    token id respectively.
    """

    kinds: tuple[str, ...]
    values: tuple[int, ...]
    features: np.ndarray = field(compare=False, repr=False)
    roi: tuple[int, ...]
    grid: tuple[int, int]
    vis_start: int
    roi_start: int
    vis_end: int
    sem: int

    @property
    def t_v(self) -> int:
        return len(self.roi)

    @property
    def roi_positions(self) -> range:
        return range(self.roi_start, self.roi_start + self.t_v)

    @property
    def question(self) -> tuple[int, ...]:
        return self.values[self.sem + 1:]

    def __len__(self) -> int:
        return len(self.kinds)


def build_sequence(features: np.ndarray, bbox, question, grid=(8, 8), context: str = "full",
                   max_len: int | None = None) -> TokenSequence:
    features = np.asarray(features, dtype=np.float64)
    grid = (int(grid[0]), int(grid[1]))
    if features.shape[0] != grid[0] * grid[1]:
        raise DimensionError(f"expected {grid[0] * grid[1]} patch features, got {features.shape[0]}")
    question = tuple(int(t) for t in question)
    if not question:
        raise ValueError("question must be nonempty")
    roi = roi_indices(bbox, grid)
    cells = range(grid[0] * grid[1]) if context == "full" else roi
    kinds = ["patch"] * len(cells)
    values = list(cells)
    vis_start = len(kinds)
    kinds.append("special")
    values.append(VIS_START)
    roi_start = len(kinds)
    kinds += ["roi"] * len(roi)
    values += list(range(1, len(roi) + 1))
    vis_end = len(kinds)
    kinds += ["special", "special"]
    values += [VIS_END, SEM]
    kinds += ["text"] * len(question)
    values += list(question)
    if max_len is not None and len(kinds) > max_len:
        raise CapacityError(f"sequence of length {len(kinds)} exceeds max_seq_len={max_len}")
    return TokenSequence(tuple(kinds), tuple(values), features, roi, grid,
                         vis_start, roi_start, vis_end, vis_end + 1)


# -- parameters --------------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = Rng(cfg.init_seed if seed is None else seed, 0x1A17)
    d, ff = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    resid = 1.0 / math.sqrt(2 * cfg.n_layers)
    emb = 1.0 / d  # unit-norm-ish rows after summing a few tables

    def lin(n_in, n_out, gain=1.0):
        return rng.normal((n_in, n_out)) * (gain / math.sqrt(n_in))

    p = {
        "embed.tok": rng.normal((cfg.vocab_size, d)) * emb,
        "embed.seq_pos": rng.normal((cfg.max_seq_len, d)) * emb,
        "embed.cell": rng.normal((cfg.n_cells, d)) * emb,
        "embed.slot": rng.normal((cfg.n_cells, d)) * emb,
        "embed.patch_W": lin(cfg.d_v, d, 1.0 / math.sqrt(d)),
        "embed.patch_b": np.zeros(d),
    }
    for i in range(cfg.n_layers):
        b = f"block{i}."
        p[b + "ln1_g"], p[b + "ln1_b"] = np.ones(d), np.zeros(d)
        p[b + "attn_q"], p[b + "attn_k"], p[b + "attn_v"] = lin(d, d), lin(d, d), lin(d, d)
        p[b + "attn_o"] = lin(d, d, resid)
        p[b + "ln2_g"], p[b + "ln2_b"] = np.ones(d), np.zeros(d)
        p[b + "mlp_W1"], p[b + "mlp_b1"] = lin(d, ff), np.zeros(ff)
        p[b + "mlp_W2"], p[b + "mlp_b2"] = lin(ff, d, resid), np.zeros(d)
    p["lm_head.ln_g"], p["lm_head.ln_b"] = np.ones(d), np.zeros(d)
    p["lm_head.W"] = lin(d, cfg.vocab_size)
    p["proj_W"] = rng.normal((cfg.d_e, d)) / math.sqrt(d)
    return p


def as_params(arrays: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def param_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: np.array(v.data) for k, v in params.items()}


# -- batch layout ------------------------------------------------------------------

@dataclass
class EncodeLayout:
    feats: np.ndarray      # [B, L, d_v]
    patch_mask: np.ndarray  # [B, L, 1]
    cell_ids: np.ndarray   # [B, L], n_cells = none
    tok_ids: np.ndarray    # [B, L], vocab_size = none
    pos_ids: np.ndarray    # [B, L], max_seq_len = none
    slot_ids: np.ndarray   # [B, L], n_cells = none
    mask: np.ndarray       # [B, 1, L, L] additive
    roi_b: np.ndarray      # flat roi rows: batch index
    roi_p: np.ndarray      # flat roi rows: position
    roi_offsets: np.ndarray  # [B + 1]
    sem_p: np.ndarray      # [B]
    prefix_len: np.ndarray  # [B] positions visible to decode (through vis_start)
    roi_start: np.ndarray  # [B]
    t_v: np.ndarray        # [B]

    @property
    def batch(self) -> int:
        return self.feats.shape[0]


def layout_encode(cfg: ModelConfig, seqs: list[TokenSequence]) -> EncodeLayout:
    b = len(seqs)
    lens = [s.sem + 1 for s in seqs]
    length = max(lens)
    if length > cfg.max_seq_len:
        raise CapacityError(f"encode length {length} exceeds max_seq_len={cfg.max_seq_len}")
    feats = np.zeros((b, length, cfg.d_v))
    patch_mask = np.zeros((b, length, 1))
    cell_ids = np.full((b, length), cfg.n_cells)
    tok_ids = np.full((b, length), cfg.vocab_size)
    pos_ids = np.full((b, length), cfg.max_seq_len)
    slot_ids = np.full((b, length), cfg.n_cells)
    mask = np.zeros((b, 1, length, length))
    causal = np.triu(np.full((length, length), NEG_INF), k=1)
    roi_b, roi_p, offsets = [], [], [0]
    for i, s in enumerate(seqs):
        if s.features.shape[1] != cfg.d_v:
            raise DimensionError(f"patch feature width {s.features.shape[1]} != d_v={cfg.d_v}")
        mask[i, 0] = causal
        for k in range(s.sem + 1):
            kind, val = s.kinds[k], s.values[k]
            if kind == "patch":
                feats[i, k] = s.features[val]
                patch_mask[i, k] = 1.0
                cell_ids[i, k] = val
            elif kind == "special":
                tok_ids[i, k] = val
                pos_ids[i, k] = k
            elif kind == "roi":
                slot_ids[i, k] = val - 1
                cell_ids[i, k] = s.roi[val - 1]
                pos_ids[i, k] = k
        roi_b += [i] * s.t_v
        roi_p += list(s.roi_positions)
        offsets.append(offsets[-1] + s.t_v)
    return EncodeLayout(
        feats, patch_mask, cell_ids, tok_ids, pos_ids, slot_ids, mask,
        np.array(roi_b), np.array(roi_p), np.array(offsets),
        np.array([s.sem for s in seqs]), np.array([s.vis_start + 1 for s in seqs]),
        np.array([s.roi_start for s in seqs]), np.array([s.t_v for s in seqs]),
    )


# -- core network ------------------------------------------------------------------

def _lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup where index ``len(table)`` yields a zero row."""
    padded = ops.concat([table, np.zeros((1, table.shape[1]))], axis=0)
    return ops.embedding(padded, ids)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return ops.transpose(ops.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def _block(params, i: int, x: Tensor, mask: np.ndarray, cfg: ModelConfig, prefix_kv=None):
    p = f"block{i}."
    h = ops.layernorm(x, params[p + "ln1_g"], params[p + "ln1_b"])
    q = _split_heads(ops.matmul(h, params[p + "attn_q"]), cfg.n_heads)
    k = _split_heads(ops.matmul(h, params[p + "attn_k"]), cfg.n_heads)
    v = _split_heads(ops.matmul(h, params[p + "attn_v"]), cfg.n_heads)
    k_all, v_all = k, v
    if prefix_kv is not None:
        k_all = ops.concat([prefix_kv[0], k], axis=2)
        v_all = ops.concat([prefix_kv[1], v], axis=2)
    scores = ops.scale(ops.matmul(q, ops.transpose(k_all, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.d_model // cfg.n_heads))
    att = ops.softmax(ops.add(scores, mask), axis=-1)
    x = ops.add(x, ops.matmul(_merge_heads(ops.matmul(att, v_all)), params[p + "attn_o"]))
    h2 = ops.layernorm(x, params[p + "ln2_g"], params[p + "ln2_b"])
    ff = ops.gelu(ops.add(ops.matmul(h2, params[p + "mlp_W1"]), params[p + "mlp_b1"]))
    x = ops.add(x, ops.add(ops.matmul(ff, params[p + "mlp_W2"]), params[p + "mlp_b2"]))
    return x, (k, v)


@dataclass
class Encoded:
    layout: EncodeLayout
    h_vis: Tensor   # [sum T_v, d_model], samples concatenated in batch order
    z_sem: Tensor   # [B, d_model]
    kv: list

    def h_vis_of(self, b: int) -> Tensor:
        o = self.layout.roi_offsets
        return ops.index(self.h_vis, slice(int(o[b]), int(o[b + 1])))


def encode(params: dict[str, Tensor], cfg: ModelConfig, layout: EncodeLayout) -> Encoded:
    x = ops.add(ops.matmul(layout.feats, params["embed.patch_W"]),
                ops.mul(params["embed.patch_b"], layout.patch_mask))
    x = ops.add(x, _lookup(params["embed.cell"], layout.cell_ids))
    x = ops.add(x, _lookup(params["embed.tok"], layout.tok_ids))
    x = ops.add(x, _lookup(params["embed.seq_pos"], layout.pos_ids))
    x = ops.add(x, _lookup(params["embed.slot"], layout.slot_ids))
    kv = []
    for i in range(cfg.n_layers):
        x, layer_kv = _block(params, i, x, layout.mask, cfg)
        kv.append(layer_kv)
    h_vis = ops.take_rows(x, layout.roi_b, layout.roi_p)
    z_sem = ops.take_rows(x, np.arange(layout.batch), layout.sem_p)
    return Encoded(layout, h_vis, z_sem, kv)


@dataclass
class DecodeLayout:
    src: np.ndarray        # [R] encoded sample feeding each row
    tok_ids: np.ndarray    # [R, L2]
    pos_ids: np.ndarray    # [R, L2]
    mask: np.ndarray       # [R, 1, L2, L1 + L2]
    lat_r: np.ndarray      # scatter rows for fed-back region latents
    lat_p: np.ndarray
    lat_src: np.ndarray    # flat h_vis row feeding each scattered latent
    sem_p: np.ndarray      # [R] position of the fed-back semantic latent
    out_p: np.ndarray      # [R, n_out] positions whose logits predict answer tokens


def layout_decode(cfg: ModelConfig, enc_layout: EncodeLayout, src, questions, prefixes=None) -> DecodeLayout:
    src = np.asarray(src, dtype=np.int64)
    r = len(src)
    if prefixes is None:
        prefixes = [()] * r
    n_pref = {len(p) for p in prefixes}
    if len(n_pref) != 1:
        raise DimensionError("answer prefixes in one decode batch must share a length")
    n_pref = n_pref.pop()
    t_v = enc_layout.t_v[src]
    lens = [int(t) + 2 + len(q) + n_pref for t, q in zip(t_v, questions)]
    l2 = max(lens)
    l1 = enc_layout.feats.shape[1]
    tok_ids = np.full((r, l2), cfg.vocab_size)
    pos_ids = np.full((r, l2), cfg.max_seq_len)
    mask = np.full((r, 1, l2, l1 + l2), NEG_INF)
    causal = np.triu(np.full((l2, l2), NEG_INF), k=1)
    lat_r, lat_p, lat_src = [], [], []
    sem_p = np.zeros(r, dtype=np.int64)
    out_p = np.zeros((r, n_pref + 1), dtype=np.int64)
    for j in range(r):
        s, tv = int(src[j]), int(t_v[j])
        base = int(enc_layout.roi_start[s])
        if base + lens[j] > cfg.max_seq_len:
            raise CapacityError(f"decode length {base + lens[j]} exceeds max_seq_len={cfg.max_seq_len}")
        mask[j, 0, :, : enc_layout.prefix_len[s]] = 0.0
        mask[j, 0, :, l1:] = causal
        lat_r += [j] * tv
        lat_p += list(range(tv))
        lat_src += list(range(enc_layout.roi_offsets[s], enc_layout.roi_offsets[s + 1]))
        tok_ids[j, tv] = VIS_END
        pos_ids[j, tv] = base + tv
        sem_p[j] = tv + 1
        tail = list(questions[j]) + list(prefixes[j])
        for k, t in enumerate(tail):
            tok_ids[j, tv + 2 + k] = t
            pos_ids[j, tv + 2 + k] = base + tv + 2 + k
        last = lens[j] - 1
        out_p[j] = np.arange(last - n_pref, last + 1)
    return DecodeLayout(src, tok_ids, pos_ids, mask, np.array(lat_r), np.array(lat_p),
                        np.array(lat_src), sem_p, out_p)


@dataclass
class Decoded:
    logits: Tensor   # [R, n_out, V]
    h_vis: Tensor    # fed-back region latents, flat in row order
    z_sem: Tensor    # [R, d_model] fed-back semantic latents


def decode(params: dict[str, Tensor], cfg: ModelConfig, enc: Encoded, layout: DecodeLayout,
           h_noise: np.ndarray | None = None, z_noise: np.ndarray | None = None) -> Decoded:
    r, l2 = layout.tok_ids.shape
    d = cfg.d_model
    h_rows = ops.index(enc.h_vis, layout.lat_src)
    z_rows = ops.index(enc.z_sem, layout.src)
    if h_noise is not None:
        h_rows = ops.add(h_rows, h_noise)
    if z_noise is not None:
        z_rows = ops.add(z_rows, z_noise)
    x = ops.add(_lookup(params["embed.tok"], layout.tok_ids), _lookup(params["embed.seq_pos"], layout.pos_ids))
    x = ops.add(x, ops.scatter_rows(h_rows, layout.lat_r, layout.lat_p, (r, l2, d)))
    x = ops.add(x, ops.scatter_rows(z_rows, np.arange(r), layout.sem_p, (r, l2, d)))
    for i in range(cfg.n_layers):
        pk, pv = enc.kv[i]
        prefix = (ops.index(pk, layout.src), ops.index(pv, layout.src))
        x, _ = _block(params, i, x, layout.mask, cfg, prefix_kv=prefix)
    n_out = layout.out_p.shape[1]
    rows = np.repeat(np.arange(r), n_out)
    h_out = ops.take_rows(x, rows, layout.out_p.reshape(-1))
    h_out = ops.layernorm(h_out, params["lm_head.ln_g"], params["lm_head.ln_b"])
    logits = ops.reshape(ops.matmul(h_out, params["lm_head.W"]), (r, n_out, cfg.vocab_size))
    return Decoded(logits, h_rows, z_rows)


def project_semantic(W, z) -> Tensor:
    """Projection head: ``W @ z`` for a vector, ``z @ W.T`` row-wise for a batch."""
    W, z = as_tensor(W), as_tensor(z)
    if W.shape[-1] != z.shape[-1]:
        raise DimensionError(f"projection head {W.shape} cannot map latent of width {z.shape[-1]}")
    if z.ndim == 1:
        return ops.reshape(ops.matmul(W, ops.reshape(z, (z.shape[0], 1))), (W.shape[0],))
    return ops.matmul(z, ops.transpose(W))


# -- single-sequence conveniences ------------------------------------------------------

def forward(params: dict[str, Tensor], cfg: ModelConfig, seq: TokenSequence, answer_prefix=()) -> dict:
    """Latents and answer logits for one sequence.

    Returns ``H_vis`` [T_v, d_model], ``z_sem`` [d_model] and ``logits``
    [len(answer_prefix) + 1, V], the latter predicting each answer token.
    """
    enc = encode(params, cfg, layout_encode(cfg, [seq]))
    dec = decode(params, cfg, enc, layout_decode(cfg, enc.layout, [0], [seq.question], [tuple(answer_prefix)]))
    return {
        "H_vis": enc.h_vis,
        "z_sem": ops.reshape(enc.z_sem, (cfg.d_model,)),
        "logits": ops.reshape(dec.logits, dec.logits.shape[1:]),
    }


def softmax_np(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_from_logits(logits: np.ndarray, temperature: float, rng: Rng) -> tuple[int, float, np.ndarray]:
    """Draw from softmax(logits / temperature); log-prob is under the untempered policy."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    probs = softmax_np(logits)
    tok = rng.categorical(softmax_np(logits, temperature))
    return tok, float(np.log(probs[tok])), probs


def sample_answer(params, cfg: ModelConfig, seq: TokenSequence, temperature: float, rng: Rng):
    """Returns ``(token id, untempered log-prob, untempered distribution)``."""
    out = forward(params, cfg, seq)
    return sample_from_logits(out["logits"].data[-1], temperature, rng)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor] | dict[str, np.ndarray], meta: dict,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Named-tensor file at ``path`` plus ``<path>.json`` metadata sidecar."""
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    if extra:
        arrays.update(extra)
    serialize.save(path, arrays)
    blob = (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode()
    serialize.atomic_write_bytes(str(path) + ".json", blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    """Returns ``(model arrays, extra arrays, metadata)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    arrays = serialize.load(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    model = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    extra = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return model, extra, meta


def config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(**meta["model_config"])


def config_dict(cfg) -> dict:
    return asdict(cfg)
