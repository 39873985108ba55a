"""Deterministic synthetic scenes, region samples and paired-question splits.

A scene is a small patch grid holding non-overlapping rectangular objects,
each carrying a categorical attribute set. Questions are templated
(``what <slot> region``) and answers come from a closed vocabulary, so
correctness is always an exact match.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics.rng import Rng
from .numerics.serialize import atomic_write_bytes

SCHEMA: dict[str, tuple[str, ...]] = {
    "shape": ("circle", "square", "triangle", "star"),
    "color": ("red", "green", "blue", "yellow", "purple"),
    "size": ("small", "large"),
    "state": ("open", "closed"),
    "count": ("1", "2", "3"),
}
SLOTS: tuple[str, ...] = tuple(SCHEMA)

SPECIAL_TOKENS = ("<pad>", "<vis_start>", "<vis_end>", "<sem>")
QUESTION_WORDS = ("what", "region") + SLOTS
ANSWER_WORDS = tuple(v for vals in SCHEMA.values() for v in vals)
VOCAB: tuple[str, ...] = SPECIAL_TOKENS + QUESTION_WORDS + ANSWER_WORDS
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}
ANSWER_IDS = frozenset(TOKEN_ID[a] for a in ANSWER_WORDS)

PAD, VIS_START, VIS_END, SEM = (TOKEN_ID[t] for t in SPECIAL_TOKENS)

# one-hot code: one block per attribute field, plus a trailing background flag
CODE_DIM = sum(len(v) for v in SCHEMA.values()) + 1

ALL_ATTRIBUTE_SETS = tuple(
    dict(zip(SLOTS, combo)) for combo in itertools.product(*SCHEMA.values())
)


class SchemaError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttributeSet:
    shape: str
    color: str
    size: str
    state: str
    count: str

    def __post_init__(self):
        for slot in SLOTS:
            if getattr(self, slot) not in SCHEMA[slot]:
                raise SchemaError(f"{slot}={getattr(self, slot)!r} not in {SCHEMA[slot]}")

    def get(self, slot: str) -> str:
        if slot not in SCHEMA:
            raise SchemaError(f"unknown attribute slot {slot!r}; expected one of {SLOTS}")
        return getattr(self, slot)

    def to_dict(self) -> dict[str, str]:
        return asdict(self)


@dataclass(frozen=True)
class Object:
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), inclusive
    attributes: AttributeSet

    @property
    def area(self) -> int:
        r0, c0, r1, c1 = self.bbox
        return (r1 - r0 + 1) * (c1 - c0 + 1)


@dataclass(frozen=True)
class Scene:
    grid: tuple[int, int]
    objects: tuple[Object, ...]
    seed: int

    def cover(self) -> np.ndarray:
        """[H, W] map of the covering object index, -1 for background."""
        h, w = self.grid
        out = np.full((h, w), -1, dtype=np.int64)
        for k, obj in enumerate(self.objects):
            r0, c0, r1, c1 = obj.bbox
            out[r0:r1 + 1, c0:c1 + 1] = k
        return out

    def to_json(self) -> dict:
        return {
            "scene_seed": self.seed,
            "grid": list(self.grid),
            "objects": [{"bbox": list(o.bbox), "attrs": o.attributes.to_dict()} for o in self.objects],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        objs = tuple(Object(tuple(o["bbox"]), AttributeSet(**o["attrs"])) for o in d["objects"])
        return cls(tuple(d["grid"]), objs, int(d["scene_seed"]))

    def content_hash(self) -> str:
        """Hash of grid and objects only (the seed is excluded)."""
        blob = json.dumps({"grid": list(self.grid), "objects": self.to_json()["objects"]},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class WorldConfig:
    grid_h: int = 8
    grid_w: int = 8
    min_objects: int = 1
    max_objects: int = 3
    max_side: int = 3
    feature_proj_dim: int = 30
    d_e: int = 64
    featurizer_seed: int = 11
    embedder_seed: int = 13
    n_stage1: int = 4096
    n_stage2: int = 4096
    n_eval: int = 512
    seed: int = 0

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1:
            raise SchemaError("grid dimensions must be >= 1")
        if not 1 <= self.min_objects <= self.max_objects:
            raise SchemaError("need 1 <= min_objects <= max_objects")
        if self.max_side < 1:
            raise SchemaError("max_side must be >= 1")
        if self.d_e < 1 or self.feature_proj_dim < 1:
            raise SchemaError("embedding and feature widths must be >= 1")

    @property
    def d_v(self) -> int:
        return self.feature_proj_dim + 2

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class RegionSample:
    question: tuple[int, ...]
    scene: Scene
    roi_index: int
    attributes: AttributeSet
    embedding: np.ndarray = field(compare=False)
    answer: int

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return self.scene.objects[self.roi_index].bbox


@dataclass(frozen=True)
class MultiQuerySample:
    scene: Scene
    roi_index: int
    q1: tuple[int, ...]
    q2: tuple[int, ...]
    answer1: int
    answer2: int

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return self.scene.objects[self.roi_index].bbox


# -- generation ----------------------------------------------------------------

def generate_scene(rng: Rng, config: WorldConfig, n_objects: int | None = None,
                   max_attempts: int = 1000) -> Scene:
    h, w = config.grid_h, config.grid_w
    if n_objects is None:
        n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    occupied = np.zeros((h, w), dtype=bool)
    objects: list[Object] = []
    attempts = 0
    while len(objects) < n_objects:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(
                f"could not place {n_objects} objects on a {h}x{w} grid in {max_attempts} attempts; "
                "use a smaller object count or max_side")
        bh = int(rng.integers(1, min(config.max_side, h) + 1))
        bw = int(rng.integers(1, min(config.max_side, w) + 1))
        r0 = int(rng.integers(0, h - bh + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        if occupied[r0:r0 + bh, c0:c0 + bw].any():
            continue
        occupied[r0:r0 + bh, c0:c0 + bw] = True
        attrs = AttributeSet(**{s: SCHEMA[s][int(rng.integers(0, len(SCHEMA[s])))] for s in SLOTS})
        objects.append(Object((r0, c0, r0 + bh - 1, c0 + bw - 1), attrs))
    return Scene((h, w), tuple(objects), rng.seed)


def attribute_code(attrs: AttributeSet | None) -> np.ndarray:
    """Concatenated per-field one-hot code; ``None`` gives the background code."""
    code = np.zeros(CODE_DIM)
    if attrs is None:
        code[-1] = 1.0
        return code
    off = 0
    for slot in SLOTS:
        vals = SCHEMA[slot]
        code[off + vals.index(attrs.get(slot))] = 1.0
        off += len(vals)
    return code


@functools.lru_cache(maxsize=16)
def _featurizer_matrix(seed: int, proj_dim: int) -> np.ndarray:
    # five active code bits per object -> unit-variance projected entries
    m = Rng(seed, 0xFEA7).normal((CODE_DIM, proj_dim)) / np.sqrt(len(SLOTS))
    m.flags.writeable = False
    return m


@functools.lru_cache(maxsize=16)
def _embedder_matrix(seed: int, d_e: int) -> np.ndarray:
    m = Rng(seed, 0xE3BE).normal((CODE_DIM - 1, d_e))
    m.flags.writeable = False
    return m


def featurize(scene: Scene, featurizer_seed: int, proj_dim: int = 30) -> np.ndarray:
    """Frozen patch features, [H*W, proj_dim + 2] in row-major patch order.

    Each patch is ``[code @ P, row/(H-1), col/(W-1)]`` where ``code`` is the
    covering object's attribute code (or the background code).
    """
    h, w = scene.grid
    proj = _featurizer_matrix(featurizer_seed, proj_dim)
    cover = scene.cover().reshape(-1)
    codes = np.stack([attribute_code(None)] + [attribute_code(o.attributes) for o in scene.objects])
    projected = codes @ proj
    rows, cols = np.divmod(np.arange(h * w), w)
    pos = np.stack([rows / max(h - 1, 1), cols / max(w - 1, 1)], axis=1)
    return np.concatenate([projected[cover + 1], pos], axis=1)


def embed_attributes(attrs: AttributeSet, embedder_seed: int, d_e: int = 64) -> np.ndarray:
    v = attribute_code(attrs)[:-1] @ _embedder_matrix(embedder_seed, d_e)
    return v / np.linalg.norm(v)


def question_tokens(slot: str) -> tuple[int, ...]:
    if slot not in SCHEMA:
        raise SchemaError(f"unknown attribute slot {slot!r}; expected one of {SLOTS}")
    return (TOKEN_ID["what"], TOKEN_ID[slot], TOKEN_ID["region"])


def slot_of_question(question) -> str:
    """Decode the queried attribute slot from a templated question."""
    words = [VOCAB[t] for t in question]
    hits = [w for w in words if w in SCHEMA]
    if len(hits) != 1:
        raise SchemaError(f"question {words} does not name exactly one slot")
    return hits[0]


def make_region_sample(scene: Scene, object_index: int, slot: str, rng: Rng | None = None,
                       embedder_seed: int = 13, d_e: int = 64) -> RegionSample:
    # rng is accepted for interface symmetry; rendering is fully templated
    obj = scene.objects[object_index]
    q = question_tokens(slot)
    return RegionSample(
        question=q, scene=scene, roi_index=object_index, attributes=obj.attributes,
        embedding=embed_attributes(obj.attributes, embedder_seed, d_e),
        answer=TOKEN_ID[obj.attributes.get(slot)],
    )


def make_multiquery_sample(scene: Scene, object_index: int, rng: Rng) -> MultiQuerySample:
    if len(SLOTS) < 2:
        raise SchemaError("need at least two attribute slots")
    i, j = (int(k) for k in rng.choice(len(SLOTS), size=2, replace=False))
    attrs = scene.objects[object_index].attributes
    return MultiQuerySample(
        scene=scene, roi_index=object_index,
        q1=question_tokens(SLOTS[i]), q2=question_tokens(SLOTS[j]),
        answer1=TOKEN_ID[attrs.get(SLOTS[i])], answer2=TOKEN_ID[attrs.get(SLOTS[j])],
    )


# -- dataset emission --------------------------------------------------------------

SPLIT_OFFSETS = {"train_stage1": 1_000_000, "train_stage2": 2_000_000, "svqa_eval": 3_000_000}
SPLIT_STRIDE = 10_000_000


def split_seed_base(config: WorldConfig, split: str) -> int:
    return config.seed * SPLIT_STRIDE + SPLIT_OFFSETS[split]


def region_sample_json(s: RegionSample) -> dict:
    d = s.scene.to_json()
    d.update(roi_index=s.roi_index, question=list(s.question), answer=s.answer,
             embedding=[float(x) for x in s.embedding])
    return d


def multiquery_sample_json(s: MultiQuerySample) -> dict:
    d = s.scene.to_json()
    d.update(roi_index=s.roi_index, q1=list(s.q1), a1=s.answer1, q2=list(s.q2), a2=s.answer2)
    return d


def region_sample_from_json(d: dict) -> RegionSample:
    scene = Scene.from_json(d)
    k = int(d["roi_index"])
    return RegionSample(tuple(d["question"]), scene, k, scene.objects[k].attributes,
                        np.asarray(d["embedding"], dtype=np.float64), int(d["answer"]))


def multiquery_sample_from_json(d: dict) -> MultiQuerySample:
    return MultiQuerySample(Scene.from_json(d), int(d["roi_index"]), tuple(d["q1"]), tuple(d["q2"]),
                            int(d["a1"]), int(d["a2"]))


def stage1_samples(config: WorldConfig, n: int | None = None) -> list[RegionSample]:
    base = split_seed_base(config, "train_stage1")
    out = []
    for i in range(config.n_stage1 if n is None else n):
        rng = Rng(base + i)
        scene = generate_scene(rng, config)
        k = int(rng.integers(0, len(scene.objects)))
        slot = SLOTS[int(rng.integers(0, len(SLOTS)))]
        out.append(make_region_sample(scene, k, slot, rng, config.embedder_seed, config.d_e))
    return out


def multiquery_samples(config: WorldConfig, split: str, n: int,
                       exclude_hashes: set[str] | frozenset = frozenset()) -> list[MultiQuerySample]:
    """Paired samples for ``split``; scenes whose content hash is excluded are skipped."""
    base = split_seed_base(config, split)
    out: list[MultiQuerySample] = []
    i = 0
    while len(out) < n:
        if i >= SPLIT_STRIDE // 10:
            raise GenerationError(f"seed range for split {split} exhausted")
        rng = Rng(base + i)
        i += 1
        scene = generate_scene(rng, config)
        if scene.content_hash() in exclude_hashes:
            continue
        k = int(rng.integers(0, len(scene.objects)))
        out.append(make_multiquery_sample(scene, k, rng))
    return out


def _jsonl(rows) -> bytes:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows).encode("utf-8")


def vocab_json() -> dict:
    return {"tokens": list(VOCAB), "answer_ids": sorted(ANSWER_IDS),
            "slots": {s: list(v) for s, v in SCHEMA.items()}}


def dataset_splits(config: WorldConfig) -> tuple[list[RegionSample], list[MultiQuerySample], list[MultiQuerySample]]:
    """``(train_stage1, train_stage2, svqa_eval)`` in memory.

    Evaluation scenes are drawn from their own seed range and any scene whose
    content also occurs in a training split is skipped.
    """
    config.validate()
    s1 = stage1_samples(config)
    s2 = multiquery_samples(config, "train_stage2", config.n_stage2)
    seen = {s.scene.content_hash() for s in s1} | {s.scene.content_hash() for s in s2}
    return s1, s2, multiquery_samples(config, "svqa_eval", config.n_eval, exclude_hashes=seen)


def emit_dataset(config: WorldConfig, out_dir) -> dict[str, Path]:
    """Write the three JSONL splits plus ``vocab.json``; returns their paths."""
    out_dir = Path(out_dir)
    s1, s2, ev = dataset_splits(config)
    paths = {
        "train_stage1": out_dir / "train_stage1.jsonl",
        "train_stage2": out_dir / "train_stage2.jsonl",
        "svqa_eval": out_dir / "svqa_eval.jsonl",
        "vocab": out_dir / "vocab.json",
    }
    try:
        atomic_write_bytes(paths["train_stage1"], _jsonl(region_sample_json(s) for s in s1))
        atomic_write_bytes(paths["train_stage2"], _jsonl(multiquery_sample_json(s) for s in s2))
        atomic_write_bytes(paths["svqa_eval"], _jsonl(multiquery_sample_json(s) for s in ev))
        atomic_write_bytes(paths["vocab"], (json.dumps(vocab_json(), indent=2) + "\n").encode())
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return paths


def _read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read dataset file {path}: {exc}") from exc


def load_region_samples(path) -> list[RegionSample]:
    return [region_sample_from_json(d) for d in _read_jsonl(path)]


def load_multiquery_samples(path) -> list[MultiQuerySample]:
    return [multiquery_sample_from_json(d) for d in _read_jsonl(path)]


def load_vocab(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
