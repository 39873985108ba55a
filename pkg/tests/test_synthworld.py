import hashlib
import itertools
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slvr import synthworld as sw
from slvr.numerics import Rng


def test_vocabulary_layout():
    assert len(sw.VOCAB) == 27
    assert len(set(sw.VOCAB)) == len(sw.VOCAB)
    assert len(sw.ALL_ATTRIBUTE_SETS) == 4 * 5 * 2 * 2 * 3 == 240
    assert sw.question_tokens("color") == (sw.TOKEN_ID["what"], sw.TOKEN_ID["color"], sw.TOKEN_ID["region"])


def test_attribute_set_rejects_unknown_value_and_slot():
    with pytest.raises(sw.SchemaError):
        sw.AttributeSet("hexagon", "red", "small", "open", "1")
    attrs = sw.AttributeSet("circle", "red", "small", "open", "1")
    with pytest.raises(sw.SchemaError):
        attrs.get("texture")


def test_scene_generation_is_deterministic():
    cfg = sw.WorldConfig(grid_h=4, grid_w=4)
    a = sw.generate_scene(Rng(7), cfg, n_objects=1)
    b = sw.generate_scene(Rng(7), cfg, n_objects=1)
    assert a == b


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_objects_never_overlap(seed, n):
    scene = sw.generate_scene(Rng(seed), sw.WorldConfig(), n_objects=n)
    cover = np.zeros(scene.grid, dtype=int)
    for o in scene.objects:
        r0, c0, r1, c1 = o.bbox
        assert 1 <= r1 - r0 + 1 <= 3 and 1 <= c1 - c0 + 1 <= 3
        cover[r0:r1 + 1, c0:c1 + 1] += 1
    assert cover.max() <= 1


def test_impossible_placement_raises():
    cfg = sw.WorldConfig(grid_h=1, grid_w=1, max_objects=3)
    with pytest.raises(sw.GenerationError):
        sw.generate_scene(Rng(0), cfg, n_objects=2, max_attempts=50)


def test_attribute_marginals_are_uniform():
    cfg = sw.WorldConfig()
    counts = {s: Counter() for s in sw.SLOTS}
    for i in range(10_000):
        scene = sw.generate_scene(Rng(123, i), cfg, n_objects=1)
        for s in sw.SLOTS:
            counts[s][scene.objects[0].attributes.get(s)] += 1
    for s, values in sw.SCHEMA.items():
        expected = 1.0 / len(values)
        for v in values:
            assert abs(counts[s][v] / 10_000 - expected) < 0.03, (s, v)


def test_patches_in_one_object_differ_only_in_position():
    scene = sw.Scene((4, 4), (sw.Object((0, 0, 1, 1), sw.AttributeSet("star", "blue", "large", "open", "2")),), 0)
    f = sw.featurize(scene, 11)
    np.testing.assert_array_equal(f[0, :30], f[5, :30])
    assert not np.array_equal(f[0, 30:], f[5, 30:])
    bg = sw.featurize(scene, 11)
    np.testing.assert_array_equal(f[15], bg[15])


def test_feature_centroids_distinct_for_all_attribute_sets():
    proj = sw._featurizer_matrix(11, 30)
    codes = np.stack([sw.attribute_code(sw.AttributeSet(**a)) for a in sw.ALL_ATTRIBUTE_SETS]) @ proj
    d = np.linalg.norm(codes[:, None, :] - codes[None, :, :], axis=-1)
    assert d[~np.eye(len(codes), dtype=bool)].min() > 0.0


def test_embeddings_unit_norm_and_distinct():
    embs = np.stack([sw.embed_attributes(sw.AttributeSet(**a), 13) for a in sw.ALL_ATTRIBUTE_SETS])
    np.testing.assert_allclose(np.linalg.norm(embs, axis=1), 1.0, atol=1e-9)
    cos = embs @ embs.T
    assert cos[~np.eye(len(embs), dtype=bool)].max() < 0.999
    a = sw.AttributeSet("circle", "red", "small", "open", "1")
    np.testing.assert_array_equal(sw.embed_attributes(a, 13), sw.embed_attributes(a, 13))


def test_region_sample_answer_and_determinism():
    attrs = sw.AttributeSet("circle", "red", "small", "open", "1")
    scene = sw.Scene((8, 8), (sw.Object((2, 2, 3, 3), attrs),), 0)
    s1 = sw.make_region_sample(scene, 0, "color")
    s2 = sw.make_region_sample(scene, 0, "color")
    assert s1.answer == sw.TOKEN_ID["red"]
    assert s1 == s2 and np.array_equal(s1.embedding, s2.embedding)
    assert sw.slot_of_question(s1.question) == "color"


def test_stage1_slot_balance():
    samples = sw.stage1_samples(sw.WorldConfig(), n=1000)
    counts = Counter(sw.slot_of_question(s.question) for s in samples)
    for slot in sw.SLOTS:
        assert abs(counts[slot] / 1000 - 0.2) < 0.05


def test_multiquery_slots_distinct_and_pairs_covered():
    cfg = sw.WorldConfig()
    pairs = Counter()
    for i in range(10_000):
        rng = Rng(99, i)
        scene = sw.generate_scene(rng, cfg)
        s = sw.make_multiquery_sample(scene, 0, rng)
        a, b = sw.slot_of_question(s.q1), sw.slot_of_question(s.q2)
        assert a != b
        attrs = scene.objects[0].attributes
        assert s.answer1 == sw.TOKEN_ID[attrs.get(a)] and s.answer2 == sw.TOKEN_ID[attrs.get(b)]
        pairs[frozenset((a, b))] += 1
    assert len(pairs) == len(list(itertools.combinations(sw.SLOTS, 2))) == 10


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    cfg = sw.WorldConfig(n_stage1=200, n_stage2=150, n_eval=60)
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return cfg, sw.emit_dataset(cfg, a), sw.emit_dataset(cfg, b)


def test_emission_counts_and_byte_identity(small_dataset):
    cfg, pa, pb = small_dataset
    for split, n in (("train_stage1", 200), ("train_stage2", 150), ("svqa_eval", 60)):
        assert len(pa[split].read_text().splitlines()) == n
        assert _digest(pa[split]) == _digest(pb[split])
    assert json.loads(pa["vocab"].read_text())["tokens"] == list(sw.VOCAB)


def test_eval_scenes_disjoint_from_training(small_dataset):
    _, pa, _ = small_dataset
    train = {s.scene.content_hash() for s in sw.load_region_samples(pa["train_stage1"])}
    train |= {s.scene.content_hash() for s in sw.load_multiquery_samples(pa["train_stage2"])}
    ev = {s.scene.content_hash() for s in sw.load_multiquery_samples(pa["svqa_eval"])}
    assert not train & ev


def test_jsonl_roundtrip(small_dataset):
    cfg, pa, _ = small_dataset
    loaded = sw.load_multiquery_samples(pa["train_stage2"])
    assert loaded == sw.multiquery_samples(cfg, "train_stage2", cfg.n_stage2)
    regions = sw.load_region_samples(pa["train_stage1"])
    direct = sw.stage1_samples(cfg)
    assert regions[0] == direct[0]
    np.testing.assert_array_equal(regions[0].embedding, direct[0].embedding)


def test_default_config_counts():
    cfg = sw.WorldConfig()
    assert (cfg.n_stage1, cfg.n_stage2, cfg.n_eval) == (4096, 4096, 512)
    assert cfg.d_v == 32 and cfg.n_patches == 64
