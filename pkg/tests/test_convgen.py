import random
import re

import numpy as np
import pytest

from mrseg import annotations as ann
from mrseg import convgen, maskops, relations, templates
from mrseg.annotations import ImageRecord, InstanceRecord, MaskSpec, PartLink, RelationshipTriple
from mrseg.convgen import GenConfig, GenerationSkipped
from mrseg.maskops import Box

from conftest import load_fixture
from oracles import positional_rates, synthetic_scene

TAG_RE = re.compile(r"<instance \d+>|<the output of round \d+>")


@pytest.fixture(scope="module")
def pools():
    return templates.load_all(None, "train")


def inst(i, cat, box, caps=(), image="img"):
    b = Box(*box)
    mask = MaskSpec.from_polygons([[b.x1, b.y1, b.x2, b.y1, b.x2, b.y2, b.x1, b.y2]])
    return InstanceRecord(i, image, cat, mask, b, tuple(caps))


IMAGE = ImageRecord("img", 100, 100)


def check_references(conv):
    by_index = {r.index: r for r in conv.rounds}
    for r in conv.rounds:
        assert r.target_instance in conv.objects
        if r.reference_round is None:
            assert r.reference_mode == "none"
            continue
        assert r.reference_mode != "none"
        if r.reference_round == convgen.PRELUDE_ROUND:
            assert conv.family == "hard"
        else:
            assert 1 <= r.reference_round < r.index
            assert by_index[r.reference_round].target_instance == r.reference_instance
        assert r.reference_instance in conv.objects
        if r.reference_mode != "caption":
            assert len(TAG_RE.findall(r.query_text)) == 1


# --- config / seeds ----------------------------------------------------------------

def test_genconfig_defaults_and_validation():
    cfg = GenConfig()
    assert cfg.p_self == pytest.approx(1 / 3) and cfg.p_caption == 0.5
    assert cfg.ranges["positional"] == (2, 18)
    assert GenConfig(ranges={"positional": (3, 5)}).ranges["hierarchical_parts"] == (1, 4)
    for bad in ({"p_self": 1.2}, {"p_caption": -0.1}, {"ranges": {"positional": (5, 3)}},
                {"ranges": {"positional": (0, 3)}}, {"ranges": {"nope": (1, 2)}},
                {"master_seed": -1}):
        with pytest.raises(ValueError):
            GenConfig(**bad)


def test_derive_seed_stable():
    a = convgen.derive_seed(7, "positional", "refcoco", 12)
    assert a == convgen.derive_seed(7, "positional", "refcoco", 12)
    assert a != convgen.derive_seed(8, "positional", "refcoco", 12)
    assert a != convgen.derive_seed(7, "positional", "refcoco", "12")
    assert 0 <= a < 2 ** 64


def test_render_reference_modes():
    cfg = GenConfig()
    seen = set()
    for s in range(200):
        text, mode = convgen.render_reference(random.Random(s), cfg, 3, "the red car")
        seen.add(mode)
        assert text.startswith(convgen.SPAN_OPEN) and text.endswith(convgen.SPAN_CLOSE)
        if mode == "caption":
            assert "the red car" in text
        else:
            assert convgen.tag_text(mode, 3) in text
    assert seen == {"caption", "instance-tag", "round-tag"}
    _, mode = convgen.render_reference(random.Random(0), GenConfig(p_caption=1.0), 1, None)
    assert mode != "caption"


def test_dedup():
    assert convgen.dedup(["Woman", "woman ", " the  man", "the man", ""]) == ["Woman", "the man"]


# --- positional ---------------------------------------------------------------------

def test_positional_forced_relational(pools):
    a = inst(1, "dog", (0, 0, 10, 10), ["left dog"])
    b = inst(2, "cat", (50, 0, 60, 10), ["right cat"])
    cfg = GenConfig(p_self=0.0)
    for s in range(20):
        conv = convgen.gen_positional(IMAGE, [a, b], cfg, pools, random.Random(s))
        assert len(conv.rounds) == 2
        r1, r2 = conv.rounds
        assert r1.reference_round is None
        assert r2.reference_round == 1
        target, ref = (a, b) if r2.target_instance == 1 else (b, a)
        assert relations.phrase(relations.classify(target.box, ref.box)) in r2.query_text
        check_references(conv)


def test_positional_p_self_one(pools):
    rng = random.Random(1)
    for _ in range(50):
        image, insts = synthetic_scene(rng, 8)
        conv = convgen.gen_positional(image, insts, GenConfig(p_self=1.0), pools, rng)
        assert all(r.reference_round is None and r.reference_mode == "none" for r in conv.rounds)


def test_positional_needs_two_instances(pools):
    with pytest.raises(GenerationSkipped) as exc:
        convgen.gen_positional(IMAGE, [inst(1, "dog", (0, 0, 5, 5), ["a", "b"])], GenConfig(),
                               pools, random.Random(0))
    assert exc.value.reason == "too-few-instances"


def test_positional_round_count_bounds(pools):
    rng = random.Random(2)
    for _ in range(200):
        image, insts = synthetic_scene(rng, rng.randint(2, 15))
        n_ann = sum(len(i.captions) for i in insts)
        conv = convgen.gen_positional(image, insts, GenConfig(), pools, rng)
        assert 2 <= len(conv.rounds) <= min(18, n_ann)
        assert [r.index for r in conv.rounds] == list(range(1, len(conv.rounds) + 1))
        check_references(conv)
        for r in conv.rounds:
            assert "{" not in r.query_text and r.answer_text.count("[SEG]") == 1


def test_positional_same_as_redrawn(pools):
    # identical boxes force same-as against round 1; nothing else to refer to
    a = inst(1, "dog", (0, 0, 10, 10), ["dog one"])
    b = inst(2, "dog", (0, 0, 10, 10), ["dog two"])
    conv = convgen.gen_positional(IMAGE, [a, b], GenConfig(p_self=0.0), pools, random.Random(0))
    assert conv.rounds[1].reference_round is None
    assert any("same-as" in n for n in conv.notes)
    assert any("fell back" in n for n in conv.notes)


def test_monte_carlo_rates(pools):
    rates = positional_rates(GenConfig(), pools, min_rounds=10_000)
    assert 0.60 <= rates["relational_fraction"] <= 0.72
    assert 0.45 <= rates["caption_fraction"] <= 0.55


def test_lvis_filter():
    insts = [inst(1, "dog", (0, 0, 5, 5)), inst(2, "dog", (50, 0, 55, 5)),
             inst(3, "cup", (10, 10, 15, 15)),
             inst(4, "car", (0, 50, 5, 55)), inst(5, "car", (20, 50, 25, 55)),
             inst(6, "car", (40, 50, 45, 55))]
    out = {i.instance_id: i.captions for i in convgen.lvis_instances(insts)}
    assert set(out) == {1, 2, 3}
    assert out[1] == ("the dog on the left",) and out[2] == ("the dog on the right",)
    assert out[3] == ("the cup",)


# --- hierarchical -------------------------------------------------------------------

def paco_setup():
    corpus = ann.parse_instances(load_fixture("paco_mini.json"))
    links = ann.parse_part_links(load_fixture("parts_mini.json"), corpus).links
    return corpus, links


def test_hierarchical_one_part(pools):
    parent, part = inst(1, "mug", (0, 0, 50, 50)), inst(2, "mug:handle", (40, 10, 50, 30))
    conv = convgen.gen_hierarchical(IMAGE, {1: parent, 2: part}, [PartLink(1, 2, "handle")],
                                    GenConfig(), pools, random.Random(0))
    assert len(conv.rounds) == 2
    assert conv.rounds[1].reference_round == 1 and conv.rounds[1].target_instance == 2
    check_references(conv)


def test_hierarchical_max_sampling(pools):
    parent = inst(1, "chair", (0, 0, 80, 80))
    parts = {i: inst(i, f"chair:p{i}", (i * 10, 0, i * 10 + 5, 5)) for i in range(2, 6)}
    links = [PartLink(1, i, f"p{i}") for i in parts]
    cfg = GenConfig(ranges={"hierarchical_instances": (1, 1), "hierarchical_parts": (4, 4)})
    conv = convgen.gen_hierarchical(IMAGE, {1: parent, **parts}, links, cfg, pools,
                                    random.Random(0))
    assert len(conv.rounds) == 5


def test_hierarchical_fixture_integrity(pools):
    corpus, links = paco_setup()
    image = corpus.images[1]
    parent_of = {l.part_instance: l.parent_instance for l in links}
    for s in range(100):
        conv = convgen.gen_hierarchical(image, corpus.instances, links, GenConfig(), pools,
                                        random.Random(s))
        assert 2 <= len(conv.rounds) <= 20
        targets = {r.index: r.target_instance for r in conv.rounds}
        for r in conv.rounds:
            if r.reference_round is not None:
                assert targets[r.reference_round] == parent_of[r.target_instance]
        check_references(conv)


def test_hierarchical_needs_parts(pools):
    with pytest.raises(GenerationSkipped):
        convgen.gen_hierarchical(IMAGE, {}, [], GenConfig(), pools, random.Random(0))


# --- interactional ------------------------------------------------------------------

def test_interactional_man_holding_ski(pools):
    man, ski = inst(1, "man", (10, 10, 30, 60)), inst(2, "ski", (5, 55, 40, 60))
    conv = convgen.gen_interactional(IMAGE, RelationshipTriple(1, "holding", 2),
                                     {1: man, 2: ski}, GenConfig(), pools, random.Random(0))
    assert len(conv.rounds) == 2
    r1, r2 = conv.rounds
    assert r1.target_instance == 1 and r2.target_instance == 2
    assert "holding" in r2.query_text and r2.reference_round == 1
    check_references(conv)


def test_interactional_fixture_counts(pools):
    corpus = ann.parse_instances(load_fixture("vg_mini.json"))
    triples = tuple(ann.parse_triples(load_fixture("triples_mini.json"), corpus))
    cfg = GenConfig(ranges={"interactional": (1, 18)})
    src = convgen.FamilySource("interactional", "vg", corpus, triples=triples)
    convs, skips = convgen.generate([src], cfg, pools)
    assert len(convs) == 8 and not skips
    assert all(len(c.rounds) == 2 for c in convs)
    # default cap of four per image
    convs, _ = convgen.generate([src], GenConfig(), pools)
    assert len(convs) == 4 + 4


# --- attribute / semantic -------------------------------------------------------------

def test_attribute_stub_captioner(pools):
    dog = inst(1, "giraffe", (0, 0, 10, 10))
    cap = convgen.StoredCaptioner({1: "has a tall, slender neck"})
    conv = convgen.gen_attribute(IMAGE, dog, cap, pools, random.Random(0))
    (rnd,) = conv.rounds
    assert "has a tall, slender neck" in rnd.query_text
    assert "giraffe" in rnd.answer_text
    with pytest.raises(GenerationSkipped) as exc:
        convgen.gen_attribute(IMAGE, inst(2, "cat", (0, 0, 5, 5)), cap, pools, random.Random(0))
    assert exc.value.reason == "captioner-failed"


def test_attribute_fixture_counts(pools):
    corpus = ann.parse_instances(load_fixture("coco_mini.json"))
    desc = ann.parse_descriptions(load_fixture("descriptions_mini.json"), corpus)
    src = convgen.FamilySource("attribute", "coco", corpus, captioner=convgen.StoredCaptioner(desc))
    convs, skips = convgen.generate([src], GenConfig(), pools)
    assert len(convs) == 5 and all(len(c.rounds) == 1 for c in convs)
    assert len(skips) == 12 and {s.reason for s in skips} == {"captioner-failed"}


def test_semantic(pools):
    sky = inst(1, "sky", (0, 0, 100, 30))
    conv = convgen.gen_semantic(IMAGE, sky, pools, random.Random(0))
    (rnd,) = conv.rounds
    assert rnd.reference_mode == "none" and "sky" in rnd.query_text
    corpus = ann.parse_instances(load_fixture("stuff_mini.json"))
    convs, _ = convgen.generate([convgen.FamilySource("semantic", "stuff", corpus)], GenConfig(),
                                pools)
    assert len(convs) == 3
    for c in convs:
        assert c.objects[c.rounds[0].target_instance].category in c.rounds[0].query_text


def test_semantic_regions_union():
    a = inst(1, "sky", (0, 0, 10, 10))
    b = inst(2, "sky", (20, 0, 30, 10))
    c = inst(3, "road", (0, 50, 100, 100))
    regions = convgen.semantic_regions(IMAGE, [a, b, c])
    assert [r.category for r in regions] == ["road", "sky"]
    sky = regions[1]
    assert sky.box == Box(0, 0, 30, 10)
    assert sky.grid(IMAGE).sum() == 200


# --- hard -----------------------------------------------------------------------------

def test_hard_pair(pools):
    x, y = inst(1, "dog", (0, 0, 10, 10)), inst(2, "dog", (50, 50, 60, 60))
    c1, c2 = convgen.gen_hard_pair(IMAGE, x, y, pools, GenConfig())
    assert {c1.rounds[0].target_instance, c2.rounds[0].target_instance} == {1, 2}
    for c in (c1, c2):
        (r,) = c.rounds
        assert r.reference_mode == "instance-tag" and r.reference_round == convgen.PRELUDE_ROUND
        assert r.reference_instance != r.target_instance
        assert "other" in r.query_text or "differs" in r.query_text or "not" in r.query_text
        check_references(c)
    swapped = convgen.gen_hard_pair(IMAGE, y, x, pools, GenConfig())
    assert {c.to_record()["conversation_id"] for c in swapped} == {c1.conversation_id,
                                                                   c2.conversation_id}
    assert [c.to_record() for c in swapped] == [c1.to_record(), c2.to_record()]


def test_hard_pair_requires_exactly_two(pools):
    x, y, z = (inst(i, "dog", (i * 20, 0, i * 20 + 5, 5)) for i in range(3))
    with pytest.raises(GenerationSkipped):
        convgen.gen_hard_pair(IMAGE, x, y, pools, GenConfig(), instances=[x, y, z])
    with pytest.raises(GenerationSkipped):
        convgen.gen_hard_pair(IMAGE, x, inst(9, "cat", (0, 0, 5, 5)), pools, GenConfig())


def test_hard_fixture_three_pairs(pools):
    corpus = ann.parse_instances(load_fixture("coco_mini.json"))
    convs, _ = convgen.generate([convgen.FamilySource("hard", "coco", corpus)], GenConfig(), pools)
    assert len(convs) == 6
    pairs = {frozenset(c.objects) for c in convs}
    assert pairs == {frozenset({101, 102}), frozenset({201, 202}), frozenset({301, 302})}


# --- stub featurizer -------------------------------------------------------------------

def test_stub_featurize():
    black = np.zeros((1, 1, 3), np.uint8)
    v = convgen.stub_featurize(black)
    assert v.shape == (8,)
    assert list(v) == [0, 0, 0, 1, 1, 0, 1, 0]
    img = np.random.default_rng(0).integers(0, 255, (6, 4, 3), dtype=np.uint8)
    assert np.array_equal(convgen.stub_featurize(img), convgen.stub_featurize(img.copy()))
    other = img.copy()
    other[5, 3, 2] ^= 1
    assert np.any(convgen.stub_featurize(img) != convgen.stub_featurize(other))
    with pytest.raises(ValueError):
        convgen.stub_featurize(np.zeros((0, 3)))


def test_stub_featurize_on_blackout_crop():
    image = np.full((10, 10, 3), 100, np.uint8)
    mask = maskops.rasterize([[2, 2, 8, 2, 8, 6, 2, 6]], 10, 10)
    v = convgen.stub_featurize(maskops.blackout_crop(image, mask), image_size=(10, 10))
    assert v[3] == pytest.approx(0.6) and v[4] == pytest.approx(0.4)
    assert v[5] == 1.0 and v[6] == pytest.approx(1.5)


# --- driver ------------------------------------------------------------------------------

def test_generate_worker_and_order_independence(pools):
    corpus = ann.parse_referring(load_fixture("refs_mini.json"),
                                 ann.parse_instances(load_fixture("coco_mini.json")))
    src = convgen.FamilySource("positional", "refcoco", corpus)
    cfg = GenConfig(master_seed=11)
    serial, _ = convgen.generate([src], cfg, pools, workers=1)
    parallel, _ = convgen.generate([src], cfg, pools, workers=8)
    assert [c.to_record() for c in serial] == [c.to_record() for c in parallel]
    # one image alone produces the same conversation as within the batch
    alone, _ = convgen.generate_image(src, 3, cfg, pools)
    assert alone[0].to_record() == next(c for c in serial if c.image_id == 3).to_record()


def test_conversation_record_round_trip(pools):
    corpus = ann.parse_referring(load_fixture("refs_mini.json"),
                                 ann.parse_instances(load_fixture("coco_mini.json")))
    convs, _ = convgen.generate([convgen.FamilySource("positional", "r", corpus)], GenConfig(),
                                pools)
    for c in convs:
        again = convgen.Conversation.from_record(c.to_record())
        assert again.to_record() == c.to_record()
        for r in c.rounds:
            assert np.array_equal(again.target_mask(r.index), c.target_mask(r.index))
