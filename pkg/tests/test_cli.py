import json
import random
from collections import Counter

import numpy as np
import pytest

from mrseg import build, cli, convgen, templates
from mrseg.records import read_records, write_records


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture
def built(build_dir, tmp_path, capsys):
    out = tmp_path / "out"
    code, _ = run(["build", "--config", build_dir / "config.json", "--out", out], capsys)
    assert code == 0
    return out


def test_build_outputs_and_manifest(built):
    names = sorted(p.name for p in built.iterdir())
    assert names == ["conversations.jsonl", "manifest.json", "skips.jsonl"]
    man = json.loads((built / "manifest.json").read_text())
    assert man["tool"] == "mrseg" and man["seed"] == 7 and man["command"] == "build"
    assert set(man["family_counts"]) == set(convgen.FAMILIES)
    assert sum(man["family_counts"].values()) == man["total_conversations"]
    convs = build.load_conversations(built / "conversations.jsonl")
    assert len(convs) == man["total_conversations"]
    assert Counter(c.family for c in convs) == {k: v for k, v in man["family_counts"].items() if v}
    first = (built / "conversations.jsonl").read_text().splitlines()[0]
    assert json.loads(first) == {"format": "mrseg.conversations", "version": 1}


def test_build_is_deterministic(build_dir, tmp_path, capsys):
    outs = []
    for i, workers in enumerate((1, 1, 4)):
        out = tmp_path / f"o{i}"
        assert run(["build", "--config", build_dir / "config.json", "--out", out,
                    "--workers", workers], capsys)[0] == 0
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1] == outs[2]


def test_seed_changes_output(build_dir, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["build", "--config", build_dir / "config.json", "--out", a], capsys)
    run(["build", "--config", build_dir / "config.json", "--out", b, "--seed", 8], capsys)
    assert (a / "conversations.jsonl").read_bytes() != (b / "conversations.jsonl").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["seed"] == 8


def test_disabling_all_families(build_dir, tmp_path, capsys):
    out = tmp_path / "empty"
    assert run(["build", "--config", build_dir / "config.json", "--out", out,
                "--families", ""], capsys)[0] == 0
    man = json.loads((out / "manifest.json").read_text())
    assert all(v == 0 for v in man["family_counts"].values())
    assert build.load_conversations(out / "conversations.jsonl") == []


def test_family_counts_match_generators(build_dir, built):
    cfg = build.load_config(build_dir / "config.json")
    pools = templates.load_all(None, "train")
    expected = Counter()
    for src in build.load_sources(cfg):
        for image_id in src.corpus.image_ids():
            convs, _ = convgen.generate_image(src, image_id, cfg.gen, pools)
            expected[src.family] += len(convs)
    man = json.loads((built / "manifest.json").read_text())
    assert {k: v for k, v in man["family_counts"].items() if v} == dict(expected)


# --- validate ----------------------------------------------------------------------

def test_validate_passes_on_fresh_build(built, tmp_path, capsys):
    code, out = run(["validate", built / "conversations.jsonl", "-o", tmp_path / "v"], capsys)
    assert code == 0 and out.out.strip() == "PASS"
    doc = json.loads((tmp_path / "v" / "validation.json").read_text())
    assert doc == {"passed": True, "violations": []}
    assert (tmp_path / "v" / "manifest.json").is_file()


def _rewrite(src, dst, edit):
    recs = read_records(src, "conversations")
    edit(recs)
    write_records(dst, "conversations", recs)


def test_validate_broken_reference(built, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"

    def edit(recs):
        rec = next(r for r in recs if r["family"] == "positional"
                   and any(x["reference_round"] for x in r["rounds"]))
        rnd = next(x for x in rec["rounds"] if x["reference_round"])
        rnd["reference_round"] = rnd["index"]
        edit.cid = rec["conversation_id"]

    _rewrite(built / "conversations.jsonl", bad, edit)
    code, out = run(["validate", bad, "-o", tmp_path / "v"], capsys)
    assert code == 1
    assert edit.cid in out.out
    assert "not an earlier round" in out.out


CORRUPTIONS = [
    lambda r: r["rounds"][0].update(query_text=r["rounds"][0]["query_text"] + " {class}"),
    lambda r: r["rounds"][-1].update(answer_text="no token here"),
    lambda r: r["rounds"][0].update(index=7),
    lambda r: r["objects"][0].update(box=[0, 0, 1, 1]),
    lambda r: r["rounds"][0].update(answer_text="[SEG] and [SEG]"),
]
# each corruption is local to its record; touching a hard target would also orphan its
# mirrored partner, which is a second genuine violation


@pytest.mark.parametrize("seed", range(6))
def test_validate_fault_injection_counts(built, tmp_path, seed):
    rng = random.Random(seed)
    bad = tmp_path / "bad.jsonl"
    chosen = []

    def edit(recs):
        for i in rng.sample(range(len(recs)), 5):
            rng.choice(CORRUPTIONS)(recs[i])
            chosen.append(recs[i]["conversation_id"])

    _rewrite(built / "conversations.jsonl", bad, edit)
    violations = build.validate_file(bad)
    assert len(violations) == 5
    assert sorted(v.conversation_id for v in violations) == sorted(chosen)


def test_validate_catches_hard_mirror_and_cardinality(built, tmp_path):
    bad = tmp_path / "bad.jsonl"

    def edit(recs):
        hard = [i for i, r in enumerate(recs) if r["family"] == "hard"]
        del recs[hard[0]]
        inter = next(r for r in recs if r["family"] == "interactional")
        inter["rounds"] = inter["rounds"][:1]

    _rewrite(built / "conversations.jsonl", bad, edit)
    problems = [p for v in build.validate_file(bad) for p in v.problems]
    assert any("mirrored partner" in p for p in problems)
    assert any("expected 2" in p for p in problems)


# --- stats ---------------------------------------------------------------------------

def test_stats_totals_and_long_tail(built, tmp_path, capsys):
    code, out = run(["stats", built / "conversations.jsonl", "-o", tmp_path / "s"], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "s" / "stats.json").read_text())
    assert doc["total"] == doc["conversations"] == len(
        build.load_conversations(built / "conversations.jsonl"))
    per_count = Counter()
    for row in doc["rows"]:
        per_count[row["round_count"]] += row["count"]
    mode = max(per_count, key=lambda k: (per_count[k], -k))
    tail = [per_count.get(r, 0) for r in range(mode, max(per_count) + 1)]
    assert all(a >= b for a, b in zip(tail, tail[1:])), per_count
    assert max(per_count) > 5
    assert out.out.splitlines()[-1].split() == ["total", str(doc["total"])]


def test_stats_three_two_round_conversations(built, tmp_path):
    convs = [c for c in build.load_conversations(built / "conversations.jsonl")
             if c.family == "interactional"][:3]
    assert build.round_histogram(convs) == [{"round_count": 2, "family": "interactional",
                                             "count": 3}]


# --- flatten / score -------------------------------------------------------------------

def test_flatten_command(built, tmp_path, capsys):
    convs = build.load_conversations(built / "conversations.jsonl")
    n_rounds = sum(len(c.rounds) for c in convs)
    for mode in ("tag-as-mask", "caption-substitute"):
        out = tmp_path / mode
        assert run(["flatten", built / "conversations.jsonl", "--mode", mode, "-o", out],
                   capsys)[0] == 0
        tasks = read_records(out / "tasks.jsonl", "tasks")
        assert len(tasks) == n_rounds
        assert json.loads((out / "manifest.json").read_text())["tasks"] == n_rounds


def _predictions(convs, path, how):
    recs = []
    for c in convs:
        for r in c.rounds:
            m = c.target_mask(r.index) if how == "perfect" else np.zeros((c.height, c.width), bool)
            from mrseg.annotations import MaskSpec
            recs.append({"conversation_id": c.conversation_id, "round_index": r.index,
                         "mask": MaskSpec.from_grid(m).to_json(compressed=True)})
    write_records(path, "predictions", recs)


def test_score_command(built, tmp_path, capsys):
    convs = build.load_conversations(built / "conversations.jsonl")
    for how, value in (("perfect", 1.0), ("empty", 0.0)):
        preds = tmp_path / f"{how}.jsonl"
        _predictions(convs, preds, how)
        out = tmp_path / f"score_{how}"
        assert run(["score", preds, built / "conversations.jsonl", "-o", out], capsys)[0] == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["overall"]["miou"] == value and doc["overall"]["ciou"] == value
        assert len(doc["rounds"]) == max(len(c.rounds) for c in convs)
        assert (out / "report.txt").is_file() and (out / "manifest.json").is_file()


def test_score_unknown_round_exit_2(built, tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    preds.write_text(json.dumps({"conversation_id": "nope", "round_index": 1,
                                 "mask": {"size": [1, 1], "counts": [1]}}) + "\n")
    code, out = run(["score", preds, built / "conversations.jsonl", "-o", tmp_path / "s"], capsys)
    assert code == 2 and "nonexistent" in out.err


def test_templates_command(tmp_path, capsys):
    code, out = run(["templates", "-o", tmp_path], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "templates.json").read_text())
    assert doc["positional"]["train"] == 120
    assert "positional" in out.out


# --- configuration and errors ------------------------------------------------------------

def test_config_precedence(build_dir):
    env = {"MRSEG_SEED": "5", "MRSEG_WORKERS": "3", "MRSEG_FAMILIES": "positional"}
    assert build.load_config(None, {}, env).gen.master_seed == 5
    cfg = build.load_config(build_dir / "config.json", {}, env)
    assert cfg.gen.master_seed == 7  # file beats environment
    assert cfg.workers == 1
    assert cfg.families == ("positional",)  # not set in the file, so the env value holds
    assert build.load_config(build_dir / "config.json", {"seed": 9}, env).gen.master_seed == 9


def test_digest_ignores_workers_and_output(build_dir, tmp_path):
    a = build.load_config(build_dir / "config.json", {"workers": 1})
    b = build.load_config(build_dir / "config.json", {"workers": 8, "output_dir": str(tmp_path)})
    c = build.load_config(build_dir / "config.json", {"seed": 1})
    assert a.digest() == b.digest() != c.digest()


@pytest.mark.parametrize("mutate,needle", [
    (lambda c: c.update(split="test"), "split"),
    (lambda c: c["sources"][0].update(instances="missing.json"), "not found"),
    (lambda c: c["sources"][2].pop("parts"), "needs a 'parts' file"),
    (lambda c: c["sources"][0].update(family="painting"), "unknown family"),
    (lambda c: c.update(generation={"p_self": 2}), "p_self"),
    (lambda c: c.update(refiner={"kind": "carrier-pigeon"}), "refiner kind"),
])
def test_config_errors_exit_2(build_dir, tmp_path, capsys, mutate, needle):
    path = build_dir / "config.json"
    cfg = json.loads(path.read_text())
    mutate(cfg)
    path.write_text(json.dumps(cfg))
    code, out = run(["build", "--config", path, "--out", tmp_path / "o"], capsys)
    assert code == 2 and needle in out.err


def test_parse_error_points_at_row(build_dir, tmp_path, capsys):
    doc = json.loads((build_dir / "lvis_instances.json").read_text())
    doc["annotations"][3]["category_id"] = 999
    (build_dir / "lvis_instances.json").write_text(json.dumps(doc))
    code, out = run(["build", "--config", build_dir / "config.json", "--out", tmp_path / "o"],
                    capsys)
    assert code == 2
    assert "lvis_instances.json" in out.err and "annotations[3]" in out.err


def test_missing_and_malformed_corpus_exit_2(tmp_path, capsys):
    assert run(["validate", tmp_path / "nope.jsonl", "-o", tmp_path / "v"], capsys)[0] == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format":"mrseg.tasks","version":1}\n')
    code, out = run(["stats", bad, "-o", tmp_path / "s"], capsys)
    assert code == 2 and "mrseg.conversations" in out.err


def test_refinement_in_build(build_dir, tmp_path, capsys):
    # a replay transcript that rewrites nothing known: every sentence fails open
    cfg_path = build_dir / "config.json"
    cfg = json.loads(cfg_path.read_text())
    (build_dir / "t.json").write_text("[]")
    cfg["refiner"] = {"kind": "replay", "transcript": "t.json"}
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "r"
    assert run(["build", "--config", cfg_path, "--out", out], capsys)[0] == 0
    base = tmp_path / "b"
    cfg["refiner"] = {"kind": "identity"}
    cfg_path.write_text(json.dumps(cfg))
    run(["build", "--config", cfg_path, "--out", base], capsys)
    assert (out / "conversations.jsonl").read_bytes() == (base / "conversations.jsonl").read_bytes()


def test_refined_text_must_keep_spans():
    conv = convgen.Conversation("c", 1, "positional", (
        convgen.Round(1, "Find the dog.", 1, "[SEG]"),
        convgen.Round(2, "Find the cat left of ⟦<instance 1>⟧.", 2, "[SEG]", 1, "instance-tag", 1)),
        0, 10, 10)

    class Lossy:
        def exchange(self, request):
            if request["pass"] == 1:
                return json.dumps({"corrected": request["sentence"].replace("⟦", "").replace(
                    "⟧", "").replace("dog", "puppy")})
            return json.dumps(["Same", "None"])

    (out,) = build.refine_conversations([conv], Lossy(), ["positional"], [])
    assert out.rounds[0].query_text == "Find the puppy."
    assert out.rounds[1].query_text == conv.rounds[1].query_text


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "mrseg" in capsys.readouterr().out
