import json

import numpy as np
import pytest

from seqcvae.corpus import (
    BOS,
    EOS,
    UNK,
    CaptionRecord,
    Dataset,
    SceneGrammar,
    VocabIndex,
    build_vocab,
    default_grammar,
    generate_synthetic,
    load_jsonl,
    normalize,
    split,
    tokenize,
    training_sentence_index,
)


def tiny_grammar():
    slots = {"a": [["x", "y"]], "b": [["p", "q"]], "c": [["m", "n"]]}
    return SceneGrammar(slots, ["{a} {b} {c}"], feature_dim=4, noise=0.0)


def test_count_valid_is_product_of_choice_sizes():
    g = tiny_grammar()
    assert g.count_valid((0, 0, 0)) == 2 * 2 * 2
    assert len(set(g.enumerate((0, 0, 0)))) == 8


def test_default_grammar_counts_match_enumeration():
    g = default_grammar()
    rng = np.random.default_rng(0)
    for _ in range(5):
        attrs = tuple(int(rng.integers(len(c))) for c in g.slots.values())
        caps = g.enumerate(attrs)
        assert g.count_valid(attrs) == len(caps) == len(set(caps))


def test_match_inverts_realize():
    g = default_grammar()
    attrs = (1, 2, 3, 0, 4)
    for cap in g.enumerate(attrs)[:40]:
        tpl, parsed = g.match(cap)
        for s in g.template_slots(tpl):
            i = g.slot_names.index(s)
            assert parsed[i] == attrs[i]
    assert g.match("completely unrelated words") is None


def test_generation_is_seed_deterministic():
    g = default_grammar(feature_dim=8)
    a, b = generate_synthetic(g, 10, 3, seed=4), generate_synthetic(g, 10, 3, seed=4)
    assert a.digest() == b.digest()
    assert generate_synthetic(g, 10, 3, seed=5).digest() != a.digest()


def test_generated_captions_are_distinct_and_valid():
    g = default_grammar(feature_dim=8)
    ds = generate_synthetic(g, 20, 5, seed=0)
    for cid, caps in ds.captions.items():
        assert len(set(caps)) == 5
        attrs = ds.meta[cid]["attributes"]
        valid = set(g.enumerate(attrs))
        assert all(c in valid for c in caps)
        assert ds.meta[cid]["n_valid"] == len(valid)
    assert ds.feature_dim == 8


def test_too_many_captions_per_scene_is_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(tiny_grammar(), 2, 9, seed=0)


def test_grammar_dict_round_trip_and_validation(tmp_path):
    g = default_grammar()
    p = tmp_path / "g.json"
    p.write_text(json.dumps(g.to_dict()))
    assert SceneGrammar.load(p) == g
    with pytest.raises(ValueError):
        SceneGrammar.from_dict({"slots": {}, "templates": ["{nope}"]})
    with pytest.raises(ValueError):
        SceneGrammar.from_dict({"slots": {}, "templates": [], "extra": 1})


def test_tokenize_and_normalize():
    assert tokenize("A Dog, running!") == ["a", "dog", "running"]
    assert normalize("  The  CAT. ") == "the cat"


def test_vocab_order_and_unknowns():
    ds = Dataset()
    ds.add("c", [0.0], "b a a c")
    ds.add("c", [0.0], "b a")
    v = build_vocab(ds)
    assert v.itos[:4] == ["<bos>", "<eos>", "<pad>", "<unk>"]
    assert v.itos[4:] == ["a", "b", "c"]
    assert v.encode("a zebra") == [v.stoi["a"], UNK]
    assert v.encode_caption("c") == (BOS, v.stoi["c"], EOS)
    assert v.decode([BOS, 4, 5, EOS, 6]) == "a b"
    assert build_vocab(ds, min_count=2).itos[4:] == ["a", "b"]
    assert VocabIndex.from_dict(v.to_dict()).itos == v.itos
    with pytest.raises(ValueError):
        build_vocab(Dataset())


def test_records_truncate_and_validate():
    ds = Dataset()
    ds.add("c", [1.0, 2.0], "a b c d e")
    v = build_vocab(ds)
    (rec,) = ds.records(v, max_len=3)
    assert rec.tokens == (BOS, v.stoi["a"], v.stoi["b"], EOS)
    rec.validate(len(v), 3)
    with pytest.raises(ValueError):
        CaptionRecord((BOS, 4, 5), np.zeros(2), "").validate(10, 5)
    with pytest.raises(ValueError):
        CaptionRecord((BOS, EOS, 4, EOS), np.zeros(2), "").validate(10, 5)


def test_jsonl_round_trip(tmp_path):
    ds = generate_synthetic(default_grammar(feature_dim=4), 5, 2, seed=1)
    p = tmp_path / "d.jsonl"
    ds.to_jsonl(p)
    back = load_jsonl(p)
    assert back.cond_ids == ds.cond_ids
    assert back.captions == ds.captions
    for cid in ds.cond_ids:
        np.testing.assert_array_equal(back.features[cid], ds.features[cid])


@pytest.mark.parametrize(
    "lines",
    [
        ["not json"],
        [json.dumps({"cond_id": "a", "caption": "x"})],
        [json.dumps({"cond_id": "a", "features": [1, 2], "caption": "x"}), json.dumps({"cond_id": "b", "features": [1], "caption": "y"})],
    ],
)
def test_jsonl_rejects_malformed_lines(tmp_path, lines):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line"):
        load_jsonl(p)


def test_split_partitions_conditions():
    ds = generate_synthetic(default_grammar(feature_dim=4), 30, 2, seed=0)
    tr, va, te = split(ds, (0.6, 0.2, 0.2), seed=3)
    assert (len(tr), len(va), len(te)) == (18, 6, 6)
    ids = tr.cond_ids + va.cond_ids + te.cond_ids
    assert sorted(ids) == sorted(ds.cond_ids)
    assert split(ds, (0.6, 0.2, 0.2), seed=3)[0].cond_ids == tr.cond_ids
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split(generate_synthetic(default_grammar(feature_dim=4), 2, 1), (0.9, 0.05, 0.05))


def test_training_sentence_index_normalises():
    ds = Dataset()
    ds.add("c", [0.0], "A dog.")
    assert "a dog" in training_sentence_index(ds)
