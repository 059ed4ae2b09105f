import json

import pytest

from semauto.corpus import (
    CorpusError,
    Dataset,
    Example,
    SyntheticGrammar,
    generate_synthetic,
    load_native,
    load_webnlg_xml,
    save_native,
    split,
)
from semauto.triples import Triple, TripleSet


# ---------------------------------------------------------------------------
# native format


def test_load_native_single_record(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"triples": [["A", "b", "C"]], "refs": ["A b C."]}\n')
    ds = load_native(path)
    assert len(ds) == 1
    assert ds.examples[0].triples == TripleSet([Triple("A", "b", "C")])
    assert ds.examples[0].references == ("A b C.",)


def test_load_native_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(load_native(path)) == 0


def test_load_native_missing_refs_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"triples": [["a","b","c"]], "refs": ["ok"]}\n'
                    '{"triples": [["a","b","c"]]}\n')
    with pytest.raises(CorpusError, match="line 2"):
        load_native(path)


def test_load_native_invalid_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{oops\n")
    with pytest.raises(CorpusError, match="line 1"):
        load_native(path)


def test_native_roundtrip(tmp_path):
    grammar = SyntheticGrammar()
    ds = generate_synthetic(grammar, n=25, seed=3)
    path = tmp_path / "round.jsonl"
    save_native(ds, path)
    back = load_native(path)
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert a.triples == b.triples
        assert a.references == b.references


# ---------------------------------------------------------------------------
# WebNLG XML subset

WEBNLG_SAMPLE = """<?xml version="1.0" encoding="utf-8"?>
<benchmark>
  <entries>
    <entry category="City" eid="1">
      <modifiedtripleset>
        <mtriple>Zaoyang | isPartOf | Hubei</mtriple>
        <mtriple>Nie_Haisheng | birthPlace | Zaoyang</mtriple>
      </modifiedtripleset>
      <lex lid="1">Nie Haisheng was born in Zaoyang, Hubei.</lex>
      <lex lid="2">Zaoyang, the birthplace of Nie Haisheng, is part of Hubei.</lex>
      <lex lid="3">Nie Haisheng comes from Zaoyang in Hubei.</lex>
    </entry>
    <entry category="City" eid="2">
      <modifiedtripleset>
        <mtriple>not-a-triple</mtriple>
      </modifiedtripleset>
      <lex lid="1">Broken entry.</lex>
    </entry>
    <entry category="City" eid="3">
      <modifiedtripleset>
        <mtriple>A | b | C</mtriple>
      </modifiedtripleset>
      <lex lid="1">A b C.</lex>
    </entry>
  </entries>
</benchmark>
"""


def test_load_webnlg_fields_and_skip(tmp_path):
    path = tmp_path / "sample.xml"
    path.write_text(WEBNLG_SAMPLE)
    result = load_webnlg_xml(path)
    assert result.skipped == 1
    assert len(result.dataset) == 2
    first = result.dataset.examples[0]
    assert len(first.triples) == 2
    assert len(first.references) == 3
    assert first.triples.triples[0] == Triple("Zaoyang", "isPartOf", "Hubei")
    second = result.dataset.examples[1]
    assert second.triples == TripleSet([Triple("A", "b", "C")])


def test_load_webnlg_syntax_error_reports_byte_offset(tmp_path):
    path = tmp_path / "broken.xml"
    path.write_text("<benchmark><entries><entry></benchmark>")
    with pytest.raises(CorpusError, match="byte"):
        load_webnlg_xml(path)


def test_load_webnlg_flags_oversize_entries(tmp_path):
    triples = "\n".join(f"<mtriple>s{i} | p{i} | o{i}</mtriple>" for i in range(8))
    doc = (f"<benchmark><entries><entry><modifiedtripleset>{triples}"
           f"</modifiedtripleset><lex>text.</lex></entry></entries></benchmark>")
    path = tmp_path / "big.xml"
    path.write_text(doc)
    result = load_webnlg_xml(path)
    assert result.oversize == 1
    assert len(result.dataset.examples[0].triples) == 8


# ---------------------------------------------------------------------------
# synthetic grammar


def test_generate_synthetic_deterministic():
    grammar = SyntheticGrammar()
    a = generate_synthetic(grammar, n=1, seed=7)
    b = generate_synthetic(grammar, n=1, seed=7)
    assert a.examples[0].references == b.examples[0].references
    assert a.examples[0].triples == b.examples[0].triples


def test_generate_synthetic_counts_in_bounds():
    grammar = SyntheticGrammar()
    ds = generate_synthetic(grammar, n=500, seed=1)
    assert len(ds) == 500
    assert all(1 <= len(ex.triples) <= grammar.max_triples for ex in ds)


def test_synthetic_inverse_recovers_every_example():
    grammar = SyntheticGrammar()
    ds = generate_synthetic(grammar, n=300, seed=9)
    for ex in ds:
        assert grammar.parse_text(ex.references[0]) == ex.triples


def test_every_template_clause_is_unambiguous():
    # cross product of entity pairs and templates must parse back exactly
    grammar = SyntheticGrammar()
    for pred, templates in grammar.predicates.items():
        for tpl in templates:
            for s in grammar.entities[:4]:
                for o in grammar.entities[-4:]:
                    if s == o:
                        continue
                    triple = Triple(s, pred, o)
                    clause = grammar.render_clause(triple, tpl)
                    assert grammar.parse_text(clause) == TripleSet([triple]), clause


def test_generate_synthetic_rejects_zero():
    with pytest.raises(CorpusError):
        generate_synthetic(SyntheticGrammar(), n=0, seed=0)


# ---------------------------------------------------------------------------
# splitting


def _tiny_dataset(n):
    grammar = SyntheticGrammar()
    return generate_synthetic(grammar, n=n, seed=2)


def test_split_sizes():
    train, dev, test = split(_tiny_dataset(10), (0.8, 0.1, 0.1), seed=0)
    assert (len(train), len(dev), len(test)) == (8, 1, 1)


def test_split_is_a_partition():
    ds = _tiny_dataset(30)
    train, dev, test = split(ds, (0.5, 0.25, 0.25), seed=4)
    combined = sorted(
        (ex.references[0] for part in (train, dev, test) for ex in part))
    assert combined == sorted(ex.references[0] for ex in ds)


def test_split_deterministic():
    ds = _tiny_dataset(20)
    first = split(ds, (0.8, 0.1, 0.1), seed=5)
    second = split(ds, (0.8, 0.1, 0.1), seed=5)
    for a, b in zip(first, second):
        assert [e.references for e in a] == [e.references for e in b]


def test_split_rejects_empty_piece():
    with pytest.raises(CorpusError):
        split(_tiny_dataset(5), (0.9, 0.05, 0.05), seed=0)


def test_split_rejects_bad_fractions():
    with pytest.raises(CorpusError):
        split(_tiny_dataset(10), (0.5, 0.2, 0.2), seed=0)
