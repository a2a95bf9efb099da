"""Word list, perfect hash table, linear search table, and the artifact."""

import random

import pytest

from rexavm.corewords import CORE_WORDS
from rexavm.isa import (IsaTables, IsaError, LinearSearchTable,
                        PerfectHashTable, WordList, load_wordlist)

# a standard Forth-79/83 core selection: 100 words, average length ~4
FORTH100 = """! # #> #s ' * */ + +! +loop - . / /mod 0< 0= 0> 1+ 1- 2+ 2- 2/
2* 2dup 2drop 2swap 2over : ; < <# = > >in >r ?dup @ abort abs allot and
base begin c! c@ cmove compile constant convert count cr create d+ d- d<
decimal definitions depth do does> drop dup else emit execute exit expect
fill find forget forth here hold i if immediate j key leave literal loop
max min mod negate not or over pad pick quit r> r@ repeat roll rot sign
space spaces state swap then type until update variable vocabulary while
within word xor""".split()[:100]

NONWORD_CHARS = [chr(c) for c in range(0x21, 0x7F) if chr(c) not in "()\""]


def random_strings(rng, n, max_len=17):
    out = []
    for _ in range(n):
        out.append("".join(rng.choice(NONWORD_CHARS)
                           for _ in range(rng.randint(1, max_len))))
    return out


class TestWordList:
    def test_core_list_has_101_words(self):
        wl = WordList(CORE_WORDS)
        assert len(wl) == 101
        assert wl.opcode_of["dup"] == 0
        assert [wl.opcode_of[n] for n in wl.names] == list(range(101))

    def test_duplicate_name_rejected(self):
        with pytest.raises(IsaError):
            WordList([("dup", "dup"), ("dup", "dup2")])

    @pytest.mark.parametrize("name", ["", "a" * 16, "has space", "par(en",
                                      "qu\"ote", "123", "-7", "42l"])
    def test_invalid_names_rejected(self, name):
        with pytest.raises(IsaError):
            WordList([(name, "tag")])

    def test_load_wordlist_forms(self):
        wl = load_wordlist('{"words": [["a", "ta"], ["b", "tb"]]}')
        assert wl.names == ["a", "b"] and wl.tags == ["ta", "tb"]
        wl = load_wordlist('[{"name": "x", "tag": "tx"}, {"name": "y"}]')
        assert wl.tags == ["tx", "y"]
        assert wl.opcode_of == {"x": 0, "y": 1}

    def test_load_wordlist_empty_and_malformed(self):
        assert len(load_wordlist("[]")) == 0
        with pytest.raises(IsaError):
            load_wordlist("not json {")
        with pytest.raises(IsaError):
            load_wordlist('{"nope": 1}')


class TestPerfectHash:
    def test_bijection_over_core_words(self, tables):
        for op, name in enumerate(tables.wordlist.names):
            assert tables.pht.lookup(name) == op

    def test_single_word(self):
        pht = PerfectHashTable.build(WordList([("dup", "dup")]))
        assert pht.lookup("dup") == 0
        assert pht.lookup("dup2") is None

    def test_missing_and_edge_inputs(self, tables):
        assert tables.pht.lookup("nosuchword") is None
        assert tables.pht.lookup("") is None
        assert tables.pht.lookup("x" * 40) is None
        assert tables.pht.lookup("d\xfcp") is None

    def test_storage_close_to_m_plus_check_table(self):
        # 100 words with length cap 8: aux ~2m+1 plus an 800-byte check
        # table, within 25% of the expected ~828 bytes total
        words = [w for w in FORTH100 if len(w) <= 8][:100]
        assert len(words) == 100
        pht = PerfectHashTable.build(WordList([(w, w) for w in words]))
        assert pht.l_max == 8
        assert len(pht.check) == 100 * 8
        assert abs(pht.size_bytes() - 828) <= 0.25 * 828

    def test_reproducible_from_stored_params(self, tables):
        blob = tables.pht.to_bytes()
        clone = PerfectHashTable.from_bytes(blob)
        assert clone.seed1 == tables.pht.seed1
        for op, name in enumerate(tables.wordlist.names):
            assert clone.lookup(name) == op

    def test_empty_wordlist_rejected(self):
        with pytest.raises(IsaError):
            PerfectHashTable.build(WordList([]))


class TestLinearSearch:
    def test_all_core_words_resolve(self, tables):
        for op, name in enumerate(tables.wordlist.names):
            assert tables.lst.lookup(name) == op
            assert tables.lst.last_slices <= len(name)

    def test_single_short_word(self):
        lst = LinearSearchTable.build(WordList([("i", "i")]))
        assert lst.lookup("i") == 0
        assert lst.lookup("j") is None

    def test_per_length_subtrees(self):
        # "do" and "dup" live in different length classes: no shared subtree
        lst = LinearSearchTable.build(WordList([("do", "a"), ("dup", "b")]))
        assert lst.header[1] == 0
        assert lst.header[2] != 0 and lst.header[3] != 0
        assert lst.lookup("do") == 0 and lst.lookup("dup") == 1

    def test_prefixes_and_mutations_rejected(self, tables):
        for name in tables.wordlist.names:
            for probe in (name[:-1], name + "x", "x" + name, name[1:],
                          name * 2):
                if probe and probe not in tables.wordlist.opcode_of:
                    assert tables.lst.lookup(probe) is None, probe

    def test_forth_table_size_near_700_bytes(self):
        wl = WordList([(w, w) for w in FORTH100])
        lst = LinearSearchTable.build(wl)
        for i, w in enumerate(FORTH100):
            assert lst.lookup(w) == i
        assert abs(lst.size_bytes() - 700) <= 0.25 * 700

    def test_shipped_list_size_within_budget(self, tables):
        assert abs(tables.lst.size_bytes() - 700) <= 0.25 * 700

    def test_slice_traversals_bounded(self, tables):
        rng = random.Random(11)
        for probe in random_strings(rng, 500, 9):
            tables.lst.lookup(probe)
            assert tables.lst.last_slices <= max(1, len(probe))

    def test_large_random_set_with_continuations(self):
        rng = random.Random(23)
        words = set()
        while len(words) < 230:
            words.add("".join(rng.choice("abcdefg")
                              for _ in range(rng.randint(3, 10))))
        wl = WordList([(w, w) for w in sorted(words)])
        lst = LinearSearchTable.build(wl)
        assert lst.stats["continuations"] > 0
        for i, w in enumerate(wl.names):
            assert lst.lookup(w) == i
        for probe in random_strings(rng, 20000, 11):
            assert lst.lookup(probe) == wl.opcode_of.get(probe)

    def test_byte_round_trip(self, tables):
        clone = LinearSearchTable.from_bytes(tables.lst.to_bytes())
        for op, name in enumerate(tables.wordlist.names):
            assert clone.lookup(name) == op


class TestEquivalence:
    def test_pht_equals_lst_on_random_probes(self, tables):
        rng = random.Random(7)
        for probe in random_strings(rng, 20000):
            assert tables.pht.lookup(probe) == tables.lst.lookup(probe)


class TestArtifact:
    def test_round_trip(self, tables, tmp_path):
        path = tmp_path / "core.rxis"
        tables.save(path)
        clone = IsaTables.load(path)
        assert clone.wordlist.words == tables.wordlist.words
        for op, name in enumerate(tables.wordlist.names):
            assert clone.pht.lookup(name) == op
            assert clone.lst.lookup(name) == op

    def test_layout_header(self, tables):
        blob = tables.to_bytes()
        assert blob[:4] == b"RXIS"
        assert blob[4] == 1
        assert int.from_bytes(blob[5:7], "little") == 101

    def test_bad_magic_rejected(self, tables):
        with pytest.raises(IsaError):
            IsaTables.from_bytes(b"XXXX" + tables.to_bytes()[4:])
