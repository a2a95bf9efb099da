"""Build-time ISA tables: word list, perfect hash table, linear search table.

The compiler resolves core words with one of two interchangeable lookup
structures generated from the word list:

* a minimal perfect hash table (PHT) with constant lookup time, where the
  hash of each word equals its opcode, plus a string check table to reject
  non-words, and
* a linear search table (LST), a character trie compacted into a flat byte
  array with one subtree per word length, cheaper per lookup on average but
  with data-dependent time.

Both are pure build-time artifacts; the canonical interchange format is the
"RXIS" table blob written by ``gen-isa``.
"""

import json
import random
import struct

from .corewords import CORE_WORDS

NAME_MAX = 15
ARTIFACT_MAGIC = b"RXIS"
ARTIFACT_VERSION = 1

# characters that can never appear in word names: the tokenizer owns them
_FORBIDDEN = set("(\")")


class IsaError(Exception):
    pass


def _valid_name(name):
    if not 1 <= len(name) <= NAME_MAX:
        return False
    for ch in name:
        if not 0x21 <= ord(ch) <= 0x7E or ch in _FORBIDDEN:
            return False
    # names must not be mistakable for numeric literals
    body = name[:-1] if name.endswith("l") else name
    stripped = body[1:] if body[:1] == "-" else body
    if stripped.isdigit():
        return False
    return True


class WordList:
    """Ordered (name, semantics-tag) pairs; a word's opcode is its position."""

    def __init__(self, words):
        names = set()
        self.words = []
        for entry in words:
            name, tag = entry[0], entry[1]
            if not _valid_name(name):
                raise IsaError("invalid word name: %r" % name)
            if name in names:
                raise IsaError("duplicate word name: %r" % name)
            names.add(name)
            self.words.append((name, tag))
        self.opcode_of = {name: op for op, (name, _) in enumerate(self.words)}
        self.names = [name for name, _ in self.words]
        self.tags = [tag for _, tag in self.words]
        self.l_max = max((len(n) for n in self.names), default=0)

    def __len__(self):
        return len(self.words)


def load_wordlist(doc):
    """Parse a word-list configuration document (JSON text or parsed object).

    Accepted shapes: {"words": [...]} or a bare list, with entries either
    ["name", "tag"] pairs or {"name": ..., "tag": ...} objects.  Opcodes are
    assigned in document order starting at 0.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise IsaError("malformed word-list document: %s" % exc) from exc
    if isinstance(doc, dict):
        doc = doc.get("words")
    if not isinstance(doc, list):
        raise IsaError("word-list document must hold a list of words")
    words = []
    for entry in doc:
        if isinstance(entry, dict):
            words.append((entry["name"], entry.get("tag", entry["name"])))
        else:
            name = entry[0]
            tag = entry[1] if len(entry) > 1 else name
            words.append((name, tag))
    return WordList(words)


# ---------------------------------------------------------------------------
# Perfect hash table
# ---------------------------------------------------------------------------

def _mix(s, seed):
    """Jenkins-style one-at-a-time string mix with a 32-bit seed."""
    h = seed & 0xFFFFFFFF
    for ch in s:
        h = (h + ord(ch)) & 0xFFFFFFFF
        h = (h + (h << 10)) & 0xFFFFFFFF
        h ^= h >> 6
    h = (h + (h << 3)) & 0xFFFFFFFF
    h ^= h >> 11
    h = (h + (h << 15)) & 0xFFFFFFFF
    return h


class PhtBuildError(IsaError):
    """No acyclic hash graph found within the bounded parameter search."""


class PerfectHashTable:
    """Minimal perfect hash mapping each word to its own opcode.

    Construction draws two seeded string mixes f1, f2 mapping words onto the
    vertices of a graph of size ``n_vertices``; every word is an edge whose
    value is its opcode.  If the graph is acyclic, vertex values g[] can be
    assigned so that (g[f1(w)] + g[f2(w)]) mod m equals w's opcode.  The g
    array is the byte-sized aux table; a string check table rejects inputs
    outside the word set.  Seeds are kept so tables rebuild reproducibly.
    """

    MAX_SEED_TRIES = 64

    def __init__(self, m, l_max, seed1, seed2, n_vertices, aux, check):
        self.m = m
        self.l_max = l_max
        self.seed1 = seed1
        self.seed2 = seed2
        self.n_vertices = n_vertices
        self.aux = aux      # bytearray of n_vertices vertex values (0..m-1)
        self.check = check  # bytearray m * l_max, zero-padded rows

    @classmethod
    def build(cls, wordlist, rng=None):
        m = len(wordlist)
        if m == 0:
            raise IsaError("cannot build PHT from an empty word list")
        if m > 256:
            raise IsaError("PHT aux entries are bytes; at most 256 words")
        rng = rng or random.Random(0x52584953)
        l_max = wordlist.l_max
        for n_vertices in (2 * m + 1, (5 * m) // 2 + 1, 3 * m + 1):
            for _ in range(cls.MAX_SEED_TRIES):
                seed1 = rng.getrandbits(32)
                seed2 = rng.getrandbits(32)
                g = cls._assign(wordlist, seed1, seed2, n_vertices)
                if g is not None:
                    check = bytearray(m * l_max)
                    for op, name in enumerate(wordlist.names):
                        row = name.encode("ascii")
                        check[op * l_max:op * l_max + len(row)] = row
                    return cls(m, l_max, seed1, seed2, n_vertices,
                               bytearray(g), check)
        raise PhtBuildError(
            "no collision-free hash parameters found for this word set")

    @staticmethod
    def _assign(wordlist, seed1, seed2, n):
        m = len(wordlist)
        edges = []
        adj = [[] for _ in range(n)]
        for op, name in enumerate(wordlist.names):
            u = _mix(name, seed1) % n
            v = _mix(name, seed2) % n
            if u == v:
                return None
            edges.append((u, v, op))
            adj[u].append((v, op))
            adj[v].append((u, op))
        # assign vertex values by DFS; a revisit means the graph is cyclic
        g = [None] * n
        for u, v, _ in edges:
            if g[u] is not None:
                continue
            g[u] = 0
            stack = [(u, None)]
            while stack:
                node, parent_edge = stack.pop()
                for (other, op) in adj[node]:
                    if op == parent_edge:
                        parent_edge = None  # skip the edge we came through once
                        continue
                    want = (op - g[node]) % m
                    if g[other] is None:
                        g[other] = want
                        stack.append((other, op))
                    elif g[other] != want:
                        return None
        return [0 if x is None else x for x in g]

    def lookup(self, s):
        """Opcode of ``s`` or None; verified against the string check table."""
        if not 1 <= len(s) <= self.l_max:
            return None
        try:
            row = s.encode("ascii")
        except UnicodeEncodeError:
            return None
        i = (self.aux[_mix(s, self.seed1) % self.n_vertices]
             + self.aux[_mix(s, self.seed2) % self.n_vertices]) % self.m
        base = i * self.l_max
        stored = self.check[base:base + self.l_max]
        if stored[:len(row)] == row and not any(stored[len(row):]):
            return i
        return None

    def size_bytes(self):
        return len(self.aux) + len(self.check)

    def to_bytes(self):
        head = struct.pack("<BIIHH", self.l_max, self.seed1, self.seed2,
                           self.n_vertices, self.m)
        return head + bytes(self.aux) + bytes(self.check)

    @classmethod
    def from_bytes(cls, blob):
        l_max, seed1, seed2, n, m = struct.unpack_from("<BIIHH", blob, 0)
        off = struct.calcsize("<BIIHH")
        aux = bytearray(blob[off:off + n])
        off += n
        check = bytearray(blob[off:off + m * l_max])
        return cls(m, l_max, seed1, seed2, n, aux, check)


# ---------------------------------------------------------------------------
# Linear search table
# ---------------------------------------------------------------------------

LST_NOT_FOUND = 0x00   # slice-terminating entry; the search fails here
LST_CONT = 0x01        # synthetic continuation entry: hop forward and go on
LST_LEAF = 0x80        # flag bit on the matched character of a final char

_TRAMP_REACH = 250     # how far forward a single 1-byte branch may land


class _Run:
    """A maximal inline run: slice entries of a lineage of nodes, where each
    node's largest child continues the run in place, terminated by a single
    Not-Found entry.  Out-of-line children branch forward to their own runs.
    """

    __slots__ = ("entries", "terminated")

    def __init__(self):
        # entries: ('leaf', char, index) | ('link', char, target_run)
        #        | ('next', char, None)   -- child continues 2 bytes ahead
        #        | ('cont', '', target)   -- run continues at another segment
        self.entries = []
        self.terminated = True

    def size(self):
        return 2 * (len(self.entries) + (1 if self.terminated else 0))


class _Tramp:
    __slots__ = ("target",)

    def __init__(self, target):
        self.target = target

    def size(self):
        return 2


class LinearSearchTable:
    """Character trie over the word set, compacted into a flat byte array.

    One subtree per word length; a header maps each length to its root
    slice.  A slice is a run of 2-byte entries (char, forward branch)
    terminated by a Not-Found entry; final characters carry the leaf flag
    and the word index instead of a branch.  Branches are single bytes, so
    the builder splits long jumps with synthetic continuation entries.
    """

    def __init__(self, l_max, header, body, stats=None):
        self.l_max = l_max
        self.header = header  # length -> absolute body offset, index 1..l_max
        self.body = body
        self.stats = stats or {}
        self.last_slices = 0  # logical slices touched by the last lookup

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, wordlist):
        if len(wordlist) == 0:
            raise IsaError("cannot build LST from an empty word list")
        if len(wordlist) > 256:
            raise IsaError("LST word indices are bytes; at most 256 words")
        by_len = {}
        for op, name in enumerate(wordlist.names):
            by_len.setdefault(len(name), []).append((name, op))

        l_max = wordlist.l_max
        items = []
        roots = {}
        for length in sorted(by_len):
            root = cls._build_trie(by_len[length], length, items)
            roots[length] = root
        cls._split_long_runs(items)
        body, offsets = cls._layout(items)

        header = [0] * (l_max + 1)
        for length, root in roots.items():
            header[length] = offsets[id(root)]

        runs = [it for it in items if isinstance(it, _Run)]
        branch_counts = [len(r.entries) for r in runs]
        stats = {
            "slices": len(runs),
            "continuations": sum(isinstance(it, _Tramp) for it in items),
            "min_branches": min(branch_counts),
            "max_branches": max(branch_counts),
            "avg_branches": sum(branch_counts) / len(branch_counts),
        }
        return cls(l_max, header, body, stats)

    @staticmethod
    def _build_trie(words, length, items):
        # node = {char: child-node}; at final depth the "child" is the index
        root = {}
        for name, op in words:
            node = root
            for ch in name[:-1]:
                node = node.setdefault(ch, {})
            node[name[-1]] = op

        def count(node, depth):
            if depth == length - 1:
                return len(node)
            return len(node) + sum(count(c, depth + 1) for c in node.values())

        # The largest child subtree continues the run in place (saving its
        # terminator); smaller siblings branch forward to their own runs.
        def fill(run, node, depth):
            if depth == length - 1:
                for ch in sorted(node):
                    run.entries.append(("leaf", ch, node[ch]))
                return
            kids = sorted(node)
            inline = max(kids, key=lambda ch: (count(node[ch], depth + 1), ch))
            links = []
            for ch in kids:
                if ch != inline:
                    links.append(len(run.entries))
                    run.entries.append(("link", ch, None))
            run.entries.append(("next", inline, None))
            fill(run, node[inline], depth + 1)
            for ei in links:
                ch = run.entries[ei][1]
                sub = _Run()
                items.append(sub)
                fill(sub, node[ch], depth + 1)
                run.entries[ei] = ("link", ch, sub)

        root_run = _Run()
        items.append(root_run)
        fill(root_run, root, 0)
        return root_run

    @staticmethod
    def _split_long_runs(items, max_entries=100):
        """Segment oversized runs so the layout can plant trampolines between
        them; segments are chained with synthetic continuation entries."""
        i = 0
        while i < len(items):
            it = items[i]
            if isinstance(it, _Run) and len(it.entries) > max_entries:
                rest = _Run()
                rest.entries = it.entries[max_entries:]
                rest.terminated = it.terminated
                it.entries = it.entries[:max_entries] + [("cont", "", rest)]
                it.terminated = False
                items.insert(i + 1, rest)
            i += 1

    @staticmethod
    def _layout(items):
        """Fix byte offsets, inserting continuation hops for long branches.

        Body offset 0 holds a sentinel Not-Found entry so that a header
        offset of 0 can unambiguously mean "no words of this length".
        """
        for _ in range(4096):
            offsets = {}
            pos = 2  # sentinel entry occupies offsets 0..1
            for it in items:
                offsets[id(it)] = pos
                pos += it.size()
            fix = None  # (entry byte offset, item, entry index or None)
            for it in items:
                base = offsets[id(it)]
                if isinstance(it, _Tramp):
                    if offsets[id(it.target)] - base > 255:
                        fix = (base, it, None)
                        break
                    continue
                for ei, entry in enumerate(it.entries):
                    if entry[0] not in ("link", "cont"):
                        continue
                    eoff = base + 2 * ei
                    if offsets[id(entry[2])] - eoff > 255:
                        fix = (eoff, it, ei)
                        break
                if fix:
                    break
            if fix is None:
                body = bytearray((LST_NOT_FOUND, 0))
                for it in items:
                    base = offsets[id(it)]
                    if isinstance(it, _Tramp):
                        body += bytes((LST_CONT, offsets[id(it.target)] - base))
                        continue
                    for ei, entry in enumerate(it.entries):
                        kind, ch, aux = entry
                        eoff = base + 2 * ei
                        if kind == "leaf":
                            body += bytes((ord(ch) | LST_LEAF, aux))
                        elif kind == "next":
                            body += bytes((ord(ch), 2))
                        elif kind == "cont":
                            body += bytes((LST_CONT, offsets[id(aux)] - eoff))
                        else:
                            body += bytes((ord(ch), offsets[id(aux)] - eoff))
                    if it.terminated:
                        body += bytes((LST_NOT_FOUND, 0))
                return bytes(body), offsets
            # plant a trampoline at the last item boundary one branch byte
            # can still reach; chained trampolines cover longer distances
            eoff, item, ei = fix
            target = item.target if ei is None else item.entries[ei][2]
            insert_at = None
            for i, it in enumerate(items):
                off = offsets[id(it)]
                if off <= eoff:
                    continue
                if off > eoff + _TRAMP_REACH:
                    break
                insert_at = i
            if insert_at is None:
                raise IsaError("no reachable boundary for LST continuation")
            tramp = _Tramp(target)
            items.insert(insert_at, tramp)
            if ei is None:
                item.target = tramp
            else:
                kind, ch, _ = item.entries[ei]
                item.entries[ei] = (kind, ch, tramp)
        raise IsaError("LST layout did not converge")

    # -- search --------------------------------------------------------------

    def lookup(self, s):
        """Word index of ``s`` or None; touches at most len(s) slices."""
        self.last_slices = 0
        n = len(s)
        if not 1 <= n <= self.l_max:
            return None
        pos = self.header[n]
        if pos == 0:
            return None
        try:
            codes = s.encode("ascii")
        except UnicodeEncodeError:
            return None
        body = self.body
        self.last_slices = 1
        j = 0
        while True:
            b = body[pos]
            if b == LST_NOT_FOUND:
                return None
            if b == LST_CONT:
                pos += body[pos + 1]
                continue
            if (b & 0x7F) == codes[j]:
                if b & LST_LEAF:
                    # a leaf only accepts at final depth; a lagged scan that
                    # drifted into an inlined child run is rejected here
                    if j == n - 1:
                        return body[pos + 1]
                elif j < n - 1:
                    pos += body[pos + 1]
                    j += 1
                    self.last_slices += 1
                    continue
            pos += 2

    def size_bytes(self):
        return 1 + 2 * self.l_max + len(self.body)

    def to_bytes(self):
        out = bytearray([self.l_max])
        for length in range(1, self.l_max + 1):
            out += struct.pack("<H", self.header[length])
        out += struct.pack("<H", len(self.body))
        out += self.body
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob):
        l_max = blob[0]
        header = [0] * (l_max + 1)
        off = 1
        for length in range(1, l_max + 1):
            header[length] = struct.unpack_from("<H", blob, off)[0]
            off += 2
        (body_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        body = bytes(blob[off:off + body_len])
        return cls(l_max, header, body)


# ---------------------------------------------------------------------------
# Combined artifact
# ---------------------------------------------------------------------------

class IsaTables:
    """Word list plus both lookup tables; the unit gen-isa emits and loads."""

    def __init__(self, wordlist, pht, lst):
        self.wordlist = wordlist
        self.pht = pht
        self.lst = lst

    @classmethod
    def build(cls, wordlist=None, rng=None):
        wordlist = wordlist or WordList(CORE_WORDS)
        return cls(wordlist, PerfectHashTable.build(wordlist, rng),
                   LinearSearchTable.build(wordlist))

    def to_bytes(self):
        pht_blob = self.pht.to_bytes()
        lst_blob = self.lst.to_bytes()
        names = bytearray()
        for name, tag in self.wordlist.words:
            nb, tb = name.encode("ascii"), tag.encode("ascii")
            names += bytes([len(nb)]) + nb + bytes([len(tb)]) + tb
        out = bytearray(ARTIFACT_MAGIC)
        out.append(ARTIFACT_VERSION)
        out += struct.pack("<H", len(self.wordlist))
        for blob in (pht_blob, lst_blob, bytes(names)):
            out += struct.pack("<I", len(blob))
            out += blob
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != ARTIFACT_MAGIC:
            raise IsaError("bad table artifact magic")
        if blob[4] != ARTIFACT_VERSION:
            raise IsaError("unsupported table artifact version %d" % blob[4])
        (count,) = struct.unpack_from("<H", blob, 5)
        off = 7
        sections = []
        for _ in range(3):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            sections.append(blob[off:off + n])
            off += n
        pht = PerfectHashTable.from_bytes(sections[0])
        lst = LinearSearchTable.from_bytes(sections[1])
        words = []
        p = 0
        names = sections[2]
        for _ in range(count):
            nl = names[p]
            name = names[p + 1:p + 1 + nl].decode("ascii")
            p += 1 + nl
            tl = names[p]
            tag = names[p + 1:p + 1 + tl].decode("ascii")
            p += 1 + tl
            words.append((name, tag))
        return cls(WordList(words), pht, lst)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
