"""Shipped core instruction word list.

The instruction set is configuration, not code: this module holds the
default 101-word list as (name, semantics-tag) pairs.  Opcodes are the
positions in this list, so reordering or editing it produces a different
(binary-incompatible) ISA and new lookup tables.  The semantics tag is the
stable identifier the compiler and interpreter dispatch on; names can be
re-spelled per deployment without touching either.

Kinds:
  op        plain one-byte runtime operation
  addr      one-byte operation followed by a 16-bit CS address / index
  blob      one-byte operation followed by a length-prefixed payload
  skip      prefix operation followed by embedded frame data
  directive compile-time only; never appears in bytecode
  internal  emitted by the compiler only; rejected in source text
"""

CORE_WORDS = [
    # stack manipulation
    ("dup", "dup"), ("drop", "drop"), ("swap", "swap"), ("over", "over"),
    ("rot", "rot"), ("nip", "nip"), ("depth", "depth"),
    # arithmetic
    ("+", "add"), ("-", "sub"), ("*", "mul"), ("/", "div"), ("mod", "mod"),
    ("negate", "neg"), ("abs", "abs"), ("min", "min"), ("max", "max"),
    ("1+", "inc1"), ("1-", "dec1"), ("2*", "mul2"), ("2/", "div2"),
    # comparison (true = 1, false = 0)
    ("=", "eq"), ("<>", "ne"), ("<", "lt"), (">", "gt"), ("<=", "le"),
    (">=", "ge"), ("0=", "eqz"), ("0<", "ltz"), ("0>", "gtz"),
    # bitwise / logic
    ("and", "and"), ("or", "or"), ("xor", "xor"), ("invert", "invert"),
    ("lshift", "shl"), ("rshift", "shr"),
    # double-word (32-bit pair) arithmetic
    ("d+", "dadd"), ("d-", "dsub"),
    # memory: frame data, host data, softcore stacks on arrays
    ("@", "fetch"), ("!", "store"), ("+!", "addstore"),
    ("read", "read"), ("write", "write"),
    ("push", "spush"), ("pop", "spop"), ("get", "sget"),
    # loop counters and word exit
    ("i", "loopi"), ("j", "loopj"), ("leave", "leave"), ("exit", "exit"),
    # control structures (compiled to branches)
    ("if", "c-if"), ("else", "c-else"), ("endif", "c-endif"),
    ("begin", "c-begin"), ("until", "c-until"), ("while", "c-while"),
    ("repeat", "c-repeat"), ("again", "c-again"), ("do", "c-do"),
    ("loop", "c-loop"),
    # definitions, embedded data, modules
    (":", "c-colon"), (";", "c-semi"), ("var", "c-var"), ("array", "c-array"),
    ("const", "c-const"), ("import", "c-import"), ("export", "c-export"),
    ("$", "c-addr"),
    # scheduling points and task creation
    ("yield", "yield"), ("sleep", "sleep"), ("await", "await"),
    ("task", "task"), ("end", "end"),
    # exception handling
    ("catch", "catch"), ("throw", "throw"), ("exception", "exception"),
    # streams, links, console
    ("out", "out"), ("in", "in"), ("send", "send"), ("sendn", "sendn"),
    ("receive", "receive"), (".", "dot"), ("cr", "cr"), ("emit", "emit"),
    # integer vector kernels for DSP / ANN forward passes
    ("vecload", "vecload"), ("vecscale", "vecscale"), ("vecadd", "vecadd"),
    ("vecmul", "vecmul"), ("vecfold", "vecfold"), ("vecmap", "vecmap"),
    ("dotprod", "dotprod"), ("vecprint", "vecprint"),
    # tokenizer hook for VM-level compiler experiments
    ("token", "token"),
    # compiler-emitted internals
    ("branch", "branch"), ("branchz", "branchz"), ("call", "call"),
    ("ret", "ret"), ("doinit", "doinit"), ("doloop", "doloop"),
    ("prstr", "prstr"), ("ioscall", "ioscall"), ("iosdata", "iosdata"),
]

# tags the compiler expands at compile time; c-var/c-array additionally
# leave their own opcode in front of the embedded data, which the
# interpreter treats as a "skip over data" prefix
DIRECTIVE_TAGS = {
    "c-if", "c-else", "c-endif", "c-begin", "c-until", "c-while",
    "c-repeat", "c-again", "c-do", "c-loop", "c-colon", "c-semi",
    "c-var", "c-array", "c-const", "c-import", "c-export", "c-addr",
}

# tags whose bytecode word is op + 16-bit operand (3 bytes)
ADDRESS_TAGS = {"branch", "branchz", "call", "doloop", "ioscall", "iosdata"}

# op + 1-byte length + payload bytes
BLOB_TAGS = {"prstr"}

# emitted by the compiler only; using them in source text is an error
INTERNAL_TAGS = ADDRESS_TAGS | BLOB_TAGS | {"ret", "doinit"}


def default_wordlist():
    from .isa import WordList
    return WordList(CORE_WORDS)
