"""Fixed-point DSP and tiny-ML kernels.

Everything here is integer-only at run time: LUT-backed transcendentals
(log10, sigmoid, sine), in-place IIR signal filters, and the vector
operations needed for ANN forward passes.  Floating point appears only in
table builders and never in an evaluation path.

Scales are fixed per function: sigmoid and sine use 1:1000 on both axes;
the internal log10 uses x 1:10 and y 1:100 (the ``log`` VM word rescales
its result to 1:1000).
"""

import math

from .memory import CELL_MAX, CELL_MIN, sat_cell


class DomainError(ValueError):
    """Argument outside a kernel's defined fixed-point domain."""


# ---------------------------------------------------------------------------
# log10 / sigmoid lookup tables
# ---------------------------------------------------------------------------

# log10lut[j] = int(log10((j+10)/10) * 100), truncated toward zero
LOG10_LUT = [int(math.log10((j + 10) / 10) * 100) for j in range(100)]


def fplog10(x):
    """Fixed-point log10: x at scale 1:10 (>= 10), result at scale 1:100."""
    if x < 10:
        raise DomainError("fplog10 needs x >= 10 (real value >= 1.0)")
    shift = 0
    while x >= 100:
        shift += 1
        x //= 10
    return shift * 100 + LOG10_LUT[x - 10]


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def build_sigmoid_luts():
    """Derive the two sigmoid segment tables from the log10 table.

    The mid segment (1.0 < x < 3.0) is sampled at 0.05 steps and indexed
    through fplog10(x*1000/5)/2 - 65; the tail segment (3.0 <= x < 10.0)
    at 0.1 steps through fplog10(x*1000/10)/10 - 14.  First write wins so
    rebuilds are deterministic.
    """
    sglut13 = {}
    for i in range(20, 60):            # x = 1.00 .. 2.95 step 0.05
        i10 = fplog10(i * 10) // 2 - 65
        if i10 not in sglut13:
            sglut13[i10] = int(_sigmoid(i / 20.0) * 1000) - 731
    sglut310 = {}
    for i in range(30, 100):           # x = 3.0 .. 9.9 step 0.1
        i10 = fplog10(i * 10) // 10 - 14
        if i10 not in sglut310:
            sglut310[i10] = int(_sigmoid(i / 10.0) * 1000) - 952
    lut13 = [sglut13[i] for i in sorted(sglut13)]
    lut310 = [sglut310[i] for i in sorted(sglut310)]
    assert sorted(sglut13) == list(range(len(lut13)))
    assert sorted(sglut310) == list(range(len(lut310)))
    return lut13, lut310, list(LOG10_LUT)


SGLUT13, SGLUT310, _ = build_sigmoid_luts()


# right-edge continuation values of the two LUT segments: the mid segment
# ends at sigmoid(3.0) (952 absolute), the tail at the saturation value 1000
_MID_END = 221
_TAIL_END = 48


def _mid_anchor(x):
    """Mid-segment (1.0..3.0) anchor value at the log bucket holding x."""
    lg = fplog10(x // 5)
    i = lg // 2 - 65
    base = SGLUT13[i]
    nxt = SGLUT13[i + 1] if i + 1 < len(SGLUT13) else _MID_END
    return 731 + base + ((nxt - base) * (lg % 2)) // 2


def fpsigmoid(x):
    """Range-segmented sigmoid, x and y at scale 1:1000, error < 1%.

    Segments: linear ramp up to x=1.0, then two LUT segments indexed
    through the fixed-point log10, interpolating linearly between
    neighbouring anchors so the error stays below one percent everywhere.
    """
    mirror = x < 0
    if mirror:
        x = -x
    if x >= 10000:
        return 0 if mirror else 1000
    if x <= 1000:
        y = 500 + (x * 231) // 1000
    elif x < 3000:
        # the log argument is quantized in 50-unit cells; interpolate
        # between cell anchors to stay under the error budget near x=1.0
        xa = x - x % 50
        y_lo = _mid_anchor(xa)
        y_hi = _mid_anchor(xa + 50) if xa + 50 < 3000 else 952
        y = y_lo + ((y_hi - y_lo) * (x % 50)) // 50
    else:
        lg = fplog10(x // 10)
        i = lg // 10 - 14
        base = SGLUT310[i]
        nxt = SGLUT310[i + 1] if i + 1 < len(SGLUT310) else _TAIL_END
        if i == 0:  # first bucket starts at lg=147 (x=3.0), not at 140
            frac, span = lg - 147, 3
        else:
            frac, span = lg - (140 + 10 * i), 10
        y = 952 + base + ((nxt - base) * frac) // span
    return 1000 - y if mirror else y


# ---------------------------------------------------------------------------
# sine / relu
# ---------------------------------------------------------------------------

_SIN_STEPS = 64
_HALF_PI = 1571     # pi/2 in milliradians
_PI = 3142
_TWO_PI = 6283

SIN_LUT = [round(1000 * math.sin((i / _SIN_STEPS) * (math.pi / 2)))
           for i in range(_SIN_STEPS + 1)]


def fpsin(x):
    """Discrete sine: x in milliradians, result at scale 1:1000."""
    x %= _TWO_PI
    sign = 1
    if x >= _PI:
        sign = -1
        x -= _PI
    if x > _HALF_PI:
        x = _PI - x
    scaled = x * _SIN_STEPS
    i, frac = divmod(scaled, _HALF_PI)
    if i >= _SIN_STEPS:
        return sign * SIN_LUT[_SIN_STEPS]
    base = SIN_LUT[i]
    return sign * (base + ((SIN_LUT[i + 1] - base) * frac) // _HALF_PI)


def fprelu(x):
    return x if x > 0 else 0


def fpsoftmax2(z1, z2):
    """Binary soft-max at scale 1:1000 via the sigmoid of the difference."""
    p1 = fpsigmoid(max(-20000, min(20000, z1 - z2)))
    return p1, 1000 - p1


# ---------------------------------------------------------------------------
# in-place signal filters
# ---------------------------------------------------------------------------

def _check_region(seq, off, length, k):
    if not 1 <= k <= 8:
        raise DomainError("filter strength k must be in 1..8")
    if off < 0 or length < 0 or off + length > len(seq):
        raise DomainError("filter region out of bounds")


def lowp(seq, off, length, k):
    """First-order IIR low pass y[n] = y[n-1] + ((x[n] - y[n-1]) >> k)."""
    _check_region(seq, off, length, k)
    if length == 0:
        return
    prev = seq[off]
    for n in range(off, off + length):
        prev = prev + ((seq[n] - prev) >> k)
        seq[n] = prev


def highp(seq, off, length, k):
    """High pass as the residual of the low pass: x[n] - lowp(x)[n]."""
    _check_region(seq, off, length, k)
    snapshot = [seq[off + n] for n in range(length)]
    lowp(seq, off, length, k)
    for n in range(length):
        seq[off + n] = sat_cell(snapshot[n] - seq[off + n])


def hull(seq, off, length, k):
    """Signal hull: rectify, then low pass (envelope approximation)."""
    _check_region(seq, off, length, k)
    for n in range(off, off + length):
        v = seq[n]
        seq[n] = sat_cell(-v) if v < 0 else v
    lowp(seq, off, length, k)


# ---------------------------------------------------------------------------
# integer vector kernels
# ---------------------------------------------------------------------------

def scale_value(v, s):
    """Positive factors expand, negative reduce (truncating toward zero)."""
    if s > 0:
        return v * s
    if s < 0:
        a = -s
        return -((-v) // a) if v < 0 else v // a
    return v


def _scaled(values, scalevec):
    if scalevec is None:
        return [sat_cell(v) for v in values]
    if len(scalevec) != len(values):
        raise DomainError("scale vector length mismatch")
    return [sat_cell(scale_value(v, s)) for v, s in zip(values, scalevec)]


def vecscale(src, scalevec):
    return _scaled(list(src), scalevec)


def vecadd(a, b, scalevec=None):
    if len(a) != len(b):
        raise DomainError("vecadd operand length mismatch")
    return _scaled([x + y for x, y in zip(a, b)], scalevec)


def vecmul(a, b, scalevec=None):
    if len(a) != len(b):
        raise DomainError("vecmul operand length mismatch")
    return _scaled([x * y for x, y in zip(a, b)], scalevec)


def vecfold(inp, weights, outputs, scalevec=None):
    """Layer fold: out[j] = sum_i inp[i] * weights[j*n + i], row per output."""
    n = len(inp)
    if n == 0 or len(weights) != n * outputs:
        raise DomainError("weight matrix must hold %d x %d cells" %
                          (outputs, n))
    sums = [sum(inp[i] * weights[j * n + i] for i in range(n))
            for j in range(outputs)]
    return _scaled(sums, scalevec)


def vecmap(src, func, scalevec=None):
    return _scaled([func(v) for v in src], scalevec)


def dotprod(a, b):
    """Sum of products in 32-bit arithmetic, returned as a signed 32-bit."""
    if len(a) != len(b):
        raise DomainError("dotprod operand length mismatch")
    s = sum(x * y for x, y in zip(a, b))
    return ((s + 0x80000000) & 0xFFFFFFFF) - 0x80000000


# ---------------------------------------------------------------------------
# decision trees stored as linear search tables
# ---------------------------------------------------------------------------

DT_OUTPUT = 0xFF
DT_OPS = {"<": ord("<"), ">": ord(">"), "=": ord("="), "~": ord("~")}


class DtreeError(ValueError):
    pass


def encode_dtree(tree):
    """Flatten a nested decision-tree description into table bytes.

    Nodes are ('cond', var, op, [(value, subtree), ...], default_subtree)
    or ('out', [(output_id, value), ...]).  All branches point forward.
    """
    blob = bytearray()

    def emit(node):
        start = len(blob)
        if node[0] == "out":
            blob.append(DT_OUTPUT)
            blob.append(len(node[1]))
            for out_id, value in node[1]:
                blob.append(out_id)
                blob.extend((value & 0xFFFF).to_bytes(2, "little"))
            return start
        _, var, op, pairs, default = node
        blob.append(var)
        blob.append(DT_OPS[op])
        blob.append(len(pairs))
        patch = len(blob)
        for value, _ in pairs:
            blob.extend((value & 0xFFFF).to_bytes(2, "little"))
            blob.extend(b"\x00\x00")
        blob.extend(b"\x00\x00")  # default branch
        targets = [emit(sub) for _, sub in pairs]
        dflt = emit(default)
        p = patch
        for t in targets:
            blob[p + 2:p + 4] = t.to_bytes(2, "little")
            p += 4
        blob[p:p + 2] = dflt.to_bytes(2, "little")
        return start

    emit(tree)
    return bytes(blob)


def dtree_eval(blob, inputs):
    """Walk a decision-tree table over the input vector.

    Relational slices take the first matching (value, branch) pair or the
    default; ``~`` takes the pair whose value is nearest the input.
    Returns {output_id: value} from the reached output slice.
    """
    pos = 0
    for _ in range(256):  # malformed trees must not loop forever
        if pos + 2 > len(blob):
            raise DtreeError("slice offset out of range")
        var = blob[pos]
        if var == DT_OUTPUT:
            count = blob[pos + 1]
            out = {}
            p = pos + 2
            for _ in range(count):
                value = int.from_bytes(blob[p + 1:p + 3], "little")
                if value >= 0x8000:
                    value -= 0x10000
                out[blob[p]] = value
                p += 3
            return out
        op = chr(blob[pos + 1])
        count = blob[pos + 2]
        if var >= len(inputs):
            raise DtreeError("input id %d out of range" % var)
        x = inputs[var]
        p = pos + 3
        target = None
        best = None
        for _ in range(count):
            value = int.from_bytes(blob[p:p + 2], "little")
            if value >= 0x8000:
                value -= 0x10000
            branch = int.from_bytes(blob[p + 2:p + 4], "little")
            if op == "~":
                d = abs(x - value)
                if best is None or d < best:
                    best = d
                    target = branch
            elif (op == "<" and x < value) or (op == ">" and x > value) or \
                    (op == "=" and x == value):
                target = branch
                break
            p += 4
        if target is None or (op == "~" and count == 0):
            target = int.from_bytes(blob[pos + 3 + 4 * count:
                                         pos + 5 + 4 * count], "little")
        if target <= pos:
            raise DtreeError("decision-tree branch not forward")
        pos = target
    raise DtreeError("no output slice reached")


# ---------------------------------------------------------------------------
# host-side DSP word installation
# ---------------------------------------------------------------------------

def install_dsp_words(vm):
    """Register the scalar DSP functions and filters as foreign words.

    The scalar words map cells directly; the filter words resolve their
    vector handle against the VM and run in place.
    """
    vm.fios_add("sin", fpsin, 1, 2, 2)
    vm.fios_add("log", lambda x: fplog10(x) * 10, 1, 2, 2)
    vm.fios_add("sigmoid", fpsigmoid, 1, 2, 2)
    vm.fios_add("relu", fprelu, 1, 2, 2)

    def filter_word(fn):
        def run(vecaddr, vecoff, veclen, k):
            fn(vm.vec_view(vecaddr), vecoff, veclen, k)
        return run

    vm.fios_add("lowp", filter_word(lowp), 4, 2, 0)
    vm.fios_add("highp", filter_word(highp), 4, 2, 0)
    vm.fios_add("hull", filter_word(hull), 4, 2, 0)
