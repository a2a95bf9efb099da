"""In-place just-in-time text-to-bytecode compiler.

Source text lives inside its code frame and is overwritten with bytecode as
it is tokenized, so compilation needs no extra buffer.  The write cursor
must never pass the read cursor; token extents (text plus the trailing
delimiter) provide the head room: a one-byte op always fits over its word,
a 2-byte short literal over a digit plus delimiter, and a 4-byte double
literal over the two-digit minimum plus the "l" suffix and delimiter.

Scalar variables and initialized arrays are embedded in place behind their
skip-prefix opcode; non-initialized arrays are placed after the compiled
code and the frame is trimmed (or extended) to its final content size.
"""

from .bytecode import (DOUBLE_MAX, DOUBLE_MIN, encode_literal, write_u16)
from .memory import EXC_NAMES, OutOfCodeSpace, to_cell
from .corewords import DIRECTIVE_TAGS, INTERNAL_TAGS

WHITESPACE = b" \t\r\n"

T_WORD = "word"
T_INT = "int"
T_DOUBLE = "double"
T_STRING = "string"
T_EOF = "eof"

CTRL_DEPTH = 16


class CompileError(Exception):
    """Positioned compile diagnostic: (frame id, byte offset, message)."""

    def __init__(self, msg, pos=0, frame_id=None):
        super().__init__(msg)
        self.msg = msg
        self.pos = pos
        self.frame_id = frame_id

    def __str__(self):
        return "frame %s @%d: %s" % (self.frame_id, self.pos, self.msg)


def tokenize(buf, pos, end):
    """Next token in buf[pos:end]: returns (kind, value, tok_start, next_pos).

    Comments ``( ... )`` are skipped; ``." ..."`` yields a string token with
    one separating space consumed; an optional ``l`` suffix on a number
    yields a double token.  Whitespace runs are collapsed.
    """
    while True:
        while pos < end and buf[pos] in WHITESPACE:
            pos += 1
        if pos >= end:
            return T_EOF, None, pos, pos
        start = pos
        if buf[pos] == 0x28:  # '(' opens a comment
            close = buf.find(b")", pos + 1, end)
            if close < 0:
                raise CompileError("unterminated comment", start)
            pos = close + 1
            continue
        if buf[pos:pos + 2] == b'."':
            q = buf.find(b'"', pos + 2, end)
            if q < 0:
                raise CompileError("unterminated string literal", start)
            text = bytes(buf[pos + 2:q])
            if text[:1] == b" ":
                text = text[1:]
            return T_STRING, text, start, q + 1
        while pos < end and buf[pos] not in WHITESPACE:
            pos += 1
        word = bytes(buf[start:pos])
        body = word[:-1] if word.endswith(b"l") else word
        digits = body[1:] if body[:1] == b"-" else body
        if digits.isdigit():
            value = int(body)
            kind = T_DOUBLE if word.endswith(b"l") else T_INT
            return kind, value, start, pos
        return T_WORD, word.decode("ascii", "replace"), start, pos


class Compiler:
    """Translates one code frame from source to bytecode, in place."""

    def __init__(self, vm):
        self.vm = vm

    def compile_frame(self, frame):
        vm = self.vm
        cs = vm.cs
        if frame.state != "source":
            raise CompileError("frame is not in source state", 0, frame.id)
        self.frame = frame
        self.buf = cs.bytes
        self.start = frame.start
        self.end = frame.start + frame.length
        self.rpos = frame.start
        self.wpos = frame.start
        self.ctrl = []
        self.defn = None          # (name, entry, branch patch addr)
        self.appended = []        # (name, cells, [literal patch addrs])
        self.pending_refs = {}    # name -> list of 4-byte literal positions

        self.tokens_compiled = 0
        while True:
            kind, value, tok_start, new_pos = self._next_token()
            if kind == T_EOF:
                break
            self._advance(new_pos)
            self.tokens_compiled += 1
            try:
                if kind == T_INT:
                    self._emit_literal(value, tok_start)
                elif kind == T_DOUBLE:
                    self._emit_double(value, tok_start)
                elif kind == T_STRING:
                    self._emit_string(value, tok_start)
                else:
                    self._compile_word(value, tok_start)
            except OutOfCodeSpace as exc:
                raise self._err(str(exc), tok_start)
        if self.ctrl:
            raise self._err("unclosed control structure", self.rpos - self.start)
        if self.defn:
            raise self._err("unterminated definition of %r" % self.defn[0],
                            self.rpos - self.start)
        self._finalize()
        frame.state = "compiled"
        return frame

    # -- token plumbing ----------------------------------------------------

    def _next_token(self):
        try:
            return tokenize(self.buf, self.rpos, self.end)
        except CompileError as exc:
            exc.pos -= self.start
            exc.frame_id = self.frame.id
            raise

    def _advance(self, new_pos):
        """Consume a token including its trailing delimiter run; the
        delimiter bytes are what guarantee in-place head room."""
        self.rpos = new_pos
        while self.rpos < self.end and self.buf[self.rpos] in WHITESPACE:
            self.rpos += 1

    def _take_word(self, what):
        kind, value, tok_start, new_pos = self._next_token()
        if kind != T_WORD:
            raise self._err("expected %s" % what, tok_start - self.start)
        self._advance(new_pos)
        return value, tok_start

    def _err(self, msg, pos):
        return CompileError(msg, pos if pos < self.start else pos - self.start,
                            self.frame.id)

    # -- emission ----------------------------------------------------------

    def _emit(self, data, tok_start):
        if self.wpos + len(data) > self.rpos:
            raise self._err("in-place overflow: %d code bytes over %d source"
                            % (len(data), self.rpos - self.wpos), tok_start)
        self.buf[self.wpos:self.wpos + len(data)] = data
        self.wpos += len(data)

    def _emit_op(self, tag, tok_start):
        self._emit(bytes((self.vm.opcode_of_tag[tag],)), tok_start)

    def _emit_literal(self, v, tok_start):
        if not DOUBLE_MIN <= v <= DOUBLE_MAX:
            raise self._err("literal %d out of 30-bit range" % v, tok_start)
        self._emit(encode_literal(v), tok_start)

    def _emit_double(self, v, tok_start):
        if not DOUBLE_MIN <= v <= DOUBLE_MAX:
            raise self._err("literal %d out of 30-bit range" % v, tok_start)
        u = v & 0x3FFFFFFF
        self._emit(bytes((0xC0 | (u >> 24), (u >> 16) & 0xFF,
                          (u >> 8) & 0xFF, u & 0xFF)), tok_start)

    def _emit_addr_op(self, tag, addr, tok_start):
        op = self.vm.opcode_of_tag[tag]
        self._emit(bytes((op, addr & 0xFF, (addr >> 8) & 0xFF)), tok_start)

    def _emit_handle(self, addr, tok_start):
        """Push a one-cell address: a short literal when it fits, else the
        signed address-push op (3 bytes)."""
        if 0 <= addr <= 8191:
            self._emit_literal(addr, tok_start)
        else:
            self._emit_addr_op("iosdata", addr, tok_start)

    def _emit_string(self, text, tok_start):
        if len(text) > 255:
            raise self._err("string literal longer than 255 bytes", tok_start)
        op = self.vm.opcode_of_tag["prstr"]
        self._emit(bytes((op, len(text))) + text, tok_start)

    # -- word resolution -----------------------------------------------------

    def _compile_word(self, name, tok_start):
        vm = self.vm
        local = self.frame.locals.get(name)
        if local is not None:
            kind, value = local
            if kind == "const":
                self._emit_literal(value, tok_start)
            elif kind in ("var", "array"):
                self._emit_handle(value, tok_start)
            elif kind == "array-pending":
                # operand patched once the appended data is placed
                self.pending_refs.setdefault(name, []).append(self.wpos + 1)
                self._emit_addr_op("iosdata", 0, tok_start)
            else:  # word
                self._emit_addr_op("call", value, tok_start)
            return
        opcode = vm.lookup_core(name)
        if opcode is not None:
            tag = vm.tag_of_opcode[opcode]
            if tag in DIRECTIVE_TAGS:
                self._directive(tag, tok_start)
            elif tag == "leave":
                self._compile_leave(tok_start)
            elif tag == "exception":
                self._compile_exception(tok_start)
            elif tag in INTERNAL_TAGS:
                raise self._err("word %r is compiler-internal" % name,
                                tok_start)
            else:
                self._emit(bytes((opcode,)), tok_start)
            return
        addr = vm.dictionary.lookup(name)
        if addr is not None:
            self._emit_addr_op("call", addr, tok_start)
            return
        fidx = vm.fios_index(name)
        if fidx is not None:
            self._emit_addr_op("ioscall", fidx, tok_start)
            return
        didx = vm.dios_index(name)
        if didx is not None:
            self._emit_addr_op("iosdata", -(didx + 1), tok_start)
            return
        raise self._err("unknown word %r" % name, tok_start)

    # -- directives ----------------------------------------------------------

    def _push_ctrl(self, entry, tok_start):
        if len(self.ctrl) >= CTRL_DEPTH:
            raise self._err("control structures nested deeper than %d"
                            % CTRL_DEPTH, tok_start)
        self.ctrl.append(entry)

    def _pop_ctrl(self, kinds, tok_start, what):
        if not self.ctrl or self.ctrl[-1][0] not in kinds:
            raise self._err("%s without matching %s"
                            % (what, "/".join(kinds)), tok_start)
        return self.ctrl.pop()

    def _directive(self, tag, tok_start):
        handler = getattr(self, "_dir_" + tag.replace("c-", "").replace("-", "_"))
        handler(tok_start)

    def _dir_if(self, tok_start):
        patch = self.wpos + 1
        self._emit_addr_op("branchz", 0, tok_start)
        self._push_ctrl(("if", patch), tok_start)

    def _dir_else(self, tok_start):
        _, patch = self._pop_ctrl(("if",), tok_start, "else")
        new_patch = self.wpos + 1
        self._emit_addr_op("branch", 0, tok_start)
        write_u16(self.buf, patch, self.wpos)
        self._push_ctrl(("if", new_patch), tok_start)

    def _dir_endif(self, tok_start):
        _, patch = self._pop_ctrl(("if",), tok_start, "endif")
        write_u16(self.buf, patch, self.wpos)

    def _dir_begin(self, tok_start):
        self._push_ctrl(("begin", self.wpos), tok_start)

    def _dir_until(self, tok_start):
        _, target = self._pop_ctrl(("begin",), tok_start, "until")
        self._emit_addr_op("branchz", target, tok_start)

    def _dir_again(self, tok_start):
        _, target = self._pop_ctrl(("begin",), tok_start, "again")
        self._emit_addr_op("branch", target, tok_start)

    def _dir_while(self, tok_start):
        if not self.ctrl or self.ctrl[-1][0] != "begin":
            raise self._err("while without begin", tok_start)
        patch = self.wpos + 1
        self._emit_addr_op("branchz", 0, tok_start)
        self._push_ctrl(("while", patch), tok_start)

    def _dir_repeat(self, tok_start):
        _, patch = self._pop_ctrl(("while",), tok_start, "repeat")
        _, target = self._pop_ctrl(("begin",), tok_start, "repeat")
        self._emit_addr_op("branch", target, tok_start)
        write_u16(self.buf, patch, self.wpos)

    def _dir_do(self, tok_start):
        self._emit_op("doinit", tok_start)
        self._push_ctrl(("do", self.wpos, []), tok_start)

    def _dir_loop(self, tok_start):
        _, body, leaves = self._pop_ctrl(("do",), tok_start, "loop")
        self._emit_addr_op("doloop", body, tok_start)
        for patch in leaves:
            write_u16(self.buf, patch, self.wpos)

    def _compile_leave(self, tok_start):
        for entry in reversed(self.ctrl):
            if entry[0] == "do":
                self._emit_op("leave", tok_start)
                entry[2].append(self.wpos + 1)
                self._emit_addr_op("branch", 0, tok_start)
                return
        raise self._err("leave outside do ... loop", tok_start)

    def _compile_exception(self, tok_start):
        name, pos = self._take_word("an exception name after 'exception'")
        code = EXC_NAMES.get(name)
        if code is None:
            try:
                code = int(name)
            except ValueError:
                raise self._err("unknown exception %r" % name, pos)
        self._emit_literal(code, tok_start)
        self._emit_op("exception", tok_start)

    def _dir_colon(self, tok_start):
        if self.defn:
            raise self._err("nested definition", tok_start)
        name, pos = self._take_word("a word name after ':'")
        patch = self.wpos + 1
        self._emit_addr_op("branch", 0, tok_start)
        self.defn = (name, self.wpos, patch)

    def _dir_semi(self, tok_start):
        if not self.defn:
            raise self._err("';' outside a definition", tok_start)
        self._emit_op("ret", tok_start)
        name, entry, patch = self.defn
        write_u16(self.buf, patch, self.wpos)
        self.frame.locals[name] = ("word", entry)
        self.defn = None

    def _dir_var(self, tok_start):
        name, _ = self._take_word("a variable name after 'var'")
        self._emit_op("c-var", tok_start)
        addr = self.wpos
        self._emit(b"\x00\x00", tok_start)
        self.frame.locals[name] = ("var", addr)

    def _dir_array(self, tok_start):
        name, _ = self._take_word("an array name after 'array'")
        kind, value, pos, new_pos = self._next_token()
        if kind == T_WORD and value == "{":
            self._advance(new_pos)
            values = []
            while True:
                kind, value, pos, new_pos = self._next_token()
                if kind == T_WORD and value == "}":
                    self._advance(new_pos)
                    break
                if kind != T_INT:
                    raise self._err("expected cell value or '}' in array "
                                    "initializer", pos - self.start)
                self._advance(new_pos)
                values.append(to_cell(value))
            self._emit_op("c-array", tok_start)
            addr = self.wpos
            data = bytearray()
            data += len(values).to_bytes(2, "little")
            for v in values:
                data += (v & 0xFFFF).to_bytes(2, "little")
            self._emit(bytes(data), tok_start)
            self.frame.locals[name] = ("array", addr)
            return
        if kind != T_INT or value <= 0:
            raise self._err("expected a cell count or initializer after "
                            "'array %s'" % name, pos - self.start)
        self._advance(new_pos)
        self.appended.append((name, value))
        self.frame.locals[name] = ("array-pending", None)

    def _dir_const(self, tok_start):
        name, _ = self._take_word("a constant name after 'const'")
        kind, value, pos, new_pos = self._next_token()
        if kind in (T_INT, T_DOUBLE):
            self._advance(new_pos)
            self.frame.locals[name] = ("const", value)
            return
        if kind == T_WORD:
            local = self.frame.locals.get(value)
            if local and local[0] == "const":
                self._advance(new_pos)
                self.frame.locals[name] = ("const", local[1])
                return
        raise self._err("expected a value after 'const %s'" % name,
                        pos - self.start)

    def _dir_import(self, tok_start):
        name, pos = self._take_word("a word name after 'import'")
        addr = self.vm.dictionary.lookup(name)
        if addr is None:
            raise self._err("import of non-existing word %r" % name, pos)
        self.frame.locals[name] = ("word", addr)

    def _dir_export(self, tok_start):
        name, pos = self._take_word("a word name after 'export'")
        local = self.frame.locals.get(name)
        if not local or local[0] != "word":
            raise self._err("export of undefined word %r" % name, pos)
        self.vm.dictionary.define(name, self.frame.id, local[1])
        self.frame.locked = True

    def _dir_addr(self, tok_start):
        name, pos = self._take_word("a word name after '$'")
        local = self.frame.locals.get(name)
        if local and local[0] == "word":
            self._emit_addr_op("iosdata", local[1], tok_start)
            return
        addr = self.vm.dictionary.lookup(name)
        if addr is not None:
            self._emit_addr_op("iosdata", addr, tok_start)
            return
        fidx = self.vm.fios_index(name)
        if fidx is not None:
            self._emit_addr_op("iosdata", -(fidx + 1), tok_start)
            return
        raise self._err("$ needs a defined word or foreign function, got %r"
                        % name, pos)

    # -- finalization --------------------------------------------------------

    def _finalize(self):
        frame = self.frame
        cs = self.vm.cs
        frame.code_end = self.wpos
        append_total = sum(2 + 2 * cells for _, cells in self.appended)
        content = (self.wpos - frame.start) + append_total
        if content > frame.length:
            cs.extend_frame(frame, content - frame.length)
        elif content < frame.length:
            cs.shrink_frame(frame, content)
        cursor = self.wpos
        for name, cells in self.appended:
            self.buf[cursor:cursor + 2] = cells.to_bytes(2, "little")
            self.buf[cursor + 2:cursor + 2 + 2 * cells] = bytes(2 * cells)
            self.frame.locals[name] = ("array", cursor)
            for patch in self.pending_refs.get(name, ()):
                write_u16(self.buf, patch, cursor)
            cursor += 2 + 2 * cells
