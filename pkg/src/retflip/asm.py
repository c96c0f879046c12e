"""Two-pass assembler, disassembler and the LFOBJ1 object format."""

import re

from .isa import (
    MNEMONIC_TO_OPCODE,
    OPCODES,
    InvalidInstruction,
    decode,
    encode,
    format_instruction,
)
from .vm import DEFAULT_BASE, Program

DATA_ALIGN = 8
OBJ_MAGIC = "LFOBJ1"
_LABEL_RE = re.compile(r"^[A-Za-z_.][A-Za-z0-9_.]*$")
_MEM_RE = re.compile(r"^\[\s*r([0-7])\s*(?:([+-])\s*(0x[0-9a-fA-F]+|\d+)\s*)?\]$")


class AssemblyError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


def _parse_int(text, lineno):
    t = text.strip()
    try:
        return int(t, 0)
    except ValueError:
        raise AssemblyError(lineno, f"bad integer literal {text!r}") from None


def _parse_reg(text, lineno):
    t = text.strip()
    if re.fullmatch(r"r[0-7]", t):
        return int(t[1])
    raise AssemblyError(lineno, f"expected register r0-r7, got {text!r}")


def _parse_string(text, lineno):
    t = text.strip()
    if len(t) < 2 or t[0] != '"' or t[-1] != '"':
        raise AssemblyError(lineno, f"expected quoted string, got {text!r}")
    body = t[1:-1]
    out = bytearray()
    i = 0
    escapes = {"n": 10, "t": 9, "r": 13, "0": 0, "\\": 92, '"': 34}
    while i < len(body):
        c = body[i]
        if c == "\\":
            if i + 1 >= len(body):
                raise AssemblyError(lineno, "dangling escape")
            e = body[i + 1]
            if e == "x":
                try:
                    out.append(int(body[i + 2:i + 4], 16))
                except ValueError:
                    raise AssemblyError(lineno, "bad \\x escape") from None
                i += 4
                continue
            if e not in escapes:
                raise AssemblyError(lineno, f"unknown escape \\{e}")
            out.append(escapes[e])
            i += 2
            continue
        out += c.encode("latin-1")
        i += 1
    return bytes(out)


def _quote(data):
    parts = []
    for byte in data:
        ch = chr(byte)
        if ch == '"' or ch == "\\":
            parts.append("\\" + ch)
        elif 0x20 <= byte < 0x7F:
            parts.append(ch)
        else:
            parts.append(f"\\x{byte:02x}")
    return '"' + "".join(parts) + '"'


def _split_operands(text):
    return [p.strip() for p in text.split(",")] if text.strip() else []


def _strip_comment(line):
    out = []
    in_str = False
    prev = ""
    for ch in line:
        if ch == '"' and prev != "\\":
            in_str = not in_str
        if ch == ";" and not in_str:
            break
        out.append(ch)
        prev = ch if not (prev == "\\" and ch == "\\") else ""
    return "".join(out)


def assemble(source):
    """Assemble ``source`` into a Program.

    Code is laid out first, in source order; ``.data``/``.word``/``.space``
    blocks follow, each aligned to 8 bytes. ``movi`` accepts a symbol name,
    which resolves to that symbol's image offset (add r7, the loader's code
    base, to form an address).
    """
    insns = []  # (lineno, mnemonic, operands)
    data = []  # (lineno, name, bytes)
    labels = {}
    base = DEFAULT_BASE
    entry_label = None
    pending_labels = []
    offset = 0

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        while True:
            m = re.match(r"^([A-Za-z_.][A-Za-z0-9_.]*)\s*:(.*)$", line)
            if not m or line.startswith("."):
                break
            name = m.group(1)
            if name in labels or name in pending_labels:
                raise AssemblyError(lineno, f"duplicate label {name!r}")
            pending_labels.append(name)
            labels[name] = ("code", offset)
            line = m.group(2).strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head.startswith("."):
            if head == ".base":
                base = _parse_int(rest, lineno)
            elif head == ".entry":
                entry_label = (lineno, rest)
            elif head in (".data", ".word", ".space"):
                name, _, value = rest.partition(" ")
                if not _LABEL_RE.match(name):
                    raise AssemblyError(lineno, f"bad data name {name!r}")
                if name in labels:
                    raise AssemblyError(lineno, f"duplicate label {name!r}")
                if head == ".data":
                    blob = _parse_string(value, lineno)
                elif head == ".word":
                    v = _parse_int(value, lineno)
                    if not -(1 << 63) <= v < (1 << 64):
                        raise AssemblyError(lineno, ".word value out of range")
                    blob = (v & (2**64 - 1)).to_bytes(8, "little")
                else:
                    blob = bytes(_parse_int(value, lineno))
                if not blob:
                    raise AssemblyError(lineno, "empty data block")
                labels[name] = ("data", len(data))
                data.append((lineno, name, blob))
            else:
                raise AssemblyError(lineno, f"unknown directive {head}")
            continue
        mnemonic = head.lower()
        if mnemonic not in MNEMONIC_TO_OPCODE:
            raise AssemblyError(lineno, f"unknown mnemonic {head!r}")
        op = MNEMONIC_TO_OPCODE[mnemonic]
        insns.append((lineno, op, _split_operands(rest), offset))
        offset += OPCODES[op][1]
        pending_labels = []

    code_end = offset
    image = bytearray()
    data_offsets = []
    pos = code_end
    for _, _, blob in data:
        pos += (-pos) % DATA_ALIGN
        data_offsets.append(pos)
        pos += len(blob)
    symbols = {}
    for name, (kind, val) in labels.items():
        symbols[name] = val if kind == "code" else data_offsets[val]

    for lineno, op, ops, at in insns:
        image += _encode_line(op, ops, at, symbols, lineno)
    for (lineno, _, blob), off in zip(data, data_offsets):
        image += bytes(off - len(image))
        image += blob

    if not image:
        raise AssemblyError(0, "empty program")
    # labels at the very end of the code with no data after them have no byte to name
    for name, off in list(symbols.items()):
        if off >= len(image):
            raise AssemblyError(0, f"label {name!r} does not precede any instruction or data")
    if entry_label is not None:
        lineno, name = entry_label
        if name not in symbols:
            raise AssemblyError(lineno, f"undefined label {name!r}")
        entry = symbols[name]
    else:
        entry = symbols.get("main", 0)
    if base % 4096:
        raise AssemblyError(0, f".base {base:#x} is not page aligned")
    segments = [(off, blob) for (_, _, blob), off in zip(data, data_offsets)]
    return Program(bytes(image), base, entry, symbols, segments)


def _encode_line(op, ops, at, symbols, lineno):
    mnemonic, length, layout = OPCODES[op]
    expected = {"": 0, "i8": 1, "r": 1, "rr": 2, "ri64": 2, "ri32": 2, "rel": 1,
                "mload": 2, "mstore": 2}[layout]
    if len(ops) != expected:
        raise AssemblyError(lineno, f"{mnemonic} takes {expected} operand(s), got {len(ops)}")
    try:
        if layout == "":
            return encode(op)
        if layout == "i8":
            return encode(op, a=_parse_int(ops[0], lineno))
        if layout == "r":
            return encode(op, a=_parse_reg(ops[0], lineno))
        if layout == "rr":
            return encode(op, a=_parse_reg(ops[0], lineno), b=_parse_reg(ops[1], lineno))
        if layout in ("ri64", "ri32"):
            reg = _parse_reg(ops[0], lineno)
            if layout == "ri64" and _LABEL_RE.match(ops[1]) and not ops[1][0].isdigit():
                if ops[1] not in symbols:
                    raise AssemblyError(lineno, f"undefined label {ops[1]!r}")
                imm = symbols[ops[1]]
            else:
                imm = _parse_int(ops[1], lineno)
            return encode(op, a=reg, imm=imm)
        if layout == "rel":
            target = ops[0]
            if re.fullmatch(r"[+-]?(0x[0-9a-fA-F]+|\d+)", target):
                disp = int(target, 0)
            else:
                if target not in symbols:
                    raise AssemblyError(lineno, f"undefined label {target!r}")
                disp = symbols[target] - (at + length)
            return encode(op, imm=disp)
        if layout == "mload":
            rd = _parse_reg(ops[0], lineno)
            rb, disp = _parse_mem(ops[1], lineno)
            return encode(op, a=rd, b=rb, imm=disp)
        rb, disp = _parse_mem(ops[0], lineno)
        rs = _parse_reg(ops[1], lineno)
        return encode(op, a=rb, b=rs, imm=disp)
    except OverflowError as exc:
        raise AssemblyError(lineno, f"displacement overflow: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, AssemblyError):
            raise
        raise AssemblyError(lineno, str(exc)) from None


def _parse_mem(text, lineno):
    m = _MEM_RE.match(text.replace(" ", ""))
    if not m:
        raise AssemblyError(lineno, f"bad memory operand {text!r}")
    disp = int(m.group(3), 0) if m.group(3) else 0
    if m.group(2) == "-":
        disp = -disp
    return int(m.group(1)), disp


def decode_stream(image, start=0, end=None):
    """Decode instructions linearly over ``image[start:end]``."""
    end = len(image) if end is None else end
    out = []
    off = start
    while off < end:
        insn = decode(image[off:end], 0)
        out.append((off, insn))
        off += insn.length
    return out


def disassemble(program):
    """Render ``program`` as assembler source that reassembles to the same bytes."""
    code = decode_stream(program.image, 0, program.code_end)
    starts = {off for off, _ in code}
    by_offset = {}
    for name, off in program.symbols.items():
        by_offset.setdefault(off, []).append(name)
    synthetic = {}
    for off, insn in code:
        if OPCODES[insn.opcode][2] == "rel":
            tgt = off + insn.length + insn.imm
            if tgt in starts and tgt not in by_offset:
                synthetic[tgt] = f"L_{tgt:x}"
    lines = [f".base {program.base_addr_canonical:#x}"]
    entry_names = by_offset.get(program.entry_offset)
    if entry_names:
        lines.append(f".entry {sorted(entry_names)[0]}")
    elif program.entry_offset:
        synthetic[program.entry_offset] = f"L_{program.entry_offset:x}"
        lines.append(f".entry L_{program.entry_offset:x}")
    data_names = {off: sorted(by_offset.get(off, [])) for off, _ in program.data_segments}
    for off, insn in code:
        for name in sorted(by_offset.get(off, [])):
            if off not in data_names:
                lines.append(f"{name}:")
        if off in synthetic:
            lines.append(f"{synthetic[off]}:")
        target = None
        if OPCODES[insn.opcode][2] == "rel":
            tgt = off + insn.length + insn.imm
            names = by_offset.get(tgt)
            if names and tgt not in data_names:
                target = sorted(names)[0]
            elif tgt in synthetic:
                target = synthetic[tgt]
        lines.append("    " + format_instruction(insn, target))
    for k, (off, blob) in enumerate(program.data_segments):
        names = data_names[off] or [f"D_{off:x}"]
        lines.append(f".data {names[0]} {_quote(blob)}")
    return "\n".join(lines) + "\n"


def write_object(program):
    """Serialize to the LFOBJ1 text format."""
    lines = [OBJ_MAGIC, f"base {program.base_addr_canonical:#x}", f"entry {program.entry_offset:#x}"]
    for name, off in sorted(program.symbols.items(), key=lambda kv: (kv[1], kv[0])):
        lines.append(f"sym {name} {off:#x}")
    for off, blob in program.data_segments:
        lines.append(f"data {off:#x} {len(blob):#x}")
    hexed = program.image.hex()
    for i in range(0, len(hexed), 64):
        lines.append(f"img {hexed[i:i + 64]}")
    return "\n".join(lines) + "\n"


def read_object(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != OBJ_MAGIC:
        raise ValueError(f"not an {OBJ_MAGIC} object")
    base = entry = None
    symbols = {}
    segments = []
    chunks = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key == "base":
                base = int(parts[1], 16)
            elif key == "entry":
                entry = int(parts[1], 16)
            elif key == "sym":
                symbols[parts[1]] = int(parts[2], 16)
            elif key == "data":
                segments.append((int(parts[1], 16), int(parts[2], 16)))
            elif key == "img":
                if len(parts[1]) > 64 or len(parts[1]) % 2:
                    raise ValueError("bad img line length")
                chunks.append(bytes.fromhex(parts[1]))
            else:
                raise ValueError(f"unknown record {key!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if base is None or entry is None:
        raise ValueError("object lacks base or entry")
    image = b"".join(chunks)
    return Program(image, base, entry, symbols,
                   [(off, image[off:off + n]) for off, n in segments])


def load_program(path):
    """Read a program from ``.asm`` source or an LFOBJ1 object file."""
    with open(path) as fh:
        text = fh.read()
    if text.startswith(OBJ_MAGIC):
        return read_object(text)
    return assemble(text)


__all__ = [
    "AssemblyError",
    "InvalidInstruction",
    "assemble",
    "disassemble",
    "decode_stream",
    "write_object",
    "read_object",
    "load_program",
]
