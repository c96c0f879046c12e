"""Instruction set of the toy 64-bit machine.

Variable-length encoding (1 to 10 bytes), little-endian immediates, branch
and call displacements relative to the next instruction.
"""

from dataclasses import dataclass

import numpy as np

from ._jit import kernel

PAGE_SIZE = 4096
NUM_REGS = 8
MAX_INSN_LEN = 10

OP_NOP = 0x00
OP_HALT = 0x01
OP_MOVI = 0x10
OP_MOV = 0x11
OP_ADD = 0x12
OP_SUB = 0x13
OP_XOR = 0x14
OP_CMP = 0x15
OP_CMPI = 0x16
OP_JMP = 0x20
OP_JZ = 0x21
OP_JNZ = 0x22
OP_CALL = 0x30
OP_RET = 0x31
OP_PUSH = 0x40
OP_POP = 0x41
OP_LOAD = 0x50
OP_STORE = 0x51
OP_SYS = 0x60

SYS_EXIT = 0
SYS_WRITE = 1
SYS_READ = 2
SYS_RECV_WAIT = 3
NUM_SYSCALLS = 4

# opcode -> (mnemonic, encoded length, operand layout)
# layouts: "" none, "i8" imm8, "r" reg, "rr" reg reg, "ri64" reg imm64,
# "ri32" reg imm32, "rel" rel32, "mload" rd rb imm16, "mstore" rb rs imm16
OPCODES = {
    OP_NOP: ("nop", 1, ""),
    OP_HALT: ("halt", 2, "i8"),
    OP_MOVI: ("movi", 10, "ri64"),
    OP_MOV: ("mov", 3, "rr"),
    OP_ADD: ("add", 3, "rr"),
    OP_SUB: ("sub", 3, "rr"),
    OP_XOR: ("xor", 3, "rr"),
    OP_CMP: ("cmp", 3, "rr"),
    OP_CMPI: ("cmpi", 6, "ri32"),
    OP_JMP: ("jmp", 5, "rel"),
    OP_JZ: ("jz", 5, "rel"),
    OP_JNZ: ("jnz", 5, "rel"),
    OP_CALL: ("call", 5, "rel"),
    OP_RET: ("ret", 1, ""),
    OP_PUSH: ("push", 2, "r"),
    OP_POP: ("pop", 2, "r"),
    OP_LOAD: ("load", 5, "mload"),
    OP_STORE: ("store", 5, "mstore"),
    OP_SYS: ("sys", 2, "i8"),
}
MNEMONIC_TO_OPCODE = {m: op for op, (m, _, _) in OPCODES.items()}

# dense lookup tables consumed by the kernels; 0 length marks an unassigned opcode
OPCODE_LENGTH = np.zeros(256, dtype=np.int64)
for _op, (_m, _len, _) in OPCODES.items():
    OPCODE_LENGTH[_op] = _len
MNEMONICS = [OPCODES[i][0] if i in OPCODES else "" for i in range(256)]


class InvalidInstruction(ValueError):
    def __init__(self, offset, reason="unassigned opcode"):
        super().__init__(f"invalid instruction at offset {offset:#x}: {reason}")
        self.offset = offset
        self.reason = reason


@dataclass(frozen=True)
class Instruction:
    opcode: int
    length: int
    a: int = 0  # first register or imm8
    b: int = 0  # second register
    imm: int = 0  # signed immediate / displacement (imm64 kept unsigned)

    @property
    def mnemonic(self):
        return OPCODES[self.opcode][0]


@kernel
def decode_at(mem, off, avail, lengths):
    """Decode one instruction from ``mem[off:off+avail]``.

    Returns ``(opcode, length, a, b, imm)`` with ``imm`` as a raw uint64 in
    two's complement. ``length`` is 0 for an invalid encoding and -1 when the
    encoding runs past ``avail``.
    """
    zero = np.uint64(0)
    if avail < 1:
        return 0, -1, 0, 0, zero
    op = np.int64(mem[off])
    length = lengths[op]
    if length == 0:
        return op, 0, 0, 0, zero
    if avail < length:
        return op, -1, 0, 0, zero
    a = 0
    b = 0
    imm = zero
    if op == 0x01 or op == 0x60:
        a = np.int64(mem[off + 1])
        if op == 0x60 and a >= 4:
            return op, 0, 0, 0, zero
    elif op == 0x10:
        a = np.int64(mem[off + 1])
        for k in range(8):
            imm |= np.uint64(mem[off + 2 + k]) << np.uint64(8 * k)
    elif op >= 0x11 and op <= 0x15:
        a = np.int64(mem[off + 1])
        b = np.int64(mem[off + 2])
    elif op == 0x16:
        a = np.int64(mem[off + 1])
        for k in range(4):
            imm |= np.uint64(mem[off + 2 + k]) << np.uint64(8 * k)
        if imm & np.uint64(0x80000000):
            imm |= np.uint64(0xFFFFFFFF00000000)
    elif op >= 0x20 and op <= 0x30:
        for k in range(4):
            imm |= np.uint64(mem[off + 1 + k]) << np.uint64(8 * k)
        if imm & np.uint64(0x80000000):
            imm |= np.uint64(0xFFFFFFFF00000000)
    elif op == 0x40 or op == 0x41:
        a = np.int64(mem[off + 1])
    elif op == 0x50 or op == 0x51:
        a = np.int64(mem[off + 1])
        b = np.int64(mem[off + 2])
        imm = np.uint64(mem[off + 3]) | (np.uint64(mem[off + 4]) << np.uint64(8))
        if imm & np.uint64(0x8000):
            imm |= np.uint64(0xFFFFFFFFFFFF0000)
    if a >= 8 and op != 0x01:
        return op, 0, 0, 0, zero
    if b >= 8:
        return op, 0, 0, 0, zero
    return op, length, a, b, imm


def _signed(value, bits):
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def decode(data, offset=0):
    """Decode the instruction starting at ``data[offset]``.

    Raises InvalidInstruction for unassigned opcodes, bad register fields,
    unknown syscall numbers, or an encoding truncated by the buffer end.
    """
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    op, length, a, b, imm = decode_at(buf, offset, len(buf) - offset, OPCODE_LENGTH)
    if length == 0:
        raise InvalidInstruction(offset)
    if length < 0:
        raise InvalidInstruction(offset, "truncated encoding")
    layout = OPCODES[op][2]
    imm = int(imm)
    if layout in ("ri32", "rel", "mload", "mstore"):
        imm = _signed(imm, 64)
    return Instruction(op, int(length), int(a), int(b), imm)


def encode(op, a=0, b=0, imm=0):
    """Encode one instruction. ``imm`` is range-checked for its field width."""
    mnemonic, length, layout = OPCODES[op]
    out = bytearray([op])
    if layout == "i8":
        if not 0 <= a <= 0xFF:
            raise ValueError(f"{mnemonic}: imm8 out of range: {a}")
        out.append(a)
    elif layout == "r":
        out.append(_reg_check(a))
    elif layout == "rr":
        out += bytes([_reg_check(a), _reg_check(b)])
    elif layout == "ri64":
        if not -(1 << 63) <= imm < (1 << 64):
            raise ValueError(f"movi: imm64 out of range: {imm}")
        out.append(_reg_check(a))
        out += (imm & (2**64 - 1)).to_bytes(8, "little")
    elif layout == "ri32":
        if not -(1 << 31) <= imm < (1 << 31):
            raise ValueError(f"cmpi: imm32 out of range: {imm}")
        out.append(_reg_check(a))
        out += (imm & 0xFFFFFFFF).to_bytes(4, "little")
    elif layout == "rel":
        if not -(1 << 31) <= imm < (1 << 31):
            raise OverflowError(f"{mnemonic}: rel32 displacement overflow: {imm}")
        out += (imm & 0xFFFFFFFF).to_bytes(4, "little")
    elif layout in ("mload", "mstore"):
        if not -(1 << 15) <= imm < (1 << 15):
            raise ValueError(f"{mnemonic}: imm16 out of range: {imm}")
        out += bytes([_reg_check(a), _reg_check(b)])
        out += (imm & 0xFFFF).to_bytes(2, "little")
    assert len(out) == length
    return bytes(out)


def _reg_check(r):
    if not 0 <= r < NUM_REGS:
        raise ValueError(f"register out of range: r{r}")
    return r


def format_instruction(insn, target=None):
    """Render ``insn`` in assembler syntax; ``target`` replaces a rel32 operand."""
    layout = OPCODES[insn.opcode][2]
    m = insn.mnemonic
    if layout == "":
        return m
    if layout == "i8":
        return f"{m} {insn.a}"
    if layout == "r":
        return f"{m} r{insn.a}"
    if layout == "rr":
        return f"{m} r{insn.a}, r{insn.b}"
    if layout == "ri64":
        return f"{m} r{insn.a}, {insn.imm:#x}"
    if layout == "ri32":
        return f"{m} r{insn.a}, {insn.imm}"
    if layout == "rel":
        return f"{m} {target if target is not None else insn.imm}"
    if layout == "mload":
        return f"{m} r{insn.a}, [r{insn.b}{insn.imm:+d}]"
    return f"{m} [r{insn.a}{insn.imm:+d}], r{insn.b}"
