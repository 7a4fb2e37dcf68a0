#!/usr/bin/env python3
"""Cross-check the bit-mask instruction detectors against Capstone.

Generates words (uniform random plus words drawn from the encoding classes the
detectors look for), disassembles each one with Capstone in ARM mode, and
writes the reference classification as a frozen vector file consumed by the
C++ tests:

    word push_registers cmp_cond branch_cond frame_access

push_registers is the 16-bit list of an unconditional STMDB SP! (or -1),
cmp_cond / branch_cond are the condition code of a CMP / B (or -1), and
frame_access is 1 for a single-register LDR/STR (immediate) based on R11.

Usage: crosscheck_detectors.py OUT [--count N] [--seed S]
Requires: pip install capstone
"""

import argparse
import random
import struct
import sys

import capstone
from capstone import arm as carm

COND_CODES = {
    carm.ARM_CC_EQ: 0x0, carm.ARM_CC_NE: 0x1, carm.ARM_CC_HS: 0x2, carm.ARM_CC_LO: 0x3,
    carm.ARM_CC_MI: 0x4, carm.ARM_CC_PL: 0x5, carm.ARM_CC_VS: 0x6, carm.ARM_CC_VC: 0x7,
    carm.ARM_CC_HI: 0x8, carm.ARM_CC_LS: 0x9, carm.ARM_CC_GE: 0xA, carm.ARM_CC_LT: 0xB,
    carm.ARM_CC_GT: 0xC, carm.ARM_CC_LE: 0xD, carm.ARM_CC_AL: 0xE,
}

REG_NUMBERS = {
    carm.ARM_REG_R0: 0, carm.ARM_REG_R1: 1, carm.ARM_REG_R2: 2, carm.ARM_REG_R3: 3,
    carm.ARM_REG_R4: 4, carm.ARM_REG_R5: 5, carm.ARM_REG_R6: 6, carm.ARM_REG_R7: 7,
    carm.ARM_REG_R8: 8, carm.ARM_REG_R9: 9, carm.ARM_REG_R10: 10, carm.ARM_REG_R11: 11,
    carm.ARM_REG_R12: 12, carm.ARM_REG_SP: 13, carm.ARM_REG_LR: 14, carm.ARM_REG_PC: 15,
}

# (fixed bits, mask of fixed bits): random words are drawn with these bits forced.
TEMPLATES = [
    (0xE92D0000, 0xFFFF0000),  # STMDB SP!
    (0x092D0000, 0x0FFF0000),  # STMDB SP! any condition
    (0x08000000, 0x0E000000),  # block transfer class
    (0x01500000, 0x0DF00000),  # CMP
    (0x01400000, 0x0DE00000),  # CMP / TEQ / MRS neighbourhood
    (0x0A000000, 0x0F000000),  # B
    (0x0B000000, 0x0F000000),  # BL
    (0x040B0000, 0x0E0F0000),  # LDR/STR imm, base R11
    (0x060B0000, 0x0E0F0000),  # LDR/STR reg, base R11
    (0x000B0090, 0x0E0F0090),  # extra load/store, base R11
    (0x04000000, 0x0E000000),  # single transfer, any base
]


def classify(md, word):
    insns = list(md.disasm(struct.pack("<I", word), 0))
    push = -1
    cmp_cond = -1
    branch_cond = -1
    frame = 0
    if not insns:
        return push, cmp_cond, branch_cond, frame
    insn = insns[0]
    cond = COND_CODES.get(insn.cc, -1)
    if insn.id in (carm.ARM_INS_PUSH, carm.ARM_INS_STMDB) and cond == 0xE:
        ops = insn.operands
        # push {..} is STMDB SP! with more than one register; STMDB needs SP! as base
        regs = []
        if insn.id == carm.ARM_INS_PUSH:
            regs = [op.reg for op in ops]
            is_block = (word & 0x0E000000) == 0x08000000
        else:
            is_block = ops and ops[0].reg == carm.ARM_REG_SP and insn.writeback
            regs = [op.reg for op in ops[1:]]
        if is_block:
            push = 0
            for r in regs:
                push |= 1 << REG_NUMBERS[r]
    if insn.id == carm.ARM_INS_CMP:
        cmp_cond = cond
    if insn.id == carm.ARM_INS_B:
        branch_cond = cond
    if insn.id in (carm.ARM_INS_LDR, carm.ARM_INS_STR, carm.ARM_INS_LDRB, carm.ARM_INS_STRB,
                   carm.ARM_INS_LDRT, carm.ARM_INS_STRT, carm.ARM_INS_LDRBT, carm.ARM_INS_STRBT):
        mem = [op for op in insn.operands if op.type == carm.ARM_OP_MEM]
        imm_form = (word & 0x0E000000) == 0x04000000
        base = mem[0].mem.base if mem else None
        # post-indexed forms carry the base as a bare register operand
        if not mem:
            regs = [op.reg for op in insn.operands if op.type == carm.ARM_OP_REG]
            base = regs[1] if len(regs) > 1 else None
        if imm_form and base == carm.ARM_REG_R11:
            frame = 1
    return push, cmp_cond, branch_cond, frame


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("out")
    parser.add_argument("--count", type=int, default=100000)
    parser.add_argument("--seed", type=int, default=2019)
    args = parser.parse_args()

    md = capstone.Cs(capstone.CS_ARCH_ARM, capstone.CS_MODE_ARM)
    md.detail = True
    rng = random.Random(args.seed)
    frozen = [0xE92D4800, 0xE92D4030, 0xE3A00000, 0xE3530000, 0x0A000005, 0x1A000002, 0xE51B3038, 0xE5943000,
              0x03530000, 0x00000000]
    words = list(frozen)
    while len(words) < args.count:
        if rng.random() < 0.5:
            words.append(rng.getrandbits(32))
        else:
            fixed, mask = rng.choice(TEMPLATES)
            words.append((rng.getrandbits(32) & ~mask) | fixed)

    with open(args.out, "w") as out:
        out.write("# word push_registers cmp_cond branch_cond frame_access (capstone %s)\n" % capstone.__version__)
        for w in words:
            push, cmp_cond, branch_cond, frame = classify(md, w)
            out.write("%08X %d %d %d %d\n" % (w, push, cmp_cond, branch_cond, frame))
    return 0


if __name__ == "__main__":
    sys.exit(main())
