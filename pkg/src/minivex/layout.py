"""Byte layout of the guest-state block shared by the IR, the host code and
the dispatcher.  Every slot is a little-endian 32-bit word."""

REG_BASE = 0          # r0..r7 at 0, 4, ..., 28
Z_OFF = 32
N_OFF = 36
HALTED_OFF = 40
EVC_OFF = 44          # event (timeslice) counter, decremented by block prologs
FUEL_OFF = 48         # remaining guest-instruction budget
REFUND_OFF = 52       # instructions a side exit or bail hands back to the dispatcher
PC_OFF = 60
STATE_SIZE = 64


def reg_offset(r: int) -> int:
    return REG_BASE + 4 * r


SLOT_NAMES = {reg_offset(r): f"r{r}" for r in range(8)}
SLOT_NAMES.update({Z_OFF: "Z", N_OFF: "N", HALTED_OFF: "HALTED", EVC_OFF: "EVC",
                   FUEL_OFF: "FUEL", REFUND_OFF: "REFUND", PC_OFF: "PC"})
