"""Return-address bit-flip gadget detection on a toy 64-bit machine."""

__version__ = "0.1.0"

# on-disk formats and their version tags
FORMATS = {
    "object": "LFOBJ1",
    "trace": "LFTRACE1",
    "candidates": "LFCAND1",
    "fingerprint": "LFFP1",
    "profile": "LFPROF1",
    "report": "retflip-report/1",
}
