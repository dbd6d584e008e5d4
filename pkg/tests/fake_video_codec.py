#!/usr/bin/env python3
"""Stand-in external video codec for exercising the subprocess pipeline.

encode: wraps the input Y4M stream in a tiny container (magic + payload).
decode: unwraps it back to Y4M. Lossless, deterministic, dependency-free.
"""

import sys
from pathlib import Path

MAGIC = b"FAKECODEC1"


def main() -> int:
    mode, src, dst = sys.argv[1], Path(sys.argv[2]), Path(sys.argv[3])
    data = src.read_bytes()
    if mode == "encode":
        dst.write_bytes(MAGIC + data)
    elif mode == "decode":
        if not data.startswith(MAGIC):
            print("not a fake bitstream", file=sys.stderr)
            return 1
        dst.write_bytes(data[len(MAGIC):])
    else:
        print(f"unknown mode {mode}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
