"""Development stand-in for ``scontrol token``: prints ``SLURM_JWT=<jwt>``.

Usage: python -m schedgate.dev_minter [LIFESPAN_SECONDS]

``DEV_MINTER_FAIL=1`` makes it exit 1 without output.
"""

from __future__ import annotations

import os
import secrets
import sys
import time

import jwt


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if os.environ.get("DEV_MINTER_FAIL") == "1":
        print("scontrol: error: token generation failed", file=sys.stderr)
        return 1
    lifespan = int(argv[0]) if argv else 600
    now = int(time.time())
    token = jwt.encode(
        {"sun": "slurm", "iat": now, "exp": now + lifespan},
        secrets.token_bytes(32),
        algorithm="HS256",
    )
    print(f"SLURM_JWT={token}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
