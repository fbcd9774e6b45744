"""Entry point: ``python -m xpu_harness --device cpu --seed 1234``."""

import argparse
import json
import sys

from .errors import DeviceError
from .session import HarnessSession


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="xpu_harness")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args(argv)
    try:
        session = HarnessSession(device=args.device, seed=args.seed)
    except DeviceError as exc:
        sys.stdout.write(
            json.dumps(
                {"id": None, "ok": False, "error": {"class": "DeviceError", "message": str(exc)}}
            )
            + "\n"
        )
        sys.stdout.flush()
        return 1
    return session.serve()


if __name__ == "__main__":
    sys.exit(main())
