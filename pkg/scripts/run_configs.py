"""Run every shipped config through the CLI and report exit codes and timings."""
import sys
import time
from pathlib import Path

sys.path.insert(0, "src")

from nmdyn import cli  # noqa: E402

root = Path(__file__).resolve().parents[1]
out = sys.argv[1] if len(sys.argv) > 1 else "out"
for path in sorted((root / "configs").glob("*.yaml")):
    cmd = "chain" if path.stem.startswith("chain") else "measure" if path.stem.startswith("measure") else "simulate"
    start = time.perf_counter()
    code = cli.main([cmd, str(path), "--out", out])
    print(f"{path.stem:22s} {cmd:9s} exit {code}  {time.perf_counter() - start:6.1f} s", flush=True)
