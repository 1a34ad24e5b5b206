"""Regenerate traces/reference_burst.jsonl.

Two phases: 4 s of sparse traffic at 1.5 req/s, then a 2 s burst at
25 req/s. Fixed lengths 200/20, random corpus, seed 11. The file in the
repo is frozen; rerun this only if the trace format itself changes.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from shiftsim.serving import (  # noqa: E402
    LengthSampler,
    PhaseSpec,
    TrafficProfile,
    generate_trace,
    write_trace,
)

LOW_MS = 4000.0
BURST_MS = 2000.0
SEED = 11


def main() -> None:
    profile = TrafficProfile(
        phases=(PhaseSpec(LOW_MS, 1.5), PhaseSpec(BURST_MS, 25.0)),
        lengths=LengthSampler("fixed", prompt_len=200, output_len=20),
        corpus="random",
    )
    trace = generate_trace(profile, seed=SEED)
    out = os.path.join(os.path.dirname(__file__), "..", "traces", "reference_burst.jsonl")
    write_trace(os.path.abspath(out), trace)
    print(f"wrote {len(trace)} requests")


if __name__ == "__main__":
    main()
