"""Run a small manifest-driven grid, then build the delta-tau and gumbel tables.

Equivalent CLI:
    python -m attnmi run --manifest demos/small_grid.json --out /tmp/attnmi_demo
    python -m attnmi compare --manifest demos/small_grid.json --out /tmp/attnmi_demo --target fix_attn
"""

import json
import sys
from pathlib import Path

from attnmi import ExperimentManifest, compare, run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/attnmi_demo")
manifest = ExperimentManifest.load(Path(__file__).with_name("small_grid.json"))
summary = run(manifest, out)
print(f"{len(summary.runs)} runs, {len(summary.failures)} failed; tables in {out / 'tables'}")
for c in summary.cells:
    t = c["tau"]
    print(f"{c['encoder_kind']:6s} {c['attention_kind']:8s} {c['scoring']:14s} {c['regime']:8s} "
          f"median tau {t['median'] if t['median'] is not None else float('nan'):+.3f}")
print(json.dumps(compare(summary, "normal", "fix_attn"), indent=1))
print("gumbel:", json.dumps(summary.gumbel))
