"""End to end on the bundled toy CNN: fixtures, all six stages, then the report.

Run with ``python demos/toy_pipeline.py [workdir]``.
"""

import json
import sys
import tempfile
from pathlib import Path

from cimquant.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cimquant-"))
main(["fixtures", "--out", str(work / "fixtures")])
main(["pipeline", "--config", str(work / "fixtures" / "config.json"), "--out", str(work / "run")])

# A second invocation finds every stage up to date.
main(["pipeline", "--config", str(work / "fixtures" / "config.json"), "--out", str(work / "run")])

print(f"\n{'run':<10} {'CR':>6} {'acc':>7} {'energy (J)':>12} {'ADC share':>10}")
for row in json.loads((work / "run" / "report.json").read_text()):
    print(f"{row['run']:<10} {row['compression_ratio']:6.3f} {row['accuracy']:7.4f} "
          f"{row['energy_total']:12.4e} {row['energy_adc'] / row['energy_total']:10.3f}")
print(f"\nartifacts in {work / 'run'}")
