"""Crossbar placement and cost as the 4-bit fraction grows.

Places a random 64-channel conv layer at several compression ratios and
prints tiles, utilization and the energy split. ADC energy scales with
``2**adc_bits``, so moving strips to 4-bit tiles cuts it sharply.
"""

import numpy as np

from cimquant.crossbar import HardwareConfig, place, simulate_cost, utilization
from cimquant.nn import Conv2D, Dense, ModelGraph
from cimquant.quantizer import compress, threshold_for_ratio
from cimquant.sensitivity import SensitivityRecord, decompose_strips
from cimquant.threshold import CapacityConfig, align_to_capacity

rng = np.random.default_rng(0)
layer = Conv2D("c", 3, 32, 64, pad=1)
model = ModelGraph([layer, Dense("d", 64 * 8 * 8, 10)],
                   {"c.weight": rng.normal(size=(3, 3, 32, 64)), "d.weight": np.zeros((4096, 10)),
                    "d.bias": np.zeros(10)}, (32, 8, 8))
strips = decompose_strips(model)
records = [SensitivityRecord(*s.key, s.p_strip, 0.0, 0.0, float(v)) for s, v in zip(strips, rng.random(len(strips)))]
hw = HardwareConfig()
cap = CapacityConfig.from_hardware(hw)

print(f"{'CR':>5} {'8b tiles':>8} {'4b tiles':>8} {'util8 %':>8} {'energy (J)':>11} {'ADC share':>9}")
for cr in (0.0, 0.25, 0.5, 0.75, 1.0):
    T = align_to_capacity(records, threshold_for_ratio(records, cr), cap)
    model_c, bmap = compress(model, records, T)
    p = place(bmap, decompose_strips(model_c), hw)
    cost = simulate_cost(p, {0: 64})
    print(f"{bmap.p_low / bmap.R:5.2f} {len(p.select(8)):8d} {len(p.select(4)):8d} {utilization(p, 8):8.2f} "
          f"{cost.total.energy_total:11.3e} {cost.adc_share:9.3f}")
