"""Where the parameters and FLOPs of each preset go.

Prints the headline budget of every preset, then the per-group deltas
for the fusion and positional-encoding ablations at B0 scale.
"""
from fatnet import budget, build_preset, diff_budgets
from fatnet.model import PRESETS

for name in PRESETS:
    b = budget(build_preset(name))
    print(f"{name:6s} {b.params / 1e6:6.2f}M params  {b.flops / 1e9:5.2f}G FLOPs @224")

base = budget(build_preset("B0"))
for label, change in [("cat+linear fusion", {"fusion": "cat-linear"}), ("no CPE", {"cpe": False})]:
    print(f"\nB0 -> {label}")
    print(diff_budgets(base, budget(build_preset("B0", **change))).format_text())
