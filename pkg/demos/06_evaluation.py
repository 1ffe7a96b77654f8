"""
Overlap metrics and error maps
==============================
"""

import numpy as np

from autonet import PhantomSpec, aggregate_log_error, error_map, evaluate_case, generate_phantom, summarize

spec = PhantomSpec(n_distractors=0)
reports, maps = [], []
for seed in range(5):
    _, ref = generate_phantom(spec, seed)
    pred = ref.data.copy()
    # knock out a slab of brain to mimic an under-segmentation
    pred[:, :, 40 + seed :] = 0
    reports.append(evaluate_case(pred, ref, f"case{seed}"))
    maps.append(error_map(pred, ref))

for r in reports:
    print(r.case, f"dice {r.dice:.4f} sens {r.sensitivity:.4f} spec {r.specificity:.4f}")
print("summary", summarize(reports)["dice"])

# log10 of the mean error plus 1e-4: -4 where every case agrees
agg = aggregate_log_error(maps)
print("error map range", float(agg.data.min()), float(agg.data.max()))
print("voxels wrong in every case:", int(np.sum(agg.data > np.log10(0.99))))
