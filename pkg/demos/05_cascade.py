"""
Auto-context cascade on phantoms
================================

Each network sees the image and the previous network's posterior. With a
warm start the training cost cannot go up from one step to the next.
Takes under a minute on one CPU core.
"""

import numpy as np
import torch

from autonet import (
    CascadeConfig,
    PhantomSpec,
    Stage,
    TrainingCase,
    TrainSchedule,
    UnetConfig,
    binarize,
    confusion_counts,
    dice,
    generate_phantom,
    inference_trajectory,
    run_training_cascade,
)
from autonet.cascade import first_layer_channel_norms

torch.set_num_threads(1)
rng = np.random.default_rng(0)
cases = []
for i in range(6):
    spec = PhantomSpec(brain_axes=tuple(rng.uniform(14, 20, 3)), n_distractors=5, noise_sigma=8.0, jitter=4.0)
    v, m = generate_phantom(spec, 100 + i)
    cases.append(TrainingCase(f"p{i}", v, m))
train, test = cases[:3], cases[3:]

cfg = CascadeConfig(
    "unet", max_steps=3, epsilon=1e-6, unet=UnetConfig.small(),
    schedule=TrainSchedule([Stage(1e-3, None, 4)], batch_size=8, decay_rate=0.9, decay_steps=2000),
)
state = run_training_cascade(train, cfg)
print("training cost per step:", [round(h, 5) for h in state.H])
print("steps that kept the warm start:", state.fallbacks)

# how much the first layer listens to the context channel
for t, params in enumerate(state.models):
    w1, w2 = first_layer_channel_norms(params)["unet"]
    print(f"step {t}: |W_intensity| = {w1:.3f}, |W_context| = {w2:.3f}")

for c in test:
    traj = inference_trajectory(state, c.volume, len(state.models))
    print(c.id, "Dice after 1..3 networks:", [round(dice(confusion_counts(binarize(p), c.mask)), 4) for p in traj])
