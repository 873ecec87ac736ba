"""Overfit the desk model on eight synthetic scenes and score it.

Takes about a minute on one CPU core.
"""

import numpy as np

from rdunet.data import generate_synthetic, stack_batch
from rdunet.engine import Tensor
from rdunet.metrics import ConfusionMatrix, overall_accuracy, precision_recall_f1
from rdunet.network import NetworkConfig, build_network, predict_mask
from rdunet.training import TrainingConfig, train

samples = generate_synthetic(seed=1, count=8, size=64)
images, labels = stack_batch(samples)
print("images", images.shape, "sea fraction", round(float((labels == 0).mean()), 3))

model = build_network(NetworkConfig.desk(), seed=0)
print("parameters:", model.parameter_count())

# all eight scenes fit one batch, so each epoch is one Adamax step
config = TrainingConfig(batch_size=16, max_steps=20, augment=False, shuffle=False)
result = train(model, samples, config)
for row in result.log[::4]:
    print(f"step {row['step']:3d}  lr {row['lr']:.0e}  loss {row['loss']:.4f}  accuracy {row['accuracy']:.4f}")

pred = predict_mask(model, Tensor(images))
cm = ConfusionMatrix().accumulate(pred, labels)
print()
print("confusion matrix (rows = truth):")
print(cm.counts)
for cls, name in enumerate(("sea", "land")):
    p, r, f1 = precision_recall_f1(cm, cls)
    print(f"{name:5s} precision {p:.4f} recall {r:.4f} F1 {f1:.4f}")
print("overall accuracy", round(overall_accuracy(cm), 4))
