"""Prediction uncertainty from the weight posterior: sampled softmax outputs
give a per-class mean and spread, so ambiguous inputs are visibly ambiguous.
"""

import numpy as np

import tensorard as ta

# Train a small classifier on a 3-class task.
N = 1024
data, teacher = ta.gen_synthetic("cp", [4, 4], [4], true_ranks=2,
                                 num_samples=N, seed=5)
net = ta.build_network(
    [{"type": "tensorized_linear", "format": "cp", "row_dims": [4, 4],
      "col_dims": [4], "max_rank": 4, "activation": "identity"}],
    classes=4, rng=np.random.default_rng(2),
)
config = ta.TrainConfig(learning_rate=0.2 / N, rank_step=0.1, prune_threshold=1e-3,
                        epochs=150, batch_size=128, seed=0)
net, report = ta.train(net, data, config)
print(f"accuracy: {report.train_acc[-1]:.3f}, "
      f"inferred rank {report.final_ranks['layer0']}")

# A confident input vs an ambiguous one (near the decision boundary).
confident = data.inputs[0]
boundary = np.zeros(16)  # zero input: logits driven by the bias alone

for name, x in [("typical input", confident), ("boundary input", boundary)]:
    mean, std = ta.predict_uncertainty(net, x, num_samples=512, seed=7)
    top = int(np.argmax(mean))
    print(f"\n{name}: predicted class {top}")
    for c in range(4):
        print(f"  class {c}: p = {mean[c]:.3f} +/- {std[c]:.3f}")
