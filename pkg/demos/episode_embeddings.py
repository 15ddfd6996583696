"""From raw episode to class posteriors.

Shows the four-slice input tensor, the alternating attention stack, the
task-specific embeddings (their dimension depends on the task's attribute
count), and the prototype classifier on top.
"""

import numpy as np

from hetmeta import (
    ModelConfig,
    SamplerConfig,
    build_input_tensor,
    class_posterior,
    compute_prototypes,
    forward_embed,
    generate_circle_task,
    init_model_params,
    sample_episode,
)
from hetmeta.training import episode_accuracy

rng = np.random.default_rng(3)

task = generate_circle_task(seed=5, n_attributes=4)
print(f"task {task.name}: {task.n_examples} examples, {task.n_attributes} attributes, "
      f"signal hidden in columns {task.provenance['signal_columns']}")

episode = sample_episode(task, SamplerConfig(shots=3, unlabeled_per_class=10), rng)
print(f"episode: {episode.n_labeled} labeled + {episode.n_unlabeled} unlabeled, "
      f"{episode.n_classes} classes")

z = build_input_tensor(episode)
print(f"\ninput tensor {z.shape}: values + observed/attribute/label indicators")
print("value slice, first labeled row:   ", z.data[0, :, 0].round(2))
print("observed slice, first unlabeled row:", z.data[episode.n_labeled, :, 1])

cfg = ModelConfig()  # 3 blocks, 4 heads, width 32, final fiber size 1
blocks = init_model_params(cfg, np.random.default_rng(0))
z_l, z_u = forward_embed(episode, cfg, blocks)
print(f"\nembeddings: labeled {z_l.shape}, unlabeled {z_u.shape} "
      f"(dimension = attributes x final fiber = {episode.n_attributes} x {cfg.h_out})")

prototypes = compute_prototypes(z_l, episode.y_labeled)
posteriors = class_posterior(z_u, prototypes)
accuracy = episode_accuracy(posteriors.data, episode.y_unlabeled)
print(f"prototype posteriors {posteriors.shape}, rows sum to "
      f"{posteriors.data.sum(axis=1).round(6)[0]}")
print(f"untrained accuracy on held-out labels: {accuracy:.2f} (chance is 0.50)")
print("training (see circle_spiral_training.py) is what makes this useful.")
