"""Small end-to-end meta-training run on the synthetic circle/spiral corpus.

Keeps the budget tiny so it finishes in about a minute; the acceptance suite
(tests/test_acceptance.py) runs the full desk-scale reproduction.
"""

import numpy as np

from hetmeta import (
    ModelConfig,
    SamplerConfig,
    TrainConfig,
    evaluate,
    generate_circle_spiral_corpus,
    meta_train,
    split_corpus,
)

corpus = split_corpus(generate_circle_spiral_corpus(seed=7, n_tasks=20), seed=7)
print(f"corpus: {len(corpus.train)} train / {len(corpus.validation)} validation / "
      f"{len(corpus.test)} test tasks")

config = TrainConfig(
    learning_rate=1e-3,
    max_epochs=40,
    validation_interval=10,
    patience=4,
    seed=1,
    sampler=SamplerConfig(shots=3, unlabeled_per_class=10),
    train_shots=(1, 3, 5),
)
model_cfg = ModelConfig(blocks=3, heads=2, h_key=16, h_value=16, h=16, h_out=1,
                        ff_depth=3, ff_width=16)

blocks, _, report = meta_train(corpus, model_cfg, config)
for rec in report.intervals:
    print(f"epoch {rec.epoch:3d}: train loss {rec.train_loss:.3f}, "
          f"validation loss {rec.val_loss:.3f}, accuracy {rec.val_metric:.3f}")
print(f"best epoch {report.best_epoch}, wall clock {report.wall_clock_seconds:.0f}s")

for shots in (1, 3, 5):
    sampler = SamplerConfig(shots=shots, unlabeled_per_class=10)
    result = evaluate(corpus.test, model_cfg, blocks, "prototype", None,
                      sampler, trials=5, seed=42)
    print(f"meta-test accuracy, {shots}-shot: {result.mean:.3f} +/- {result.stderr:.3f}")
print("a longer budget (more epochs, width 32, 4 heads) pushes this much higher.")
