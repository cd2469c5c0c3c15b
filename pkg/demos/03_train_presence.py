"""Train the prompt bank on a small planted-presence task.

Only the prompts and the two projections learn; the backbone is frozen and
its hashes are checked after training. A shortened run (1500 examples,
5 epochs) keeps this under a minute. Run: python3 demos/03_train_presence.py
"""

from dataclasses import replace

from grasp.experiments import load_or_generate, run_training
from grasp.training import TrainConfig

cfg = TrainConfig(n_examples=1500, max_epochs=5, seed=0)
ds = load_or_generate(cfg)
print(f"{len(ds.train)} train / {len(ds.validation)} val / {len(ds.test)} test presence questions")


def show(row):
    print(f"  epoch {row['epoch']}  loss {row['train_loss']:.3f}  val {row['val_accuracy']:.3f}")


guided = run_training(cfg, ds, log=show)
print("test accuracy", guided["test"].accuracy)
print("planted block on correct yes answers:", guided["planted"])

flat = run_training(replace(cfg, uniform=True), ds)
print("same data with fixed 1/N weights:", flat["test"].accuracy)
