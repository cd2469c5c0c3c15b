"""Export fusion-weight heatmaps after a short training run.

Writes a CSV matrix, a JSON record and an 8-bit graymap per example into
demo_heatmaps/. Run: python3 demos/04_heatmaps.py
"""

import json

from grasp.experiments import export_heatmaps, load_or_generate, read_pgm, run_training
from grasp.training import TrainConfig

cfg = TrainConfig(n_examples=1500, max_epochs=4, seed=1)
ds = load_or_generate(cfg)
model = run_training(cfg, ds)["model"]
stems = export_heatmaps(model, ds.test, "demo_heatmaps", limit=6)
for stem in stems:
    meta = json.load(open(stem + ".json"))
    img = read_pgm(open(stem + ".pgm", "rb").read())
    print(f"{meta['question']!r:40s} answer {meta['answer']:3s} predicted {meta['prediction']:3s} "
          f"planted {meta['planted_block']}  image {img.shape}")
    for row in meta["weights"]:
        print("   ", " ".join(f"{w:.2f}" for w in row))
