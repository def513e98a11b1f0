import time
from dataclasses import replace

import numpy as np

from kneeattn.attention import AttentionConfig
from kneeattn.models import ModelSpec, build_model
from kneeattn.synthdata import DatasetManifest, generate_synthetic
from kneeattn.training import TrainConfig, fit

t0 = time.time()
manifest = DatasetManifest(seed=0, counts_per_grade=(7, 7, 6, 6, 6), image_hw=(64, 48), augment_flips=False)
samples = generate_synthetic(manifest)
train = [replace(s, split="train") for s in samples]
val = [replace(s, split="val") for s in samples[::4]]

spec = ModelSpec(
    backbone="vgg16", input_hw=(64, 48), width_mult=0.25,
    branches=("att0",), fusion="none", loss_weights=None,
    attention=AttentionConfig(conv_widths=(32, 16)), seed=1,
)
model = build_model(spec)
print("params:", model.parameter_count)

config = TrainConfig(batch_size=16, lr0=1e-3, max_epochs=200, seed=2,
                     early_stop_patience=200, train_acc_stop=0.95)
metrics = fit(model, train + val, config)
accs = [r["train_acc_att0"] for r in metrics.rows]
print(f"epochs: {len(metrics.rows)}  best train acc: {max(accs):.3f}  elapsed: {time.time()-t0:.1f}s")
for i in range(0, len(accs), max(1, len(accs) // 10)):
    print(f"  epoch {i+1}: acc {accs[i]:.3f} loss {metrics.rows[i]['train_loss']:.4f}")
