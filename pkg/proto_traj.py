import sys
import time

import numpy as np

from kneeattn.attention import AttentionConfig
from kneeattn.metrics import localization_score, roi_area_fraction
from kneeattn.models import ModelSpec, build_model
from kneeattn.synthdata import DatasetManifest, build_dataset
from kneeattn.training import TrainConfig, fit, predict

seed = int(sys.argv[1])
epochs = int(sys.argv[2])
lr = float(sys.argv[3])
batch = int(sys.argv[4]) if len(sys.argv) > 4 else 16

t0 = time.time()
manifest = DatasetManifest(seed=seed, counts_per_grade=(160,) * 5, image_hw=(128, 96), augment_flips=False)
samples = build_dataset(manifest)
spec = ModelSpec(
    backbone="vgg16", input_hw=(128, 96), width_mult=0.125,
    branches=("att0", "att1"), fusion="multi-loss", loss_weights=(1.0, 0.8),
    attention=AttentionConfig(conv_widths=(32, 16)), seed=seed,
)
model = build_model(spec)
test = [s for s in samples if s.split == "test"][:60]
base = np.mean([roi_area_fraction(s.roi, spec.input_hw) for s in test])


def on_epoch(m, epoch, row):
    preds = predict(m, test, batch_size=32)
    f = {}
    for b in m.branches:
        scores = [localization_score(preds[b]["masks"][i], s.roi, spec.input_hw) for i, s in enumerate(test)]
        f[b] = np.mean(scores) / base
    print(f"e{epoch:2d} val={row['val_loss']:.3f} acc0={row['val_acc_att0']:.2f} acc1={row['val_acc_att1']:.2f} "
          f"f0={f['att0']:.2f} f1={f['att1']:.2f} ({time.time()-t0:.0f}s)", flush=True)


config = TrainConfig(batch_size=batch, lr0=lr, max_epochs=epochs, seed=seed,
                     plateau_patience=2, early_stop_patience=4)
metrics = fit(model, samples, config, on_epoch=on_epoch)
print(f"best epoch {metrics.best_epoch}, total {time.time()-t0:.0f}s")
