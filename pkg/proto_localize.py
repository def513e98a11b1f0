import sys
import time

import numpy as np

from kneeattn.attention import AttentionConfig
from kneeattn.metrics import localization_score, roi_area_fraction, select_best_branch
from kneeattn.models import ModelSpec, build_model
from kneeattn.synthdata import DatasetManifest, build_dataset
from kneeattn.training import TrainConfig, evaluate, fit, predict

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 101
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 18
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 3e-4

t0 = time.time()
manifest = DatasetManifest(seed=seed, counts_per_grade=(160,) * 5, image_hw=(128, 96), augment_flips=False)
samples = build_dataset(manifest)
print(f"dataset: {len(samples)} samples  train={sum(1 for s in samples if s.split=='train')} "
      f"({time.time()-t0:.1f}s)")

spec = ModelSpec(
    backbone="vgg16", input_hw=(128, 96), width_mult=0.125,
    branches=("att0", "att1"), fusion="multi-loss", loss_weights=(1.0, 0.8),
    attention=AttentionConfig(conv_widths=(32, 16)), seed=seed,
)
model = build_model(spec)
print("params:", model.parameter_count)

config = TrainConfig(batch_size=16, lr0=lr, max_epochs=epochs, seed=seed,
                     plateau_patience=2, early_stop_patience=4)
metrics = fit(model, samples, config)
print(f"trained {len(metrics.rows)} epochs, best {metrics.best_epoch}, {time.time()-t0:.1f}s")
for r in metrics.rows:
    print(f"  e{r['epoch']:2d} lr={r['lr']:.1e} train={r['train_loss']:.3f} val={r['val_loss']:.3f} "
          f"acc0={r['val_acc_att0']:.2f} acc1={r['val_acc_att1']:.2f}")

val = [s for s in samples if s.split == "val"]
test = [s for s in samples if s.split == "test"]
val_m = evaluate(model, val)
best = select_best_branch(val_m["heads"])
preds = predict(model, test)
for bname in model.branches:
    scores = [localization_score(preds[bname]["masks"][i], s.roi, spec.input_hw) for i, s in enumerate(test)]
    base = [roi_area_fraction(s.roi, spec.input_hw) for s in test]
    print(f"{bname}: mean score {np.mean(scores):.4f} median {np.median(scores):.4f} "
          f"baseline {np.mean(base):.4f} factor {np.mean(scores)/np.mean(base):.2f}"
          + ("  <-- best branch" if bname == best else ""))
test_m = evaluate(model, test)
for n, h in test_m["heads"].items():
    print(f"test {n}: acc {h['acc']:.3f} loss {h['loss']:.3f}")
print(f"total {time.time()-t0:.1f}s")
