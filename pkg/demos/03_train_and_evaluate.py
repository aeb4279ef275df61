"""Train on a small phantom cohort and evaluate against the ground truth.

Run with ``python demos/03_train_and_evaluate.py``; it takes about a
minute on one CPU. The acceptance suite runs the full-size version.
"""

import json
import logging

from cacscore.metrics import evaluate_volume, summarize
from cacscore.patches import PatchStore, build_patch_store
from cacscore.phantom import generate_cohort
from cacscore.scoring import predict_volume
from cacscore.trainer import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")


def patches(cohort):
    return PatchStore.concatenate([build_patch_store(v, gt.lesions, m) for v, m, gt in cohort])


train_set = generate_cohort(10, base_seed=100)
val_set = generate_cohort(5, base_seed=200)
test_set = generate_cohort(10, base_seed=300)

model, report = train(patches(train_set), patches(val_set), TrainConfig(max_epochs=8))
print("best epoch", report.best_epoch, "val loss", round(report.best_val_loss, 4))

evals = []
for i, (vol, mask, gt) in enumerate(test_set):
    pred = predict_volume(model, vol, mask, f"t{i}")
    evals.append(evaluate_volume(f"t{i}", vol, mask, gt.lesions, pred.kept_pixels, pred.agatston))
    print(f"t{i}: reference {gt.reference_score:8.2f} ({gt.risk_class})  predicted {pred.agatston:8.2f} ({pred.risk_class})")

summary = summarize(evals)
summary.pop("volumes")
print(json.dumps({k: summary[k] for k in ("pixel", "pearson", "weighted_kappa", "risk_accuracy")}, indent=1))
