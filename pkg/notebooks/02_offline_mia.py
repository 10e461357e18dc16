# %% [markdown]
# # Offline membership inference on a surrogate
#
# Membership is decided by how far a sample sits from the model's decision
# boundary.  Everything here runs against the surrogate, so the target
# oracle's spend does not move.

# %%

from exfilt.data import DatasetSchema, SplitSpec, split, synth_generate
from exfilt.evaluation import attack_accuracy, roc_auc
from exfilt.extraction import ExtractionConfig, extract
from exfilt.mia import BoundaryEstimatorConfig, calibrate_threshold, infer_membership
from exfilt.nn import TrainConfig, train
from exfilt.oracle import LabelOracle

schema = DatasetSchema.binary(200, 10)
data = synth_generate(schema, 1200, class_sep=0.2, seed=1)
parts = split(data, SplitSpec(500, 40, 300, 50, 50, seed=2))
target = train(parts.d_m, TrainConfig(epochs=100, hidden=64, weight_decay=0.1, seed=3))
oracle = LabelOracle(target, schema, budget=2040)
surrogate, _ = extract(parts.d_a, oracle, ExtractionConfig(B=400, alpha=10, seed=4),
                       TrainConfig(epochs=30, hidden=64, weight_decay=0.1, seed=5))
spent = oracle.spent

# %% [markdown]
# The threshold is the largest boundary distance seen on random points
# drawn with the auxiliary set's feature rates.  Members of an overfit
# model sit further out than that.

# %%
est = BoundaryEstimatorConfig("labelonly_hsj", max_model_evals=2000, seed=6)
truth = parts.d_mem.membership
for name, model in (("target", target), ("surrogate", surrogate)):
    thr = calibrate_threshold(model, schema, 50, est, seed=7,
                              activation_rates=parts.d_a.samples.mean(axis=0))
    res = infer_membership(model, parts.d_mem, thr, est)
    auc, _ = roc_auc(res.distances, truth)
    print(f"{name:9s}: tau {thr.tau:.3f}, accuracy {attack_accuracy(res.predictions, truth):.3f}, auc {auc:.3f}")

print("oracle spend unchanged:", oracle.spent == spent)
