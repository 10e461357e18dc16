# %% [markdown]
# # Training-time defenses
#
# Each defended target changes exactly one knob: dropout, an L2 penalty,
# or DP-SGD with the noise multiplier solved from a target epsilon.

# %%
from exfilt.data import DatasetSchema, SplitSpec, split, synth_generate
from exfilt.defenses import DefenseSpec, accounted_epsilon, defended_config
from exfilt.evaluation import roc_auc
from exfilt.mia import BoundaryEstimatorConfig, boundary_distances
from exfilt.nn import TrainConfig, accuracy, train

schema = DatasetSchema.binary(200, 10)
data = synth_generate(schema, 1200, class_sep=0.2, seed=1)
parts = split(data, SplitSpec(500, 40, 300, 50, 50, seed=2))
base = TrainConfig(epochs=100, hidden=64, weight_decay=0.1, seed=3)
est = BoundaryEstimatorConfig("whitebox_margin")

# %%
specs = [DefenseSpec(), DefenseSpec("dropout", dropout_p=0.5), DefenseSpec("l2", l2_lambda=5e-3),
         DefenseSpec("dpsgd", dp_target_epsilon=20)]
for spec in specs:
    cfg = defended_config(len(parts.d_m), base, spec)
    model = train(parts.d_m, cfg)
    auc, _ = roc_auc(boundary_distances(model, parts.d_mem.samples, est, schema), parts.d_mem.membership)
    eps = accounted_epsilon(len(parts.d_m), cfg)
    print(f"{spec.label:18s} test acc {accuracy(model, parts.d_n):.3f}  attack auc {auc:.3f}  epsilon {eps:.3g}")
