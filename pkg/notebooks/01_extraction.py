# %% [markdown]
# # Label-only surrogate extraction
#
# A target MLP is trained on a synthetic binary task and exposed only
# through a budgeted label oracle.  Starting from a small auxiliary set,
# the attacker buys labels round by round and retrains a surrogate.

# %%

from exfilt.data import DatasetSchema, SplitSpec, TabularDataset, split, synth_generate
from exfilt.extraction import ExtractionConfig, extract, fidelity_on
from exfilt.nn import TrainConfig, accuracy, train
from exfilt.oracle import LabelOracle

schema = DatasetSchema.binary(60, 5)
data = synth_generate(schema, 1200, class_sep=0.3, seed=1)
parts = split(data, SplitSpec(train_size=400, aux_size=40, neutral_size=300,
                              mem_members=50, mem_nonmembers=50, seed=2))
target = train(parts.d_m, TrainConfig(epochs=100, hidden=64, seed=3))
print("target train/test accuracy:", accuracy(target, parts.d_m), accuracy(target, parts.d_n))

# %% [markdown]
# The neutral split doubles as the fidelity probe.  Its labels come from
# the target and are not charged to the attacker.

# %%
probe = TabularDataset(parts.d_n.samples, target.predict(parts.d_n.samples), schema)
for budget in (40 + 100, 40 + 500, 40 + 2000):
    oracle = LabelOracle(target, schema, budget)
    surrogate, state = extract(parts.d_a, oracle, ExtractionConfig(B=400, alpha=10, seed=4),
                               TrainConfig(epochs=30, hidden=64, seed=5), probe=probe)
    print(f"budget {budget:5d}: rounds {state.t:2d}, spent {oracle.spent}, "
          f"fidelity {fidelity_on(surrogate, probe):.3f}")

# %% [markdown]
# Per-round history: pool size, how many candidates survived each
# selection stage, and what was bought.

# %%
for h in state.history[:5]:
    print(h)
