# %% [markdown]
# # Structural pruning
#
# Neurons that must be removed together form a group.  In a dense MLP every
# hidden unit is its own group: its incoming row, its bias and its outgoing
# column.  Groups are scored by a first-order Taylor estimate of the loss
# change and removed globally, least important first.

# %%
import numpy as np

from mixq import NeuronGraph, discover_groups, make_task, prune, rank_groups
from mixq.nn import build_model
from mixq.pruner import mask
from mixq.workbench import TrainHyper, evaluate, train_full

task = make_task("blobs", seed=0)
base, report = train_full(build_model([16, 32, 32, 32, 16], seed=0), task, TrainHyper(seed=0))

print(f"pretrained val accuracy {report.P:.4f}")

# %%
groups = discover_groups(NeuronGraph.from_model(base))
ranked = rank_groups(groups, base, (task.X_train, task.y_train, task.loss))
print(f"{len(groups)} groups; least important:")
for g in ranked[:5]:
    print(f"  {sorted(g.neurons)}  ({g.n_params(base.widths)} params)  importance {g.importance:.3e}")

# %% [markdown]
# The compacted model computes exactly what the original computes with the
# dropped units zeroed out.

# %%
X = np.random.default_rng(0).normal(size=(100, 16))
for rate in (0.2, 0.3, 0.5):
    pruned = prune(base, ranked, rate)
    gap = np.max(np.abs(pruned.forward(X) - mask(base, pruned.retained).forward(X)))
    print(
        f"rate {rate}: widths {list(pruned.widths)}, removed {pruned.achieved_rate:.3f}, "
        f"val acc {evaluate(pruned, task):.4f}, mask gap {gap:.1e}"
    )
