# %% [markdown]
# # Searching per-layer bit-widths
#
# Every layer of the pruned model is stored at 4 or 8 bits and carries an
# adapter.  Fine-tuning one configuration gives its performance P; the cost
# model gives its memory M in bytes.  A Gaussian process predicts P for
# untried configurations and expected improvement picks the next one.

# %%
from mixq import SearchPlan, brute_force, make_task, run_search
from mixq.pareto import select
from mixq.pipeline import prepare
from mixq.workbench import TrainHyper

seed = 0
task = make_task("blobs", seed=seed)
pruned, _, _ = prepare((16, 32, 32, 32, 16), "relu", task, 0.2, "element1", seed, TrainHyper(seed=seed))
plan = SearchPlan(init_count=10, max_iters=6, seed=seed)

# %%
result = run_search(pruned, task, plan)
for a in result.audit:
    print(f"iter {a['iteration']}: {a['suggested']}  EI {a['ei']:.4f}  P {a['P']:.4f}  M {a['M']}")
print("stop:", result.stop_reason)

# %% [markdown]
# With four layers there are only sixteen configurations, so the exact answer
# is cheap to compute and the search can be checked against it.

# %%
oracle = brute_force(pruned, task, plan)
print("search frontier:", sorted(r.bits for r in result.front))
print("exact frontier: ", sorted(r.bits for r in oracle.front))
for lam in (0.0, 1.0, 100.0):
    q = select(oracle.front, lam, oracle.m_range)
    print(f"lambda {lam:>5}: {q.bits}  P {q.P:.4f}  M {q.M}")
