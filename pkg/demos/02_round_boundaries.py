# %% [markdown]
# # Loss at round boundaries
#
# FedAvgLoRA restarts every client from the averaged factors, so the first
# minibatch loss of a round can sit far from where the client ended the
# previous one. FedSmoothLoRA rebuilds each client's own end state. This
# script prints both trajectories around the boundaries of one client.

# %%
from fedsmooth.config import RunConfig
from fedsmooth.orchestrator import boundary_jump, run_experiment

runs = {m: run_experiment(RunConfig(method=m, seed=0)) for m in ("fedsmooth", "fedavg_lora")}

# %%
for method, res in runs.items():
    print(f"{method:12s} final accuracy {res.final_accuracy:.3f}  mean boundary jump {boundary_jump(res.metrics):.4f}")

# %% [markdown]
# Last loss of round t-1 against first loss of round t, client 0:

# %%
for method, res in runs.items():
    print(method)
    for prev, cur in zip(res.metrics[:5], res.metrics[1:6]):
        end, start = prev.losses[0][-1], cur.losses[0][0]
        print(f"  round {cur.round:2d}: {end:.3f} -> {start:.3f}  (jump {abs(start - end):.3f})")

# %% [markdown]
# Per-round accuracy of the global model:

# %%
for method, res in runs.items():
    print(f"{method:12s}", " ".join(f"{m.eval_acc:.2f}" for m in res.metrics))
