# %% [markdown]
# # Start state against previous end state
#
# For every client the round-t start state minus its previous end state
# decomposes into a ``(1 - zeta)`` mismatch term plus the two projection
# residuals. The verification mode keeps every intermediate matrix and
# rebuilds both sides.

# %%
import numpy as np

from fedsmooth.config import RunConfig
from fedsmooth.linalg import FactorPair
from fedsmooth.model import ModelSpec, TrainConfig
from fedsmooth.orchestrator import run_experiment
from fedsmooth.server import aggregate_factor_average, aggregate_full_rank

base = dict(num_clients=3, rounds=4, train=TrainConfig(steps_per_round=20),
            model=ModelSpec(kind="mlp2", input_dim=16, hidden_dim=12, num_classes=8))

# %%
res = run_experiment(RunConfig(zeta_mode="decay", **base), verify=True)
print("decay schedule")
print(f"  max identity residual {res.report.max_residual:.2e}")
print(f"  max |S - E|           {res.report.max_gap:.2e}")
print(f"  min bound slack       {res.report.min_slack:.2e}")

# %% [markdown]
# With ``zeta = 1`` and a rank that makes both projections lossless, the
# start state equals the previous end state.

# %%
lossless = dict(base, model=ModelSpec(kind="softmax_regression", input_dim=16, num_classes=8))
res = run_experiment(RunConfig(zeta_mode="constant", rank=8, **lossless), verify=True)
print(f"zeta=1, r=8: max |S - E| = {res.report.max_gap:.2e}")

# %% [markdown]
# Averaging factors instead of products loses updates that differ only by a
# joint sign flip.

# %%
rng = np.random.default_rng(0)
f = FactorPair(rng.standard_normal((4, 2)), rng.standard_normal((2, 3)))
pair = [[f], [FactorPair(-f.b, -f.a)]]
print("factor average:\n", aggregate_factor_average(pair, [1, 1])[0].product())
print("full-rank mean equals B A:", np.allclose(aggregate_full_rank(pair, [1, 1])[0], f.product()))
