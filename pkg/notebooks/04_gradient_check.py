# %% [markdown]
# # Checking the backward pass
# Central differences against the analytic gradients of the whole network.

# %%
import time

import numpy as np

from imgnilm.nn import Network, NetworkConfig, grad_check, one_hot

net = Network(NetworkConfig(input_side=16), seed=0)
x = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
sum(p.size for p in net.parameters())

# %%
t0 = time.perf_counter()
report = {}
err = grad_check(net, x, one_hot([0, 1]), report=report)
print(f"max relative error {err:.2e} in {time.perf_counter() - t0:.1f} s", report)

# %%
# Differences that straddle a ReLU or pooling kink get retried at smaller steps
report["retried"], report["skipped"]
