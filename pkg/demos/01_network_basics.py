"""
The network engine on its own
=============================

A tiny float64 MLP: build it, check its gradient against finite
differences, and fit a straight line.
"""
import numpy as np

from weightextrap.netcore import NetworkSpec, TrainConfig, backward, build_network, mse, train

# a 1 -> 8 -> 1 network with one ELU hidden layer
spec = NetworkSpec([1, 8, 1], ["elu", "linear"], seed=0)
net = build_network(spec)
print("parameters:", spec.n_params)

x = np.linspace(-2, 2, 64)[:, None]
y = np.tanh(2 * x)

# backprop against central differences at the initial point
g = backward(net, x, y)
h = 1e-6
k = 3
p_hi, p_lo = net.params.copy(), net.params.copy()
p_hi[k] += h
p_lo[k] -= h
fd = (mse(net.with_params(p_hi), x, y) - mse(net.with_params(p_lo), x, y)) / (2 * h)
print(f"dL/dp[{k}]  backprop {g[k]:.10f}  finite diff {fd:.10f}")

res = train(net, x, y, TrainConfig(epochs=400, batch_size=16, learning_rate=1e-2))
print(f"training MSE {res.history[0]:.4f} -> {res.final_mse:.5f}")

# freezing everything but the output layer
head_only = net.with_mask(spec.layer_mask([-1]))
res2 = train(head_only, x, y, TrainConfig(epochs=400, batch_size=16, learning_rate=1e-2))
print("hidden layer untouched:", np.array_equal(res2.model.params[:16], net.params[:16]))
