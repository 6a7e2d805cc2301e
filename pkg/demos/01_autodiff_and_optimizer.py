"""Tour of the tensor engine: tapes, gradients, finite differences, Adam.

Run:  python3 demos/01_autodiff_and_optimizer.py
"""

import numpy as np

from icolab.gradcheck import finite_diff_check
from icolab.optim import Adam, cosine_lr
from icolab.tensor import (GradientTape, Tensor, cross_entropy, gelu, matmul,
                           mean_all, mul, rmsnorm, softmax, sum_all, tensor)

print("== eager kernels ==")
x = tensor([[1.0, 2.0], [3.0, 4.0]])
print("softmax rows:", softmax(x).data)

print("\n== reverse-mode gradients ==")
w = tensor(np.random.default_rng(0).normal(size=(2, 2)), requires_grad=True)
with GradientTape() as tape:
    loss = sum_all(gelu(matmul(x, w)))
tape.backward(loss)
print("dloss/dw:\n", w.grad)

print("\n== finite-difference validation ==")
rng = np.random.default_rng(1)
a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4,))
err = finite_diff_check(
    lambda a, b: sum_all(mul(rmsnorm(a, b), rmsnorm(a, b))), [a0, b0])
print(f"max relative gradient error: {err:.2e}")

print("\n== Adam with the cosine schedule ==")
p = tensor([0.0], requires_grad=True)
opt = Adam([p], lr0=0.1, total_steps=50)
for step in range(50):
    with GradientTape() as tape:
        delta = mul(p, p)  # walk p**2 toward 0 from wherever the grad pushes
        loss = sum_all(delta)
    p.grad = 2 * p.data - 2.0  # pretend target is p = 1
    opt.step()
print(f"p after 50 steps: {float(p.data[0]):.4f} (target 1.0)")
print(f"lr at t=0: {cosine_lr(0.1, 0, 50):.3f}, at t=25: {cosine_lr(0.1, 25, 50):.3f}, "
      f"at t=50: {cosine_lr(0.1, 50, 50):.3f}")

print("\n== losses ==")
logits = tensor([[2.0, 0.0, 0.0]])
nll = cross_entropy(logits, np.array([0]))
print("cross-entropy:", float(nll.data[0]))
print("mean:", float(mean_all(nll).data))
