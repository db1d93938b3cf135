"""
Soft targets, ramp-up and the mean-teacher coefficient
=======================================================

The scalar pieces of the objective, printed so their shapes are easy to see.
"""

import numpy as np

from pclkd.losses import kl_to_target, peer_ensemble_distill, peer_mean_distill, ramp_up, soften
from pclkd.model import smoothing_coefficient
from pclkd.tensor import Tensor

# Higher temperature flattens the distribution without changing its order.
z = np.array([[4.0, 1.0, 0.5]])
for T in (1, 3, 10):
    print(f"T={T:<3d}", soften(z, T).round(3))

# The distillation weight rises smoothly to lambda and then stays there.
alpha = 80
for e in (0, 20, 40, 60, 80, 120):
    print(f"omega({e:3d}) = {ramp_up(e, alpha, 1.0):.4f}")

# The mean-teacher coefficient starts by copying the student (phi(1)=0)
# and saturates at beta.
for g in (1, 2, 10, 100, 1000, 10**5):
    print(f"phi({g}) = {smoothing_coefficient(g, 0.999):.6f}")

# KL against a fixed target, and the two distillation terms on random logits.
rng = np.random.default_rng(1)
teacher = Tensor(rng.normal(size=(8, 3)))
peers = [Tensor(rng.normal(size=(8, 3)), requires_grad=True) for _ in range(3)]
means = [rng.normal(size=(8, 3)) for _ in range(3)]
print("KL(p_t || p_1) at T=3:", kl_to_target(soften(teacher, 3), peers[0], 3).item())
pe = peer_ensemble_distill(teacher, peers, temperature=3, omega=1.0)
pm = peer_mean_distill(means, peers, temperature=3, omega=1.0)
print("L_pe", pe.item(), " L_pm", pm.item())

# Stop-gradient: peers receive gradient, the teacher logits do not.
(pe + pm).backward()
print("peer 1 grad norm", np.linalg.norm(peers[0].grad), " teacher grad", teacher.grad)
