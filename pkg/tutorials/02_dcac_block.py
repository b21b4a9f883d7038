"""One DCAC block: the residual gate starts closed, and the cost model agrees with an instrumented count."""

import numpy as np

from dcacnet.dcac import DcacConfig, DcacModule, cost_model, dcac_forward, dcac_residual, flop_terms
from dcacnet.reference import count_executed_flops
from dcacnet.tensor import Tensor

rng = np.random.default_rng(0)
cfg = DcacConfig(4, 4, 4, kernel=(3, 1, 1), num_experts=2, reduction=2)
mod = DcacModule(cfg, seed=0)
x = Tensor(rng.normal(size=(4, 6, 3, 3)))

print("residual is identity at init:", np.array_equal(dcac_residual(x, mod).data, x.data))
print("raw block output shape:", dcac_forward(x, mod).shape)

counted = count_executed_flops(mod, x.data)
print("instrumented count equals formula:", counted == flop_terms(cfg, 6, 3, 3))

for kt in (3, 7, 11):
    rep = cost_model(DcacConfig.depthwise(64, kt), 100, 7, 7)
    print(f"k_t={kt:2d}  flops exact {rep.flops_total:,}  approx {rep.flops_approx:,.0f}  params {rep.params_total:,}")
