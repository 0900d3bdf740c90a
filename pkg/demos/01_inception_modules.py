"""Square and cubic inception modules: channel layout, weight sharing, parameter cost.

Run: python3 demos/01_inception_modules.py
"""
import numpy as np

from mdfn.inception import InceptionModule, InceptionSpec, UnsharedReference, cascade_ratio
from mdfn.tensor import Tensor, backward, tensor_sum

rng = np.random.default_rng(0)

for kind in ("square", "cubic"):
    mod = InceptionModule(InceptionSpec(kind, 16, bottleneck_channels=8, branch_channels=8), rng)
    print(f"{kind}: multiplicities {mod.spec.multiplicities}, out channels {mod.out_channels}")
    for blk in mod.spec.block_layout():
        print(f"  {blk['branch']:<12} depth {blk['depth']}  x{blk['multiplicity']}  -> {blk['channels']} ch")

    # the shared module reuses each stage; the reference holds one copy per branch
    ref = UnsharedReference(mod)
    x = rng.standard_normal((1, 16, 8, 8))
    a, b = mod(Tensor(x)), ref(Tensor(x))
    w = Tensor(rng.standard_normal(a.shape))
    backward(tensor_sum(a * w))
    backward(tensor_sum(b * w))
    grad_gap = np.abs(mod.bottleneck.weight.grad - ref.tied_gradients()["bottleneck.weight"]).max()
    print(f"  shared vs unshared: output gap {np.abs(a.data - b.data).max():.1e}, grad gap {grad_gap:.1e}")
    print(f"  params shared {mod.param_count():,} vs unshared {ref.param_count():,}")

print(f"two cascaded 3x3 convs cost {cascade_ratio(64)} of one 5x5 of the same width")
