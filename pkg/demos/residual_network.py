"""
The residual classifier
=======================

A 7x7 stem, four stages of basic blocks and a two-layer head that emits five
raw class scores.  Widths and block counts are configurable; the default is
the 18-layer layout on one grayscale channel.
"""

import numpy as np

from reschest import model as M

cfg = M.ModelConfig()
params = M.build_model(cfg, seed=0)
print("trainable parameters:", f"{M.count_trainable(params):,}")

# where the parameters live
for prefix, cin, cout, stride in M.block_layout(cfg):
    proj = " + 1x1 projection" if M.needs_projection(cin, cout, stride) else ""
    print(f"{prefix:16s} {cin:4d} -> {cout:4d}  stride {stride}{proj}")

x = np.random.default_rng(1).uniform(-1, 1, (2, 1, 224, 224)).astype(np.float32)
logits = M.forward(params, x, training=False)
print("logits", logits.shape, logits.data.round(3))

# global pooling makes the head independent of the input size
small = M.build_model(M.ModelConfig.reduced(), seed=0)
for side in (32, 64, 100):
    print(side, M.forward(small, np.zeros((1, 1, side, side), np.float32)).shape)
