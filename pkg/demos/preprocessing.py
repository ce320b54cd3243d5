"""
From image files to model tensors
=================================

Scan a class-per-directory tree, decode to luminance, resize bilinearly to
224x224 and map [0, 1] to [-1, 1].  Then split by class and batch.
"""

import tempfile
from pathlib import Path

from reschest import data as D
from reschest.synthetic import write_image_tree

root = Path(tempfile.mkdtemp()) / "xrays"
# every third file is written as RGB JPEG to exercise the colour path
write_image_tree(root, 6, size=96, seed=0, rgb_every=3)

scan = D.scan_dataset(root)
print("class ids:", scan.index.mapping)
print("counts:", scan.counts)

first = scan.samples[0]
gray = D.decode_to_grayscale(first.path)
print(first.path, "decoded", gray.shape, f"range [{gray.min():.2f}, {gray.max():.2f}]")
tensor = D.preprocess(first.path)
print("model input", tensor.shape, f"range [{tensor.min():.2f}, {tensor.max():.2f}]")

train, val, test = D.split_dataset(scan.samples, D.SplitSpec(seed=0))
for name, part in (("train", train), ("val", val), ("test", test)):
    print(name, len(part), "labels", sorted(s.label for s in part))

for batch in D.make_batches(train, 8, shuffle_seed=1):
    print("batch", batch.images.shape, batch.labels.tolist())
