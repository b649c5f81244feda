"""
Streamlines, resampling and file I/O
====================================

A tractogram is a set of polylines.  Everything downstream expects every
streamline to carry the same number of equidistant points, so loading is
usually followed by arc-length resampling.
"""
import tempfile
from pathlib import Path

import numpy as np

from tractreg import Tractogram, load_tractogram, resample_tractogram, save_tractogram
from tractreg.streamlines import arc_length, build_graph, sample_patch

rng = np.random.default_rng(0)

# Three smooth curves with different vertex counts, as a tracker would produce them
raw = []
for n, radius in ((40, 20.0), (23, 35.0), (61, 15.0)):
    th = np.sort(rng.uniform(0, np.pi, n))
    raw.append(np.stack([radius * np.cos(th), radius * np.sin(th), 0.1 * radius * th], axis=1))
tract = Tractogram.from_streamlines(raw, labels=[0, 0, 1])
print("points per streamline:", tract.lengths.tolist())

# Resample to 15 equidistant points; the endpoints do not move
resampled = resample_tractogram(tract, 15)
print("after resampling:", resampled.lengths.tolist())
for before, after in zip(tract, resampled):
    print(f"  arc length {arc_length(before):7.2f} -> {arc_length(after):7.2f} mm")

# Binary files store float32 coordinates; a second save is byte-identical
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "toy.trg"
    save_tractogram(resampled, path)
    again = load_tractogram(path)
    save_tractogram(again, Path(tmp) / "copy.trg")
    print("byte-identical re-save:", path.read_bytes() == (Path(tmp) / "copy.trg").read_bytes())

# Patches are random streamline subsets; the graph links consecutive points only
patch = sample_patch(resampled, 2, seed=1)
graph = build_graph(patch)
print(f"patch graph: {graph.n_nodes} nodes, {len(graph.edges)} edges")
