"""Overhead Counts.

Learns to predict, for any overhead tile, a per-category distribution over the
number of objects a ground-level photo taken there would show. Supervision comes
from object detections on co-located ground-level imagery, tallied into
histograms; no manual annotation of the overhead imagery is needed.

The library runs at desk scale: a small numpy network with hand-written
backpropagation, synthetic tiles with known ground-truth rates, and plain-file
outputs (JSONL/CSV datasets, .npz checkpoints, PPM rasters).
"""

__version__ = "0.1.0"
