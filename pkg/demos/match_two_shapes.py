"""Part correspondences between two toy vehicles through their box abstractions.

The annotated part boxes stand in for predicted abstractions here; a vehicle
with a spoiler matched against one without shows an unmatched label.

    python demos/match_two_shapes.py
"""

from semabs.apps import match_shapes
from semabs.data import TOY_VEHICLE, generate_dataset
from semabs.fusion import Abstraction

shapes = generate_dataset(TOY_VEHICLE, 12, seed=0)
with_spoiler = next(s for s in shapes if "spoiler" in s.labels)
without = next(s for s in shapes if "spoiler" not in s.labels)


def as_abstractions(shape):
    return [Abstraction(box, label, 1.0 - 1e-9, i) for i, (label, box) in enumerate(shape.parts)]


src, dst = as_abstractions(with_spoiler), as_abstractions(without)
m = match_shapes(src, dst)
print(f"{with_spoiler.id} -> {without.id}")
for s, t in m.pairs:
    print(f"  {s:2d} {src[s].label:15s} <-> {t:2d} {dst[t].label}")
print("only in source:", m.unmatched_source, " only in target:", m.unmatched_target)
assert match_shapes(src, src).pairs == [(i, i) for i in range(len(src))]
