"""Phantoms and forward projection.

Generates the built-in phantoms, projects them with the 2D parallel-beam and
cone-beam operators, and saves a few PNGs so you can eyeball sinograms and
projection stacks.

Run:  python demos/01_phantoms_and_projectors.py
"""
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cdpa import (
    ConeBeamGeometry,
    ParallelGeometry2D,
    PhantomSpec,
    forward_cone,
    forward_parallel,
    make_phantom,
    uniform_angles,
)

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

# A 2D head phantom and its sinogram at two sampling densities.
head = make_phantom(PhantomSpec("shepp-logan-2d", 64))
geom = ParallelGeometry2D(detector_pixels=128, detector_spacing=0.75)

fig, axes = plt.subplots(1, 3, figsize=(12, 4))
axes[0].imshow(head, cmap="gray")
axes[0].set_title("Shepp-Logan 64x64")
for ax, views in zip(axes[1:], (180, 20)):
    sino = forward_parallel(head, geom, uniform_angles(views))
    ax.imshow(sino.data, cmap="gray", aspect="auto")
    ax.set_title(f"sinogram, {views} views")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "01_sinograms.png"), dpi=120)
print("wrote", os.path.join(OUT, "01_sinograms.png"))

# A cone-beam stack of a walnut-like phantom: each frame is one detector image.
walnut = make_phantom(PhantomSpec("nested-shells", 48, seed=4))
cone = ConeBeamGeometry(detector_rows=128, detector_cols=128, detector_spacing=0.9,
                        source_object_distance=150.0, object_detector_distance=75.0)
stack = forward_cone(walnut, cone, uniform_angles(6))

fig, axes = plt.subplots(1, 6, figsize=(16, 3))
for k, ax in enumerate(axes):
    ax.imshow(stack.data[k], cmap="gray")
    ax.set_title(f"{stack.angle_set.angles[k]:.0f} deg")
    ax.axis("off")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "01_cone_stack.png"), dpi=120)
print("wrote", os.path.join(OUT, "01_cone_stack.png"))

# Linearity sanity check, straight from the operator contract.
double = forward_parallel(2.0 * head, geom, uniform_angles(12))
single = forward_parallel(head, geom, uniform_angles(12))
print("linearity |A(2x) - 2Ax| =", np.abs(double.data - 2.0 * single.data).max())
