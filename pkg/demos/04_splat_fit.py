"""Fitting 2D gaussian splats to a single clean image.

The image model is a depth-ordered alpha composite of anisotropic gaussian
blobs over mid-gray. Every gradient is analytic (no autograd anywhere), so a
few hundred Adam steps run in seconds. Writes target / initial / final
renders to demos/out/.
"""

import os
import time

import numpy as np

from robustsplat.datagen import GenConfig, generate_scene
from robustsplat.pngio import save_rgb
from robustsplat.splats import SplatAdam, init_model, render, render_backward
from robustsplat.trainer import masked_l1, psnr

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

w = h = 64
scene = generate_scene(3, GenConfig(width=w, height=h, num_views=1,
                                    occupancy=0.0, jitter=0.0))
target = scene.views[0].image

model = init_model(n_splats=250, width=w, height=h, seed=0, mean_image=target)
opt = SplatAdam(model)
ones = np.ones((h, w))

save_rgb(os.path.join(OUT, "fit_target.png"), target)
save_rgb(os.path.join(OUT, "fit_initial.png"), render(model, 0, w, h))

t0 = time.time()
for step in range(400):
    img = render(model, 0, w, h)
    loss, grad = masked_l1(img, target, ones)
    grads = render_backward(model, 0, grad)
    opt.step(model, grads)
    if step % 100 == 0:
        print(f"step {step:>4}  loss {loss:.5f}  psnr {psnr(img, target):.2f} dB")

final = render(model, 0, w, h)
print(f"step  400  loss {masked_l1(final, target, ones)[0]:.5f}  "
      f"psnr {psnr(final, target):.2f} dB  ({time.time() - t0:.1f}s)")
save_rgb(os.path.join(OUT, "fit_final.png"), final)
print(f"wrote renders to {OUT}/")
