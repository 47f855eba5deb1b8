"""
Lab color space round trip
==========================

The generator never sees RGB. Images are split into a lightness plane L,
which is the input, and two chroma planes a/b, which are the target.
"""

import numpy as np

from metalgan.colorlab import ImageLab, ImageRGB, compose_output, denormalize, lab_to_rgb, normalize, rgb_to_lab

# A small image holding every 16th level of each channel.
v = np.linspace(0, 255, 16).round().astype(np.uint8)
r, g, b = np.meshgrid(v, v, v, indexing="ij")
img = ImageRGB(np.stack([r, g, b], axis=-1).reshape(64, 64, 3), id="lattice")

lab = rgb_to_lab(img)
print("L range", lab.L.min(), lab.L.max())
print("a range", lab.ab[..., 0].min().round(1), lab.ab[..., 0].max().round(1))

# Networks work on [-1, 1] planes.
net = normalize(lab)
print("normalized L range", net.L.min(), net.L.max())

# A perfect colorization is the ground-truth ab glued back onto the input L.
out = compose_output(net.L, net.ab, id="lattice")
back = lab_to_rgb(denormalize(out)).pixels
print("worst channel error after the round trip:", np.abs(back.astype(int) - img.pixels.astype(int)).max())

# Zero chroma is a = b = 0 in Lab units. The ab range [-128, 127] is not
# symmetric, so in normalized units that is 1/255 rather than 0.
gray = ImageLab(lab.L, np.zeros_like(lab.ab))
print("gray pixel:", lab_to_rgb(gray).pixels[10, 10])
print("normalized zero chroma:", normalize(gray).ab[0, 0])
