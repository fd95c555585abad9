"""Regenerates the Canny reference fixtures (needs numpy, scikit-image).

ellipse.pgm             input: supersampled dark ellipse on a bright background
ellipse_canny_ref.pgm   scikit-image Canny on the same input, 255 = edge
"""
import numpy as np
from scipy import ndimage as ndi
from skimage import feature, filters

H = W = 64
SIGMA, LOW, HIGH = 1.4, 0.1, 0.2


def ellipse_image():
    ss = 4
    r = (np.arange(H * ss) + 0.5) / ss
    c = (np.arange(W * ss) + 0.5) / ss
    rr, cc = np.meshgrid(r, c, indexing="ij")
    dr, dc = rr - 31.3, cc - 30.6
    t = 0.5
    u = dr * np.cos(t) + dc * np.sin(t)
    v = -dr * np.sin(t) + dc * np.cos(t)
    inside = (u / 19.0) ** 2 + (v / 11.5) ** 2 <= 1.0
    frac = inside.reshape(H, ss, W, ss).mean(axis=(1, 3))
    img = 0.8 - 0.55 * frac
    return np.round(img * 255).astype(np.uint8)


def write_pgm(path, a):
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        f.write(a.tobytes())


img8 = ellipse_image()
img = img8.astype(np.float64) / 255.0
# thresholds relative to the maximum Sobel magnitude of the smoothed image
smoothed = filters.gaussian(img, sigma=SIGMA, mode="nearest", truncate=3.0)
mag = np.hypot(ndi.sobel(smoothed, axis=0), ndi.sobel(smoothed, axis=1))
edges = feature.canny(img, sigma=SIGMA, low_threshold=LOW * mag.max(), high_threshold=HIGH * mag.max(), mode="nearest")
write_pgm("ellipse.pgm", img8)
write_pgm("ellipse_canny_ref.pgm", edges.astype(np.uint8) * 255)
print("edge pixels", int(edges.sum()))
