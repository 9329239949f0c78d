"""Cut the training-crop fixtures from scikit-image's public-domain / CC0
sample photographs and record reference bicubic metrics computed with
BasicSR's MATLAB-compatible resizer and its PSNR/SSIM implementation.

usage: python3 scripts/make_fixtures.py <basicsr source dir>
"""
import json
import os
import sys

import numpy as np
from PIL import Image
from skimage import data

# register bare parent packages so only the needed modules are imported
import types  # noqa: E402

for pkg in ("basicsr", "basicsr.metrics", "basicsr.utils"):
    mod = types.ModuleType(pkg)
    mod.__path__ = [os.path.join(sys.argv[1], *pkg.split("."))]
    sys.modules[pkg] = mod
from basicsr.utils import color_util  # noqa: E402

sys.modules["basicsr.utils"].bgr2ycbcr = color_util.bgr2ycbcr
from basicsr.metrics.psnr_ssim import calculate_psnr, calculate_ssim  # noqa: E402
from basicsr.utils.matlab_functions import imresize  # noqa: E402

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "crates", "core", "tests", "fixtures")
CROP = 96
SCALE = 4

CROPS = [
    ("astronaut_a", data.astronaut, 60, 180),
    ("astronaut_b", data.astronaut, 300, 330),
    ("chelsea_a", data.chelsea, 60, 120),
    ("chelsea_b", data.chelsea, 170, 250),
    ("coffee_a", data.coffee, 40, 200),
    ("coffee_b", data.coffee, 250, 420),
    ("rocket", data.rocket, 280, 270),
    ("hubble", data.hubble_deep_field, 300, 300),
]


def bicubic_scores(hr):
    """HR in [0,1] float64, RGB. LR rounded to 8 bits, upsample clamped."""
    lr = imresize(hr, 1 / SCALE)
    lr = np.round(np.clip(lr, 0, 1) * 255) / 255
    up = np.clip(imresize(lr, SCALE), 0, 1)
    # BasicSR expects BGR in [0, 255]
    a = up[..., ::-1] * 255.0
    b = hr[..., ::-1] * 255.0
    return (
        float(calculate_psnr(a, b, crop_border=SCALE, test_y_channel=True)),
        float(calculate_ssim(a, b, crop_border=SCALE, test_y_channel=True)),
    )


def main():
    os.makedirs(os.path.join(OUT, "train"), exist_ok=True)
    ref = {"scale": SCALE, "images": {}}
    for name, loader, top, left in CROPS:
        img = loader()[top : top + CROP, left : left + CROP, :3]
        Image.fromarray(img).save(os.path.join(OUT, "train", f"{name}.png"))
        p, s = bicubic_scores(img.astype(np.float64) / 255.0)
        ref["images"][name] = {"psnr": p, "ssim": s}
    big = data.coffee()[72:328, 150:406, :3]
    Image.fromarray(big).save(os.path.join(OUT, "coffee_256.png"))
    p, s = bicubic_scores(big.astype(np.float64) / 255.0)
    ref["images"]["coffee_256"] = {"psnr": p, "ssim": s}
    with open(os.path.join(OUT, "bicubic_reference.json"), "w") as f:
        json.dump(ref, f, indent=2, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
