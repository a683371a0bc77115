#!/usr/bin/env python3
"""Regenerates the bundled grayscale images under data/ from scikit-image samples.

Every sample used here ships with scikit-image under a public-domain or CC0
style license (see data/README.md). Output is 8-bit binary PGM.
"""
import pathlib

import numpy as np
import skimage.data as skd
from skimage.color import rgb2gray
from skimage.transform import resize

ROOT = pathlib.Path(__file__).resolve().parent.parent / "data"
SHORT_SIDE = 192


def load(name):
    im = getattr(skd, name)()
    if im.ndim == 3:
        im = rgb2gray(im[..., :3])
    else:
        im = im.astype(np.float64) / 255.0
    scale = SHORT_SIDE / min(im.shape)
    shape = (round(im.shape[0] * scale), round(im.shape[1] * scale))
    return resize(im, shape, anti_aliasing=True)


def write_pgm(path, im):
    q = np.clip(np.round(im * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        f.write(q.tobytes())


def main():
    # name -> (test crop row, col) for a 64x64 test crop; training crops
    # below never overlap these rectangles.
    test = {
        "camera": (16, 64),
        "astronaut": (16, 64),
        "coffee": (16, 80),
        "chelsea": (40, 120),
        "coins": (16, 100),
        "moon": (16, 100),
        "rocket": (60, 110),
        "clock": (60, 100),
        "immunohistochemistry": (16, 64),
        "grass": (16, 100),
    }
    train = [
        ("camera", 96, 0), ("camera", 96, 96),
        ("astronaut", 96, 0), ("astronaut", 96, 96),
        ("coffee", 96, 0), ("chelsea", 96, 0),
        ("coins", 96, 0), ("moon", 96, 0),
        ("rocket", 96, 0), ("clock", 96, 0),
        ("immunohistochemistry", 96, 96), ("cell", 96, 0),
        ("brick", 48, 48), ("grass", 96, 0), ("gravel", 48, 48),
        ("page", 48, 96), ("text", 48, 96), ("hubble_deep_field", 48, 48),
        ("retina", 48, 48), ("coffee", 96, 180),
    ]
    images = {}
    for name in set(test) | {n for n, _, _ in train}:
        images[name] = load(name)

    for i, (name, (r, c)) in enumerate(sorted(test.items())):
        write_pgm(ROOT / "test" / f"{i:02d}_{name}.pgm", images[name][r:r + 64, c:c + 64])
    for i, (name, r, c) in enumerate(train):
        crop = images[name][r:r + 96, c:c + 96]
        assert crop.shape == (96, 96), (name, crop.shape)
        if name in test:
            tr, tc = test[name]
            overlap = r < tr + 64 and tr < r + 96 and c < tc + 64 and tc < c + 96
            assert not overlap, name
        write_pgm(ROOT / "train" / f"{i:02d}_{name}.pgm", crop)


if __name__ == "__main__":
    main()
