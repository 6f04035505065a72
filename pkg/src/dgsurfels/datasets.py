"""Datasets on disk: frames, cameras, split rule and init samples.

Directory layout:

    frames/%04d.ppm   one image per frame
    cameras.txt       one line per frame: t fx fy cx cy, then 12 row-major
                      extrinsics reals (9 rotation + 3 translation)
    split.txt         one line per frame: "<index> train|val|none"
    points.txt        init samples: x y z nx ny nz r g b per line (optional)
    gt.dgs.json       ground-truth checkpoint (synthetic scenes only)

The split follows the every-fourth-frame protocol: frame i is a training
frame iff i % 4 == 0, and the middle frame between each consecutive pair of
training frames is a validation frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import ParseError
from .ppm import read_image, write_image


def split_frames(n_frames: int):
    """(train, val) indices for the every-fourth-frame protocol."""
    train = [i for i in range(n_frames) if i % 4 == 0]
    has_train = set(train)
    # midpoints exist only between consecutive training frames
    val = [t + 2 for t in train if t + 4 in has_train]
    return train, val


@dataclass
class Frame:
    index: int
    time: float
    camera: Camera
    image: np.ndarray | None = None


@dataclass
class Dataset:
    frames: list
    train_idx: list
    val_idx: list
    points: np.ndarray | None = None
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    root: str | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def train_frames(self):
        return [self.frames[i] for i in self.train_idx]

    def val_frames(self):
        return [self.frames[i] for i in self.val_idx]


def save_dataset(root, frames, images, points=None, normals=None, colors=None):
    """Write frames + cameras + split (+ init samples) to a directory."""
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    lines = []
    for fr, img in zip(frames, images):
        write_image(os.path.join(root, "frames", f"{fr.index:04d}.ppm"), img)
        lines.append(f"{fr.time!r} {fr.camera.serialize_line()}\n")
    with open(os.path.join(root, "cameras.txt"), "w") as f:
        f.writelines(lines)

    train, val = split_frames(len(frames))
    train_set, val_set = set(train), set(val)
    with open(os.path.join(root, "split.txt"), "w") as f:
        for fr in frames:
            kind = (
                "train" if fr.index in train_set
                else "val" if fr.index in val_set
                else "none"
            )
            f.write(f"{fr.index} {kind}\n")

    if points is not None:
        with open(os.path.join(root, "points.txt"), "w") as f:
            for p, n, c in zip(points, normals, colors):
                vals = list(p) + list(n) + list(c)
                f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_dataset(root, with_images: bool = True) -> Dataset:
    cam_path = os.path.join(root, "cameras.txt")
    try:
        with open(cam_path) as f:
            cam_lines = [ln.split() for ln in f if ln.strip()]
    except OSError as e:
        raise ParseError(f"cannot read {cam_path}: {e}") from e

    frames = []
    for i, vals in enumerate(cam_lines):
        if len(vals) != 17:
            raise ParseError(f"cameras.txt line {i}: expected 17 values")
        t = float(vals[0])
        img_path = os.path.join(root, "frames", f"{i:04d}.ppm")
        image = read_image(img_path) if with_images else None
        if image is not None:
            h, w = image.shape[:2]
        else:
            h = w = 1
        cam = Camera.from_values(vals[1:], width=w, height=h)
        frames.append(Frame(i, t, cam, image))

    split_path = os.path.join(root, "split.txt")
    train_idx, val_idx = [], []
    if os.path.exists(split_path):
        with open(split_path) as f:
            for ln in f:
                parts = ln.split()
                if len(parts) != 2:
                    raise ParseError(f"split.txt: bad line {ln!r}")
                idx, kind = int(parts[0]), parts[1]
                if kind == "train":
                    train_idx.append(idx)
                elif kind == "val":
                    val_idx.append(idx)
    else:
        train_idx, val_idx = split_frames(len(frames))

    points = normals = colors = None
    pts_path = os.path.join(root, "points.txt")
    if os.path.exists(pts_path):
        rows = np.loadtxt(pts_path, ndmin=2)
        if rows.shape[1] != 9:
            raise ParseError("points.txt rows must have 9 columns")
        points, normals, colors = rows[:, :3], rows[:, 3:6], rows[:, 6:9]

    return Dataset(frames, train_idx, val_idx, points, normals, colors, root)
