"""Input-pixel connection density maps (PGM) and matplotlib report figures."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .network import AFFINE


def density_grid(model, image_shape=None):
    """Active first-layer connections leaving each input pixel, as an H x W grid."""
    first = model.layers[0]
    if first.kind != AFFINE:
        raise InputError("density maps need a fully-connected first layer")
    counts = first.mask.sum(axis=0, dtype=np.int64)
    if image_shape is None:
        image_shape = tuple(model.input_shape[-2:]) if len(model.input_shape) >= 2 else (1, counts.size)
    return counts.reshape(image_shape)


def write_pgm(path, grid):
    """Binary (P5) PGM holding the raw counts; 16-bit samples when a count exceeds 255."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.min() < 0:
        raise InputError("PGM needs a 2-d non-negative grid")
    maxval = max(1, int(grid.max()))
    if maxval > 65535:
        raise InputError("count too large for PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = grid.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(grid.astype(dtype).tobytes())
    return path


def read_pgm(path):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw, dtype=dtype, offset=pos + 1, count=w * h).reshape(h, w).astype(np.int64)


def active_region(mean_image, threshold=0.2):
    """Pixels whose mean intensity reaches ``threshold``."""
    return np.asarray(mean_image) >= threshold


def bounding_box(region):
    ys, xs = np.nonzero(region)
    box = np.zeros_like(region, dtype=bool)
    if ys.size:
        box[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = True
    return box


def mass_ratio(grid, region):
    """Share of the total connection count that falls inside ``region``."""
    grid = np.asarray(grid, dtype=np.float64)
    total = grid.sum()
    if total == 0:
        return 0.0
    return float(grid[np.asarray(region, dtype=bool)].sum() / total)


def mean_image(dataset, label):
    sel = dataset.labels == label
    if not sel.any():
        raise InputError(f"no samples with label {label}")
    return dataset.images[sel].reshape(int(sel.sum()), -1).mean(axis=0).reshape(dataset.images.shape[-2:])


# -- figures --------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_metrics(rows, path):
    """Three panels (test error, active parameters, normalized epochs) per method."""
    plt = _pyplot()
    rows = [r.as_dict() if hasattr(r, "as_dict") else r for r in rows]
    methods = sorted({r["method"] for r in rows})
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    panels = (("test_error", "test error (%)", 100.0), ("active_params", "active parameters (K)", 1e-3),
              ("norm_epochs", "normalized epochs", 1.0))
    for ax, (key, label, scale) in zip(axes, panels):
        for m in methods:
            pts = sorted((r["data_fraction"], float(r[key]) * scale) for r in rows if r["method"] == m)
            ax.plot([p[0] * 100 for p in pts], [p[1] for p in pts], marker="o", label=m)
        ax.set_xlabel("training data used (%)")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[0].legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_density(grids, path, titles=None):
    plt = _pyplot()
    grids = list(grids)
    fig, axes = plt.subplots(1, len(grids), figsize=(2.4 * len(grids), 2.6), squeeze=False)
    for i, (ax, grid) in enumerate(zip(axes[0], grids)):
        ax.imshow(grid, cmap="gray")
        ax.set_xticks([])
        ax.set_yticks([])
        if titles:
            ax.set_title(titles[i], fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
