"""Shared fixtures: synthetic shadow/shadow-free pairs on disk.

The synthetic scenes are smooth random color fields darkened
multiplicatively inside a random soft-edged region, so both the additive
and multiplicative supervision targets are informative and the true mask
is known.
"""

import numpy as np
import pytest
from PIL import Image

from deshadow import colorio


def box_blur(m: np.ndarray, k: int = 5, passes: int = 2) -> np.ndarray:
    for _ in range(passes):
        pad = np.pad(m, k // 2, mode="edge")
        acc = np.zeros_like(m, dtype=np.float64)
        for dy in range(k):
            for dx in range(k):
                acc += pad[dy : dy + m.shape[0], dx : dx + m.shape[1]]
        m = acc / (k * k)
    return m


def make_pair(rng: np.random.Generator, size: int = 64):
    """One synthetic (shadow, shadow_free, mask) triple."""
    low = rng.uniform(0.25, 0.95, size=(5, 5, 3)).astype(np.float32)
    free = colorio.resize_bilinear(low, (size, size))

    yy, xx = np.mgrid[0:size, 0:size]
    kind = int(rng.integers(0, 3))
    if kind == 0:
        cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
        r = rng.uniform(size * 0.15, size * 0.3)
        hard = ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r).astype(np.float64)
    elif kind == 1:
        y0, x0 = rng.integers(0, size // 2, 2)
        h, w = rng.integers(size // 4, size // 2, 2)
        hard = np.zeros((size, size))
        hard[y0 : y0 + h, x0 : x0 + w] = 1.0
    else:
        theta = rng.uniform(0, 2 * np.pi)
        c = rng.uniform(-0.2, 0.2)
        hard = (
            (np.cos(theta) * (xx / size - 0.5) + np.sin(theta) * (yy / size - 0.5)) > c
        ).astype(np.float64)
    soft = box_blur(hard, 5, 2)
    depth = rng.uniform(0.35, 0.55)
    shadow = np.clip(free * (1.0 - depth * soft[:, :, None]), 0.0, 1.0)
    return shadow.astype(np.float32), free.astype(np.float32), (soft > 0.5).astype(np.uint8)


def build_fixture(root, n=8, size=64, seed=123, with_mask=True, split="train"):
    """Write n synthetic triplets under root[/split]/{shadow,mask,shadow_free}."""
    base = root / split if split else root
    (base / "shadow").mkdir(parents=True, exist_ok=True)
    (base / "shadow_free").mkdir(parents=True, exist_ok=True)
    if with_mask:
        (base / "mask").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        shadow, free, mask = make_pair(rng, size)
        colorio.save_image(shadow, base / "shadow" / f"img{i:02d}.png")
        colorio.save_image(free, base / "shadow_free" / f"img{i:02d}.png")
        if with_mask:
            Image.fromarray(mask * 255, mode="L").save(base / "mask" / f"img{i:02d}.png")
    return root


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs8")
    return build_fixture(root, n=8, size=64, seed=123, with_mask=True, split="train")


@pytest.fixture(scope="session")
def records8(fixture_root):
    from deshadow.datasets import scan_dataset

    return scan_dataset(fixture_root, "istd").split("train")


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
