"""Synthetic test suites and ready-to-run demo campaigns."""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .images import RasterImage, write_ppm
from .suts import AVERAGE_RATES, ramp_spec, rates_spec


def smooth_image(rng: np.random.Generator, size: int = 32, base=None, cells: int = 4) -> RasterImage:
    """Low-frequency colour field: a random ``cells x cells`` grid, bilinearly upsampled."""
    grid = rng.uniform(0, 255, size=(cells + 1, cells + 1, 3))
    if base is not None:
        grid = 0.5 * grid + 0.5 * np.asarray(base, dtype=np.float64)
    t = np.linspace(0, cells, size)
    i0 = np.minimum(np.floor(t).astype(int), cells - 1)
    f = (t - i0)[:, None]
    rows = grid[i0] * (1 - f)[..., None] + grid[i0 + 1] * f[..., None]
    img = rows[:, i0] * (1 - f.T)[..., None] + rows[:, i0 + 1] * f.T[..., None]
    return RasterImage.from_array(np.clip(np.rint(img), 0, 255))


def class_colours(class_count: int, seed: int = 12345) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0, 255, size=(class_count, 3))


def make_classification_suite(directory, count: int = 100, class_count: int = 10,
                              size: int = 32, seed: int = 0) -> str:
    """Write ``count`` PPM images plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    rng = np.random.default_rng(seed)
    colours = class_colours(class_count)
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "image", "target"])
        for i in range(count):
            label = i % class_count
            name = f"img_{i:04d}"
            write_ppm(os.path.join(directory, "images", f"{name}.ppm"),
                      smooth_image(rng, size, colours[label]))
            writer.writerow([name, f"images/{name}.ppm", label])
    return manifest


def make_detection_suite(directory, count: int = 20, class_count: int = 3,
                         size: int = 48, seed: int = 0) -> str:
    """Images with one or two solid rectangles each, annotated as ground truth."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "annotations"), exist_ok=True)
    rng = np.random.default_rng(seed)
    colours = class_colours(class_count)
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "image", "target"])
        for i in range(count):
            px = smooth_image(rng, size).pixels.copy() // 2
            truths = []
            for _ in range(int(rng.integers(1, 3))):
                cls = int(rng.integers(class_count))
                w, h = (int(v) for v in rng.integers(size // 6, size // 3, size=2))
                x0, y0 = int(rng.integers(0, size - w)), int(rng.integers(0, size - h))
                px[y0:y0 + h, x0:x0 + w] = np.rint(colours[cls]).astype(np.uint8)
                truths.append({"box": [x0, y0, x0 + w, y0 + h], "class_id": cls})
            name = f"det_{i:04d}"
            write_ppm(os.path.join(directory, "images", f"{name}.ppm"), RasterImage(px))
            with open(os.path.join(directory, "annotations", f"{name}.json"), "w") as ann:
                json.dump(truths, ann)
            writer.writerow([name, f"images/{name}.ppm", f"annotations/{name}.json"])
    return manifest


def oracle_spec_dict(spec) -> dict:
    out = {"class_count": spec.class_count, "mode": spec.mode, "seed": spec.seed, "table": spec.table}
    if spec.ramp is not None:
        out["ramp"] = {"p0": spec.ramp.p0, "slope": spec.ramp.slope, "p_max": spec.ramp.p_max}
    return out


def write_demo(directory, sources: int = 100, iterations: int = 10000, seed: int = 0) -> dict[str, str]:
    """Suite, reference-rate and ramp oracle specs, and one config per mode."""
    os.makedirs(directory, exist_ok=True)
    make_classification_suite(os.path.join(directory, "suite"), count=sources, seed=seed)
    with open(os.path.join(directory, "rates_oracle.json"), "w") as fh:
        json.dump(oracle_spec_dict(rates_spec("bernoulli", seed)), fh, indent=2)
    with open(os.path.join(directory, "class_rates_oracle.json"), "w") as fh:
        json.dump(oracle_spec_dict(rates_spec("deterministic-hash", seed, per_class=True)), fh, indent=2)
    with open(os.path.join(directory, "ramp_oracle.json"), "w") as fh:
        json.dump(oracle_spec_dict(ramp_spec("bernoulli", seed)), fh, indent=2)
    configs = {}
    base = {"suite": "suite/manifest.csv", "iterations": iterations, "seed": seed,
            "exploration": {"strategy": "epsilon-greedy", "epsilon": 0.1}}
    variants = {
        "amt": dict(mode="amt", sut={"kind": "oracle", "spec": "rates_oracle.json"},
                    log="out/amt.jsonl", snapshot_out="out/amt_state.json"),
        "random": dict(mode="random", sut={"kind": "oracle", "spec": "rates_oracle.json"},
                       log="out/random.jsonl"),
        "baseline": dict(mode="baseline", sut={"kind": "oracle", "spec": "class_rates_oracle.json"},
                         baseline_table="out/baseline.csv"),
        "boundary": dict(mode="boundary", boundary_mr="Rotation",
                         sut={"kind": "oracle", "spec": "ramp_oracle.json"},
                         log="out/boundary.jsonl", snapshot_out="out/boundary_state.json"),
    }
    for name, extra in variants.items():
        path = os.path.join(directory, f"{name}.json")
        with open(path, "w") as fh:
            json.dump({**base, **extra}, fh, indent=2)
        configs[name] = path
    return configs


__all__ = ["AVERAGE_RATES", "class_colours", "make_classification_suite", "make_detection_suite",
           "oracle_spec_dict", "smooth_image", "write_demo"]
