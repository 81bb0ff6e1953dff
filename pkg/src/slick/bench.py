"""Analytic multiply-accumulate counts and wall-clock latency benchmarks."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .blocks import ModelConfig


def _down(n: int, s: int) -> int:
    return math.ceil(n / s)


def level_sizes(cfg: ModelConfig, H: int, W: int) -> list[tuple[int, int]]:
    h, w = _down(H, cfg.stem_stride), _down(W, cfg.stem_stride)
    sizes = [(h, w)]
    for _ in range(cfg.levels - 1):
        h, w = _down(h, 2), _down(w, 2)
        sizes.append((h, w))
    return sizes


def conv_macs(h_out: int, w_out: int, k: int, cin: int, cout: int) -> int:
    return h_out * w_out * k * k * cin * cout


def dense_macs(rows: int, fan_in: int, fan_out: int) -> int:
    return rows * fan_in * fan_out


def flop_breakdown(cfg: ModelConfig, H: int, W: int) -> dict[str, dict[str, int]]:
    """Per-layer MAC counts for one image, split into spatial (scale with
    pixel count) and fixed (per-query / per-vector) parts.
    """
    C, d, N, k = cfg.channels, cfg.query_dim, cfg.num_queries, cfg.kernel_size
    Cr, Z, ce = C // cfg.se_reduction, cfg.fusion_dim, cfg.fusion_channels
    K = cfg.part_outputs + cfg.damage_outputs
    sizes = level_sizes(cfg, H, W)
    (h1, w1), (hL, wL) = sizes[0], sizes[-1]
    sp: dict[str, int] = {}
    fx: dict[str, int] = {}

    sp["enc.stem"] = conv_macs(h1, w1, 3, 4, C)
    sp["enc.l1"] = conv_macs(h1, w1, 3, C, C)
    for lvl, (h, w) in enumerate(sizes[1:], start=2):
        sp[f"enc.l{lvl}"] = conv_macs(h, w, 3, C, C)
    for lvl, (h, w) in enumerate(sizes, start=1):
        # squeeze (GAP) and excite (channel scaling)
        sp[f"c3.{lvl}"] = 2 * h * w * C
        fx[f"c3.{lvl}"] = C * Cr + Cr * C
        sp[f"loc.{lvl}"] = dense_macs(h * w, C + 1, C) + dense_macs(h * w, C, C)
        sp[f"attn_map.{lvl}"] = h * w * C
    hx, wx = _down(H, 2), _down(W, 2)
    sp["fuse.encoders"] = 3 * (conv_macs(hx, wx, 3, 3, ce) + hx * wx * ce)
    fx["fuse.mlp"] = 3 * ce * Z + Z * Z
    # bilinear upsampling of coarser levels: 4 taps per output value
    sp["mask_feat"] = (cfg.levels - 1) * 4 * h1 * w1 * C
    fx["film"] = 2 * Z * C
    sp["film"] = h1 * w1 * C
    sp["pool"] = 2 * hL * wL * C * d + 2 * N * hL * wL * d
    fx["prior_attn"] = 3 * N * d * d + 2 * N * N * d
    fx["class_head"] = 2 * (N * d * d + N * d * K)
    fx["phi"] = N * d * k * k * C
    sp["isr"] = N * h1 * w1 * k * k * C
    sp["mask_resize"] = 4 * N * H * W
    return {"spatial": sp, "fixed": fx}


def flops(cfg: ModelConfig, H: int = 64, W: int = 64, part: str = "total") -> int:
    b = flop_breakdown(cfg, H, W)
    if part == "spatial":
        return sum(b["spatial"].values())
    if part == "fixed":
        return sum(b["fixed"].values())
    return sum(b["spatial"].values()) + sum(b["fixed"].values())


def flop_ratio(teacher: ModelConfig, student: ModelConfig, H: int = 64, W: int = 64) -> float:
    return flops(teacher, H, W) / flops(student, H, W)


def scaling_exponent(cfg: ModelConfig, sizes: Sequence[int] = (32, 64, 128, 256)) -> float:
    """Least-squares slope of log FLOPs against log pixel count."""
    px = np.array([s * s for s in sizes], dtype=np.float64)
    fl = np.array([flops(cfg, s, s) for s in sizes], dtype=np.float64)
    slope, _ = np.polyfit(np.log(px), np.log(fl), 1)
    return float(slope)


# ---------------------------------------------------------------- wall clock


@dataclass
class LatencyStats:
    median_ms: float
    p95_ms: float
    runs: int
    warmup: int
    flops: int

    @classmethod
    def measure(cls, fn: Callable[[], object], runs: int = 50, warmup: int = 5, flops: int = 0) -> "LatencyStats":
        if runs < 1:
            raise ValueError("runs must be positive")
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        return cls(float(np.median(times)), float(np.percentile(times, 95)), runs, warmup, int(flops))


@dataclass
class BenchReport:
    input_size: tuple
    teacher: LatencyStats
    student: LatencyStats
    flop_ratio: float
    scaling: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.teacher.median_ms / self.student.median_ms

    def to_json(self) -> dict:
        return {"input_size": list(self.input_size), "teacher": asdict(self.teacher),
                "student": asdict(self.student), "flop_ratio": self.flop_ratio,
                "speedup": self.speedup, "scaling": self.scaling}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def table(self) -> str:
        rows = [("model", "median ms", "p95 ms", "MACs"),
                ("teacher", f"{self.teacher.median_ms:.2f}", f"{self.teacher.p95_ms:.2f}", f"{self.teacher.flops:,}"),
                ("student", f"{self.student.median_ms:.2f}", f"{self.student.p95_ms:.2f}", f"{self.student.flops:,}")]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append(f"speedup {self.speedup:.2f}x  FLOP ratio {self.flop_ratio:.2f}x  "
                     f"input {self.input_size[0]}x{self.input_size[1]}")
        for name, exp in self.scaling.items():
            lines.append(f"{name} FLOP scaling exponent {exp:.3f}")
        return "\n".join(lines)


def run_bench(forward_fn: Callable, teacher_cfg: ModelConfig, teacher_params: dict,
              student_cfg: ModelConfig, student_params: dict, size: int = 64, runs: int = 50,
              warmup: int = 5, seed: int = 0, sizes: Sequence[int] = (32, 64, 128, 256)) -> BenchReport:
    """Single-image latency of each model plus analytic FLOP figures."""
    x = np.random.default_rng(seed).random((1, size, size, 3))

    def runner(params, cfg):
        def call():
            with T.no_grad():
                forward_fn(params, cfg, x)
        return call

    t = LatencyStats.measure(runner(teacher_params, teacher_cfg), runs, warmup, flops(teacher_cfg, size, size))
    s = LatencyStats.measure(runner(student_params, student_cfg), runs, warmup, flops(student_cfg, size, size))
    scaling = {"teacher": scaling_exponent(teacher_cfg, sizes), "student": scaling_exponent(student_cfg, sizes)}
    return BenchReport((size, size), t, s, flop_ratio(teacher_cfg, student_cfg, size, size), scaling)
