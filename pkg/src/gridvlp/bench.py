"""Latency benchmark: grid path vs region path, and full forward across image sizes."""

from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import generate_scene
from .fusion import FusionConfig
from .model import GridVLP
from .regions import ObjectnessHead, make_anchors, nms, roi_pool
from .tasks import IGNORE, PretrainBatch
from .text import tokenize, Vocabulary, RESERVED
from .vision import CnnEncoder, GridProjector, STRIDE, encode_grid, flatten_and_project, resize_image

MIN_REPS = 20
MIN_WARMUP = 3


@dataclass
class BenchRow:
    depth: int
    size: tuple[int, int]
    path: str                       # grid | region | full
    n_tokens: int
    stages: dict[str, tuple[float, float]]   # stage -> (mean ms, std ms)
    total: tuple[float, float]
    reps: int

    @property
    def size_str(self) -> str:
        return f"{self.size[0]}x{self.size[1]}"


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    reps: int = MIN_REPS
    warmup: int = MIN_WARMUP

    def find(self, path: str, size: tuple[int, int], depth: Optional[int] = None) -> BenchRow:
        for r in self.rows:
            if r.path == path and r.size == tuple(size) and (depth is None or r.depth == depth):
                return r
        raise KeyError((path, size, depth))

    def region_grid_ratios(self) -> dict[tuple[int, tuple[int, int]], float]:
        out = {}
        for r in self.rows:
            if r.path == "grid":
                region = self.find("region", r.size, r.depth)
                out[(r.depth, r.size)] = region.total[0] / r.total[0]
        return out

    def speedup(self, small: tuple[int, int], large: tuple[int, int]) -> float:
        return self.find("full", large).total[0] / self.find("full", small).total[0]

    def markdown(self) -> str:
        lines = [f"Timings in ms, mean ± std over {self.reps} runs after {self.warmup} warmup runs.", "",
                 "| depth | size | path | tokens | total | stages |",
                 "|---|---|---|---|---|---|"]
        for r in self.rows:
            stages = ", ".join(f"{k} {m:.3f}±{s:.3f}" for k, (m, s) in r.stages.items())
            lines.append(f"| {r.depth} | {r.size_str} | {r.path} | {r.n_tokens} | "
                         f"{r.total[0]:.3f} ± {r.total[1]:.3f} | {stages} |")
        ratios = self.region_grid_ratios()
        if ratios:
            lines += ["", "| depth | size | region/grid |", "|---|---|---|"]
            lines += [f"| {d} | {s[0]}x{s[1]} | {v:.2f} |" for (d, s), v in ratios.items()]
        full = [r for r in self.rows if r.path == "full"]
        if len(full) >= 2:
            base = max(full, key=lambda r: r.size[0] * r.size[1])
            lines += ["", f"| size | full forward speedup vs {base.size_str} |", "|---|---|"]
            lines += [f"| {r.size_str} | {base.total[0] / r.total[0]:.2f}x |" for r in full]
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["depth", "size", "path", "n_tokens", "stage", "mean_ms", "std_ms", "reps"])
        for r in self.rows:
            for name, (m, s) in list(r.stages.items()) + [("total", r.total)]:
                w.writerow([r.depth, r.size_str, r.path, r.n_tokens, name, f"{m:.6f}", f"{s:.6f}", r.reps])
        return buf.getvalue()


Stages = Sequence[tuple[str, Callable]]
Timing = tuple[dict[str, tuple[float, float]], tuple[float, float]]


def _run_chain(stages: Stages, out: Optional[np.ndarray]) -> None:
    x = None
    for j, (_, fn) in enumerate(stages):
        t0 = time.perf_counter()
        x = fn(x)
        if out is not None:
            out[j] = (time.perf_counter() - t0) * 1e3


def time_interleaved(chains: Sequence[Stages], reps: int = MIN_REPS,
                     warmup: int = MIN_WARMUP) -> list[Timing]:
    """Time several stage chains round-robin, one run of each chain per repetition.

    Each stage receives the previous stage's output. Interleaving spreads slow
    drifts in machine load evenly over all chains, so ratios between them are
    stable. The garbage collector is paused while timing, as ``timeit`` does.
    Returns, per chain, per-stage and total (mean, std) in milliseconds.
    """
    if reps < MIN_REPS or warmup < MIN_WARMUP:
        raise ValueError(f"need at least {MIN_REPS} reps and {MIN_WARMUP} warmup runs")
    samples = [np.zeros((reps, len(c))) for c in chains]
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for it in range(warmup + reps):
            for c, chain in enumerate(chains):
                _run_chain(chain, samples[c][it - warmup] if it >= warmup else None)
    finally:
        if gc_was_on:
            gc.enable()
    results = []
    for chain, s in zip(chains, samples):
        per = {name: (float(s[:, j].mean()), float(s[:, j].std(ddof=1)))
               for j, (name, _) in enumerate(chain)}
        tot = s.sum(axis=1)
        results.append((per, (float(tot.mean()), float(tot.std(ddof=1)))))
    return results


def time_stages(stages: Stages, reps: int = MIN_REPS, warmup: int = MIN_WARMUP) -> Timing:
    """Time a single stage chain; see :func:`time_interleaved`."""
    return time_interleaved([stages], reps, warmup)[0]


def bench_image(h: int, w: int, seed: int = 0) -> np.ndarray:
    """A rendered scene at twice the target size, so resizing lands exactly on (h, w)."""
    rng = np.random.default_rng([seed, 77, h, w])
    return generate_scene(rng, 2 * h, 2 * w)[1]


def region_boxes(fmap: np.ndarray, scorer: ObjectnessHead, n_regions: int,
                 nms_iou: float = 0.7) -> np.ndarray:
    """Exactly ``n_regions`` boxes: NMS survivors first, then the suppressed anchors by
    score, cycling when the map has fewer anchors than requested."""
    _, h, w = fmap.shape
    anchors = make_anchors(h, w)
    scores = scorer(fmap)
    keep = nms(anchors, scores, nms_iou, max_keep=n_regions)
    if len(keep) < n_regions:
        rest = np.setdiff1d(np.argsort(-scores, kind="stable"), keep, assume_unique=True)
        order = np.concatenate([keep, rest[np.argsort(-scores[rest], kind="stable")]])
        keep = np.resize(order, n_regions)
    return anchors[keep]


def run_bench(sizes: Sequence[tuple[int, int]] = ((64, 64), (64, 96), (96, 160)),
              depths: Sequence[int] = (1, 2, 3), reps: int = MIN_REPS, warmup: int = MIN_WARMUP,
              n_regions: int = 100, channels: Sequence[int] = (16, 32, 64, 96, 128),
              fusion: Optional[FusionConfig] = None, full_depth: Optional[int] = None,
              seed: int = 0, progress: Optional[Callable[[BenchRow], None]] = None) -> BenchReport:
    """Grid and region paths for every (depth, size); full forward for every size."""
    for h, w in sizes:
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"bench size {h}x{w} is not a multiple of {STRIDE}")
    fusion = fusion or FusionConfig()
    full_depth = full_depth if full_depth is not None else depths[0]
    report = BenchReport(reps=reps, warmup=warmup)

    def add(row: BenchRow):
        report.rows.append(row)
        if progress:
            progress(row)

    pending: list[tuple[tuple, Stages]] = []   # (row key, stage chain)
    for depth in depths:
        rng = np.random.default_rng([seed, 31, depth])
        cnn = CnnEncoder(channels, rng, blocks_per_stage=depth).freeze()
        proj = GridProjector(cnn.out_channels, fusion.width, rng)
        scorer = ObjectnessHead(cnn.out_channels, rng)
        for h, w in sizes:
            img = bench_image(h, w, seed)
            resize = partial(_resize, img, h, w)
            encode = partial(_encode, cnn)
            grid_stages = [("resize", resize), ("encode", encode),
                           ("flatten_project", partial(_flat_proj, proj))]
            region_stages = [("resize", resize), ("encode", encode),
                             ("propose", partial(_propose, scorer, n_regions)),
                             ("roi_pool", _pool), ("project", proj)]
            pending.append(((depth, (h, w), "grid", (h // STRIDE) * (w // STRIDE)), grid_stages))
            pending.append(((depth, (h, w), "region", n_regions), region_stages))

    # full single-sample forward: image -> grids -> fusion encoder -> task heads
    rng = np.random.default_rng([seed, 31, full_depth])
    cnn = CnnEncoder(channels, rng, blocks_per_stage=full_depth).freeze()
    vocab = Vocabulary(list(RESERVED) + ["there", "is", "a", "red", "circle"])
    model = GridVLP(len(vocab), 9, cnn.out_channels, fusion, seed=seed)
    model.eval()
    seq = tokenize("there is a red circle", vocab, fusion.max_text_len)
    for h, w in sizes:
        img = bench_image(h, w, seed)
        stages = [("resize", partial(_resize, img, h, w)), ("encode", partial(_encode, cnn)),
                  ("fuse_heads", partial(_fuse_heads, model, seq.ids[None], seq.valid[None]))]
        pending.append(((full_depth, (h, w), "full", (h // STRIDE) * (w // STRIDE)), stages))

    # Chains sharing a backbone depth are interleaved with each other; the full
    # forward rows are interleaved across sizes so the speedup compares like with like.
    groups: dict = {}
    for key, chain in pending:
        groups.setdefault((key[2] == "full", key[0]), []).append((key, chain))
    with threadpool_limits(limits=1):
        for members in groups.values():
            timings = time_interleaved([c for _, c in members], reps, warmup)
            for (key, _), (per, tot) in zip(members, timings):
                add(BenchRow(*key, per, tot, reps))
    return report


def _resize(img: np.ndarray, h: int, w: int, _=None) -> np.ndarray:
    return resize_image(img, min(h, w), max(h, w))


def _encode(cnn: CnnEncoder, x: np.ndarray) -> np.ndarray:
    return encode_grid(x, cnn)


def _flat_proj(proj: GridProjector, fmap: np.ndarray):
    return flatten_and_project(fmap, proj)


def _propose(scorer: ObjectnessHead, n_regions: int, fmap: np.ndarray):
    return fmap, region_boxes(fmap, scorer, n_regions)


def _pool(fmap_boxes):
    return roi_pool(*fmap_boxes)


def _fuse_heads(model: GridVLP, ids: np.ndarray, valid: np.ndarray, fmap: np.ndarray):
    feats = np.moveaxis(fmap.reshape(fmap.shape[0], -1), 0, 1)[None]
    n = feats.shape[1]
    batch = PretrainBatch(ids, valid, feats, np.ones((1, n), bool),
                          np.zeros((1, n, 2), np.int64), np.ones(1, np.int64),
                          np.full(ids.shape, IGNORE), np.full(1, IGNORE), np.zeros(1, bool))
    return model.outputs(batch)
