"""The per-frame SLAM loop, presets and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle_adjust import BaConfig, run_ba
from .dataset import subsample, write_trajectory
from .export import export_map_ply
from .frame import Frame
from .gaussians import GaussianMap, init_map_from_frame
from .geometry import Pose
from .mapping import (GaussianOptimizer, KeyframeCandidate, MappingConfig, expand_gaussians, expansion_mask,
                      keyframe_probabilities, map_update, sample_keyframes)
from .metrics import (metric_ate, metric_depth_rmse, metric_normal_error, metric_psnr, metric_ssim, serializable,
                      trajectory_extent)
from .rasterizer import RenderSettings, render
from .tracking import TrackerState, TrackingConfig, track_frame

log = logging.getLogger(__name__)

# Per-preset values: resolution divisor, tracking iterations, mapping iterations,
# mapping period, candidate period k and current-frame probability p_c.
PRESETS = {
    "base": dict(divisor=1, track_iters=15, map_iters=15, map_period=1, k=8, p_c=0.1),
    "small": dict(divisor=2, track_iters=10, map_iters=10, map_period=2, k=4, p_c=0.5),
    "tiny": dict(divisor=4, track_iters=8, map_iters=8, map_period=2, k=4, p_c=0.5),
}

# Mapped surfels settle at a silhouette of roughly 0.9-0.97; see TrackingConfig for the stricter library default.
PIPELINE_SILHOUETTE_THRESHOLD = 0.9


@dataclass
class SlamConfig:
    preset: str = "base"
    divisor: int = 1
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    ba: BaConfig = field(default_factory=BaConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    seed: int = 0
    holdout_every: int = 8  # 0 disables the held-out split
    holdout_offset: int = 5
    max_frames: int | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if self.divisor < 1:
            raise ValueError("divisor must be >= 1")

    @classmethod
    def from_preset(cls, name: str = "base", overrides: dict | list | None = None, **kwargs) -> SlamConfig:
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        p = PRESETS[name]
        tracking = TrackingConfig(iters=p["track_iters"], silhouette_threshold=PIPELINE_SILHOUETTE_THRESHOLD)
        mapping = MappingConfig(iters=p["map_iters"], period=p["map_period"], k=p["k"], p_c=p["p_c"],
                                init_stride=max(1, 2 // p["divisor"]))
        cfg = cls(preset=name, divisor=p["divisor"], tracking=tracking, mapping=mapping, **kwargs)
        if overrides:
            cfg.apply_overrides(overrides)
        return cfg

    def apply_overrides(self, overrides: dict | list) -> None:
        """Set fields by dotted path, e.g. ``{"mapping.iters": 20}`` or ``["ba.enabled=false"]``."""
        items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
        for key, value in items:
            *parents, leaf = key.split(".")
            obj = self
            for name in parents:
                if not dataclasses.is_dataclass(obj) or not hasattr(obj, name):
                    raise ValueError(f"unknown config key {key!r}")
                obj = getattr(obj, name)
            if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            setattr(obj, leaf, value)
            if hasattr(obj, "__post_init__"):
                obj.__post_init__()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_override(text: str) -> tuple[str, object]:
    """``"a.b=3"`` -> ``("a.b", 3)``; values are parsed as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    low = raw.strip().lower()
    if low in ("true", "false"):
        return key.strip(), low == "true"
    if low in ("none", "null"):
        return key.strip(), None
    try:
        return key.strip(), json.loads(raw)
    except json.JSONDecodeError:
        return key.strip(), raw


class EventLog:
    """JSON-lines event sink; ``path=None`` keeps records in memory only."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w") if path is not None else None

    def __call__(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, default=_json_default) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


@dataclass
class SlamResult:
    config: SlamConfig
    indices: list[int]
    trajectory: list[Pose]
    gmap: GaussianMap
    gt_trajectory: list[Pose | None]
    heldout: list[int]
    diagnostics: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def save(self, out_dir) -> Path:
        """Write ``trajectory.txt``, ``metrics.json`` and ``map.ply`` into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory(out / "trajectory.txt", self.trajectory, self.indices)
        (out / "metrics.json").write_text(json.dumps(self.metrics, indent=2, sort_keys=True) + "\n")
        export_map_ply(self.gmap, out / "map.ply")
        return out


def is_heldout(i: int, config: SlamConfig) -> bool:
    return config.holdout_every > 0 and i % config.holdout_every == config.holdout_offset


def _candidate(frame: Frame, pose: Pose) -> KeyframeCandidate:
    return KeyframeCandidate(frame.index, pose, frame)


def run_slam(dataset, config: SlamConfig | None = None, out_dir=None) -> SlamResult:
    """Track, map and (periodically) bundle-adjust every frame of ``dataset``.

    ``dataset`` is indexable and yields :class:`Frame` objects at full
    resolution; it is subsampled here by ``config.divisor``. With ``out_dir``
    the JSON-lines event log is written there as it runs and the result
    artifacts at the end.
    """
    config = config or SlamConfig.from_preset("base")
    if getattr(dataset, "divisor", 1) != 1:
        raise ValueError("pass a full-resolution dataset; the divisor comes from the config")
    n = len(dataset) if config.max_frames is None else min(len(dataset), config.max_frames)
    if n == 0:
        raise ValueError("empty dataset")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    events = EventLog(Path(out_dir) / "run.log.jsonl" if out_dir is not None else None)
    try:
        result = _run(dataset, n, config, events)
    finally:
        events.close()
    if out_dir is not None:
        result.save(out_dir)
    return result


def _frame(dataset, i: int, divisor: int) -> Frame:
    return subsample(dataset[i], divisor)


def _run(dataset, n: int, config: SlamConfig, events: EventLog) -> SlamResult:
    t_start = time.perf_counter()
    mc, settings = config.mapping, config.render
    rng = np.random.default_rng(config.seed)
    events("config", config=config.to_dict())

    frame0 = _frame(dataset, 0, config.divisor)
    pose0 = frame0.gt_pose if frame0.gt_pose is not None else Pose()
    valid0 = frame0.valid_depth
    if not valid0.any():
        raise ValueError(f"frame {frame0.index}: no valid depth")
    scene_scale = float(np.median(frame0.depth[valid0]))

    gmap = init_map_from_frame(frame0, pose0, stride=mc.init_stride)
    map_opt = GaussianOptimizer(mc, scene_scale)
    candidates = [_candidate(frame0, pose0)]
    res = map_update(gmap, candidates, mc, map_opt, iters=mc.first_frame_iters, settings=settings,
                     scene_scale=scene_scale)
    events("init", frame=frame0.index, gaussians=len(gmap), scene_scale=scene_scale, mapping=res.to_dict())

    state = TrackerState(config.tracking, scene_scale)
    state.push(pose0)
    trajectory, indices, frames_gt = [pose0], [frame0.index], [frame0.gt_pose]
    heldout_frames: list[tuple[int, Frame]] = []
    diagnostics: list[dict] = []
    tracked = 0
    for i in range(1, n):
        frame = _frame(dataset, i, config.divisor)
        tr = track_frame(gmap, frame, state, settings)
        pose = tr.pose
        tracked += 1
        diag = {"frame": frame.index, "tracking": tr.to_dict()}
        events("track", frame=frame.index, **tr.to_dict())
        if tr.diverged:
            log.warning("frame %d: %s; keeping the initial pose", frame.index, tr.error)
        trajectory.append(pose)
        indices.append(frame.index)
        frames_gt.append(frame.gt_pose)
        if is_heldout(i, config):
            heldout_frames.append((len(trajectory) - 1, frame))
            diagnostics.append(diag)
            continue

        if i % mc.k == 0:
            out = render(gmap, frame.intrinsics, pose, settings)
            added = expand_gaussians(gmap, frame, pose, expansion_mask(out, frame, mc.rho_e, mc.depth_margin),
                                     stride=mc.init_stride)
            candidates.append(_candidate(frame, pose))
            diag["expanded"] = added
            events("expand", frame=frame.index, added=added, gaussians=len(gmap))

        if i % mc.period == 0:
            others = [c for c in candidates if c.frame_index != frame.index]
            probs = keyframe_probabilities(others, pose, frame.index, mc.s, mc.p_c, mc.k)
            batch = sample_keyframes(others, probs, mc.n_keyframes, rng) + [_candidate(frame, pose)]
            res = map_update(gmap, batch, mc, map_opt, settings=settings, scene_scale=scene_scale)
            diag["mapping"] = res.to_dict()
            events("map", frame=frame.index, keyframes=[c.frame_index for c in batch],
                   probabilities=[float(p) for p in probs], **res.to_dict())

        if config.ba.enabled and tracked % config.ba.period == 0 and len(candidates) >= 2:
            ba = run_ba(gmap, candidates, config.ba, mc, config.tracking, int(rng.integers(2**31)), scene_scale,
                        anchor_index=frame0.index, settings=settings)
            pos_of = {idx: k for k, idx in enumerate(indices)}
            for idx, p in ba.poses.items():
                trajectory[pos_of[idx]] = p
            diag["ba"] = ba.to_dict()
            events("ba", frame=frame.index, **ba.to_dict())
        diagnostics.append(diag)

    runtime = time.perf_counter() - t_start
    metrics = evaluate(gmap, trajectory, frames_gt, heldout_frames, config, scene_scale)
    metrics["n_gaussians"] = len(gmap)
    events("done", metrics=metrics, runtime_s=runtime)
    return SlamResult(config, indices, trajectory, gmap, frames_gt, [f.index for _, f in heldout_frames],
                      diagnostics, metrics, runtime)


def evaluate(gmap: GaussianMap, trajectory: list[Pose], gt: list[Pose | None], heldout: list[tuple[int, Frame]],
             config: SlamConfig, scene_scale: float) -> dict:
    """ATE over every frame with ground truth; rendering metrics on the held-out frames."""
    metrics: dict = {"n_frames": len(trajectory), "n_eval_frames": len(heldout), "preset": config.preset}
    have = [k for k, g in enumerate(gt) if g is not None]
    if len(have) >= 2:
        est = [trajectory[k] for k in have]
        ref = [gt[k] for k in have]
        metrics["ate_mm"] = metric_ate(est, ref, align=True)
        metrics["trajectory_extent_mm"] = 1000.0 * trajectory_extent(ref)
    else:
        metrics["ate_mm"] = None
        metrics["trajectory_extent_mm"] = None

    psnrs, ssims, d_r, d_g, d_m, depths, n_err = [], [], [], [], [], [], []
    for k, frame in heldout:
        out = render(gmap, frame.intrinsics, trajectory[k], config.render)
        psnrs.append(metric_psnr(np.clip(out.color, 0, 1), frame.color))
        ssims.append(metric_ssim(out.color, frame.color))
        d_r.append(out.depth)
        d_g.append(frame.depth)
        d_m.append(frame.valid_depth)
        depths.append(frame.depth[frame.valid_depth])
        n_err.append(metric_normal_error(out.normal, frame.normals, frame.normal_valid & (out.silhouette > 0.5)))
    if heldout:
        metrics["psnr"] = serializable(float(np.mean(psnrs)))
        metrics["ssim"] = float(np.mean(ssims))
        metrics["depth_rmse_mm"] = metric_depth_rmse(d_r, d_g, d_m)
        metrics["mean_depth_mm"] = 1000.0 * float(np.mean(np.concatenate(depths)))
        metrics["normal_error_deg"] = float(np.mean(n_err))
    else:
        metrics.update(psnr=None, ssim=None, depth_rmse_mm=None, mean_depth_mm=None, normal_error_deg=None)
    metrics["scene_scale_m"] = scene_scale
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in metrics.items()}
