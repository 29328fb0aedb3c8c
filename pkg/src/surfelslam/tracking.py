"""Per-frame camera pose estimation against a frozen map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .frame import Frame
from .gaussians import GaussianMap
from .geometry import Pose, constant_velocity_init, quat_to_rotmat, so3_exp
from .objectives import TRACKING_WEIGHTS, ExposureParams, LossBreakdown, tracking_loss
from .optim import Adam
from .rasterizer import DEFAULT_SETTINGS, RenderSettings, render, render_backward


@dataclass
class TrackingConfig:
    iters: int = 15
    lr_rotation: float = 4e-3
    # metres per unit of scene scale
    lr_translation: float = 4e-3
    lr_exposure: float = 1e-2
    # per-iteration multiplicative learning-rate decay within one frame
    lr_decay: float = 0.85
    # light momentum: with 15 steps per frame, beta1 = 0.9 overshoots and rings
    betas: tuple[float, float] = (0.5, 0.999)
    silhouette_threshold: float = 0.99
    divergence_factor: float = 10.0
    use_p2plane: bool = True
    optimize_exposure: bool = True
    # rotate about a point at the median rendered depth instead of the optical centre
    pivot: bool = True
    # measure depth residuals in units of the scene scale so their weight against
    # the colour term does not depend on whether the scene is 5 cm or 5 m deep
    depth_relative: bool = True


@dataclass
class TrackerState:
    config: TrackingConfig = field(default_factory=TrackingConfig)
    scene_scale: float = 1.0
    prev_poses: list[Pose] = field(default_factory=list)

    def push(self, pose: Pose) -> None:
        self.prev_poses = (self.prev_poses + [pose])[-2:]

    def initial_pose(self) -> Pose:
        if not self.prev_poses:
            raise ValueError("tracking needs at least one prior pose")
        p_prev = self.prev_poses[-1]
        p_prev2 = self.prev_poses[-2] if len(self.prev_poses) > 1 else None
        return constant_velocity_init(p_prev, p_prev2)


@dataclass
class TrackingResult:
    pose: Pose
    exposure: ExposureParams
    loss: LossBreakdown
    init_pose: Pose
    init_loss: float
    diverged: bool = False
    error: str | None = None
    history: list[float] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_dict(),
            "init_loss": self.init_loss,
            "diverged": self.diverged,
            "error": self.error,
            "exposure": [self.exposure.a, self.exposure.b],
            "history": self.history,
        }


def body_step(pose: Pose, dtheta, dt, pivot) -> Pose:
    """Move the camera by a body-frame rotation about ``pivot`` plus a body-frame translation."""
    q = so3_exp(dtheta)
    t = pivot - quat_to_rotmat(q) @ pivot + dt
    return pose.compose(Pose(q, t))


def body_gradients(pose: Pose, g_rot, g_trans, pivot):
    """Map (right-tangent, world-translation) gradients onto :func:`body_step` coordinates."""
    h = pose.rotation_matrix.T @ g_trans
    return g_rot + np.cross(h, pivot), h


def track_frame(gmap: GaussianMap, frame: Frame, state: TrackerState, settings: RenderSettings = DEFAULT_SETTINGS,
                init_pose: Pose | None = None, update_state: bool = True) -> TrackingResult:
    """Optimise the camera pose of ``frame`` with the map frozen.

    Runs ``iters`` optimiser steps and evaluates the final iterate too; the
    lowest-loss iterate is returned.
    """
    if len(gmap) == 0:
        raise ValueError("empty scene")
    cfg = state.config
    intr = frame.intrinsics
    pose0 = state.initial_pose() if init_pose is None else init_pose
    weights = TRACKING_WEIGHTS if cfg.use_p2plane else replace(TRACKING_WEIGHTS, p2plane=0.0)
    if cfg.depth_relative:
        weights = weights.depth_relative(state.scene_scale)
    opt = Adam({"rot": cfg.lr_rotation, "trans": cfg.lr_translation * state.scene_scale, "exp": cfg.lr_exposure},
               betas=cfg.betas)

    pose, exposure = pose0, ExposureParams()
    pivot = np.zeros(3)
    best = None
    init_loss = math.nan
    history: list[float] = []
    best_history: list[float] = []
    error = None
    for it in range(cfg.iters + 1):
        out = render(gmap, intr, pose, settings)
        try:
            res = tracking_loss(out, frame, exposure if cfg.optimize_exposure else None,
                                cfg.silhouette_threshold, weights)
        except ValueError as exc:
            error = str(exc)
            break
        total = res.breakdown.total
        history.append(total)
        if it == 0:
            init_loss = total
            if cfg.pivot:
                pivot = np.array([0.0, 0.0, float(np.median(out.depth[res.breakdown.pixel_mask]))])
        if not math.isfinite(total) or total > cfg.divergence_factor * init_loss:
            error = "tracking diverged"
            break
        if best is None or total < best[0]:
            best = (total, pose, ExposureParams(exposure.a, exposure.b), res.breakdown)
        best_history.append(best[0])
        if it == cfg.iters:
            break
        grads = render_backward(gmap, intr, pose, out, res.adjoints, pose_grad=True)
        g_rot, g_trans = body_gradients(pose, grads.pose_rotation, grads.pose_translation, pivot)
        step = {"rot": g_rot, "trans": g_trans}
        if cfg.optimize_exposure:
            step["exp"] = res.exposure_grad
        upd = opt.step(step, lr_scale=cfg.lr_decay**it)
        pose = body_step(pose, upd["rot"], upd["trans"], pivot)
        if cfg.optimize_exposure:
            exposure = ExposureParams(exposure.a + upd["exp"][0], exposure.b + upd["exp"][1])

    if error is not None and (best is None or error == "tracking diverged"):
        result = TrackingResult(pose0, ExposureParams(), LossBreakdown(total=init_loss), pose0, init_loss,
                                diverged=True, error=error, history=history, best_history=best_history)
    else:
        total, pose_best, exp_best, breakdown = best
        result = TrackingResult(pose_best, exp_best, breakdown, pose0, init_loss, history=history,
                                best_history=best_history)
    if update_state:
        state.push(result.pose)
    return result
