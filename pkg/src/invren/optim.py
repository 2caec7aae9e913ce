"""Adam optimizer and the two-phase training loops.

Phase one fits vertex positions to silhouettes through the soft rasterizer;
phase two freezes the mesh and fits texture and envmap logits to RGB renders
through path replay. Both loops are sequential (step t+1 depends on t) and
draw their per-iteration randomness from seeded generators, so a run is
reproducible bit for bit regardless of renderer thread count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, OptimError
from .geomcore import TriMesh, build_laplacian, save_obj
from .losses import (
    GeoLossWeights,
    RefLossWeights,
    geometry_loss,
    reflectance_loss,
)
from .metrics import evaluate_views
from .pbrt import Bvh, RenderConfig, build_bvh, render, render_backward
from .scene import (
    Camera,
    SceneParams,
    apply_logits,
    downsample_image,
    save_pfm,
    scene_to_logits,
)
from .softras import SoftRasterConfig, soft_silhouette, soft_silhouette_backward

GEOMETRY_LR = 1e-3
REFLECTANCE_LR = 1e-4


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for named parameter blocks."""

    lr: float
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: dict[str, np.ndarray], lr: float) -> "AdamState":
        if lr <= 0.0 or not math.isfinite(lr):
            raise ConfigError(f"learning rate must be positive, got {lr}")
        return AdamState(
            lr,
            {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns fresh parameter arrays.

    The update is lr * m_hat / (sqrt(v_hat) + eps), so for fixed gradients
    and accumulators it is exactly linear in lr. Accumulators are updated in
    place and the step counter increments once per call.
    """
    if set(params) != set(grads):
        raise ConfigError(
            f"gradient blocks {sorted(grads)} do not match "
            f"parameter blocks {sorted(params)}"
        )
    if set(params) != set(state.m):
        raise ConfigError(
            f"optimizer state holds blocks {sorted(state.m)}, "
            f"expected {sorted(params)}"
        )
    state.t += 1
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match block "
                f"'{name}' shape {p.shape}"
            )
        bad = ~np.isfinite(g)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise OptimError(f"non-finite gradient in block '{name}' at index {idx}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out[name] = p - state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# schedules and history
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    """Iteration budget and view-sampling policy for one phase.

    Total iterations = iterations_per_view * view count. Each iteration draws
    views_per_iteration distinct views, uniformly by default or cycling in
    order when round_robin is set. The reflectance phase only supports
    single-view batches (its smoothness prior is view-independent).
    """

    iterations_per_view: int
    views_per_iteration: int = 1
    seed: int = 0
    round_robin: bool = False

    def validate(self) -> None:
        if self.iterations_per_view < 0:
            raise ConfigError(
                f"iterations_per_view must be >= 0, got {self.iterations_per_view}"
            )
        if self.views_per_iteration < 1:
            raise ConfigError(
                f"views_per_iteration must be >= 1, got {self.views_per_iteration}"
            )


def _iteration_seed(seed: int, iteration: int) -> int:
    # decorrelates MC noise across steps while staying reproducible
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _pick_views(
    rng: np.random.Generator, iteration: int, n_views: int, sched: Schedule
) -> list[int]:
    k = sched.views_per_iteration
    if k > n_views:
        raise ConfigError(f"views_per_iteration {k} exceeds view count {n_views}")
    if sched.round_robin:
        start = (iteration * k) % n_views
        return [(start + j) % n_views for j in range(k)]
    return [int(i) for i in rng.choice(n_views, size=k, replace=False)]


def _record(
    iteration: int, phase: str, views: list[int], total: float, terms: dict[str, float]
) -> dict:
    row = {
        "iteration": iteration,
        "phase": phase,
        "view_index": views[0] if len(views) == 1 else -1,
        "total": total,
    }
    row.update(terms)
    return row


_CSV_BASE = ["iteration", "phase", "view_index", "total"]


def write_history_csv(history: list[dict], path: str) -> None:
    """Loss record as CSV; floats via repr so values round-trip exactly."""
    term_cols: list[str] = []
    for row in history:
        for key in row:
            if key not in _CSV_BASE and key not in term_cols:
                term_cols.append(key)
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_BASE + term_cols)
        for row in history:
            out = [row["iteration"], row["phase"], row["view_index"], repr(row["total"])]
            out += [repr(row[c]) if c in row else "" for c in term_cols]
            writer.writerow(out)


def _check_history(history: list[dict], phase: str) -> None:
    for row in history:
        if not math.isfinite(row["total"]):
            raise OptimError(
                f"non-finite {phase} loss at iteration {row['iteration']}"
            )


# ---------------------------------------------------------------------------
# phase one: geometry from silhouettes
# ---------------------------------------------------------------------------


def optimize_geometry(
    scene: SceneParams,
    views: list[tuple[Camera, np.ndarray]],
    schedule: Schedule | None = None,
    weights: GeoLossWeights | None = None,
    sigma: float = 1e-4,
    cutoff: float = 40.0,
) -> tuple[TriMesh, list[dict]]:
    """Fit vertex positions to ground-truth silhouettes.

    views pairs each camera with its target mask at full camera resolution.
    The input mesh arrays are never written; the final mesh is a fresh object
    and is also assigned into scene.mesh. Textures and envmap are untouched.
    """
    sched = schedule if schedule is not None else Schedule(200)
    sched.validate()
    if not views:
        raise ConfigError("geometry phase needs at least one view")
    cfgs = []
    for i, (cam, mask) in enumerate(views):
        if mask.shape != (cam.height, cam.width):
            raise ConfigError(
                f"view {i}: mask shape {mask.shape} does not match camera "
                f"{cam.height}x{cam.width}"
            )
        cfgs.append(SoftRasterConfig(cam.width, cam.height, sigma=sigma, cutoff=cutoff))

    mesh = scene.mesh
    laplacian = build_laplacian(mesh)  # topology is fixed, build once
    params = {"vertices": mesh.vertices.copy()}
    state = AdamState.for_params(params, GEOMETRY_LR)
    rng = np.random.default_rng(sched.seed)
    history: list[dict] = []

    for it in range(sched.iterations_per_view * len(views)):
        sel = _pick_views(rng, it, len(views), sched)
        preds = [soft_silhouette(mesh, views[i][0], cfgs[i]) for i in sel]
        gts = [views[i][1] for i in sel]
        total, vgrad, pixel_grads, terms = geometry_loss(
            mesh, laplacian, preds, gts, weights
        )
        if not math.isfinite(total):
            raise OptimError(f"non-finite geometry loss at iteration {it}")
        for i, pg in zip(sel, pixel_grads):
            vgrad = vgrad + soft_silhouette_backward(mesh, views[i][0], cfgs[i], pg)
        params = adam_step(params, {"vertices": vgrad}, state)
        mesh = TriMesh(params["vertices"], mesh.faces, mesh.uvs, mesh.vertex_colors)
        history.append(_record(it, "geometry", sel, total, terms))

    scene.mesh = mesh
    return mesh, history


# ---------------------------------------------------------------------------
# phase two: reflectance from renders
# ---------------------------------------------------------------------------


def optimize_reflectance(
    scene: SceneParams,
    views: list[tuple[Camera, np.ndarray]],
    cfg: RenderConfig | None = None,
    schedule: Schedule | None = None,
    weights: RefLossWeights | None = None,
) -> tuple[SceneParams, list[dict]]:
    """Fit texture and envmap logits to ground-truth RGB images.

    views pairs each camera with its target image at full camera resolution;
    training renders run at that resolution divided by cfg.downsample, with
    targets box-averaged to match. Each iteration re-renders one view with a
    seed hashed from (schedule.seed, iteration), so the backward replay sees
    exactly the forward paths. Geometry is frozen: the BVH is built once and
    vertices are never written.
    """
    cfg = cfg if cfg is not None else RenderConfig()
    cfg.validate()
    sched = schedule if schedule is not None else Schedule(400)
    sched.validate()
    if sched.views_per_iteration != 1:
        raise ConfigError("reflectance batches are single-view")
    if not views:
        raise ConfigError("reflectance phase needs at least one view")
    scene.validate()
    for i, (cam, img) in enumerate(views):
        if img.shape != (cam.height, cam.width, 3):
            raise ConfigError(
                f"view {i}: image shape {img.shape} does not match camera "
                f"{cam.height}x{cam.width}x3"
            )

    cams = [cam.downsampled(cfg.downsample) for cam, _ in views]
    gts = [downsample_image(img, cfg.downsample) for _, img in views]
    bvh = build_bvh(scene.mesh)
    logits = scene_to_logits(scene)
    state = AdamState.for_params(logits, REFLECTANCE_LR)
    rng = np.random.default_rng(sched.seed)
    history: list[dict] = []

    for it in range(sched.iterations_per_view * len(views)):
        i = _pick_views(rng, it, len(views), sched)[0]
        it_cfg = replace(cfg, seed=_iteration_seed(sched.seed, it))
        pred = render(scene, cams[i], it_cfg, bvh)
        total, grads, terms = reflectance_loss(
            pred, gts[i], scene.diffuse.data, scene.specular.data, weights
        )
        if not math.isfinite(total):
            raise OptimError(f"non-finite reflectance loss at iteration {it}")
        back = render_backward(scene, cams[i], it_cfg, grads["image"], bvh)
        d = scene.diffuse.data
        s = scene.specular.data
        logit_grads = {
            "diffuse": back["diffuse"] + grads["diffuse"] * d * (1.0 - d),
            "specular": back["specular"] + grads["specular"] * s * (1.0 - s),
            "roughness": back["roughness"][:, :, 0],
            "envmap": back["envmap"],
        }
        logits = adam_step(logits, logit_grads, state)
        apply_logits(scene, logits)
        history.append(_record(it, "reflectance", [i], total, terms))

    return scene, history


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class PipelineConfig:
    """Assembled inputs for run_pipeline; file handling lives in the CLI."""

    scene: SceneParams
    train_cameras: list[Camera]
    train_masks: list[np.ndarray]
    train_images: list[np.ndarray]
    heldout_cameras: list[Camera] = field(default_factory=list)
    heldout_images: list[np.ndarray] = field(default_factory=list)
    out_dir: str = "."
    run_geometry: bool = True
    run_reflectance: bool = True
    geo_schedule: Schedule | None = None
    ref_schedule: Schedule | None = None
    render_cfg: RenderConfig | None = None
    geo_weights: GeoLossWeights | None = None
    ref_weights: RefLossWeights | None = None
    sigma: float = 1e-4
    eval_spp: int = 64
    eval_seed: int = 101

    def validate(self) -> None:
        n = len(self.train_cameras)
        if n == 0:
            raise ConfigError("pipeline needs at least one training view")
        if self.run_geometry and len(self.train_masks) != n:
            raise ConfigError(
                f"got {len(self.train_masks)} masks for {n} training cameras"
            )
        if self.run_reflectance and len(self.train_images) != n:
            raise ConfigError(
                f"got {len(self.train_images)} images for {n} training cameras"
            )
        if len(self.heldout_cameras) != len(self.heldout_images):
            raise ConfigError(
                f"got {len(self.heldout_images)} images for "
                f"{len(self.heldout_cameras)} held-out cameras"
            )
        if self.eval_spp < 1:
            raise ConfigError(f"eval_spp must be >= 1, got {self.eval_spp}")


def run_pipeline(cfg: PipelineConfig) -> tuple[SceneParams, dict]:
    """Geometry phase, reflectance phase, artifacts, held-out metrics.

    Writes mesh.obj, diffuse/specular/roughness/envmap PFMs, history.csv and
    report.json into cfg.out_dir and returns (final scene, report dict).
    Cross-phase isolation is enforced with content digests: the geometry
    phase must leave reflectance blocks untouched and vice versa.
    """
    cfg.validate()
    scene = cfg.scene
    scene.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    report: dict = {"phases": {}}
    history: list[dict] = []

    tex_digest = _digest(
        scene.diffuse.data,
        scene.specular.data,
        scene.roughness.data,
        scene.envmap.radiance,
    )
    if cfg.run_geometry:
        geo_views = list(zip(cfg.train_cameras, cfg.train_masks))
        try:
            _, geo_hist = optimize_geometry(
                scene, geo_views, cfg.geo_schedule, cfg.geo_weights, cfg.sigma
            )
        except OptimError as err:
            raise OptimError(f"geometry phase: {err}") from err
        _check_history(geo_hist, "geometry")
        history += geo_hist
        report["phases"]["geometry"] = _phase_summary(geo_hist)
        after = _digest(
            scene.diffuse.data,
            scene.specular.data,
            scene.roughness.data,
            scene.envmap.radiance,
        )
        if after != tex_digest:
            raise OptimError("geometry phase mutated reflectance blocks")

    geo_digest = _digest(scene.mesh.vertices, scene.mesh.faces)
    if cfg.run_reflectance:
        ref_views = list(zip(cfg.train_cameras, cfg.train_images))
        try:
            _, ref_hist = optimize_reflectance(
                scene, ref_views, cfg.render_cfg, cfg.ref_schedule, cfg.ref_weights
            )
        except OptimError as err:
            raise OptimError(f"reflectance phase: {err}") from err
        _check_history(ref_hist, "reflectance")
        history += ref_hist
        report["phases"]["reflectance"] = _phase_summary(ref_hist)
        if _digest(scene.mesh.vertices, scene.mesh.faces) != geo_digest:
            raise OptimError("reflectance phase mutated geometry")

    save_obj(scene.mesh, os.path.join(cfg.out_dir, "mesh.obj"))
    save_pfm(os.path.join(cfg.out_dir, "diffuse.pfm"), scene.diffuse.data)
    save_pfm(os.path.join(cfg.out_dir, "specular.pfm"), scene.specular.data)
    save_pfm(os.path.join(cfg.out_dir, "roughness.pfm"), scene.roughness.data)
    save_pfm(os.path.join(cfg.out_dir, "envmap.pfm"), scene.envmap.radiance)
    write_history_csv(history, os.path.join(cfg.out_dir, "history.csv"))

    report["metrics"] = None
    if cfg.heldout_cameras:
        base = cfg.render_cfg if cfg.render_cfg is not None else RenderConfig()
        eval_cfg = replace(base, spp=cfg.eval_spp, seed=cfg.eval_seed)
        bvh = build_bvh(scene.mesh)
        preds = [render(scene, cam, eval_cfg, bvh) for cam in cfg.heldout_cameras]
        report["metrics"] = evaluate_views(preds, cfg.heldout_images).to_dict()

    report["checksums"] = {
        "vertices": _digest(scene.mesh.vertices),
        "diffuse": _digest(scene.diffuse.data),
        "specular": _digest(scene.specular.data),
        "roughness": _digest(scene.roughness.data),
        "envmap": _digest(scene.envmap.radiance),
    }
    report["artifacts"] = {
        "mesh": "mesh.obj",
        "diffuse": "diffuse.pfm",
        "specular": "specular.pfm",
        "roughness": "roughness.pfm",
        "envmap": "envmap.pfm",
        "history": "history.csv",
        "report": "report.json",
    }
    with open(os.path.join(cfg.out_dir, "report.json"), "w", encoding="ascii") as fh:
        json.dump(report, fh, indent=2)
    return scene, report


def _phase_summary(history: list[dict]) -> dict:
    if not history:
        return {"iterations": 0, "initial_total": None, "final_total": None}
    return {
        "iterations": len(history),
        "initial_total": history[0]["total"],
        "final_total": history[-1]["total"],
    }
