"""Equidistant fisheye camera model and the synthetic ball detector.

Projection follows r = f*theta about the principal axis; a ball of physical
radius R at range z images with radius dr = f*R/z (small-ball treatment, so
project/invert round-trips are exact by construction and real-world error is
absorbed by the stated distance tolerance).  The synthetic detector stands in
for a fine-tuned neural detector: it projects the true ball, jitters the box,
and assigns a confidence that falls off toward the image periphery.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import rng as crng
from .config import CameraExtrinsics, VisionConfig


class OutOfView(ValueError):
    """Point lies outside the camera's field of view."""


class DegenerateBox(ValueError):
    """Bounding box too small to invert into a range estimate."""


@dataclass
class FisheyeIntrinsics:
    focal_px: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]
    fov_rad: float

    @classmethod
    def from_config(cls, cfg: VisionConfig) -> "FisheyeIntrinsics":
        fov = np.deg2rad(cfg.fov_deg)
        # image circle: the half-FOV ray lands at the image half-width
        f = cfg.focal_px if cfg.focal_px > 0 else (cfg.image_width / 2.0) / (fov / 2.0)
        return cls(
            focal_px=f,
            principal_point=(cfg.image_width / 2.0, cfg.image_height / 2.0),
            image_size=(cfg.image_width, cfg.image_height),
            fov_rad=fov,
        )


@dataclass
class Detection:
    center: tuple[float, float]
    size: tuple[float, float]
    confidence: float
    camera: str


@dataclass
class BallEstimate:
    position: np.ndarray     # body frame, meters
    camera: str
    confidence: float


@dataclass
class CameraModel:
    """Intrinsics plus pose in the body frame."""

    intr: FisheyeIntrinsics
    rot_cam_to_body: np.ndarray   # (3, 3)
    position: np.ndarray          # (3,)
    name: str

    @classmethod
    def from_config(cls, intr: FisheyeIntrinsics, ext: CameraExtrinsics,
                    name: str) -> "CameraModel":
        z = np.asarray(ext.look_dir, dtype=np.float64)
        z = z / np.linalg.norm(z)
        up = np.array([0.0, 0.0, 1.0])
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.array([1.0, 0.0, 0.0])
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(intr, np.stack([x, y, z], axis=1), np.asarray(ext.position), name)

    def body_to_cam(self, p_body: np.ndarray) -> np.ndarray:
        return (p_body - self.position) @ self.rot_cam_to_body

    def cam_to_body(self, p_cam: np.ndarray) -> np.ndarray:
        return p_cam @ self.rot_cam_to_body.T + self.position


def project_point_to_fisheye(p_cam: np.ndarray, intr: FisheyeIntrinsics,
                             sphere_radius: float = 0.0):
    """Project camera-frame points; returns (pixel, dr) for a sphere of the
    given radius.  Scalar input raises OutOfView past the half-FOV.
    """
    p = np.asarray(p_cam, dtype=np.float64)
    scalar = p.ndim == 1
    pixel, dr, valid = project_points(p.reshape(-1, 3), intr, sphere_radius)
    if scalar:
        if not valid[0]:
            raise OutOfView(f"theta exceeds half-FOV {intr.fov_rad / 2:.3f} rad")
        return pixel[0], float(dr[0])
    return pixel.reshape(*p.shape[:-1], 2), dr.reshape(p.shape[:-1]), valid.reshape(p.shape[:-1])


def project_points(p_cam: np.ndarray, intr: FisheyeIntrinsics,
                   sphere_radius: float = 0.0):
    """Vectorized projection: (pixel (N,2), dr (N,), in_view (N,))."""
    p = np.asarray(p_cam, dtype=np.float64)
    rho = np.linalg.norm(p[..., :2], axis=-1)
    dist = np.linalg.norm(p, axis=-1)
    theta = np.arctan2(rho, p[..., 2])
    valid = (theta <= intr.fov_rad / 2.0) & (dist > 1e-9)
    r = intr.focal_px * theta
    safe = np.maximum(rho, 1e-12)
    px = intr.principal_point[0] + r * p[..., 0] / safe
    py = intr.principal_point[1] + r * p[..., 1] / safe
    dr = intr.focal_px * sphere_radius / np.maximum(dist, 1e-9)
    return np.stack([px, py], axis=-1), dr, valid


def detection_to_ball_position(det: Detection, intr: FisheyeIntrinsics,
                               camera: CameraModel, ball_radius: float) -> BallEstimate:
    """Invert the equidistant model: direction from the pixel offset, range
    from the apparent ball radius, then body frame via extrinsics."""
    dr = (det.size[0] + det.size[1]) / 4.0
    if dr < 1.0:
        raise DegenerateBox(f"apparent radius {dr:.2f} px below 1 px")
    dx = det.center[0] - intr.principal_point[0]
    dy = det.center[1] - intr.principal_point[1]
    r = np.hypot(dx, dy)
    theta = r / intr.focal_px
    dist = intr.focal_px * ball_radius / dr
    if r < 1e-12:
        dir_cam = np.array([0.0, 0.0, 1.0])
    else:
        st, ct = np.sin(theta), np.cos(theta)
        dir_cam = np.array([st * dx / r, st * dy / r, ct])
    return BallEstimate(camera.cam_to_body(dist * dir_cam), camera.name, det.confidence)


def fuse_detections(front: Detection | None, bottom: Detection | None):
    """Pick the detection with the higher confidence; None when both absent."""
    if front is None:
        return bottom
    if bottom is None:
        return front
    return front if front.confidence >= bottom.confidence else bottom


def synth_detect(ball_body: np.ndarray, camera: CameraModel, cfg: VisionConfig,
                 key: int, step: int, ball_radius: float,
                 drop_prob: float = 0.0) -> Detection | None:
    """Project the true ball and emit a jittered detection, or None when the
    ball is out of view or the frame drops."""
    p_cam = camera.body_to_cam(np.asarray(ball_body, dtype=np.float64))
    pixel, dr, valid = project_points(p_cam.reshape(1, 3), camera.intr, ball_radius)
    if not valid[0] or p_cam[2] <= 0 and dr[0] <= 0:
        return None
    if dr[0] < cfg.min_bbox_px:
        return None
    cam_key = zlib.crc32(camera.name.encode())
    u = crng.keyed_uniform(np.uint64(key), np.uint64(step),
                           crng.CH_DETECT, cam_key, lanes=3)
    if drop_prob > 0.0 and u[2] < drop_prob:
        return None
    jitter = crng.keyed_normal(np.uint64(key), np.uint64(step),
                               crng.CH_DETECT, cam_key + 1, lanes=2)
    cx = float(pixel[0, 0] + cfg.pixel_jitter * jitter[0])
    cy = float(pixel[0, 1] + cfg.pixel_jitter * jitter[1])
    w_px, h_px = camera.intr.image_size
    if not (0.0 <= cx < w_px and 0.0 <= cy < h_px):
        return None
    rho = np.hypot(p_cam[0], p_cam[1])
    theta = float(np.arctan2(rho, p_cam[2]))
    conf = max(0.0, 1.0 - theta / (camera.intr.fov_rad / 2.0)) * (
        1.0 - np.exp(-float(dr[0]) / 5.0)
    )
    size = float(2.0 * dr[0])
    return Detection((cx, cy), (size, size), min(1.0, conf), camera.name)


def write_detections_jsonl(path: str, records) -> None:
    """records: iterable of (t, Detection-or-None, camera_name)."""
    with open(path, "w") as f:
        for t, det, cam in records:
            row = {"t": t, "camera": cam}
            if det is not None:
                row.update(
                    cx=det.center[0], cy=det.center[1],
                    w=det.size[0], h=det.size[1], conf=det.confidence,
                )
            f.write(json.dumps(row) + "\n")


def read_detections_jsonl(path: str):
    """Yields (t, Detection-or-None, camera_name) rows."""
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            det = None
            if "cx" in row:
                det = Detection(
                    (row["cx"], row["cy"]), (row["w"], row["h"]),
                    row["conf"], row["camera"],
                )
            yield row["t"], det, row["camera"]
