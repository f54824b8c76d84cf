"""Deterministic synthetic-frontend emulator.

Renders depth by raycasting a primitive room scene along known camera
trajectories, then corrupts each submap the way a learned reconstruction
frontend would: one invertible gauge per submap (calibration error
delta_k, uniform scale c) applied to the whole local reconstruction, plus
per-frame SE(3) pose noise and per-pixel multiplicative depth noise.

The reported quantities are mutually consistent inside each submap:

    depth_hat = c * depth_true * (1 + eps_pixel)
    K_hat     = K_true @ delta_k
    pose_hat  = nearest-SE(3)( psi @ pose_rel @ psi^-1 ) @ pose_noise

with psi the 4x4 embedding of x -> c * delta_k^-1 x.  Back-projecting
depth_hat through K_hat then reproduces exactly the gauge-warped points,
so consecutive submaps are related by the affine+scale model the backend
estimates.  The first submap is left uncorrupted: its gauge error would
be the global gauge freedom, invisible to any set of relative
measurements, and would only add an arbitrary affine offset to every
evaluated trajectory.

Place descriptors are a deterministic unit-norm function of true position
and heading, so retrieval ground truth is exact.  Verification tokens tie
each subsampled pixel to the 0.5 m voxel its true 3D point falls in;
frames seeing the same surface share latent vectors, unrelated frames do
not.  All randomness flows from one seed through named SeedSequence
streams, so a dataset is byte-reproducible.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import DimensionMismatchError, TrajectoryOutOfBoundsError
from .geometry import nearest_rotation, rotvec_to_matrix
from .retrieval import TokenSet
from .submap import Keyframe, Submap, LOOP_CLOSURE, REGULAR, back_project, pixel_rays

DEFAULT_DIMS = (48, 64)            # (h, w)
TOKEN_STRIDE = 4                   # every 4th pixel becomes a token
TOKEN_CHANNELS = 64
TOKEN_GAIN = 7.0
TOKEN_NOISE = 0.02
VOXEL_SIZE = 0.5
DESC_ANCHOR_STEP = 0.8             # metres between descriptor grid anchors
DESC_SIGMA = 0.7
DESC_POSITION_WEIGHT = 0.75
FRAME_DT = 0.1
LOOP_SUBMAP_BASE_ID = 1000

# named SeedSequence streams
_STREAM_SUBMAP = 2001
_STREAM_POSE = 3001
_STREAM_DEPTH = 4001
_STREAM_TOKEN = 7001
_STREAM_VOXEL = 9001


@dataclass
class SceneSpec:
    """Axis-aligned room with optional sphere and box primitives inside."""

    room: np.ndarray                       # (3,) positive extents, corner at 0
    spheres: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))

    def __post_init__(self):
        self.room = np.asarray(self.room, dtype=np.float64)
        self.spheres = np.asarray(self.spheres, dtype=np.float64).reshape(-1, 4)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 6)
        if self.room.shape != (3,) or np.any(self.room <= 0):
            raise DimensionMismatchError("room extents must be 3 positive values")
        for c in self.spheres:
            if c[3] <= 0 or np.any(c[:3] - c[3] < 0) or np.any(c[:3] + c[3] > self.room):
                raise DimensionMismatchError("sphere must lie inside the room")
        for b in self.boxes:
            if np.any(b[3:] <= b[:3]) or np.any(b[:3] < 0) or np.any(b[3:] > self.room):
                raise DimensionMismatchError("box must lie inside the room")

    def room_bounds(self) -> np.ndarray:
        return np.concatenate([np.zeros(3), self.room])


@dataclass
class NoiseSpec:
    """Per-frame and per-submap corruption magnitudes; all zero = exact."""

    sigma_rot: float = 0.0            # rad, per-frame pose noise
    sigma_trans: float = 0.0          # m
    focal_error_frac: float = 0.0     # per-submap fx/fy relative error
    principal_error_px: float = 0.0   # per-submap cx/cy shift in pixels
    scale_drift: tuple = (1.0, 1.0)   # per-submap uniform scale range
    depth_noise_frac: float = 0.0     # per-pixel multiplicative noise
    outlier_frac: float = 0.0         # fraction of pixels blown up
    projective_eps: float = 0.0       # out-of-model projective-row warp

    def __post_init__(self):
        lo, hi = self.scale_drift
        if lo <= 0 or hi < lo:
            raise DimensionMismatchError("scale_drift must be a positive (lo, hi) range")
        for name in ("sigma_rot", "sigma_trans", "focal_error_frac",
                     "principal_error_px", "depth_noise_frac", "outlier_frac",
                     "projective_eps"):
            if getattr(self, name) < 0:
                raise DimensionMismatchError(f"{name} must be non-negative")
        if self.outlier_frac >= 0.5:
            raise DimensionMismatchError("outlier_frac must stay below 0.5")

    def to_dict(self) -> dict:
        return {
            "sigma_rot": self.sigma_rot,
            "sigma_trans": self.sigma_trans,
            "focal_error_frac": self.focal_error_frac,
            "principal_error_px": self.principal_error_px,
            "scale_drift": list(self.scale_drift),
            "depth_noise_frac": self.depth_noise_frac,
            "outlier_frac": self.outlier_frac,
            "projective_eps": self.projective_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        d = dict(d)
        d["scale_drift"] = tuple(d.get("scale_drift", (1.0, 1.0)))
        return cls(**d)


NOISE_PROFILES = {
    "none": NoiseSpec(),
    "inmodel": NoiseSpec(
        sigma_rot=math.radians(0.2),
        sigma_trans=0.005,
        focal_error_frac=0.05,
        principal_error_px=1.0,
        scale_drift=(0.7, 1.4),
        depth_noise_frac=0.01,
    ),
}


def make_intrinsics(dims=DEFAULT_DIMS, focal: float = 40.0) -> np.ndarray:
    h, w = dims
    return np.array([
        [focal, 0.0, (w - 1) / 2.0],
        [0.0, focal, (h - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])


def camera_pose(position, heading: float) -> np.ndarray:
    """World-from-camera pose, z forward along the horizontal heading, y down."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.array([math.cos(heading), math.sin(heading), 0.0])
    right = np.array([math.sin(heading), -math.cos(heading), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    t = np.eye(4)
    t[:3, 0] = right
    t[:3, 1] = down
    t[:3, 2] = forward
    t[:3, 3] = position
    return t


def render_depth(scene: SceneSpec, pose: np.ndarray, k: np.ndarray,
                 dims=DEFAULT_DIMS) -> np.ndarray:
    """Z-depth per pixel from raycasting; camera must be inside the room."""
    h, w = dims
    position = pose[:3, 3]
    bounds = scene.room_bounds()
    if np.any(position <= bounds[:3]) or np.any(position >= bounds[3:]):
        raise TrajectoryOutOfBoundsError(
            f"camera at {position} is outside the room {scene.room}"
        )
    rays_cam = pixel_rays(k, h, w).reshape(3, -1)        # z component = 1
    dirs = (pose[:3, :3] @ rays_cam).T
    t = kernels.raycast(position, dirs, bounds, scene.spheres, scene.boxes)
    return t.reshape(h, w)


def upper_triangular_error(rand, focal_error_frac: float,
                           principal_error_px: float, focal: float) -> np.ndarray:
    """Draw delta_k so that K_hat = K @ delta_k has the requested errors."""
    d = np.eye(3)
    d[0, 0] = 1.0 + focal_error_frac * (2.0 * rand.random() - 1.0)
    d[1, 1] = 1.0 + focal_error_frac * (2.0 * rand.random() - 1.0)
    d[0, 2] = principal_error_px * (2.0 * rand.random() - 1.0) / focal
    d[1, 2] = principal_error_px * (2.0 * rand.random() - 1.0) / focal
    return d


@dataclass
class SubmapCorruption:
    """One reconstruction gauge: points map through x -> scale * delta_k^-1 x."""

    delta_k: np.ndarray
    scale: float
    v_row: np.ndarray                  # projective stressor, zero when in-model

    @classmethod
    def identity(cls) -> "SubmapCorruption":
        return cls(np.eye(3), 1.0, np.zeros(3))

    @classmethod
    def draw(cls, rand, noise: NoiseSpec, focal: float) -> "SubmapCorruption":
        delta_k = upper_triangular_error(
            rand, noise.focal_error_frac, noise.principal_error_px, focal)
        lo, hi = noise.scale_drift
        scale = lo + (hi - lo) * rand.random()
        v_row = np.zeros(3)
        if noise.projective_eps > 0:
            v = rand.standard_normal(3)
            v_row = noise.projective_eps * v / np.linalg.norm(v)
        return cls(delta_k, scale, v_row)


def corrupt_pose(pose_rel: np.ndarray, corruption: SubmapCorruption,
                 rand=None, sigma_rot: float = 0.0,
                 sigma_trans: float = 0.0) -> np.ndarray:
    """Reported relative pose: gauge-conjugated, re-orthonormalized, noised."""
    rot = pose_rel[:3, :3]
    delta_inv = np.linalg.inv(corruption.delta_k)
    out = np.eye(4)
    out[:3, :3] = nearest_rotation(delta_inv @ rot @ corruption.delta_k)
    out[:3, 3] = corruption.scale * (delta_inv @ pose_rel[:3, 3])
    if rand is not None and (sigma_rot > 0 or sigma_trans > 0):
        noise = np.eye(4)
        noise[:3, :3] = rotvec_to_matrix(sigma_rot * rand.standard_normal(3))
        noise[:3, 3] = sigma_trans * rand.standard_normal(3)
        out = out @ noise
    return out


def corrupt_depth(depth_true: np.ndarray, corruption: SubmapCorruption,
                  k_hat: np.ndarray, rand=None, depth_noise_frac: float = 0.0,
                  outlier_frac: float = 0.0):
    """Reported depth and confidence for one frame under one submap gauge."""
    rel_err = np.zeros_like(depth_true)
    if rand is not None and depth_noise_frac > 0:
        rel_err = depth_noise_frac * rand.standard_normal(depth_true.shape)
    depth = corruption.scale * depth_true * (1.0 + rel_err)
    if rand is not None and outlier_frac > 0:
        outliers = rand.random(depth_true.shape) < outlier_frac
        depth = np.where(outliers, depth * rand.uniform(3.0, 10.0, depth.shape), depth)
        rel_err = np.where(outliers, 9.0, rel_err)
    if np.any(corruption.v_row != 0):
        points = back_project(k_hat, depth)
        denom = 1.0 + np.einsum("i,ihw->hw", corruption.v_row, points)
        depth = depth / denom
    conf = 1.0 / (1.0 + np.abs(rel_err) * 10.0)
    return depth, conf


class DescriptorField:
    """Unit-norm descriptor of true (position, heading) over an anchor grid."""

    def __init__(self, scene: SceneSpec, step: float = DESC_ANCHOR_STEP,
                 sigma: float = DESC_SIGMA):
        xs = np.arange(step / 2.0, scene.room[0], step)
        ys = np.arange(step / 2.0, scene.room[1], step)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        self.anchors = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.sigma = sigma
        self.dim = self.anchors.shape[0] + 2

    def descriptor(self, position, heading: float) -> np.ndarray:
        p = np.asarray(position, dtype=np.float64)[:2]
        d2 = np.sum((self.anchors - p) ** 2, axis=1)
        feats = np.exp(-d2 / (2.0 * self.sigma**2))
        feats = feats / np.linalg.norm(feats)
        head = np.array([math.cos(heading), math.sin(heading)])
        return np.concatenate([
            math.sqrt(DESC_POSITION_WEIGHT) * feats,
            math.sqrt(1.0 - DESC_POSITION_WEIGHT) * head,
        ])


@lru_cache(maxsize=262144)
def _voxel_latent_cached(seed: int, voxel: tuple) -> np.ndarray:
    ss = np.random.SeedSequence((seed, _STREAM_VOXEL) + voxel)
    z = np.random.default_rng(ss).standard_normal(TOKEN_CHANNELS)
    return z / np.linalg.norm(z)


def _voxel_latent(seed: int, voxel: tuple) -> np.ndarray:
    return _voxel_latent_cached(seed, voxel)


def frame_voxels(pose: np.ndarray, depth_true: np.ndarray, k: np.ndarray,
                 stride: int = TOKEN_STRIDE) -> list:
    """Voxel key of each token pixel's true world point, row-major order."""
    h, w = depth_true.shape
    points = back_project(k, depth_true)[:, ::stride, ::stride].reshape(3, -1)
    world = pose[:3, :3] @ points + pose[:3, 3:4]
    idx = np.floor(world / VOXEL_SIZE).astype(np.int64)
    # raycast hits stay inside the room, so indices are non-negative
    idx = np.maximum(idx, 0)
    return [tuple(v) for v in idx.T]


def frame_tokens(seed: int, frame_id: int, pose: np.ndarray,
                 depth_true: np.ndarray, k: np.ndarray,
                 stride: int = TOKEN_STRIDE) -> TokenSet:
    # one token per observed surface patch: sampling pixels that land in an
    # already-seen patch would emit near-duplicate keys, which dilutes the
    # self-attention denominator of the match ratio and inflates scores for
    # unrelated frame pairs
    voxels = list(dict.fromkeys(frame_voxels(pose, depth_true, k, stride)))
    latents = np.stack([_voxel_latent(seed, v) for v in voxels])
    rand = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_TOKEN, frame_id)))
    q = latents + TOKEN_NOISE * rand.standard_normal(latents.shape)
    k_tok = latents + TOKEN_NOISE * rand.standard_normal(latents.shape)
    q = TOKEN_GAIN * q / np.linalg.norm(q, axis=1, keepdims=True)
    k_tok = TOKEN_GAIN * k_tok / np.linalg.norm(k_tok, axis=1, keepdims=True)
    return TokenSet(q, k_tok)


@dataclass
class TrajectoryPlan:
    """True trajectory plus framing: scene, poses, and submap layout."""

    name: str
    scene: SceneSpec
    poses: list                     # world-from-camera 4x4 per frame
    timestamps: np.ndarray
    submap_size: int

    def __post_init__(self):
        n = self.submap_size
        if n < 2:
            raise DimensionMismatchError("submap size must be at least 2")
        if (len(self.poses) - 1) % (n - 1) != 0:
            raise DimensionMismatchError(
                f"frame count {len(self.poses)} does not tile into size-{n} "
                "submaps with single-frame overlap"
            )

    @property
    def submap_count(self) -> int:
        return (len(self.poses) - 1) // (self.submap_size - 1)

    def submap_frames(self, submap_id: int) -> list:
        start = submap_id * (self.submap_size - 1)
        return list(range(start, start + self.submap_size))

    def positions(self) -> np.ndarray:
        return np.stack([p[:3, 3] for p in self.poses])

    def diameter(self) -> float:
        pos = self.positions()
        best = 0.0
        for i in range(len(pos)):
            d = np.max(np.linalg.norm(pos[i + 1:] - pos[i], axis=1), initial=0.0)
            best = max(best, float(d))
        return best


def preset_loop(submaps: int = 12, submap_size: int = 16) -> TrajectoryPlan:
    """Closed circuit in a cluttered room; the tail revisits the start.

    The camera orbits the room center while holding a nearly fixed gaze
    with a gentle sinusoidal heading wobble.  Keeping the per-frame
    rotation small matters for the noise model: the reported poses of a
    calibration-corrupted submap are rigid projections of affine-conjugated
    motions, and the projection error grows with the rotation rate.  A slow
    wobble keeps rotations exercised without letting that projection error
    dominate the injected noise.
    """
    scene = SceneSpec(
        room=[10.0, 8.0, 3.0],
        spheres=[[2.0, 2.0, 1.0, 0.6], [8.0, 6.0, 1.2, 0.7], [8.0, 2.0, 0.8, 0.5]],
        boxes=[[4.2, 5.8, 0.0, 5.8, 7.2, 1.4], [1.0, 5.0, 0.0, 2.2, 6.4, 1.0]],
    )
    n_frames = submaps * (submap_size - 1) + 1
    period = n_frames - 11            # frames [period..] repeat the start
    center = np.array([5.0, 4.0])
    radius = 2.6
    wobble = math.radians(5.0)
    poses = []
    for i in range(n_frames):
        theta = 2.0 * math.pi * ((i % period) / period)
        position = np.array([
            center[0] + radius * math.cos(theta),
            center[1] + radius * math.sin(theta),
            1.5,
        ])
        heading = wobble * math.sin(theta)
        poses.append(camera_pose(position, heading))
    timestamps = FRAME_DT * np.arange(n_frames)
    return TrajectoryPlan("loop", scene, poses, timestamps, submap_size)


def preset_corridor(submaps: int = 8, submap_size: int = 12) -> TrajectoryPlan:
    """Straight hallway pass with no revisits.

    The camera slides along the corridor axis while angled toward the near
    side wall, so the viewed surface pans with the camera and frames taken
    a few metres apart image disjoint patches of wall and clutter.  Aiming
    down the corridor instead would let every frame see the same far wall,
    which makes distant frames share scene content.
    """
    scene = SceneSpec(
        room=[18.0, 4.0, 3.0],
        spheres=[[4.0, 3.0, 1.0, 0.5], [9.0, 3.2, 1.2, 0.6], [14.0, 2.9, 0.9, 0.5]],
        boxes=[[6.5, 3.2, 0.0, 7.5, 4.0, 1.5], [11.5, 3.0, 0.0, 12.5, 3.9, 1.2]],
    )
    n_frames = submaps * (submap_size - 1) + 1
    xs = np.linspace(1.2, 16.8, n_frames)
    poses = [camera_pose([x, 2.0, 1.5], heading=1.15) for x in xs]
    timestamps = FRAME_DT * np.arange(n_frames)
    return TrajectoryPlan("corridor", scene, poses, timestamps, submap_size)


def preset_planar_wall(submaps: int = 8, submap_size: int = 12) -> TrajectoryPlan:
    """Sideways pass staring at one bare wall: every pixel lands on a plane.

    At roughly 2 m standoff the 64x48 frustum stays entirely on the y = 6
    wall, so every back-projected point of every frame is coplanar.  The
    path wobbles gently in y and z (amplitudes chosen to keep the frustum
    on the wall) so the camera centers span three dimensions, which keeps
    trajectory alignment well-posed even though the observed scene is flat.
    """
    scene = SceneSpec(room=[12.0, 6.0, 3.0])
    n_frames = submaps * (submap_size - 1) + 1
    ts = np.linspace(0.0, 1.0, n_frames)
    poses = []
    for t in ts:
        position = [
            2.2 + 7.6 * t,
            4.0 + 0.15 * math.sin(2.0 * math.pi * t),
            1.5 + 0.2 * math.sin(4.0 * math.pi * t + 1.0),
        ]
        poses.append(camera_pose(position, heading=math.pi / 2.0))
    timestamps = FRAME_DT * np.arange(n_frames)
    return TrajectoryPlan("planar-wall", scene, poses, timestamps, submap_size)


PRESETS = {
    "loop": preset_loop,
    "corridor": preset_corridor,
    "planar-wall": preset_planar_wall,
}


class Simulation:
    """All deterministic per-frame and per-submap products for one plan."""

    def __init__(self, plan: TrajectoryPlan, noise: NoiseSpec, seed: int,
                 dims=DEFAULT_DIMS):
        if seed < 0:
            raise DimensionMismatchError("seed must be non-negative")
        self.plan = plan
        self.noise = noise
        self.seed = int(seed)
        self.dims = dims
        self.k_true = make_intrinsics(dims)
        self.field = DescriptorField(plan.scene)
        self._depth_cache: dict[int, np.ndarray] = {}
        self._token_cache: dict[int, TokenSet] = {}
        self._desc_cache: dict[int, np.ndarray] = {}
        self._corruption_cache: dict[int, SubmapCorruption] = {}

    # per-frame true products ------------------------------------------------

    def true_depth(self, frame_id: int) -> np.ndarray:
        if frame_id not in self._depth_cache:
            self._depth_cache[frame_id] = render_depth(
                self.plan.scene, self.plan.poses[frame_id], self.k_true, self.dims)
        return self._depth_cache[frame_id]

    def descriptor(self, frame_id: int) -> np.ndarray:
        if frame_id not in self._desc_cache:
            pose = self.plan.poses[frame_id]
            heading = math.atan2(pose[1, 2], pose[0, 2])
            self._desc_cache[frame_id] = self.field.descriptor(pose[:3, 3], heading)
        return self._desc_cache[frame_id]

    def tokens(self, frame_id: int) -> TokenSet:
        if frame_id not in self._token_cache:
            self._token_cache[frame_id] = frame_tokens(
                self.seed, frame_id, self.plan.poses[frame_id],
                self.true_depth(frame_id), self.k_true)
        return self._token_cache[frame_id]

    # corruption -------------------------------------------------------------

    def corruption(self, submap_id: int) -> SubmapCorruption:
        if submap_id not in self._corruption_cache:
            if submap_id == 0:
                # the anchor submap defines the global gauge; corrupting it
                # would only randomize the unobservable reference frame
                self._corruption_cache[submap_id] = SubmapCorruption.identity()
            else:
                rand = np.random.default_rng(
                    np.random.SeedSequence((self.seed, _STREAM_SUBMAP, submap_id)))
                self._corruption_cache[submap_id] = SubmapCorruption.draw(
                    rand, self.noise, self.k_true[0, 0])
        return self._corruption_cache[submap_id]

    def _keyframe(self, submap_id: int, frame_id: int, first_frame_id: int) -> Keyframe:
        corruption = self.corruption(submap_id)
        k_hat = self.k_true @ corruption.delta_k
        pose_rel = np.linalg.solve(self.plan.poses[first_frame_id],
                                   self.plan.poses[frame_id])
        if frame_id == first_frame_id:
            pose_hat = np.eye(4)
        else:
            pose_rand = np.random.default_rng(
                np.random.SeedSequence((self.seed, _STREAM_POSE, submap_id, frame_id)))
            pose_hat = corrupt_pose(pose_rel, corruption, pose_rand,
                                    self.noise.sigma_rot, self.noise.sigma_trans)
        depth_rand = np.random.default_rng(
            np.random.SeedSequence((self.seed, _STREAM_DEPTH, submap_id, frame_id)))
        depth, conf = corrupt_depth(
            self.true_depth(frame_id), corruption, k_hat, depth_rand,
            self.noise.depth_noise_frac, self.noise.outlier_frac)
        return Keyframe(
            frame_id=frame_id,
            timestamp=float(self.plan.timestamps[frame_id]),
            pose=pose_hat,
            k=k_hat,
            depth=depth,
            conf=conf,
            descriptor=self.descriptor(frame_id),
            query_tokens=self.tokens(frame_id).q,
            key_tokens=self.tokens(frame_id).k,
        )

    # submap assembly ----------------------------------------------------------

    def regular_submap(self, submap_id: int) -> Submap:
        frames = self.plan.submap_frames(submap_id)
        keyframes = [self._keyframe(submap_id, f, frames[0]) for f in frames]
        return Submap(submap_id=submap_id, kind=REGULAR, keyframes=keyframes)

    def loop_submap(self, loop_submap_id: int, retrieved_frame_id: int,
                    query_frame_id: int) -> Submap:
        keyframes = [
            self._keyframe(loop_submap_id, retrieved_frame_id, retrieved_frame_id),
            self._keyframe(loop_submap_id, query_frame_id, retrieved_frame_id),
        ]
        return Submap(submap_id=loop_submap_id, kind=LOOP_CLOSURE, keyframes=keyframes)

    # retrieval ground truth ---------------------------------------------------

    def frame_submap_earliest(self, frame_id: int) -> int:
        """Earliest regular submap containing the frame (overlap = earlier one)."""
        step = self.plan.submap_size - 1
        return max(0, (frame_id - 1) // step)

    def frame_submap_latest(self, frame_id: int) -> int:
        step = self.plan.submap_size - 1
        return min(frame_id // step, self.plan.submap_count - 1)

    def candidate_pairs(self, min_similarity: float):
        """(query, retrieved, sim) pairs the pipeline could possibly retrieve.

        A pair is reachable when the retrieved frame's registration submap
        lies at least two submaps before some ingestion of the query frame.
        """
        descs = np.stack([self.descriptor(f) for f in range(len(self.plan.poses))])
        sims = descs @ descs.T
        pairs = []
        for q in range(len(self.plan.poses)):
            sq = self.frame_submap_latest(q)
            for r in range(q):
                if self.frame_submap_earliest(r) > sq - 2:
                    continue
                if sims[q, r] >= min_similarity:
                    pairs.append((q, r, float(sims[q, r])))
        return pairs

    def true_revisits(self, retrieval_threshold: float):
        """Revisit pairs every run must close: high similarity, reachable
        already at the query frame's first ingestion."""
        pairs = []
        for q, r, sim in self.candidate_pairs(retrieval_threshold):
            if self.frame_submap_earliest(r) <= self.frame_submap_earliest(q) - 2:
                pairs.append((q, r, sim))
        return pairs


class SimulatorSource:
    """In-memory SubmapSource: regular submaps in order, loop pairs on demand."""

    def __init__(self, plan: TrajectoryPlan, noise: NoiseSpec, seed: int,
                 dims=DEFAULT_DIMS):
        self.sim = Simulation(plan, noise, seed, dims)
        self._next_loop_id = LOOP_SUBMAP_BASE_ID

    @property
    def submap_count(self) -> int:
        return self.sim.plan.submap_count

    def regular_submaps(self):
        for submap_id in range(self.submap_count):
            yield self.sim.regular_submap(submap_id)

    def loop_submap(self, query_frame_id: int, retrieved_frame_id: int) -> Submap:
        submap = self.sim.loop_submap(
            self._next_loop_id, retrieved_frame_id, query_frame_id)
        self._next_loop_id += 1
        return submap

    def groundtruth(self):
        """(timestamps, positions, rotations) of the true trajectory."""
        poses = self.sim.plan.poses
        positions = np.stack([p[:3, 3] for p in poses])
        rotations = np.stack([p[:3, :3] for p in poses])
        return np.asarray(self.sim.plan.timestamps), positions, rotations


def generate_dataset(preset: str, noise: NoiseSpec, seed: int, out_dir: str,
                     submaps: int | None = None, submap_size: int | None = None,
                     retrieval_threshold: float = 0.95,
                     match_threshold: float = 0.85,
                     conf_percentile: float = 0.25,
                     min_disparity_px: float = 50.0) -> dict:
    """Render a preset trajectory to a dataset directory; returns the manifest."""
    from .dataset import write_dataset

    if preset not in PRESETS:
        raise DimensionMismatchError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
        )
    kwargs = {}
    if submaps is not None:
        kwargs["submaps"] = submaps
    if submap_size is not None:
        kwargs["submap_size"] = submap_size
    plan = PRESETS[preset](**kwargs)
    sim = Simulation(plan, noise, seed)
    return write_dataset(
        sim, out_dir,
        retrieval_threshold=retrieval_threshold,
        match_threshold=match_threshold,
        conf_percentile=conf_percentile,
        min_disparity_px=min_disparity_px,
    )
