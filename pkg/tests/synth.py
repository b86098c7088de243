"""Synthetic scenes shared by the test suite: random Gaussian clouds and a
small articulated humanoid with an SMPL-layout 24-joint skeleton."""
import numpy as np

from splatworld.articulation import Skeleton, TemplateMesh
from splatworld.camera import Camera
from splatworld.gaussians import GaussianSet, covariances_from
from splatworld.scene import Human, Scene, init_human
from splatworld.articulation import bake_skinning_grid

SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)

REST_JOINTS = np.array([
    [0.00, 0.95, 0.00],   # 0 pelvis
    [0.08, 0.88, 0.00],   # 1 left hip
    [-0.08, 0.88, 0.00],  # 2 right hip
    [0.00, 1.05, 0.00],   # 3 spine1
    [0.10, 0.50, 0.00],   # 4 left knee
    [-0.10, 0.50, 0.00],  # 5 right knee
    [0.00, 1.15, 0.00],   # 6 spine2
    [0.10, 0.10, 0.00],   # 7 left ankle
    [-0.10, 0.10, 0.00],  # 8 right ankle
    [0.00, 1.25, 0.00],   # 9 spine3
    [0.12, 0.02, 0.10],   # 10 left foot
    [-0.12, 0.02, 0.10],  # 11 right foot
    [0.00, 1.40, 0.00],   # 12 neck
    [0.06, 1.33, 0.00],   # 13 left collar
    [-0.06, 1.33, 0.00],  # 14 right collar
    [0.00, 1.55, 0.00],   # 15 head
    [0.18, 1.35, 0.00],   # 16 left shoulder
    [-0.18, 1.35, 0.00],  # 17 right shoulder
    [0.42, 1.20, 0.00],   # 18 left elbow
    [-0.42, 1.20, 0.00],  # 19 right elbow
    [0.60, 1.05, 0.00],   # 20 left wrist
    [-0.60, 1.05, 0.00],  # 21 right wrist
    [0.66, 1.00, 0.00],   # 22 left hand
    [-0.66, 1.00, 0.00],  # 23 right hand
])

# Bones fleshed out with capsule point samples: (parent joint, child joint, radius).
BONES = [
    (0, 1, 0.07), (0, 2, 0.07), (0, 3, 0.10), (3, 6, 0.10), (6, 9, 0.10),
    (9, 12, 0.06), (12, 15, 0.08),
    (1, 4, 0.06), (4, 7, 0.05), (7, 10, 0.04),
    (2, 5, 0.06), (5, 8, 0.05), (8, 11, 0.04),
    (13, 16, 0.05), (16, 18, 0.045), (18, 20, 0.04), (20, 22, 0.035),
    (14, 17, 0.05), (17, 19, 0.045), (19, 21, 0.04), (21, 23, 0.035),
]

# GT part colors for completion experiments (legs distinct from torso).
PART_COLORS = {
    "torso": (0.75, 0.2, 0.2),
    "head": (0.85, 0.75, 0.3),
    "arms": (0.2, 0.65, 0.25),
    "legs": (0.2, 0.3, 0.8),
}


def _bone_part(parent, child):
    if child in (4, 5, 7, 8, 10, 11):
        return "legs"
    if child in (16, 17, 18, 19, 20, 21, 22, 23):
        return "arms"
    if child == 15 or parent == 12:
        return "head"
    return "torso"


def make_humanoid(points_per_bone=40, seed=0):
    """Synthetic articulated human: (skeleton, mesh, part colors per vertex)."""
    rng = np.random.default_rng(seed)
    skel = Skeleton(SMPL_PARENTS.copy(), REST_JOINTS.copy())
    verts, weights, colors = [], [], []
    J = skel.n_joints
    for parent, child, radius in BONES:
        a, b = REST_JOINTS[parent], REST_JOINTS[child]
        axis = b - a
        length = np.linalg.norm(axis)
        axis = axis / max(length, 1e-9)
        # orthonormal frame around the bone axis
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        e1 = np.cross(axis, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        for _ in range(points_per_bone):
            s = rng.uniform(0.0, 1.0)
            ang = rng.uniform(0.0, 2.0 * np.pi)
            r = radius * np.sqrt(rng.uniform(0.2, 1.0))
            p = a + s * length * axis + r * (np.cos(ang) * e1 + np.sin(ang) * e2)
            w = np.zeros(J)
            w[parent] = 1.0 - s
            w[child] = s
            verts.append(p)
            weights.append(w)
            colors.append(PART_COLORS[_bone_part(parent, child)])
    mesh = TemplateMesh(np.array(verts), np.array(weights))
    return skel, mesh, np.array(colors, dtype=np.float64)


def swing_pose_track(n_frames, n_joints=24, amplitude=0.5, seed=0):
    """Walking-ish track: hips/shoulders swing in opposite phase."""
    track = np.zeros((n_frames, 3 * n_joints + 3))
    for t in range(n_frames):
        phase = 2.0 * np.pi * t / max(n_frames, 1)
        aa = np.zeros((n_joints, 3))
        aa[1, 0] = amplitude * np.sin(phase)        # left hip
        aa[2, 0] = -amplitude * np.sin(phase)       # right hip
        aa[4, 0] = 0.5 * amplitude * (1 + np.cos(phase))   # left knee
        aa[5, 0] = 0.5 * amplitude * (1 - np.cos(phase))   # right knee
        aa[16, 2] = 0.4 * amplitude * np.sin(phase)  # left shoulder
        aa[17, 2] = -0.4 * amplitude * np.sin(phase)
        track[t, : 3 * n_joints] = aa.reshape(-1)
    return track


def make_human(seed=0, n_frames=4, grid_resolution=32, points_per_bone=40, amplitude=0.5):
    skel, mesh, colors = make_humanoid(points_per_bone=points_per_bone, seed=seed)
    human = Human(
        canonical=init_human(mesh),
        skeleton=skel,
        mesh=mesh,
        grid=bake_skinning_grid(mesh, resolution=grid_resolution),
        pose_track=swing_pose_track(n_frames, amplitude=amplitude),
    )
    return human, colors


def random_gaussian_set(rng, m, center=(0.0, 0.0, 4.0), spread=0.5, scale_range=(0.05, 0.2), space="world"):
    centers = rng.normal(0.0, spread, (m, 3)) + np.asarray(center)
    return GaussianSet.from_attributes(
        centers=centers,
        quats=rng.normal(size=(m, 4)),
        scales=rng.uniform(*scale_range, (m, 3)),
        colors=rng.uniform(0.0, 1.0, (m, 3)),
        opacities=rng.uniform(0.2, 0.9, m),
        space=space,
    )


def front_camera(width=64, height=64, distance=3.0, target=(0.0, 0.0, 0.0), f=None):
    target = np.asarray(target, dtype=np.float64)
    eye = target + np.array([0.0, 0.0, -distance])
    f = f or 1.2 * max(width, height)
    return Camera.look_at(eye, target, f, f, width, height)


def static_scene(background: GaussianSet, cameras, frame_count=None):
    return Scene(
        background=background,
        humans=[],
        cameras=list(cameras),
        frame_count=frame_count if frame_count is not None else len(cameras),
    )
