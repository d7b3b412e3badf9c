"""Parametric articulated mesh: shape blendshapes + linear blend skinning.

The model is a plain container of numpy arrays with a documented JSON file
schema. Pose is a (J, 3) array of per-joint axis-angle rotations (radians),
shape a (B,) coefficient vector. The differentiable forward pass lives in
`_diff`; this module wraps it with numpy in/out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import _diff
from .arrayjson import SchemaError, array_field, arrays_to_lists, dump_doc, int_field, load_doc


class ModelError(ValueError):
    """Model arrays are inconsistent or violate an invariant."""


@dataclass(eq=False)
class BodyModel:
    """Template mesh, blendshapes, regressors, skinning weights, kinematic tree.

    Joints are topologically ordered: parents[0] == -1 (root sentinel) and
    parents[j] < j for j >= 1. Instances are immutable after construction;
    the backing arrays are marked read-only.
    """

    template: np.ndarray            # (N, 3) meters
    shape_blendshapes: np.ndarray   # (B, N, 3) meters per unit coefficient
    joint_regressor: np.ndarray     # (J, N), rows sum to 1
    keypoint_regressor: np.ndarray  # (k, N), rows sum to 1
    skinning_weights: np.ndarray    # (N, J), rows sum to 1, non-negative
    parents: np.ndarray             # (J,) int64
    faces: np.ndarray               # (T_f, 3) int64 vertex indices
    pose_blendshapes: np.ndarray | None = None  # (9*(J-1), N, 3), optional
    hinge_indices: np.ndarray | None = None     # flat pose-coordinate indices
    hinge_signs: np.ndarray | None = None
    _tensors: "_diff.ModelTensors | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.template = np.ascontiguousarray(self.template, dtype=np.float64)
        self.shape_blendshapes = np.ascontiguousarray(self.shape_blendshapes, dtype=np.float64)
        self.joint_regressor = np.ascontiguousarray(self.joint_regressor, dtype=np.float64)
        self.keypoint_regressor = np.ascontiguousarray(self.keypoint_regressor, dtype=np.float64)
        self.skinning_weights = np.ascontiguousarray(self.skinning_weights, dtype=np.float64)
        self.parents = np.ascontiguousarray(self.parents, dtype=np.int64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.pose_blendshapes is not None:
            self.pose_blendshapes = np.ascontiguousarray(self.pose_blendshapes, dtype=np.float64)
        if self.hinge_indices is not None:
            self.hinge_indices = np.ascontiguousarray(self.hinge_indices, dtype=np.int64)
            self.hinge_signs = np.ascontiguousarray(self.hinge_signs, dtype=np.float64)
        self.validate()
        for arr in (self.template, self.shape_blendshapes, self.joint_regressor,
                    self.keypoint_regressor, self.skinning_weights, self.parents, self.faces):
            arr.setflags(write=False)

    @property
    def vertex_count(self) -> int:
        return self.template.shape[0]

    @property
    def joint_count(self) -> int:
        return self.parents.shape[0]

    @property
    def shape_count(self) -> int:
        return self.shape_blendshapes.shape[0]

    @property
    def keypoint_count(self) -> int:
        return self.keypoint_regressor.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> None:
        n, j = self.template.shape[0], self.parents.shape[0]
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            raise ModelError("template must be (N, 3)")
        if self.shape_blendshapes.ndim != 3 or self.shape_blendshapes.shape[1:] != (n, 3):
            raise ModelError("shape_blendshapes must be (B, N, 3)")
        if self.joint_regressor.shape != (j, n):
            raise ModelError("joint_regressor must be (J, N)")
        if self.keypoint_regressor.ndim != 2 or self.keypoint_regressor.shape[1] != n:
            raise ModelError("keypoint_regressor must be (k, N)")
        if self.skinning_weights.shape != (n, j):
            raise ModelError("skinning_weights must be (N, J)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ModelError("faces must be (T_f, 3)")
        for name, arr in (("template", self.template),
                          ("shape_blendshapes", self.shape_blendshapes),
                          ("joint_regressor", self.joint_regressor),
                          ("keypoint_regressor", self.keypoint_regressor),
                          ("skinning_weights", self.skinning_weights)):
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} contains non-finite values")
        if np.any(self.skinning_weights < -1e-12):
            row = int(np.argmin(self.skinning_weights.min(axis=1)))
            raise ModelError(f"skinning_weights row {row} has negative entries")
        for name, mat in (("skinning_weights", self.skinning_weights),
                          ("joint_regressor", self.joint_regressor),
                          ("keypoint_regressor", self.keypoint_regressor)):
            sums = mat.sum(axis=1)
            bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
            if bad.size:
                raise ModelError(f"{name} row {int(bad[0])} sums to {sums[bad[0]]:.6g}, expected 1")
        if self.parents[0] != -1:
            raise ModelError("parents[0] must be the root sentinel -1")
        for jj in range(1, j):
            if not 0 <= self.parents[jj] < jj:
                raise ModelError(f"parents[{jj}] = {self.parents[jj]} breaks topological order")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ModelError("faces reference vertices outside [0, N)")
        if self.pose_blendshapes is not None:
            if self.pose_blendshapes.shape != (9 * (j - 1), n, 3):
                raise ModelError("pose_blendshapes must be (9*(J-1), N, 3)")
        if self.hinge_indices is not None:
            if np.any(self.hinge_indices < 0) or np.any(self.hinge_indices >= 3 * j):
                raise ModelError("hinge_indices out of range")
            if self.hinge_signs is None or self.hinge_signs.shape != self.hinge_indices.shape:
                raise ModelError("hinge_signs must match hinge_indices")

    def tensors(self) -> "_diff.ModelTensors":
        if self._tensors is None:
            self._tensors = _diff.ModelTensors.from_arrays(
                self.template, self.shape_blendshapes, self.joint_regressor,
                self.keypoint_regressor, self.skinning_weights, self.parents,
                self.pose_blendshapes)
        return self._tensors

    def zero_pose(self) -> np.ndarray:
        return np.zeros((self.joint_count, 3))

    def zero_shape(self) -> np.ndarray:
        return np.zeros(self.shape_count)


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle 3-vector -> 3x3 rotation matrix (Taylor fallback near zero)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    if r.shape != (3,):
        raise ModelError("axis_angle must be a 3-vector")
    with torch.no_grad():
        return _diff.rodrigues_t(_diff.to_t(r)).numpy()


def check_pose(pose, joint_count: int) -> np.ndarray:
    theta = np.asarray(pose, dtype=np.float64)
    if theta.shape != (joint_count, 3):
        raise ModelError(f"pose must be ({joint_count}, 3), got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ModelError("pose contains non-finite values")
    return theta


def check_shape(shape, shape_count: int) -> np.ndarray:
    beta = np.asarray(shape, dtype=np.float64)
    if beta.shape != (shape_count,):
        raise ModelError(f"shape must be ({shape_count},), got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise ModelError("shape contains non-finite values")
    return beta


def normalize_pose(pose) -> np.ndarray:
    """Wrap per-joint rotation magnitudes into [0, 2*pi), keeping the axis."""
    theta = np.asarray(pose, dtype=np.float64).copy()
    mags = np.linalg.norm(theta, axis=1)
    for j in np.nonzero(mags >= 2.0 * np.pi)[0]:
        theta[j] *= (mags[j] % (2.0 * np.pi)) / mags[j]
    return theta


def forward(model: BodyModel, pose, shape, use_pose_blendshapes: bool = True) -> np.ndarray:
    """Evaluate the mesh (N, 3) at the given pose and shape."""
    theta = check_pose(pose, model.joint_count)
    beta = check_shape(shape, model.shape_count)
    with torch.no_grad():
        verts, _ = _diff.forward_t(model.tensors(), _diff.to_t(theta), _diff.to_t(beta),
                                   use_pose_blendshapes=use_pose_blendshapes)
    return verts.numpy()


def posed_joints(model: BodyModel, pose, shape) -> np.ndarray:
    """Skeleton joint positions (J, 3) at the given pose and shape."""
    theta = check_pose(pose, model.joint_count)
    beta = check_shape(shape, model.shape_count)
    with torch.no_grad():
        _, joints = _diff.forward_t(model.tensors(), _diff.to_t(theta), _diff.to_t(beta))
    return joints.numpy()


def regress_keypoints(model: BodyModel, mesh) -> np.ndarray:
    """Keypoints (k, 3) as the linear regressor applied to mesh vertices."""
    verts = np.asarray(mesh, dtype=np.float64)
    if verts.shape != (model.vertex_count, 3):
        raise ModelError(f"mesh must be ({model.vertex_count}, 3), got {verts.shape}")
    return model.keypoint_regressor @ verts


# ---------------------------------------------------------------------------
# Synthetic model generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters for the capsule-limb humanoid generator."""

    joints: int = 16
    vertices_per_segment: int = 24  # rounded down to a multiple of 8, min 16
    blendshapes: int = 10
    keypoints: int = 25

    def validate(self) -> None:
        if self.joints < 4:
            raise ModelError("synthetic model needs at least 4 joints")
        if self.vertices_per_segment < 16:
            raise ModelError("vertices_per_segment must be >= 16")
        if self.blendshapes < 0 or self.keypoints < 1:
            raise ModelError("blendshapes must be >= 0 and keypoints >= 1")


_RING = 8  # vertices per capsule ring

# Limb layout: (attach point, base offset from attach joint, per-joint step, radius)
_LIMBS = (
    ("spine", "root", (0.0, 0.14, 0.0), (0.0, 0.13, 0.0), 0.085),
    ("leg_l", "root", (-0.09, -0.10, 0.0), (-0.005, -0.16, 0.0), 0.055),
    ("leg_r", "root", (0.09, -0.10, 0.0), (0.005, -0.16, 0.0), 0.055),
    ("arm_l", "spine_top", (-0.16, -0.02, 0.0), (-0.13, -0.01, 0.0), 0.042),
    ("arm_r", "spine_top", (0.16, -0.02, 0.0), (0.13, -0.01, 0.0), 0.042),
)


def _limb_counts(total: int) -> dict:
    counts = {name: 0 for name, *_ in _LIMBS}
    order = [name for name, *_ in _LIMBS]
    i = 0
    while total > 0:
        counts[order[i % len(order)]] += 1
        i += 1
        total -= 1
    return counts


def make_synthetic_model(config: SynthConfig | None = None, seed: int = 0, **overrides) -> BodyModel:
    """Generate a capsule-limb humanoid satisfying all model invariants.

    Deterministic per seed. Blendshapes mix smooth positional warps with
    radial thickness modes, so shape changes the silhouette and not just the
    skeleton. Elbow/knee analog hinges are recorded for the bending prior.
    """
    cfg = config or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    counts = _limb_counts(cfg.joints - 1)
    joint_pos = [np.zeros(3)]
    parents = [-1]
    limb_joints: dict = {name: [] for name in counts}
    spine_top = 0
    for name, attach, base, step, _radius in _LIMBS:
        if counts[name] == 0:
            continue
        parent = 0 if attach == "root" else spine_top
        pos = joint_pos[parent] + np.asarray(base)
        for i in range(counts[name]):
            if i > 0:
                pos = pos + np.asarray(step)
            parents.append(parent)
            joint_pos.append(pos.copy())
            parent = len(joint_pos) - 1
            limb_joints[name].append(parent)
        if name == "spine":
            spine_top = limb_joints["spine"][-1]
    joint_pos = np.asarray(joint_pos)
    parents = np.asarray(parents, dtype=np.int64)
    n_joints = len(parents)

    limb_of_joint = {}
    for name, joints in limb_joints.items():
        for jj in joints:
            limb_of_joint[jj] = name
    radius_of = {name: r for name, *_rest, r in [(l[0], l[4]) for l in _LIMBS]}

    rings = max(2, cfg.vertices_per_segment // _RING)
    bones = [(int(parents[j]), j) for j in range(1, n_joints)]

    verts, radial_dirs, seg_params = [], [], []
    bone_rings: dict = {}
    for p, c in bones:
        axis = joint_pos[c] - joint_pos[p]
        length = np.linalg.norm(axis)
        axis_u = axis / length
        ref = np.array([0.0, 0.0, 1.0]) if abs(axis_u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(axis_u, ref)
        u /= np.linalg.norm(u)
        v = np.cross(axis_u, u)
        base_r = radius_of[limb_of_joint[c]]
        ring_ids = []
        for ri, t in enumerate(np.linspace(0.0, 1.0, rings)):
            center = joint_pos[p] + t * axis
            r_here = base_r * (1.0 + 0.18 * np.sin(np.pi * t))
            ids = []
            for a in range(_RING):
                ang = 2.0 * np.pi * (a + 0.5 * (ri % 2)) / _RING
                direction = np.cos(ang) * u + np.sin(ang) * v
                verts.append(center + r_here * direction)
                radial_dirs.append(direction)
                seg_params.append((p, c, t))
                ids.append(len(verts) - 1)
            ring_ids.append(ids)
        bone_rings[(p, c)] = ring_ids
    verts = np.asarray(verts)
    radial_dirs = np.asarray(radial_dirs)
    n = verts.shape[0]
    # Tiny jitter keeps the template non-degenerate (rings of collinear bones
    # would otherwise coincide vertex for vertex).
    verts = verts + rng.normal(0.0, 0.0015, size=verts.shape)

    faces = []
    for ring_ids in bone_rings.values():
        for ri in range(len(ring_ids) - 1):
            a, b = ring_ids[ri], ring_ids[ri + 1]
            for k in range(_RING):
                k2 = (k + 1) % _RING
                faces.append((a[k], a[k2], b[k]))
                faces.append((b[k], a[k2], b[k2]))
    faces = np.asarray(faces, dtype=np.int64)

    # Skinning: rigid to the proximal joint, blending toward the distal joint
    # near the far end of the bone.
    skin = np.zeros((n, n_joints))
    for i, (p, c, t) in enumerate(seg_params):
        s = np.clip((t - 0.6) / 0.4, 0.0, 1.0)
        blend = 0.5 * s * s * (3.0 - 2.0 * s)
        proximal = p if p >= 0 else 0
        skin[i, c] = blend
        skin[i, proximal] += 1.0 - blend

    # Joint regressor: the ring whose centroid sits exactly at the joint.
    jreg = np.zeros((n_joints, n))
    root_bone = bones[0]
    jreg[0, bone_rings[root_bone][0]] = 1.0 / _RING
    for p, c in bones:
        jreg[c, bone_rings[(p, c)][-1]] = 1.0 / _RING

    # Keypoint regressor: joints first, then mid-bone rings until k rows.
    kreg_rows = [jreg[j] for j in range(min(cfg.keypoints, n_joints))]
    bone_cycle = 0
    while len(kreg_rows) < cfg.keypoints:
        p, c = bones[bone_cycle % len(bones)]
        row = np.zeros(n)
        row[bone_rings[(p, c)][rings // 2]] = 1.0 / _RING
        kreg_rows.append(row)
        bone_cycle += 1
    kreg = np.asarray(kreg_rows)

    # Blendshapes: even indices are smooth positional warps, odd indices are
    # radial thickness modes (silhouette-visible, keypoint-invisible).
    blends = np.zeros((cfg.blendshapes, n, 3))
    heights = verts[:, 1]
    for b in range(cfg.blendshapes):
        freq = rng.uniform(1.5, 5.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        if b % 2 == 0:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            amp = rng.uniform(0.008, 0.02, size=3)
            wave = np.sin(freq * (verts @ direction) + phase)
            blends[b] = wave[:, None] * amp[None, :]
        else:
            amp = rng.uniform(0.012, 0.028)
            wave = amp * (0.6 + 0.4 * np.sin(freq * heights + phase))
            blends[b] = wave[:, None] * radial_dirs

    # Elbow/knee analogs: second joint of each arm/leg chain bends about z.
    hinge_idx, hinge_sign = [], []
    for name, sign in (("arm_l", 1.0), ("arm_r", -1.0), ("leg_l", 1.0), ("leg_r", -1.0)):
        chain = limb_joints[name]
        if len(chain) >= 2:
            hinge_idx.append(3 * chain[1] + 2)
            hinge_sign.append(sign)

    return BodyModel(
        template=verts,
        shape_blendshapes=blends,
        joint_regressor=jreg,
        keypoint_regressor=kreg,
        skinning_weights=skin,
        parents=parents,
        faces=faces,
        hinge_indices=np.asarray(hinge_idx, dtype=np.int64) if hinge_idx else None,
        hinge_signs=np.asarray(hinge_sign) if hinge_sign else None,
    )


# ---------------------------------------------------------------------------
# File schema
# ---------------------------------------------------------------------------

def model_to_doc(model: BodyModel) -> dict:
    doc = {
        "N": model.vertex_count, "J": model.joint_count, "B": model.shape_count,
        "k": model.keypoint_count, "T_f": model.face_count,
    }
    doc.update(arrays_to_lists(
        template=model.template,
        shape_blendshapes=model.shape_blendshapes,
        joint_regressor=model.joint_regressor,
        keypoint_regressor=model.keypoint_regressor,
        skinning_weights=model.skinning_weights,
        parents=model.parents,
        faces=model.faces,
        pose_blendshapes=model.pose_blendshapes,
        hinge_indices=model.hinge_indices,
        hinge_signs=model.hinge_signs,
    ))
    return doc


def model_from_doc(doc: dict) -> BodyModel:
    n = int_field(doc, "N")
    j = int_field(doc, "J")
    b = int_field(doc, "B")
    k = int_field(doc, "k")
    t_f = int_field(doc, "T_f")
    kwargs = dict(
        template=array_field(doc, "template", (n, 3)),
        shape_blendshapes=array_field(doc, "shape_blendshapes", (b, n, 3)),
        joint_regressor=array_field(doc, "joint_regressor", (j, n)),
        keypoint_regressor=array_field(doc, "keypoint_regressor", (k, n)),
        skinning_weights=array_field(doc, "skinning_weights", (n, j)),
        parents=array_field(doc, "parents", (j,), dtype=np.int64),
        faces=array_field(doc, "faces", (t_f, 3), dtype=np.int64),
    )
    if "pose_blendshapes" in doc:
        kwargs["pose_blendshapes"] = array_field(doc, "pose_blendshapes", (9 * (j - 1), n, 3))
    if "hinge_indices" in doc:
        hinges = np.asarray(doc["hinge_indices"], dtype=np.int64)
        kwargs["hinge_indices"] = hinges
        kwargs["hinge_signs"] = array_field(doc, "hinge_signs", hinges.shape)
    return BodyModel(**kwargs)


def save_model(model: BodyModel, path) -> None:
    dump_doc(model_to_doc(model), path)


def load_model(path) -> BodyModel:
    """Load a model file; raises SchemaError on parse issues, ModelError on
    invariant violations (with the offending field named)."""
    return model_from_doc(load_doc(path))
