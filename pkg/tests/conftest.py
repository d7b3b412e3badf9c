import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_model():
    from densefit.bodymodel import SynthConfig, make_synthetic_model
    return make_synthetic_model(SynthConfig(joints=12, vertices_per_segment=16,
                                            blendshapes=6, keypoints=15), seed=7)


@pytest.fixture(scope="session")
def two_bone_model():
    """Root at the origin, child joint at (1, 0, 0), a rigid marker vertex on
    each bone. Vertices 0/1 sit exactly on the joints."""
    from densefit.bodymodel import BodyModel
    template = np.array([
        [0.0, 0.0, 0.0],   # at root
        [1.0, 0.0, 0.0],   # at child joint
        [1.5, 0.0, 0.0],   # rigid to child
        [0.5, 0.0, 0.0],   # rigid to root
    ])
    jreg = np.zeros((2, 4))
    jreg[0, 0] = 1.0
    jreg[1, 1] = 1.0
    skin = np.zeros((4, 2))
    skin[0, 0] = 1.0
    skin[1, 1] = 1.0
    skin[2, 1] = 1.0
    skin[3, 0] = 1.0
    return BodyModel(
        template=template,
        shape_blendshapes=np.zeros((1, 4, 3)),
        joint_regressor=jreg,
        keypoint_regressor=np.eye(4)[:2],
        skinning_weights=skin,
        parents=np.array([-1, 0]),
        faces=np.array([[0, 1, 2]]),
    )


@pytest.fixture()
def simple_camera():
    from densefit.camera import Camera
    return Camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, rotation=np.eye(3),
                  translation=np.array([0.0, 0.0, 2.0]), width=64, height=64)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
