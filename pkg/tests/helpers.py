"""Small scenes shared by the pipeline, refine and acceptance tests."""

import numpy as np

from poserefine import diffmath as dm
from poserefine import encoding as enc
from poserefine import pipeline as pl
from poserefine.body import BodyModel, body_from_dict
from poserefine.fields import FieldConfig
from poserefine.renderer import CameraModel


def two_bone_body():
    data = {"bones": [
        {"name": "root", "parent": -1, "offset": [0.0, 0.0, 0.0], "radius": 0.08},
        {"name": "arm", "parent": 0, "offset": [0.0, 0.3, 0.0], "tip": [0.25, 0.0, 0.0], "radius": 0.06},
    ]}
    return BodyModel(*body_from_dict(data))


def toy_camera(size=24):
    return CameraModel.look_at([0.0, 0.25, 1.6], [0.0, 0.25, 0.0], [0.0, 1.0, 0.0], 40.0, 40.0, size, size)


def toy_model(body=None, disable=(), samples=16, cull=None, channels=8, seed=0, zero=False):
    body = body if body is not None else two_bone_body()
    return pl.NeuralBody(body, enc.EncodingConfig(K=4, N=1), FieldConfig(channels=channels),
                         pl.Ablation.disabling(disable), pl.RenderConfig(samples_per_ray=samples, cull_distance=cull),
                         seed=seed, zero=zero)


def toy_poses(frames=3, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=scale, size=(frames, 2, 3)), np.zeros((frames, 3))


def central_pixels(camera, count=12, seed=0):
    rng = np.random.default_rng(seed)
    c = np.array([camera.width / 2, camera.height / 2])
    return c + rng.uniform(-5, 5, size=(count, 2))


def pose_chain_gradient(model, camera, rot, root, frames, pixels, target, h=1e-6):
    """(analytic, numerical) gradient of the L1 pixel loss w.r.t. every pose parameter."""
    from poserefine.refine import rgb_loss

    spheres = pl.bounding_spheres(model, rot, root)

    def loss(r):
        out = pl.render_pixels(model, camera, r, root, frames, pixels, spheres=spheres)
        return rgb_loss(out.rgb, target)

    tape = dm.Tape()
    leaf = tape.leaf(rot, "rot")
    g = tape.backward(loss(leaf))["rot"]
    num = dm.numerical_grad(lambda r: float(loss(r).data), rot, h)
    return g, num


def relative_error(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))
