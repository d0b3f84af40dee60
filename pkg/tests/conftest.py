import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def occluder_scene():
    """Flat textured plane at z = 2 with a small box floating in front of it at z = 0.95."""
    from tcdepth.synth import Occluder, Scene

    return Scene(base_depth=2.0, texture_seed=7, occluder=Occluder((-0.06, -0.06, 0.95), (0.06, 0.06, 1.0)))


def rigged_net(a: float = 1.0, b: float = 0.0):
    """A DepthNet whose output is exactly ``a * image[..., 0] + b``."""
    import numpy as np

    from tcdepth.model import DepthNet

    net = DepthNet.init(np.random.default_rng(0), final_scale=0.0)
    for p in net.params:
        p.data[...] = 0.0
    for layer in range(4):
        net.params[2 * layer].data[0, 0, 1, 1] = 1.0
    net.params[1].data[0] = 0.5  # undo the input centring so the ReLUs pass the channel through
    net.params[6].data[0, 0, 1, 1] = a
    net.params[7].data[0] = b
    return net


def fixed_teacher(pair, outputs):
    """Make ``pair.slow.predict`` return ``outputs`` (one map per requested image)."""
    import numpy as np

    pair.slow.predict = lambda images: np.stack([outputs] * len(images))
    return pair
