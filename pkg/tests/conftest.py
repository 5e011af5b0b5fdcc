import numpy as np
import pytest

from sfdeblur.core import CameraRig
from sfdeblur.datagen import ObjectSpec, SceneSpec, default_scene, generate
from sfdeblur.geometry import RigidMotion

ACCEPTANCE: dict = {}


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})")


@pytest.fixture(scope="session")
def default_bundle():
    return generate(default_scene(0))


def small_scene(seed: int = 0, moving: bool = True) -> SceneSpec:
    """64x96 scene with one object; cheap enough for repeated pipeline runs."""
    rng = np.random.default_rng(seed)
    tx = -0.5 + 0.1 * rng.uniform(-1, 1) if moving else 0.0
    obj = ObjectSpec(rect=(30.0 + 4 * rng.uniform(-1, 1), 18.0, 36.0, 26.0),
                     plane=np.array([0.0, 0.0, 0.2]), motion=RigidMotion.from_params(tx=tx),
                     seed=seed + 101)
    cam = RigidMotion.from_params(tx=0.2) if moving else RigidMotion()
    return SceneSpec(height=64, width=96, background_seed=seed, camera_motion=cam, objects=[obj])


@pytest.fixture
def rig():
    return CameraRig.from_focal(100.0, 7.5, 5.5, 0.5)


@pytest.fixture(scope="session")
def small_bundle():
    return generate(small_scene(0))
