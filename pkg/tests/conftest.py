import numpy as np
import pytest

from bevlab.synth import RigConfig, SceneConfig, generate_scene, render_frame, trajectory


def render_sequence(seed, n=50, scene_cfg=SceneConfig(), rig=RigConfig(), target=None):
    scene = generate_scene(seed, scene_cfg)
    poses = trajectory(scene, n)
    scans = [render_frame(scene, p, rig, with_images=False) for p in poses]
    t = n - 1 if target is None else target
    return scene, scans, render_frame(scene, poses[t], rig)


@pytest.fixture(scope="session")
def static_sequence():
    return render_sequence(4, scene_cfg=SceneConfig(num_dynamic=0))


@pytest.fixture(scope="session")
def moving_box_sequence():
    # seed 18 puts the box in front of the camera early in the window
    _, scans, target = render_sequence(18)
    return scans, target


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    from bevlab.dataset import DatasetConfig, write_synth_dataset

    out = tmp_path_factory.mktemp("synth12")
    write_synth_dataset(out, 7, DatasetConfig(frames=12, grid="64x64x0.25"))
    return out


# one line per acceptance criterion, printed again at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
