import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from scaled_second.pointcloud import VoxelGridSpec, synth_scene  # noqa: E402


@pytest.fixture(scope="session")
def small_grid():
    return VoxelGridSpec.from_dims((128, 128, 40))


@pytest.fixture(scope="session")
def small_scene(small_grid):
    return synth_scene(3, 2, grid=small_grid, points_per_object=200, clutter_points=600)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
