import numpy as np
import pytest

from plumekit.spectral_lut import build_lut, emit_like_srfs, synthetic_transmittance


@pytest.fixture(scope="session")
def pair():
    return synthetic_transmittance()


@pytest.fixture(scope="session")
def srfs():
    return emit_like_srfs()


@pytest.fixture(scope="session")
def wavelengths(srfs):
    return np.array([s.center_um for s in srfs])


@pytest.fixture(scope="session")
def lut(pair, srfs):
    return build_lut(pair, srfs)


@pytest.fixture(scope="session")
def swir_srfs(srfs):
    return [s for s in srfs if s.center_um >= 1.5]


@pytest.fixture(scope="session")
def swir_lut(pair, swir_srfs):
    return build_lut(pair, swir_srfs)


@pytest.fixture(scope="session")
def swir_wavelengths(swir_srfs):
    return np.array([s.center_um for s in swir_srfs])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_granule(pair, swir_srfs, swir_lut):
    """512x512 SWIR granule with an overlapping pair of plumes plus one isolated plume."""
    from dataclasses import replace

    from plumekit.injection import inject_enhancement, kg_per_hr_to_mol_per_s, scale_plume
    from plumekit.puff_sim import SimConfig, simulate_plume
    from plumekit.scenes import synthetic_scene

    cube, _ = synthetic_scene((512, 512), swir_srfs, pair, np.random.default_rng(11))
    base = SimConfig(grid_size_px=512, wind_direction_rad=0.3)
    origins = [(200, 140), (222, 170), (380, 360)]
    enh = []
    for i, o in enumerate(origins):
        p = simulate_plume(replace(base, seed=100 + i), o, np.random.default_rng(100 + i))
        enh.append(scale_plume(p, kg_per_hr_to_mol_per_s(3000.0)))
    enh = np.array(enh)
    return inject_enhancement(cube, enh.sum(axis=0), swir_lut), enh, origins


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
