import json
import math
import pathlib
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

from ahscat.geometry import bump_profile, h2_metric, h2_profile, AhmMetric, RotSymFamily
from ahscat import scatop as so
from ahscat import spectral as sp

REPO = pathlib.Path(__file__).resolve().parents[1]
MANIFEST_PATH = REPO / "calibration" / "convention_manifest.json"


@pytest.fixture(scope="session")
def h2met():
    return h2_metric()


@pytest.fixture(scope="session")
def h2prof():
    return h2_profile()


@pytest.fixture(scope="session")
def bumpprof():
    return bump_profile()


@pytest.fixture(scope="session")
def bumpmet(bumpprof):
    return AhmMetric(RotSymFamily(bumpprof))


@pytest.fixture(scope="session")
def manifest():
    if not MANIFEST_PATH.exists():
        pytest.skip("convention manifest not frozen (run scripts/freeze_conventions.py)")
    return so.load_manifest(MANIFEST_PATH)


@pytest.fixture(scope="session")
def kernel_cfg():
    return so.KernelConfig(drho=2.0**-7, rho_max=36.0, t_max=26.0)


@pytest.fixture(scope="session")
def h2_bundle(h2prof, kernel_cfg):
    """Time kernels, limit kernels and spectral samples for modes 0..4."""
    modes = [0, 1, 2, 3, 4]
    t0 = time.time()
    kt = so.scattering_kernel_time(h2prof, modes, kernel_cfg)
    kl, conv = so.scattering_kernel_limit(h2prof, modes, kernel_cfg)
    lams = np.arange(0.5, 5.001, 0.125)
    samples = sp.radial_sweep(h2prof, [(m, float(l)) for m in modes for l in lams])
    return {
        "modes": modes,
        "kt": kt,
        "kl": kl,
        "conv": conv,
        "samples": samples,
        "wall_time": time.time() - t0,
        "cfg": kernel_cfg,
    }


def _sing_bundle(profile, metric, manifest, label):
    cfg = so.KernelConfig(drho=2.0**-6, rho_max=31.5, t_max=22.0,
                          sigma_span=(-1.6, 2.6), probe_support=(5.0, 7.0))
    from ahscat.phase_flow import Branch, incoming_for_chord, scattering_relation

    M = 72
    kt = so.scattering_kernel_time(profile, list(range(M + 1)), cfg)
    thetas = np.pi * np.arange(1, 17) / 16.0
    thetas = thetas[thetas >= np.pi / 4 - 1e-12]
    full = so.assemble_full_kernel(kt, thetas)
    preds = []
    for th in thetas:
        eta = incoming_for_chord(metric, float(th))
        d = scattering_relation(metric, (0.0, 0.0, eta, -1.0), Branch.PLUS)
        preds.append(d.sojourn)
    offset = manifest["sojourn_offset"]
    rep = so.singular_support_check(full, preds, offset=offset,
                                    search_window=(-1.2, 2.2))
    return {"full": full, "preds": preds, "report": rep, "cfg": cfg, "label": label}


@pytest.fixture(scope="session")
def sing_h2(h2prof, h2met, manifest):
    return _sing_bundle(h2prof, h2met, manifest, "h2")


@pytest.fixture(scope="session")
def sing_bump(bumpprof, bumpmet, manifest):
    return _sing_bundle(bumpprof, bumpmet, manifest, "bump")
