"""Smoke test for the optikonv Python module.

Build first:  maturin develop -m crates/py/Cargo.toml
"""

import math
import random
import tempfile
import os

import optikonv as ok


def full_conv(img, h, w, kern, k):
    out_h, out_w = h + k - 1, w + k - 1
    out = [0.0] * (out_h * out_w)
    for oy in range(out_h):
        for ox in range(out_w):
            acc = 0.0
            for i in range(k):
                for j in range(k):
                    y, x = oy + i - (k - 1), ox + j - (k - 1)
                    if 0 <= y < h and 0 <= x < w:
                        acc += img[y * w + x] * kern[i * k + j]
            out[oy * out_w + ox] = acc
    return out


def test_dad_round_trip():
    rng = random.Random(0)
    h = w = 10
    kc, k = 3, 3
    img = [rng.uniform(-1, 1) for _ in range(h * w)]
    kernels = [rng.uniform(-1, 1) for _ in range(kc * k * k)]
    layout = ok.plan_layout(kc, k, h, w)
    psf, layout = ok.dad_encode(ok.Tensor([kc, k, k], kernels), layout)
    assert abs(psf.sum() - 1.0) < 1e-6
    sensor = ok.optical_convolve(ok.Tensor([1, h, w], img), psf)
    maps = ok.dad_decode(sensor, layout)
    assert maps.shape == [kc, h + k - 1, w + k - 1]
    got = maps.tolist()
    n = (h + k - 1) * (w + k - 1)
    for c in range(kc):
        want = full_conv(img, h, w, kernels[c * k * k:(c + 1) * k * k], k)
        err = max(abs(a - b) for a, b in zip(got[c * n:(c + 1) * n], want))
        assert err < 1e-4, err


def test_phase_retrieval():
    target = ok.sparse_spot_target(64, 8, 1.5, 16, seed=3)
    config = ok.OpticsConfig(64, 8e-6, 12e-3, aperture=32.0)
    config.check_sampling()
    mask, history = ok.retrieve_phase(target, config, iters=60, lr=0.1)
    assert len(history) == 60
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert mask.psf().ncc(target) > ok.PhaseMask.flat(config).psf().ncc(target)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "mask.tnsr")
        mask.save(path)
        assert ok.PhaseMask.load(path).phase() == mask.phase()
        q = mask.fabricate(8)
        assert q.levels == 8
        q.export_dose(os.path.join(d, "dose.pgm"))
        target.write(os.path.join(d, "t.pgm"))
        assert abs(ok.Psf.read(os.path.join(d, "t.pgm")).sum() - 1.0) < 1e-6


def test_macs():
    total, rows = ok.count_macs("vgg13", "electronic")
    assert abs(total - 228.5) < 1.0, total
    assert sum(r[2] for r in rows) / 1e6 == total
    codesign, _ = ok.count_macs("vgg13", "codesign")
    assert codesign < total


def test_errors():
    try:
        ok.Tensor([2, 2], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")
    try:
        ok.count_macs("lenet")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown architecture accepted")
    assert math.isfinite(ok.Tensor.zeros([3]).max_abs_diff(ok.Tensor([3], [0.0, 1.0, -2.0])))


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name}: ok")
