import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from matplotlib.colors import rgb_to_hsv

from flowsynth import flow as fl
from flowsynth.errors import (
    BadMagic,
    DimensionMismatch,
    DimensionOverflow,
    EstimatorUnavailable,
    FlowFormatError,
    TruncatedFile,
)

import oracles


# ---------------------------------------------------------------- .flo

def test_flo_size_2x2(tmp_path):
    fl.write_flo(fl.zero_flow(2, 2), tmp_path / "z.flo")
    assert (tmp_path / "z.flo").stat().st_size == 12 + 2 * 2 * 2 * 4 == 44


def test_flo_layout(tmp_path):
    f = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    fl.write_flo(f, tmp_path / "a.flo")
    raw = (tmp_path / "a.flo").read_bytes()
    assert struct.unpack("<fii", raw[:12]) == (202021.25, 3, 2)
    # row-major interleaved u, v
    assert struct.unpack("<4f", raw[12:28]) == (0.0, 1.0, 2.0, 3.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(2)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_roundtrip_property(tmp_path_factory, f):
    path = tmp_path_factory.mktemp("flo") / "f.flo"
    fl.write_flo(f, path)
    back = fl.read_flo(path)
    assert back.dtype == np.float32 and back.tobytes() == f.tobytes()


def test_flo_bad_magic(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(struct.pack("<fii", 123.0, 1, 1) + b"\0" * 8)
    with pytest.raises(BadMagic):
        fl.read_flo(p)


def test_flo_truncated_and_overflow(tmp_path):
    p = tmp_path / "t.flo"
    p.write_bytes(struct.pack("<fii", 202021.25, 4, 4) + b"\0" * 10)
    with pytest.raises(TruncatedFile):
        fl.read_flo(p)
    p.write_bytes(b"\0\0")
    with pytest.raises(TruncatedFile):
        fl.read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, -1, 4))
    with pytest.raises(DimensionOverflow):
        fl.read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 1 << 20, 1 << 20))
    with pytest.raises(DimensionOverflow):
        fl.read_flo(p)


def test_flo_refuses_nonfinite(tmp_path):
    f = fl.zero_flow(2, 2)
    f[0, 0, 0] = np.nan
    with pytest.raises(FlowFormatError):
        fl.write_flo(f, tmp_path / "n.flo")


# ------------------------------------------------------------ block matching

def shift_image(img, dx, dy):
    """tgt(x) = src(x - d): content moves by (dx, dy)."""
    return np.roll(np.roll(img, dy, axis=0), dx, axis=1)


def test_block_match_constant_pair():
    img = np.full((12, 12, 3), 90, np.uint8)
    assert not fl.block_match_flow(img, img, 3, 3).any()


def test_block_match_shift(textured):
    tgt = shift_image(textured, 2, 1)
    f = fl.block_match_flow(textured, tgt, search_radius=3, patch=5)
    m = 3 + 2
    inner = f[m:-m, m:-m]
    assert np.all(inner[..., 0] == 2) and np.all(inner[..., 1] == 1)


def test_block_match_matches_exhaustive_search(rng):
    src = rng.integers(0, 256, (14, 14, 3), dtype=np.uint8)
    tgt = rng.integers(0, 256, (14, 14, 3), dtype=np.uint8)
    tgt[4:10, 4:10] = src[3:9, 5:11]
    f = fl.block_match_flow(src, tgt, search_radius=2, patch=3)
    for y in range(3, 11):
        for x in range(3, 11):
            assert tuple(f[y, x].astype(int)) == oracles.block_match_pixel(src, tgt, x, y, 2, 3)


def test_block_match_out_of_window(textured):
    tgt = shift_image(textured, 5, 0)
    f = fl.block_match_flow(textured, tgt, search_radius=3, patch=5)
    assert np.abs(f).max() <= 3
    gt = np.zeros_like(f)
    gt[..., 0] = 5
    assert fl.flow_stats(f, gt).mean_epe > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3))
def test_block_match_recovers_any_shift(dx, dy):
    src = np.random.default_rng(5).integers(0, 256, (24, 24, 3), dtype=np.uint8)
    f = fl.block_match_flow(src, shift_image(src, dx, dy), search_radius=3, patch=5)
    m = 6
    assert np.all(f[m:-m, m:-m] == (dx, dy))


def test_block_match_validation():
    a = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(DimensionMismatch):
        fl.block_match_flow(a, a, 1, 5)
    with pytest.raises(ValueError):
        fl.block_match_flow(a, a, 0, 3)
    with pytest.raises(ValueError):
        fl.block_match_flow(a, a, 1, 4)
    with pytest.raises(DimensionMismatch):
        fl.block_match_flow(a, np.zeros((5, 4, 3), np.uint8), 1, 3)


# ---------------------------------------------------------------- estimators

def test_estimate_identical_frames(textured):
    f = fl.estimate_flow(textured, textured)
    assert np.abs(f[..., 0]).mean() < 0.1 and np.abs(f[..., 1]).mean() < 0.1


def test_fixture_estimator_passthrough(tmp_path, textured, rng):
    recorded = rng.normal(size=textured.shape[:2] + (2,)).astype(np.float32)
    fl.write_flo(recorded, tmp_path / "f.flo")
    from flowsynth.imaging import write_image

    tgt = shift_image(textured, 1, 0)
    write_image(tmp_path / "a.png", textured)
    write_image(tmp_path / "b.png", tgt)
    (tmp_path / "pairs.tsv").write_text("a.png\tb.png\tf.flo\n")
    est = fl.FixtureEstimator.from_dir(tmp_path)
    out = fl.estimate_flow(textured, tgt, est)
    assert out.tobytes() == recorded.tobytes()
    with pytest.raises(EstimatorUnavailable):
        fl.estimate_flow(tgt, textured, est)


def test_unknown_estimator(monkeypatch, tmp_path):
    monkeypatch.setenv("FLOWSYNTH_ADAPTER_PATH", str(tmp_path))
    with pytest.raises(EstimatorUnavailable):
        fl.get_estimator("raft")


def test_external_estimator_adapter(monkeypatch, tmp_path, textured):
    script = tmp_path / "flowsynth-flow-const.py"
    script.write_text(
        "import sys\n"
        "import numpy as np\n"
        "from flowsynth.imaging import read_image\n"
        "from flowsynth.flow import write_flo\n"
        "src, tgt, out = sys.argv[1:4]\n"
        "h, w = read_image(src).shape[:2]\n"
        "f = np.zeros((h, w, 2), np.float32); f[..., 0] = 1.5\n"
        "write_flo(f, out)\n"
    )
    monkeypatch.setenv("FLOWSYNTH_ADAPTER_PATH", str(tmp_path))
    est = fl.get_estimator("const")
    assert est.reentrant  # serialized by the registry
    out = fl.estimate_flow(textured, textured, est)
    assert out.shape == textured.shape[:2] + (2,) and np.all(out[..., 0] == 1.5)


def test_registry_serializes_non_reentrant(textured):
    active = []
    overlap = []

    class Slow:
        name = "slow"
        reentrant = False

        def estimate(self, a, b):
            active.append(1)
            overlap.append(len(active))
            threading.Event().wait(0.01)
            active.pop()
            return np.zeros(a.shape[:2] + (2,), np.float32)

    est = fl._registered(Slow())
    threads = [threading.Thread(target=fl.estimate_flow, args=(textured, textured, est)) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert max(overlap) == 1


def test_estimate_dimension_mismatch(textured):
    with pytest.raises(DimensionMismatch):
        fl.estimate_flow(textured, textured[:-1])


# ---------------------------------------------------------------- colorize

def test_colorize_zero_is_white():
    assert np.all(fl.colorize_flow(fl.zero_flow(5, 7)) == 255)


def test_colorize_constant_red():
    f = np.zeros((4, 4, 2))
    f[..., 0] = 3.0
    img = fl.colorize_flow(f, max_magnitude=3.0)
    assert np.all(img == (255, 0, 0))


def _hue_deg(rgb):
    return rgb_to_hsv(rgb.astype(float) / 255.0)[..., 0] * 360


def test_colorize_two_regions_opposite():
    f = np.zeros((4, 8, 2))
    f[:, :4, 0] = 1
    f[:, 4:, 0] = -1
    img = fl.colorize_flow(f)
    colors = {tuple(c) for c in img.reshape(-1, 3)}
    assert len(colors) == 2
    hues = sorted(_hue_deg(np.array([c], np.uint8))[0] for c in colors)
    assert hues[1] - hues[0] == pytest.approx(180, abs=1e-9)


@pytest.mark.parametrize("k", range(8))
def test_colorize_rotation_equivariant(k):
    theta = k * np.pi / 4 + 0.3
    base = np.array([2.0, 0.5])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    f0 = np.broadcast_to(base, (3, 3, 2))
    f1 = np.broadcast_to(rot @ base, (3, 3, 2))
    m = np.hypot(*base)
    h0 = _hue_deg(fl.colorize_flow(f0, m))[0, 0]
    h1 = _hue_deg(fl.colorize_flow(f1, m))[0, 0]
    diff = (h1 - h0 - np.degrees(theta)) % 360
    assert min(diff, 360 - diff) < 1.0


def test_colorize_sparse_flow_uses_max():
    f = fl.zero_flow(20, 20)
    f[0, 0] = (1, 0)  # < 1% of pixels, so the 99th percentile is zero
    img = fl.colorize_flow(f)
    assert tuple(img[0, 0]) == (255, 0, 0) and tuple(img[5, 5]) == (255, 255, 255)


# ------------------------------------------------------------------- stats

def test_stats_epe():
    gt = np.random.default_rng(0).normal(size=(6, 6, 2))
    s = fl.flow_stats(gt, gt)
    assert s.mean_epe == 0 and s.max_epe == 0
    off = gt + np.array([3.0, 4.0])
    assert fl.flow_stats(off, gt).mean_epe == pytest.approx(5.0, abs=1e-12)
    assert fl.flow_stats(gt).mean_epe is None


def test_stats_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        fl.flow_stats(fl.zero_flow(3, 3), fl.zero_flow(3, 4))


def _dct_hf_ratio(block):
    """Direct orthonormal DCT-II by its defining sum."""
    n = block.shape[0]
    c = np.array([np.sqrt(1 / n)] + [np.sqrt(2 / n)] * (n - 1))
    coef = np.zeros((n, n))
    for k in range(n):
        for l in range(n):
            s = 0.0
            for y in range(n):
                for x in range(n):
                    s += block[y, x] * np.cos(np.pi * (2 * y + 1) * k / (2 * n)) * np.cos(np.pi * (2 * x + 1) * l / (2 * n))
            coef[k, l] = c[k] * c[l] * s
    e = coef**2
    return e[n // 2 :, n // 2 :].sum() / e.sum() if e.sum() else 0.0


def test_checkerboard_score():
    const = np.zeros((16, 16, 2))
    const[..., 0] = 1.0
    board = np.zeros((16, 16, 2))
    board[..., 0] = np.where((np.add.outer(np.arange(16), np.arange(16)) % 2) == 0, 1.0, -1.0)
    assert fl.checkerboard_score(board) > fl.checkerboard_score(const)
    assert fl.checkerboard_score(const) == pytest.approx(0.0, abs=1e-12)
    # u-channel is pure checkerboard, v is zero: average of 1 and 0
    assert fl.checkerboard_score(board) == pytest.approx(0.5 * _dct_hf_ratio(board[:8, :8, 0]))
    noise = np.random.default_rng(3).normal(size=(8, 8))
    f = np.stack([noise, noise * 0], -1)
    assert fl.checkerboard_score(f) == pytest.approx(0.5 * _dct_hf_ratio(noise))


def test_stats_transpose_invariant():
    rng = np.random.default_rng(1)
    f, g = rng.normal(size=(5, 7, 2)), rng.normal(size=(5, 7, 2))
    ft = f.transpose(1, 0, 2)[..., ::-1]
    gt = g.transpose(1, 0, 2)[..., ::-1]
    assert fl.flow_stats(ft, gt).mean_epe == pytest.approx(fl.flow_stats(f, g).mean_epe, rel=1e-12)


def test_affine_residual():
    h, w = 10, 12
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    f = np.stack([0.1 * xs - 0.2 * ys + 3, 0.05 * xs + 0.3 * ys - 1], -1)
    assert fl.affine_fit_residual(f).max() < 1e-9
    f[5, 5, 0] += 1
    assert fl.affine_fit_residual(f).max() > 0.5
