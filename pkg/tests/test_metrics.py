import math

import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from qncd.core import Rng
from qncd.inter import sample_loop
from qncd.metrics import (
    LAYERS_HEADER, SUMMARY_HEADER, channel_range_ratio, cosine_similarity, export_csv, fmt,
    layer_error_profile, random_directions, read_csv, sliced_wasserstein, snr, trajectory_header, trajectory_rows,
    wasserstein_1d,
)
from qncd.quantizer import collect_calibration, quantize_model
from qncd.schedule import linear_schedule


def test_snr_examples():
    a = np.array([3.0, 4.0])
    assert snr(a, a) == math.inf
    assert snr(a, a + np.array([0.0, 5.0])) == pytest.approx(0.0, abs=1e-12)
    sig = np.array([10.0, 0.0])
    assert snr(sig, sig + np.array([0.0, 1.0])) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ValueError):
        snr(np.zeros(2), a)
    with pytest.raises(ValueError):
        snr(a, np.ones(3))


def test_snr_decreases_with_noise_variance():
    gen = Rng(0).stream("s")
    e = gen.standard_normal(10_000)
    z = gen.standard_normal(10_000)
    vals = [snr(e, e + s * z) for s in (0.01, 0.1, 0.5, 1.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_cosine_examples():
    v = np.array([1.0, -2.0, 0.5])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-15)
    assert abs(cosine_similarity([1.0, 1.0], [1.0, -1.0])) < 1e-12
    with pytest.raises(ValueError):
        cosine_similarity(np.zeros(3), v)


def test_w1_against_scipy():
    gen = Rng(1).stream("w")
    for n, m in ((100, 100), (37, 91), (5, 2)):
        u, v = gen.standard_normal(n), gen.standard_normal(m) * 2 + 1
        assert wasserstein_1d(u, v) == pytest.approx(wasserstein_distance(u, v), rel=1e-10)


def test_swd_examples():
    gen = Rng(2).stream("x")
    a = gen.standard_normal((300, 2))
    assert sliced_wasserstein(a, a.copy(), 64, 0) == 0.0
    pa, pb = np.zeros((10, 1)), np.full((10, 1), 2.5)
    for k in (1, 7):
        assert sliced_wasserstein(pa, pb, k, 3) == pytest.approx(2.5, rel=1e-15)


def test_swd_symmetric_and_errors():
    gen = Rng(3).stream("x")
    a, b = gen.standard_normal((200, 2)), gen.standard_normal((150, 2)) + 0.3
    assert sliced_wasserstein(a, b, 32, 5) == pytest.approx(sliced_wasserstein(b, a, 32, 5), rel=1e-12)
    with pytest.raises(ValueError):
        sliced_wasserstein(a[:1], b)
    with pytest.raises(ValueError):
        sliced_wasserstein(a, np.ones((5, 3)))


def test_swd_matches_reference_implementation():
    gen = Rng(4).stream("g")
    a = gen.standard_normal((10_000, 2))
    b = gen.standard_normal((10_000, 2)) + np.array([1.0, 0.0])
    got = sliced_wasserstein(a, b, 128, 7)
    # reference: the same projection directions, scipy's 1-D W1
    dirs = random_directions(2, 128, Rng(7).stream("swd"))
    ref = np.mean([wasserstein_distance(a @ d, b @ d) for d in dirs])
    assert abs(got - ref) <= 0.05 * ref
    assert got == pytest.approx(ref, rel=1e-10)
    # closed form for a unit shift: E|cos(theta)| over uniform directions = 2/pi
    assert sliced_wasserstein(a, b, 2048, 8) == pytest.approx(2 / np.pi, rel=0.05)


def test_channel_range_ratio():
    x = np.array([[1.0, 2.0, 3.0, -40.0]])
    assert channel_range_ratio([x]) == pytest.approx(40.0 / 2.5)


# ---------------------------------------------------------------- layer profiles

@pytest.fixture(scope="module")
def q8(fp_model, schedule):
    calib = collect_calibration(fp_model, schedule, 256, Rng(5))
    return quantize_model(fp_model, calib, "W8A8")


def test_profile_all_ones_without_quantization(fp_model, q8):
    x = Rng(6).stream("x").standard_normal((64, 2))
    everything = set(fp_model.hook_names()) | set(fp_model.weight_names())
    rows = layer_error_profile(fp_model, q8, x, 50, disabled=everything)
    assert [r.hook for r in rows] == fp_model.hook_names() + ["output"]
    assert all(r.cosine == 1.0 and r.mse == 0.0 for r in rows)


def test_profile_is_causal(fp_model, q8):
    # disable every quantizer after hook k: hooks up to k are unchanged
    x = Rng(7).stream("x").standard_normal((64, 2))
    names = fp_model.hook_names()
    full = layer_error_profile(fp_model, q8, x, 50)
    k = 5
    later = set(names[k + 1:]) | {w for w in fp_model.weight_names() if int(w.split(".")[1]) > 1}
    part = layer_error_profile(fp_model, q8, x, 50, disabled=later)
    for a, b in zip(full[: k + 1], part[: k + 1]):
        assert (a.cosine, a.mse) == (b.cosine, b.mse)
    assert part[-1].mse != full[-1].mse


def test_profile_dips_at_fusion_hooks(fp_model, q8):
    # error peaks at each fusion output and drops again at the next hook
    x = Rng(8).stream("x").standard_normal((256, 2))
    rows = layer_error_profile(fp_model, q8, x, 50)
    names = [r.hook for r in rows]
    for i in range(3):
        k = names.index(f"blocks.{i}.fused")
        assert rows[k].mse > rows[k - 1].mse and rows[k].mse > rows[k + 1].mse
        assert rows[k].cosine < rows[k - 1].cosine


def test_profile_architecture_mismatch(fp_model, q8):
    from qncd.denoiser import init_model
    with pytest.raises(ValueError):
        layer_error_profile(init_model(hidden=32), q8, np.zeros((2, 2)), 5)


# ---------------------------------------------------------------- CSV

def test_fmt():
    assert fmt(True) == "1" and fmt(np.bool_(False)) == "0"
    assert fmt(math.inf) == "inf" and fmt(-math.inf) == "-inf"
    assert fmt(0.1) == "0.1" and fmt(np.int64(3)) == "3"


def _runs():
    s = linear_schedule(10, 0.01, 0.1)
    a = sample_loop(lambda x, t: 0.3 * x, s, 4, 2, Rng(9))
    b = sample_loop(lambda x, t: 0.3 * x + 0.01, s, 4, 2, Rng(9))
    return a, b


def test_csv_headers_and_golden(tmp_path):
    a, b = _runs()
    traj = trajectory_rows("fp", a) + trajectory_rows("q", b, a)
    summary = [["q", "W8A8", True, 4, "mean_only", 0, 0.25, 0.5, 104]]
    paths = export_csv(tmp_path, 2, traj, summary, [["q", "blocks.0.in", 1.0, 0.0]])
    h, rows = read_csv(paths["trajectory"])
    assert h == ["run_id", "step_index", "t", "mean_0", "mean_1", "std_0", "std_1",
                 "snr_db", "cosine", "is_estimation_step"]
    assert h == trajectory_header(2)
    assert len(rows) == 20 and rows[0][7] == "inf" and rows[0][-1] == "0"
    assert read_csv(paths["summary"])[0] == SUMMARY_HEADER
    assert (tmp_path / "summary.csv").read_text() == (
        ",".join(SUMMARY_HEADER) + "\nq,W8A8,1,4,mean_only,0,0.25,0.5,104\n")
    assert read_csv(paths["layers"])[0] == LAYERS_HEADER
    assert (tmp_path / "layers.csv").read_text().splitlines()[1] == "q,blocks.0.in,1.0,0.0"


def test_reexport_is_idempotent(tmp_path):
    a, b = _runs()
    traj = trajectory_rows("fp", a) + trajectory_rows("q", b, a)
    export_csv(tmp_path / "1", 2, traj, [], [])
    export_csv(tmp_path / "2", 2, traj, [], [])
    first = (tmp_path / "1" / "trajectory.csv").read_bytes()
    assert first == (tmp_path / "2" / "trajectory.csv").read_bytes()
    _, rows = read_csv(tmp_path / "1" / "trajectory.csv")
    assert float(rows[12][3]) == b.records[2].mean[0]


def test_write_error_names_path(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("x")
    with pytest.raises(OSError, match="f"):
        export_csv(blocker, 2, [], [], [])
