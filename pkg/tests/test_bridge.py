import copy
import json
import struct
import sys

import numpy as np
import pytest

from advmesh.detectors.base import DetectorError
from advmesh.detectors.bridge import BridgeDetector, BridgeError, decode_detections, encode_detections, encode_frame
from advmesh.detectors.stub import FIXED
from advmesh.detectors.template import TemplateDetector


def stub(mode, **kw):
    return BridgeDetector([sys.executable, "-m", "advmesh.detectors.stub", mode], **kw)


def random_doubles(rng, n):
    """Doubles drawn from random bit patterns, skipping non-finite ones."""
    bits = rng.integers(0, 2**64, n, dtype=np.uint64)
    x = bits.view(np.float64)
    return x[np.isfinite(x)]


def test_frame_round_trip_is_bit_exact():
    rng = np.random.default_rng(0)
    x = np.concatenate([random_doubles(rng, 2000), [0.0, -0.0, 5e-324, 1.7976931348623157e308, 1 / 3]])
    back = np.array(json.loads(encode_frame({"v": x.tolist()}))["v"], dtype=float)
    assert back.tobytes() == x.tobytes()
    with pytest.raises(ValueError):
        encode_frame({"v": [float("nan")]})


def test_detection_codec_round_trip():
    dets = decode_detections(encode_detections([FIXED]))
    assert dets == [FIXED]
    assert struct.pack("d", dets[0].logit) == struct.pack("d", 2.0 / 3.0)
    with pytest.raises(BridgeError):
        decode_detections({"detections": [{"box": [1, 2, 3]}]})
    with pytest.raises(BridgeError):
        decode_detections({})


def test_echo_stub_is_lossless():
    det = stub("echo")
    try:
        assert det.name == "echo" and det.differentiable and det.has_box_regression and det.stages == 1
        rng = np.random.default_rng(1)
        cloud = np.column_stack([rng.normal(0, 30, (100, 3)), rng.uniform(0, 1, 100)])
        dets = det.forward(cloud)
        assert len(dets) == 1
        assert dets[0].box.to_array().tobytes() == FIXED.box.to_array().tobytes()
        assert dets[0].logit == FIXED.logit
        g = det.backward([1.0], np.zeros((1, 7)))
        assert g.shape == (100, 3)
        assert np.max(np.abs(g - cloud[:, :3])) <= 1e-12
        assert g.tobytes() == np.ascontiguousarray(cloud[:, :3]).tobytes()
        # xyz-only input is padded with zero intensity
        assert len(det.forward(cloud[:, :3])) == 1
    finally:
        det.close()


def test_empty_stub():
    det = stub("empty")
    try:
        assert det.forward(np.zeros((0, 4))) == []
        assert det.forward(np.ones((5, 4))) == []
        g = det.backward(np.zeros(0))
        assert g.shape == (5, 3)
    finally:
        det.close()


def test_template_over_the_wire_matches_in_process(small_scenes):
    local = TemplateDetector()
    det = stub("template")
    try:
        cloud = small_scenes[0].cloud
        a, b = local.forward(cloud), det.forward(cloud)
        assert [(d.box, d.logit) for d in a] == [(d.box, d.logit) for d in b]
        dl = np.random.default_rng(2).normal(size=len(a))
        assert np.array_equal(local.backward(dl), det.backward(dl))
        with pytest.raises(DetectorError):
            det.backward(np.zeros(len(a) + 2))
    finally:
        det.close()


def test_backward_before_forward_and_copy_guard():
    det = stub("echo")
    try:
        with pytest.raises(DetectorError):
            det.backward([1.0])
        with pytest.raises(DetectorError):
            copy.deepcopy(det)
        assert det.serial_only
    finally:
        det.close()


def test_child_crash_is_reported():
    det = stub("crash")
    with pytest.raises(BridgeError, match="exited"):
        det.forward(np.zeros((3, 4)))
    det.close()


def test_garbage_reply_is_reported_with_payload():
    det = stub("garbage")
    try:
        with pytest.raises(BridgeError) as info:
            det.forward(np.zeros((3, 4)))
        assert info.value.payload == "this is not json"
    finally:
        det.close()


def test_timeout_kills_the_child():
    det = stub("sleep", timeout=0.5)
    with pytest.raises(BridgeError, match="timed out"):
        det.forward(np.zeros((3, 4)))
    det.proc.wait(timeout=5)
    assert det.proc.returncode is not None


def test_missing_executable():
    with pytest.raises(BridgeError, match="cannot start"):
        BridgeDetector(["/nonexistent/detector-binary"])


def test_unknown_stub_mode_fails_handshake():
    with pytest.raises(BridgeError):
        stub("bogus")
