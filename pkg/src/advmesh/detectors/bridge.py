"""Client for detectors running in a separate process.

Frames are newline-delimited JSON over the child's stdin/stdout. Python's
``json`` writes floats with ``repr`` so doubles survive the round trip
bit for bit.
"""

from __future__ import annotations

import json
import logging
import selectors
import shlex
import subprocess
import time

import numpy as np

from ..boxes import Box3D, Detection
from .base import Detector, DetectorError

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


class BridgeError(DetectorError):
    """Protocol or process failure; ``payload`` holds the offending raw text, if any."""

    def __init__(self, message: str, payload: str | None = None):
        super().__init__(message if payload is None else f"{message}: {payload[:200]!r}")
        self.payload = payload


def encode_frame(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode()


def decode_detections(frame: dict) -> list[Detection]:
    try:
        return [Detection(Box3D.from_array([float(v) for v in d["box"]]), float(d["logit"]),
                          int(d.get("label", 0)))
                for d in frame["detections"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise BridgeError(f"malformed forward reply ({exc})", json.dumps(frame)) from None


def encode_detections(dets) -> dict:
    return {"detections": [{"box": [float(v) for v in d.box.to_array()], "logit": float(d.logit),
                            "label": int(d.label)} for d in dets]}


class BridgeDetector(Detector):
    """Proxy for an external detector process.

    ``stage`` selects which stage's loss the child should backpropagate
    for two-stage detectors; it is sent with every backward frame.
    """

    serial_only = True

    def __init__(self, command, timeout: float = DEFAULT_TIMEOUT, stage: str = "single"):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = float(timeout)
        self.stage = stage
        self._n_points = None
        self._n_det = None
        try:
            self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                         stderr=subprocess.PIPE)
        except OSError as exc:
            raise BridgeError(f"cannot start bridge process {self.command!r}: {exc}") from None
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        self._buf = b""
        hello = self._request({"op": "hello"})
        try:
            self.name = str(hello["name"])
            self.differentiable = bool(hello["differentiable"])
            self.has_box_regression = bool(hello["has_box_regression"])
            self.stages = int(hello["stages"])
        except (KeyError, TypeError, ValueError):
            self.close()
            raise BridgeError("malformed handshake", json.dumps(hello)) from None

    # -- wire

    def _readline(self) -> bytes:
        deadline = time.monotonic() + self.timeout
        while b"\n" not in self._buf:
            left = deadline - time.monotonic()
            if left <= 0 or not self._sel.select(left):
                self.proc.kill()           # the stream is out of sync now
                raise BridgeError(f"bridge timed out after {self.timeout:g} s", self._buf.decode(errors="replace"))
            chunk = self.proc.stdout.read1(65536)
            if not chunk:
                try:
                    code = self.proc.wait(timeout=5)
                    err = self.proc.stderr.read().decode(errors="replace").strip()
                except subprocess.TimeoutExpired:
                    code, err = None, ""
                raise BridgeError(f"bridge process exited (code {code}) {err}".strip(),
                                  self._buf.decode(errors="replace"))
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def _request(self, frame: dict) -> dict:
        if self.proc.poll() is not None:
            raise BridgeError(f"bridge process exited (code {self.proc.returncode})")
        try:
            self.proc.stdin.write(encode_frame(frame))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BridgeError(f"cannot write to bridge process: {exc}") from None
        raw = self._readline().decode(errors="replace")
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError:
            raise BridgeError("malformed frame", raw) from None
        if not isinstance(reply, dict):
            raise BridgeError("malformed frame", raw)
        if "error" in reply:
            raise BridgeError(f"bridge reported an error: {reply['error']}", raw)
        return reply

    # -- contract

    def forward(self, cloud: np.ndarray) -> list[Detection]:
        pts = np.asarray(cloud, dtype=float)
        pts = pts.reshape(len(pts), -1) if len(pts) else np.zeros((0, 4))
        if pts.shape[1] == 3:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        reply = self._request({"op": "forward", "points": pts.tolist()})
        dets = decode_detections(reply)
        self._n_points, self._n_det = len(pts), len(dets)
        return dets

    def backward(self, dlogit, dbox=None) -> np.ndarray:
        if self._n_det is None:
            raise DetectorError("backward called before forward")
        if not self.differentiable:
            raise DetectorError(f"bridge detector {self.name!r} is not differentiable")
        dlogit, dbox = self._check_upstream(dlogit, dbox, self._n_det)
        frame = {"op": "backward", "dlogit": dlogit.tolist(), "dbox": dbox.tolist()}
        if self.stage != "single":
            frame["stage"] = self.stage
        reply = self._request(frame)
        try:
            g = np.array(reply["dpoints"], dtype=float).reshape(-1, 3)
        except (KeyError, TypeError, ValueError):
            raise BridgeError("malformed backward reply", json.dumps(reply)) from None
        if len(g) != self._n_points:
            raise BridgeError(f"backward returned {len(g)} gradients for {self._n_points} points")
        return g

    def close(self):
        if getattr(self, "proc", None) is None or self.proc.poll() is not None:
            return
        try:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            self.proc.kill()
            self.proc.wait()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def __deepcopy__(self, memo):
        raise DetectorError("bridge detectors cannot be copied; evaluate serially")


def serve(detector: Detector, stdin, stdout):
    """Serve ``detector`` over the bridge protocol until stdin closes.

    Lets any in-process detector act as a bridge child (used by the
    stub children and the tests).
    """
    for line in stdin:
        if not line.strip():
            continue
        try:
            frame = json.loads(line)
            op = frame.get("op")
            if op == "hello":
                reply = detector.capabilities()
            elif op == "forward":
                reply = encode_detections(detector.forward(np.array(frame["points"], dtype=float).reshape(-1, 4)))
            elif op == "backward":
                g = detector.backward(frame["dlogit"], frame.get("dbox"))
                reply = {"dpoints": np.asarray(g, dtype=float).reshape(-1, 3).tolist()}
            else:
                reply = {"error": f"unknown op {op!r}"}
        except Exception as exc:        # report, keep serving
            reply = {"error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(reply, separators=(",", ":")) + "\n")
        stdout.flush()
