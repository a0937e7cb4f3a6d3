"""Minimal bridge child processes for testing the protocol.

``python -m advmesh.detectors.stub MODE`` where MODE is

* ``empty``: no detections, zero gradients;
* ``echo``: one fixed detection; backward returns the forwarded xyz;
* ``template``: the built-in template detector served over the wire;
* ``crash``: exits right after the handshake;
* ``garbage``: answers every request with a non-JSON line;
* ``sleep``: never answers a forward.
"""

from __future__ import annotations

import json
import sys
import time

import numpy as np

from ..boxes import Box3D, Detection
from .base import Detector
from .bridge import serve
from .template import TemplateDetector

FIXED = Detection(Box3D(10.0, -1.0 / 3.0, -0.98, 4.0, 1.7, 1.5, 0.1), 2.0 / 3.0, 0)


class EchoDetector(Detector):
    name = "echo"
    has_box_regression = True

    def __init__(self, dets):
        self.dets = list(dets)
        self.points = None

    def forward(self, cloud):
        self.points = np.asarray(cloud, dtype=float)[:, :3]
        return list(self.dets)

    def backward(self, dlogit, dbox=None):
        self._check_upstream(dlogit, dbox, len(self.dets))
        return self.points


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    mode = argv[0] if argv else "echo"
    if mode == "empty":
        det = EchoDetector([])
    elif mode == "echo":
        det = EchoDetector([FIXED])
    elif mode == "template":
        det = TemplateDetector()
    elif mode in ("crash", "garbage", "sleep"):
        for line in sys.stdin:
            op = json.loads(line).get("op")
            if op == "hello":
                reply = EchoDetector([]).capabilities()
                sys.stdout.write(json.dumps(reply) + "\n")
                sys.stdout.flush()
                if mode == "crash":
                    return 3
                continue
            if mode == "garbage":
                sys.stdout.write("this is not json\n")
                sys.stdout.flush()
            else:
                time.sleep(3600)
        return 0
    else:
        sys.stderr.write(f"unknown stub mode {mode!r}\n")
        return 2
    serve(det, sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
