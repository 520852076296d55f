"""Wire protocol v1 for out-of-process inference backends.

Newline-delimited JSON over the child's stdin/stdout, strict request-response
(one in-flight request per connection). Requests carry an integer ``id`` and
an ``op`` of init, detect, segment, classify, or shutdown; responses echo the
id and carry ``status`` ok or error (with ``error_msg``). Rasters travel as
``{width, height, dtype: u8|f32, encoding: <base64 of little-endian row-major
bytes>, offset: [x, y]}``. Servers must answer unknown ops with an error
status rather than exiting.

Request payloads:

* init: ``{protocol_version: 1, model_role}`` -> ok echoes protocol_version;
* detect: ``{image: raster-u8}`` -> ``{candidates: [{mask: raster-u8,
  confidence}]}`` (nonzero bytes are foreground);
* segment: ``{patch: raster-u8, prompt: [x, y]}`` (prompt in patch
  coordinates) -> ``{logits: raster-f32}`` on the patch grid;
* classify: ``{point: [x, y], patch: raster-u8}`` (point in image
  coordinates) -> ``{tag: background|regular|spine_end, spine_end_kind}``;
* shutdown: ``{}`` -> ok, then the server exits.
"""

from __future__ import annotations

import base64
import json
import logging
import queue
import shlex
import subprocess
import threading

import numpy as np

from .backends import (
    DetectionCandidate,
    ImageContext,
    LogitMask,
    PatchClass,
)
from .errors import (
    BackendFailure,
    ChildExited,
    PayloadTooLarge,
    ProtocolViolation,
    ProtoTimeout,
    SchemaError,
)
from .geometry import BinaryMask, Patch, Point2D, extract_patch

log = logging.getLogger("spinefm.extproto")

PROTOCOL_VERSION = 1
MAX_PAYLOAD_BYTES = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0

_DTYPES = {"u8": np.uint8, "f32": np.float32}


def encode_raster(arr: np.ndarray, offset: tuple[int, int] = (0, 0)) -> dict:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint8:
        dtype = "u8"
    elif arr.dtype == np.float32:
        dtype = "f32"
    else:
        raise SchemaError(f"raster dtype {arr.dtype} not in (u8, f32)")
    if arr.ndim != 2:
        raise SchemaError("raster must be 2-D")
    if arr.nbytes > MAX_PAYLOAD_BYTES:
        raise PayloadTooLarge(f"{arr.nbytes} bytes > cap {MAX_PAYLOAD_BYTES}")
    raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return {
        "width": int(arr.shape[1]),
        "height": int(arr.shape[0]),
        "dtype": dtype,
        "encoding": base64.b64encode(raw).decode("ascii"),
        "offset": [int(offset[0]), int(offset[1])],
    }


def decode_raster(obj: dict, expect_dtype: str | None = None) -> tuple[np.ndarray, tuple[int, int]]:
    if not isinstance(obj, dict):
        raise SchemaError("raster payload is not an object")
    for key in ("width", "height", "dtype", "encoding", "offset"):
        if key not in obj:
            raise SchemaError(f"raster payload missing {key!r}")
    w, h = obj["width"], obj["height"]
    if not isinstance(w, int) or not isinstance(h, int) or w < 0 or h < 0:
        raise SchemaError(f"bad raster dims {w}x{h}")
    dtype = obj["dtype"]
    if dtype not in _DTYPES:
        raise SchemaError(f"raster dtype {dtype!r}")
    if expect_dtype is not None and dtype != expect_dtype:
        raise SchemaError(f"raster dtype {dtype!r}, expected {expect_dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype]).newbyteorder("<")
    if w * h * np_dtype.itemsize > MAX_PAYLOAD_BYTES:
        raise PayloadTooLarge(f"{w * h * np_dtype.itemsize} bytes > cap {MAX_PAYLOAD_BYTES}")
    try:
        raw = base64.b64decode(obj["encoding"], validate=True)
    except Exception as e:
        raise SchemaError(f"bad base64 raster: {e}") from e
    if len(raw) != w * h * np_dtype.itemsize:
        raise SchemaError(f"raster payload {len(raw)} bytes, expected {w * h * np_dtype.itemsize}")
    arr = np.frombuffer(raw, dtype=np_dtype).reshape(h, w).astype(_DTYPES[dtype])
    off = obj["offset"]
    if (not isinstance(off, (list, tuple)) or len(off) != 2
            or not all(isinstance(v, int) for v in off)):
        raise SchemaError(f"bad raster offset {off!r}")
    return arr, (off[0], off[1])


def encode_request(req_id: int, op: str, payload: dict | None = None) -> bytes:
    msg = {"id": int(req_id), "op": op}
    if payload:
        msg.update(payload)
    line = json.dumps(msg, sort_keys=True)
    if "\n" in line:
        raise SchemaError("request serialization produced an embedded newline")
    data = line.encode("utf-8")
    if len(data) > MAX_PAYLOAD_BYTES * 2:
        raise PayloadTooLarge(f"request line {len(data)} bytes")
    return data + b"\n"


def decode_response(line: bytes, expect_id: int) -> dict:
    try:
        msg = json.loads(line.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ProtocolViolation(f"malformed response line: {e}") from e
    if not isinstance(msg, dict):
        raise ProtocolViolation("response is not an object")
    if msg.get("id") != expect_id:
        raise ProtocolViolation(f"response id {msg.get('id')!r} != request id {expect_id}")
    status = msg.get("status")
    if status == "error":
        raise BackendFailure(f"backend error: {msg.get('error_msg', '(no message)')}")
    if status != "ok":
        raise ProtocolViolation(f"response status {status!r}")
    return msg


class SubprocessAdapter:
    """Owns one child process speaking protocol v1; strictly one request in flight."""

    def __init__(self, cmd: str | list[str], timeout: float = DEFAULT_TIMEOUT,
                 model_role: str = "spine-backend"):
        if isinstance(cmd, str):
            cmd = shlex.split(cmd)
        self.cmd = cmd
        self.timeout = timeout
        self.model_role = model_role
        self._next_id = 0
        self._lock = threading.Lock()
        self._lines: queue.Queue = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=None)
        except OSError as e:
            raise ChildExited(f"could not spawn {cmd!r}: {e}") from e
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        try:
            self._handshake()
        except BackendFailure:
            self.close(graceful=False)
            raise

    def _read_loop(self):
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(None)

    def _handshake(self):
        resp = self.call("init", {"protocol_version": PROTOCOL_VERSION,
                                  "model_role": self.model_role})
        if resp.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolViolation(
                f"server protocol_version {resp.get('protocol_version')!r}")

    def call(self, op: str, payload: dict | None = None) -> dict:
        """One request-response round trip; raises BackendFailure subclasses."""
        with self._lock:
            if self._proc.poll() is not None:
                raise ChildExited(f"backend exited with code {self._proc.returncode}")
            self._next_id += 1
            req_id = self._next_id
            data = encode_request(req_id, op, payload)
            try:
                self._proc.stdin.write(data)
                self._proc.stdin.flush()
            except (OSError, ValueError) as e:
                raise ChildExited(f"write to backend failed: {e}") from e
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise ProtoTimeout(f"no response to {op!r} within {self.timeout}s") from None
            if line is None:
                raise ChildExited(
                    f"backend closed its output (exit code {self._proc.poll()})")
            return decode_response(line, req_id)

    def close(self, graceful: bool = True):
        if self._proc.poll() is None:
            if graceful:
                try:
                    self._proc.stdin.write(encode_request(self._next_id + 1, "shutdown"))
                    self._proc.stdin.flush()
                except (OSError, ValueError):
                    pass
                try:
                    self._proc.wait(timeout=2.0)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                    self._proc.wait()
            else:
                self._proc.kill()
                self._proc.wait()
        try:
            self._proc.stdin.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ExternalBackend:
    """Detector, segmenter and classifier served by one protocol-v1 child."""

    def __init__(self, adapter: SubprocessAdapter):
        self.adapter = adapter

    def detect(self, image: np.ndarray) -> list[DetectionCandidate]:
        resp = self.adapter.call("detect", {"image": encode_raster(image)})
        raw = resp.get("candidates")
        if not isinstance(raw, list):
            raise ProtocolViolation("detect response missing candidates list")
        candidates = []
        for item in raw:
            if not isinstance(item, dict) or "mask" not in item or "confidence" not in item:
                raise ProtocolViolation(f"bad candidate {item!r}")
            arr, offset = decode_raster(item["mask"], "u8")
            conf = item["confidence"]
            if not isinstance(conf, (int, float)) or isinstance(conf, bool):
                raise ProtocolViolation(f"bad confidence {conf!r}")
            try:
                candidates.append(DetectionCandidate(BinaryMask(arr != 0, offset), float(conf)))
            except ValueError as e:
                raise ProtocolViolation(f"bad candidate: {e}") from e
        return candidates

    def segment(self, patch: Patch, prompt: Point2D) -> LogitMask:
        resp = self.adapter.call("segment", {
            "patch": encode_raster(patch.pixels, patch.offset),
            "prompt": [prompt.x, prompt.y],
        })
        if "logits" not in resp:
            raise ProtocolViolation("segment response missing logits")
        arr, offset = decode_raster(resp["logits"], "f32")
        if arr.shape != patch.pixels.shape or offset != patch.offset:
            raise ProtocolViolation("segment response not aligned to the patch grid")
        return LogitMask(arr, offset)

    def classify(self, point: Point2D, context: ImageContext) -> PatchClass:
        patch = extract_patch(context.image, point, context.patch_size)
        resp = self.adapter.call("classify", {
            "point": [point.x, point.y],
            "patch": encode_raster(patch.pixels, patch.offset),
        })
        tag = resp.get("tag")
        kind = resp.get("spine_end_kind")
        try:
            return PatchClass(tag, kind)
        except ValueError as e:
            raise ProtocolViolation(f"bad classify response: {e}") from e
