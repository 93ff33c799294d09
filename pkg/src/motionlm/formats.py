"""Binary and text artifact formats (little-endian throughout).

``.mseq``  magic ``MSEQ1``, u32 joints, u32 frames, f32 fps, f32 p0[3],
           f32 R0[9] (row-major), frames x 279 f32.
``.mtok``  magic ``MTOK1``, u32 N, u32 K, u32 r, u32 count, f32 fps,
           count x u32 tokens (frame-major).
``.vemb``  magic ``VEMB1``, u32 dim, u32 frames, frames x dim f32.
stream     repeated ``u32 nbytes`` + payload of f32 (sensor block, then an
           optional video block).
manifest   one JSON object per line.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import FormatError
from .kinematics import FRAME_DIM, N_JOINTS, MotionSequence, Skeleton, default_skeleton

MSEQ_MAGIC = b"MSEQ1"
MTOK_MAGIC = b"MTOK1"
VEMB_MAGIC = b"VEMB1"


def _read_exact(buf: bytes, offset: int, n: int) -> bytes:
    if offset + n > len(buf):
        raise FormatError("file truncated")
    return buf[offset:offset + n]


def mseq_bytes(m: MotionSequence) -> bytes:
    head = MSEQ_MAGIC + struct.pack("<IIf", N_JOINTS, m.T, m.fps)
    head += np.asarray(m.initial_root_position, dtype="<f4").tobytes()
    head += np.asarray(m.initial_root_rotation, dtype="<f4").reshape(9).tobytes()
    return head + np.ascontiguousarray(m.frames, dtype="<f4").tobytes()


def write_mseq(path, m: MotionSequence):
    Path(path).write_bytes(mseq_bytes(m))


def parse_mseq(buf: bytes, skeleton: Skeleton | None = None) -> MotionSequence:
    if _read_exact(buf, 0, 5) != MSEQ_MAGIC:
        raise FormatError("not an MSEQ1 file")
    joints, frames, fps = struct.unpack("<IIf", _read_exact(buf, 5, 12))
    if joints != N_JOINTS:
        raise FormatError(f"motion file has {joints} joints, expected {N_JOINTS}")
    p0 = np.frombuffer(_read_exact(buf, 17, 12), dtype="<f4").astype(np.float64)
    R0 = np.frombuffer(_read_exact(buf, 29, 36), dtype="<f4").astype(np.float64).reshape(3, 3)
    body = _read_exact(buf, 65, frames * FRAME_DIM * 4)
    if len(buf) != 65 + len(body):
        raise FormatError("trailing bytes in motion file")
    data = np.frombuffer(body, dtype="<f4").reshape(frames, FRAME_DIM).astype(np.float32)
    # f32 storage of R0 loses a little orthonormality; re-orthonormalise.
    u, _, vt = np.linalg.svd(R0)
    R0 = u @ vt
    return MotionSequence(data, fps=float(fps), skeleton=skeleton or default_skeleton(),
                          initial_root_position=p0, initial_root_rotation=R0)


def read_mseq(path, skeleton: Skeleton | None = None) -> MotionSequence:
    return parse_mseq(Path(path).read_bytes(), skeleton)


def write_mtok(path, ts):
    head = MTOK_MAGIC + struct.pack("<IIIIf", ts.n_codebooks, ts.codebook_size, ts.down_rate,
                                    len(ts.tokens), ts.fps)
    Path(path).write_bytes(head + np.asarray(ts.tokens, dtype="<u4").tobytes())


def read_mtok(path):
    from .vqvae import TokenStream

    buf = Path(path).read_bytes()
    if _read_exact(buf, 0, 5) != MTOK_MAGIC:
        raise FormatError("not an MTOK1 file")
    N, K, r, count, fps = struct.unpack("<IIIIf", _read_exact(buf, 5, 20))
    body = _read_exact(buf, 25, 4 * count)
    if len(buf) != 25 + len(body):
        raise FormatError("trailing bytes in token file")
    tokens = np.frombuffer(body, dtype="<u4").astype(np.int64)
    return TokenStream(tokens, N, K, r, fps=float(fps))


def write_vemb(path, data: np.ndarray):
    data = np.asarray(data, dtype="<f4")
    Path(path).write_bytes(VEMB_MAGIC + struct.pack("<II", data.shape[1], data.shape[0]) + data.tobytes())


def read_vemb(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if _read_exact(buf, 0, 5) != VEMB_MAGIC:
        raise FormatError("not a VEMB1 file")
    dim, frames = struct.unpack("<II", _read_exact(buf, 5, 8))
    body = _read_exact(buf, 13, 4 * dim * frames)
    if len(buf) != 13 + len(body):
        raise FormatError("trailing bytes in video embedding file")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float32)


def write_manifest(path, rows: list[dict]):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: {exc}") from exc
    return rows


def write_stream_frame(fh: BinaryIO, sensor: np.ndarray, video: np.ndarray | None = None):
    payload = np.asarray(sensor, dtype="<f4").tobytes()
    if video is not None:
        payload += np.asarray(video, dtype="<f4").tobytes()
    fh.write(struct.pack("<I", len(payload)) + payload)


def iter_stream_frames(fh: BinaryIO, sensor_width: int, video_dim: int) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    """Yield ``(sensor, video_or_None)`` per length-prefixed frame."""
    while True:
        head = fh.read(4)
        if not head:
            return
        if len(head) < 4:
            raise FormatError("truncated frame header")
        (n,) = struct.unpack("<I", head)
        payload = fh.read(n)
        if len(payload) != n:
            raise FormatError("truncated frame payload")
        vals = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if len(vals) == sensor_width:
            yield vals, None
        elif len(vals) == sensor_width + video_dim:
            yield vals[:sensor_width], vals[sensor_width:]
        else:
            raise FormatError(f"frame of {len(vals)} floats matches neither {sensor_width} "
                              f"nor {sensor_width + video_dim}")
